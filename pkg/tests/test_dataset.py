import numpy as np
import pytest

from semsatlink.dataset import (
    Scene,
    SceneSpec,
    generate_correlated_pair,
    generate_scene,
    read_gray,
    read_image,
    write_gray,
    write_image,
)


class TestSceneSpec:
    def test_defaults_valid(self):
        spec = SceneSpec()
        assert spec.height % 32 == 0 and spec.width % 32 == 0

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError, match="divisible by 32"):
            SceneSpec(height=60, width=32)

    def test_rejects_small_palette(self):
        with pytest.raises(ValueError):
            SceneSpec(num_categories=1)

    def test_rejects_out_of_range_required_category(self):
        with pytest.raises(ValueError, match="outside palette"):
            SceneSpec(num_categories=3, required_categories=(3,))

    def test_kind_cycle(self):
        spec = SceneSpec(num_categories=4)
        assert spec.category_kind(1) == "rectangle"
        assert spec.category_kind(2) == "disk"
        assert spec.category_kind(3) == "triangle"
        assert spec.dynamic_categories() == (2, 3)


class TestGenerateScene:
    def test_deterministic(self):
        spec = SceneSpec()
        a = generate_scene(spec, 42)
        b = generate_scene(spec, 42)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.segmap, b.segmap)
        np.testing.assert_array_equal(a.importance_mask, b.importance_mask)

    def test_different_seeds_differ(self):
        spec = SceneSpec()
        a = generate_scene(spec, 1)
        b = generate_scene(spec, 2)
        assert not np.array_equal(a.image, b.image)

    def test_empty_scene(self):
        scene = generate_scene(SceneSpec(num_objects=0), 0)
        assert (scene.segmap == 0).all()
        assert (scene.importance_mask == 0).all()

    def test_mask_matches_required_categories_exactly(self):
        # exhaustive pixel scan over several seeds
        spec = SceneSpec(num_objects=6)
        for seed in range(10):
            scene = generate_scene(spec, seed)
            for y in range(spec.height):
                for x in range(spec.width):
                    expected = int(scene.segmap[y, x]
                                   in spec.required_categories)
                    assert scene.importance_mask[y, x] == expected

    def test_categories_within_palette(self):
        spec = SceneSpec(num_objects=8)
        for seed in range(5):
            scene = generate_scene(spec, seed)
            assert scene.segmap.max() < spec.num_categories

    def test_image_range_and_shape(self):
        spec = SceneSpec()
        scene = generate_scene(spec, 3)
        assert scene.image.shape == (spec.height, spec.width, 3)
        assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0

    def test_full_occlusion_fails_after_retries(self):
        # every object spans the whole canvas from any center, so the
        # second always buries the first
        spec = SceneSpec(height=32, width=32, num_objects=2,
                         num_categories=2, required_categories=(1,),
                         object_scale=(4.0, 4.0))
        with pytest.raises(RuntimeError, match="100 attempts"):
            generate_scene(spec, 0)

    def test_objects_actually_rendered(self):
        spec = SceneSpec(num_objects=4)
        scene = generate_scene(spec, 7)
        assert (scene.segmap > 0).any()


class TestCorrelatedPair:
    def test_backgrounds_identical_outside_objects(self):
        spec = SceneSpec(num_objects=5)
        a, b = generate_correlated_pair(spec, 11)
        outside = (a.segmap == 0) & (b.segmap == 0)
        assert outside.any()
        np.testing.assert_array_equal(a.image[outside], b.image[outside])

    def test_static_objects_shared(self):
        spec = SceneSpec(num_objects=6, num_categories=4)
        a, b = generate_correlated_pair(spec, 5)
        static = (a.segmap == 1) | (b.segmap == 1)
        if static.any():
            np.testing.assert_array_equal(a.segmap[static], b.segmap[static])

    def test_zero_dynamic_objects_gives_identical_images(self):
        # palette of size 2 only has the rectangle category
        spec = SceneSpec(num_objects=3, num_categories=2,
                         required_categories=(1,))
        a, b = generate_correlated_pair(spec, 9)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.segmap, b.segmap)

    def test_pairs_beat_independent_seeds_on_background_correlation(self):
        spec = SceneSpec(num_objects=4)
        paired, independent = [], []
        for seed in range(100):
            a, b = generate_correlated_pair(spec, seed)
            m = (a.segmap == 0) & (b.segmap == 0)
            paired.append(np.corrcoef(a.image[m].ravel(),
                                      b.image[m].ravel())[0, 1])
            c = generate_scene(spec, 10_000 + 2 * seed)
            d = generate_scene(spec, 10_001 + 2 * seed)
            m2 = (c.segmap == 0) & (d.segmap == 0)
            independent.append(np.corrcoef(c.image[m2].ravel(),
                                           d.image[m2].ravel())[0, 1])
        assert np.mean(paired) > np.mean(independent)

    def test_deterministic(self):
        spec = SceneSpec()
        a1, b1 = generate_correlated_pair(spec, 3)
        a2, b2 = generate_correlated_pair(spec, 3)
        np.testing.assert_array_equal(a1.image, a2.image)
        np.testing.assert_array_equal(b1.image, b2.image)


class TestSceneInvariants:
    def test_scene_validates_shapes(self):
        with pytest.raises(ValueError):
            Scene(np.zeros((4, 4, 3)), np.zeros((4, 5), dtype=np.uint8),
                  np.zeros((4, 5), dtype=np.uint8), "x")

    def test_scene_validates_binary_mask(self):
        with pytest.raises(ValueError, match="binary"):
            Scene(np.zeros((4, 4, 3)), np.zeros((4, 4), dtype=np.uint8),
                  np.full((4, 4), 2, dtype=np.uint8), "x")


class TestImageIO:
    def test_round_trip_within_quantization(self, tmp_path):
        img = np.random.default_rng(0).random((16, 8, 3))
        path = str(tmp_path / "img.ppm")
        write_image(img, path)
        back = read_image(path)
        assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-12

    def test_one_by_one_black_payload(self, tmp_path):
        path = str(tmp_path / "black.ppm")
        write_image(np.zeros((1, 1, 3)), path)
        data = open(path, "rb").read()
        assert data == b"P6\n1 1\n255\n\x00\x00\x00"

    def test_text_file_is_format_error(self, tmp_path):
        path = str(tmp_path / "notes.txt")
        path_obj = tmp_path / "notes.txt"
        path_obj.write_text("hello, this is not an image\n")
        with pytest.raises(ValueError, match="byte offset 0"):
            read_image(path)

    def test_truncated_payload_reports_offset(self, tmp_path):
        path = str(tmp_path / "img.ppm")
        write_image(np.ones((4, 4, 3)), path)
        data = open(path, "rb").read()
        with open(path, "wb") as fh:
            fh.write(data[:-10])
        with pytest.raises(ValueError, match="truncated payload"):
            read_image(path)

    def test_gray_round_trip_exact(self, tmp_path):
        grid = np.random.default_rng(1).integers(
            0, 4, (8, 16)).astype(np.uint8)
        path = str(tmp_path / "seg.pgm")
        write_gray(grid, path)
        np.testing.assert_array_equal(read_gray(path), grid)

    def test_header_comment_supported(self, tmp_path):
        path = str(tmp_path / "c.pgm")
        with open(path, "wb") as fh:
            fh.write(b"P5\n# a comment\n2 2\n255\n\x01\x02\x03\x04")
        grid = read_gray(path)
        np.testing.assert_array_equal(grid, [[1, 2], [3, 4]])

    def test_maxval_restriction(self, tmp_path):
        path = str(tmp_path / "m.pgm")
        with open(path, "wb") as fh:
            fh.write(b"P5\n2 2\n65535\n" + bytes(8))
        with pytest.raises(ValueError, match="maxval"):
            read_gray(path)
