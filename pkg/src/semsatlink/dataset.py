"""Synthetic scene generation and image file IO.

Scenes are smooth textured backgrounds with filled geometric primitives
on top. Each primitive kind maps to a segmentation category, so every
scene carries pixel-exact ground truth: a category map and a binary
importance mask that marks the categories the receiver must get right.

Rectangles are static scenery; disks and triangles are dynamic objects.
Correlated scene pairs share the background and all static objects and
differ only in the dynamic ones, mimicking two shots of the same place
taken at different moments.

Images are float64 (H, W, 3) in [0, 1]. Segmentation maps and masks
are uint8 (H, W). Files use binary PPM (P6) for images and PGM (P5)
for single-channel grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Sequence, Tuple

import numpy as np

KIND_RECTANGLE = "rectangle"
KIND_DISK = "disk"
KIND_TRIANGLE = "triangle"
_KIND_CYCLE = (KIND_RECTANGLE, KIND_DISK, KIND_TRIANGLE)
_STATIC_KINDS = frozenset({KIND_RECTANGLE})

_PALETTE = np.array([
    [0.85, 0.25, 0.25],
    [0.25, 0.55, 0.90],
    [0.92, 0.78, 0.20],
    [0.35, 0.80, 0.40],
    [0.75, 0.35, 0.85],
    [0.95, 0.55, 0.20],
])

_MAX_PLACEMENT_ATTEMPTS = 100
_DYNAMIC_PRESENCE = 0.85


@dataclass
class SceneSpec:
    """Geometry and palette parameters for generated scenes.

    Height and width must be divisible by 32 so a scene survives the
    semantic encoder's 32x downsampling without padding.
    """

    height: int = 64
    width: int = 32
    num_objects: int = 4
    num_categories: int = 4
    background_seed: int = 0
    required_categories: Tuple[int, ...] = (2, 3)
    object_scale: Tuple[float, float] = (0.18, 0.40)

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ValueError(f"height and width must be divisible by 32, "
                             f"got {self.height}x{self.width}")
        if self.num_categories < 2:
            raise ValueError("need at least background plus one category")
        if self.num_objects < 0:
            raise ValueError("num_objects cannot be negative")
        for c in self.required_categories:
            if not 0 <= c < self.num_categories:
                raise ValueError(f"required category {c} outside palette "
                                 f"[0, {self.num_categories})")
        lo, hi = self.object_scale
        if not 0 < lo <= hi:
            raise ValueError(f"bad object_scale {self.object_scale}")

    def category_kind(self, category: int) -> str:
        if not 1 <= category < self.num_categories:
            raise ValueError(f"no primitive kind for category {category}")
        return _KIND_CYCLE[(category - 1) % len(_KIND_CYCLE)]

    def dynamic_categories(self) -> Tuple[int, ...]:
        return tuple(c for c in range(1, self.num_categories)
                     if self.category_kind(c) not in _STATIC_KINDS)


@dataclass
class Scene:
    image: np.ndarray
    segmap: np.ndarray
    importance_mask: np.ndarray
    scene_id: str

    def __post_init__(self):
        h, w = self.segmap.shape
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image {self.image.shape} does not match "
                             f"segmap {self.segmap.shape}")
        if self.importance_mask.shape != (h, w):
            raise ValueError("importance mask shape mismatch")
        if not np.isin(self.importance_mask, (0, 1)).all():
            raise ValueError("importance mask must be binary")


@dataclass
class _Primitive:
    category: int
    kind: str
    color: np.ndarray
    size: float
    # filled by placement
    cx: float = 0.0
    cy: float = 0.0
    aspect: float = 1.0
    angles: Tuple[float, float, float] = (0.0, 2.1, 4.2)


def _background(spec: SceneSpec, scene_seed: int) -> np.ndarray:
    """Smooth low-frequency texture, deterministic per (spec, scene)."""
    rng = np.random.default_rng([spec.background_seed, scene_seed])
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    img = np.empty((h, w, 3))
    for ch in range(3):
        plane = np.full((h, w), 0.32 + rng.uniform(-0.05, 0.05))
        for _ in range(3):
            amp = rng.uniform(0.02, 0.07)
            fx = rng.uniform(0.5, 2.5)
            fy = rng.uniform(0.5, 2.5)
            phase = rng.uniform(0, 2 * np.pi)
            plane += amp * np.cos(2 * np.pi * (fx * xs / w + fy * ys / h)
                                  + phase)
        img[..., ch] = plane
    return np.clip(img, 0.0, 1.0)


def _draw_style(spec: SceneSpec, rng: np.random.Generator,
                count: int) -> List[_Primitive]:
    prims = []
    scale = min(spec.height, spec.width)
    for _ in range(count):
        category = int(rng.integers(1, spec.num_categories))
        base = _PALETTE[(category - 1) % len(_PALETTE)]
        color = np.clip(base + rng.uniform(-0.08, 0.08, size=3), 0.0, 1.0)
        size = rng.uniform(*spec.object_scale) * scale
        prims.append(_Primitive(category, spec.category_kind(category),
                                color, size))
    return prims


def _place(prim: _Primitive, spec: SceneSpec, rng: np.random.Generator):
    prim.cx = rng.uniform(0.1 * spec.width, 0.9 * spec.width)
    prim.cy = rng.uniform(0.1 * spec.height, 0.9 * spec.height)
    prim.aspect = rng.uniform(0.6, 1.6)
    base = rng.uniform(0, 2 * np.pi)
    prim.angles = tuple(base + k * 2 * np.pi / 3
                        + rng.uniform(-0.35, 0.35) for k in range(3))


def _primitive_mask(prim: _Primitive, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    if prim.kind == KIND_RECTANGLE:
        half_w = prim.size / 2
        half_h = prim.size * prim.aspect / 2
        return ((np.abs(xs - prim.cx) <= half_w)
                & (np.abs(ys - prim.cy) <= half_h))
    if prim.kind == KIND_DISK:
        r = prim.size / 2
        return (xs - prim.cx) ** 2 + (ys - prim.cy) ** 2 <= r * r
    # triangle: inside iff on the same side of all three edges
    r = prim.size / 2 * 1.2
    vx = [prim.cx + r * np.cos(a) for a in prim.angles]
    vy = [prim.cy + r * np.sin(a) for a in prim.angles]
    inside = np.ones((h, w), dtype=bool)
    sign = 0.0
    for i in range(3):
        j = (i + 1) % 3
        cross = ((vx[j] - vx[i]) * (ys - vy[i])
                 - (vy[j] - vy[i]) * (xs - vx[i]))
        k = 3 - i - j
        ref = ((vx[j] - vx[i]) * (vy[k] - vy[i])
               - (vy[j] - vy[i]) * (vx[k] - vx[i]))
        sign = 1.0 if ref >= 0 else -1.0
        inside &= (sign * cross) >= 0
    return inside


def _render(spec: SceneSpec, background: np.ndarray,
            prims: Sequence[_Primitive]):
    """Paint primitives in order; returns None if any ends up invisible."""
    h, w = spec.height, spec.width
    image = background.copy()
    segmap = np.zeros((h, w), dtype=np.uint8)
    owner = np.full((h, w), -1)
    for idx, prim in enumerate(prims):
        mask = _primitive_mask(prim, h, w)
        image[mask] = prim.color
        segmap[mask] = prim.category
        owner[mask] = idx
    for idx in range(len(prims)):
        if not (owner == idx).any():
            return None
    return image, segmap


def _importance(spec: SceneSpec, segmap: np.ndarray) -> np.ndarray:
    return np.isin(segmap, spec.required_categories).astype(np.uint8)


def generate_scene(spec: SceneSpec, rng_seed: int) -> Scene:
    """Render one scene deterministically from the seed.

    Placement retries with fresh positions when an object is fully
    hidden by later ones and gives up after 100 attempts.
    """
    rng = np.random.default_rng([1, rng_seed])
    prims = _draw_style(spec, rng, spec.num_objects)
    background = _background(spec, rng_seed)
    for _ in range(_MAX_PLACEMENT_ATTEMPTS):
        for prim in prims:
            _place(prim, spec, rng)
        rendered = _render(spec, background, prims)
        if rendered is not None:
            image, segmap = rendered
            return Scene(image, segmap, _importance(spec, segmap),
                         scene_id=f"s{rng_seed}")
    raise RuntimeError(f"could not place {spec.num_objects} objects without "
                       f"full occlusion after {_MAX_PLACEMENT_ATTEMPTS} "
                       f"attempts (seed {rng_seed})")


def generate_correlated_pair(spec: SceneSpec,
                             rng_seed: int) -> Tuple[Scene, Scene]:
    """Two shots of the same place: shared background and static
    objects, independent dynamic-object placement and presence."""
    style_rng = np.random.default_rng([2, rng_seed])
    prims = _draw_style(spec, style_rng, spec.num_objects)
    background = _background(spec, rng_seed)
    member_rngs = [np.random.default_rng([3, rng_seed]),
                   np.random.default_rng([4, rng_seed])]
    for _ in range(_MAX_PLACEMENT_ATTEMPTS):
        static_positions = []
        for prim in prims:
            if prim.kind in _STATIC_KINDS:
                _place(prim, spec, style_rng)
                static_positions.append(
                    (prim.cx, prim.cy, prim.aspect, prim.angles))
        results = []
        for rng in member_rngs:
            chosen = []
            pos_iter = iter(static_positions)
            for prim in prims:
                if prim.kind in _STATIC_KINDS:
                    prim.cx, prim.cy, prim.aspect, prim.angles = \
                        next(pos_iter)
                    chosen.append(_copy_primitive(prim))
                elif rng.random() < _DYNAMIC_PRESENCE:
                    _place(prim, spec, rng)
                    chosen.append(_copy_primitive(prim))
            results.append(_render(spec, background, chosen))
        if all(r is not None for r in results):
            scenes = []
            for tag, (image, segmap) in zip("ab", results):
                scenes.append(Scene(image, segmap,
                                    _importance(spec, segmap),
                                    scene_id=f"p{rng_seed}{tag}"))
            return scenes[0], scenes[1]
    raise RuntimeError(f"could not place correlated pair without full "
                       f"occlusion after {_MAX_PLACEMENT_ATTEMPTS} attempts "
                       f"(seed {rng_seed})")


def _copy_primitive(prim: _Primitive) -> _Primitive:
    return _Primitive(prim.category, prim.kind, prim.color, prim.size,
                      prim.cx, prim.cy, prim.aspect, prim.angles)


# ---------------------------------------------------------------------------
# PPM / PGM file IO
# ---------------------------------------------------------------------------

def _parse_pnm_header(data: bytes, magic: bytes, path: str):
    """Parse 'P6 w h maxval' style headers; reports byte offsets."""
    if data[:2] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} magic at byte "
                         f"offset 0, found {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise ValueError(f"{path}: malformed header at byte offset "
                             f"{pos}, expected integer")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ValueError(f"{path}: missing whitespace after header at byte "
                         f"offset {pos}")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    return width, height, pos


def write_image(image: np.ndarray, path: str) -> None:
    """Write a [0,1] float RGB image as binary PPM (P6)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    quantized = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(quantized.tobytes())


def read_image(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _parse_pnm_header(data, b"P6", path)
    expected = width * height * 3
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated payload at byte offset "
                         f"{pos + len(payload)}, expected {expected} bytes "
                         f"after offset {pos}, found {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8)
    return pixels.reshape(height, width, 3).astype(float) / 255.0


def write_gray(grid: np.ndarray, path: str) -> None:
    """Write a uint8 single-channel grid (segmap or mask) as PGM (P5)."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"expected (H, W) grid, got {grid.shape}")
    if grid.min() < 0 or grid.max() > 255:
        raise ValueError("grid values outside [0, 255]")
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(grid.astype(np.uint8).tobytes())


def read_gray(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    width, height, pos = _parse_pnm_header(data, b"P5", path)
    expected = width * height
    payload = data[pos:pos + expected]
    if len(payload) < expected:
        raise ValueError(f"{path}: truncated payload at byte offset "
                         f"{pos + len(payload)}, expected {expected} bytes "
                         f"after offset {pos}, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width)


def save_scene(scene: Scene, directory: str) -> dict:
    """Write image/segmap/mask files; returns the path triple."""
    import os

    paths = {
        "image": os.path.join(directory, f"{scene.scene_id}_image.ppm"),
        "segmap": os.path.join(directory, f"{scene.scene_id}_segmap.pgm"),
        "mask": os.path.join(directory, f"{scene.scene_id}_mask.pgm"),
    }
    write_image(scene.image, paths["image"])
    write_gray(scene.segmap, paths["segmap"])
    write_gray(scene.importance_mask, paths["mask"])
    return paths


def load_scene(paths: dict, scene_id: str) -> Scene:
    return Scene(read_image(paths["image"]), read_gray(paths["segmap"]),
                 read_gray(paths["mask"]), scene_id)


def scene_batch(spec: SceneSpec, seeds: Iterable[int]) -> List[Scene]:
    return [generate_scene(spec, s) for s in seeds]
