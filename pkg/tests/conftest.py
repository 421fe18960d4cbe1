"""Shared fixtures: disk-cached trained models.

The expensive fixtures train the full pipeline once into a cache
directory keyed by the pipeline recipe version, so repeated pytest
runs only pay the training cost when recipes change. Set
SEMSATLINK_TEST_CACHE to relocate the cache.
"""

import os
import sys

import pytest

from semsatlink import detectors as det
from semsatlink import pipeline
from semsatlink.dataset import SceneSpec, scene_batch


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print one verdict line per acceptance criterion that ran."""
    module = sys.modules.get("tests.test_acceptance") \
        or sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None) if module else None
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(results):
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(
            f"[{number:2d}] {verdict} {title}: {detail}")

HELD_DETECTOR_SEEDS = range(3000, 3032)


def _cache_root() -> str:
    default = os.path.join(os.path.dirname(__file__), ".cache")
    return os.environ.get("SEMSATLINK_TEST_CACHE", default)


@pytest.fixture(scope="session")
def trained_run() -> pipeline.TrainingRun:
    """Fully trained pipeline, cached on disk across sessions."""
    run_dir = os.path.join(
        _cache_root(), f"run_v{pipeline.RECIPE_VERSION}_seed0")
    return pipeline.ensure_run(run_dir, seed=0)


@pytest.fixture(scope="session")
def trained_bundle(trained_run):
    return trained_run.bundle()


@pytest.fixture(scope="session")
def trained_detectors(trained_run):
    """(bank, held_corpus): detectors plus an unseen labeled corpus."""
    bank = trained_run.detector_bank()
    scenes = scene_batch(SceneSpec(), HELD_DETECTOR_SEEDS)
    corpus, _ = det.make_detector_corpus(
        trained_run.bundle(), scenes,
        snr_grid=trained_run.recipe.detector_snrs_db,
        cci_fractions=trained_run.recipe.detector_cci_fractions,
        rng_seed=91)
    return bank, corpus
