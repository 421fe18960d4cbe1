"""Training pipeline: stage ordering, artifacts on disk, and resume.

A training run lives in one directory. Each stage trains a piece of
the system, appends one loss row per epoch to its CSV, and updates the
shared checkpoint, so an interrupted run picks up where it stopped.
"""

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import codec
from . import detectors as det
from . import nn
from .channel import ChannelState, sample_cci_mask
from .dataset import SceneSpec, generate_correlated_pair, scene_batch

STAGES = ("segmenter", "base", "adaptive", "selector", "refiner",
          "detectors")

STAGE_PREREQUISITES: Dict[str, Tuple[str, ...]] = {
    "segmenter": (),
    "base": (),
    "adaptive": ("base",),
    "selector": ("adaptive",),
    "refiner": ("base",),
    "detectors": ("base", "refiner"),
}

STATE_FILE = "state.json"
BUNDLE_DIR = "bundle"
DETECTOR_FILE = "detectors.npz"

# Bump to invalidate cached runs when recipes or architectures change.
RECIPE_VERSION = 1


class MissingStageError(RuntimeError):
    """Raised when a stage runs before one it depends on."""

    def __init__(self, stage: str, missing: str):
        super().__init__(f"stage '{stage}' needs '{missing}' trained "
                         f"first; run the '{missing}' stage")
        self.stage = stage
        self.missing = missing


@dataclass(frozen=True)
class StagePlan:
    """Scene budget and optimizer settings for one stage."""

    scenes: int
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 8
    seed_start: int = 0


@dataclass(frozen=True)
class PipelineRecipe:
    """Per-stage budgets; the same recipe drives tests and the CLI."""

    segmenter: StagePlan = StagePlan(scenes=64, epochs=30,
                                     learning_rate=2e-3)
    base: StagePlan = StagePlan(scenes=768, epochs=30,
                                learning_rate=2e-3, batch_size=16)
    adaptive: StagePlan = StagePlan(scenes=256, epochs=16,
                                    learning_rate=1e-3, batch_size=16)
    selector: StagePlan = StagePlan(scenes=96, epochs=40,
                                    learning_rate=1e-3)
    refiner: StagePlan = StagePlan(scenes=128, epochs=16,
                                   seed_start=4000)
    detectors: StagePlan = StagePlan(scenes=96, epochs=12,
                                     batch_size=16, seed_start=2000)
    selector_snrs_db: Tuple[float, ...] = (-10.0, 0.0, 10.0)
    selector_cci_fractions: Tuple[float, ...] = (0.0, 0.25, 0.5)
    detector_snrs_db: Tuple[float, ...] = (-10.0, 0.0, 10.0)
    detector_cci_fractions: Tuple[float, ...] = (0.0, 0.5)

    def plan(self, stage: str) -> StagePlan:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one "
                             f"of {', '.join(STAGES)}")
        return getattr(self, stage)


DEFAULT_RECIPE = PipelineRecipe()


def _stage_seed(seed: int, stage: str, invocation: int) -> int:
    """Distinct deterministic optimizer seed per stage invocation."""
    rng = np.random.default_rng([seed, STAGES.index(stage), invocation])
    return int(rng.integers(0, 2 ** 31 - 1))


class TrainingRun:
    """A run directory holding checkpoints, loss CSVs, and progress."""

    def __init__(self, run_dir: str,
                 recipe: PipelineRecipe = DEFAULT_RECIPE,
                 seed: int = 0, spec: Optional[SceneSpec] = None):
        self.run_dir = run_dir
        self.recipe = recipe
        self.seed = seed
        self.spec = spec or SceneSpec()
        os.makedirs(run_dir, exist_ok=True)
        self.state = self._load_state()
        self._bundle: Optional[codec.CodecBundle] = None
        self._bank: Optional[det.DetectorBank] = None

    # -- state bookkeeping

    def _state_path(self) -> str:
        return os.path.join(self.run_dir, STATE_FILE)

    def _load_state(self) -> Dict:
        path = self._state_path()
        if not os.path.exists(path):
            return {"version": RECIPE_VERSION, "seed": self.seed,
                    "recipe": asdict(self.recipe), "stages": {}}
        with open(path, "r", encoding="utf-8") as fh:
            state = json.load(fh)
        if state.get("version") != RECIPE_VERSION:
            raise ValueError(
                f"run directory {self.run_dir} was written by pipeline "
                f"version {state.get('version')}, expected "
                f"{RECIPE_VERSION}; start a fresh run directory")
        if state.get("seed") != self.seed:
            raise ValueError(
                f"run directory {self.run_dir} was trained with seed "
                f"{state.get('seed')}, not {self.seed}")
        return state

    def _save_state(self) -> None:
        with open(self._state_path(), "w", encoding="utf-8") as fh:
            json.dump(self.state, fh, indent=2, sort_keys=True)

    def stage_record(self, stage: str) -> Dict:
        return self.state["stages"].get(
            stage, {"epochs_done": 0, "invocations": 0,
                    "complete": False})

    def completed(self, stage: str) -> bool:
        return bool(self.stage_record(stage)["complete"])

    def check_prerequisites(self, stage: str) -> None:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}; expected one "
                             f"of {', '.join(STAGES)}")
        for needed in STAGE_PREREQUISITES[stage]:
            if not self.completed(needed):
                raise MissingStageError(stage, needed)

    # -- artifacts

    def bundle_path(self) -> str:
        return os.path.join(self.run_dir, BUNDLE_DIR)

    def detector_path(self) -> str:
        return os.path.join(self.run_dir, DETECTOR_FILE)

    def bundle(self) -> codec.CodecBundle:
        if self._bundle is None:
            if os.path.isdir(self.bundle_path()):
                self._bundle = codec.load_bundle(self.bundle_path())
            else:
                self._bundle = codec.make_bundle(seed=self.seed)
        return self._bundle

    def detector_bank(self) -> det.DetectorBank:
        if self._bank is None:
            if os.path.exists(self.detector_path()):
                self._bank = det.load_detectors(self.detector_path())
            else:
                self._bank = det.make_detector_bank(
                    self.spec.height, self.spec.width, seed=self.seed)
        return self._bank

    def loss_csv_path(self, stage: str) -> str:
        return os.path.join(self.run_dir, f"loss_{stage}.csv")

    def _append_losses(self, stage: str,
                       series: Dict[str, List[float]],
                       epoch_start: int) -> None:
        path = self.loss_csv_path(stage)
        fresh = not os.path.exists(path)
        with open(path, "a", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            if fresh:
                writer.writerow(["stage", "epoch", "loss"])
            for name, history in sorted(series.items()):
                for k, loss in enumerate(history):
                    writer.writerow([name, epoch_start + k,
                                     f"{loss:.8f}"])

    # -- scene supply

    def _scenes(self, plan: StagePlan):
        start = plan.seed_start
        return scene_batch(self.spec, range(start, start + plan.scenes))

    def _config(self, stage: str, plan: StagePlan,
                epochs: Optional[int]) -> nn.TrainConfig:
        invocation = self.stage_record(stage)["invocations"]
        return nn.TrainConfig(
            learning_rate=plan.learning_rate,
            batch_size=plan.batch_size,
            epochs=plan.epochs if epochs is None else epochs,
            seed=_stage_seed(self.seed, stage, invocation))

    def _selector_states(self, count: int) -> List[ChannelState]:
        grid = [(snr, frac)
                for snr in self.recipe.selector_snrs_db
                for frac in self.recipe.selector_cci_fractions]
        rng = np.random.default_rng([self.seed, 7])
        states = []
        for k in range(count):
            snr, frac = grid[k % len(grid)]
            mask = sample_cci_mask(frac,
                                   int(rng.integers(0, 2 ** 31 - 1)))
            states.append(ChannelState(snr, mask))
        return states

    # -- stage execution

    def run_stage(self, stage: str,
                  epochs: Optional[int] = None) -> Dict:
        """Train one stage, append losses, checkpoint, mark complete."""
        self.check_prerequisites(stage)
        plan = self.recipe.plan(stage)
        config = self._config(stage, plan, epochs)
        bundle = self.bundle()
        started = time.time()
        if stage == "segmenter":
            history = codec.train_segmenter(
                bundle.segmenter, self._scenes(plan), config)
            series = {"segmenter": history}
        elif stage == "base":
            history = codec.train_base(bundle, self._scenes(plan),
                                       config)
            series = {"base": history}
        elif stage == "adaptive":
            per_pair = codec.train_all_pairs(bundle,
                                             self._scenes(plan), config)
            series = {f"adaptive/pair{i}": h
                      for i, h in per_pair.items()}
        elif stage == "selector":
            scenes = self._scenes(plan)
            states = self._selector_states(len(scenes))
            history = codec.train_selector(bundle, scenes, states,
                                           config)
            series = {"selector": history}
        elif stage == "refiner":
            pairs = [generate_correlated_pair(self.spec, s)
                     for s in range(plan.seed_start,
                                    plan.seed_start + plan.scenes)]
            history = codec.train_refiner(bundle, pairs, config)
            series = {"refiner": history}
        elif stage == "detectors":
            bank = self.detector_bank()
            corpus, _ = det.make_detector_corpus(
                bundle, self._scenes(plan),
                snr_grid=self.recipe.detector_snrs_db,
                cci_fractions=self.recipe.detector_cci_fractions,
                rng_seed=config.seed)
            history = det.train_detectors(bank, corpus, config)
            series = {f"detectors/{k}": h for k, h in history.items()}
            det.save_detectors(bank, self.detector_path())
        else:
            raise ValueError(f"unknown stage {stage!r}")
        if stage != "detectors":
            codec.save_bundle(bundle, self.bundle_path())
        record = self.stage_record(stage)
        epochs_run = max(len(h) for h in series.values())
        self._append_losses(stage, series, record["epochs_done"])
        record["epochs_done"] += epochs_run
        record["invocations"] += 1
        record["complete"] = True
        self.state["stages"][stage] = record
        self._save_state()
        return {"stage": stage, "epochs": epochs_run,
                "seconds": time.time() - started,
                "final_loss": {k: h[-1] for k, h in series.items()}}


def ensure_run(run_dir: str, recipe: PipelineRecipe = DEFAULT_RECIPE,
               seed: int = 0, stages: Sequence[str] = STAGES,
               spec: Optional[SceneSpec] = None) -> TrainingRun:
    """Train whatever is missing, in dependency order."""
    run = TrainingRun(run_dir, recipe, seed, spec)
    for stage in STAGES:
        if stage in stages and not run.completed(stage):
            run.run_stage(stage)
    return run
