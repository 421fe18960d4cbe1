"""Two-level learned semantic error detection.

The UT derives two 32-bit parity codes from the transmitted image and
ships them over the error-free control channel. At the satellite a
rough detector inspects the regenerated codeword next to the first
parity code and votes ACK/NACK without decoding the image. At the
gateway a fine detector looks at the reconstructed image next to both
parity codes. Labels come from the required-region MSE threshold
(rough) and its conjunction with a no-reference quality score (fine).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .codec import (CodecBundle, Codeword, SurrogateChannel, decode,
                    encode, mse_and_grad, oracle_planes, reconstruct,
                    surrogate_for_state)
from .dataset import Scene
from .metrics import required_mse

PARITY_BITS = 32
MSE_THRESHOLD = 0.015
QUALITY_THRESHOLD = 4.5
DEFAULT_DECISION_THRESHOLD = 0.5

_EPS = 1e-12


@dataclass
class ParityCode:
    """Sign-quantized 32-bit code derived from the transmitted image."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=float).ravel()
        if self.bits.size != PARITY_BITS:
            raise ValueError(f"parity code must have exactly "
                             f"{PARITY_BITS} bits, got {self.bits.size}")
        if not np.isin(self.bits, (-1.0, 1.0)).all():
            raise ValueError("parity bits must be exactly +-1")


@dataclass(frozen=True)
class Verdict:
    """ACK/NACK decision with the raw detector score."""

    decision: str
    score: float

    def __post_init__(self):
        if self.decision not in ("ACK", "NACK"):
            raise ValueError(f"unknown decision {self.decision!r}")
        if not 0.0 < self.score < 1.0:
            raise ValueError(f"score must lie strictly inside (0, 1), "
                             f"got {self.score}")

    @property
    def ack(self) -> bool:
        return self.decision == "ACK"


def verdict_from_score(score: float,
                       threshold: float = DEFAULT_DECISION_THRESHOLD
                       ) -> Verdict:
    """ACK iff the score clears the threshold (strictly greater)."""
    return Verdict("ACK" if score > threshold else "NACK", float(score))


# ---------------------------------------------------------------------------
# Networks


def build_parity_encoder(height: int, width: int,
                         rng: np.random.Generator) -> nn.Sequential:
    """Conv stack from an image to 32 sign-quantized bits.

    Three downsampling convs echo the codec encoder; enough extra
    stride-2 convs follow to land on a (16, 2, 1) latent regardless of
    the configured scale, so the code is 32 bits everywhere."""
    if height % 32 or width % 32 or height != 2 * width:
        raise ValueError(f"parity encoder expects 2:1 images with "
                         f"dimensions divisible by 32, got "
                         f"{height}x{width}")
    tail = int(np.log2(height // 32))
    if 2 ** tail * 32 != height:
        raise ValueError(f"height {height} is not 32 times a power "
                         f"of two")
    layers = [
        nn.Conv2d(3, 32, 9, 4, rng, "conv1"),
        nn.Activation("relu", name="relu1"),
        nn.Conv2d(32, 64, 7, 2, rng, "conv2"),
        nn.Activation("relu", name="relu2"),
        nn.Conv2d(64, 64, 5, 2, rng, "conv3"),
        nn.Activation("relu", name="relu3"),
    ]
    for t in range(tail):
        layers += [nn.Conv2d(64, 64, 3, 2, rng, f"tail{t + 1}"),
                   nn.Activation("relu", name=f"tailrelu{t + 1}")]
    layers += [nn.Conv2d(64, 16, 3, 2, rng, "head"),
               nn.Activation("tanh", name="tanh"),
               nn.QuantizeSTE()]
    net = nn.Sequential(layers, name="parity_encoder")
    net.layers[-3].weight *= 8.0
    return net


def _build_rough_nets(rng: np.random.Generator):
    conv = nn.Sequential([
        nn.Conv2d(256, 64, 3, 2, rng, "conv1"),
        nn.Activation("relu", name="relu1"),
        nn.Conv2d(64, 16, 3, 2, rng, "conv2"),
        nn.Activation("relu", name="relu2"),
    ], name="rough_conv")
    dense = nn.Sequential([
        nn.Dense(16 + PARITY_BITS, 32, rng, "hidden"),
        nn.Activation("relu", name="relu"),
        nn.Dense(32, 1, rng, "out"),
        nn.Activation("sigmoid", name="score"),
    ], name="rough_dense")
    return conv, dense


def _build_fine_nets(rng: np.random.Generator):
    conv = nn.Sequential([
        nn.Conv2d(3, 16, 9, 4, rng, "conv1"),
        nn.Activation("relu", name="relu1"),
        nn.Conv2d(16, 32, 5, 2, rng, "conv2"),
        nn.Activation("relu", name="relu2"),
        nn.Conv2d(32, 32, 3, 2, rng, "conv3"),
        nn.Activation("relu", name="relu3"),
        nn.Conv2d(32, 16, 3, 2, rng, "conv4"),
        nn.Activation("relu", name="relu4"),
    ], name="fine_conv")
    dense = nn.Sequential([
        nn.Dense(32 + 2 * PARITY_BITS, 64, rng, "hidden"),
        nn.Activation("relu", name="relu"),
        nn.Dense(64, 1, rng, "out"),
        nn.Activation("sigmoid", name="score"),
    ], name="fine_dense")
    return conv, dense


@dataclass
class DetectorBank:
    """Both parity encoders plus the rough and fine detector nets."""

    parity_rough: nn.Sequential
    parity_fine: nn.Sequential
    rough_conv: nn.Sequential
    rough_dense: nn.Sequential
    fine_conv: nn.Sequential
    fine_dense: nn.Sequential
    height: int = 64
    width: int = 32


def make_detector_bank(height: int = 64, width: int = 32,
                       seed: int = 0) -> DetectorBank:
    def rng(k):
        return np.random.default_rng([seed, 40 + k])

    rough_conv, rough_dense = _build_rough_nets(rng(2))
    fine_conv, fine_dense = _build_fine_nets(rng(3))
    return DetectorBank(
        parity_rough=build_parity_encoder(height, width, rng(0)),
        parity_fine=build_parity_encoder(height, width, rng(1)),
        rough_conv=rough_conv,
        rough_dense=rough_dense,
        fine_conv=fine_conv,
        fine_dense=fine_dense,
        height=height,
        width=width,
    )


# ---------------------------------------------------------------------------
# Inference


def parity_encode(image: np.ndarray, encoder: nn.Sequential) -> ParityCode:
    """32-bit sign-quantized code for an image at codec scale."""
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, "
                         f"got {image.shape}")
    out = encoder.forward(image.transpose(2, 0, 1)[None])
    bits = out.ravel()
    if bits.size != PARITY_BITS:
        raise ValueError(f"parity encoder produced {bits.size} bits "
                         f"for image {image.shape[:2]}")
    return ParityCode(bits)


def _codeword_values(codeword) -> np.ndarray:
    if isinstance(codeword, Codeword):
        return codeword.latent()
    values = np.asarray(codeword, dtype=float)
    if values.ndim != 3:
        raise ValueError(f"expected a (channels, h, w) codeword, "
                         f"got shape {values.shape}")
    return values


def rough_score(codeword, parity: ParityCode, bank: DetectorBank) -> float:
    """Satellite-side score from the received codeword and parity."""
    values = _codeword_values(codeword)
    feats = bank.rough_conv.forward(values[None]).reshape(1, -1)
    x = np.concatenate([feats, parity.bits[None]], axis=1)
    return float(bank.rough_dense.forward(x)[0, 0])


def rough_detect(codeword, parity: ParityCode, bank: DetectorBank,
                 threshold: float = DEFAULT_DECISION_THRESHOLD) -> Verdict:
    return verdict_from_score(rough_score(codeword, parity, bank),
                              threshold)


def fine_score(image: np.ndarray, parity_rough: ParityCode,
               parity_fine: ParityCode, bank: DetectorBank) -> float:
    """Gateway-side score from the reconstructed image and the two
    control-channel parity codes."""
    image = np.asarray(image, dtype=float)
    feats = bank.fine_conv.forward(
        image.transpose(2, 0, 1)[None]).reshape(1, -1)
    x = np.concatenate([feats, parity_rough.bits[None],
                        parity_fine.bits[None]], axis=1)
    return float(bank.fine_dense.forward(x)[0, 0])


def fine_detect(image: np.ndarray, parity_rough: ParityCode,
                parity_fine: ParityCode, bank: DetectorBank,
                threshold: float = DEFAULT_DECISION_THRESHOLD) -> Verdict:
    return verdict_from_score(
        fine_score(image, parity_rough, parity_fine, bank), threshold)


# ---------------------------------------------------------------------------
# Labels and oracle detectors


def make_rough_label(scene: Scene, rx_codeword, bundle: CodecBundle) -> int:
    """1 iff decoding the received codeword keeps the required-region
    MSE within the threshold (inclusive)."""
    if not scene.importance_mask.any():
        raise ValueError(f"scene {scene.scene_id} has an empty required "
                         f"region and cannot be labeled")
    values = _codeword_values(rx_codeword)
    err = required_mse(decode(values, bundle), scene.image,
                       scene.importance_mask)
    return int(err <= MSE_THRESHOLD)


def quality_proxy(image: np.ndarray) -> float:
    """No-reference quality score on a [1, 5] scale.

    Combines the residual after a 3x3 box blur (noise shows up as
    incompressible high-frequency energy) with the extra discontinuity
    along the 8x8 block grid (coding artifacts). The affine calibration
    puts clean corpus scenes at the top of the scale and white noise at
    the bottom.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        gray = image.mean(axis=2)
    else:
        gray = image
    padded = np.pad(gray, 1, mode="edge")
    blur = sum(padded[i:i + gray.shape[0], j:j + gray.shape[1]]
               for i in range(3) for j in range(3)) / 9.0
    # Median absolute residual: object edges are sparse so they drop
    # out, while dense noise moves the median in proportion to sigma.
    roughness = float(np.median(np.abs(gray - blur)))
    col_jump = np.abs(np.diff(gray, axis=1))
    row_jump = np.abs(np.diff(gray, axis=0))
    blockiness = 0.0
    if gray.shape[1] > 8:
        at_block = col_jump[:, 7::8].mean()
        elsewhere = np.delete(col_jump, slice(7, None, 8), axis=1).mean()
        blockiness += max(at_block - elsewhere, 0.0)
    if gray.shape[0] > 8:
        at_block = row_jump[7::8, :].mean()
        elsewhere = np.delete(row_jump, slice(7, None, 8), axis=0).mean()
        blockiness += max(at_block - elsewhere, 0.0)
    # The 0.004 allowance forgives the faint texture clean scenes keep
    # after the median, without denting the noise penalty.
    raw = 34.0 * max(roughness - 0.004, 0.0) + 8.0 * blockiness
    return float(np.clip(5.0 - raw, 1.0, 5.0))


def make_fine_label(scene: Scene, reconstructed: np.ndarray) -> int:
    """1 iff required-MSE within threshold AND the quality proxy clears
    its bar (strictly)."""
    if not scene.importance_mask.any():
        raise ValueError(f"scene {scene.scene_id} has an empty required "
                         f"region and cannot be labeled")
    if reconstructed.shape != scene.image.shape:
        raise ValueError(f"reconstruction {reconstructed.shape} does not "
                         f"match scene {scene.image.shape}")
    err = required_mse(reconstructed, scene.image, scene.importance_mask)
    return int(err <= MSE_THRESHOLD
               and quality_proxy(reconstructed) > QUALITY_THRESHOLD)


_ORACLE_MARGIN = 1e-6


def oracle_rough_verdict(scene: Scene, rx_codeword,
                         bundle: CodecBundle) -> Verdict:
    """Test double that decodes and measures instead of predicting."""
    label = make_rough_label(scene, rx_codeword, bundle)
    return verdict_from_score(1.0 - _ORACLE_MARGIN if label
                              else _ORACLE_MARGIN)


def oracle_fine_verdict(scene: Scene, reconstructed: np.ndarray) -> Verdict:
    label = make_fine_label(scene, reconstructed)
    return verdict_from_score(1.0 - _ORACLE_MARGIN if label
                              else _ORACLE_MARGIN)


# ---------------------------------------------------------------------------
# Detector corpus


@dataclass
class DetectorSample:
    """One simulated delivery: what the UT sent, what the satellite
    saw, what the gateway reconstructed, and the truth labels."""

    scene: Scene
    rx_codeword: np.ndarray
    reconstructed: np.ndarray
    rough_label: int
    fine_label: int
    snr_db: float
    cci_fraction: float


def _corrupt_codeword(codeword: Codeword, s: SurrogateChannel,
                      rng: np.random.Generator) -> np.ndarray:
    """Hard-decision view of the surrogate: sign of the noisy values
    where kept, zero where erased."""
    values = codeword.latent()
    noisy = values + s.noise_std * rng.standard_normal(values.shape)
    keep = np.ones(values.shape)
    n_erase = int(round(s.erasure_fraction * values.size))
    if n_erase:
        idx = rng.choice(values.size, size=n_erase, replace=False)
        keep.reshape(-1)[idx] = 0.0
    return np.where(noisy >= 0.0, 1.0, -1.0) * keep


def make_detector_corpus(bundle: CodecBundle, scenes: Sequence[Scene],
                         snr_grid: Sequence[float] = (-10.0, 0.0, 10.0),
                         cci_fractions: Sequence[float] = (0.0, 0.5),
                         rng_seed: int = 0,
                         refine_steps: Optional[int] = None
                         ) -> Tuple[List[DetectorSample],
                                    Dict[Tuple[float, float],
                                         Dict[str, int]]]:
    """Simulate deliveries across the SNR/CCI grid and label them.

    Scenes without a required region are excluded. Returns the samples
    plus per-cell label counts for bookkeeping."""
    rng = np.random.default_rng([35, rng_seed])
    samples: List[DetectorSample] = []
    cells: Dict[Tuple[float, float], Dict[str, int]] = {}
    for scene in scenes:
        if not scene.importance_mask.any():
            continue
        planes = oracle_planes(scene.segmap, bundle.num_categories)
        codeword = encode(scene.image, planes, bundle)
        for snr_db in snr_grid:
            for fraction in cci_fractions:
                s = SurrogateChannel(
                    10.0 ** (-snr_db / 20.0), fraction)
                rx = _corrupt_codeword(codeword, s, rng)
                decoded = decode(rx, bundle)
                recon = reconstruct(decoded, None, bundle.refiner,
                                    bundle.refiner_steps
                                    if refine_steps is None
                                    else refine_steps)
                sample = DetectorSample(
                    scene=scene, rx_codeword=rx, reconstructed=recon,
                    rough_label=make_rough_label(scene, rx, bundle),
                    fine_label=make_fine_label(scene, recon),
                    snr_db=snr_db, cci_fraction=fraction)
                samples.append(sample)
                cell = cells.setdefault((snr_db, fraction),
                                        {"rough_0": 0, "rough_1": 0,
                                         "fine_0": 0, "fine_1": 0})
                cell[f"rough_{sample.rough_label}"] += 1
                cell[f"fine_{sample.fine_label}"] += 1
    return samples, cells


# ---------------------------------------------------------------------------
# Training


def _balanced_order(labels: np.ndarray, rng: np.random.Generator,
                    stage: str) -> np.ndarray:
    """Epoch sample order with the minority class resampled up to
    parity. A single-class corpus cannot be balanced."""
    ones = np.flatnonzero(labels == 1)
    zeros = np.flatnonzero(labels == 0)
    if len(ones) == 0 or len(zeros) == 0:
        raise RuntimeError(f"{stage} corpus contains a single class "
                           f"({len(ones)} positive of {len(labels)}); "
                           f"widen the condition grid")
    target = max(len(ones), len(zeros))
    ones = np.concatenate(
        [ones, rng.choice(ones, target - len(ones))]) \
        if len(ones) < target else ones
    zeros = np.concatenate(
        [zeros, rng.choice(zeros, target - len(zeros))]) \
        if len(zeros) < target else zeros
    order = np.concatenate([ones, zeros])
    rng.shuffle(order)
    return order


def _bce_and_grad(scores: np.ndarray, labels: np.ndarray):
    scores = scores.reshape(-1)
    loss = float(-np.mean(labels * np.log(scores + _EPS)
                          + (1 - labels) * np.log(1 - scores + _EPS)))
    grad = (-(labels / (scores + _EPS))
            + (1 - labels) / (1 - scores + _EPS)) / scores.size
    return loss, grad.reshape(-1, 1)


def train_detectors(bank: DetectorBank, corpus: Sequence[DetectorSample],
                    config: Optional[nn.TrainConfig] = None
                    ) -> Dict[str, List[float]]:
    """Joint BCE training of both parity encoders and detectors.

    The rough stage trains the codeword compressor, its dense head and
    the rough parity encoder together; the fine stage mirrors it on
    reconstructed images with both parity codes."""
    if not corpus:
        raise ValueError("empty detector corpus")
    config = config or nn.TrainConfig()
    rng = np.random.default_rng([36, config.seed])
    tx_images = np.stack([s.scene.image.transpose(2, 0, 1)
                          for s in corpus])
    rx_codewords = np.stack([s.rx_codeword for s in corpus])
    recons = np.stack([s.reconstructed.transpose(2, 0, 1)
                       for s in corpus])
    rough_labels = np.array([s.rough_label for s in corpus], dtype=float)
    fine_labels = np.array([s.fine_label for s in corpus], dtype=float)
    history = {"rough": [], "fine": []}
    history["rough"] = _train_rough(bank, tx_images, rx_codewords,
                                    rough_labels, config, rng)
    history["fine"] = _train_fine(bank, tx_images, recons, fine_labels,
                                  config, rng)
    return history


def _train_rough(bank, tx_images, rx_codewords, labels, config, rng):
    nets = (bank.parity_rough, bank.rough_conv, bank.rough_dense)
    optimizer = nn.make_optimizer(config)
    history = []
    for epoch in range(config.epochs):
        order = _balanced_order(labels, rng, "rough detector")
        losses = []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            parity = bank.parity_rough.forward(tx_images[batch])
            feats = bank.rough_conv.forward(rx_codewords[batch])
            flat = feats.reshape(len(batch), -1)
            x = np.concatenate([flat, parity.reshape(len(batch), -1)],
                               axis=1)
            scores = bank.rough_dense.forward(x)
            loss, grad = _bce_and_grad(scores, labels[batch])
            if not np.isfinite(loss):
                raise RuntimeError(f"rough detector training diverged "
                                   f"at epoch {epoch}")
            for net in nets:
                net.zero_grads()
            g_x = bank.rough_dense.backward(grad)
            g_feats = g_x[:, :flat.shape[1]].reshape(feats.shape)
            g_parity = g_x[:, flat.shape[1]:].reshape(parity.shape)
            bank.rough_conv.backward(g_feats)
            bank.parity_rough.backward(g_parity)
            params, grads = {}, {}
            for k, net in enumerate(nets):
                for name, arr in net.params().items():
                    params[f"n{k}.{name}"] = arr
                for name, arr in net.grads().items():
                    grads[f"n{k}.{name}"] = arr
            if not optimizer.step(params, grads):
                raise RuntimeError(f"rough detector training diverged "
                                   f"at epoch {epoch}")
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def _train_fine(bank, tx_images, recons, labels, config, rng):
    # The rough parity encoder is already trained and feeds a live
    # detector, so the fine stage reads it without updating it.
    nets = (bank.parity_fine, bank.fine_conv, bank.fine_dense)
    optimizer = nn.make_optimizer(config)
    history = []
    for epoch in range(config.epochs):
        order = _balanced_order(labels, rng, "fine detector")
        losses = []
        for b0 in range(0, len(order), config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            p_rough = bank.parity_rough.forward(tx_images[batch])
            p_fine = bank.parity_fine.forward(tx_images[batch])
            feats = bank.fine_conv.forward(recons[batch])
            flat = feats.reshape(len(batch), -1)
            x = np.concatenate(
                [flat, p_rough.reshape(len(batch), -1),
                 p_fine.reshape(len(batch), -1)], axis=1)
            scores = bank.fine_dense.forward(x)
            loss, grad = _bce_and_grad(scores, labels[batch])
            if not np.isfinite(loss):
                raise RuntimeError(f"fine detector training diverged "
                                   f"at epoch {epoch}")
            for net in nets:
                net.zero_grads()
            g_x = bank.fine_dense.backward(grad)
            n_feat = flat.shape[1]
            bank.fine_conv.backward(
                g_x[:, :n_feat].reshape(feats.shape))
            bank.parity_fine.backward(
                g_x[:, n_feat + PARITY_BITS:].reshape(p_fine.shape))
            params, grads = {}, {}
            for k, net in enumerate(nets):
                for name, arr in net.params().items():
                    params[f"n{k}.{name}"] = arr
                for name, arr in net.grads().items():
                    grads[f"n{k}.{name}"] = arr
            if not optimizer.step(params, grads):
                raise RuntimeError(f"fine detector training diverged "
                                   f"at epoch {epoch}")
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def detector_accuracy(bank: DetectorBank,
                      corpus: Sequence[DetectorSample]
                      ) -> Dict[str, float]:
    """Agreement of both trained detectors with the truth labels."""
    rough_hits = fine_hits = 0
    for s in corpus:
        p_rough = parity_encode(s.scene.image, bank.parity_rough)
        p_fine = parity_encode(s.scene.image, bank.parity_fine)
        rough = rough_detect(s.rx_codeword, p_rough, bank)
        fine = fine_detect(s.reconstructed, p_rough, p_fine, bank)
        rough_hits += int(rough.ack) == s.rough_label
        fine_hits += int(fine.ack) == s.fine_label
    n = len(corpus)
    return {"rough": rough_hits / n, "fine": fine_hits / n}


# ---------------------------------------------------------------------------
# Persistence


def save_detectors(bank: DetectorBank, path: str) -> None:
    arrays = {}
    for name in ("parity_rough", "parity_fine", "rough_conv",
                 "rough_dense", "fine_conv", "fine_dense"):
        for key, arr in getattr(bank, name).params().items():
            arrays[f"{name}/{key}"] = arr
    arrays["scale"] = np.array([float(bank.height), float(bank.width)])
    nn.save_weights(path, arrays)


def load_detectors(path: str) -> DetectorBank:
    arrays = nn.load_weights(path)
    height, width = (int(v) for v in arrays.pop("scale"))
    bank = make_detector_bank(height, width, seed=0)
    grouped: Dict[str, Dict[str, np.ndarray]] = {}
    for key, value in arrays.items():
        prefix, _, rest = key.partition("/")
        grouped.setdefault(prefix, {})[rest] = value
    for name in ("parity_rough", "parity_fine", "rough_conv",
                 "rough_dense", "fine_conv", "fine_dense"):
        getattr(bank, name).set_params(grouped.pop(name))
    if grouped:
        raise ValueError(f"checkpoint has unknown components "
                         f"{sorted(grouped)}")
    return bank
