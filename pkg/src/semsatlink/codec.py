"""Semantic image codec with channel-adaptive rate selection.

The pipeline: a compact segmenter turns an image into per-category
feature planes, a quantized convolutional encoder compresses the image
plus planes into a +-1 codeword, and a mirrored decoder reconstructs
the image on the other side of the link. On top of the base codec sit
three additional encoder/decoder pairs tuned to different channel
conditions, a dense selector that picks the pair from the measured
condition, and an iterative refiner that cleans up decoded images,
optionally borrowing background from a correlated image of the same
location.

Training happens at desk scale (64x32 scenes); the convolutional nets
are size-agnostic, so the same bundle also encodes the full 512x256
configuration for budget checks.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .channel import ChannelState, make_condition_vector
from .dataset import Scene
from .metrics import required_mse

LATENT_CHANNELS = 256
DOWNSCALE = 32
REFINER_STEPS = 4
REFINER_STEP_SCALE = 0.25
CONDITION_LENGTH = 1024

# The conv feeding the quantizer starts with boosted weights so the
# tanh is spread toward +-1 and bits do not flip chaotically while the
# decoder is still random.
QUANT_SPREAD_INIT = 8.0

# Joint codec training moves the encoder slower than the decoder;
# otherwise the decoder learns to ignore the churning bits and the
# latent collapses to a constant.
ENCODER_LR_SCALE = 0.1

# Output channel count of each additional encoder. Pair 3 halves the
# base bit budget so its codeword fits on the interference-free half of
# the band; pairs 1 and 2 keep the full rate.
PAIR_CHANNELS = {1: 256, 2: 256, 3: 128}

# Loss mask per pair: the good-channel pair restores the whole image,
# the stressed pairs concentrate on the required region.
PAIR_MASK_MODE = {1: "full", 2: "required", 3: "required"}

_EPS = 1e-12


def surrogate_sigma(snr_db: float) -> float:
    """Noise standard deviation on unit-power +-1 codeword values."""
    return float(10.0 ** (-snr_db / 20.0))


@dataclass(frozen=True)
class SurrogateChannel:
    """Differentiable stand-in for the link used during training."""

    noise_std: float = 0.0
    erasure_fraction: float = 0.0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, "
                             f"got {self.noise_std}")
        if not 0.0 <= self.erasure_fraction <= 1.0:
            raise ValueError(f"erasure_fraction must lie in [0, 1], "
                             f"got {self.erasure_fraction}")


def default_pair_conditions() -> Dict[int, SurrogateChannel]:
    """Training conditions: clean 10 dB, deep noise -10 dB, and
    0 dB with half the positions erased."""
    return {
        1: SurrogateChannel(surrogate_sigma(10.0), 0.0),
        2: SurrogateChannel(surrogate_sigma(-10.0), 0.0),
        3: SurrogateChannel(surrogate_sigma(0.0), 0.5),
    }


@dataclass
class Codeword:
    """Quantized latent ready for transmission.

    bits is the flat +-1 vector; latent_shape records the (channels,
    h, w) tensor it unflattens to; rate_index 0 is the base codec and
    1..3 are the additional pairs.
    """

    bits: np.ndarray
    latent_shape: Tuple[int, int, int]
    rate_index: int = 0

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=float).ravel()
        self.latent_shape = tuple(int(d) for d in self.latent_shape)
        if len(self.latent_shape) != 3 or min(self.latent_shape) < 1:
            raise ValueError(f"bad latent shape {self.latent_shape}")
        expected = int(np.prod(self.latent_shape))
        if self.bits.size != expected:
            raise ValueError(f"{self.bits.size} bits do not fill latent "
                             f"shape {self.latent_shape} ({expected})")
        if not np.isin(self.bits, (-1.0, 1.0)).all():
            raise ValueError("codeword bits must be exactly +-1")
        if self.rate_index not in (0, 1, 2, 3):
            raise ValueError(f"unknown rate index {self.rate_index}")

    @property
    def bit_length(self) -> int:
        return self.bits.size

    def latent(self) -> np.ndarray:
        return self.bits.reshape(self.latent_shape)


def bits_to_payload(codeword: Codeword) -> np.ndarray:
    """Map +-1 codeword values to the 0/1 payload the PHY carries."""
    return ((1.0 + codeword.bits) / 2.0).astype(np.uint8)


def payload_to_codeword(payload: np.ndarray,
                        latent_shape: Tuple[int, int, int],
                        rate_index: int = 0) -> Codeword:
    """Inverse of bits_to_payload: 0/1 bits back to a +-1 codeword."""
    payload = np.asarray(payload).ravel()
    if not np.isin(payload, (0, 1)).all():
        raise ValueError("payload bits must be 0/1")
    return Codeword(2.0 * payload.astype(float) - 1.0, latent_shape,
                    rate_index)


@dataclass
class CodecBundle:
    """Every trainable component of the semantic pipeline."""

    num_categories: int
    segmenter: nn.Sequential
    encoder: nn.Sequential
    decoder: nn.Sequential
    pair_encoders: Dict[int, nn.Sequential]
    pair_decoders: Dict[int, nn.Sequential]
    selector: nn.Sequential
    refiner: nn.Sequential
    pair_conditions: Dict[int, SurrogateChannel] = field(
        default_factory=default_pair_conditions)
    refiner_steps: int = REFINER_STEPS

    def __post_init__(self):
        if self.num_categories < 2:
            raise ValueError("need at least two categories")
        if set(self.pair_encoders) != set(PAIR_CHANNELS):
            raise ValueError(f"pair encoders must cover "
                             f"{sorted(PAIR_CHANNELS)}")
        if set(self.pair_decoders) != set(self.pair_encoders):
            raise ValueError("every additional encoder needs exactly "
                             "one paired decoder")
        if self.refiner_steps < 0:
            raise ValueError("refiner_steps cannot be negative")


def _build_segmenter(num_categories: int,
                     rng: np.random.Generator) -> nn.Sequential:
    return nn.Sequential([
        nn.Conv2d(3, 16, 3, 1, rng, "conv1"),
        nn.Activation("relu", name="relu1"),
        nn.Conv2d(16, 32, 3, 1, rng, "conv2"),
        nn.Activation("relu", name="relu2"),
        nn.Conv2d(32, num_categories, 3, 1, rng, "conv3"),
        nn.Activation("softmax", axis=1, name="probs"),
    ], name="segmenter")


def _build_encoder(num_categories: int,
                   rng: np.random.Generator) -> nn.Sequential:
    net = nn.Sequential([
        nn.Conv2d(3 + num_categories, 64, 9, 4, rng, "conv1"),
        nn.Activation("relu", name="relu1"),
        nn.Conv2d(64, 128, 7, 2, rng, "conv2"),
        nn.Activation("relu", name="relu2"),
        nn.Conv2d(128, 256, 5, 2, rng, "conv3"),
        nn.Activation("relu", name="relu3"),
        nn.Conv2d(256, LATENT_CHANNELS, 3, 2, rng, "conv4"),
        nn.Activation("tanh", name="tanh"),
        nn.QuantizeSTE(),
    ], name="encoder")
    net.layers[6].weight *= QUANT_SPREAD_INIT
    return net


def _build_decoder(in_channels: int,
                   rng: np.random.Generator) -> nn.Sequential:
    return nn.Sequential([
        nn.ConvTranspose2d(in_channels, 256, 3, 2, rng, "tconv1"),
        nn.Activation("relu", name="relu1"),
        nn.ConvTranspose2d(256, 128, 5, 2, rng, "tconv2"),
        nn.Activation("relu", name="relu2"),
        nn.ConvTranspose2d(128, 64, 7, 2, rng, "tconv3"),
        nn.Activation("relu", name="relu3"),
        nn.ConvTranspose2d(64, 64, 9, 4, rng, "tconv4"),
        nn.Activation("relu", name="relu4"),
        nn.Conv2d(64, 3, 3, 1, rng, "head"),
        nn.Activation("tanh", name="tanh"),
    ], name="decoder")


def _build_pair_encoder(out_channels: int,
                        rng: np.random.Generator) -> nn.Sequential:
    net = nn.Sequential([
        nn.Conv2d(LATENT_CHANNELS, 512, 3, 1, rng, "conv1"),
        nn.Activation("relu", name="relu1"),
        nn.Conv2d(512, out_channels, 3, 1, rng, "conv2"),
        nn.Activation("tanh", name="tanh"),
        nn.QuantizeSTE(),
    ], name="pair_encoder")
    net.layers[2].weight *= QUANT_SPREAD_INIT
    return net


def _build_selector(rng: np.random.Generator) -> nn.Sequential:
    return nn.Sequential([
        nn.Dense(CONDITION_LENGTH, 512, rng, "hidden"),
        nn.Activation("relu", name="relu"),
        nn.Dense(512, 3, rng, "logits"),
        nn.Activation("softmax", axis=1, name="probs"),
    ], name="selector")


def _build_refiner(rng: np.random.Generator) -> nn.Sequential:
    # Input: current image (3) + decoded image (3) + correlated image
    # or zeros (3) + presence flag plane (1).
    return nn.Sequential([
        nn.Conv2d(10, 32, 3, 1, rng, "conv1"),
        nn.Activation("relu", name="relu1"),
        nn.Conv2d(32, 32, 3, 1, rng, "conv2"),
        nn.Activation("relu", name="relu2"),
        nn.Conv2d(32, 3, 3, 1, rng, "conv3"),
        nn.Activation("tanh", name="tanh"),
    ], name="refiner")


def make_bundle(num_categories: int = 4, seed: int = 0) -> CodecBundle:
    """Fresh randomly initialized bundle, deterministic per seed."""
    def rng(k):
        return np.random.default_rng([seed, k])

    pair_encoders = {i: _build_pair_encoder(c, rng(10 + i))
                     for i, c in PAIR_CHANNELS.items()}
    pair_decoders = {i: _build_decoder(c, rng(20 + i))
                     for i, c in PAIR_CHANNELS.items()}
    return CodecBundle(
        num_categories=num_categories,
        segmenter=_build_segmenter(num_categories, rng(0)),
        encoder=_build_encoder(num_categories, rng(1)),
        decoder=_build_decoder(LATENT_CHANNELS, rng(2)),
        pair_encoders=pair_encoders,
        pair_decoders=pair_decoders,
        selector=_build_selector(rng(3)),
        refiner=_build_refiner(rng(4)),
    )


# ---------------------------------------------------------------------------
# Segmentation


def oracle_planes(segmap: np.ndarray, num_categories: int) -> np.ndarray:
    """Ground-truth one-hot feature planes, shape (C, H, W)."""
    segmap = np.asarray(segmap)
    if segmap.min() < 0 or segmap.max() >= num_categories:
        raise ValueError("segmap categories outside palette")
    planes = np.zeros((num_categories,) + segmap.shape)
    for c in range(num_categories):
        planes[c] = segmap == c
    return planes


def segment(image: np.ndarray, segmenter: nn.Sequential) -> np.ndarray:
    """Per-category feature planes (C, H, W) from the trained segmenter."""
    x = _image_to_nchw(image)
    return segmenter.forward(x)[0]


def segmap_from_planes(planes: np.ndarray) -> np.ndarray:
    """Collapse feature planes to a category map by argmax."""
    return np.argmax(planes, axis=0)


def _image_to_nchw(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, "
                         f"got {image.shape}")
    h, w = image.shape[:2]
    if h % DOWNSCALE or w % DOWNSCALE:
        raise ValueError(f"image dimensions must be divisible by "
                         f"{DOWNSCALE}, got {h}x{w}")
    return image.transpose(2, 0, 1)[None]


def _batch_images(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack([img.transpose(2, 0, 1) for img in images])


# ---------------------------------------------------------------------------
# Base codec


def encode(image: np.ndarray, planes: np.ndarray,
           bundle: CodecBundle) -> Codeword:
    """Compress an image plus its feature planes to a +-1 codeword."""
    x = _image_to_nchw(image)
    planes = np.asarray(planes, dtype=float)
    if planes.shape != (bundle.num_categories,) + x.shape[2:]:
        raise ValueError(f"planes {planes.shape} do not match image "
                         f"{x.shape[2:]} with {bundle.num_categories} "
                         f"categories")
    q = bundle.encoder.forward(np.concatenate([x, planes[None]], axis=1))
    return Codeword(q.ravel(), q.shape[1:], rate_index=0)


def _latent_values(codeword, latent_shape=None, rate_index=None):
    """Accept a Codeword or a raw latent array, return (1,C,h,w)."""
    if isinstance(codeword, Codeword):
        if rate_index is not None and codeword.rate_index != rate_index:
            raise ValueError(f"expected a rate-{rate_index} codeword, "
                             f"got rate {codeword.rate_index}")
        return codeword.latent()[None]
    values = np.asarray(codeword, dtype=float)
    if values.ndim != 3:
        raise ValueError(f"expected a (channels, h, w) latent, "
                         f"got shape {values.shape}")
    if latent_shape is not None and values.shape[0] != latent_shape:
        raise ValueError(f"latent has {values.shape[0]} channels, "
                         f"expected {latent_shape}")
    return values[None]


def decode(codeword, bundle: CodecBundle) -> np.ndarray:
    """Base decoder: codeword (or raw perturbed latent) to an image
    in [0, 1]. Erased positions should already be zeroed."""
    values = _latent_values(codeword, LATENT_CHANNELS, rate_index=0)
    out = bundle.decoder.forward(values)
    return ((out[0] + 1.0) / 2.0).transpose(1, 2, 0)


def additional_encode(codeword, i: int, bundle: CodecBundle) -> Codeword:
    """Adapt the base codeword with additional encoder i."""
    if i not in bundle.pair_encoders:
        raise ValueError(f"unknown additional encoder {i}")
    values = _latent_values(codeword, LATENT_CHANNELS, rate_index=0)
    q = bundle.pair_encoders[i].forward(values)
    return Codeword(q.ravel(), q.shape[1:], rate_index=i)


def paired_decode(reduced, i: int, bundle: CodecBundle) -> np.ndarray:
    """Decode a reduced codeword with the decoder paired to encoder i."""
    if i not in bundle.pair_decoders:
        raise ValueError(f"unknown paired decoder {i}")
    values = _latent_values(reduced, PAIR_CHANNELS[i], rate_index=i)
    out = bundle.pair_decoders[i].forward(values)
    return ((out[0] + 1.0) / 2.0).transpose(1, 2, 0)


# ---------------------------------------------------------------------------
# Training surrogate


def apply_surrogate(codeword, s: SurrogateChannel,
                    rng: np.random.Generator) -> np.ndarray:
    """Perturb codeword values: additive Gaussian noise plus a random
    fraction of positions zeroed out."""
    if isinstance(codeword, Codeword):
        values = codeword.latent()
    else:
        values = np.asarray(codeword, dtype=float)
    out, _ = _surrogate_with_mask(values, s, rng)
    return out


def _surrogate_with_mask(values: np.ndarray, s: SurrogateChannel,
                         rng: np.random.Generator):
    """Returns (perturbed, keep_mask); keep_mask is the gradient gate
    since noise and mask are constants of the draw."""
    if s.noise_std > 0:
        out = values + s.noise_std * rng.standard_normal(values.shape)
    else:
        out = values.copy()
    keep = np.ones(values.shape)
    n_erase = int(round(s.erasure_fraction * values.size))
    if n_erase:
        idx = rng.choice(values.size, size=n_erase, replace=False)
        keep.reshape(-1)[idx] = 0.0
        out *= keep
    return out, keep


# ---------------------------------------------------------------------------
# Losses


def mse_and_grad(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def masked_mse_and_grad(pred: np.ndarray, target: np.ndarray,
                        mask: np.ndarray):
    """Squared error over masked positions only; the gradient at any
    zero-mask position is exactly zero."""
    full = np.broadcast_to(mask, pred.shape)
    count = max(float(full.sum()), 1.0)
    diff = (pred - target) * full
    return float((diff ** 2).sum() / count), 2.0 * diff / count


def _importance_nchw(scenes: Sequence[Scene]) -> np.ndarray:
    return np.stack([s.importance_mask for s in scenes])[:, None].astype(
        float)


# ---------------------------------------------------------------------------
# Training loops


def _check_finite(loss: float, stage: str, epoch: int) -> None:
    if not np.isfinite(loss):
        raise RuntimeError(f"{stage} training diverged at epoch "
                           f"{epoch}: loss {loss}")


def _step(optimizer, params, grads, stage, epoch):
    if not optimizer.step(params, grads):
        raise RuntimeError(f"{stage} training diverged at epoch "
                           f"{epoch}: non-finite gradients")


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _prefixed(prefix: str, d: Dict[str, np.ndarray]):
    return {f"{prefix}.{k}": v for k, v in d.items()}


def train_segmenter(segmenter: nn.Sequential, scenes: Sequence[Scene],
                    config: Optional[nn.TrainConfig] = None,
                    labels: Optional[Sequence[np.ndarray]] = None
                    ) -> List[float]:
    """Cross-entropy training against oracle labels. Returns per-epoch
    mean loss; zero epochs leave the weights untouched."""
    if not scenes:
        raise ValueError("need at least one labeled scene")
    config = config or nn.TrainConfig(learning_rate=0.0005)
    if labels is None:
        labels = [s.segmap for s in scenes]
    if len(labels) != len(scenes):
        raise ValueError("one label map per scene required")
    num_categories = segmenter.layers[-2].weight.shape[0]
    images = _batch_images([s.image for s in scenes])
    targets = np.stack([oracle_planes(m, num_categories) for m in labels])
    rng = np.random.default_rng([30, config.seed])
    optimizer = nn.make_optimizer(config)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for batch in _epoch_batches(len(scenes), config.batch_size, rng):
            probs = segmenter.forward(images[batch])
            t = targets[batch]
            per_pixel = t.shape[0] * t.shape[2] * t.shape[3]
            loss = float(-(t * np.log(probs + _EPS)).sum() / per_pixel)
            _check_finite(loss, "segmenter", epoch)
            segmenter.zero_grads()
            segmenter.backward(-t / (probs + _EPS) / per_pixel)
            _step(optimizer, segmenter.params(), segmenter.grads(),
                  "segmenter", epoch)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def _scaled_optimizer(config: nn.TrainConfig, scale: float):
    return nn.make_optimizer(replace(
        config, learning_rate=config.learning_rate * scale))


def train_base(bundle: CodecBundle, scenes: Sequence[Scene],
               config: Optional[nn.TrainConfig] = None,
               condition: Optional[SurrogateChannel] = None,
               encoder_lr_scale: float = ENCODER_LR_SCALE
               ) -> List[float]:
    """End-to-end MSE training of the base encoder/decoder through the
    surrogate at the 10 dB equivalent noise level."""
    if not scenes:
        raise ValueError("need at least one scene")
    config = config or nn.TrainConfig()
    if condition is None:
        condition = SurrogateChannel(surrogate_sigma(10.0), 0.0)
    images = _batch_images([s.image for s in scenes])
    planes = np.stack([oracle_planes(s.segmap, bundle.num_categories)
                       for s in scenes])
    inputs = np.concatenate([images, planes], axis=1)
    rng = np.random.default_rng([31, config.seed])
    opt_enc = _scaled_optimizer(config, encoder_lr_scale)
    opt_dec = nn.make_optimizer(config)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for batch in _epoch_batches(len(scenes), config.batch_size, rng):
            q = bundle.encoder.forward(inputs[batch])
            y, keep = _surrogate_with_mask(q, condition, rng)
            out = bundle.decoder.forward(y)
            loss, g = mse_and_grad((out + 1.0) / 2.0, images[batch])
            _check_finite(loss, "base codec", epoch)
            bundle.encoder.zero_grads()
            bundle.decoder.zero_grads()
            g_latent = bundle.decoder.backward(g * 0.5)
            bundle.encoder.backward(g_latent * keep)
            _step(opt_dec, bundle.decoder.params(),
                  bundle.decoder.grads(), "base codec", epoch)
            _step(opt_enc, bundle.encoder.params(),
                  bundle.encoder.grads(), "base codec", epoch)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def initialize_pairs_from_base(bundle: CodecBundle) -> None:
    """Start every paired decoder from the trained base decoder
    weights wherever shapes line up (the first layer of pair 3 has a
    different input width and keeps its random init)."""
    base = bundle.decoder.params()
    for dec in bundle.pair_decoders.values():
        own = dec.params()
        for key, value in base.items():
            if key in own and own[key].shape == value.shape:
                own[key][...] = value


def _masks_for_pair(scenes: Sequence[Scene], i: int,
                    mask_mode: Optional[str]) -> np.ndarray:
    mode = mask_mode or PAIR_MASK_MODE[i]
    if mode == "full":
        return np.ones((len(scenes), 1, 1, 1))
    if mode == "required":
        return _importance_nchw(scenes)
    raise ValueError(f"unknown mask mode {mode!r}")


def train_adaptive(bundle: CodecBundle, scenes: Sequence[Scene], i: int,
                   condition: Optional[SurrogateChannel] = None,
                   config: Optional[nn.TrainConfig] = None,
                   fine_tune_shared: bool = False,
                   mask_mode: Optional[str] = None) -> List[float]:
    """Masked-MSE training of one additional encoder/decoder pair under
    its channel condition. Base weights stay frozen unless
    fine_tune_shared is set."""
    if i not in bundle.pair_encoders:
        raise ValueError(f"unknown additional encoder {i}")
    if not scenes:
        raise ValueError("need at least one scene")
    config = config or nn.TrainConfig()
    if condition is None:
        condition = bundle.pair_conditions[i]
    mode = mask_mode or PAIR_MASK_MODE[i]
    if mode == "required":
        scenes = [s for s in scenes if s.importance_mask.any()]
        if not scenes:
            raise ValueError("no scene has a non-empty required region")
    images = _batch_images([s.image for s in scenes])
    planes = np.stack([oracle_planes(s.segmap, bundle.num_categories)
                       for s in scenes])
    inputs = np.concatenate([images, planes], axis=1)
    masks = _masks_for_pair(scenes, i, mode)
    rng = np.random.default_rng([32, config.seed, i])
    optimizers = _pair_optimizers(config, fine_tune_shared)
    enc_i = bundle.pair_encoders[i]
    dec_i = bundle.pair_decoders[i]
    history = []
    for epoch in range(config.epochs):
        losses = []
        for batch in _epoch_batches(len(scenes), config.batch_size, rng):
            losses.append(_adaptive_batch_step(
                bundle, enc_i, dec_i, inputs[batch], images[batch],
                masks[batch], condition, rng, optimizers, epoch))
        history.append(float(np.mean(losses)))
    return history


def _pair_optimizers(config: nn.TrainConfig, fine_tune_shared: bool):
    """(pair encoder, pair decoder, shared encoder or None) optimizers;
    the quantizing encoders move slower than their decoders."""
    return (_scaled_optimizer(config, ENCODER_LR_SCALE),
            nn.make_optimizer(config),
            _scaled_optimizer(config, ENCODER_LR_SCALE)
            if fine_tune_shared else None)


def _adaptive_batch_step(bundle, enc_i, dec_i, inputs, targets, masks,
                         condition, rng, optimizers, epoch) -> float:
    opt_enc, opt_dec, opt_shared = optimizers
    base_q = bundle.encoder.forward(inputs)
    q = enc_i.forward(base_q)
    y, keep = _surrogate_with_mask(q, condition, rng)
    out = dec_i.forward(y)
    loss, g = masked_mse_and_grad((out + 1.0) / 2.0, targets, masks)
    _check_finite(loss, "adaptive pair", epoch)
    enc_i.zero_grads()
    dec_i.zero_grads()
    g_reduced = dec_i.backward(g * 0.5)
    g_base = enc_i.backward(g_reduced * keep)
    _step(opt_dec, dec_i.params(), dec_i.grads(), "adaptive pair", epoch)
    _step(opt_enc, enc_i.params(), enc_i.grads(), "adaptive pair", epoch)
    if opt_shared is not None:
        bundle.encoder.zero_grads()
        bundle.encoder.backward(g_base)
        _step(opt_shared, bundle.encoder.params(), bundle.encoder.grads(),
              "adaptive pair", epoch)
    return loss


def train_all_pairs(bundle: CodecBundle, scenes: Sequence[Scene],
                    config: Optional[nn.TrainConfig] = None,
                    fine_tune_shared: bool = False
                    ) -> Dict[int, List[float]]:
    """Train the three pairs alternately within each epoch, starting
    each paired decoder from the trained base decoder."""
    if not scenes:
        raise ValueError("need at least one scene")
    config = config or nn.TrainConfig()
    initialize_pairs_from_base(bundle)
    prepared = {}
    for i in sorted(bundle.pair_encoders):
        mode = PAIR_MASK_MODE[i]
        kept = [s for s in scenes
                if mode == "full" or s.importance_mask.any()]
        if not kept:
            raise ValueError("no scene has a non-empty required region")
        images = _batch_images([s.image for s in kept])
        planes = np.stack([oracle_planes(s.segmap, bundle.num_categories)
                           for s in kept])
        prepared[i] = (np.concatenate([images, planes], axis=1), images,
                       _masks_for_pair(kept, i, mode), len(kept))
    rng = np.random.default_rng([32, config.seed, 0])
    optimizers = {i: _pair_optimizers(config, fine_tune_shared)
                  for i in bundle.pair_encoders}
    history: Dict[int, List[float]] = {i: [] for i in bundle.pair_encoders}
    for epoch in range(config.epochs):
        losses: Dict[int, List[float]] = {i: [] for i in history}
        batch_iters = {i: list(_epoch_batches(prepared[i][3],
                                              config.batch_size, rng))
                       for i in history}
        rounds = max(len(b) for b in batch_iters.values())
        for r in range(rounds):
            for i in sorted(history):
                batches = batch_iters[i]
                batch = batches[r % len(batches)]
                inputs, images, masks, _ = prepared[i]
                losses[i].append(_adaptive_batch_step(
                    bundle, bundle.pair_encoders[i],
                    bundle.pair_decoders[i], inputs[batch], images[batch],
                    masks[batch], bundle.pair_conditions[i], rng,
                    optimizers[i], epoch))
        for i in history:
            history[i].append(float(np.mean(losses[i])))
    return history


# ---------------------------------------------------------------------------
# Pair selection


def select_pair(condition_vector: np.ndarray,
                selector: nn.Sequential) -> int:
    """Pick the encoder/decoder pair for a measured channel condition.
    Argmax of the softmax; np.argmax keeps ties at the lower index."""
    vec = np.asarray(condition_vector, dtype=float).ravel()
    if vec.size != CONDITION_LENGTH:
        raise ValueError(f"condition vector must have length "
                         f"{CONDITION_LENGTH}, got {vec.size}")
    probs = selector.forward(vec[None])
    return int(np.argmax(probs[0])) + 1


def surrogate_for_state(state: ChannelState) -> SurrogateChannel:
    """Surrogate matching a measured condition: noise at the SNR
    equivalent, erasures at the interfered fraction."""
    return SurrogateChannel(surrogate_sigma(state.snr_db),
                            float(state.cci_mask.mean()))


def pair_required_mse(bundle: CodecBundle, scene: Scene,
                      state: ChannelState,
                      rng: np.random.Generator) -> Dict[int, float]:
    """Required-region MSE of each pair when its codeword crosses the
    surrogate for this condition. Used to label the selector."""
    planes = oracle_planes(scene.segmap, bundle.num_categories)
    base = encode(scene.image, planes, bundle)
    surrogate = surrogate_for_state(state)
    out = {}
    for i in sorted(bundle.pair_encoders):
        reduced = additional_encode(base, i, bundle)
        received = apply_surrogate(reduced, surrogate, rng)
        img = paired_decode(received, i, bundle)
        out[i] = required_mse(img, scene.image, scene.importance_mask)
    return out


def make_selector_labels(bundle: CodecBundle, scenes: Sequence[Scene],
                         states: Sequence[ChannelState],
                         rng: np.random.Generator) -> np.ndarray:
    """argmin over pairs of required-MSE, ties toward the lower index."""
    labels = []
    for scene, state in zip(scenes, states):
        per_pair = pair_required_mse(bundle, scene, state, rng)
        best = min(sorted(per_pair), key=lambda i: per_pair[i])
        labels.append(best - 1)
    return np.array(labels, dtype=int)


def train_selector(bundle: CodecBundle, scenes: Sequence[Scene],
                   states: Sequence[ChannelState],
                   config: Optional[nn.TrainConfig] = None,
                   labels: Optional[np.ndarray] = None) -> List[float]:
    """Cross-entropy training of the pair selector on measured
    conditions labeled by the best-performing pair."""
    if len(scenes) != len(states) or not scenes:
        raise ValueError("need matching non-empty scenes and states")
    config = config or nn.TrainConfig()
    rng = np.random.default_rng([33, config.seed])
    if labels is None:
        labels = make_selector_labels(bundle, scenes, states, rng)
    vectors = np.stack([make_condition_vector(s) for s in states])
    onehot = np.zeros((len(states), 3))
    onehot[np.arange(len(states)), labels] = 1.0
    optimizer = nn.make_optimizer(config)
    history = []
    for epoch in range(config.epochs):
        losses = []
        for batch in _epoch_batches(len(states), config.batch_size, rng):
            probs = bundle.selector.forward(vectors[batch])
            t = onehot[batch]
            loss = float(-(t * np.log(probs + _EPS)).sum() / len(batch))
            _check_finite(loss, "selector", epoch)
            bundle.selector.zero_grads()
            bundle.selector.backward(-t / (probs + _EPS) / len(batch))
            _step(optimizer, bundle.selector.params(),
                  bundle.selector.grads(), "selector", epoch)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


# ---------------------------------------------------------------------------
# Iterative refinement


def reconstruct(decoded: np.ndarray, correlated: Optional[np.ndarray],
                refiner: nn.Sequential,
                steps: int = REFINER_STEPS) -> np.ndarray:
    """K weight-shared refinement steps conditioned on the decoded
    image and, when available, a correlated image of the same place.
    Zero steps return the decoded image unchanged."""
    decoded = np.asarray(decoded, dtype=float)
    if decoded.ndim != 3 or decoded.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, "
                         f"got {decoded.shape}")
    if correlated is not None:
        correlated = np.asarray(correlated, dtype=float)
        if correlated.shape != decoded.shape:
            raise ValueError(f"correlated image {correlated.shape} does "
                             f"not match decoded {decoded.shape}")
    if steps == 0:
        return decoded
    y = decoded.transpose(2, 0, 1)[None]
    cond = _refiner_condition(y, None if correlated is None
                              else correlated.transpose(2, 0, 1)[None])
    for _ in range(steps):
        y = y + REFINER_STEP_SCALE * refiner.forward(
            np.concatenate([y, cond], axis=1))
    return np.clip(y[0].transpose(1, 2, 0), 0.0, 1.0)


def _refiner_condition(decoded_nchw: np.ndarray,
                       correlated_nchw: Optional[np.ndarray]) -> np.ndarray:
    n, _, h, w = decoded_nchw.shape
    if correlated_nchw is None:
        correlated_nchw = np.zeros((n, 3, h, w))
        flag = np.zeros((n, 1, h, w))
    else:
        flag = np.ones((n, 1, h, w))
    return np.concatenate([decoded_nchw, correlated_nchw, flag], axis=1)


def _refiner_condition_mixed(decoded: np.ndarray,
                             correlated: np.ndarray,
                             present: np.ndarray) -> np.ndarray:
    """Batch conditioning where only some samples carry a correlated
    image; absent ones get zeros and a zero flag plane."""
    n, _, h, w = decoded.shape
    keep = present.astype(float)[:, None, None, None]
    flag = np.broadcast_to(keep, (n, 1, h, w))
    return np.concatenate([decoded, correlated * keep, flag], axis=1)


def train_refiner(bundle: CodecBundle,
                  scene_pairs: Sequence[Tuple[Scene, Scene]],
                  config: Optional[nn.TrainConfig] = None,
                  conditions: Optional[Sequence[SurrogateChannel]] = None,
                  steps: Optional[int] = None) -> List[float]:
    """Denoising training: the refiner sees base-codec decodes damaged
    by a mix of surrogate conditions and learns to move them toward the
    ground truth, with the correlated member supplied for half the
    samples."""
    if not scene_pairs:
        raise ValueError("need at least one correlated scene pair")
    config = config or nn.TrainConfig()
    if conditions is None:
        conditions = [
            SurrogateChannel(0.0, 0.0),
            SurrogateChannel(surrogate_sigma(10.0), 0.0),
            SurrogateChannel(surrogate_sigma(0.0), 0.25),
            SurrogateChannel(surrogate_sigma(0.0), 0.5),
        ]
    steps = bundle.refiner_steps if steps is None else steps
    rng = np.random.default_rng([34, config.seed])
    decoded, targets, correlated, present = _refiner_corpus(
        bundle, scene_pairs, conditions, rng)
    optimizer = nn.make_optimizer(config)
    refiner = bundle.refiner
    history = []
    for epoch in range(config.epochs):
        losses = []
        for batch in _epoch_batches(len(decoded), config.batch_size, rng):
            y = decoded[batch]
            cond = _refiner_condition_mixed(y, correlated[batch],
                                            present[batch])
            ys, xs = [y], []
            for _ in range(steps):
                x = np.concatenate([y, cond], axis=1)
                y = y + REFINER_STEP_SCALE * refiner.forward(x)
                xs.append(x)
                ys.append(y)
            loss, grad = mse_and_grad(y, targets[batch])
            _check_finite(loss, "refiner", epoch)
            refiner.zero_grads()
            for x in reversed(xs):
                refiner.forward(x)
                g_in = refiner.backward(grad * REFINER_STEP_SCALE)
                grad = grad + g_in[:, :3]
            _step(optimizer, refiner.params(), refiner.grads(),
                  "refiner", epoch)
            losses.append(loss)
        history.append(float(np.mean(losses)))
    return history


def _refiner_corpus(bundle, scene_pairs, conditions, rng):
    """Precompute damaged decodes: one sample per (pair, condition),
    alternating which member is transmitted and whether the other is
    offered as the correlated condition."""
    decoded, targets, correlated, present = [], [], [], []
    for k, (first, second) in enumerate(scene_pairs):
        scene, other = (first, second) if k % 2 == 0 else (second, first)
        for j, condition in enumerate(conditions):
            planes = oracle_planes(scene.segmap, bundle.num_categories)
            codeword = encode(scene.image, planes, bundle)
            received = apply_surrogate(codeword, condition, rng)
            img = decode(received, bundle)
            decoded.append(img.transpose(2, 0, 1))
            targets.append(scene.image.transpose(2, 0, 1))
            correlated.append(other.image.transpose(2, 0, 1))
            present.append((k + j) % 2 == 0)
    return (np.stack(decoded), np.stack(targets), np.stack(correlated),
            np.array(present, dtype=bool))


# ---------------------------------------------------------------------------
# Persistence


_COMPONENT_KEYS = ("segmenter", "encoder", "decoder", "selector",
                   "refiner")


def _bundle_arrays(bundle: CodecBundle) -> Dict[str, np.ndarray]:
    arrays = {}
    for name in _COMPONENT_KEYS:
        net = getattr(bundle, name)
        arrays.update(_prefixed(name, net.params()))
    for i in sorted(bundle.pair_encoders):
        arrays.update(_prefixed(f"pair_enc_{i}",
                                bundle.pair_encoders[i].params()))
        arrays.update(_prefixed(f"pair_dec_{i}",
                                bundle.pair_decoders[i].params()))
    return arrays


def save_bundle(bundle: CodecBundle, directory: str) -> None:
    """Write the bundle as a weight checkpoint plus a manifest with the
    architecture knobs and per-pair training conditions."""
    os.makedirs(directory, exist_ok=True)
    nn.save_weights(os.path.join(directory, "weights.bin"),
                    _bundle_arrays(bundle))
    manifest = {
        "format": 1,
        "num_categories": bundle.num_categories,
        "refiner_steps": bundle.refiner_steps,
        "pair_channels": {str(i): c for i, c in PAIR_CHANNELS.items()},
        "pair_conditions": {
            str(i): {"noise_std": c.noise_std,
                     "erasure_fraction": c.erasure_fraction}
            for i, c in sorted(bundle.pair_conditions.items())},
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(directory: str) -> CodecBundle:
    """Rebuild a bundle from save_bundle output."""
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != 1:
        raise ValueError(f"unsupported bundle format "
                         f"{manifest.get('format')!r}")
    stored = {int(i): c for i, c in manifest["pair_channels"].items()}
    if stored != PAIR_CHANNELS:
        raise ValueError(f"pair channel layout {stored} does not match "
                         f"this build {PAIR_CHANNELS}")
    bundle = make_bundle(manifest["num_categories"], seed=0)
    bundle.refiner_steps = int(manifest["refiner_steps"])
    bundle.pair_conditions = {
        int(i): SurrogateChannel(c["noise_std"], c["erasure_fraction"])
        for i, c in manifest["pair_conditions"].items()}
    arrays = nn.load_weights(os.path.join(directory, "weights.bin"))
    grouped: Dict[str, Dict[str, np.ndarray]] = {}
    for key, value in arrays.items():
        prefix, _, rest = key.partition(".")
        grouped.setdefault(prefix, {})[rest] = value
    for name in _COMPONENT_KEYS:
        getattr(bundle, name).set_params(grouped.pop(name))
    for i in sorted(bundle.pair_encoders):
        bundle.pair_encoders[i].set_params(grouped.pop(f"pair_enc_{i}"))
        bundle.pair_decoders[i].set_params(grouped.pop(f"pair_dec_{i}"))
    if grouped:
        raise ValueError(f"checkpoint has unknown components "
                         f"{sorted(grouped)}")
    return bundle
