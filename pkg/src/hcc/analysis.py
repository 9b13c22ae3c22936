"""Single-pass encoding: a per-grid analysis transform plus a shared decoder.

A BaseModel carries the analysis heads (one small conv stack per latent grid,
applied after average-pooling the image to that grid's resolution) and the
universal DecoderParams used by every image it encodes. no_encode produces a
mode-0 bitstream in one forward pass, with no per-image optimization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import bitstream
from . import entropy
from . import model
from . import tensor as T
from .errors import CodecError
from .model import DecoderParams, LatentGrids, TensorParams

__all__ = [
    "ANALYSIS_CHANNELS",
    "BASE_MAGIC",
    "BaseModel",
    "alpha_shapes",
    "default_base_model",
    "analysis_features",
    "analysis",
    "train_base",
    "no_encode",
    "save_base_model",
    "load_base_model",
]

# Per-grid analysis head: conv3x3 chain at the grid's resolution.
ANALYSIS_CHANNELS = (3, 16, 16, 1)
ANALYSIS_KERNEL = 3
BASE_MAGIC = b"HCM1"
_META = struct.Struct(">dB")

LR_BASE = 1e-3


def alpha_shapes() -> list[tuple[int, ...]]:
    """Weight and bias shapes of one analysis head."""
    out = []
    for cin, cout in zip(ANALYSIS_CHANNELS[:-1], ANALYSIS_CHANNELS[1:]):
        out.append((cout, cin, ANALYSIS_KERNEL, ANALYSIS_KERNEL))
        out.append((cout,))
    return out


@dataclass
class BaseModel:
    """Analysis heads + shared decoder; treat as immutable once built."""

    alpha: list[list[np.ndarray]]
    decoder: DecoderParams
    lmbda: float
    _blob: bytes | None = field(default=None, repr=False, compare=False)

    @property
    def n_grids(self) -> int:
        return self.decoder.n_grids

    def validate(self) -> None:
        self.decoder.validate()
        if len(self.alpha) != self.n_grids:
            raise CodecError(f"{len(self.alpha)} analysis heads for {self.n_grids} grids")
        want = alpha_shapes()
        for i, head in enumerate(self.alpha):
            got = [a.shape for a in head]
            if got != want:
                raise CodecError(f"analysis head {i} shapes {got} do not match {want}")
            for a in head:
                if not np.all(np.isfinite(a)):
                    raise CodecError(f"non-finite values in analysis head {i}")

    def to_bytes(self) -> bytes:
        if self._blob is None:
            tensors = [a for head in self.alpha for a in head]
            for comp in model.COMPONENTS:
                tensors.extend(self.decoder.component(comp))
            meta = _META.pack(self.lmbda, self.n_grids)
            self._blob = bitstream.write_model_file(BASE_MAGIC, meta, tensors)
        return self._blob

    @property
    def model_id(self) -> bytes:
        return self.to_bytes()[-8:]


def _default_alpha(n_grids: int, rng: np.random.Generator) -> list[list[np.ndarray]]:
    heads = []
    for _ in range(n_grids):
        head = []
        for cin, cout in zip(ANALYSIS_CHANNELS[:-1], ANALYSIS_CHANNELS[1:]):
            fan_in = ANALYSIS_KERNEL * ANALYSIS_KERNEL * cin
            head.append(rng.standard_normal((cout, cin, ANALYSIS_KERNEL, ANALYSIS_KERNEL))
                        * np.sqrt(2.0 / fan_in))
            head.append(np.zeros(cout))
        heads.append(head)
    return heads


def default_base_model(lmbda: float, n_grids: int = model.N_GRIDS_DEFAULT,
                       seed: int = 0) -> BaseModel:
    """Documented initialization; decoder draws precede analysis-head draws."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    decoder = model.default_decoder_params(n_grids, rng)
    return BaseModel(_default_alpha(n_grids, rng), decoder, float(lmbda))


def _lift_alpha(alpha: list[list[np.ndarray]]) -> list[list[T.Tensor]]:
    return [[T.Tensor(a.copy(), requires_grad=True) for a in head] for head in alpha]


def analysis_features(xt: T.Tensor, alpha_t: list[list[T.Tensor]]) -> list[T.Tensor]:
    """Continuous per-grid head outputs, engine-tracked for training."""
    feats = []
    for i, (w0, b0, w1, b1, w2, b2) in enumerate(alpha_t):
        t = T.avgpool2d(xt, 1 << i) if i else xt
        t = T.add_channel_bias(T.conv2d(t, w0, pad=1), b0).relu()
        t = T.add_channel_bias(T.conv2d(t, w1, pad=1), b1).relu()
        t = T.add_channel_bias(T.conv2d(t, w2, pad=1), b2)
        feats.append(t.reshape(t.shape[1:]))
    return feats


def _check_image(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != 3:
        raise CodecError(f"expected a (3, H, W) image, got {x.shape}")
    return x


def analysis(x: np.ndarray, base: BaseModel) -> LatentGrids:
    """One forward pass to integer latents (rounded, clamped to the alphabet)."""
    x = _check_image(x)
    xt = T.Tensor(x)
    alpha_t = [[T.Tensor(a) for a in head] for head in base.alpha]
    feats = analysis_features(xt, alpha_t)
    return LatentGrids([f.data.reshape(f.shape[-2:]) for f in feats]).round_clamp()


def train_base(corpus: Sequence[np.ndarray], lmbda: float, steps: int,
               batch: int = 1, patch: int = 256, seed: int = 0,
               n_grids: int = model.N_GRIDS_DEFAULT) -> tuple[BaseModel, list[float]]:
    """Joint Adam training of analysis heads and decoder on random patches.

    Returns the trained model and the per-step loss log; fully determined by
    the seed. steps=0 returns the documented initialization unchanged.
    """
    if not corpus:
        raise CodecError("training corpus is empty")
    images = [_check_image(x) for x in corpus]
    for x in images:
        if x.shape[1] < patch or x.shape[2] < patch:
            raise CodecError(f"patch {patch} exceeds image size {x.shape[1]}x{x.shape[2]}")
    if batch < 1:
        raise CodecError(f"batch {batch} must be positive")

    rng = np.random.default_rng(np.random.PCG64(seed))
    decoder = model.default_decoder_params(n_grids, rng)
    alpha = _default_alpha(n_grids, rng)

    alpha_t = _lift_alpha(alpha)
    params_t = TensorParams.from_params(decoder, trainable=model.COMPONENTS)
    trainables = [a for head in alpha_t for a in head] + params_t.trainables()
    opt = T.Adam(trainables, lr=LR_BASE)

    losses: list[float] = []
    for _ in range(steps):
        total = None
        for _ in range(batch):
            img = images[int(rng.integers(len(images)))]
            top = int(rng.integers(img.shape[1] - patch + 1))
            left = int(rng.integers(img.shape[2] - patch + 1))
            x = img[:, top:top + patch, left:left + patch]
            feats = analysis_features(T.Tensor(x), alpha_t)
            loss = model.rd_loss(x, feats, params_t, lmbda, quant="noise", rng=rng)
            total = loss if total is None else total + loss
        total = total * (1.0 / batch)
        value = float(total.data)
        if not np.isfinite(value):
            raise CodecError(f"non-finite training loss at step {len(losses)}")
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(value)

    trained = BaseModel([[a.data.copy() for a in head] for head in alpha_t],
                        params_t.to_params(), float(lmbda))
    trained.validate()
    return trained, losses


def no_encode(x: np.ndarray, base: BaseModel) -> bytes:
    """Mode-0 bitstream: analysis latents coded under the shared decoder."""
    x = _check_image(x)
    latents = analysis(x, base)
    payload, _ = entropy.encode_latent_grids(latents.grids, base.decoder.arm)
    header = bitstream.Header(bitstream.MODE_SHARED, x.shape[2], x.shape[1],
                              base.n_grids, base.model_id, 0)
    return bitstream.write_bitstream(header, [], payload)


def save_base_model(base: BaseModel, path: str) -> None:
    base.validate()
    with open(path, "wb") as f:
        f.write(base.to_bytes())


def load_base_model(data: bytes) -> BaseModel:
    """Parse and validate a base-model dump; the hash trailer must match."""
    meta, tensors, _ = bitstream.read_model_file(data, BASE_MAGIC)
    if len(meta) != _META.size:
        raise CodecError(f"base model metadata is {len(meta)} bytes, want {_META.size}")
    lmbda, n_grids = _META.unpack(meta)
    per_head = len(alpha_shapes())
    n_decoder = sum(len(model.component_shapes(c, n_grids)) for c in model.COMPONENTS)
    want = n_grids * per_head + n_decoder
    if len(tensors) != want:
        raise CodecError(f"base model holds {len(tensors)} tensors, want {want}")
    alpha = [list(tensors[i * per_head:(i + 1) * per_head]) for i in range(n_grids)]
    rest = tensors[n_grids * per_head:]
    ups = rest[0]
    syn = list(rest[1:7])
    arm = list(rest[7:13])
    base = BaseModel(alpha, DecoderParams(ups, syn, arm), float(lmbda), _blob=bytes(data))
    base.validate()
    return base
