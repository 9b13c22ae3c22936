"""Decoder architecture shared by every coding mode.

An image is represented by a pyramid of integer latent grids (grid i has
shape ceil(H/2^i) x ceil(W/2^i)). Decoding upsamples every grid to full
resolution with one shared 4x4 stride-2 transposed-conv kernel (edge padded,
cropped back to each level's shape), stacks the results as channels, and
runs a three-layer 1x1/1x1/3x3 synthesis head clamped to [0, 1]. Rates come
from a causal context model: an 8->16->16->2 MLP over eight fixed previously
decoded neighbours predicting a discretized Laplace per cell.

Forward functions exist twice: on Tensors for training (gradients plus MAC
accounting) and on plain arrays for inference. Both run the same functional
kernels in the same order, so a decode agrees bit for bit across the two.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import CodecError
from .kernels import CTX_OFFSETS

__all__ = [
    "ALPHABET_LO",
    "ALPHABET_HI",
    "N_GRIDS_DEFAULT",
    "CTX_OFFSETS",
    "COMPONENTS",
    "grid_shapes",
    "LatentGrids",
    "DecoderParams",
    "TensorParams",
    "component_shapes",
    "component_size",
    "default_decoder_params",
    "upsample_all",
    "synthesize",
    "arm_forward",
    "latent_rate_bits",
    "decode_image",
    "rd_loss",
    "rd_terms",
    "upsample_arrays",
    "synthesize_arrays",
    "decode_arrays",
    "arm_mu_b_arrays",
    "rate_bits_arrays",
]

ALPHABET_LO = -256
ALPHABET_HI = 255
N_GRIDS_DEFAULT = 7
SYN_HIDDEN = 16
ARM_HIDDEN = 16
COMPONENTS = ("ups", "syn", "arm")
_LOG2 = math.log(2.0)


def grid_shapes(h: int, w: int, n: int) -> list[tuple[int, int]]:
    """Latent pyramid shapes: level i is ceil(h/2^i) x ceil(w/2^i)."""
    if h < 1 or w < 1:
        raise ValueError(f"image size {h}x{w} must be positive")
    if n < 1:
        raise ValueError(f"grid count {n} must be positive")
    return [(-(-h // (1 << i)), -(-w // (1 << i))) for i in range(n)]


@dataclass
class LatentGrids:
    """One 2-D array per pyramid level, finest first."""

    grids: list[np.ndarray]

    @classmethod
    def zeros(cls, h: int, w: int, n: int) -> "LatentGrids":
        return cls([np.zeros(s, dtype=np.int64) for s in grid_shapes(h, w, n)])

    @property
    def n(self) -> int:
        return len(self.grids)

    def shapes(self) -> list[tuple[int, int]]:
        return [g.shape for g in self.grids]

    def copy(self) -> "LatentGrids":
        return LatentGrids([g.copy() for g in self.grids])

    def round_clamp(self) -> "LatentGrids":
        """Round half away from zero and clip into the coder alphabet."""
        out = []
        for g in self.grids:
            q = F.round_half_away(np.asarray(g, dtype=np.float64))
            out.append(np.clip(q, ALPHABET_LO, ALPHABET_HI).astype(np.int64))
        return LatentGrids(out)


def component_shapes(comp: str, n_grids: int) -> list[tuple[int, ...]]:
    if comp == "ups":
        return [(1, 1, 4, 4)]
    if comp == "syn":
        return [(SYN_HIDDEN, n_grids, 1, 1), (SYN_HIDDEN,),
                (SYN_HIDDEN, SYN_HIDDEN, 1, 1), (SYN_HIDDEN,),
                (3, SYN_HIDDEN, 3, 3), (3,)]
    if comp == "arm":
        return [(ARM_HIDDEN, 8), (ARM_HIDDEN,),
                (ARM_HIDDEN, ARM_HIDDEN), (ARM_HIDDEN,),
                (2, ARM_HIDDEN), (2,)]
    raise ValueError(f"unknown component {comp!r}")


def component_size(comp: str, n_grids: int) -> int:
    return sum(int(np.prod(s)) for s in component_shapes(comp, n_grids))


@dataclass
class DecoderParams:
    """Weights of the three decoder components, as plain float64 arrays."""

    ups: np.ndarray
    syn: list[np.ndarray]
    arm: list[np.ndarray]

    @property
    def n_grids(self) -> int:
        return self.syn[0].shape[1]

    def validate(self) -> None:
        n = self.n_grids
        for comp in COMPONENTS:
            got = [a.shape for a in self.component(comp)]
            want = component_shapes(comp, n)
            if got != want:
                raise CodecError(f"{comp} tensor shapes {got} do not match {want}")
            for a in self.component(comp):
                if not np.all(np.isfinite(a)):
                    raise CodecError(f"non-finite values in {comp} weights")

    def component(self, comp: str) -> list[np.ndarray]:
        if comp == "ups":
            return [self.ups]
        if comp == "syn":
            return self.syn
        if comp == "arm":
            return self.arm
        raise ValueError(f"unknown component {comp!r}")

    def flatten(self, comp: str) -> np.ndarray:
        return np.concatenate([np.asarray(a, dtype=np.float64).ravel()
                               for a in self.component(comp)])

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.ups.copy(), [a.copy() for a in self.syn],
                             [a.copy() for a in self.arm])

    def with_component_flat(self, comp: str, flat: np.ndarray) -> "DecoderParams":
        """New params with one component replaced from a flat vector."""
        shapes = component_shapes(comp, self.n_grids)
        want = sum(int(np.prod(s)) for s in shapes)
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != want:
            raise CodecError(f"{comp} expects {want} values, got {flat.size}")
        tensors = []
        pos = 0
        for s in shapes:
            n = int(np.prod(s))
            tensors.append(flat[pos:pos + n].reshape(s).copy())
            pos += n
        out = self.copy()
        if comp == "ups":
            out.ups = tensors[0]
        elif comp == "syn":
            out.syn = tensors
        else:
            out.arm = tensors
        return out

    def with_delta(self, deltas: dict[str, np.ndarray]) -> "DecoderParams":
        """New params with flat per-component deltas added."""
        out = self
        for comp, d in deltas.items():
            out = out.with_component_flat(comp, out.flatten(comp) + np.asarray(d, dtype=np.float64))
        return out


def default_decoder_params(n_grids: int, rng: np.random.Generator) -> DecoderParams:
    """Documented initialization: bilinear upsampler, He-scaled convs with
    zero biases, 0.5 synthesis output bias, context model output layer
    scaled down so it starts near mu=0, b=1."""
    sw = component_shapes("syn", n_grids)
    syn = [
        rng.standard_normal(sw[0]) * math.sqrt(2.0 / n_grids), np.zeros(sw[1]),
        rng.standard_normal(sw[2]) * math.sqrt(2.0 / SYN_HIDDEN), np.zeros(sw[3]),
        rng.standard_normal(sw[4]) * math.sqrt(2.0 / (9 * SYN_HIDDEN)), np.full(sw[5], 0.5),
    ]
    aw = component_shapes("arm", n_grids)
    arm = [
        rng.standard_normal(aw[0]) * math.sqrt(2.0 / 8), np.zeros(aw[1]),
        rng.standard_normal(aw[2]) * math.sqrt(2.0 / ARM_HIDDEN), np.zeros(aw[3]),
        rng.standard_normal(aw[4]) * (0.01 * math.sqrt(2.0 / ARM_HIDDEN)), np.zeros(aw[5]),
    ]
    return DecoderParams(F.bilinear_kernel4(), syn, arm)


class TensorParams:
    """DecoderParams lifted into engine tensors for training."""

    def __init__(self, ups: list[T.Tensor], syn: list[T.Tensor], arm: list[T.Tensor]):
        self.ups = ups
        self.syn = syn
        self.arm = arm

    @classmethod
    def from_params(cls, p: DecoderParams, trainable: tuple[str, ...] = ()) -> "TensorParams":
        def lift(comp: str) -> list[T.Tensor]:
            return [T.Tensor(a.copy(), requires_grad=comp in trainable)
                    for a in p.component(comp)]

        return cls(lift("ups"), lift("syn"), lift("arm"))

    def component(self, comp: str) -> list[T.Tensor]:
        if comp == "ups":
            return self.ups
        if comp == "syn":
            return self.syn
        if comp == "arm":
            return self.arm
        raise ValueError(f"unknown component {comp!r}")

    def trainables(self) -> list[T.Tensor]:
        out = []
        for comp in COMPONENTS:
            out.extend(t for t in self.component(comp) if t.requires_grad)
        return out

    def to_params(self) -> DecoderParams:
        return DecoderParams(self.ups[0].data.copy(),
                             [t.data.copy() for t in self.syn],
                             [t.data.copy() for t in self.arm])


def _as_tensor_params(params) -> TensorParams:
    if isinstance(params, TensorParams):
        return params
    return TensorParams.from_params(params)


def _check_schedule(shapes: list[tuple[int, int]]) -> list[tuple[int, int]]:
    h, w = shapes[0]
    want = grid_shapes(h, w, len(shapes))
    if list(shapes) != want:
        raise CodecError(f"latent shapes {shapes} do not form a pyramid {want}")
    return want


# -- training-side forward ------------------------------------------------------


def upsample_all(latents: list[T.Tensor], params) -> T.Tensor:
    """Upsample every latent grid to full resolution: (n, H, W) feature stack."""
    tp = _as_tensor_params(params)
    ups = tp.ups[0]
    schedule = _check_schedule([t.shape for t in latents])
    chans = []
    for i, g in enumerate(latents):
        t = g.reshape((1,) + g.shape)
        for level in range(i, 0, -1):
            t = T.transposed_conv2d(t, ups, padding="edge")
            th, tw = schedule[level - 1]
            t = T.crop_hw(t, th, tw)
        chans.append(t.reshape(t.shape[1:]))
    return T.stack0(chans)


def synthesize(features: T.Tensor, params) -> T.Tensor:
    """(n, H, W) features -> (3, H, W) image in [0, 1]."""
    tp = _as_tensor_params(params)
    w0, b0, w1, b1, w2, b2 = tp.syn
    h = T.add_channel_bias(T.conv2d(features, w0), b0).relu()
    h = T.add_channel_bias(T.conv2d(h, w1), b1).relu()
    y = T.add_channel_bias(T.conv2d(h, w2, pad=1), b2)
    return y.clamp(0.0, 1.0)


def arm_forward(grid: T.Tensor, params) -> tuple[T.Tensor, T.Tensor]:
    """Context-model prediction for one grid: per-cell (mu, b), b >= 1e-6."""
    tp = _as_tensor_params(params)
    w1, b1, w2, b2, w3, b3 = tp.arm
    h, w = grid.shape
    ctx = T.stack0([T.shift2d(grid, di, dj) for di, dj in CTX_OFFSETS])
    z = T.add_channel_bias(T.conv2d(ctx, w1.reshape(ARM_HIDDEN, 8, 1, 1)), b1).relu()
    z = T.add_channel_bias(T.conv2d(z, w2.reshape(ARM_HIDDEN, ARM_HIDDEN, 1, 1)), b2).relu()
    out = T.add_channel_bias(T.conv2d(z, w3.reshape(2, ARM_HIDDEN, 1, 1)), b3)
    mu = T.slice0(out, 0, 1).reshape(h, w)
    b = T.slice0(out, 1, 2).reshape(h, w).exp() + T.Tensor(1e-6)
    return mu, b


def latent_rate_bits(latents: list[T.Tensor], params) -> T.Tensor:
    """Total code length in bits under the context model (mass floored 2^-16)."""
    tp = _as_tensor_params(params)
    total = None
    for g in latents:
        mu, b = arm_forward(g, tp)
        lp = T.laplace_log_prob_box(g, mu, b).sum()
        total = lp if total is None else total + lp
    return total * (-1.0 / _LOG2)


def decode_image(latents: list[T.Tensor], params) -> T.Tensor:
    return synthesize(upsample_all(latents, params), params)


def rd_terms(x, latents: list[T.Tensor], params, lam: float,
             quant: str = "none", rng: np.random.Generator | None = None):
    """Rate-distortion loss pieces: (loss, rate_bits, mse) as Tensors.

    loss = rate_bits/(H*W) + lam * mse, with mse over [0, 1] pixels. quant
    selects the surrogate applied to the latents: "none", "noise" or "ste".
    """
    tp = _as_tensor_params(params)
    xt = x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float64))
    if xt.ndim != 3 or xt.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {xt.shape}")
    if quant == "none":
        q = latents
    else:
        q = [T.quantize_surrogate(g, quant, rng) for g in latents]
    bits = latent_rate_bits(q, tp)
    img = decode_image(q, tp)
    diff = img - xt
    mse = (diff * diff).mean()
    hw = xt.shape[1] * xt.shape[2]
    loss = bits * (1.0 / hw) + mse * lam
    return loss, bits, mse


def rd_loss(x, latents: list[T.Tensor], params, lam: float,
            quant: str = "none", rng: np.random.Generator | None = None) -> T.Tensor:
    """Scalar rate-distortion objective; see rd_terms."""
    return rd_terms(x, latents, params, lam, quant, rng)[0]


# -- inference-side forward (plain numpy, bit-identical to the above) -------------


def upsample_arrays(grids: list[np.ndarray], ups: np.ndarray) -> np.ndarray:
    shapes = [np.asarray(g).shape for g in grids]
    schedule = _check_schedule(shapes)
    chans = []
    for i, g in enumerate(grids):
        t = np.asarray(g, dtype=np.float64).reshape(1, *np.asarray(g).shape)
        for level in range(i, 0, -1):
            h, w = t.shape[1], t.shape[2]
            big = F.tconv2d_raw(F.edge_pad1(t), ups)
            t = big[:, 2:2 + 2 * h, 2:2 + 2 * w]
            th, tw = schedule[level - 1]
            t = t[:, :th, :tw]
        chans.append(t[0])
    return np.stack(chans)


def synthesize_arrays(features: np.ndarray, syn: list[np.ndarray]) -> np.ndarray:
    w0, b0, w1, b1, w2, b2 = syn
    h = F.conv2d_raw(features, w0) + b0[:, None, None]
    h = np.where(h > 0.0, h, 0.0)
    h = F.conv2d_raw(h, w1) + b1[:, None, None]
    h = np.where(h > 0.0, h, 0.0)
    y = F.conv2d_raw(h, w2, pad=1) + b2[:, None, None]
    return np.clip(y, 0.0, 1.0)


def decode_arrays(grids: list[np.ndarray], params: DecoderParams) -> np.ndarray:
    """Reference decode: latent grids + weights -> (3, H, W) image in [0, 1]."""
    return synthesize_arrays(upsample_arrays(grids, params.ups), params.syn)


def arm_mu_b_arrays(grid: np.ndarray, arm: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized context-model prediction over one grid."""
    w1, b1, w2, b2, w3, b3 = arm
    g = np.asarray(grid, dtype=np.float64)
    h, w = g.shape
    ctx = np.zeros((8, h, w))
    for c, (di, dj) in enumerate(CTX_OFFSETS):
        i0, i1 = max(0, -di), min(h, h - di)
        j0, j1 = max(0, -dj), min(w, w - dj)
        if i0 < i1 and j0 < j1:
            ctx[c, i0:i1, j0:j1] = g[i0 + di:i1 + di, j0 + dj:j1 + dj]
    z = w1 @ ctx.reshape(8, -1) + b1[:, None]
    z = np.where(z > 0.0, z, 0.0)
    z = w2 @ z + b2[:, None]
    z = np.where(z > 0.0, z, 0.0)
    out = w3 @ z + b3[:, None]
    return out[0].reshape(h, w), np.exp(out[1].reshape(h, w)) + 1e-6


def rate_bits_arrays(grids: list[np.ndarray], arm: list[np.ndarray]) -> float:
    """Ideal float rate of integer grids under the context model."""
    total = 0.0
    for g in grids:
        mu, b = arm_mu_b_arrays(g, arm)
        g = np.asarray(g, dtype=np.float64)
        u_hi = g + 0.5 - mu
        u_lo = g - 0.5 - mu
        cdf_hi = np.where(u_hi < 0.0, 0.5 * np.exp(u_hi / b), 1.0 - 0.5 * np.exp(-u_hi / b))
        cdf_lo = np.where(u_lo < 0.0, 0.5 * np.exp(u_lo / b), 1.0 - 0.5 * np.exp(-u_lo / b))
        mass = np.maximum(cdf_hi - cdf_lo, T.MASS_FLOOR)
        total += float(-np.log2(mass).sum())
    return total
