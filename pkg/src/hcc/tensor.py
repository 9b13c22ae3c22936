"""Dense float64 tensors with reverse-mode autodiff, sized for small codecs.

Every tensor wraps a numpy float64 array. Ops record a backward closure and
their parents; ``Tensor.backward()`` runs the closures once each in reverse
topological order. Only the ops the codec needs exist: elementwise arithmetic,
ReLU/exp/clamp, shape plumbing, conv2d, a stride-2 transposed conv, linear,
average pooling, the discretized-Laplace log mass, and the two quantization
surrogates.

Multiply-accumulate accounting: conv2d, transposed_conv2d and linear bump a
module-level tally on forward; their backward closures bump exactly twice the
forward amount. Nothing else counts. The plain-numpy inference paths in other
modules never touch the tally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F

__all__ = [
    "Tensor",
    "Adam",
    "tally",
    "conv2d",
    "transposed_conv2d",
    "linear",
    "add_channel_bias",
    "pad2d",
    "crop2d",
    "crop_hw",
    "shift2d",
    "stack0",
    "slice0",
    "avgpool2d",
    "global_mean_hw",
    "laplace_log_prob_box",
    "quantize_surrogate",
    "LOG_MASS_FLOOR",
]

# Probability mass floor for the Laplace box: 2^-16, as used by the coder tables.
MASS_FLOOR = 2.0 ** -16
LOG_MASS_FLOOR = math.log(MASS_FLOOR)

# Set True to validate every op output for NaN/Inf (debugging aid; slow).
STRICT_FINITE = False


@dataclass
class MacTally:
    """Global multiply-accumulate and backward-pass counters."""

    macs: int = 0
    backward_calls: int = 0

    def reset(self) -> None:
        self.macs = 0
        self.backward_calls = 0


tally = MacTally()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        arr = np.asarray(data, dtype=np.float64)
        if not _parents and not np.all(np.isfinite(arr)):
            raise ValueError("non-finite values in tensor input")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = None

    # -- basics -------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Backpropagate from a scalar. Each recorded op runs exactly once."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        tally.backward_calls += 1
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise ops ------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        _check_broadcast(self, other)
        out = _op(self.data + other.data, (self, other))

        def bwd(g):
            self._accum(_unbroadcast(g, self.shape))
            other._accum(_unbroadcast(g, other.shape))

        out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _op(-self.data, (self,))
        out._backward = lambda g: self._accum(-g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        _check_broadcast(self, other)
        out = _op(self.data * other.data, (self, other))

        def bwd(g):
            self._accum(_unbroadcast(g * other.data, self.shape))
            other._accum(_unbroadcast(g * self.data, other.shape))

        out._backward = bwd
        return out

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        out = _op(np.asarray(self.data.sum()), (self,))
        out._backward = lambda g: self._accum(np.broadcast_to(g, self.shape).astype(np.float64))
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = _op(np.asarray(self.data.mean()), (self,))
        out._backward = lambda g: self._accum(np.broadcast_to(g / n, self.shape).astype(np.float64))
        return out

    def relu(self) -> "Tensor":
        mask = self.data > 0.0
        out = _op(np.where(mask, self.data, 0.0), (self,))
        out._backward = lambda g: self._accum(g * mask)
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = _op(y, (self,))
        out._backward = lambda g: self._accum(g * y)
        return out

    def clamp(self, lo: float, hi: float) -> "Tensor":
        """Clamp values to [lo, hi]; gradient passes only strictly inside."""
        mask = (self.data > lo) & (self.data < hi)
        out = _op(np.clip(self.data, lo, hi), (self,))
        out._backward = lambda g: self._accum(g * mask)
        return out

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        out = _op(self.data.reshape(shape), (self,))
        out._backward = lambda g: self._accum(g.reshape(old))
        return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _op(data: np.ndarray, parents: tuple) -> Tensor:
    if STRICT_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite op output")
    return Tensor(data, _parents=parents)


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    # Same shape or one side scalar; the codec needs nothing richer.
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# -- structural ops -----------------------------------------------------------


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad a 2-D tensor."""
    if x.ndim != 2:
        raise ValueError(f"pad2d expects 2-D input, got {x.shape}")
    out = _op(np.pad(x.data, ((top, bottom), (left, right))), (x,))
    h, w = x.shape

    def bwd(g):
        x._accum(g[top:top + h, left:left + w])

    out._backward = bwd
    return out


def crop2d(x: Tensor, top: int, left: int, h: int, w: int) -> Tensor:
    """Take an h x w window of a 2-D tensor at (top, left)."""
    if x.ndim != 2:
        raise ValueError(f"crop2d expects 2-D input, got {x.shape}")
    out = _op(x.data[top:top + h, left:left + w].copy(), (x,))

    def bwd(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[top:top + h, left:left + w] = g
        x._accum(full)

    out._backward = bwd
    return out


def crop_hw(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window of a (C, H, W) tensor."""
    if x.ndim != 3 or h > x.shape[1] or w > x.shape[2]:
        raise ValueError(f"crop_hw({h}, {w}) invalid for input {x.shape}")
    out = _op(x.data[:, :h, :w].copy(), (x,))

    def bwd(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[:, :h, :w] = g
        x._accum(full)

    out._backward = bwd
    return out


def shift2d(x: Tensor, di: int, dj: int) -> Tensor:
    """out[i, j] = x[i + di, j + dj], zero where the source is out of bounds."""
    h, w = x.shape
    padded = pad2d(x, max(0, -di), max(0, di), max(0, -dj), max(0, dj))
    return crop2d(padded, max(0, -di) + di, max(0, -dj) + dj, h, w)


def stack0(xs: list[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    shp = xs[0].shape
    for t in xs:
        if t.shape != shp:
            raise ValueError(f"stack0 shape mismatch {t.shape} vs {shp}")
    out = _op(np.stack([t.data for t in xs]), tuple(xs))

    def bwd(g):
        for i, t in enumerate(xs):
            t._accum(g[i])

    out._backward = bwd
    return out


def slice0(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the leading axis."""
    out = _op(x.data[start:stop].copy(), (x,))

    def bwd(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[start:stop] = g
        x._accum(full)

    out._backward = bwd
    return out


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """(C, H, W) + per-channel bias (C,)."""
    if x.ndim != 3 or b.ndim != 1 or x.shape[0] != b.shape[0]:
        raise ValueError(f"channel bias mismatch: {x.shape} vs {b.shape}")
    out = _op(x.data + b.data[:, None, None], (x, b))

    def bwd(g):
        x._accum(g)
        b._accum(g.sum(axis=(1, 2)))

    out._backward = bwd
    return out


# -- network ops ---------------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate (C_in, H, W) with (C_out, C_in, k, k)."""
    y = F.conv2d_raw(x.data, kernel.data, stride, pad)
    c_out, c_in, k, _ = kernel.shape
    fwd_macs = k * k * c_in * c_out * y.shape[1] * y.shape[2]
    tally.macs += fwd_macs
    out = _op(y, (x, kernel))
    in_hw = (x.shape[1], x.shape[2])

    def bwd(g):
        tally.macs += 2 * fwd_macs
        x._accum(F.conv2d_backward_input(g, kernel.data, in_hw, stride, pad))
        kernel._accum(F.conv2d_backward_kernel(g, x.data, k, stride, pad))

    out._backward = bwd
    return out


def transposed_conv2d(x: Tensor, kernel: Tensor, padding: str = "zero") -> Tensor:
    """Stride-2 transposed conv, 4x4 kernel, symmetric crop: (C,H,W) -> (C,2H,2W).

    padding="zero" treats cells outside the grid as zero; "edge" replicates the
    border first so a partition-of-unity kernel maps constants to constants all
    the way to the boundary.
    """
    if padding not in ("zero", "edge"):
        raise ValueError(f"unknown padding mode {padding!r}")
    h, w = x.shape[1], x.shape[2]
    c_out, c_in, k, _ = kernel.shape
    if padding == "zero":
        y = F.tconv2d_raw(x.data, kernel.data)
    else:
        xe = F.edge_pad1(x.data)
        y_big = F.tconv2d_raw(xe, kernel.data)
        y = y_big[:, 2:2 + 2 * h, 2:2 + 2 * w].copy()
    fwd_macs = k * k * c_in * c_out * (2 * h) * (2 * w)
    tally.macs += fwd_macs
    out = _op(y, (x, kernel))

    def bwd(g):
        tally.macs += 2 * fwd_macs
        if padding == "zero":
            x._accum(F.conv2d_raw(g, kernel.data, stride=2, pad=1))
            kernel._accum(F.conv2d_backward_kernel(x.data, g, k, stride=2, pad=1))
        else:
            gb = np.zeros((g.shape[0], 2 * h + 4, 2 * w + 4), dtype=np.float64)
            gb[:, 2:2 + 2 * h, 2:2 + 2 * w] = g
            xe = F.edge_pad1(x.data)
            x._accum(F.edge_pad1_backward(F.conv2d_raw(gb, kernel.data, stride=2, pad=1)))
            kernel._accum(F.conv2d_backward_kernel(xe, gb, k, stride=2, pad=1))

    out._backward = bwd
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x (.., D_in) @ weight (D_out, D_in).T + bias (D_out,)."""
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"linear shape mismatch: input {x.shape} vs weight {weight.shape}")
    y = x.data @ weight.data.T + bias.data
    apps = x.data.size // d_in
    fwd_macs = d_in * d_out * apps
    tally.macs += fwd_macs
    out = _op(y, (x, weight, bias))

    def bwd(g):
        tally.macs += 2 * fwd_macs
        g2 = g.reshape(-1, d_out)
        x2 = x.data.reshape(-1, d_in)
        x._accum((g2 @ weight.data).reshape(x.shape))
        weight._accum(g2.T @ x2)
        bias._accum(g2.sum(axis=0))

    out._backward = bwd
    return out


def avgpool2d(x: Tensor, f: int) -> Tensor:
    """Average pool (C, H, W) by factor f; partial edge windows use true counts."""
    y = F.avgpool2d_raw(x.data, f)
    out = _op(y, (x,))
    in_hw = (x.shape[1], x.shape[2])

    def bwd(g):
        x._accum(F.avgpool2d_backward(g, in_hw, f))

    out._backward = bwd
    return out


def global_mean_hw(x: Tensor) -> Tensor:
    """(C, H, W) -> (C,) spatial mean."""
    n = x.shape[1] * x.shape[2]
    out = _op(x.data.mean(axis=(1, 2)), (x,))

    def bwd(g):
        x._accum(np.broadcast_to(g[:, None, None] / n, x.shape).astype(np.float64))

    out._backward = bwd
    return out


# -- codec-specific ops ---------------------------------------------------------


def _laplace_box_parts(y: np.ndarray, mu: np.ndarray, b: np.ndarray):
    """Mass of [y-0.5, y+0.5] under Laplace(mu, b) plus edge pdf values."""
    u_hi = y + 0.5 - mu
    u_lo = y - 0.5 - mu
    # np.where evaluates both branches; the overflowing one is discarded.
    with np.errstate(over="ignore"):
        cdf_hi = np.where(u_hi < 0.0, 0.5 * np.exp(u_hi / b), 1.0 - 0.5 * np.exp(-u_hi / b))
        cdf_lo = np.where(u_lo < 0.0, 0.5 * np.exp(u_lo / b), 1.0 - 0.5 * np.exp(-u_lo / b))
    mass = cdf_hi - cdf_lo
    pdf_hi = np.exp(-np.abs(u_hi) / b) / (2.0 * b)
    pdf_lo = np.exp(-np.abs(u_lo) / b) / (2.0 * b)
    # dCDF/db at an edge u: -u * exp(-|u|/b) / (2 b^2)
    db_hi = -u_hi * np.exp(-np.abs(u_hi) / b) / (2.0 * b * b)
    db_lo = -u_lo * np.exp(-np.abs(u_lo) / b) / (2.0 * b * b)
    return mass, pdf_hi, pdf_lo, db_hi, db_lo


def laplace_log_prob_box(y: Tensor, mu: Tensor, b: Tensor) -> Tensor:
    """log of the Laplace mass on [y-0.5, y+0.5], clamped below at log(2^-16).

    Differentiable in y, mu and b; the clamp zeroes all three gradients where
    it is active.
    """
    y = _as_tensor(y)
    mu = _as_tensor(mu)
    b = _as_tensor(b)
    if not (y.shape == mu.shape == b.shape):
        raise ValueError(f"laplace shape mismatch: y {y.shape}, mu {mu.shape}, b {b.shape}")
    mass, pdf_hi, pdf_lo, db_hi, db_lo = _laplace_box_parts(y.data, mu.data, b.data)
    clamped = mass < MASS_FLOOR
    safe = np.where(clamped, MASS_FLOOR, mass)
    out = _op(np.log(safe), (y, mu, b))

    def bwd(g):
        gp = np.where(clamped, 0.0, g / safe)
        d_y = pdf_hi - pdf_lo
        y._accum(gp * d_y)
        mu._accum(gp * (-d_y))
        b._accum(gp * (db_hi - db_lo))

    out._backward = bwd
    return out


def quantize_surrogate(y: Tensor, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    """Quantization stand-in for training.

    mode="noise": add U[-0.5, 0.5) once, gradient is the identity.
    mode="ste": round half away from zero in the forward pass, identity backward.
    """
    y = _as_tensor(y)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise surrogate needs an rng")
        data = y.data + rng.uniform(-0.5, 0.5, size=y.shape)
    elif mode == "ste":
        data = F.round_half_away(y.data)
    else:
        raise ValueError(f"unknown surrogate mode {mode!r}")
    out = _op(data, (y,))
    out._backward = lambda g: y._accum(g)
    return out


# -- optimizer -------------------------------------------------------------------


@dataclass
class _AdamSlot:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8 defaults."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._slots = [_AdamSlot(np.zeros(p.shape), np.zeros(p.shape)) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, s in zip(self.params, self._slots):
            if p.grad is None:
                continue
            g = p.grad
            s.t += 1
            s.m = self.b1 * s.m + (1.0 - self.b1) * g
            s.v = self.b2 * s.v + (1.0 - self.b2) * (g * g)
            m_hat = s.m / (1.0 - self.b1 ** s.t)
            v_hat = s.v / (1.0 - self.b2 ** s.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
