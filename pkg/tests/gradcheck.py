"""Central finite-difference gradient oracle and the op case registry.

Each case builds a scalar loss from leaf arrays; the harness compares every
backward gradient element against (f(x+h) - f(x-h)) / 2h in float64. The
error is relative to each leaf's gradient scale, |a - n| divided by
max(max|analytic|, 1e-8), which keeps the check element-exact up to the
finite-difference noise floor. Inputs are drawn away from kinks (relu zero,
clamp edges, mass floor) so both sides stay differentiable.
"""

from __future__ import annotations

import numpy as np

from hcc import model
from hcc import tensor as T

H_STEP = 1e-5
REL_TOL = 1e-6
ABS_FLOOR = 1e-8


def max_rel_error(build, arrays: list[np.ndarray]) -> float:
    """Worst relative gradient error of build(*leaves) over all leaf elements."""
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*leaves)
    loss.backward()

    def value_at(mod: list[np.ndarray]) -> float:
        return build(*[T.Tensor(a) for a in mod]).item()

    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = leaves[k].grad
        assert analytic is not None, f"leaf {k} got no gradient"
        denom = max(float(np.max(np.abs(analytic))), ABS_FLOOR)
        flat = a.reshape(-1)
        for i in range(flat.size):
            mod = [b.copy() for b in arrays]
            mod[k].reshape(-1)[i] = flat[i] + H_STEP
            fp = value_at(mod)
            mod[k].reshape(-1)[i] = flat[i] - H_STEP
            fm = value_at(mod)
            numeric = (fp - fm) / (2.0 * H_STEP)
            got = analytic.reshape(-1)[i]
            worst = max(worst, abs(got - numeric) / denom)
    return worst


def _away_from(rng: np.random.Generator, shape, lo: float, hi: float,
               gap: float = 0.05) -> np.ndarray:
    """Uniform draw over [lo, hi] with a margin around the interval center."""
    v = rng.uniform(lo + gap, hi - gap, shape)
    return v


def _case_arith(rng):
    x = rng.standard_normal((2, 3, 4))
    y = rng.standard_normal((2, 3, 4))

    def build(xt, yt):
        return ((xt * yt + xt - yt) * 2.0 + (-xt) + (1.0 - yt)).sum()

    return build, [x, y]


def _case_mean_exp_relu(rng):
    x = rng.uniform(0.2, 1.5, (3, 4, 4)) * rng.choice([-1.0, 1.0], (3, 4, 4))

    def build(xt):
        return (xt.relu() * (xt * 0.3).exp()).mean()

    return build, [x]


def _case_clamp(rng):
    x = np.concatenate([_away_from(rng, (8,), -1.0, 0.15),
                        _away_from(rng, (8,), 0.35, 2.0)])
    w = rng.standard_normal(16)

    def build(xt, wt):
        return (xt.clamp(0.2, 0.3) * wt).sum()

    return build, [x, w]


def _case_pad_crop_reshape(rng):
    x = rng.standard_normal((4, 5))
    y = rng.standard_normal((2, 4, 5))
    w = rng.standard_normal((12,))

    def build(xt, yt, wt):
        p = T.pad2d(xt, 1, 2, 0, 1)
        c = T.crop2d(p, 1, 1, 4, 3)
        k = T.crop_hw(yt, 3, 2)
        return (c.reshape(12) * wt).sum() + (k * k).sum()

    return build, [x, y, w]


def _case_shift_stack_slice(rng):
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))
    bias = rng.standard_normal(2)

    def build(at, bt, biast):
        s = T.stack0([T.shift2d(at, 1, 0), T.shift2d(bt, 0, -2)])
        s = T.add_channel_bias(s, biast)
        return (T.slice0(s, 0, 2) * T.slice0(s, 0, 2)).sum()

    return build, [a, b, bias]


def _case_conv2d(rng):
    x = rng.standard_normal((2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))

    def build(xt, kt):
        y = T.conv2d(xt, kt)
        z = T.conv2d(xt, kt, stride=2, pad=1)
        return ((y * y).sum() + (z * z).sum()) * 0.5

    return build, [x, k]


def _case_tconv(rng):
    x = rng.standard_normal((2, 3, 4))
    k = rng.standard_normal((2, 1, 4, 4))

    def build(xt, kt):
        yz = T.transposed_conv2d(xt, kt, padding="zero")
        ye = T.transposed_conv2d(xt, kt, padding="edge")
        return ((yz * yz).sum() + (ye * ye).sum()) * 0.5

    return build, [x, k]


def _case_linear(rng):
    x = rng.standard_normal((5, 4))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)

    def build(xt, wt, bt):
        y = T.linear(xt, wt, bt)
        return (y * y).sum() * 0.5

    return build, [x, w, b]


def _case_pool_mean(rng):
    x = rng.standard_normal((2, 5, 6))
    w = rng.standard_normal((2, 3, 3))

    def build(xt, wt):
        p = T.avgpool2d(xt, 2)
        return (p * wt).sum() + T.global_mean_hw(xt).sum()

    return build, [x, w]


def _case_laplace_box(rng):
    y = rng.uniform(-2.0, 2.0, (10,))
    mu = y + rng.uniform(-1.0, 1.0, (10,))
    raw = rng.uniform(-0.5, 0.5, (10,))

    def build(yt, mut, rawt):
        b = rawt.exp() + 1e-6
        return laplace_sum(yt, mut, b)

    def laplace_sum(yt, mut, bt):
        return T.laplace_log_prob_box(yt, mut, bt).sum()

    return build, [y, mu, raw]


def _case_quantize_noise(rng):
    x = rng.uniform(-2.0, 2.0, (3, 4))
    w = rng.standard_normal((3, 4))

    def build(xt, wt):
        q = T.quantize_surrogate(xt, "noise", np.random.default_rng(77))
        return (q * q * wt).sum()

    return build, [x, w]


def _case_rd_loss(rng):
    h = w = 6
    n = 2
    x = rng.uniform(0.1, 0.9, (3, h, w))
    shapes = model.grid_shapes(h, w, n)
    grids = [rng.uniform(-2.0, 2.0, s) for s in shapes]
    base = model.default_decoder_params(n, rng)
    comps = [base.ups] + list(base.syn) + list(base.arm)
    # Zero-context rows hit hidden relus exactly at zero-init biases; move
    # every bias off that kink so both finite-difference sides stay smooth.
    for idx in (2, 4, 8, 10):
        comps[idx] += rng.uniform(0.02, 0.1, comps[idx].shape) * \
            rng.choice([-1.0, 1.0], comps[idx].shape)

    def build(*leaves):
        latents = [leaves[0], leaves[1]]
        params = model.TensorParams([leaves[2]], list(leaves[3:9]),
                                    list(leaves[9:15]))
        loss, _, _ = model.rd_terms(x, latents, params, 0.7, quant="noise",
                                    rng=np.random.default_rng(5))
        return loss

    return build, grids + comps


CASES = {
    "arith": _case_arith,
    "mean_exp_relu": _case_mean_exp_relu,
    "clamp": _case_clamp,
    "pad_crop_reshape": _case_pad_crop_reshape,
    "shift_stack_slice": _case_shift_stack_slice,
    "conv2d": _case_conv2d,
    "transposed_conv2d": _case_tconv,
    "linear": _case_linear,
    "pool_mean": _case_pool_mean,
    "laplace_box": _case_laplace_box,
    "quantize_noise": _case_quantize_noise,
    "rd_loss": _case_rd_loss,
}


def run_case(name: str, seed: int = 0) -> float:
    build, arrays = CASES[name](np.random.default_rng(seed))
    return max_rel_error(build, arrays)
