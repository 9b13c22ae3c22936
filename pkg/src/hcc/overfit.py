"""Per-image encoding: optimize latents and decoder weights, emit mode 2.

The optimizer runs two phases over a cosine learning-rate schedule: additive
uniform noise stands in for quantization during the first 90% of steps, then
straight-through rounding with a 10x smaller rate finishes. The best-loss
state (pre-update) is what gets quantized and emitted. Warm starts reuse the
single-pass encoders: init="no" starts from analysis latents and the shared
decoder, init="hyper" from the modulated decoder the switch actually picked,
so a 0-step encode reproduces those encoders' streams byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import analysis as A
from . import bitstream
from . import decoder
from . import entropy
from . import hyper as HY
from . import metrics
from . import model
from . import tensor as T
from .errors import CodecError
from .model import DecoderParams, LatentGrids

__all__ = [
    "PRESETS",
    "LAMBDA_PRESETS",
    "LR_LATENTS",
    "LR_PARAMS",
    "EncodeStats",
    "CurvePoint",
    "rd_param_search",
    "overfit_encode",
    "finetune_curve",
]

PRESETS = {"fast": 400, "slow": 5000}

# Named rate-control grid, low to high rate.
LAMBDA_PRESETS = (1e-4, 4e-4, 1e-3, 4e-3, 1e-2)

LR_LATENTS = 1e-2
LR_PARAMS = 1e-3
STE_LR_SCALE = 0.1
NOISE_FRACTION = 0.9


@dataclass
class EncodeStats:
    """Per-encode record: optimization trace plus emitted-stream measurements."""

    loss_trace: list[float]
    bpp: float
    psnr: float
    mse: float
    steps: int
    mac_total: int
    mac_per_pixel: float


class CurvePoint(NamedTuple):
    steps: int
    bpp: float
    psnr: float
    mac_per_pixel: float


def rd_param_search(x: np.ndarray, latents: LatentGrids, params: DecoderParams,
                    lmbda: float, components: Sequence[str] = model.COMPONENTS
                    ) -> dict[str, int]:
    """Quantization step index per component, chosen greedily ups->syn->arm.

    Cost is the emitted-stream view: (parameter bits + coded latent bits) per
    pixel plus lambda times the re-decoded MSE; ties keep the larger step.
    """
    x = A._check_image(x)
    hw = x.shape[1] * x.shape[2]
    floats = [g.astype(np.float64) for g in latents.grids]
    payload_cache: dict[object, int] = {}

    def candidate(steps: dict[str, int | None]) -> tuple[DecoderParams, int]:
        out = params
        bits = 0
        for comp, idx in steps.items():
            if idx is None:
                continue
            q = bitstream.quantize_param_tensor(params.flatten(comp), idx)
            out = out.with_component_flat(comp, bitstream.dequantize_param_tensor(q, idx))
            section = bitstream.make_section(bitstream.COMPONENT_IDS[comp], idx, q)
            bits += 8 * len(bitstream.section_bytes(section))
        return out, bits

    def evaluate(steps: dict[str, int | None]) -> float:
        trial, param_bits = candidate(steps)
        arm_key = steps.get("arm") if "arm" in steps else "fixed"
        if arm_key not in payload_cache:
            payload, _ = entropy.encode_latent_grids(latents.grids, trial.arm)
            payload_cache[arm_key] = 8 * len(payload)
        rec = model.decode_arrays(floats, trial)
        mse = float(np.mean((rec - x) ** 2))
        return (param_bits + payload_cache[arm_key]) / hw + lmbda * mse

    return bitstream.search_quant_steps(list(components), evaluate)


def _emit_dedicated(x: np.ndarray, latents: LatentGrids, params: DecoderParams,
                    lmbda: float) -> bytes:
    """Quantize parameters, then write a self-contained mode-2 stream."""
    steps = rd_param_search(x, latents, params, lmbda)
    sections = []
    emitted = params
    for comp in model.COMPONENTS:
        idx = steps[comp]
        q = bitstream.quantize_param_tensor(params.flatten(comp), idx)
        sections.append(bitstream.make_section(bitstream.COMPONENT_IDS[comp], idx, q))
        emitted = emitted.with_component_flat(comp, bitstream.dequantize_param_tensor(q, idx))
    payload, _ = entropy.encode_latent_grids(latents.grids, emitted.arm)
    header = bitstream.Header(bitstream.MODE_DEDICATED, x.shape[2], x.shape[1],
                              latents.n, bitstream.NULL_MODEL_ID, bitstream.ALL_FLAGS)
    return bitstream.write_bitstream(header, sections, payload)


def _emit_shared(x: np.ndarray, latents: LatentGrids, base: A.BaseModel) -> bytes:
    payload, _ = entropy.encode_latent_grids(latents.grids, base.decoder.arm)
    header = bitstream.Header(bitstream.MODE_SHARED, x.shape[2], x.shape[1],
                              base.n_grids, base.model_id, 0)
    return bitstream.write_bitstream(header, [], payload)


def _stats_for(x: np.ndarray, stream: bytes, trace: list[float], steps: int,
               macs: metrics.ComplexityReport, base: A.BaseModel | None) -> EncodeStats:
    rec, _ = decoder.decode_stream(stream, base)
    mse = float(np.mean((rec - x) ** 2))
    hw = x.shape[1] * x.shape[2]
    return EncodeStats(trace, 8 * len(stream) / hw, metrics.psnr(x, rec), mse,
                       steps, macs.total, macs.per_pixel)


def _resolve_init(x: np.ndarray, init: str, lmbda: float, base: A.BaseModel | None,
                  hyp: HY.HyperNet | None, n_grids: int | None, rng: np.random.Generator
                  ) -> tuple[LatentGrids, DecoderParams, bytes | None]:
    """Starting latents/params plus the delegate stream a 0-step encode emits."""
    if init == "random":
        n = n_grids if n_grids is not None else model.N_GRIDS_DEFAULT
        params = model.default_decoder_params(n, rng)
        latents = LatentGrids.zeros(x.shape[1], x.shape[2], n)
        return latents, params, None
    if base is None:
        raise CodecError(f"init={init!r} needs a base model")
    if n_grids is not None and n_grids != base.n_grids:
        raise CodecError(f"n_grids {n_grids} conflicts with base model's {base.n_grids}")
    latents = A.analysis(x, base)
    if init == "no":
        return latents, base.decoder.copy(), _emit_shared(x, latents, base)
    if init == "hyper":
        if hyp is None:
            raise CodecError("init='hyper' needs a hypernet")
        if hyp.n_grids != base.n_grids:
            raise CodecError(f"hypernet built for {hyp.n_grids} grids, base has {base.n_grids}")
        delta = HY.predict_modulations(x, hyp)
        delta_q = HY.quantize_modulations(x, base, delta, lmbda, latents=latents)
        use, _, _ = HY.modulation_switch(x, base, delta_q, lmbda, latents=latents)
        if not use:
            return latents, base.decoder.copy(), _emit_shared(x, latents, base)
        sections, _ = bitstream.serialize_modulation(delta_q.values, delta_q.steps)
        flags = 0
        for s in sections:
            flags |= 1 << s.component_id
        w_e = HY.apply_modulations(base.decoder, delta_q)
        payload, _ = entropy.encode_latent_grids(latents.grids, w_e.arm)
        header = bitstream.Header(bitstream.MODE_MODULATED, x.shape[2], x.shape[1],
                                  base.n_grids, base.model_id, flags)
        return latents, w_e, bitstream.write_bitstream(header, sections, payload)
    raise CodecError(f"unknown init {init!r}")


def _encode_checkpoints(x: np.ndarray, lmbda: float, checkpoints: list[int], init: str,
                        seed: int, base: A.BaseModel | None, hyp: HY.HyperNet | None,
                        schedule_total: int | None, n_grids: int | None
                        ) -> list[tuple[bytes, EncodeStats]]:
    """One optimization run, a finalized stream at each requested step count."""
    x = A._check_image(x)
    if not checkpoints or sorted(set(checkpoints)) != list(checkpoints):
        raise CodecError(f"checkpoints {checkpoints} must be unique and ascending")
    if checkpoints[0] < 0:
        raise CodecError("negative checkpoint")
    total = checkpoints[-1]
    horizon = schedule_total if schedule_total is not None else total
    if horizon < total:
        raise CodecError(f"schedule horizon {horizon} shorter than {total} steps")

    rng = np.random.default_rng(np.random.PCG64(seed))
    latents0, params0, delegate = _resolve_init(x, init, lmbda, base, hyp, n_grids, rng)
    n = latents0.n
    mode = "overfit" if init == "random" else ("overfit" if init == "no" else "warmstart")

    def report(step_count: int) -> metrics.ComplexityReport:
        return metrics.mac_count(x.shape[1], x.shape[2], n, mode, step_count, init=init)

    out: list[tuple[bytes, EncodeStats]] = []
    trace: list[float] = []
    want = iter(checkpoints)
    next_cp = next(want)

    def finalize(at_step: int, best_latents: list[np.ndarray],
                 best_params: DecoderParams) -> tuple[bytes, EncodeStats]:
        if at_step == 0 and delegate is not None:
            return delegate, _stats_for(x, delegate, [], 0, report(0), base)
        snapped = LatentGrids(list(best_latents)).round_clamp()
        stream = _emit_dedicated(x, snapped, best_params, lmbda)
        return stream, _stats_for(x, stream, list(trace), at_step, report(at_step), None)

    best_loss = math.inf
    best_latents = [g.astype(np.float64) for g in latents0.grids]
    best_params = params0.copy()
    if next_cp == 0:
        out.append(finalize(0, best_latents, best_params))
        next_cp = next(want, None)
        if next_cp is None:
            return out

    latent_t = [T.Tensor(g.astype(np.float64), requires_grad=True) for g in latents0.grids]
    params_t = model.TensorParams.from_params(params0, trainable=model.COMPONENTS)
    opt_lat = T.Adam(latent_t, lr=LR_LATENTS)
    opt_par = T.Adam(params_t.trainables(), lr=LR_PARAMS)
    noise_steps = int(NOISE_FRACTION * horizon)

    for t in range(total):
        phase = "noise" if t < noise_steps else "ste"
        scale = 0.5 * (1.0 + math.cos(math.pi * t / horizon))
        if phase == "ste":
            scale *= STE_LR_SCALE
        opt_lat.lr = LR_LATENTS * scale
        opt_par.lr = LR_PARAMS * scale
        loss = model.rd_loss(x, latent_t, params_t, lmbda, quant=phase, rng=rng)
        value = float(loss.data)
        if not math.isfinite(value):
            raise CodecError(f"non-finite loss at step {t}")
        if value < best_loss:
            best_loss = value
            best_latents = [g.data.copy() for g in latent_t]
            best_params = params_t.to_params()
        trace.append(value)
        opt_lat.zero_grad()
        opt_par.zero_grad()
        loss.backward()
        opt_lat.step()
        opt_par.step()
        if t + 1 == next_cp:
            out.append(finalize(t + 1, best_latents, best_params))
            next_cp = next(want, None)
            if next_cp is None:
                break
    return out


def overfit_encode(x: np.ndarray, lmbda: float, steps: int | None = None,
                   preset: str = "fast", init: str = "random", seed: int = 0,
                   base: A.BaseModel | None = None, hyp: HY.HyperNet | None = None,
                   schedule_total: int | None = None, n_grids: int | None = None
                   ) -> tuple[bytes, EncodeStats]:
    """Optimize one image and emit its bitstream; see the module docstring.

    steps overrides the preset; schedule_total stretches the learning-rate
    schedule past the executed steps so checkpointed runs replay exactly.
    """
    if steps is None:
        if preset not in PRESETS:
            raise CodecError(f"unknown preset {preset!r}")
        steps = PRESETS[preset]
    if steps < 0:
        raise CodecError(f"negative step count {steps}")
    [(stream, stats)] = _encode_checkpoints(x, lmbda, [steps], init, seed, base, hyp,
                                            schedule_total, n_grids)
    return stream, stats


def finetune_curve(x: np.ndarray, lmbda: float, checkpoints: Sequence[int],
                   init: str = "random", seed: int = 0,
                   base: A.BaseModel | None = None, hyp: HY.HyperNet | None = None,
                   n_grids: int | None = None) -> list[CurvePoint]:
    """Rate/quality/complexity at several step counts from one optimization run.

    Point k matches overfit_encode(steps=checkpoints[k],
    schedule_total=max(checkpoints)) exactly, stream bytes included.
    """
    cps = sorted(set(int(c) for c in checkpoints))
    if not cps:
        raise CodecError("no checkpoints given")
    results = _encode_checkpoints(x, lmbda, cps, init, seed, base, hyp, None, n_grids)
    return [CurvePoint(c, st.bpp, st.psnr, st.mac_per_pixel)
            for c, (_, st) in zip(cps, results)]
