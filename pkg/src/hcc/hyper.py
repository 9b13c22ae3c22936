"""Weight-modulation prediction: one forward pass adapts the shared decoder.

A small conv backbone summarizes the image into a feature vector; per-component
MLP heads emit additive deltas for the decoder weights (w_e = w + delta). The
encoder quantizes the deltas, then a switch keeps them only when their coded
size is outweighed by the rate-distortion gain, falling back to a mode-0
stream byte-identically otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import analysis as A
from . import bitstream
from . import entropy
from . import model
from . import tensor as T
from .errors import CodecError
from .model import DecoderParams, LatentGrids

__all__ = [
    "BACKBONE_CHANNELS",
    "FEATURE_DIM",
    "HEAD_HIDDEN",
    "HYPER_MAGIC",
    "HyperNet",
    "Modulation",
    "default_hypernet",
    "predict_modulations",
    "apply_modulations",
    "train_hypernet",
    "quantize_modulations",
    "modulation_switch",
    "hyper_encode",
    "fit_laplace_std",
    "save_hypernet",
    "load_hypernet",
]

# Backbone: stride-2 3x3 convs, then a global spatial mean.
BACKBONE_CHANNELS = (3, 16, 32, 64, 128)
BACKBONE_KERNEL = 3
FEATURE_DIM = BACKBONE_CHANNELS[-1]
HEAD_HIDDEN = 64
HYPER_MAGIC = b"HHM1"

LR_HYPER = 1e-3


def backbone_shapes() -> list[tuple[int, ...]]:
    out = []
    for cin, cout in zip(BACKBONE_CHANNELS[:-1], BACKBONE_CHANNELS[1:]):
        out.append((cout, cin, BACKBONE_KERNEL, BACKBONE_KERNEL))
        out.append((cout,))
    return out


def head_shapes(comp: str, n_grids: int) -> list[tuple[int, ...]]:
    p = model.component_size(comp, n_grids)
    return [(HEAD_HIDDEN, FEATURE_DIM), (HEAD_HIDDEN,), (p, HEAD_HIDDEN), (p,)]


@dataclass
class HyperNet:
    """Backbone + per-component heads; treat as immutable once built."""

    backbone: list[np.ndarray]
    heads: dict[str, list[np.ndarray]]
    n_grids: int
    _blob: bytes | None = field(default=None, repr=False, compare=False)

    @property
    def enabled(self) -> tuple[str, ...]:
        return tuple(c for c in model.COMPONENTS if c in self.heads)

    def validate(self) -> None:
        got = [a.shape for a in self.backbone]
        if got != backbone_shapes():
            raise CodecError(f"backbone shapes {got} do not match {backbone_shapes()}")
        if not self.heads:
            raise CodecError("hypernet has no enabled components")
        for comp, head in self.heads.items():
            if comp not in model.COMPONENTS:
                raise CodecError(f"unknown component {comp!r}")
            got = [a.shape for a in head]
            want = head_shapes(comp, self.n_grids)
            if got != want:
                raise CodecError(f"{comp} head shapes {got} do not match {want}")
        for arr in self.backbone + [a for h in self.heads.values() for a in h]:
            if not np.all(np.isfinite(arr)):
                raise CodecError("non-finite values in hypernet weights")

    def to_bytes(self) -> bytes:
        if self._blob is None:
            flags = 0
            for comp in self.enabled:
                flags |= 1 << bitstream.COMPONENT_IDS[comp]
            tensors = list(self.backbone)
            for comp in self.enabled:
                tensors.extend(self.heads[comp])
            self._blob = bitstream.write_model_file(
                HYPER_MAGIC, bytes([flags, self.n_grids]), tensors)
        return self._blob

    @property
    def model_id(self) -> bytes:
        return self.to_bytes()[-8:]


@dataclass
class Modulation:
    """Flat per-component weight deltas; steps filled once quantized."""

    values: dict[str, np.ndarray]
    steps: dict[str, int]

    def validate(self, n_grids: int) -> None:
        for comp, v in self.values.items():
            want = model.component_size(comp, n_grids)
            if v.ndim != 1 or v.size != want:
                raise CodecError(f"{comp} delta holds {v.size} values, want {want}")


def default_hypernet(n_grids: int = model.N_GRIDS_DEFAULT,
                     components: Sequence[str] = model.COMPONENTS,
                     seed: int = 0) -> HyperNet:
    """He-initialized backbone; head output layers zero so deltas start at 0."""
    components = tuple(components)
    for c in components:
        if c not in model.COMPONENTS:
            raise CodecError(f"unknown component {c!r}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    backbone = []
    for cin, cout in zip(BACKBONE_CHANNELS[:-1], BACKBONE_CHANNELS[1:]):
        fan_in = BACKBONE_KERNEL * BACKBONE_KERNEL * cin
        backbone.append(rng.standard_normal((cout, cin, BACKBONE_KERNEL, BACKBONE_KERNEL))
                        * np.sqrt(2.0 / fan_in))
        backbone.append(np.zeros(cout))
    heads = {}
    for comp in model.COMPONENTS:
        if comp not in components:
            continue
        p = model.component_size(comp, n_grids)
        heads[comp] = [
            rng.standard_normal((HEAD_HIDDEN, FEATURE_DIM)) * np.sqrt(2.0 / FEATURE_DIM),
            np.zeros(HEAD_HIDDEN),
            np.zeros((p, HEAD_HIDDEN)),
            np.zeros(p),
        ]
    h = HyperNet(backbone, heads, n_grids)
    h.validate()
    return h


def _forward_deltas(xt: T.Tensor, backbone_t: list[T.Tensor],
                    heads_t: dict[str, list[T.Tensor]]) -> dict[str, T.Tensor]:
    """Engine forward to per-component flat delta tensors."""
    t = xt
    for i in range(0, len(backbone_t), 2):
        t = T.add_channel_bias(T.conv2d(t, backbone_t[i], stride=2, pad=1), backbone_t[i + 1])
        t = t.relu()
    feat = T.global_mean_hw(t)
    out = {}
    for comp, (w1, b1, w2, b2) in heads_t.items():
        z = T.linear(feat, w1, b1).relu()
        out[comp] = T.linear(z, w2, b2)
    return out


def predict_modulations(x: np.ndarray, hyper: HyperNet) -> Modulation:
    """One forward pass to unquantized deltas for the enabled components."""
    x = A._check_image(x)
    backbone_t = [T.Tensor(a) for a in hyper.backbone]
    heads_t = {c: [T.Tensor(a) for a in hyper.heads[c]] for c in hyper.enabled}
    deltas = _forward_deltas(T.Tensor(x), backbone_t, heads_t)
    mod = Modulation({c: d.data.copy() for c, d in deltas.items()}, {})
    mod.validate(hyper.n_grids)
    return mod


def apply_modulations(w: DecoderParams, delta: Modulation) -> DecoderParams:
    """w + delta on present components; absent components copied unchanged."""
    delta.validate(w.n_grids)
    return w.with_delta(delta.values)


def _unflatten_tensor(flat: T.Tensor, comp: str, n_grids: int) -> list[T.Tensor]:
    tensors = []
    pos = 0
    for s in model.component_shapes(comp, n_grids):
        n = int(np.prod(s))
        tensors.append(T.slice0(flat, pos, pos + n).reshape(s))
        pos += n
    return tensors


def train_hypernet(corpus: Sequence[np.ndarray], base: A.BaseModel, lmbda: float,
                   steps: int, batch: int = 1, patch: int = 256, seed: int = 0,
                   components: Sequence[str] = model.COMPONENTS
                   ) -> tuple[HyperNet, list[float]]:
    """Adam on hypernet weights only; the base model is frozen throughout.

    Latents come from the base analysis transform hard-rounded (no surrogate),
    so no gradient reaches the analysis heads, and base decoder weights enter
    the graph as constants. The loss is latent bits plus lambda * MSE under
    the modulated decoder; modulation coding costs are excluded.
    """
    if not corpus:
        raise CodecError("training corpus is empty")
    images = [A._check_image(x) for x in corpus]
    for x in images:
        if x.shape[1] < patch or x.shape[2] < patch:
            raise CodecError(f"patch {patch} exceeds image size {x.shape[1]}x{x.shape[2]}")
    if batch < 1:
        raise CodecError(f"batch {batch} must be positive")
    base.validate()

    hyper = default_hypernet(base.n_grids, components, seed)
    rng = np.random.default_rng(np.random.PCG64(seed))
    backbone_t = [T.Tensor(a.copy(), requires_grad=True) for a in hyper.backbone]
    heads_t = {c: [T.Tensor(a.copy(), requires_grad=True) for a in hyper.heads[c]]
               for c in hyper.enabled}
    trainables = backbone_t + [t for head in heads_t.values() for t in head]
    opt = T.Adam(trainables, lr=LR_HYPER)
    base_flat = {c: base.decoder.flatten(c) for c in model.COMPONENTS}

    losses: list[float] = []
    for _ in range(steps):
        total = None
        for _ in range(batch):
            img = images[int(rng.integers(len(images)))]
            top = int(rng.integers(img.shape[1] - patch + 1))
            left = int(rng.integers(img.shape[2] - patch + 1))
            x = img[:, top:top + patch, left:left + patch]
            latents = A.analysis(x, base)
            latent_t = [T.Tensor(g.astype(np.float64)) for g in latents.grids]
            deltas = _forward_deltas(T.Tensor(x), backbone_t, heads_t)
            comps = {}
            for comp in model.COMPONENTS:
                if comp in deltas:
                    flat_e = deltas[comp] + T.Tensor(base_flat[comp])
                    comps[comp] = _unflatten_tensor(flat_e, comp, base.n_grids)
                else:
                    comps[comp] = [T.Tensor(a) for a in base.decoder.component(comp)]
            params_t = model.TensorParams(comps["ups"], comps["syn"], comps["arm"])
            loss = model.rd_loss(x, latent_t, params_t, lmbda, quant="none")
            total = loss if total is None else total + loss
        total = total * (1.0 / batch)
        value = float(total.data)
        if not np.isfinite(value):
            raise CodecError(f"non-finite training loss at step {len(losses)}")
        opt.zero_grad()
        total.backward()
        opt.step()
        losses.append(value)

    trained = HyperNet(
        [t.data.copy() for t in backbone_t],
        {c: [t.data.copy() for t in heads_t[c]] for c in hyper.enabled},
        base.n_grids)
    trained.validate()
    return trained, losses


def _decode_mse(x: np.ndarray, latents: LatentGrids, params: DecoderParams) -> float:
    rec = model.decode_arrays([g.astype(np.float64) for g in latents.grids], params)
    return float(np.mean((rec - x) ** 2))


def _quantized_values(delta: Modulation, steps: dict[str, int | None]) -> dict[str, np.ndarray]:
    """Deltas with chosen components snapped to their step grid."""
    out = {}
    for comp, raw in delta.values.items():
        idx = steps.get(comp)
        if idx is None:
            out[comp] = raw
        else:
            out[comp] = bitstream.dequantize_param_tensor(
                bitstream.quantize_param_tensor(raw, idx), idx)
    return out


def quantize_modulations(x: np.ndarray, base: A.BaseModel, delta: Modulation,
                         lmbda: float, latents: LatentGrids | None = None) -> Modulation:
    """Greedy per-component step search minimizing the full mode-1 stream cost:
    (modulation bits + latent payload bits)/(H*W) + lambda * decoded MSE."""
    x = A._check_image(x)
    delta.validate(base.n_grids)
    if latents is None:
        latents = A.analysis(x, base)
    hw = x.shape[1] * x.shape[2]
    comps = [c for c in model.COMPONENTS if c in delta.values]
    payload_cache: dict[object, int] = {}

    def evaluate(steps: dict[str, int | None]) -> float:
        values = _quantized_values(delta, steps)
        w_e = base.decoder.with_delta(values)
        chosen = {c: i for c, i in steps.items() if i is not None}
        _, mod_bits = bitstream.serialize_modulation(
            {c: delta.values[c] for c in chosen}, chosen)
        arm_key = steps.get("arm", "absent") if "arm" in delta.values else "absent"
        if arm_key not in payload_cache:
            payload, _ = entropy.encode_latent_grids(latents.grids, w_e.arm)
            payload_cache[arm_key] = 8 * len(payload)
        latent_bits = payload_cache[arm_key]
        mse = _decode_mse(x, latents, w_e)
        return (mod_bits + latent_bits) / hw + lmbda * mse

    chosen = bitstream.search_quant_steps(comps, evaluate)
    return Modulation(_quantized_values(delta, chosen), chosen)


def modulation_switch(x: np.ndarray, base: A.BaseModel, delta: Modulation,
                      lmbda: float, latents: LatentGrids | None = None
                      ) -> tuple[bool, float, float]:
    """Keep quantized modulations only on a strict stream-cost win.

    Both costs are measured from real coded payloads: bits/(H*W) plus
    lambda * MSE of the decoded reconstruction. A tie keeps the base.
    """
    x = A._check_image(x)
    if set(delta.steps) != set(delta.values):
        raise CodecError("switch needs quantized modulations (missing step indexes)")
    if latents is None:
        latents = A.analysis(x, base)
    hw = x.shape[1] * x.shape[2]

    payload_w, _ = entropy.encode_latent_grids(latents.grids, base.decoder.arm)
    cost_without = 8 * len(payload_w) / hw + lmbda * _decode_mse(x, latents, base.decoder)

    w_e = apply_modulations(base.decoder, delta)
    _, mod_bits = bitstream.serialize_modulation(delta.values, delta.steps)
    payload_e, _ = entropy.encode_latent_grids(latents.grids, w_e.arm)
    cost_with = (mod_bits + 8 * len(payload_e)) / hw + lmbda * _decode_mse(x, latents, w_e)
    return cost_with < cost_without, cost_with, cost_without


def hyper_encode(x: np.ndarray, base: A.BaseModel, hyper: HyperNet, lmbda: float) -> bytes:
    """Predict, quantize, switch: mode-1 stream on a win, else exactly mode 0."""
    x = A._check_image(x)
    if hyper.n_grids != base.n_grids:
        raise CodecError(f"hypernet built for {hyper.n_grids} grids, base has {base.n_grids}")
    latents = A.analysis(x, base)
    delta = predict_modulations(x, hyper)
    delta_q = quantize_modulations(x, base, delta, lmbda, latents=latents)
    use, _, _ = modulation_switch(x, base, delta_q, lmbda, latents=latents)
    if not use:
        payload, _ = entropy.encode_latent_grids(latents.grids, base.decoder.arm)
        header = bitstream.Header(bitstream.MODE_SHARED, x.shape[2], x.shape[1],
                                  base.n_grids, base.model_id, 0)
        return bitstream.write_bitstream(header, [], payload)
    sections, _ = bitstream.serialize_modulation(delta_q.values, delta_q.steps)
    flags = 0
    for s in sections:
        flags |= 1 << s.component_id
    w_e = apply_modulations(base.decoder, delta_q)
    payload, _ = entropy.encode_latent_grids(latents.grids, w_e.arm)
    header = bitstream.Header(bitstream.MODE_MODULATED, x.shape[2], x.shape[1],
                              base.n_grids, base.model_id, flags)
    return bitstream.write_bitstream(header, sections, payload)


def fit_laplace_std(values: Sequence[float]) -> tuple[float, float]:
    """Maximum-likelihood Laplace fit: (scale b, implied standard deviation).

    Location is the median, b the mean absolute deviation from it, and the
    distribution's standard deviation is sqrt(2) * b.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise CodecError("cannot fit a distribution to no values")
    b = float(np.mean(np.abs(arr - np.median(arr))))
    return b, b * float(np.sqrt(2.0))


def save_hypernet(hyper: HyperNet, path: str) -> None:
    hyper.validate()
    with open(path, "wb") as f:
        f.write(hyper.to_bytes())


def load_hypernet(data: bytes) -> HyperNet:
    """Parse and validate a hypernet dump; the hash trailer must match."""
    meta, tensors, _ = bitstream.read_model_file(data, HYPER_MAGIC)
    if len(meta) != 2:
        raise CodecError(f"hypernet metadata is {len(meta)} bytes, want 2")
    flags, n_grids = meta[0], meta[1]
    if flags == 0 or flags > bitstream.ALL_FLAGS:
        raise CodecError(f"bad hypernet component flags {flags:#x}")
    enabled = [c for c in model.COMPONENTS if flags & (1 << bitstream.COMPONENT_IDS[c])]
    n_backbone = len(backbone_shapes())
    want = n_backbone + 4 * len(enabled)
    if len(tensors) != want:
        raise CodecError(f"hypernet holds {len(tensors)} tensors, want {want}")
    backbone = list(tensors[:n_backbone])
    heads = {}
    for k, comp in enumerate(enabled):
        heads[comp] = list(tensors[n_backbone + 4 * k:n_backbone + 4 * (k + 1)])
    hyper = HyperNet(backbone, heads, n_grids, _blob=bytes(data))
    hyper.validate()
    return hyper
