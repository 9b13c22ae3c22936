"""Weight-modulation prediction: backbone/head forward, training, the
quantize-then-switch encoder, and the Laplace fit helper."""

from __future__ import annotations

import numpy as np
import pytest

import toys
from hcc import analysis as A
from hcc import bitstream
from hcc import entropy
from hcc import hyper as HY
from hcc import model
from hcc.decoder import decode_stream
from hcc.errors import CodecError
from test_tensor import _conv2d_loop

LMBDA = toys.TOY_LAMBDA


def _held_out(seed: int = 201, size: int = 16) -> np.ndarray:
    return toys.smooth_image(seed, size)


@pytest.fixture(scope="module")
def mini_base():
    """A tiny but genuinely trained 3-grid base for module-local tests."""
    base, _ = A.train_base([toys.smooth_image(k, 16) for k in range(2)],
                           LMBDA, 60, patch=16, seed=11, n_grids=3)
    return base


# ---------------------------------------------------------------------------
# construction and validation


def test_default_hypernet_structure():
    h = HY.default_hypernet(3, seed=0)
    assert h.enabled == model.COMPONENTS
    assert [a.shape for a in h.backbone] == HY.backbone_shapes()
    for comp in model.COMPONENTS:
        p = model.component_size(comp, 3)
        assert [a.shape for a in h.heads[comp]] == [
            (HY.HEAD_HIDDEN, HY.FEATURE_DIM), (HY.HEAD_HIDDEN,),
            (p, HY.HEAD_HIDDEN), (p,)]
    h.validate()


def test_default_hypernet_head_outputs_start_at_zero():
    h = HY.default_hypernet(3, seed=4)
    for head in h.heads.values():
        assert np.all(head[2] == 0.0) and np.all(head[3] == 0.0)
    # backbone biases start at zero; conv kernels do not
    assert all(np.all(h.backbone[i] == 0.0) for i in range(1, 8, 2))
    assert all(np.any(h.backbone[i] != 0.0) for i in range(0, 8, 2))


def test_default_hypernet_rejects_unknown_component():
    with pytest.raises(CodecError, match="unknown component"):
        HY.default_hypernet(3, components=("arm", "analysis"))


def test_validate_rejects_empty_heads():
    h = HY.default_hypernet(3, seed=0)
    with pytest.raises(CodecError, match="no enabled components"):
        HY.HyperNet(h.backbone, {}, 3).validate()


def test_validate_rejects_bad_head_shape():
    h = HY.default_hypernet(3, seed=0)
    h.heads["arm"][3] = h.heads["arm"][3][:-1]
    with pytest.raises(CodecError, match="arm head shapes"):
        h.validate()


def test_validate_rejects_non_finite_weights():
    h = HY.default_hypernet(3, seed=0)
    h.heads["syn"][0][0, 0] = np.nan
    with pytest.raises(CodecError, match="non-finite"):
        h.validate()


# ---------------------------------------------------------------------------
# prediction


def test_fresh_hypernet_predicts_exactly_zero_deltas():
    h = HY.default_hypernet(3, seed=0)
    mod = HY.predict_modulations(_held_out(), h)
    assert set(mod.values) == set(model.COMPONENTS)
    assert mod.steps == {}
    for comp in model.COMPONENTS:
        v = mod.values[comp]
        assert v.shape == (model.component_size(comp, 3),)
        assert np.all(v == 0.0)


def test_arm_only_hypernet_predicts_only_arm():
    h = HY.default_hypernet(3, components=("arm",), seed=1)
    assert h.enabled == ("arm",)
    mod = HY.predict_modulations(_held_out(), h)
    assert set(mod.values) == {"arm"}
    mod.validate(3)


def test_predict_matches_layer_by_layer_oracle():
    rng = np.random.default_rng(77)
    h = HY.default_hypernet(2, components=("ups", "arm"), seed=7)
    for i in range(1, 8, 2):
        h.backbone[i][...] = 0.05 * rng.standard_normal(h.backbone[i].shape)
    for head in h.heads.values():
        head[1][...] = 0.1 * rng.standard_normal(head[1].shape)
        head[2][...] = 0.02 * rng.standard_normal(head[2].shape)
        head[3][...] = 0.02 * rng.standard_normal(head[3].shape)
    h.validate()
    x = toys.smooth_image(31, 16)

    t = x
    for i in range(0, 8, 2):
        t = _conv2d_loop(t, h.backbone[i], stride=2, pad=1)
        t = np.maximum(t + h.backbone[i + 1][:, None, None], 0.0)
    feat = t.mean(axis=(1, 2))
    mod = HY.predict_modulations(x, h)
    for comp in ("ups", "arm"):
        w1, b1, w2, b2 = h.heads[comp]
        z = np.maximum(w1 @ feat + b1, 0.0)
        want = w2 @ z + b2
        np.testing.assert_allclose(mod.values[comp], want, rtol=0, atol=1e-12)


def test_predict_rejects_non_image():
    h = HY.default_hypernet(3, seed=0)
    with pytest.raises(CodecError):
        HY.predict_modulations(np.zeros((16, 16)), h)


# ---------------------------------------------------------------------------
# applying deltas to decoder weights


def _zero_modulation(n_grids: int) -> HY.Modulation:
    return HY.Modulation(
        {c: np.zeros(model.component_size(c, n_grids)) for c in model.COMPONENTS},
        {})


def _all_arrays(w: model.DecoderParams) -> list[np.ndarray]:
    return [w.ups] + w.syn + w.arm


def test_apply_zero_delta_is_bit_exact(mini_base):
    w = mini_base.decoder
    w_e = HY.apply_modulations(w, _zero_modulation(w.n_grids))
    for a, b in zip(_all_arrays(w), _all_arrays(w_e)):
        assert np.array_equal(a, b)


def test_apply_absent_components_copied_unchanged(mini_base):
    w = mini_base.decoder
    delta = HY.Modulation(
        {"arm": np.full(model.component_size("arm", w.n_grids), 0.25)}, {})
    w_e = HY.apply_modulations(w, delta)
    for a, b in zip([w.ups] + w.syn, [w_e.ups] + w_e.syn):
        assert np.array_equal(a, b)
    assert not np.array_equal(w.arm[0], w_e.arm[0])


def test_apply_then_subtract_restores_weights(mini_base):
    rng = np.random.default_rng(5)
    w = mini_base.decoder
    values = {c: 0.1 * rng.standard_normal(model.component_size(c, w.n_grids))
              for c in model.COMPONENTS}
    w_e = HY.apply_modulations(w, HY.Modulation(values, {}))
    w_back = HY.apply_modulations(
        w_e, HY.Modulation({c: -v for c, v in values.items()}, {}))
    for a, b in zip(_all_arrays(w), _all_arrays(w_back)):
        np.testing.assert_allclose(b, a, rtol=0, atol=1e-15)


def test_zero_delta_decode_matches_base_decode(mini_base):
    x = _held_out()
    latents = A.analysis(x, mini_base)
    grids = [g.astype(np.float64) for g in latents.grids]
    w_e = HY.apply_modulations(mini_base.decoder,
                               _zero_modulation(mini_base.n_grids))
    assert np.array_equal(model.decode_arrays(grids, w_e),
                          model.decode_arrays(grids, mini_base.decoder))


def test_apply_rejects_wrong_delta_size(mini_base):
    delta = HY.Modulation({"arm": np.zeros(7)}, {})
    with pytest.raises(CodecError, match="delta holds"):
        HY.apply_modulations(mini_base.decoder, delta)


# ---------------------------------------------------------------------------
# training


def test_train_zero_steps_matches_default_init(mini_base):
    trained, losses = HY.train_hypernet([_held_out()], mini_base, LMBDA, 0,
                                        patch=16, seed=5, components=("arm",))
    assert losses == []
    want = HY.default_hypernet(mini_base.n_grids, ("arm",), seed=5)
    assert trained.to_bytes() == want.to_bytes()


def test_train_leaves_base_frozen(mini_base):
    before_bytes = mini_base.to_bytes()
    before = [a.copy() for a in _all_arrays(mini_base.decoder)]
    HY.train_hypernet([_held_out()], mini_base, LMBDA, 3, patch=16, seed=2,
                      components=("arm",))
    assert mini_base.to_bytes() == before_bytes
    for a, b in zip(before, _all_arrays(mini_base.decoder)):
        assert np.array_equal(a, b)


def test_train_loss_decreases(mini_base):
    corpus = [toys.smooth_image(50 + k, 16) for k in range(3)]
    _, losses = HY.train_hypernet(corpus, mini_base, LMBDA, 120,
                                  patch=16, seed=3)
    assert len(losses) == 120
    assert all(np.isfinite(v) for v in losses)
    smoothed = float(np.mean(losses[-20:]))
    assert smoothed < float(np.mean(losses[:20]))
    assert smoothed < losses[0]


def test_train_rejects_empty_corpus(mini_base):
    with pytest.raises(CodecError, match="corpus is empty"):
        HY.train_hypernet([], mini_base, LMBDA, 1)


def test_train_rejects_oversized_patch(mini_base):
    with pytest.raises(CodecError, match="patch 64 exceeds"):
        HY.train_hypernet([_held_out()], mini_base, LMBDA, 1, patch=64)


def test_train_rejects_bad_batch(mini_base):
    with pytest.raises(CodecError, match="batch 0 must be positive"):
        HY.train_hypernet([_held_out()], mini_base, LMBDA, 1, patch=16,
                          batch=0)


# ---------------------------------------------------------------------------
# quantization and the keep/discard switch


def test_quantize_zero_delta_snaps_to_first_step(mini_base):
    x = _held_out()
    q = HY.quantize_modulations(x, mini_base, _zero_modulation(3), LMBDA)
    assert q.steps == {"ups": 0, "syn": 0, "arm": 0}
    assert all(np.all(v == 0.0) for v in q.values.values())


def test_quantized_values_lie_on_step_grid(engineered):
    base, hyp = engineered
    x = _held_out()
    raw = HY.predict_modulations(x, hyp)
    q = HY.quantize_modulations(x, base, raw, LMBDA)
    assert set(q.steps) == set(raw.values) == {"arm"}
    idx = q.steps["arm"]
    snapped = bitstream.dequantize_param_tensor(
        bitstream.quantize_param_tensor(raw.values["arm"], idx), idx)
    assert np.array_equal(q.values["arm"], snapped)


def test_switch_requires_quantized_steps(mini_base):
    with pytest.raises(CodecError, match="switch needs quantized"):
        HY.modulation_switch(_held_out(), mini_base, _zero_modulation(3),
                             LMBDA)


def test_switch_zero_delta_keeps_base(mini_base):
    """A zero modulation buys nothing, so its coding overhead must lose."""
    x = _held_out()
    q = HY.quantize_modulations(x, mini_base, _zero_modulation(3), LMBDA)
    use, cost_with, cost_without = HY.modulation_switch(x, mini_base, q, LMBDA)
    assert use is False
    _, mod_bits = bitstream.serialize_modulation(q.values, q.steps)
    hw = x.shape[1] * x.shape[2]
    assert cost_with > cost_without
    np.testing.assert_allclose(cost_with - cost_without, mod_bits / hw,
                               rtol=0, atol=1e-12)


def test_switch_engineered_pair_wins(engineered):
    base, hyp = engineered
    x = _held_out()
    raw = HY.predict_modulations(x, hyp)
    q = HY.quantize_modulations(x, base, raw, LMBDA)
    use, cost_with, cost_without = HY.modulation_switch(x, base, q, LMBDA)
    assert use is True
    assert cost_with < cost_without


def test_switch_costs_match_independent_recomputation(engineered):
    base, hyp = engineered
    x = _held_out()
    hw = x.shape[1] * x.shape[2]
    latents = A.analysis(x, base)
    grids = [g.astype(np.float64) for g in latents.grids]
    q = HY.quantize_modulations(x, base, HY.predict_modulations(x, hyp),
                                LMBDA, latents=latents)
    _, cost_with, cost_without = HY.modulation_switch(x, base, q, LMBDA,
                                                      latents=latents)

    payload0, _ = entropy.encode_latent_grids(latents.grids, base.decoder.arm)
    mse0 = float(np.mean((model.decode_arrays(grids, base.decoder) - x) ** 2))
    want_without = 8 * len(payload0) / hw + LMBDA * mse0

    w_e = HY.apply_modulations(base.decoder, q)
    payload1, _ = entropy.encode_latent_grids(latents.grids, w_e.arm)
    _, mod_bits = bitstream.serialize_modulation(q.values, q.steps)
    mse1 = float(np.mean((model.decode_arrays(grids, w_e) - x) ** 2))
    want_with = (mod_bits + 8 * len(payload1)) / hw + LMBDA * mse1

    np.testing.assert_allclose(cost_without, want_without, rtol=1e-12)
    np.testing.assert_allclose(cost_with, want_with, rtol=1e-12)


# ---------------------------------------------------------------------------
# single-pass encoding


def test_hyper_encode_discard_path_byte_identical(mini_base):
    """With nothing to gain, the emitted stream IS the plain shared-model
    stream, byte for byte."""
    x = _held_out()
    h = HY.default_hypernet(mini_base.n_grids, seed=0)
    assert HY.hyper_encode(x, mini_base, h, LMBDA) == A.no_encode(x, mini_base)


def test_hyper_encode_engineered_emits_modulated_stream(engineered):
    base, hyp = engineered
    x = _held_out()
    stream = HY.hyper_encode(x, base, hyp, LMBDA)
    header, sections, payload = bitstream.read_bitstream(stream)
    assert header.mode == bitstream.MODE_MODULATED
    assert header.component_flags == 1 << bitstream.COMPONENT_IDS["arm"]
    assert [s.component_id for s in sections] == [bitstream.COMPONENT_IDS["arm"]]
    assert header.base_model_id == base.model_id

    latents = A.analysis(x, base)
    q = HY.quantize_modulations(x, base, HY.predict_modulations(x, hyp),
                                LMBDA, latents=latents)
    w_e = HY.apply_modulations(base.decoder, q)
    want_payload, _ = entropy.encode_latent_grids(latents.grids, w_e.arm)
    assert payload == want_payload


def test_hyper_encode_decode_round_trip(engineered):
    base, hyp = engineered
    x = _held_out()
    stream = HY.hyper_encode(x, base, hyp, LMBDA)
    img, header = decode_stream(stream, base)
    assert header.mode == bitstream.MODE_MODULATED

    latents = A.analysis(x, base)
    q = HY.quantize_modulations(x, base, HY.predict_modulations(x, hyp),
                                LMBDA, latents=latents)
    w_e = HY.apply_modulations(base.decoder, q)
    recon = model.decode_arrays([g.astype(np.float64) for g in latents.grids],
                                w_e)
    assert np.array_equal(img, recon)


def test_hyper_encode_stream_cost_equals_min_of_switch(engineered):
    base, hyp = engineered
    x = _held_out()
    hw = x.shape[1] * x.shape[2]
    latents = A.analysis(x, base)
    q = HY.quantize_modulations(x, base, HY.predict_modulations(x, hyp),
                                LMBDA, latents=latents)
    use, cost_with, cost_without = HY.modulation_switch(x, base, q, LMBDA,
                                                        latents=latents)
    stream = HY.hyper_encode(x, base, hyp, LMBDA)
    header, sections, payload = bitstream.read_bitstream(stream)
    assert (header.mode == bitstream.MODE_MODULATED) == use

    mod_bits = 8 * sum(len(bitstream.section_bytes(s)) for s in sections)
    img, _ = decode_stream(stream, base)
    cost = (mod_bits + 8 * len(payload)) / hw + LMBDA * float(
        np.mean((img - x) ** 2))
    np.testing.assert_allclose(cost, min(cost_with, cost_without), rtol=1e-12)


def test_hyper_encode_rejects_grid_mismatch(mini_base):
    h = HY.default_hypernet(mini_base.n_grids + 1, seed=0)
    with pytest.raises(CodecError, match="hypernet built for"):
        HY.hyper_encode(_held_out(), mini_base, h, LMBDA)


# ---------------------------------------------------------------------------
# component ablation consistency


def test_arm_only_modulation_never_changes_pixels(engineered):
    """Context-model deltas reprice latents; the decoded image must be
    bit-identical to the unmodulated decode."""
    base, hyp = engineered
    x = _held_out()
    stream1 = HY.hyper_encode(x, base, hyp, LMBDA)
    assert bitstream.read_bitstream(stream1)[0].mode == bitstream.MODE_MODULATED
    img1, _ = decode_stream(stream1, base)
    img0, _ = decode_stream(A.no_encode(x, base), base)
    assert np.array_equal(img1, img0)


def test_upsampler_synthesis_modulation_never_changes_payload(mini_base):
    """Pixel-path deltas leave the context model alone, so the coded latent
    payload is bit-identical with and without them."""
    x = _held_out()
    hyp, _ = HY.train_hypernet([x], mini_base, LMBDA, 30, patch=16, seed=14,
                               components=("ups", "syn"))
    q = HY.quantize_modulations(x, mini_base,
                                HY.predict_modulations(x, hyp), LMBDA)
    assert any(np.any(v != 0.0) for v in q.values.values())
    w_e = HY.apply_modulations(mini_base.decoder, q)
    latents = A.analysis(x, mini_base)
    payload_base, _ = entropy.encode_latent_grids(latents.grids,
                                                  mini_base.decoder.arm)
    payload_mod, _ = entropy.encode_latent_grids(latents.grids, w_e.arm)
    assert payload_mod == payload_base


# ---------------------------------------------------------------------------
# Laplace fit


def test_fit_laplace_constant_values():
    assert HY.fit_laplace_std([2.5] * 10) == (0.0, 0.0)


def test_fit_laplace_three_point_exact():
    b, std = HY.fit_laplace_std([-1.0, 0.0, 1.0])
    np.testing.assert_allclose(b, 2.0 / 3.0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(std, 2.0 * np.sqrt(2.0) / 3.0, rtol=0,
                               atol=1e-15)


def test_fit_laplace_monte_carlo():
    rng = np.random.default_rng(9)
    draws = rng.laplace(0.0, 0.35, 10 ** 6)
    b, std = HY.fit_laplace_std(draws)
    np.testing.assert_allclose(b, 0.35, rtol=0.01)
    np.testing.assert_allclose(std, 0.35 * np.sqrt(2.0), rtol=0.01)


def test_fit_laplace_rejects_empty():
    with pytest.raises(CodecError, match="cannot fit"):
        HY.fit_laplace_std([])


# ---------------------------------------------------------------------------
# persistence


def test_save_load_round_trip(tmp_path):
    h = HY.default_hypernet(3, components=("ups", "arm"), seed=6)
    path = tmp_path / "toy.hhm"
    HY.save_hypernet(h, str(path))
    loaded = HY.load_hypernet(path.read_bytes())
    assert loaded.n_grids == 3
    assert loaded.enabled == ("ups", "arm")
    assert loaded.to_bytes() == h.to_bytes()
    assert loaded.model_id == h.model_id and len(h.model_id) == 8
    for a, b in zip(h.backbone, loaded.backbone):
        assert np.array_equal(a, b)
    for comp in h.enabled:
        for a, b in zip(h.heads[comp], loaded.heads[comp]):
            assert np.array_equal(a, b)


def test_load_rejects_zero_component_flags():
    h = HY.default_hypernet(3, seed=0)
    blob = bitstream.write_model_file(HY.HYPER_MAGIC, bytes([0, 3]),
                                      h.backbone)
    with pytest.raises(CodecError, match="bad hypernet component flags"):
        HY.load_hypernet(blob)


def test_load_rejects_wrong_tensor_count():
    h = HY.default_hypernet(3, seed=0)
    blob = bitstream.write_model_file(HY.HYPER_MAGIC,
                                      bytes([bitstream.ALL_FLAGS, 3]),
                                      h.backbone)
    with pytest.raises(CodecError, match="tensors, want"):
        HY.load_hypernet(blob)


def test_load_rejects_wrong_magic(mini_base):
    with pytest.raises(CodecError):
        HY.load_hypernet(mini_base.to_bytes())
