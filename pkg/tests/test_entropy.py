"""Entropy layer: exp-Golomb codes, quantized Laplace tables, range coder."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hcc import entropy, kernels
from hcc.errors import CodecError

TOT = entropy.TOT


# -- zigzag / exp-Golomb ----------------------------------------------------------


def test_zigzag_interleaves_signs():
    assert [entropy.zigzag(v) for v in (0, 1, -1, 2, -2, 3)] == [0, 1, 2, 3, 4, 5]
    for v in range(-300, 301):
        assert entropy.unzigzag(entropy.zigzag(v)) == v


def test_expgolomb_known_codewords():
    for v, bits in [(0, "1"), (1, "010"), (-1, "011"), (2, "00100"), (-2, "00101")]:
        w = entropy.BitWriter()
        entropy.write_signed_expgolomb(w, v)
        assert w.bit_length == len(bits)
        got = "".join(str((w.getvalue()[k >> 3] >> (7 - (k & 7))) & 1)
                      for k in range(w.bit_length))
        assert got == bits, f"value {v}"


def test_expgolomb_round_trip_and_bit_length():
    rng = np.random.default_rng(7)
    values = rng.integers(-5000, 5001, size=10_000)
    w = entropy.BitWriter()
    entropy.expgolomb_encode_signed(values, w)
    want_bits = sum(2 * (entropy.zigzag(int(v)) + 1).bit_length() - 1 for v in values)
    assert w.bit_length == want_bits
    assert sum(entropy.expgolomb_bit_length(int(v)) for v in values) == want_bits
    r = entropy.BitReader(w.getvalue())
    assert entropy.expgolomb_decode_signed(r, values.size) == list(values)


def test_eg_array_kernel_matches_bit_writer():
    rng = np.random.default_rng(8)
    values = rng.integers(-(10 ** 6), 10 ** 6, size=2000)
    payload, nbits = entropy.eg_encode_array(values)
    w = entropy.BitWriter()
    entropy.expgolomb_encode_signed(values, w)
    assert payload == w.getvalue()
    assert nbits == w.bit_length
    decoded, end = entropy.eg_decode_array(payload, values.size)
    np.testing.assert_array_equal(decoded, values)
    assert end == nbits


def test_bit_reader_truncation_raises():
    r = entropy.BitReader(b"\x00")
    r.read_bits(8)
    with pytest.raises(CodecError, match="truncated"):
        r.read_bit()


def test_expgolomb_rejects_absurd_prefix():
    with pytest.raises(CodecError, match="prefix"):
        entropy.read_signed_expgolomb(entropy.BitReader(b"\x00" * 16))


@settings(deadline=None, max_examples=50)
@given(st.lists(st.integers(min_value=-(10 ** 9), max_value=10 ** 9), max_size=200))
def test_eg_array_round_trip_property(values):
    arr = np.asarray(values, dtype=np.int64)
    payload, nbits = entropy.eg_encode_array(arr)
    assert len(payload) == (nbits + 7) // 8
    decoded, end = entropy.eg_decode_array(payload, arr.size)
    np.testing.assert_array_equal(decoded, arr)
    assert end == nbits


# -- frequency tables -------------------------------------------------------------


def test_quantize_pmf_flat_scale_degenerates_to_uniform():
    t = entropy.quantize_pmf(0.0, 1e9)
    assert int(t.freq.sum()) == TOT
    assert set(np.unique(t.freq)) <= {127, 128, 129}


def test_quantize_pmf_center_mass_matches_laplace_integral():
    t = entropy.quantize_pmf(0.0, 1.0)
    want = 1.0 - math.exp(-0.5)
    assert abs(t.freq[256] / TOT - want) < 2.0 ** -12
    assert int(t.freq.sum()) == TOT
    assert int(t.freq.min()) >= 1


def test_quantize_pmf_mass_floor_keeps_tails_codable():
    # mu far outside the alphabet: every in-range mass underflows the floor
    # yet each symbol must stay encodable.
    t = entropy.quantize_pmf(10_000.0, 0.01)
    assert int(t.freq.min()) >= 1
    assert int(t.freq.sum()) == TOT


def test_quantize_pmf_custom_alphabet():
    t = entropy.quantize_pmf(2.0, 0.7, lo=0, hi=15)
    assert t.lo == 0 and t.n == 16
    assert int(t.freq.sum()) == TOT
    assert int(np.argmax(t.freq)) == 2


def test_freq_table_validation():
    with pytest.raises(ValueError, match="sums to"):
        entropy.FreqTable.from_freq(0, [1, 2, 3])
    bad = np.full(512, TOT // 512, dtype=np.int64)
    bad[0] += bad[1]
    bad[1] = 0
    with pytest.raises(ValueError, match="positive"):
        entropy.FreqTable.from_freq(0, bad)


@settings(deadline=None, max_examples=60)
@given(st.floats(min_value=-300.0, max_value=300.0),
       st.floats(min_value=1e-6, max_value=1e9))
def test_quantize_pmf_always_valid_property(mu, b):
    t = entropy.quantize_pmf(mu, b)
    assert int(t.freq.sum()) == TOT
    assert int(t.freq.min()) >= 1
    assert t.cum[0] == 0 and t.cum[-1] == TOT


# -- range coder ------------------------------------------------------------------


def test_range_coder_empty_stream_is_tiny():
    data = entropy.RangeEncoder().finish()
    assert len(data) <= 6
    entropy.RangeDecoder(data)


def test_range_coder_round_trip_with_tight_size_bound():
    rng = np.random.default_rng(9)
    table = entropy.quantize_pmf(0.0, 3.0)
    symbols = np.clip(np.rint(rng.laplace(0.0, 3.0, size=100_000)), -256, 255).astype(int)
    data = entropy.range_encode(symbols, lambda i, prefix: table)
    est = sum(table.bits(int(s)) for s in symbols)
    measured = 8 * len(data)
    assert est <= measured <= est * 1.001 + 64
    assert entropy.range_decode(data, symbols.size, lambda i, prefix: table) == list(symbols)


def test_range_coder_per_symbol_tables_round_trip():
    rng = np.random.default_rng(10)
    tables = [entropy.quantize_pmf(float(rng.uniform(-30, 30)),
                                   float(rng.uniform(0.05, 20.0)))
              for _ in range(64)]
    symbols = [int(rng.integers(-256, 256)) for _ in range(64)]
    data = entropy.range_encode(symbols, tables)
    assert entropy.range_decode(data, 64, tables) == symbols


def test_range_coder_adaptive_provider_sees_causal_prefix():
    seen = []

    def provider(i, prefix):
        seen.append(list(prefix))
        # Table choice depends on the running parity of decoded history.
        parity = sum(prefix) % 2
        return entropy.quantize_pmf(float(parity), 1.5, lo=0, hi=7)

    symbols = [3, 0, 5, 1, 1, 7, 2]
    data = entropy.range_encode(symbols, provider)
    assert seen == [symbols[:k] for k in range(len(symbols))]
    seen.clear()
    assert entropy.range_decode(data, len(symbols), provider) == symbols
    assert seen == [symbols[:k] for k in range(len(symbols))]


def test_range_encoder_rejects_out_of_table_symbol():
    enc = entropy.RangeEncoder()
    with pytest.raises(CodecError, match="outside table"):
        enc.encode(entropy.quantize_pmf(0.0, 1.0, lo=0, hi=7), 9)


def test_range_encoder_rejects_use_after_finish():
    enc = entropy.RangeEncoder()
    enc.finish()
    with pytest.raises(CodecError, match="finished"):
        enc.encode(entropy.quantize_pmf(0.0, 1.0, lo=0, hi=7), 1)


def test_range_decoder_rejects_short_and_truncated_streams():
    with pytest.raises(CodecError, match="shorter"):
        entropy.RangeDecoder(b"\x00\x01\x02")
    table = entropy.quantize_pmf(0.0, 1e9)
    rng = np.random.default_rng(11)
    symbols = [int(rng.integers(-256, 256)) for _ in range(5000)]
    data = entropy.range_encode(symbols, lambda i, p: table)
    dec = entropy.RangeDecoder(data[:len(data) // 4])
    with pytest.raises(CodecError, match="truncated"):
        for _ in range(5000):
            dec.decode(table)


@settings(deadline=None, max_examples=40)
@given(st.lists(st.integers(min_value=0, max_value=15), max_size=300),
       st.floats(min_value=-5.0, max_value=20.0),
       st.floats(min_value=0.05, max_value=50.0))
def test_range_coder_round_trip_property(symbols, mu, b):
    table = entropy.quantize_pmf(mu, b, lo=0, hi=15)
    data = entropy.range_encode(symbols, lambda i, p: table)
    assert entropy.range_decode(data, len(symbols), lambda i, p: table) == symbols


# -- adaptive latent-grid coding ---------------------------------------------------


def _toy_arm(seed=12, scale=0.15):
    rng = np.random.default_rng(seed)
    return [rng.normal(scale=scale, size=s) for s in
            ((16, 8), (16,), (16, 16), (16,), (2, 16), (2,))]


def _toy_grids(seed=13):
    rng = np.random.default_rng(seed)
    return [rng.integers(-20, 21, size=s) for s in ((7, 5), (4, 3), (2, 2))]


def test_latent_grids_round_trip():
    arm = _toy_arm()
    grids = _toy_grids()
    payload, est = entropy.encode_latent_grids(grids, arm)
    shapes = [g.shape for g in grids]
    decoded, consumed, est2 = entropy.decode_latent_grids(payload, shapes, arm)
    assert consumed == len(payload)
    assert abs(est - est2) < 1e-9
    for got, want in zip(decoded, grids):
        np.testing.assert_array_equal(got, want)


def _mirror_mu_b(flat, base, h, w, i, j, arm):
    """Pure-python context model evaluation in the kernel's accumulation order."""
    w1, b1, w2, b2, w3, b3 = arm
    offsets = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (-2, 0), (0, -2), (-1, -2), (-2, -1))
    ctx = []
    for di, dj in offsets:
        ii, jj = i + di, j + dj
        inside = 0 <= ii < h and 0 <= jj < w
        ctx.append(float(flat[base + ii * w + jj]) if inside else 0.0)
    h1 = []
    for o in range(16):
        acc = b1[o]
        for c in range(8):
            acc += w1[o, c] * ctx[c]
        h1.append(acc if acc > 0.0 else 0.0)
    h2 = []
    for o in range(16):
        acc = b2[o]
        for c in range(16):
            acc += w2[o, c] * h1[c]
        h2.append(acc if acc > 0.0 else 0.0)
    mu = b3[0]
    braw = b3[1]
    for c in range(16):
        mu += w3[0, c] * h2[c]
        braw += w3[1, c] * h2[c]
    return float(mu), math.exp(braw) + 1e-6


def test_latent_grid_kernel_matches_python_range_coder():
    """The compiled adaptive coder must be byte-identical to the reference
    python range coder driven by the same tables."""
    arm = _toy_arm(seed=20)
    grids = _toy_grids(seed=21)
    payload, est = entropy.encode_latent_grids(grids, arm)

    flat = np.concatenate([g.astype(np.int64).ravel() for g in grids])
    enc = entropy.RangeEncoder()
    mirror_est = 0.0
    base = 0
    for g in grids:
        h, w = g.shape
        for i in range(h):
            for j in range(w):
                mu, b = _mirror_mu_b(flat, base, h, w, i, j, arm)
                table = entropy.quantize_pmf(mu, b)
                s = int(flat[base + i * w + j])
                mirror_est += table.bits(s)
                enc.encode(table, s)
        base += h * w
    assert enc.finish() == payload
    assert abs(mirror_est - est) < 1e-9


def test_latent_grids_empty_input():
    arm = _toy_arm()
    payload, est = entropy.encode_latent_grids([], arm)
    assert payload == b"" and est == 0.0
    decoded, consumed, est2 = entropy.decode_latent_grids(b"", [], arm)
    assert decoded == [] and consumed == 0 and est2 == 0.0


def test_latent_grids_reject_out_of_alphabet_values():
    arm = _toy_arm()
    with pytest.raises(CodecError, match=r"\[-256, 255\]"):
        entropy.encode_latent_grids([np.array([[256]])], arm)


def test_latent_grids_reject_float_grids():
    with pytest.raises(ValueError, match="integer"):
        entropy.encode_latent_grids([np.zeros((2, 2))], _toy_arm())


def test_latent_grids_reject_malformed_arm():
    with pytest.raises(ValueError, match="6 parameter tensors"):
        entropy.encode_latent_grids(_toy_grids(), _toy_arm()[:4])
    bad = _toy_arm()
    bad[0] = np.zeros((16, 9))
    with pytest.raises(ValueError, match="shape"):
        entropy.encode_latent_grids(_toy_grids(), bad)
