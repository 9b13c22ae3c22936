"""Compiled hot paths: frequency-table construction, the context-model MLP,
the carry-propagating range coder, and bulk Exp-Golomb packing.

Everything here is written twice-compatible: with numba the functions are
jit-compiled (cached on disk); without it the same Python bodies run as-is.
The compiled and interpreted paths execute identical scalar arithmetic, so
tables and byte streams agree bit for bit either way.

The range coder is the 32-bit low/range scheme with a byte cache for carry
propagation. The first emitted byte is always zero (the initial cache), the
flush is five cache shifts, and total overhead is five bytes plus one byte
per renormalization. Encoder and decoder renormalize on the same schedule,
so the decoder consumes exactly the bytes the encoder wrote.
"""

from __future__ import annotations

import math

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True

    def _jit(fn):
        return njit(cache=True)(fn)

except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def _jit(fn):
        return fn


# Latent alphabet: integers in [-256, 255].
SYM_LO = -256
N_SYM = 512
# Table total: probabilities are quantized to f/2^16 with every f >= 1.
TOT_BITS = 16
TOT = 1 << TOT_BITS
RC_TOP = 1 << 24
RC_MASK = 0xFFFFFFFF

# Causal context offsets (row delta, column delta) relative to the coded cell.
CTX_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1),
               (-2, 0), (0, -2), (-1, -2), (-2, -1))


@_jit
def _laplace_cdf(u: float, b: float) -> float:
    if u < 0.0:
        return 0.5 * math.exp(u / b)
    return 1.0 - 0.5 * math.exp(-u / b)


@_jit
def _box_mass(s: float, mu: float, b: float) -> float:
    return _laplace_cdf(s + 0.5 - mu, b) - _laplace_cdf(s - 0.5 - mu, b)


@_jit
def _kth_value(a, k):
    # k-th smallest (0-indexed). np.partition copies, so `a` is untouched.
    return np.partition(a, k)[k]


@_jit
def fill_table(mu, b, lo, p, rem, fq, cum):
    """Build the quantized frequency table for Laplace(mu, b) boxed on
    integers [lo, lo + n). Writes masses to p, frequencies to fq and the
    cumulative table to cum; rem is float64 scratch of length n.

    Frequencies are positive and sum to 2^16: largest-remainder rounding,
    bumps on ties go to the lower symbol, deficits collapse the smallest
    entries still above 1 first. A fully underflowed mass vector
    degenerates to the uniform table.
    """
    n = p.shape[0]
    hi = lo + n - 1
    # Pivot at the integer nearest mu; boxes above it are entirely right of
    # mu and below it entirely left, so their masses follow a geometric
    # recurrence with ratio exp(-1/b). Two direct evaluations seed each side.
    if not (mu >= lo - 0.5):
        k = lo
    elif mu > hi + 0.5:
        k = hi
    else:
        k = int(math.floor(mu + 0.5))
        if k < lo:
            k = lo
        elif k > hi:
            k = hi
    r = math.exp(-1.0 / b)
    p[k - lo] = _box_mass(float(k), mu, b)
    if k + 1 <= hi:
        p[k + 1 - lo] = _box_mass(float(k + 1), mu, b)
        for s in range(k + 2, hi + 1):
            p[s - lo] = p[s - 1 - lo] * r
    if k - 1 >= lo:
        p[k - 1 - lo] = _box_mass(float(k - 1), mu, b)
        for s in range(k - 2, lo - 1, -1):
            p[s - lo] = p[s + 1 - lo] * r
    total = 0.0
    for i in range(n):
        v = p[i]
        if not (v > 0.0):
            p[i] = 0.0
            v = 0.0
        total += v
    # The 1e-300 floor keeps TOT/total finite; anything that small is noise.
    if not (total > 1e-300):
        base = TOT // n
        extra = TOT - base * n
        for i in range(n):
            fq[i] = base + (1 if i < extra else 0)
    else:
        scale = TOT / total
        ssum = 0
        for i in range(n):
            q = p[i] * scale
            fl = int(q)
            rem[i] = q - fl
            if fl < 1:
                fl = 1
            fq[i] = fl
            ssum += fl
        d = TOT - ssum
        if d > 0:
            t = _kth_value(rem, n - d)
            cnt = 0
            for i in range(n):
                if rem[i] > t:
                    fq[i] += 1
                    cnt += 1
            for i in range(n):
                if cnt >= d:
                    break
                if rem[i] == t:
                    fq[i] += 1
                    cnt += 1
        elif d < 0:
            # Repay the floor bumps from the least-probable entries first:
            # collapse the smallest frequencies still above 1 level by level,
            # ties toward the lower symbol, partial take on the last level.
            # Head entries keep their rounded mass, so frequent symbols stay
            # within one part in 2^12 of the true distribution.
            need = -d
            while need > 0:
                fmin = TOT
                for i in range(n):
                    if fq[i] > 1 and fq[i] < fmin:
                        fmin = fq[i]
                take = fmin - 1
                for i in range(n):
                    if need == 0:
                        break
                    if fq[i] == fmin:
                        t = take if take <= need else need
                        fq[i] -= t
                        need -= t
    cum[0] = 0
    for i in range(n):
        cum[i + 1] = cum[i] + fq[i]


@_jit
def _arm_eval(flat, base, h, w, i, j, w1, b1, w2, b2, w3, b3, ctx, h1, h2):
    """Context-model MLP at one cell of a flattened h x w grid.

    Gathers the eight causal neighbours (zero outside the grid), runs
    8 -> 16 -> 16 -> 2 with ReLU between, and returns (mu, b) with
    b = exp(raw) + 1e-6.
    """
    ctx[0] = float(flat[base + (i - 1) * w + (j - 1)]) if (i >= 1 and j >= 1) else 0.0
    ctx[1] = float(flat[base + (i - 1) * w + j]) if i >= 1 else 0.0
    ctx[2] = float(flat[base + (i - 1) * w + (j + 1)]) if (i >= 1 and j + 1 < w) else 0.0
    ctx[3] = float(flat[base + i * w + (j - 1)]) if j >= 1 else 0.0
    ctx[4] = float(flat[base + (i - 2) * w + j]) if i >= 2 else 0.0
    ctx[5] = float(flat[base + i * w + (j - 2)]) if j >= 2 else 0.0
    ctx[6] = float(flat[base + (i - 1) * w + (j - 2)]) if (i >= 1 and j >= 2) else 0.0
    ctx[7] = float(flat[base + (i - 2) * w + (j - 1)]) if (i >= 2 and j >= 1) else 0.0
    for o in range(16):
        acc = b1[o]
        for c in range(8):
            acc += w1[o, c] * ctx[c]
        h1[o] = acc if acc > 0.0 else 0.0
    for o in range(16):
        acc = b2[o]
        for c in range(16):
            acc += w2[o, c] * h1[c]
        h2[o] = acc if acc > 0.0 else 0.0
    mu = b3[0]
    braw = b3[1]
    for c in range(16):
        mu += w3[0, c] * h2[c]
        braw += w3[1, c] * h2[c]
    return mu, math.exp(braw) + 1e-6


@_jit
def _shift_low(st, out):
    # st: [low, range, cache, cache_size, position]
    low = st[0]
    if low < 0xFF000000 or low > RC_MASK:
        carry = low >> 32
        pos = st[4]
        n = st[3]
        if pos + n > out.shape[0]:
            raise ValueError("range coder output buffer overflow")
        temp = st[2]
        while n > 0:
            out[pos] = (temp + carry) & 0xFF
            pos += 1
            temp = 0xFF
            n -= 1
        st[2] = (low >> 24) & 0xFF
        st[3] = 0
        st[4] = pos
    st[3] += 1
    st[0] = (low << 8) & RC_MASK


@_jit
def _rc_encode(st, out, cum_lo, f):
    r = st[1] >> TOT_BITS
    st[0] += r * cum_lo
    st[1] = r * f
    while st[1] < RC_TOP:
        _shift_low(st, out)
        st[1] <<= 8


@_jit
def _rc_flush(st, out):
    for _ in range(5):
        _shift_low(st, out)


@_jit
def _rc_dec_init(ds, data):
    # ds: [range, code, position]
    if data.shape[0] < 5:
        raise ValueError("range coder stream shorter than its header")
    ds[0] = RC_MASK
    code = 0
    for i in range(4):
        code = (code << 8) | data[1 + i]
    ds[1] = code
    ds[2] = 5

@_jit
def _rc_decode(ds, data, cum, n):
    r = ds[0] >> TOT_BITS
    v = ds[1] // r
    if v > TOT - 1:
        v = TOT - 1
    lo_i = 0
    hi_i = n
    while hi_i - lo_i > 1:
        mid = (lo_i + hi_i) >> 1
        if cum[mid] <= v:
            lo_i = mid
        else:
            hi_i = mid
    s = lo_i
    ds[1] -= r * cum[s]
    ds[0] = r * (cum[s + 1] - cum[s])
    while ds[0] < RC_TOP:
        if ds[2] >= data.shape[0]:
            raise ValueError("range coder stream truncated")
        ds[1] = (ds[1] << 8) | data[ds[2]]
        ds[2] += 1
        ds[0] <<= 8
    return s


@_jit
def encode_latents_kernel(flat, shapes, w1, b1, w2, b2, w3, b3, out):
    """Adaptively code flattened integer grids into out (uint8).

    flat holds the grids back to back in raster order; shapes is (n, 2)
    rows of (h, w). Each cell's table comes from the context model over the
    already-coded prefix. Returns (bytes written, estimated bits), where the
    estimate is sum(16 - log2(f)) over coded cells.
    """
    st = np.zeros(5, dtype=np.int64)
    st[1] = RC_MASK
    st[3] = 1
    p = np.empty(N_SYM, np.float64)
    rem = np.empty(N_SYM, np.float64)
    fq = np.empty(N_SYM, np.int64)
    cum = np.empty(N_SYM + 1, np.int64)
    ctx = np.empty(8, np.float64)
    h1 = np.empty(16, np.float64)
    h2 = np.empty(16, np.float64)
    est = 0.0
    base = 0
    for gi in range(shapes.shape[0]):
        h = shapes[gi, 0]
        w = shapes[gi, 1]
        for i in range(h):
            for j in range(w):
                mu, b = _arm_eval(flat, base, h, w, i, j, w1, b1, w2, b2, w3, b3, ctx, h1, h2)
                fill_table(mu, b, SYM_LO, p, rem, fq, cum)
                s = flat[base + i * w + j] - SYM_LO
                if s < 0 or s >= N_SYM:
                    raise ValueError("latent value outside the coder alphabet")
                f = cum[s + 1] - cum[s]
                est += TOT_BITS - math.log2(float(f))
                _rc_encode(st, out, cum[s], f)
        base += h * w
    _rc_flush(st, out)
    return st[4], est


@_jit
def decode_latents_kernel(data, shapes, w1, b1, w2, b2, w3, b3, flat):
    """Inverse of encode_latents_kernel; fills flat in place.

    Returns (bytes consumed, estimated bits). The context model sees exactly
    the prefix the encoder saw, so tables and renormalization match.
    """
    ds = np.zeros(3, dtype=np.int64)
    _rc_dec_init(ds, data)
    p = np.empty(N_SYM, np.float64)
    rem = np.empty(N_SYM, np.float64)
    fq = np.empty(N_SYM, np.int64)
    cum = np.empty(N_SYM + 1, np.int64)
    ctx = np.empty(8, np.float64)
    h1 = np.empty(16, np.float64)
    h2 = np.empty(16, np.float64)
    est = 0.0
    base = 0
    for gi in range(shapes.shape[0]):
        h = shapes[gi, 0]
        w = shapes[gi, 1]
        for i in range(h):
            for j in range(w):
                mu, b = _arm_eval(flat, base, h, w, i, j, w1, b1, w2, b2, w3, b3, ctx, h1, h2)
                fill_table(mu, b, SYM_LO, p, rem, fq, cum)
                s = _rc_decode(ds, data, cum, N_SYM)
                est += TOT_BITS - math.log2(float(cum[s + 1] - cum[s]))
                flat[base + i * w + j] = s + SYM_LO
        base += h * w
    return ds[2], est


@_jit
def eg_encode_kernel(values, out):
    """Pack signed ints as zigzagged order-0 exp-Golomb codes, MSB-first.

    Returns (bytes written, bits written); the last byte is zero-padded.
    """
    acc = 0
    nacc = 0
    pos = 0
    nbits = 0
    for idx in range(values.shape[0]):
        v = values[idx]
        u = 2 * v - 1 if v > 0 else -2 * v
        m = u + 1
        nb = 0
        t = m
        while t > 0:
            nb += 1
            t >>= 1
        width = 2 * nb - 1
        nbits += width
        for bitpos in range(width - 1, -1, -1):
            acc = (acc << 1) | ((m >> bitpos) & 1)
            nacc += 1
            if nacc == 8:
                if pos >= out.shape[0]:
                    raise ValueError("exp-golomb output buffer overflow")
                out[pos] = acc
                pos += 1
                acc = 0
                nacc = 0
    if nacc > 0:
        if pos >= out.shape[0]:
            raise ValueError("exp-golomb output buffer overflow")
        out[pos] = acc << (8 - nacc)
        pos += 1
    return pos, nbits


@_jit
def eg_decode_kernel(data, bit0, vals):
    """Read vals.shape[0] signed exp-Golomb codes starting at bit offset bit0.

    Returns the bit offset one past the last code.
    """
    pos = bit0
    total = data.shape[0] * 8
    for idx in range(vals.shape[0]):
        z = 0
        while True:
            if pos >= total:
                raise ValueError("exp-golomb stream truncated")
            bit = (data[pos >> 3] >> (7 - (pos & 7))) & 1
            pos += 1
            if bit == 1:
                break
            z += 1
            if z > 62:
                raise ValueError("exp-golomb prefix run too long")
        m = 1
        for _ in range(z):
            if pos >= total:
                raise ValueError("exp-golomb stream truncated")
            m = (m << 1) | ((data[pos >> 3] >> (7 - (pos & 7))) & 1)
            pos += 1
        u = m - 1
        vals[idx] = ((u + 1) >> 1) if (u & 1) == 1 else -(u >> 1)
    return pos


def warm_up() -> None:
    """Trigger compilation of every kernel on a tiny input."""
    rng = np.random.default_rng(0)
    flat = np.zeros(16, dtype=np.int64)
    flat[:8] = rng.integers(-4, 5, size=8)
    shapes = np.array([[4, 4]], dtype=np.int64)
    w1 = rng.standard_normal((16, 8)) * 0.01
    b1 = np.zeros(16)
    w2 = rng.standard_normal((16, 16)) * 0.01
    b2 = np.zeros(16)
    w3 = rng.standard_normal((2, 16)) * 0.01
    b3 = np.zeros(2)
    buf = np.zeros(2 * flat.size + 64, dtype=np.uint8)
    n, _ = encode_latents_kernel(flat, shapes, w1, b1, w2, b2, w3, b3, buf)
    back = np.zeros_like(flat)
    decode_latents_kernel(buf[:n], shapes, w1, b1, w2, b2, w3, b3, back)
    if not np.array_equal(back, flat):
        raise AssertionError("kernel warm-up round trip failed")
    vals = np.array([0, 1, -1, 7, -300, 12345], dtype=np.int64)
    ebuf = np.zeros(9 * vals.size + 16, dtype=np.uint8)
    nb, _ = eg_encode_kernel(vals, ebuf)
    out = np.zeros_like(vals)
    eg_decode_kernel(ebuf[:nb], 0, out)
    if not np.array_equal(out, vals):
        raise AssertionError("exp-golomb warm-up round trip failed")
