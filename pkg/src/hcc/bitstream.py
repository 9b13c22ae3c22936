"""Container formats: the coded-image bitstream and the model files.

Bitstream layout, all integers big-endian:

  magic "HCC1" | version u8 | mode u8 | width u16 | height u16 |
  num_grids u8 | base_model_id 8B | component_flags u8 | n_sections u8

(21 bytes), then n_sections parameter sections, each

  component_id u8 | quant_step_index u8 | count u32 | payload_len u32 |
  payload (exp-Golomb, zero-padded to a byte),

then the latent payload as u32 length + range-coded bytes. Modes: 0 encodes
with shared models only, 1 adds weight-delta sections against a base model,
2 carries the full per-image decoder (flags 0b111, zero base id). Sections
with unknown component ids are skippable by construction.

Model files share one envelope: magic | version u8 | meta_len u8 | meta |
tensor count u16 | tensors (ndim u8, dims u32 each, float64 data) | and an
8-byte sha256 prefix of everything before it, which doubles as the model id.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import entropy
from . import functional as F
from .errors import CodecError

__all__ = [
    "MAGIC",
    "VERSION",
    "MODE_SHARED",
    "MODE_MODULATED",
    "MODE_DEDICATED",
    "COMPONENT_IDS",
    "COMPONENT_NAMES",
    "NULL_MODEL_ID",
    "N_QUANT_STEPS",
    "quant_step",
    "Header",
    "ParamSection",
    "quantize_param_tensor",
    "dequantize_param_tensor",
    "make_section",
    "section_values",
    "section_bytes",
    "serialize_modulation",
    "search_quant_steps",
    "write_bitstream",
    "read_bitstream",
    "write_model_file",
    "read_model_file",
]

MAGIC = b"HCC1"
VERSION = 1
HEADER_LEN = 21

# mode byte: which decoder weights the stream assumes.
MODE_SHARED = 0
MODE_MODULATED = 1
MODE_DEDICATED = 2

COMPONENT_IDS = {"ups": 0, "syn": 1, "arm": 2}
COMPONENT_NAMES = {v: k for k, v in COMPONENT_IDS.items()}
ALL_FLAGS = 0b111
NULL_MODEL_ID = b"\x00" * 8

# Parameter quantization steps: 2^0 .. 2^-15.
N_QUANT_STEPS = 16
_SECTION_FIXED = struct.Struct(">BBII")


def quant_step(index: int) -> float:
    if not 0 <= index < N_QUANT_STEPS:
        raise ValueError(f"quant step index {index} outside [0, {N_QUANT_STEPS - 1}]")
    return 2.0 ** -index


@dataclass(frozen=True)
class Header:
    mode: int
    width: int
    height: int
    num_grids: int
    base_model_id: bytes = NULL_MODEL_ID
    component_flags: int = 0


@dataclass(frozen=True)
class ParamSection:
    component_id: int
    quant_step_index: int
    count: int
    payload: bytes


def quantize_param_tensor(values: np.ndarray, step_index: int) -> np.ndarray:
    """Round values/step to integers (half away from zero)."""
    step = quant_step(step_index)
    q = F.round_half_away(np.asarray(values, dtype=np.float64) / step)
    if q.size and np.abs(q).max() >= 2 ** 31:
        raise CodecError("quantized parameter magnitude exceeds 2^31")
    return q.astype(np.int64)


def dequantize_param_tensor(q: np.ndarray, step_index: int) -> np.ndarray:
    """Exact float64 reconstruction int * 2^-index."""
    return np.asarray(q, dtype=np.float64) * quant_step(step_index)


def make_section(component_id: int, step_index: int, qvals: np.ndarray) -> ParamSection:
    if not 0 <= component_id <= 255:
        raise ValueError(f"component id {component_id} does not fit a byte")
    quant_step(step_index)
    payload, _ = entropy.eg_encode_array(qvals)
    return ParamSection(component_id, step_index, int(np.asarray(qvals).size), payload)


def section_values(section: ParamSection) -> np.ndarray:
    """Decode a section's integers; padding bits past the last code must be zero."""
    vals, end = entropy.eg_decode_array(section.payload, section.count)
    if (end + 7) // 8 != len(section.payload):
        raise CodecError("parameter section payload length mismatch")
    if end % 8:
        tail = section.payload[-1] & ((1 << (8 - end % 8)) - 1)
        if tail:
            raise CodecError("parameter section padding bits not zero")
    return vals


def section_bytes(section: ParamSection) -> bytes:
    return _SECTION_FIXED.pack(section.component_id, section.quant_step_index,
                               section.count, len(section.payload)) + section.payload


def serialize_modulation(delta: dict[str, np.ndarray], steps: dict[str, int]) -> tuple[list[ParamSection], int]:
    """Quantize per-component weight deltas into sections, in ups/syn/arm order.

    Returns (sections, bits), bits being exactly 8x the serialized size so
    the reported cost equals the bitstream growth the sections cause.
    """
    if set(delta) != set(steps):
        raise ValueError("delta and steps must cover the same components")
    sections = []
    bits = 0
    for name in ("ups", "syn", "arm"):
        if name not in delta:
            continue
        qvals = quantize_param_tensor(delta[name], steps[name])
        s = make_section(COMPONENT_IDS[name], steps[name], qvals)
        sections.append(s)
        bits += 8 * len(section_bytes(s))
    return sections, bits


def search_quant_steps(components: list[str], evaluate) -> dict[str, int]:
    """Greedy per-component step selection over all 16 power-of-two steps.

    evaluate maps {component: step index or None} to a scalar cost; None means
    the component stays at full precision (not chosen yet). Components are
    fixed in the given order; within one component indexes are scanned 0..15
    and replaced only on strict improvement, so ties keep the larger step.
    """
    chosen: dict[str, int | None] = {c: None for c in components}
    for comp in components:
        best_idx = 0
        best_cost = None
        for idx in range(N_QUANT_STEPS):
            trial = dict(chosen)
            trial[comp] = idx
            cost = evaluate(trial)
            if best_cost is None or cost < best_cost:
                best_idx, best_cost = idx, cost
        chosen[comp] = best_idx
    return {c: int(i) for c, i in chosen.items()}


def _flags_for(sections: list[ParamSection]) -> int:
    flags = 0
    for s in sections:
        if s.component_id in COMPONENT_NAMES:
            flags |= 1 << s.component_id
    return flags


def write_bitstream(header: Header, sections: list[ParamSection], latent_payload: bytes) -> bytes:
    if header.mode not in (MODE_SHARED, MODE_MODULATED, MODE_DEDICATED):
        raise CodecError(f"unknown mode {header.mode}")
    if not (1 <= header.width <= 0xFFFF and 1 <= header.height <= 0xFFFF):
        raise CodecError(f"image size {header.width}x{header.height} not in [1, 65535]")
    if not 1 <= header.num_grids <= 255:
        raise CodecError(f"grid count {header.num_grids} not in [1, 255]")
    if len(header.base_model_id) != 8:
        raise CodecError("base model id must be 8 bytes")
    if len(sections) > 255:
        raise CodecError("too many parameter sections")
    flags = header.component_flags
    if header.mode == MODE_SHARED and (flags or sections):
        raise CodecError("shared-model streams carry no parameter sections")
    if header.mode == MODE_DEDICATED and flags != ALL_FLAGS:
        raise CodecError("dedicated streams must carry all three components")
    if flags & ~ALL_FLAGS:
        raise CodecError(f"unknown component flags {flags:#x}")
    if flags != _flags_for(sections):
        raise CodecError("component flags disagree with the sections present")
    out = bytearray()
    out += MAGIC
    out += struct.pack(">BBHHB", VERSION, header.mode, header.width, header.height, header.num_grids)
    out += header.base_model_id
    out += struct.pack(">BB", flags, len(sections))
    for s in sections:
        out += section_bytes(s)
    out += struct.pack(">I", len(latent_payload))
    out += latent_payload
    return bytes(out)


def read_bitstream(data: bytes) -> tuple[Header, list[ParamSection], bytes]:
    """Parse and validate a coded stream; raises CodecError on malformed input."""
    if len(data) < HEADER_LEN:
        raise CodecError("stream shorter than the fixed header")
    if data[:4] != MAGIC:
        raise CodecError("bad magic")
    version, mode, width, height, num_grids = struct.unpack(">BBHHB", data[4:11])
    if version != VERSION:
        raise CodecError(f"unsupported version {version}")
    base_model_id = data[11:19]
    flags, n_sections = data[19], data[20]
    header = Header(mode, width, height, num_grids, base_model_id, flags)
    pos = HEADER_LEN
    sections = []
    for _ in range(n_sections):
        if pos + _SECTION_FIXED.size > len(data):
            raise CodecError("truncated parameter section header")
        cid, qidx, count, plen = _SECTION_FIXED.unpack_from(data, pos)
        pos += _SECTION_FIXED.size
        if pos + plen > len(data):
            raise CodecError("truncated parameter section payload")
        sections.append(ParamSection(cid, qidx, count, data[pos:pos + plen]))
        pos += plen
    if pos + 4 > len(data):
        raise CodecError("missing latent payload length")
    (plen,) = struct.unpack_from(">I", data, pos)
    pos += 4
    if pos + plen > len(data):
        raise CodecError("truncated latent payload")
    payload = data[pos:pos + plen]
    pos += plen
    if pos != len(data):
        raise CodecError(f"{len(data) - pos} trailing bytes after the latent payload")
    if mode not in (MODE_SHARED, MODE_MODULATED, MODE_DEDICATED):
        raise CodecError(f"unknown mode {mode}")
    if width < 1 or height < 1 or num_grids < 1:
        raise CodecError("degenerate image or grid dimensions")
    if flags & ~ALL_FLAGS:
        raise CodecError(f"unknown component flags {flags:#x}")
    if mode == MODE_SHARED and (flags or sections):
        raise CodecError("shared-model streams carry no parameter sections")
    if mode == MODE_DEDICATED and flags != ALL_FLAGS:
        raise CodecError("dedicated streams must carry all three components")
    if flags != _flags_for(sections):
        raise CodecError("component flags disagree with the sections present")
    for s in sections:
        if s.component_id in COMPONENT_NAMES and s.quant_step_index >= N_QUANT_STEPS:
            raise CodecError(f"quant step index {s.quant_step_index} out of range")
    return header, sections, payload


# -- model files -----------------------------------------------------------------


def write_model_file(magic: bytes, meta: bytes, tensors: list[np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("model magic must be 4 bytes")
    if len(meta) > 255:
        raise ValueError("model meta block too large")
    out = bytearray()
    out += magic
    out += struct.pack(">BB", VERSION, len(meta))
    out += meta
    out += struct.pack(">H", len(tensors))
    for t in tensors:
        t = np.asarray(t, dtype=np.float64)
        if t.ndim > 255:
            raise ValueError("tensor rank does not fit a byte")
        out += struct.pack(">B", t.ndim)
        for d in t.shape:
            out += struct.pack(">I", d)
        out += t.astype(">f8").tobytes()
    out += hashlib.sha256(bytes(out)).digest()[:8]
    return bytes(out)


def read_model_file(data: bytes, magic: bytes) -> tuple[bytes, list[np.ndarray], bytes]:
    """Returns (meta, tensors, model_id); validates magic, version and hash."""
    if len(data) < 16:
        raise CodecError("model file too short")
    body, trailer = data[:-8], data[-8:]
    if hashlib.sha256(body).digest()[:8] != trailer:
        raise CodecError("model file hash mismatch")
    if body[:4] != magic:
        raise CodecError(f"bad model magic {body[:4]!r}, expected {magic!r}")
    version, meta_len = body[4], body[5]
    if version != VERSION:
        raise CodecError(f"unsupported model version {version}")
    pos = 6
    if pos + meta_len + 2 > len(body):
        raise CodecError("truncated model meta block")
    meta = body[pos:pos + meta_len]
    pos += meta_len
    (count,) = struct.unpack_from(">H", body, pos)
    pos += 2
    tensors = []
    for _ in range(count):
        if pos + 1 > len(body):
            raise CodecError("truncated model tensor header")
        ndim = body[pos]
        pos += 1
        if pos + 4 * ndim > len(body):
            raise CodecError("truncated model tensor shape")
        shape = struct.unpack_from(f">{ndim}I", body, pos) if ndim else ()
        pos += 4 * ndim
        n = 1
        for d in shape:
            n *= d
        if pos + 8 * n > len(body):
            raise CodecError("truncated model tensor data")
        arr = np.frombuffer(body, dtype=">f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CodecError("non-finite values in model tensor")
        tensors.append(arr)
        pos += 8 * n
    if pos != len(body):
        raise CodecError(f"{len(body) - pos} trailing bytes in model file")
    return meta, tensors, trailer
