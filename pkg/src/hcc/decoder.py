"""Bitstream decoding: rebuild decoder weights per mode, then the image.

Mode 0 uses a shared base model as-is, mode 1 applies transmitted weight
deltas to it, mode 2 carries the full decoder in the stream. Sections with
unknown component ids are skipped so older decoders tolerate extensions.
"""

from __future__ import annotations

import numpy as np

from . import bitstream
from . import entropy
from . import model
from .bitstream import Header, ParamSection
from .errors import CodecError

__all__ = ["decode_stream"]


def _known_sections(sections: list[ParamSection]) -> dict[str, ParamSection]:
    out = {}
    for s in sections:
        name = bitstream.COMPONENT_NAMES.get(s.component_id)
        if name is None:
            continue
        if name in out:
            raise CodecError(f"duplicate {name} section")
        out[name] = s
    return out


def _section_flat(section: ParamSection, comp: str, n_grids: int) -> np.ndarray:
    want = model.component_size(comp, n_grids)
    if section.count != want:
        raise CodecError(f"{comp} section holds {section.count} values, want {want}")
    q = bitstream.section_values(section)
    return bitstream.dequantize_param_tensor(q, section.quant_step_index)


def _params_for(header: Header, sections: list[ParamSection], base) -> model.DecoderParams:
    known = _known_sections(sections)
    if header.mode == bitstream.MODE_DEDICATED:
        missing = [c for c in model.COMPONENTS if c not in known]
        if missing:
            raise CodecError(f"dedicated stream lacks {missing} sections")
        n = header.num_grids
        parts = {c: _split(_section_flat(known[c], c, n), c, n) for c in model.COMPONENTS}
        params = model.DecoderParams(parts["ups"][0], parts["syn"], parts["arm"])
        params.validate()
        return params

    if base is None:
        raise CodecError(f"mode-{header.mode} stream needs the base model it references")
    if base.model_id != header.base_model_id:
        raise CodecError(
            f"stream expects base {header.base_model_id.hex()}, got {base.model_id.hex()}")
    if base.n_grids != header.num_grids:
        raise CodecError(f"stream has {header.num_grids} grids, base {base.n_grids}")
    if header.mode == bitstream.MODE_SHARED:
        return base.decoder
    deltas = {comp: _section_flat(s, comp, header.num_grids) for comp, s in known.items()}
    return base.decoder.with_delta(deltas)


def _split(flat: np.ndarray, comp: str, n_grids: int) -> list[np.ndarray]:
    out = []
    pos = 0
    for s in model.component_shapes(comp, n_grids):
        n = int(np.prod(s))
        out.append(flat[pos:pos + n].reshape(s).copy())
        pos += n
    return out


def decode_stream(data: bytes, base=None) -> tuple[np.ndarray, Header]:
    """Decode a coded image to a (3, H, W) float64 array in [0, 1]."""
    header, sections, payload = bitstream.read_bitstream(data)
    params = _params_for(header, sections, base)
    shapes = model.grid_shapes(header.height, header.width, header.num_grids)
    grids, consumed, _ = entropy.decode_latent_grids(payload, shapes, params.arm)
    if consumed != len(payload):
        raise CodecError(f"latent payload has {len(payload) - consumed} trailing bytes")
    img = model.decode_arrays([g.astype(np.float64) for g in grids], params)
    return img, header
