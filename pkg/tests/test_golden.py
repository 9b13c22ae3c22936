"""Pinned-artifact regression tests.

The files under golden/ were produced by golden/make_golden.py; these tests
replay every encode and decode against the recorded sha256 hashes, so any
numeric drift anywhere in the pipeline fails loudly. Regenerate the artifacts
with that script only when an intentional format or numeric change lands.
"""

from __future__ import annotations

import hashlib
import json
import os

import pytest

from hcc import analysis as A
from hcc import hyper as HY
from hcc import imageio
from hcc import overfit as OF
from hcc.decoder import decode_stream

GOLDEN = os.path.join(os.path.dirname(os.path.abspath(__file__)), "golden")


def _read(name: str) -> bytes:
    with open(os.path.join(GOLDEN, name), "rb") as fh:
        return fh.read()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


@pytest.fixture(scope="module")
def manifest():
    with open(os.path.join(GOLDEN, "hashes.json")) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def golden_base():
    return A.load_base_model(_read("base.hcm"))


@pytest.fixture(scope="module")
def golden_ebase():
    return A.load_base_model(_read("ebase.hcm"))


@pytest.fixture(scope="module")
def golden_image():
    return imageio.read_ppm(_read("image.ppm"))


def test_artifact_files_unchanged(manifest):
    for name, want in manifest["files"].items():
        assert _sha(_read(name)) == want, f"{name} drifted"


def test_model_files_reserialize_identically(golden_base):
    assert golden_base.to_bytes() == _read("base.hcm")
    hyp = HY.load_hypernet(_read("hyper.hhm"))
    assert hyp.to_bytes() == _read("hyper.hhm")


@pytest.mark.parametrize("stream_name, base_name", [
    ("no.hcc", "base.hcm"),
    ("hyper.hcc", "ebase.hcm"),
    ("overfit.hcc", None),
])
def test_streams_decode_to_pinned_images(manifest, stream_name, base_name):
    shared = A.load_base_model(_read(base_name)) if base_name else None
    img, _ = decode_stream(_read(stream_name), shared)
    got = _sha(imageio.to_uint8(img).tobytes())
    assert got == manifest["decoded"][stream_name]


def test_shared_model_stream_regenerates(golden_image, golden_base):
    assert A.no_encode(golden_image, golden_base) == _read("no.hcc")


def test_modulated_stream_regenerates(manifest, golden_image, golden_ebase):
    hyp = HY.load_hypernet(_read("hyper.hhm"))
    lam = manifest["overfit"]["lambda"]
    assert HY.hyper_encode(golden_image, golden_ebase, hyp, lam) \
        == _read("hyper.hcc")


def test_dedicated_stream_regenerates(manifest, golden_image, golden_base):
    cfg = manifest["overfit"]
    stream, _ = OF.overfit_encode(golden_image, cfg["lambda"],
                                  steps=cfg["steps"], init="no",
                                  seed=cfg["seed"], base=golden_base)
    assert stream == _read("overfit.hcc")
