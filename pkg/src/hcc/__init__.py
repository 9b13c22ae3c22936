"""Overfitted hierarchical image codec: train-per-image, single-pass and
hypernetwork-modulated encoders over one shared bitstream format.

The package exposes three encoder families producing one stream container:

- ``no_encode``: single forward pass through a shared base model (mode 0).
- ``hyper_encode``: hypernetwork-predicted weight modulations with an RD
  switch that falls back to mode 0 when modulation does not pay (mode 1).
- ``overfit_encode``: per-image optimization of latents and decoder weights,
  emitting a self-contained stream (mode 2); warm-startable from either
  single-pass encoder.

``decode_stream`` reverses all three. Training entry points (``train_base``,
``train_hypernet``), the benchmark harness (``run_corpus``), and rate-curve
comparison (``bd_rate``) round out the public surface; everything else lives
in the per-stage submodules.
"""

from .analysis import default_base_model, load_base_model, no_encode, train_base
from .bench import run_corpus
from .decoder import decode_stream
from .errors import CodecError
from .hyper import default_hypernet, hyper_encode, load_hypernet, train_hypernet
from .metrics import bd_rate, mac_count, psnr
from .overfit import LAMBDA_PRESETS, finetune_curve, overfit_encode

__version__ = "0.1.0"

__all__ = [
    "CodecError",
    "LAMBDA_PRESETS",
    "__version__",
    "bd_rate",
    "decode_stream",
    "default_base_model",
    "default_hypernet",
    "finetune_curve",
    "hyper_encode",
    "load_base_model",
    "load_hypernet",
    "mac_count",
    "no_encode",
    "overfit_encode",
    "psnr",
    "run_corpus",
    "train_base",
    "train_hypernet",
]
