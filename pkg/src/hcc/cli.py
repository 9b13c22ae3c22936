"""Command-line interface: training, encoding, decoding, benchmarking.

Exit codes: 0 success, 2 usage error, 1 codec error. Diagnostics go to
standard error; data goes to the paths named by flags or to standard output.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Sequence

import numpy as np

from . import analysis as A
from . import bench
from . import decoder
from . import hyper as HY
from . import imageio
from . import metrics
from . import model
from . import overfit
from .errors import CodecError

__all__ = ["main"]


class UsageError(Exception):
    """Bad flag combination detected after parsing; exits with status 2."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-base", help="train a shared base model on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--lambda", dest="lmbda", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--grids", type=int, default=model.N_GRIDS_DEFAULT)
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--batch", type=int, default=1)

    p = sub.add_parser("train-hypernet", help="train a weight-modulation hypernet")
    p.add_argument("--corpus", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--lambda", dest="lmbda", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--components", default=",".join(model.COMPONENTS))
    p.add_argument("--patch", type=int, default=256)
    p.add_argument("--batch", type=int, default=1)

    p = sub.add_parser("encode", help="encode one image to a bitstream")
    p.add_argument("image")
    p.add_argument("--mode", required=True, choices=metrics.MODES)
    p.add_argument("--base", required=True)
    p.add_argument("--hyper")
    p.add_argument("--lambda", dest="lmbda", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("decode", help="decode a bitstream to an image")
    p.add_argument("stream")
    p.add_argument("--base")
    p.add_argument("-o", "--out", required=True)

    p = sub.add_parser("bench", help="sweep a corpus and emit CSV results")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", required=True, choices=metrics.MODES)
    p.add_argument("--lambdas", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--hyper")
    p.add_argument("--csv", required=True)
    p.add_argument("--plot")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int)

    p = sub.add_parser("bdrate", help="BD-rate between two benchmark CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    return parser


def _read_file(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise CodecError(f"cannot read {path}: {exc}") from exc


def _write_file(path: str, data: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise CodecError(f"cannot write {path}: {exc}") from exc


def _load_base(path: str) -> A.BaseModel:
    return A.load_base_model(_read_file(path))


def _load_hyper(path: str) -> HY.HyperNet:
    return HY.load_hypernet(_read_file(path))


def _load_corpus(corpus_dir: str) -> list[np.ndarray]:
    names = bench.corpus_files(corpus_dir)
    return [imageio.read_image(os.path.join(corpus_dir, n)) for n in names]


def _parse_components(text: str) -> tuple[str, ...]:
    wanted = [t for t in (s.strip() for s in text.split(",")) if t]
    for name in wanted:
        if name not in model.COMPONENTS:
            raise UsageError(f"unknown component {name!r} in --components")
    if not wanted:
        raise UsageError("--components must name at least one component")
    return tuple(c for c in model.COMPONENTS if c in wanted)


def _parse_lambdas(text: str) -> list[float]:
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --lambdas value: {exc}") from exc
    if not values:
        raise UsageError("--lambdas must list at least one value")
    return values


def _require_mode_flags(args: argparse.Namespace, single_lambda: bool = True) -> None:
    if args.mode in ("hyper", "warmstart") and not args.hyper:
        raise UsageError(f"mode {args.mode} requires --hyper")
    if args.mode == "warmstart" and args.steps is None:
        raise UsageError("mode warmstart requires --steps")
    if single_lambda and args.mode != "no" and args.lmbda is None:
        raise UsageError(f"mode {args.mode} requires --lambda")


def _cmd_train_base(args: argparse.Namespace) -> int:
    corpus = _load_corpus(args.corpus)
    trained, losses = A.train_base(corpus, args.lmbda, args.steps, batch=args.batch,
                                   patch=args.patch, seed=args.seed, n_grids=args.grids)
    A.save_base_model(trained, args.out)
    print(f"wrote {args.out} (id {trained.model_id.hex()}, "
          f"{len(losses)} steps)", file=sys.stderr)
    return 0


def _cmd_train_hypernet(args: argparse.Namespace) -> int:
    corpus = _load_corpus(args.corpus)
    base = _load_base(args.base)
    comps = _parse_components(args.components)
    trained, losses = HY.train_hypernet(corpus, base, args.lmbda, args.steps,
                                        batch=args.batch, patch=args.patch,
                                        seed=args.seed, components=comps)
    HY.save_hypernet(trained, args.out)
    print(f"wrote {args.out} (id {trained.model_id.hex()}, "
          f"{len(losses)} steps)", file=sys.stderr)
    return 0


def _cmd_encode(args: argparse.Namespace) -> int:
    _require_mode_flags(args)
    x = imageio.read_image(args.image)
    base = _load_base(args.base)
    hyp = _load_hyper(args.hyper) if args.hyper else None
    if args.mode == "no":
        stream = A.no_encode(x, base)
    elif args.mode == "hyper":
        stream = HY.hyper_encode(x, base, hyp, args.lmbda)
    elif args.mode == "overfit":
        stream, _ = overfit.overfit_encode(x, args.lmbda, steps=args.steps,
                                           seed=args.seed, n_grids=base.n_grids)
    else:
        stream, _ = overfit.overfit_encode(x, args.lmbda, steps=args.steps,
                                           init="hyper", seed=args.seed,
                                           base=base, hyp=hyp)
    _write_file(args.out, stream)
    bpp = 8.0 * len(stream) / (x.shape[1] * x.shape[2])
    print(f"wrote {args.out} ({len(stream)} bytes, {bpp:.4f} bpp)", file=sys.stderr)
    return 0


def _cmd_decode(args: argparse.Namespace) -> int:
    data = _read_file(args.stream)
    base = _load_base(args.base) if args.base else None
    img, header = decoder.decode_stream(data, base)
    imageio.write_image(args.out, img)
    print(f"wrote {args.out} ({header.width}x{header.height}, "
          f"mode {header.mode})", file=sys.stderr)
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    _require_mode_flags(args, single_lambda=False)
    lambdas = _parse_lambdas(args.lambdas)
    base = _load_base(args.base)
    hyp = _load_hyper(args.hyper) if args.hyper else None
    rows = bench.run_corpus(args.corpus, args.mode, lambdas, base, hyp,
                            out_csv=args.csv, steps=args.steps, seed=args.seed,
                            jobs=args.jobs, plot_path=args.plot)
    if not rows:
        print(f"warning: no images found in {args.corpus}", file=sys.stderr)
        return 1
    print(f"wrote {args.csv} ({len(rows)} rows)", file=sys.stderr)
    return 0


def _cmd_bdrate(args: argparse.Namespace) -> int:
    anchor = bench.curve_from_csv(args.anchor)
    test = bench.curve_from_csv(args.test)
    print(f"{metrics.bd_rate(anchor, test):.2f}")
    return 0


_COMMANDS = {
    "train-base": _cmd_train_base,
    "train-hypernet": _cmd_train_hypernet,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "bench": _cmd_bench,
    "bdrate": _cmd_bdrate,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
