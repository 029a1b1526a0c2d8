"""Command-line interface.

Subcommands: train, encode, decode, eval, sweep, gen-corpus.  Exit codes:
0 success, 2 configuration error, 3 data/stream error, 4 numeric failure.

Heavy imports happen inside the command handlers so that --threads can pin
the BLAS thread count before numpy loads.
"""
from __future__ import annotations

import argparse
import os
import sys


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI run configuration file")
    p.add_argument("--out", help="output path or directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="override the rate weight")
    p.add_argument("--paper-scale", action="store_true",
                   help="full-scale grid sizes and iteration counts")
    p.add_argument("--threads", type=int,
                   help="BLAS/OpenMP thread count (default 1)")
    p.add_argument("--ablate-context", choices=["none", "2d", "3d", "dim", "all"],
                   help="disable parts of the context model")
    p.add_argument("--Ld", dest="ld", type=int,
                   help="first level coded with the frequency baseline only")
    p.add_argument("--Lc", dest="lc", type=int,
                   help="number of previous levels used as context")
    p.add_argument("--field", dest="field_kind",
                   choices=["shell", "blobs", "checker"],
                   help="synthetic scene kind")
    p.add_argument("--iterations", type=int, help="override iteration count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridcodec",
        description="Train and losslessly code binarized feature grids.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p)

    p = sub.add_parser("encode", help="encode a checkpoint to a .cnc stream")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("decode", help="decode a .cnc stream to a checkpoint")
    p.add_argument("stream")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("eval", help="report PSNR of a checkpoint or stream")
    p.add_argument("model", help="checkpoint (.pkl) or coded stream (.cnc)")
    p.add_argument("--field", dest="field_kind", default="shell",
                   choices=["shell", "blobs", "checker"])
    p.add_argument("--field-seed", type=int, default=0)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("sweep", help="rate-distortion sweep over lambdas")
    _add_common(p)
    p.add_argument("--lambdas", help="space or comma separated lambda list")

    p = sub.add_parser("gen-corpus", help="write a synthetic sign corpus")
    p.add_argument("--kind", required=True,
                   choices=["iid", "ones", "correlated"])
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=float, default=0.5,
                   help="P(+1) for the iid kind")
    return parser


def _resolve_config(args):
    from .config import ConfigError, RunConfig, apply_overrides, load_config
    from .model import paper_scale

    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "paper_scale", False):
        import dataclasses

        cfg = dataclasses.replace(cfg, train=paper_scale(cfg.train))
    cfg = apply_overrides(
        cfg,
        seed=getattr(args, "seed", None),
        lam=getattr(args, "lam", None),
        ablate=getattr(args, "ablate_context", None),
        ld=getattr(args, "ld", None),
        lc=getattr(args, "lc", None),
        iterations=getattr(args, "iterations", None),
        field_kind=getattr(args, "field_kind", None),
    )
    return cfg


def _out_dir(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_train(args) -> int:
    import numpy as np

    from .config import dump_config
    from .field import derive_occupancy, evaluate_psnr, synth_field, train
    from .model import build_model, save_checkpoint

    cfg = _resolve_config(args)
    out = _out_dir(args)
    target = synth_field(cfg.field_kind, cfg.field_seed, cfg.train.channels)
    occ = derive_occupancy(target, cfg.train.occ_res)
    state = build_model(cfg.train, occ, np.random.default_rng(cfg.train.seed))

    log_rows = []

    def log(it, loss, mse):
        log_rows.append(f"{it},{loss:.10g},{mse:.10g}")

    report = train(state, target, log=log)
    save_checkpoint(state, os.path.join(out, "checkpoint.pkl"))
    with open(os.path.join(out, "train_log.csv"), "w") as fh:
        fh.write("iteration,loss,mse\n")
        fh.write("\n".join(log_rows) + "\n")
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(dump_config(cfg))
    psnr = evaluate_psnr(state, target)
    print(f"trained {cfg.train.iterations} iterations, "
          f"final loss {report.losses[-1]:.6g}, psnr {psnr:.2f} dB")
    print(f"checkpoint: {os.path.join(out, 'checkpoint.pkl')}")
    return 0


def cmd_encode(args) -> int:
    from .codec import encode_model
    from .model import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    stream, sizes = encode_model(state)
    with open(args.out, "wb") as fh:
        fh.write(stream)
    print(f"encoded {sizes.total} bytes "
          f"(3d {sizes.emb3d}, 2d {sizes.emb2d}, mlp {sizes.mlp}, "
          f"ctx {sizes.ctx}, occ {sizes.occ})")
    return 0


def cmd_decode(args) -> int:
    from .codec import decode_model
    from .model import save_checkpoint

    with open(args.stream, "rb") as fh:
        stream = fh.read()
    state = decode_model(stream)
    out = _out_dir(args)
    path = os.path.join(out, "decoded.pkl")
    save_checkpoint(state, path)
    print(f"decoded to {path}")
    return 0


def cmd_eval(args) -> int:
    from .codec import decode_model
    from .field import evaluate_psnr, synth_field
    from .model import load_checkpoint

    if args.model.endswith(".cnc"):
        with open(args.model, "rb") as fh:
            state = decode_model(fh.read())
    else:
        state = load_checkpoint(args.model)
    target = synth_field(args.field_kind, args.field_seed,
                         state.cfg.channels)
    psnr = evaluate_psnr(state, target)
    print(f"psnr {psnr:.4f} dB")
    return 0


def cmd_sweep(args) -> int:
    from .config import ConfigError, dump_config
    from .field import rd_sweep, synth_field

    cfg = _resolve_config(args)
    lambdas = cfg.lambdas
    if args.lambdas:
        try:
            lambdas = tuple(float(t)
                            for t in args.lambdas.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"bad --lambdas: {args.lambdas!r}") from exc
    out = _out_dir(args)
    target = synth_field(cfg.field_kind, cfg.field_seed, cfg.train.channels)
    points = rd_sweep(cfg.train, target, lambdas,
                      csv_path=os.path.join(out, "rd.csv"),
                      json_path=os.path.join(out, "rd.json"))
    with open(os.path.join(out, "config.ini"), "w") as fh:
        fh.write(dump_config(cfg))
    for p in points:
        print(f"lambda {p.lam:g}: {p.total_bytes} bytes, "
              f"{p.psnr_db:.2f} dB, {p.seconds:.1f}s")
    return 0


def cmd_gen_corpus(args) -> int:
    from .corpus import gen_corpus, save_corpus

    signs = gen_corpus(args.kind, seed=args.seed, p=args.p)
    save_corpus(signs, args.out)
    print(f"wrote {len(signs)} signs to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gen-corpus": cmd_gen_corpus,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = getattr(args, "threads", None)
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        if threads is not None:
            os.environ[var] = str(threads)
        else:
            os.environ.setdefault(var, "1")

    from .codec import CodecError, StreamError
    from .config import ConfigError
    from .field import NumericError
    from .occupancy import DegenerateSceneError

    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (StreamError, DegenerateSceneError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, CodecError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
