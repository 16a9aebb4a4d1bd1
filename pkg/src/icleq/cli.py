"""Command-line entry point: ``icleq <subcommand> [options]``.

On failure the process exits with status 1 (failed check) or 2 (error) and
prints exactly one line ``error: <ExceptionType>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .channel import ChannelParams
from .config import load_config
from .harness import DEFAULT_GRIDS, DEFAULT_N_EVAL, SweepSpec, emit_csv, emit_plot, evaluate, \
    read_csv, run_sweep
from .model import ModelConfig
from .training import TrainConfig, train, write_loss_csv

log = logging.getLogger("icleq")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    p.add_argument("--config", type=Path, default=None, help="key = value config file")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")


def _bits(text: str):
    return None if text.lower() == "none" else int(text)


def _channel_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rho", type=float)
    p.add_argument("--snr-db", type=float)
    p.add_argument("--bits", type=_bits)
    p.add_argument("--K", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icleq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain an in-context equalizer")
    _common(p)
    p.add_argument("--attention", choices=["softmax", "lms", "multi_lms", "lrms"])
    p.add_argument("--M", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--log-every", type=int, default=500)

    p = sub.add_parser("eval", help="Monte-Carlo MSE of one method at fixed channel params")
    _common(p)
    p.add_argument("--method", default="lmmse",
                   help="lmmse | zero | model:<checkpoint dir>")
    p.add_argument("--n-eval", type=int, default=DEFAULT_N_EVAL)
    _channel_args(p)

    p = sub.add_parser("sweep", help="sweep one channel parameter, write CSV and SVG")
    _common(p)
    p.add_argument("--axis", choices=["rho", "snr_db", "bits", "M"])
    p.add_argument("--grid", help="comma-separated values (default per axis)")
    p.add_argument("--methods", help="comma-separated method references")
    p.add_argument("--n-eval", type=int)
    p.add_argument("--workers", type=int, default=1)
    _channel_args(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of model gradients")
    _common(p)
    p.add_argument("--kinds", default="softmax,lms,multi_lms,lrms")

    p = sub.add_parser("kernelcheck", help="algebraic identities of the attention kernels")
    _common(p)

    p = sub.add_parser("oracle-lmmse", help="LMMSE against independent oracles")
    _common(p)
    p.add_argument("--samples", type=int, default=100_000)

    p = sub.add_parser("plot", help="render a sweep CSV as SVG")
    _common(p)
    p.add_argument("csv", type=Path)
    p.add_argument("--title")
    return parser


def _config(args) -> dict:
    cfg = load_config(args.config) if args.config else {"channel": {}, "model": {}, "train": {},
                                                         "sweep": {}}
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg["sweep"]["seed"] = args.seed
    return cfg


def _channel_params(args, cfg) -> ChannelParams:
    kw = dict(cfg["channel"])
    for name in ("rho", "snr_db", "K"):
        val = getattr(args, name, None)
        if val is not None:
            kw[name] = val
    if getattr(args, "bits", None) is not None:
        kw["bits"] = args.bits
    return ChannelParams(**kw)


def _report(reports) -> int:
    ok = True
    for r in reports:
        print(r.line())
        ok &= r.passed
    return 0 if ok else 1


def cmd_train(args, cfg) -> int:
    mkw = dict(cfg["model"])
    tkw = dict(cfg["train"])
    for flag, key, target in [("attention", "attention_kind", mkw), ("M", "M", mkw),
                              ("embed_dim", "embed_dim", mkw), ("steps", "steps", tkw),
                              ("batch_size", "batch_size", tkw), ("pool_size", "pool_size", tkw)]:
        if getattr(args, flag) is not None:
            target[key] = getattr(args, flag)
    tc = TrainConfig(**tkw)
    mkw.setdefault("max_seq_len", 2 * tc.K + 1)
    mc = ModelConfig(**mkw)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "checkpoint"
    result = train(tc, mc, checkpoint_dir=ckpt, log_every=args.log_every)
    write_loss_csv(args.out / "loss.csv", result.losses)
    print(json.dumps({"checkpoint": str(ckpt), "steps": len(result.losses),
                      "final_loss": result.losses[-1]}))
    return 0


def cmd_eval(args, cfg) -> int:
    params = _channel_params(args, cfg)
    seed = cfg["sweep"].get("seed", 0)
    mean, se = evaluate(args.method, params, args.n_eval, seed)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "eval.csv", "w", encoding="utf-8") as fh:
        fh.write("method,rho,snr_db,bits,mse,stderr,n,seed\n")
        fh.write(f"{args.method},{params.rho!r},{params.snr_db!r},{params.bits},"
                 f"{mean!r},{se!r},{args.n_eval},{seed}\n")
    print(json.dumps({"method": args.method, "mse": mean, "stderr": se, "n": args.n_eval}))
    return 0


def cmd_sweep(args, cfg) -> int:
    sw = dict(cfg["sweep"])
    axis = args.axis or sw.get("axis")
    if axis is None:
        raise ValueError("sweep needs --axis or [sweep] axis")
    if args.grid:
        grid = [None if t.strip().lower() == "none" else float(t) for t in args.grid.split(",")]
    else:
        grid = sw.get("grid") or DEFAULT_GRIDS.get(axis)
    if grid is None:
        raise ValueError(f"no default grid for axis {axis!r}; pass --grid")
    methods = args.methods.split(",") if args.methods else sw.get("methods", ["lmmse", "zero"])
    spec = SweepSpec(axis=axis, grid=grid, fixed=_channel_params(args, cfg),
                     n_eval=args.n_eval or sw.get("n_eval", DEFAULT_N_EVAL),
                     seed=sw.get("seed", 0), methods=[m.strip() for m in methods])
    table = run_sweep(spec, workers=args.workers)
    args.out.mkdir(parents=True, exist_ok=True)
    emit_csv(table, args.out / f"sweep_{axis}.csv")
    emit_plot(table, args.out / f"sweep_{axis}.svg")
    for r in table.rows:
        print(f"{r.axis}={r.value:g} {r.method}: mse={r.mse:.4g} se={r.stderr:.2g}")
    return 0


def cmd_gradcheck(args, cfg) -> int:
    from .checks import gradcheck_model

    seed = args.seed or 0
    return _report(gradcheck_model(k.strip(), seed=seed) for k in args.kinds.split(","))


def cmd_kernelcheck(args, cfg) -> int:
    from .checks import kernel_checks

    return _report(kernel_checks(seed=args.seed or 0))


def cmd_oracle_lmmse(args, cfg) -> int:
    from .checks import check_lmmse_ridge, check_lmmse_vs_fitted_filter

    seed = args.seed or 0
    return _report([check_lmmse_ridge(seed=seed),
                    check_lmmse_vs_fitted_filter(n=args.samples, seed=seed)])


def cmd_plot(args, cfg) -> int:
    table = read_csv(args.csv)
    args.out.mkdir(parents=True, exist_ok=True)
    dest = args.out / (args.csv.stem + ".svg")
    emit_plot(table, dest, title=args.title)
    print(dest)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck,
            "kernelcheck": cmd_kernelcheck, "oracle-lmmse": cmd_oracle_lmmse, "plot": cmd_plot}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args, _config(args))
    except Exception as exc:  # noqa: BLE001 - one-line error contract
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
