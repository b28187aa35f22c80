"""Command-line entry point: train, eval, analyze-load, sweep-hard, flops, gradcheck."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .. import config as cfgio
from ..checkpoint import load_checkpoint
from ..errors import CheckpointError, ConfigError, NumericError
from ..model import Model
from ..routing import Strategy
from ..synthdata import SNR_GRID
from .analysis import P_AUDIO_GRID, analyze_load, hard_weight_sweep
from .evaluate import evaluate
from .flops import flops
from .gradcheck import gradcheck
from .train import RunConfig, train

log = logging.getLogger("hmoe")


def build_run_config(config_file: str | None, overrides: list[str]) -> RunConfig:
    """File values first, then ``key=value`` overrides in order."""
    values: dict[str, str] = {}
    if config_file:
        values.update(cfgio.load_file(config_file))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    try:
        return cfgio.apply(RunConfig(), values)
    except (KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_run(run_dir: str | Path) -> tuple[RunConfig, Model]:
    """Run config and trained model from a directory written by ``train``."""
    run_dir = Path(run_dir)
    run = cfgio.apply(RunConfig(), cfgio.load_file(run_dir / "config.txt"))
    ckpt = load_checkpoint(run_dir / "checkpoint.hmoe", expect=run.model)
    return run, ckpt.model


def _snrs(text: str | None) -> tuple[float | None, ...]:
    if not text:
        return SNR_GRID
    return tuple(None if s.strip() == "clean" else float(s) for s in text.split(","))


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable); applied after --config")


def cmd_train(args) -> int:
    run = build_run_config(args.config, args.overrides)
    if args.out:
        run.train.out_dir = args.out
    res = train(run, write=True, log_every=args.log_every)
    if run.model.moe.strategy is not Strategy.DENSE:
        analyze_load(res.model, run.task, n_sequences=args.n_sequences).write_csv(res.out_dir / "load_report.csv")
    print(f"wrote {res.out_dir}")
    return 0


def cmd_eval(args) -> int:
    run, model = load_run(args.run)
    report = evaluate(model, run.task, _snrs(args.snrs), conditions=args.conditions.split(","),
                      n_sequences=args.n_sequences)
    out = Path(args.out or Path(args.run) / "eval.csv")
    report.write_csv(out)
    for cond in args.conditions.split(","):
        for snr, (mean, _) in report.summary(cond).items():
            print(f"{cond:>2} snr={snr!s:>6} token_error={mean:.4f}")
    print(f"wrote {out}")
    return 0


def cmd_analyze(args) -> int:
    run, model = load_run(args.run)
    report = analyze_load(model, run.task, snrs=(None, *_snrs(args.snrs)), n_sequences=args.n_sequences)
    out = Path(args.out or Path(args.run) / "load_report.csv")
    report.write_csv(out)
    print(f"wrote {out}")
    return 0


def cmd_sweep(args) -> int:
    run, model = load_run(args.run)
    grid = tuple(float(s) for s in args.grid.split(",")) if args.grid else P_AUDIO_GRID
    report = hard_weight_sweep(model, run.task, grid, _snrs(args.snrs), n_sequences=args.n_sequences)
    out = Path(args.out or Path(args.run) / "sweep_hard.csv")
    report.write_csv(out)
    for snr in _snrs(args.snrs):
        print(f"snr={snr!s:>6} argmin p_audio={report.argmin(snr)}")
    print(f"wrote {out}")
    return 0


def cmd_flops(args) -> int:
    run = build_run_config(args.config, args.overrides)
    rep = flops(run.model, frames=args.frames, text_tokens=args.tokens)
    w = csv.writer(sys.stdout)
    w.writerow(["quantity", "value"])
    for name, value in rep.rows():
        w.writerow([name, f"{value:.4f}"])
    return 0


def cmd_gradcheck(args) -> int:
    strategies = args.strategies.split(",")
    ok = True
    for s in strategies:
        res = gradcheck(s, seed=args.seed, tolerance=args.tolerance)
        print(res.line())
        if not res.passed:
            ok = False
            for name, i, rel in res.report.failures[:10]:
                print(f"  {name}[{i}] rel_err={rel:.3e}")
    return 0 if ok else 1


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmoe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run and write its directory")
    _add_config_args(p)
    p.add_argument("--out", help="run directory (overrides train.out_dir)")
    p.add_argument("--log-every", type=int, default=0)
    p.add_argument("--n-sequences", type=int, default=128, help="held-out sequences for load_report.csv")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("eval", cmd_eval, "token error per SNR"),
        ("analyze-load", cmd_analyze, "expert and group load report"),
        ("sweep-hard", cmd_sweep, "hard-routing audio-weight sweep"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("run", help="run directory written by train")
        p.add_argument("--snrs", help="comma-separated SNRs in dB ('clean' allowed)")
        p.add_argument("--n-sequences", type=int, default=128)
        p.add_argument("--out", help="output CSV path")
        if name == "eval":
            p.add_argument("--conditions", default="AV", help="comma-separated subset of A,V,AV")
        if name == "sweep-hard":
            p.add_argument("--grid", help="comma-separated audio weights")
        p.set_defaults(func=func)

    p = sub.add_parser("flops", help="analytic FLOPs per sequence")
    _add_config_args(p)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--tokens", type=int, default=50)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("gradcheck", help="finite-difference check per strategy")
    p.add_argument("--strategies", default="flat,hard,hierarchical")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
