"""Command line entry point: ``aimlab {train,suite,generate-data,evaluate}``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as datamod
from .trainer import (ConfigError, ExperimentConfig, TrainingDiverged, evaluate_checkpoint,
                      resolve_out_dir, run_suite, summary_of, train)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aimlab", description="Intra-network modulation experiments on synthetic multimodal data.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True, help="flat key=value config file")
    t.add_argument("--out", help="output directory (AIMLAB_OUT takes precedence as the root)")

    s = sub.add_parser("suite", help="run every *.cfg in a directory and aggregate")
    s.add_argument("--configs", required=True, help="directory of config files")
    s.add_argument("--out", help="where suite.csv goes")
    s.add_argument("--workers", type=int, default=1)

    g = sub.add_parser("generate-data", help="write train.mmds and test.mmds")
    g.add_argument("--spec", required=True, help="key=value dataset spec file")
    g.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="a .mmds file or a directory holding test.mmds")
    return p


def read_dataset_spec(path) -> datamod.DatasetSpec:
    """Parse a key=value dataset spec; list values are comma separated."""
    spec = datamod.DatasetSpec()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or not hasattr(spec, key):
            raise ConfigError(f"line {lineno}: expected a known key=value, got {raw!r}")
        try:
            if key == "dims":
                setattr(spec, key, [int(v) for v in value.split(",")])
            elif key == "snr":
                setattr(spec, key, [float(v) for v in value.split(",")])
            else:
                setattr(spec, key, int(value))
        except ValueError:
            raise ConfigError(f"line {lineno}: cannot parse {value!r}") from None
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec


def _cmd_train(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    out = resolve_out_dir(cfg)
    if out is None:
        out = Path(args.out) if args.out else Path("runs") / f"{cfg.label}_seed{cfg.seed}"
    _, hist = train(cfg, out_dir=out)
    summary = summary_of(hist)
    print(f"test_acc={summary['final_test_acc']:.4f} "
          f"mean_alpha={summary['mean_final_alpha']:.4f} out={out}")
    return EXIT_OK


def _cmd_suite(args) -> int:
    root = Path(args.configs)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    configs = [ExperimentConfig.from_file(p) for p in sorted(root.glob("*.cfg"))]
    env = os.environ.get("AIMLAB_OUT")
    out = Path(env) if env else Path(args.out or "runs/suite")
    rows = run_suite(configs, out_dir=out, workers=args.workers)
    for row in rows:
        print(f"{row['label']}: test_acc {row['final_test_acc_mean']:.4f} "
              f"+- {row['final_test_acc_std']:.4f} (failed {row['n_failed']}/{row['n_runs']})")
    return EXIT_OK


def _cmd_generate(args) -> int:
    spec = read_dataset_spec(args.spec)
    train_set, test_set = datamod.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datamod.save(train_set, out / "train.mmds")
    datamod.save(test_set, out / "test.mmds")
    print(f"wrote {len(train_set)} train and {len(test_set)} test samples to {out}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    path = Path(args.data)
    test = datamod.load(path / "test.mmds" if path.is_dir() else path)
    acc, probes = evaluate_checkpoint(args.checkpoint, test)
    print(json.dumps({"accuracy": acc, "probe_accuracy": probes}))
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "suite": _cmd_suite,
            "generate-data": _cmd_generate, "evaluate": _cmd_evaluate}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc} (last good checkpoint: {exc.checkpoint})", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
