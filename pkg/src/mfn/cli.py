"""``mfn <command> --config PATH [--key value ...]``.

Exit codes: 0 success, 1 configuration or validation error, 2 runtime or
numeric error (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import os
import sys

COMMANDS = ("synth", "train", "predict", "evaluate", "gradcheck")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads():
    # must run before numpy is first imported
    cap = os.environ.get("MFN_THREADS")
    if cap:
        for var in THREAD_VARS:
            os.environ[var] = cap


def _parse_overrides(extra):
    from .errors import ConfigError

    overrides = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or len(token) < 3:
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        elif i + 1 < len(extra):
            value = extra[i + 1]
            i += 2
        else:
            raise ConfigError(f"missing value for {token}")
        overrides[key.replace("-", "_")] = value
    return overrides


def _run(command, cfg, out):
    from . import pipeline

    if command == "synth":
        records = pipeline.cmd_synth(cfg)
        out(f"wrote {3 * len(records)} tiles to {cfg.tiles_dir}")
        return 0
    if command == "train":
        _, result = pipeline.cmd_train(cfg)
        last = result.history[-1] if result.history else None
        summary = f" final loss {last.mean_loss:.4f} acc {last.pixel_accuracy:.3f}" if last else ""
        out(f"saved {cfg.checkpoint}{summary}")
        return 0
    if command == "predict":
        paths = pipeline.cmd_predict(cfg)
        out(f"wrote {len(paths)} predictions to {cfg.predictions_dir}")
        return 0
    if command == "evaluate":
        report, _ = pipeline.cmd_evaluate(cfg)
        out(report.rstrip("\n"))
        return 0
    from .gradsuite import run_gradient_suite

    reports = run_gradient_suite(tolerance=cfg.tolerance, seed=cfg.seed, log=out)
    failed = [r.label for r in reports if not r.passed]
    out(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 2 if failed else 0


def main(argv=None):
    _cap_threads()
    parser = argparse.ArgumentParser(prog="mfn", description="Multimodal semantic segmentation toolkit.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="key = value config file")
    args, extra = parser.parse_known_args(argv)

    from .config import load_config
    from .errors import ArgumentError, ConfigError, MFNError

    def err(msg):
        print(f"mfn {args.command}: {msg}", file=sys.stderr)

    try:
        cfg = load_config(args.config, _parse_overrides(extra))
        return _run(args.command, cfg, print)
    except (ConfigError, ArgumentError) as exc:
        err(f"error: {exc}")
        return 1
    except (MFNError, OSError, ArithmeticError) as exc:
        err(f"error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
