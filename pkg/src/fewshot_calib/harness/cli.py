"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (including a replay mismatch),
2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..backbone import save_params
from ..errors import ConfigurationError, FewShotError
from .config import FIELD_TYPES, build_config, load_config, parse_value
from .presets import PRESETS
from .suite import execute, new_run_dir, prepare, replay

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

EPILOG = """\
config file: one 'key = value' per line, '#' starts a comment, unknown keys
are rejected. Precedence, lowest first: built-in defaults, the preset named
by 'preset', keys from --config, then --set/--preset/--episodes/--workers
flags.

--out names a parent directory. Every invocation creates the next free
run-NNNN directory inside it, so earlier results are never overwritten.
--seed selects the episode stream; rows and shot counts that share a seed
see identical episodes.

config keys: """ + ", ".join(sorted(FIELD_TYPES))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="fewshot-calib",
        description="Episodic finetuning experiments with distribution calibration and selected sampling.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_seed=True):
        p.add_argument("--config", type=Path, help="key = value config file (optional; defaults apply)")
        p.add_argument("--out", type=Path, required=True, help="parent directory for the new run-NNNN directory (required)")
        p.add_argument("--seed", type=int, required=needs_seed, help="global seed for the episode stream (required)")
        p.add_argument("--preset", choices=sorted(PRESETS), help="named benchmark applied before other keys")
        p.add_argument("--episodes", type=int, help="number of episodes (default 600)")
        p.add_argument("--workers", type=int, help="worker processes; output is identical for any count")
        p.add_argument("--set", dest="overrides", action="append", default=[], type=_assignment,
                       metavar="KEY=VALUE", help="override one config key; repeatable")

    p = sub.add_parser("pretrain", help="pretrain a backbone on base classes and save a checkpoint")
    common(p, needs_seed=False)
    p.set_defaults(kind="pretrain")

    p = sub.add_parser("run", help="one ablation row ('row' key) over all episodes")
    common(p)
    p.set_defaults(kind="run")

    p = sub.add_parser("ablate", help="every ablation row on the same episodes")
    common(p)
    p.set_defaults(kind="ablate")

    p = sub.add_parser("shots", help="baseline, plain finetuning and the full method per shot count")
    common(p)
    p.add_argument("--shot-list", help="comma-separated shot counts, e.g. 1,5")
    p.set_defaults(kind="shots")

    p = sub.add_parser("replay", help="recompute a run's summary from its episode records and verify it")
    p.add_argument("run_dir", type=Path, help="a run-NNNN directory")
    p.set_defaults(kind="replay")
    return parser


def resolve_config(args):
    overrides = {}
    for key, text in args.overrides:
        overrides[key] = parse_value(key, text)
    for key in ("preset", "episodes", "workers", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "shot_list", None):
        overrides["shot_list"] = parse_value("shot_list", args.shot_list)
    if args.config is not None:
        return load_config(args.config, overrides)
    return build_config({}, overrides)


def _report(summary: dict, out) -> None:
    for name, cell in summary["cells"].items():
        acc = cell["accuracy"]
        extra = f"  excluded {cell['excluded']}" if cell["excluded"] else ""
        if acc is None:
            print(f"{name:24s} {cell.get('note', 'no accuracy')}{extra}", file=out)
        else:
            print(f"{name:24s} acc {acc['mean']:.4f} +/- {acc['ci95']:.4f}  (n={acc['n']}){extra}", file=out)
    for name, comp in summary["comparisons"].items():
        if "mean" in comp:
            print(f"{name:32s} {comp['mean']:+.4f} +/- {comp['ci95']:.4f}", file=out)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.kind == "replay":
            replay(args.run_dir)
            print(f"{args.run_dir}: replay ok")
            return EXIT_OK
        cfg = resolve_config(args).validate()
        if args.kind == "pretrain":
            ws = prepare(cfg.replace(backbone=""))
            run_dir = new_run_dir(args.out)
            save_params(ws.backbone, run_dir / "backbone.txt")
            with open(run_dir / "config.txt", "x") as f:
                f.write(cfg.to_text())
            print(run_dir / "backbone.txt")
            return EXIT_OK
        result = execute(args.kind, cfg, args.out)
        _report(result.summary, sys.stdout)
        print(f"artifacts: {result.directory}")
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FewShotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
