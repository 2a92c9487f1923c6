"""Run every bundled configuration through the CLI into ./out/<config name>/."""

import argparse
import pathlib
import sys

from eqselect import cli

HERE = pathlib.Path(__file__).resolve().parent
MODES = {"analyze": "analyze", "sweep": "sweep", "solve": "solve", "simulate": "simulate", "riccati": "riccati"}


def mode_for(path: pathlib.Path) -> str:
    for key, mode in MODES.items():
        if key in path.stem:
            return mode
    raise SystemExit(f"cannot infer mode from {path.name}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("configs", nargs="*", help="config files (default: scripts/configs/*.json)")
    args = ap.parse_args(argv)
    paths = [pathlib.Path(p) for p in args.configs] or sorted((HERE / "configs").glob("*.json"))
    status = 0
    for p in paths:
        mode = mode_for(p)
        out = pathlib.Path(args.out) / p.stem
        code = cli.main([mode, "--config", str(p), "--out", str(out), "--deterministic", "--jobs", str(args.jobs)])
        print(f"{p.name:24s} {mode:9s} exit {code} -> {out}")
        status = max(status, code)
    return status


if __name__ == "__main__":
    sys.exit(main())
