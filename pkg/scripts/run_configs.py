"""Run every JSON config in configs/ and print one summary line each."""
import argparse
import glob
import os
import sys

from adiapump import cli

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default=os.path.join(ROOT, "out"), help="parent output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("pattern", nargs="?", default="*.json", help="glob inside configs/")
    args = p.parse_args(argv)
    worst = 0
    for path in sorted(glob.glob(os.path.join(ROOT, "configs", args.pattern))):
        name = os.path.splitext(os.path.basename(path))[0]
        print(f"== {name}")
        code = cli.main(["run", path, "--out", os.path.join(args.out, name),
                         "--jobs", str(args.jobs)])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
