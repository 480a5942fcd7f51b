"""Print layer tables and parameter totals for the four networks.

    python3 scripts/arch_report.py [--width 1.0] [--json]
"""
import argparse

from octnet.constants import ARCHITECTURES
from octnet.models import build, param_count


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=float, default=1.0)
    ap.add_argument("--arch", choices=ARCHITECTURES, action="append")
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    for name in args.arch or ARCHITECTURES:
        rep = param_count(build(name, width=args.width))
        print(rep.to_json() if args.json else rep.to_text())
        print()


if __name__ == "__main__":
    main()
