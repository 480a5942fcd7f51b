"""Recompute the published metric rows from the published confusion matrices.

    python3 scripts/reproduce_table3.py [--tolerance 0.005] [--json out.json]
"""
import argparse
import json
import sys

from octnet.evaluation import reproduce_table3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tolerance", type=float, default=0.005)
    ap.add_argument("--json", help="also write per-row metrics here")
    args = ap.parse_args()
    lines = reproduce_table3(args.tolerance)
    for line in lines:
        print(line.render())
    if args.json:
        with open(args.json, "w") as f:
            json.dump([{"model": l.model, "phase": l.phase, "status": l.status,
                        "metrics": l.report.to_dict()} for l in lines], f, indent=2)
    return 1 if any(l.status == "FAIL" for l in lines) else 0


if __name__ == "__main__":
    sys.exit(main())
