"""Desk-scale phantom experiment: train, ensemble-sample the held-out split, score.

    python scripts/desk_run.py --config configs/desk.ini --out runs/desk
    python scripts/desk_run.py --config configs/desk.ini --out runs/desk_noprior --set model.shape_prior=false
"""

import argparse
import json
import logging
from pathlib import Path

from versediff.config import load_config
from versediff.experiment import desk_run
from versediff.io import atomic_write_json


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=200)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    overrides = dict(kv.split("=", 1) for kv in args.set)
    config = load_config(args.config, overrides)
    out = Path(args.out)
    result = desk_run(config, count=args.count, out_dir=out)
    report = result["report"]
    atomic_write_json(out / "report.json", report)
    brief = {k: v for k, v in report.items() if k not in ("loss_history", "per_subject", "config")}
    print(json.dumps(brief, indent=2))


if __name__ == "__main__":
    main()
