"""End-to-end run of every protocol on a generated PTB-XL-shaped dataset.

    python3 scripts/synthetic_demo.py --out runs/demo

Builds the dataset, ingests the 71-statement task, then runs compare, curves,
sweep and ablate through the CLI with the smoke manifest. Numbers printed here
come from synthetic signals and say nothing about real ECG performance.
"""
import argparse
import json
import sys
from pathlib import Path

from ecg_posttrain import cli

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "smoke.json"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/demo")
    ap.add_argument("--n-records", type=int, default=600)
    ap.add_argument("--seconds", type=float, default=2.56)
    ap.add_argument("--task", default="all_71")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    raw, cache = out / "raw", out / "cache"
    steps = [
        ["synth", "--out", str(raw), "--n-records", str(args.n_records), "--seconds", str(args.seconds)],
        ["ingest", "--root", str(raw), "--task", args.task, "--out", str(cache)],
    ]
    for argv in steps:
        if (code := cli.main(argv)) != 0:
            return code

    manifest = json.loads(CONFIG.read_text())
    manifest.update(cache=str(cache.resolve()), output_dir=str(out), task=args.task, workers=args.workers)
    cfg = out / "manifest.json"
    cfg.write_text(json.dumps(manifest, indent=1) + "\n")
    for command in ("compare", "curves", "sweep", "ablate"):
        print(f"== {command}")
        if (code := cli.main([command, "--config", str(cfg)])) != 0:
            return code
    print(f"artifacts under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
