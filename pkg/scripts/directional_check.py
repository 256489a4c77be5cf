"""Scaled directional check on PTB-XL all-71.

Random init, default desk-scale model, 10 epochs per stage, training folds
subsampled to 20%, seeds 0-2. Passes when the median test macro AUROC of the
two-stage recipe beats the baseline median by more than 0.005.

    python3 scripts/directional_check.py --root /data/ptb-xl --workers 8

Expect on the order of two hours on a multi-core CPU.
"""
import argparse
import statistics
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from ecg_posttrain import harness
from ecg_posttrain.ingest.ptbxl import describe, load_ptbxl, write_cache
from ecg_posttrain.posttrain import baseline_plan, stage_a_plan, stage_b_plan

MARGIN = 0.005


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", required=True, help="PTB-XL directory")
    ap.add_argument("--out", default="runs/directional")
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--device-threads", type=int)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--fraction", type=float, default=0.2)
    args = ap.parse_args()
    torch.use_deterministic_algorithms(True)

    out = Path(args.out)
    cache = out / "cache"
    if not (cache / "manifest.json").exists():
        ds = load_ptbxl(args.root, "all_71", sampling_rate=100)
        print(describe(ds))
        write_cache(ds, cache)

    e = args.epochs
    plan = dict(init="random", stage_a=asdict(stage_a_plan(epochs=e)), stage_b=asdict(stage_b_plan(epochs=e)),
                baseline=asdict(baseline_plan(epochs=e)))
    man = harness.ExperimentManifest(
        experiment_id="directional", cache=str(cache), task="all_71", plan=plan, seeds=[0, 1, 2],
        fractions=[args.fraction], output_dir=str(out), workers=args.workers,
        device_threads=args.device_threads)
    rows = harness.run_subsample_sweep(man)
    med = {r: statistics.median(x["macro_auroc"] for x in rows if x["recipe"] == r)
           for r in harness.RECIPES}
    delta = med["posttrain"] - med["baseline"]
    for r in rows:
        print(f"{r['cell_id']}: test macro AUROC {r['macro_auroc']:.4f}")
    verdict = "PASS" if delta > MARGIN else "FAIL"
    print(f"median posttrain {med['posttrain']:.4f} baseline {med['baseline']:.4f} "
          f"delta {delta:+.4f} (needs > {MARGIN}) -> {verdict}")
    return 0 if delta > MARGIN else 1


if __name__ == "__main__":
    sys.exit(main())
