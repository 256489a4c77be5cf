"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys

import torch

from . import harness
from .checkpoint import CheckpointError
from .ingest.ptbxl import TASKS, DataError, describe, load_ptbxl, write_cache
from .ingest.wfdb import WfdbFormatError
from .plots import PlotError, emit_plots
from .posttrain import PlanError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment manifest (JSON)")
    common.add_argument("--task", choices=TASKS)
    common.add_argument("--seed", "--seeds", dest="seeds", type=int, nargs="+")
    common.add_argument("--out", help="output directory")
    common.add_argument("--init", help="'random' or a checkpoint directory")
    common.add_argument("--device-threads", type=int)
    common.add_argument("--workers", type=int, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ecg-posttrain", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ing = sub.add_parser("ingest", parents=[common], help="build a dataset cache from PTB-XL")
    ing.add_argument("--root", required=True, help="PTB-XL directory")
    ing.add_argument("--sampling-rate", type=int, default=100, choices=(100, 500))
    ing.add_argument("--min-likelihood", type=float, default=0.0)

    for name, desc in (("compare", "baseline vs post-training"), ("curves", "per-epoch curves"),
                       ("sweep", "training-size sweep"), ("ablate", "component ablation")):
        sp = sub.add_parser(name, parents=[common], help=desc)
        if name == "sweep":
            sp.add_argument("--fractions", type=float, nargs="+")

    pl = sub.add_parser("plot", parents=[common], help="render SVGs from result CSVs")
    pl.add_argument("csv", nargs="+")

    syn = sub.add_parser("synth", parents=[common], help="write a synthetic PTB-XL-shaped dataset")
    syn.add_argument("--n-records", type=int, default=300)
    syn.add_argument("--seconds", type=float, default=10.0)
    return p


def _load_manifest(args) -> harness.ExperimentManifest:
    if not args.config:
        raise harness.ConfigError("--config is required")
    overrides = dict(task=args.task, seeds=args.seeds, output_dir=args.out, workers=args.workers,
                     device_threads=args.device_threads)
    if getattr(args, "fractions", None):
        overrides["fractions"] = args.fractions
    man = harness.ExperimentManifest.load(args.config, **overrides)
    if args.init:
        man.plan = {**man.plan, "init": args.init}
        man.base_plan()
    return man


def _print_rows(rows, keys):
    for r in rows:
        print("  ".join(f"{k}={r[k]:.4f}" if isinstance(r[k], float) else f"{k}={r[k]}" for k in keys))


def _medians(rows, group="recipe"):
    out = {}
    for g in sorted({r[group] for r in rows}):
        mine = [r for r in rows if r[group] == g]
        out[g] = (statistics.median(r["macro_auroc"] for r in mine),
                  statistics.median(r["macro_auprc"] for r in mine))
    return out


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.device_threads:
        torch.set_num_threads(args.device_threads)
    torch.use_deterministic_algorithms(True)

    if args.command == "ingest":
        if not args.task or not args.out:
            raise harness.ConfigError("ingest needs --task and --out")
        ds = load_ptbxl(args.root, args.task, args.sampling_rate, args.min_likelihood)
        man = write_cache(ds, args.out)
        print(describe(ds))
        print(f"cache written to {args.out} (checksum {man['dataset_checksum']})")
    elif args.command == "synth":
        from .synthetic import write_ptbxl_like
        if not args.out:
            raise harness.ConfigError("synth needs --out")
        write_ptbxl_like(args.out, n_records=args.n_records, seconds=args.seconds,
                         seed=(args.seeds or [0])[0])
        print(f"synthetic dataset written to {args.out}")
    elif args.command == "plot":
        for path in args.csv:
            for f in emit_plots(path, args.out):
                print(f)
    else:
        man = _load_manifest(args)
        ref = harness.reference_results()
        if args.command == "compare":
            rows = harness.run_comparison(man)
            _print_rows(rows, ("cell_id", "macro_auroc", "macro_auprc"))
            task = rows and harness.load_dataset(man)[0].task_id
            for recipe, (auroc, auprc) in _medians(rows).items():
                target = ref["comparison_macro_auroc"][recipe].get(task, [None])[0]
                print(f"median {recipe}: auroc {auroc:.4f} auprc {auprc:.4f} (full-scale reference auroc {target})")
        elif args.command == "curves":
            rows = harness.run_epoch_curves(man)
            print(f"{len(rows)} curve rows written")
        elif args.command == "sweep":
            rows = harness.run_subsample_sweep(man)
            _print_rows(rows, ("cell_id", "macro_auroc", "macro_auprc"))
        elif args.command == "ablate":
            rows = harness.run_ablation(man)
            _print_rows(rows, ("cell_id", "val_auroc", "val_auprc", "test_auroc", "test_auprc"))
    return EXIT_OK


def main(argv=None) -> int:
    try:
        code = run(argv)
    except (harness.ConfigError, PlanError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except (DataError, WfdbFormatError, CheckpointError, PlotError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        code = EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        logging.getLogger(__name__).exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        code = EXIT_RUNTIME
    return code


if __name__ == "__main__":
    sys.exit(main())
