"""Experiment runners: recipe comparison, epoch curves, training-size sweep
and the component ablation. Each writes CSV tables, run directories and SVGs
under the manifest's output directory."""
from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from multiprocessing import get_context
from pathlib import Path

import torch

from .ingest.ptbxl import DataError, TaskDataset, load_cache, subsample_train
from .plots import emit_plots, line_plot_svg
from .posttrain import PlanError, RunResult, TrainPlan, run_posttrain, write_run_dir

log = logging.getLogger(__name__)

RECIPES = ("baseline", "posttrain")
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))
RESULT_FIELDS = ("cell_id", "recipe", "fraction", "seed", "macro_auroc", "auroc_ci_low", "auroc_ci_high",
                 "macro_auprc", "auprc_ci_low", "auprc_ci_high", "wall_time")
CURVE_FIELDS = ("recipe", "seed", "epoch", "val_auroc", "val_auprc", "test_auroc", "test_auprc", "lr")
ABLATION_FIELDS = ("cell_id", "method", "setting", "val_auroc", "val_auprc", "test_auroc",
                   "test_auprc", "n_seeds")

# (cell id, method, setting, plan overrides)
ABLATION_CELLS = (
    ("baseline_random", "Baseline Strategy", "random initialization", dict(mode="baseline", init="random")),
    ("baseline_pretrained", "Baseline Strategy", "pre-training", dict(mode="baseline")),
    ("proposed_random", "Proposed Strategy", "random initialization", dict(init="random")),
    ("no_droppath", "Proposed Strategy", "without droppath", dict(use_drop_path=False)),
    ("no_linear_probing", "Proposed Strategy", "without linear probing", dict(use_stage_a=False)),
    ("no_dropout", "Proposed Strategy", "without dropout", dict(use_dropout=False)),
    ("no_cosine", "Proposed Strategy", "without cosine schedule", dict(use_cosine=False)),
    ("all_components", "Proposed Strategy", "all components", {}),
)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentManifest:
    experiment_id: str
    cache: str
    task: str | None = None
    plan: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    fractions: list[float] | None = None
    ablation_cells: list[str] | None = None
    output_dir: str = "runs"
    dataset_checksum: str | None = None
    workers: int = 1
    device_threads: int | None = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.fractions is not None and not all(0 < f <= 1 for f in self.fractions):
            raise ConfigError("fractions must lie in (0, 1]")
        known = {c[0] for c in ABLATION_CELLS}
        if self.ablation_cells is not None and set(self.ablation_cells) - known:
            raise ConfigError(f"unknown ablation cells {sorted(set(self.ablation_cells) - known)}")
        try:
            self.base_plan()
        except (PlanError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid plan: {exc}") from None

    def base_plan(self) -> TrainPlan:
        return TrainPlan.from_dict(self.plan)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "ExperimentManifest":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from None
        d.update({k: v for k, v in overrides.items() if v is not None})
        if "cache" in d:
            cache = Path(d["cache"])
            d["cache"] = str(cache if cache.is_absolute() else Path(path).parent / cache)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"manifest {path}: {exc}") from None

    def to_dict(self) -> dict:
        return asdict(self)


def load_dataset(manifest: ExperimentManifest) -> tuple[TaskDataset, str]:
    ds, checksum = load_cache(manifest.cache)
    if manifest.dataset_checksum and manifest.dataset_checksum != checksum:
        raise DataError(f"dataset checksum {checksum} does not match manifest {manifest.dataset_checksum}")
    if manifest.task and manifest.task != ds.task_id:
        raise ConfigError(f"manifest task {manifest.task!r} but cache holds {ds.task_id!r}")
    return ds, checksum


@dataclass(frozen=True)
class Cell:
    cell_id: str
    recipe: str
    seed: int
    fraction: float
    plan: dict
    run_dir: str


def recipe_plan(base: TrainPlan, recipe: str, seed: int, **changes) -> TrainPlan:
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}")
    return replace(base, mode=recipe, seed=seed, **changes)


_WORKER_DATA: dict[str, tuple[TaskDataset, str]] = {}


def _execute(cell: Cell, cache: str, threads: int | None) -> dict:
    if threads:
        torch.set_num_threads(threads)
    if cache not in _WORKER_DATA:
        _WORKER_DATA[cache] = load_cache(cache)
    data, checksum = _WORKER_DATA[cache]
    if cell.fraction < 1.0:
        data = subsample_train(data, cell.fraction, cell.seed)
    plan = TrainPlan.from_dict(cell.plan)
    log.info("cell %s (%s, seed %d, fraction %g)", cell.cell_id, cell.recipe, cell.seed, cell.fraction)
    result = run_posttrain(data, plan)
    write_run_dir(result, cell.run_dir, checksum)
    return _summarize(cell, result)


def _summarize(cell: Cell, result: RunResult) -> dict:
    r = result.report
    final = result.stages[result.final_stage]
    sel = next(e for e in final.logs if e.epoch == final.selected_epoch)
    seconds = sum(e.wall_time for s in result.stages.values() for e in s.logs)
    a_ci, p_ci = r.auroc_ci or (None, None), r.auprc_ci or (None, None)
    return {
        "cell_id": cell.cell_id, "recipe": cell.recipe, "fraction": cell.fraction, "seed": cell.seed,
        "macro_auroc": r.macro_auroc, "auroc_ci_low": a_ci[0], "auroc_ci_high": a_ci[1],
        "macro_auprc": r.macro_auprc, "auprc_ci_low": p_ci[0], "auprc_ci_high": p_ci[1],
        "wall_time": seconds if result.plan.record_wall_time else 0.0,
        "val_auroc": sel.val_auroc, "val_auprc": sel.val_auprc,
        "curve": [asdict(e) for e in final.logs],
    }


def run_cells(manifest: ExperimentManifest, cells: list[Cell]) -> list[dict]:
    """Execute cells (in a process pool when ``workers > 1``); rows come back in cell order."""
    if manifest.workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(manifest.workers, mp_context=get_context("spawn")) as pool:
            futures = [pool.submit(_execute, c, manifest.cache, manifest.device_threads) for c in cells]
            return [f.result() for f in futures]
    return [_execute(c, manifest.cache, manifest.device_threads) for c in cells]


def _num(v) -> str:
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_table(path: Path, fields, rows) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([_num(r[f]) for f in fields])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def reference_results() -> dict:
    return json.loads(resources.files("ecg_posttrain").joinpath("reference_results.json").read_text())


def _prepare(manifest: ExperimentManifest, sub: str) -> tuple[Path, TrainPlan]:
    ds, checksum = load_dataset(manifest)
    out = Path(manifest.output_dir) / sub
    out.mkdir(parents=True, exist_ok=True)
    man = manifest.to_dict()
    man["dataset_checksum"] = checksum
    man["task"] = ds.task_id
    (out / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    return out, manifest.base_plan()


def run_comparison(manifest: ExperimentManifest) -> list[dict]:
    """Baseline vs post-training per seed; writes ``comparison.csv`` and ``comparison.svg``."""
    out, base = _prepare(manifest, "compare")
    cells = [
        Cell(f"{recipe}/seed{s}", recipe, s, 1.0, recipe_plan(base, recipe, s).to_dict(),
             str(out / f"seed{s}" / recipe))
        for s in manifest.seeds for recipe in RECIPES
    ]
    rows = run_cells(manifest, cells)
    write_table(out / "comparison.csv", RESULT_FIELDS, rows)
    series = {f"{r['recipe']} seed{r['seed']}": [(e["epoch"], e["val_auroc"]) for e in r["curve"]]
              for r in rows}
    (out / "comparison.svg").write_text(
        line_plot_svg(series, "validation macro AUROC per epoch", "epoch", "macro AUROC"))
    return rows


def run_epoch_curves(manifest: ExperimentManifest) -> list[dict]:
    """Per-epoch val/test metrics for both recipes; writes ``curves.csv`` and four SVG panels."""
    out, base = _prepare(manifest, "curves")
    cells = [
        Cell(f"{recipe}/seed{s}", recipe, s, 1.0,
             recipe_plan(base, recipe, s, eval_test_each_epoch=True).to_dict(),
             str(out / f"seed{s}" / recipe))
        for s in manifest.seeds for recipe in RECIPES
    ]
    rows = run_cells(manifest, cells)
    curve_rows = [
        {"recipe": r["recipe"], "seed": r["seed"], "epoch": e["epoch"], "val_auroc": e["val_auroc"],
         "val_auprc": e["val_auprc"], "test_auroc": e["test_auroc"], "test_auprc": e["test_auprc"],
         "lr": e["lr"]}
        for r in rows for e in r["curve"]
    ]
    path = write_table(out / "curves.csv", CURVE_FIELDS, curve_rows)
    emit_plots(path, out)
    return curve_rows


def run_subsample_sweep(manifest: ExperimentManifest) -> list[dict]:
    """Both recipes at each training fraction; writes ``sweep.csv`` and fraction plots."""
    out, base = _prepare(manifest, "sweep")
    fractions = manifest.fractions or list(DEFAULT_FRACTIONS)
    cells = [
        Cell(f"{recipe}/f{f:g}/seed{s}", recipe, s, float(f), recipe_plan(base, recipe, s).to_dict(),
             str(out / f"f{f:g}" / f"seed{s}" / recipe))
        for f in fractions for s in manifest.seeds for recipe in RECIPES
    ]
    rows = run_cells(manifest, cells)
    path = write_table(out / "sweep.csv", RESULT_FIELDS, rows)
    emit_plots(path, out)
    return rows


def run_ablation(manifest: ExperimentManifest) -> list[dict]:
    """The eight component cells; ``ablation.csv`` holds seed medians in table layout."""
    out, base = _prepare(manifest, "ablation")
    wanted = manifest.ablation_cells or [c[0] for c in ABLATION_CELLS]
    by_id = {c[0]: c for c in ABLATION_CELLS}
    cells = []
    for cid in wanted:
        _, _, _, changes = by_id[cid]
        changes = dict(changes)
        recipe = changes.pop("mode", "posttrain")
        for s in manifest.seeds:
            plan = recipe_plan(base, recipe, s, **changes)
            cells.append(Cell(f"{cid}/seed{s}", recipe, s, 1.0, plan.to_dict(), str(out / cid / f"seed{s}")))
    rows = run_cells(manifest, cells)
    for c, r in zip(cells, rows):
        r["ablation_cell"] = c.cell_id.split("/")[0]
    write_table(out / "ablation_runs.csv", ("ablation_cell",) + RESULT_FIELDS[1:] + ("val_auroc", "val_auprc"),
                rows)
    table = []
    for cid in wanted:
        mine = [r for r in rows if r["ablation_cell"] == cid]
        _, method, setting, _ = by_id[cid]
        med = lambda k: statistics.median(r[k] for r in mine)  # noqa: E731
        table.append({"cell_id": cid, "method": method, "setting": setting,
                      "val_auroc": med("val_auroc"), "val_auprc": med("val_auprc"),
                      "test_auroc": med("macro_auroc"), "test_auprc": med("macro_auprc"),
                      "n_seeds": len(mine)})
    write_table(out / "ablation.csv", ABLATION_FIELDS, table)
    return table
