"""PTB-XL metadata parsing, benchmark task construction and the dataset cache."""
from __future__ import annotations

import ast
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .wfdb import read_record

TASKS = ("all_71", "diagnostic_44", "subclass_23", "rhythm_12")
EXPECTED_CLASS_COUNTS = {"all_71": 71, "diagnostic_44": 44, "subclass_23": 23, "rhythm_12": 12}
SPLITS = ("train", "val", "test")
DATABASE_CSV = "ptbxl_database.csv"
STATEMENTS_CSV = "scp_statements.csv"
CACHE_VERSION = 1


class DataError(Exception):
    """Missing, malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class Statement:
    code: str
    is_diagnostic: bool
    is_rhythm: bool
    diagnostic_subclass: str | None = None


@dataclass(frozen=True)
class LabelTaxonomy:
    statements: tuple[Statement, ...]

    def __post_init__(self):
        codes = [s.code for s in self.statements]
        if len(set(codes)) != len(codes):
            raise DataError("duplicate statement codes in taxonomy")

    @property
    def statement_codes(self) -> list[str]:
        return [s.code for s in self.statements]

    def lookup(self) -> dict[str, Statement]:
        return {s.code: s for s in self.statements}


@dataclass(frozen=True)
class AnnotatedRecord:
    record_id: int
    statements: dict[str, float]
    fold: int
    path: str = ""


@dataclass(frozen=True)
class TaskDataset:
    task_id: str
    class_names: tuple[str, ...]
    record_ids: np.ndarray  # [n] int64
    labels: np.ndarray  # [n, K] uint8
    split: np.ndarray  # [n] str
    fold: np.ndarray  # [n] int64
    subsample_order: np.ndarray | None = None
    signals: np.ndarray | None = None  # [n, leads, T] float32
    sampling_rate: float = 100.0
    record_paths: tuple[str, ...] = field(default=(), repr=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def split_sizes(self) -> dict[str, int]:
        return {s: int((self.split == s).sum()) for s in SPLITS}

    def take(self, idx: np.ndarray) -> "TaskDataset":
        return replace(
            self,
            record_ids=self.record_ids[idx],
            labels=self.labels[idx],
            split=self.split[idx],
            fold=self.fold[idx],
            signals=None if self.signals is None else self.signals[idx],
            record_paths=tuple(self.record_paths[i] for i in idx) if self.record_paths else (),
        )


def parse_statement_map(text: str) -> dict[str, float]:
    """Parse a serialized ``{'CODE': likelihood, ...}`` map."""
    text = text.strip()
    if not (text.startswith("{") and text.endswith("}")):
        raise DataError(f"statement map must be brace-delimited: {text!r}")
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError) as exc:
        raise DataError(f"malformed statement map {text!r}: {exc}") from None
    if isinstance(value, set) and not value:
        value = {}
    if not isinstance(value, dict):
        raise DataError(f"statement map is not a mapping: {text!r}")
    out = {}
    for code, lik in value.items():
        if not isinstance(code, str) or isinstance(lik, bool) or not isinstance(lik, (int, float)):
            raise DataError(f"bad entry {code!r}: {lik!r} in {text!r}")
        if not 0.0 <= lik <= 100.0:
            raise DataError(f"likelihood {lik} for {code!r} outside [0, 100]")
        out[code.strip().upper()] = float(lik)
    return out


def _flag(value: str | None) -> bool:
    if value is None or value.strip() == "":
        return False
    try:
        return float(value) != 0.0
    except ValueError:
        return value.strip().lower() in ("true", "yes")


def load_taxonomy(path: str | Path) -> LabelTaxonomy:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"statement taxonomy not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        code_col = reader.fieldnames[0]
        rows = []
        for row in reader:
            sub = (row.get("diagnostic_subclass") or "").strip() or None
            rows.append(Statement(
                code=row[code_col].strip().upper(),
                is_diagnostic=_flag(row.get("diagnostic")),
                is_rhythm=_flag(row.get("rhythm")),
                diagnostic_subclass=sub,
            ))
    return LabelTaxonomy(tuple(rows))


def load_records(path: str | Path, sampling_rate: int = 100) -> list[AnnotatedRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"record metadata not found: {path}")
    col = {100: "filename_lr", 500: "filename_hr"}.get(sampling_rate)
    if col is None:
        raise DataError(f"sampling rate must be 100 or 500, got {sampling_rate}")
    out = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append(AnnotatedRecord(
                    record_id=int(float(row["ecg_id"])),
                    statements=parse_statement_map(row["scp_codes"]),
                    fold=int(float(row["strat_fold"])),
                    path=row.get(col, "") or "",
                ))
            except (KeyError, ValueError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


def task_classes(taxonomy: LabelTaxonomy, task: str) -> dict[str, str]:
    """Map statement code -> class name for the codes that contribute to ``task``."""
    if task == "all_71":
        return {s.code: s.code for s in taxonomy.statements}
    if task == "diagnostic_44":
        return {s.code: s.code for s in taxonomy.statements if s.is_diagnostic}
    if task == "rhythm_12":
        return {s.code: s.code for s in taxonomy.statements if s.is_rhythm}
    if task == "subclass_23":
        return {
            s.code: s.diagnostic_subclass
            for s in taxonomy.statements
            if s.is_diagnostic and s.diagnostic_subclass
        }
    raise DataError(f"unknown task {task!r}; expected one of {TASKS}")


def split_of_fold(fold: int) -> str:
    if not 1 <= fold <= 10:
        raise DataError(f"fold {fold} outside 1..10")
    return "train" if fold <= 8 else ("val" if fold == 9 else "test")


def build_task(records: Sequence[AnnotatedRecord], taxonomy: LabelTaxonomy, task: str,
               min_likelihood: float = 0.0, sampling_rate: float = 100.0) -> TaskDataset:
    """Assemble the label matrix and fold-based split for one benchmark task.

    A statement is positive when its likelihood is >= ``min_likelihood``; with
    the default of 0 any listed statement counts. Records without a positive
    label in the task are dropped.
    """
    code_to_class = task_classes(taxonomy, task)
    class_names = tuple(sorted(set(code_to_class.values())))
    if not class_names:
        raise DataError(f"task {task!r} has an empty class set")
    col = {c: i for i, c in enumerate(class_names)}

    ids, rows, folds, paths = [], [], [], []
    for rec in records:
        row = np.zeros(len(class_names), dtype=np.uint8)
        for code, lik in rec.statements.items():
            cls = code_to_class.get(code)
            if cls is not None and lik >= min_likelihood:
                row[col[cls]] = 1
        if row.any():
            split_of_fold(rec.fold)
            ids.append(rec.record_id)
            rows.append(row)
            folds.append(rec.fold)
            paths.append(rec.path)
    if not ids:
        raise DataError(f"task {task!r}: no record carries a positive label")
    fold = np.array(folds, dtype=np.int64)
    return TaskDataset(
        task_id=task,
        class_names=class_names,
        record_ids=np.array(ids, dtype=np.int64),
        labels=np.stack(rows),
        split=np.array([split_of_fold(f) for f in fold]),
        fold=fold,
        sampling_rate=float(sampling_rate),
        record_paths=tuple(paths),
    )


def _n_keep(fraction: float, n: int) -> int:
    # round() guards against 0.3 * 10 == 3.0000000000000004
    return min(n, math.ceil(round(fraction * n, 9)))


def subsample_train(dataset: TaskDataset, fraction: float, seed: int) -> TaskDataset:
    """Keep ``ceil(fraction * n_train)`` training records; val/test untouched.

    Selection takes a prefix of one seeded permutation, so selections at
    smaller fractions are subsets of those at larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    train = dataset.indices("train")
    order = np.random.default_rng(seed).permutation(len(train))
    kept = np.sort(train[order[: _n_keep(fraction, len(train))]])
    keep = np.sort(np.concatenate([kept, dataset.indices("val"), dataset.indices("test")]))
    return replace(dataset.take(keep), subsample_order=train[order])


def load_signals(dataset: TaskDataset, root: str | Path) -> TaskDataset:
    root = Path(root)
    if not dataset.record_paths:
        raise DataError("dataset has no record paths")
    arrays = []
    for rel in dataset.record_paths:
        try:
            rec = read_record(root / rel)
        except FileNotFoundError as exc:
            raise DataError(f"missing record file: {exc.filename}") from None
        if rec.sampling_rate != dataset.sampling_rate:
            raise DataError(f"{rel}: sampling rate {rec.sampling_rate} != {dataset.sampling_rate}")
        arrays.append(rec.samples.astype(np.float32))
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"records have inconsistent shapes: {sorted(shapes)}")
    return replace(dataset, signals=np.stack(arrays))


def load_ptbxl(root: str | Path, task: str, sampling_rate: int = 100,
               min_likelihood: float = 0.0, with_signals: bool = True) -> TaskDataset:
    root = Path(root)
    taxonomy = load_taxonomy(root / STATEMENTS_CSV)
    records = load_records(root / DATABASE_CSV, sampling_rate)
    ds = build_task(records, taxonomy, task, min_likelihood, sampling_rate)
    return load_signals(ds, root) if with_signals else ds


def lead_stats(signals: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-lead mean and standard deviation over records and time."""
    x = signals.astype(np.float64)
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    std[std < 1e-8] = 1.0
    return mean.astype(np.float32), std.astype(np.float32)


def normalize(signals: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return ((signals - mean[None, :, None]) / std[None, :, None]).astype(np.float32)


# --- cache -----------------------------------------------------------------

def _sha256(buf: bytes) -> str:
    return hashlib.sha256(buf).hexdigest()


def write_cache(dataset: TaskDataset, out_dir: str | Path) -> dict:
    """Write f32 blobs per split plus ``manifest.json``; returns the manifest."""
    if dataset.signals is None:
        raise DataError("cannot cache a dataset without signals")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name in SPLITS:
        idx = dataset.indices(name)
        x = np.ascontiguousarray(dataset.signals[idx], dtype="<f4").tobytes()
        y = np.ascontiguousarray(dataset.labels[idx], dtype="<f4").tobytes()
        (out / f"{name}_signals.f32").write_bytes(x)
        (out / f"{name}_labels.f32").write_bytes(y)
        splits[name] = {
            "record_ids": dataset.record_ids[idx].tolist(),
            "folds": dataset.fold[idx].tolist(),
            "signals_shape": [int(len(idx)), *dataset.signals.shape[1:]],
            "labels_shape": [int(len(idx)), dataset.n_classes],
            "signals_sha256": _sha256(x),
            "labels_sha256": _sha256(y),
        }
    body = {
        "format_version": CACHE_VERSION,
        "task_id": dataset.task_id,
        "class_names": list(dataset.class_names),
        "sampling_rate": dataset.sampling_rate,
        "splits": splits,
    }
    body["dataset_checksum"] = _sha256(json.dumps(body, sort_keys=True).encode())
    (out / "manifest.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    return body


def load_cache(cache_dir: str | Path, verify: bool = True) -> tuple[TaskDataset, str]:
    """Reload a cache; returns the dataset and its checksum."""
    cache = Path(cache_dir)
    mpath = cache / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"cache manifest not found: {mpath}")
    man = json.loads(mpath.read_text())
    if man.get("format_version") != CACHE_VERSION:
        raise DataError(f"cache format version {man.get('format_version')} != {CACHE_VERSION}")
    xs, ys, ids, folds, split = [], [], [], [], []
    for name in SPLITS:
        meta = man["splits"][name]
        xb = (cache / f"{name}_signals.f32").read_bytes()
        yb = (cache / f"{name}_labels.f32").read_bytes()
        if verify and (_sha256(xb) != meta["signals_sha256"] or _sha256(yb) != meta["labels_sha256"]):
            raise DataError(f"checksum mismatch in cache split {name!r}")
        xs.append(np.frombuffer(xb, dtype="<f4").reshape(meta["signals_shape"]))
        ys.append(np.frombuffer(yb, dtype="<f4").reshape(meta["labels_shape"]))
        ids += meta["record_ids"]
        folds += meta["folds"]
        split += [name] * meta["signals_shape"][0]
    body = {k: v for k, v in man.items() if k != "dataset_checksum"}
    checksum = _sha256(json.dumps(body, sort_keys=True).encode())
    if verify and checksum != man.get("dataset_checksum"):
        raise DataError("cache manifest checksum mismatch")
    ds = TaskDataset(
        task_id=man["task_id"],
        class_names=tuple(man["class_names"]),
        record_ids=np.array(ids, dtype=np.int64),
        labels=np.concatenate(ys).astype(np.uint8),
        split=np.array(split),
        fold=np.array(folds, dtype=np.int64),
        signals=np.concatenate(xs).astype(np.float32),
        sampling_rate=float(man["sampling_rate"]),
    )
    return ds, checksum


def describe(dataset: TaskDataset) -> str:
    sizes = dataset.split_sizes()
    return (f"task {dataset.task_id}: {dataset.n_classes} classes, {len(dataset.record_ids)} records "
            f"(train {sizes['train']}, val {sizes['val']}, test {sizes['test']})")

