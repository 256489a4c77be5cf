"""Two-stage post-training (linear probing, then regularized fine-tuning) and
the single-stage baseline recipe."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .backbone import (ModelConfig, Net1D, backward, bce_logits_loss, build_model, freeze_backbone,
                       replace_head, unfreeze_all, MaskRng)
from .checkpoint import load_checkpoint, save_checkpoint
from .ingest.ptbxl import TaskDataset, lead_stats, normalize
from .metrics import EvalReport, evaluate, macro_auprc, macro_auroc
from .optim import (AdamWState, CosineSchedule, OptimizerConfig, PlateauSchedule, adamw_step,
                    cosine_lr, decay_mask, plateau_step, select_checkpoint)

log = logging.getLogger(__name__)

SCHEDULES = ("plateau", "cosine", "constant")
SCOPES = ("head_only", "all")
EPOCH_FIELDS = ("epoch", "train_loss", "val_auroc", "val_auprc", "lr", "seconds")


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class StagePlan:
    epochs: int = 30
    batch_size: int = 256
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: str = "cosine"
    eta_min: float = 1e-5
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    per_iteration_cosine: bool = False
    drop_path_rate: float = 0.0
    dropout_rate: float = 0.0
    trainable_scope: str = "all"

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))
        if self.epochs < 1 or self.batch_size < 1:
            raise PlanError("epochs and batch_size must be >= 1")
        if self.schedule not in SCHEDULES:
            raise PlanError(f"schedule must be one of {SCHEDULES}")
        if self.trainable_scope not in SCOPES:
            raise PlanError(f"trainable_scope must be one of {SCOPES}")
        if not (0 <= self.drop_path_rate < 1 and 0 <= self.dropout_rate < 1):
            raise PlanError("drop_path_rate and dropout_rate must lie in [0, 1)")


def stage_a_plan(**kw) -> StagePlan:
    """Linear probing: frozen backbone, lr 5e-3, wd 0.1, plateau on val AUROC."""
    base = dict(epochs=30, batch_size=256, optimizer=OptimizerConfig(lr=5e-3, weight_decay=0.1),
                schedule="plateau", trainable_scope="head_only")
    return StagePlan(**{**base, **kw})


def stage_b_plan(**kw) -> StagePlan:
    """Full fine-tuning: lr 5e-4, wd 0.05, cosine to 1e-5, drop-path 0.5, dropout 0.05."""
    base = dict(epochs=30, batch_size=256, optimizer=OptimizerConfig(lr=5e-4, weight_decay=0.05),
                schedule="cosine", eta_min=1e-5, drop_path_rate=0.5, dropout_rate=0.05,
                trainable_scope="all")
    return StagePlan(**{**base, **kw})


def baseline_plan(**kw) -> StagePlan:
    """Plain fine-tuning with the linear-probing optimizer recipe on all parameters."""
    base = dict(epochs=30, batch_size=256, optimizer=OptimizerConfig(lr=5e-3, weight_decay=0.1),
                schedule="plateau", trainable_scope="all")
    return StagePlan(**{**base, **kw})


@dataclass(frozen=True)
class TrainPlan:
    mode: str = "posttrain"
    stage_a: StagePlan = field(default_factory=stage_a_plan)
    stage_b: StagePlan = field(default_factory=stage_b_plan)
    baseline: StagePlan = field(default_factory=baseline_plan)
    seed: int = 0
    init: str = "random"
    model: ModelConfig = field(default_factory=ModelConfig)
    # ablation switches for the post-training recipe
    use_stage_a: bool = True
    use_drop_path: bool = True
    use_dropout: bool = True
    use_cosine: bool = True
    freeze_stats_in_stage_a: bool = True
    normalize_inputs: bool = True
    eval_test_each_epoch: bool = False
    n_bootstrap: int = 1000
    record_wall_time: bool = False

    def __post_init__(self):
        if self.mode not in ("posttrain", "baseline"):
            raise PlanError(f"mode must be 'posttrain' or 'baseline', got {self.mode!r}")
        for name in ("stage_a", "stage_b", "baseline"):
            v = getattr(self, name)
            if isinstance(v, dict):
                object.__setattr__(self, name, StagePlan(**v))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if self.stage_a.trainable_scope != "head_only":
            raise PlanError("stage_a must train the head only")

    def resolved(self) -> "TrainPlan":
        """Apply the ablation switches to the fine-tuning stage."""
        b = self.stage_b
        if not self.use_drop_path:
            b = replace(b, drop_path_rate=0.0)
        if not self.use_dropout:
            b = replace(b, dropout_rate=0.0)
        if not self.use_cosine and b.schedule == "cosine":
            b = replace(b, schedule="constant")
        return replace(self, stage_b=b)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPlan":
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auroc: float
    val_auprc: float
    lr: float
    wall_time: float
    steps: int = 0
    test_auroc: float | None = None
    test_auprc: float | None = None


@dataclass
class StageResult:
    logs: list[EpochLog]
    selected_epoch: int
    selected_val_auroc: float
    steps: int


@dataclass
class RunResult:
    model: Net1D
    stages: dict[str, StageResult]
    report: EvalReport
    counters: dict[str, int]
    plan: TrainPlan

    @property
    def final_stage(self) -> str:
        return "baseline" if "baseline" in self.stages else "stage_b"


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}/{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 2


def prepare_inputs(data: TaskDataset, normalize_inputs: bool = True) -> TaskDataset:
    """Z-score each lead with training-split statistics."""
    if data.signals is None:
        raise PlanError("dataset carries no signals")
    if not normalize_inputs:
        return data
    train = data.indices("train")
    if len(train) == 0:
        raise PlanError("empty training split")
    mean, std = lead_stats(data.signals[train])
    return replace(data, signals=normalize(data.signals, mean, std))


def _split_tensors(data: TaskDataset, split: str, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    idx = data.indices(split)
    x = torch.from_numpy(np.ascontiguousarray(data.signals[idx])).to(dtype)
    y = torch.from_numpy(data.labels[idx].astype(np.float64)).to(dtype)
    return x, y


@torch.no_grad()
def predict(model: Net1D, x: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    """Infer-mode sigmoid scores as float64."""
    model.eval()
    out = [torch.sigmoid(model(x[i:i + batch_size])) for i in range(0, len(x), batch_size)]
    return torch.cat(out).double().numpy()


def _val_metrics(scores: np.ndarray, labels: torch.Tensor) -> tuple[float, float]:
    y = labels.numpy().astype(np.uint8)
    return macro_auroc(scores, y), macro_auprc(scores, y)


def _snapshot(model: Net1D) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _run_stage(model: Net1D, data: TaskDataset, stage: StagePlan, seed: int, tag: str,
               counters: Counter, eval_test: bool = False, freeze_stats: bool = True) -> tuple[Net1D, StageResult]:
    dtype = model.head.weight.dtype
    x_tr, y_tr = _split_tensors(data, "train", dtype)
    if len(x_tr) == 0:
        raise PlanError("empty training split")
    x_va, y_va = _split_tensors(data, "val", dtype)
    x_te, y_te = _split_tensors(data, "test", dtype) if eval_test else (None, None)

    if stage.trainable_scope == "head_only":
        freeze_backbone(model, freeze_stats)
    else:
        unfreeze_all(model)
    model.set_regularization(stage.drop_path_rate, stage.dropout_rate)

    params = {n: p for n, p in model.named_parameters() if p.requires_grad}
    decay = decay_mask(params)
    opt = stage.optimizer
    state = AdamWState()
    shuffle = torch.Generator().manual_seed(derive_seed(seed, f"{tag}/shuffle"))
    masks = MaskRng(derive_seed(seed, f"{tag}/masks"))
    n = len(x_tr)
    steps_per_epoch = math.ceil(n / stage.batch_size)
    cosine = None
    if stage.schedule == "cosine":
        total = (stage.epochs * steps_per_epoch - 1) if stage.per_iteration_cosine else (stage.epochs - 1)
        cosine = CosineSchedule(opt.lr, stage.eta_min, max(total, 1))
    plateau = PlateauSchedule(stage.plateau_factor, stage.plateau_patience)
    lr = opt.lr

    # Frozen, statistics-frozen backbone is a fixed function: train the head on cached features.
    cached = stage.trainable_scope == "head_only" and freeze_stats
    if cached:
        model.eval()
        with torch.no_grad():
            f_tr = torch.cat([model.features(x_tr[i:i + 512]) for i in range(0, n, 512)])

    history, logs, step = [], [], 0
    best = -math.inf
    for epoch in range(stage.epochs):
        t0 = time.perf_counter()
        if cosine is not None and not stage.per_iteration_cosine:
            lr = cosine_lr(cosine, epoch)
        epoch_lr = lr
        perm = torch.randperm(n, generator=shuffle)
        model.train()
        loss_sum = 0.0
        for start in range(0, n, stage.batch_size):
            idx = perm[start:start + stage.batch_size]
            if cosine is not None and stage.per_iteration_cosine:
                lr = cosine_lr(cosine, step)
            if cached:
                logits = model.head(f_tr[idx])
                loss = bce_logits_loss(logits, y_tr[idx])
                g = torch.autograd.grad(loss, list(params.values()))
                grads = dict(zip(params, g))
            else:
                loss, grads = backward(model, x_tr[idx], y_tr[idx], "train", masks)
            state = adamw_step(params, grads, state, opt, lr=lr, decay=decay)
            loss_sum += float(loss.detach()) * len(idx)
            step += 1
        counters[f"{tag}_steps"] += steps_per_epoch
        counters[f"{tag}_{stage.schedule}_epochs"] += 1
        va_auroc, va_auprc = _val_metrics(predict(model, x_va), y_va)
        te = _val_metrics(predict(model, x_te), y_te) if eval_test else (None, None)
        snap = None
        if va_auroc > best:
            best, snap = va_auroc, _snapshot(model)
        history.append((epoch + 1, va_auroc, snap))
        if stage.schedule == "plateau":
            plateau, lr = plateau_step(plateau, va_auroc, lr)
        elapsed = time.perf_counter() - t0
        logs.append(EpochLog(epoch + 1, loss_sum / n, va_auroc, va_auprc, epoch_lr,
                             elapsed, steps_per_epoch, *te))
        log.info("%s epoch %d loss %.4f val auroc %.4f auprc %.4f lr %.2e",
                 tag, epoch + 1, loss_sum / n, va_auroc, va_auprc, epoch_lr)

    chosen = select_checkpoint(history)
    model.load_state_dict(chosen[2])
    return model, StageResult(logs, chosen[0], chosen[1], step)


def run_stage_a(model: Net1D, data: TaskDataset, plan: StagePlan | None = None, seed: int = 0,
                counters: Counter | None = None, **kw) -> tuple[Net1D, StageResult]:
    """Linear probing on a frozen backbone; keeps the best-validation head."""
    plan = plan or stage_a_plan()
    if plan.trainable_scope != "head_only":
        raise PlanError("stage A trains the head only")
    return _run_stage(model, data, plan, seed, "stage_a", counters if counters is not None else Counter(), **kw)


def run_stage_b(model: Net1D, data: TaskDataset, plan: StagePlan | None = None, seed: int = 0,
                counters: Counter | None = None, **kw) -> tuple[Net1D, StageResult]:
    """Full fine-tuning with drop-path and dropout active in train forwards."""
    plan = plan or stage_b_plan()
    return _run_stage(model, data, replace(plan, trainable_scope="all"), seed, "finetune",
                      counters if counters is not None else Counter(), **kw)


def run_baseline(model: Net1D, data: TaskDataset, plan: StagePlan | None = None, seed: int = 0,
                 counters: Counter | None = None, **kw) -> tuple[Net1D, StageResult]:
    """Single-stage fine-tuning; same code path and seed stream as :func:`run_stage_b`."""
    plan = plan or baseline_plan()
    return _run_stage(model, data, replace(plan, trainable_scope="all"), seed, "finetune",
                      counters if counters is not None else Counter(), **kw)


def resolve_init(init: str, config: ModelConfig, n_classes: int, n_leads: int, seed: int) -> Net1D:
    if init == "random":
        model = build_model(config.replace(n_classes=n_classes, in_leads=n_leads), seed=seed)
    else:
        model = load_checkpoint(init)
        if model.config.in_leads != n_leads:
            raise PlanError(f"checkpoint expects {model.config.in_leads} leads, data has {n_leads}")
    return replace_head(model, n_classes, seed=derive_seed(seed, "head"))


def run_posttrain(data: TaskDataset, plan: TrainPlan, init: str | None = None) -> RunResult:
    """replace head -> [stage A] -> unfreeze -> stage B (or baseline) -> test evaluation."""
    plan = plan.resolved()
    init = plan.init if init is None else init
    data = prepare_inputs(data, plan.normalize_inputs)
    model = resolve_init(init, plan.model, data.n_classes, data.signals.shape[1], plan.seed)
    counters: Counter = Counter()
    kw = dict(eval_test=plan.eval_test_each_epoch)
    stages: dict[str, StageResult] = {}
    model.counters.clear()
    if plan.mode == "baseline":
        model, stages["baseline"] = run_baseline(model, data, plan.baseline, plan.seed, counters, **kw)
    else:
        if plan.use_stage_a:
            model, stages["stage_a"] = run_stage_a(model, data, plan.stage_a, plan.seed, counters,
                                                   freeze_stats=plan.freeze_stats_in_stage_a, **kw)
            unfreeze_all(model)
        model, stages["stage_b"] = run_stage_b(model, data, plan.stage_b, plan.seed, counters, **kw)
    counters.update({f"model_{k}": v for k, v in model.counters.items()})
    x_te, y_te = _split_tensors(data, "test", model.head.weight.dtype)
    report = evaluate(predict(model, x_te), y_te.numpy().astype(np.uint8), data.class_names,
                      n_bootstrap=plan.n_bootstrap, seed=plan.seed)
    return RunResult(model, stages, report, dict(sorted(counters.items())), plan)


# --- run directory ----------------------------------------------------------

def epochs_csv(logs: list[EpochLog], wall_time: bool = False) -> str:
    """EpochLog rows; the seconds column is 0 unless ``wall_time`` so reruns diff clean."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPOCH_FIELDS)
    for e in logs:
        w.writerow([e.epoch, repr(e.train_loss), repr(e.val_auroc), repr(e.val_auprc), repr(e.lr),
                    repr(e.wall_time if wall_time else 0.0)])
    return buf.getvalue()


def read_epochs_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != EPOCH_FIELDS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in reader]


def result_dict(result: RunResult, dataset_checksum: str = "") -> dict:
    r = result.report
    return {
        "test": {
            "macro_auroc": r.macro_auroc,
            "macro_auprc": r.macro_auprc,
            "auroc_ci": list(r.auroc_ci) if r.auroc_ci else None,
            "auprc_ci": list(r.auprc_ci) if r.auprc_ci else None,
            "n_bootstrap": r.n_bootstrap,
            "skipped_classes": r.skipped_classes,
        },
        "stages": {k: {"selected_epoch": s.selected_epoch, "selected_val_auroc": s.selected_val_auroc,
                       "steps": s.steps} for k, s in result.stages.items()},
        "counters": result.counters,
        "provenance": {
            "seed": result.plan.seed,
            "config_hash": result.plan.config_hash(),
            "dataset_checksum": dataset_checksum,
        },
    }


def write_run_dir(result: RunResult, out_dir: str | Path, dataset_checksum: str = "") -> Path:
    """``plan.json``, ``epochs.csv`` (final stage), ``best.ckpt``, ``result.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dumps = lambda o: json.dumps(o, indent=1, sort_keys=True) + "\n"  # noqa: E731
    (out / "plan.json").write_text(dumps(result.plan.to_dict()))
    wt = result.plan.record_wall_time
    (out / "epochs.csv").write_text(epochs_csv(result.stages[result.final_stage].logs, wt))
    if "stage_a" in result.stages:
        (out / "stage_a_epochs.csv").write_text(epochs_csv(result.stages["stage_a"].logs, wt))
    # measured timings live apart from the reproducible artifacts
    (out / "timing.csv").write_text("stage,epoch,seconds\n" + "".join(
        f"{k},{e.epoch},{e.wall_time:.3f}\n" for k, s in result.stages.items() for e in s.logs))
    save_checkpoint(result.model, out / "best.ckpt")
    (out / "result.json").write_text(dumps(result_dict(result, dataset_checksum)))
    (out / "per_class.csv").write_text(result.report.per_class_csv())
    return out
