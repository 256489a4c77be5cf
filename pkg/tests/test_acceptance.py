"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line verdict that the terminal summary prints under
"acceptance criteria". Criteria needing the real PTB-XL tree read its location
from ``PTBXL_ROOT`` and skip when it is unset.
"""
import contextlib
import csv
import json
import math
import os
import statistics
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
import torch

import conftest
from conftest import micro_config, separable_fixture, tiny_config
from test_backbone import finite_difference_check
from test_metrics import brute_ap, brute_auroc, random_instances
from test_wfdb import _one_off_decode
from ecg_posttrain import cli, harness
from ecg_posttrain.backbone import MaskRng, ModelConfig, build_model, draw_mask
from ecg_posttrain.harness import ABLATION_CELLS, ExperimentManifest
from ecg_posttrain.ingest.ptbxl import EXPECTED_CLASS_COUNTS, load_ptbxl
from ecg_posttrain.ingest.wfdb import RecordHeader, SignalSpec, decode_format16, parse_wfdb_header
from ecg_posttrain.metrics import auprc, auroc
from ecg_posttrain.optim import CosineSchedule, PlateauSchedule, cosine_lr, plateau_step
from ecg_posttrain.posttrain import (
    baseline_plan, prepare_inputs, run_stage_a, stage_a_plan, stage_b_plan,
)
from ecg_posttrain.synthetic import make_taxonomy, write_ptbxl_like

PTBXL_ROOT = os.environ.get("PTBXL_ROOT")


@contextlib.contextmanager
def criterion(n: int, title: str):
    """Record PASS/FAIL/SKIP for criterion ``n``; ``notes`` collects the measured values."""
    notes: list[str] = []
    parts = conftest.ACCEPTANCE.setdefault(n, (title, []))[1]
    try:
        yield notes
    except pytest.skip.Exception as exc:
        parts.append(("SKIP", f"skipped ({exc.msg})"))
        raise
    except BaseException as exc:
        parts.append(("FAIL", ", ".join(notes + [f"{type(exc).__name__}: {str(exc).splitlines()[0][:120]}"])))
        raise
    parts.append(("PASS", ", ".join(notes)))
    print(f"criterion {n}: PASS {', '.join(notes)}")


def _skip_unless_ptbxl():
    if not PTBXL_ROOT:
        pytest.skip("PTBXL_ROOT not set")


def test_criterion_01_gradient_oracle():
    with criterion(1, "finite-difference gradient oracle") as notes:
        t0 = time.perf_counter()
        torch.manual_seed(0)
        m = build_model(tiny_config(), seed=1, dtype=torch.float64)
        assert len(m.blocks) == 2 and all(b.conv2.out_channels == 8 for b in m.blocks)
        with torch.no_grad():
            for name, p in m.named_parameters():
                if "norm" in name:
                    p.add_(0.1 * torch.randn_like(p))
        x = torch.randn(2, 12, 32, dtype=torch.float64)
        y = torch.tensor([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64)
        worst = finite_difference_check(m, x, y, seed=0, h=1e-5)
        elapsed = time.perf_counter() - t0
        name, err = max(worst.items(), key=lambda kv: kv[1])
        notes += [f"{len(worst)} tensors", f"max rel err {err:.2e} ({name})", f"{elapsed:.1f}s"]
        assert set(worst) == {n for n, _ in m.named_parameters()}
        assert err < 1e-4
        assert elapsed < 60


def test_criterion_02_mask_statistics():
    with criterion(2, "drop-path mask statistics") as notes:
        t0 = time.perf_counter()
        g = torch.Generator().manual_seed(2024)
        for rate in (0.1, 0.5, 0.9):
            _, r = draw_mask(100_000, rate, g)
            keep, scaled = r.mean().item(), (r / (1 - rate)).mean().item()
            notes.append(f"lambda={rate}: P(r=1)={keep:.4f}, mean scaled={scaled:.4f}")
            assert abs(keep - (1 - rate)) <= 0.01
            assert abs(scaled - 1) <= 0.02
        elapsed = time.perf_counter() - t0
        notes.append(f"{elapsed:.2f}s")
        assert elapsed < 10


def test_criterion_03_mode_equivalence():
    with criterion(3, "train/infer equivalence at lambda=p=0") as notes:
        cfg = ModelConfig()
        model = build_model(cfg, seed=0)
        g = torch.Generator().manual_seed(3)
        x = torch.randn(100, cfg.in_leads, 1000, generator=g)
        with torch.no_grad():
            model.train()
            train = torch.cat([model(x[i:i + 25], MaskRng(i)) for i in range(0, 100, 25)])
            model.eval()
            infer = torch.cat([model(x[i:i + 25]) for i in range(0, 100, 25)])
        rel = ((train - infer).abs() / infer.abs().clamp_min(1e-30)).max().item()
        notes.append(f"100 inputs x {cfg.n_classes} logits, max rel diff {rel:.1e}")
        torch.testing.assert_close(train, infer, rtol=1e-6, atol=0)


def test_criterion_04_metric_oracles():
    with criterion(4, "AUROC/AUPRC against brute-force oracles") as notes:
        worst_roc = worst_ap = 0.0
        n_inst = undefined = 0
        for s, y in random_instances(200, seed=4):
            n_inst += 1
            for lib, ref, kind in ((auroc, brute_auroc, "roc"), (auprc, brute_ap, "ap")):
                a, b = lib(s, y), ref(s, y)
                if math.isnan(b):
                    assert math.isnan(a)
                    undefined += 1
                    continue
                err = abs(a - b)
                assert err <= 1e-12
                if kind == "roc":
                    worst_roc = max(worst_roc, err)
                else:
                    worst_ap = max(worst_ap, err)
        s, y = [0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]
        notes += [f"{n_inst} instances ({undefined} undefined checks)",
                  f"max err auroc {worst_roc:.1e} auprc {worst_ap:.1e}",
                  f"anchors {auroc(s, y)} / {auprc(s, y):.4f}"]
        assert auroc(s, y) == 0.75
        assert auprc(s, y) == (1 + 2 / 3) / 2


def test_criterion_05_scheduler_closed_forms():
    with criterion(5, "cosine and plateau closed forms") as notes:
        sched = CosineSchedule(5e-4, 1e-5, 30)
        start, end, mid = cosine_lr(sched, 0), cosine_lr(sched, 30), cosine_lr(sched, 15)
        notes.append(f"cosine {start} -> {end}, midpoint {mid!r}")
        assert start == 5e-4 and end == 1e-5
        assert abs(mid - 2.55e-4) <= 1e-12
        # one best epoch then a flat metric: ten stale epochs use up the patience,
        # the next stale epoch multiplies the lr by exactly 0.1
        s, lr, lrs = PlateauSchedule(0.1, 10), 1.0, []
        for m in [0.9] * 12:
            s, lr = plateau_step(s, m, lr)
            lrs.append(lr)
        assert lrs[:11] == [1.0] * 11 and lrs[11] == 0.1
        notes.append("reduction x0.1 once patience of 10 stale epochs is exceeded")
        for seq in ([0.1 * i for i in range(40)], [0.5, 0.4, 0.6, 0.5, 0.7, 0.6, 0.8, 0.7, 0.9],
                    [0.5] + [0.4] * 10 + [0.6] + [0.4] * 10):
            s, lr = PlateauSchedule(0.1, 10), 1.0
            for m in seq:
                s, lr = plateau_step(s, m, lr)
                assert lr == 1.0
        notes.append("no reduction on improving, alternating or 10-stale-then-improve sequences")


def test_criterion_06_freeze_contract():
    with criterion(6, "Stage A freeze contract on the micro-fixture") as notes:
        data = prepare_inputs(separable_fixture())
        model = build_model(micro_config(n_classes=2), seed=0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        model, res = run_stage_a(model, data, stage_a_plan())
        after = model.state_dict()
        frozen = [k for k in before if not k.startswith("head.")]
        changed = [k for k in frozen if not torch.equal(before[k], after[k])]
        notes += [f"{len(frozen)} backbone tensors, {len(changed)} changed",
                  f"val macro AUROC {res.selected_val_auroc} at epoch {res.selected_epoch}/{len(res.logs)}"]
        assert not changed
        assert res.selected_val_auroc == 1.0 and len(res.logs) <= 30


def _micro_manifest(path: Path, cache: Path, **kw) -> Path:
    plan = dict(model=tiny_config().to_dict(), n_bootstrap=100,
                stage_a=asdict(stage_a_plan(epochs=2, batch_size=32)),
                stage_b=asdict(stage_b_plan(epochs=3, batch_size=32)),
                baseline=asdict(baseline_plan(epochs=3, batch_size=32)))
    d = dict(experiment_id="acceptance", cache=str(cache), plan=plan, seeds=[0, 1])
    d.update(kw)
    path.write_text(json.dumps(d))
    return path


@pytest.fixture(scope="module")
def micro_cache(tmp_path_factory):
    base = tmp_path_factory.mktemp("acc")
    root = write_ptbxl_like(base / "raw", n_records=150, seconds=1.28, seed=21,
                            taxonomy=make_taxonomy(6, 3, 2, 3))
    assert cli.main(["ingest", "--root", str(root), "--task", "all_71", "--out", str(base / "cache")]) == 0
    return base / "cache"


def test_criterion_07_determinism(micro_cache, tmp_path):
    with criterion(7, "byte-identical compare reruns") as notes:
        cfg = _micro_manifest(tmp_path / "m.json", micro_cache)
        for name in ("a", "b"):
            assert cli.main(["compare", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        a_root = tmp_path / "a" / "compare"
        files = sorted(p.relative_to(a_root) for p in a_root.rglob("*")
                       if p.name in ("epochs.csv", "result.json") or p.suffix == ".svg")
        assert sum(f.name == "epochs.csv" for f in files) == 4
        assert any(f.suffix == ".svg" for f in files)
        diff = [str(f) for f in files if (a_root / f).read_bytes() != (tmp_path / "b" / "compare" / f).read_bytes()]
        notes.append(f"{len(files)} files compared, {len(diff)} differ")
        assert not diff, diff


@pytest.mark.slow
@pytest.mark.ptbxl
def test_criterion_08_directional_ptbxl(tmp_path):
    with criterion(8, "post-training beats baseline on PTB-XL all-71 at 20% (median of 3 seeds)") as notes:
        _skip_unless_ptbxl()
        cache = tmp_path / "cache"
        assert cli.main(["ingest", "--root", PTBXL_ROOT, "--task", "all_71", "--sampling-rate", "100",
                         "--out", str(cache)]) == 0
        plan = dict(init="random", stage_a=asdict(stage_a_plan(epochs=10)),
                    stage_b=asdict(stage_b_plan(epochs=10)), baseline=asdict(baseline_plan(epochs=10)))
        man = ExperimentManifest(experiment_id="directional", cache=str(cache), task="all_71", plan=plan,
                                 seeds=[0, 1, 2], fractions=[0.2], output_dir=str(tmp_path / "out"),
                                 workers=int(os.environ.get("ACCEPTANCE_WORKERS", os.cpu_count() or 1)))
        rows = harness.run_subsample_sweep(man)
        med = {r: statistics.median(x["macro_auroc"] for x in rows if x["recipe"] == r)
               for r in ("baseline", "posttrain")}
        delta = med["posttrain"] - med["baseline"]
        notes.append(f"median test AUROC posttrain {med['posttrain']:.4f} baseline {med['baseline']:.4f} "
                     f"delta {delta:+.4f}")
        assert delta > 0.005


def _flat(d, prefix=""):
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


TABLE_LAYOUT = [
    ("Baseline Strategy", "random initialization"), ("Baseline Strategy", "pre-training"),
    ("Proposed Strategy", "random initialization"), ("Proposed Strategy", "without droppath"),
    ("Proposed Strategy", "without linear probing"), ("Proposed Strategy", "without dropout"),
    ("Proposed Strategy", "without cosine schedule"), ("Proposed Strategy", "all components"),
]


def test_criterion_09_ablation_mechanics(micro_cache, tmp_path):
    with criterion(9, "ablation flags toggle exactly their mechanism") as notes:
        cfg = _micro_manifest(tmp_path / "m.json", micro_cache, seeds=[0])
        assert cli.main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        out = tmp_path / "o" / "ablation"
        with open(out / "ablation.csv", newline="") as fh:
            table = list(csv.DictReader(fh))
        assert [(r["method"], r["setting"]) for r in table] == TABLE_LAYOUT
        assert {"val_auroc", "val_auprc", "test_auroc", "test_auprc"} <= set(table[0])
        runs = {c[0]: out / c[0] / "seed0" for c in ABLATION_CELLS}
        plans = {k: _flat(json.loads((p / "plan.json").read_text())) for k, p in runs.items()}
        counters = {k: json.loads((p / "result.json").read_text())["counters"] for k, p in runs.items()}

        def diff(a, b):
            return {k for k in set(a) | set(b) if a.get(k) != b.get(k)}

        ref_plan, ref_c = plans["all_components"], counters["all_components"]
        assert ref_plan["stage_b.drop_path_rate"] == 0.5 and ref_plan["stage_b.dropout_rate"] == 0.05
        assert ref_c["model_drop_path"] > 0 and ref_c["model_dropout"] > 0 and ref_c["stage_a_steps"] > 0
        expected = {
            "no_droppath": ({"use_drop_path", "stage_b.drop_path_rate"}, {"model_drop_path"}),
            "no_dropout": ({"use_dropout", "stage_b.dropout_rate"}, {"model_dropout"}),
            "no_linear_probing": ({"use_stage_a"}, {"stage_a_steps", "stage_a_plateau_epochs"}),
            "no_cosine": ({"use_cosine", "stage_b.schedule"},
                          {"finetune_cosine_epochs", "finetune_constant_epochs"}),
        }
        for cell, (plan_keys, counter_keys) in expected.items():
            assert diff(ref_plan, plans[cell]) == plan_keys, cell
            assert diff(ref_c, counters[cell]) == counter_keys, cell
        assert plans["no_droppath"]["stage_b.drop_path_rate"] == 0.0
        assert counters["no_droppath"].get("model_drop_path", 0) == 0
        assert counters["no_dropout"].get("model_dropout", 0) == 0
        assert "stage_a_steps" not in counters["no_linear_probing"]
        assert plans["no_cosine"]["stage_b.schedule"] == "constant"
        notes += ["8-row table in reference layout",
                  "each flag changes only its plan field and its counter"]


def test_criterion_10a_wfdb_fixture():
    with criterion(10, "ingestion counts and WFDB fixture decode") as notes:
        h = parse_wfdb_header("r1 2 100 1000\nr1.dat 16 1000/mV 0 I\nr1.dat 16 1000/mV 0 II")
        assert (h.n_signals, h.sampling_rate, h.n_samples) == (2, 100.0, 1000)
        assert [s.gain for s in h.signals] == [1000.0] * 2 and [s.baseline for s in h.signals] == [0, 0]
        one = RecordHeader("r", 1, 100.0, 1, (SignalSpec("r.dat", 16, 1000.0, 0, "mV", "I"),))
        for raw, mv, missing in ((b"\x00\x00", 0.0, False), (b"\xe8\x03", 1.0, False), (b"\x00\x80", 0.0, True)):
            rec = decode_format16(raw, one)
            assert rec.samples[0, 0] == mv and bool(rec.missing_mask[0, 0]) is missing
        rng = np.random.default_rng(10)
        data = rng.integers(-32767, 32768, size=2 * 1000, dtype=np.int16).astype("<i2").tobytes()
        rec = decode_format16(data, h)
        assert rec.samples.tolist() == _one_off_decode(data, 2, [1000, 1000], [0, 0])
        notes.append("header fields, 3 hand-decoded byte cases and 2000 random samples match exactly")


@pytest.mark.ptbxl
def test_criterion_10b_ptbxl_counts():
    with criterion(10, "ingestion counts and WFDB fixture decode") as notes:
        _skip_unless_ptbxl()
        for task, k in EXPECTED_CLASS_COUNTS.items():
            ds = load_ptbxl(PTBXL_ROOT, task, with_signals=False)
            sizes = ds.split_sizes()
            n = sum(sizes.values())
            ratios = [sizes[s] / n for s in ("train", "val", "test")]
            notes.append(f"{task}: {ds.n_classes} classes, split {ratios[0]:.3f}/{ratios[1]:.3f}/{ratios[2]:.3f}")
            assert ds.n_classes == k
            for got, want in zip(ratios, (0.8, 0.1, 0.1)):
                assert abs(got - want) <= 0.02
