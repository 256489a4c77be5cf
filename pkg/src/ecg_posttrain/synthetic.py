"""Synthetic PTB-XL-layout datasets for tests, smoke runs and the CLI demo.

Records are WFDB format-16 files with class-dependent oscillations, so a
small CNN can learn the labels. Codes are placeholders, not real SCP codes.
"""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .ingest.wfdb import write_record

LEADS = ("I", "II", "III", "AVR", "AVL", "AVF", "V1", "V2", "V3", "V4", "V5", "V6")
LIKELIHOODS = (0.0, 15.0, 35.0, 50.0, 80.0, 100.0)


def make_taxonomy(n_diagnostic=44, n_subclasses=23, n_form=15, n_rhythm=12):
    """Rows for ``scp_statements.csv``: (code, diagnostic, form, rhythm, subclass)."""
    rows = []
    for i in range(n_diagnostic):
        rows.append((f"D{i:02d}", 1, 1 if i < 4 else 0, 0, f"SUB{i % n_subclasses:02d}"))
    for i in range(n_form):
        rows.append((f"F{i:02d}", 0, 1, 0, ""))
    for i in range(n_rhythm):
        rows.append((f"R{i:02d}", 0, 0, 1, ""))
    return rows


def write_ptbxl_like(root, n_records=200, fs=100, seconds=2.5, seed=0, taxonomy=None,
                     noise=0.05, n_leads=12):
    """Write a PTB-XL-shaped directory tree and return its root path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows = taxonomy if taxonomy is not None else make_taxonomy()
    codes = [r[0] for r in rows]
    diag = [r[0] for r in rows if r[1]]
    rhythm = [r[0] for r in rows if r[3]]
    other = [r[0] for r in rows if not r[1] and not r[3]]
    n_t = int(round(fs * seconds))
    t = np.arange(n_t) / fs

    # per-code signature: frequency, amplitude pattern over leads
    sig_freq = {c: 1.0 + 9.0 * rng.random() for c in codes}
    sig_leads = {c: rng.normal(size=n_leads) for c in codes}

    root.mkdir(parents=True, exist_ok=True)
    with (root / "scp_statements.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["", "description", "diagnostic", "form", "rhythm", "diagnostic_subclass"])
        for code, d, f, r, sub in rows:
            w.writerow([code, f"synthetic {code}", "1.0" if d else "", "1.0" if f else "",
                        "1.0" if r else "", sub])

    db_rows = []
    for i in range(n_records):
        ecg_id = i + 1
        chosen = {}
        if rhythm:
            chosen[rhythm[rng.integers(len(rhythm))]] = 0.0
        for code in rng.choice(diag, size=min(len(diag), 1 + rng.integers(2)), replace=False) if diag else []:
            chosen[str(code)] = float(LIKELIHOODS[rng.integers(len(LIKELIHOODS))])
        if other and rng.random() < 0.3:
            chosen[other[rng.integers(len(other))]] = 0.0
        x = noise * rng.normal(size=(n_leads, n_t))
        for code in chosen:
            phase = 2 * np.pi * rng.random()
            x += 0.5 * sig_leads[code][:, None] * np.sin(2 * np.pi * sig_freq[code] * t + phase)[None, :]
        adc = np.clip(np.round(x * 1000.0), -32767, 32767).astype(np.int64)
        sub = f"{(ecg_id // 1000) * 1000:05d}"
        name = f"{ecg_id:05d}_lr"
        write_record(root / "records100" / sub, name, adc, fs, 1000.0, list(LEADS[:n_leads]))
        db_rows.append({
            "ecg_id": ecg_id,
            "patient_id": float(ecg_id),
            "scp_codes": repr(chosen),
            "strat_fold": (i % 10) + 1,
            "filename_lr": f"records100/{sub}/{name}",
            "filename_hr": f"records500/{sub}/{ecg_id:05d}_hr",
        })
    with (root / "ptbxl_database.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(db_rows[0]))
        w.writeheader()
        w.writerows(db_rows)
    return root
