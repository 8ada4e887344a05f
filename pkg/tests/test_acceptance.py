"""Acceptance gate: ten criteria, one printed PASS/FAIL line each.

Each test prints exactly one line of the form

    criterion  N <description>: PASS|FAIL

and fails the normal pytest way when the criterion is not met. Criteria
involving training are seeded and deterministic.
"""

import dataclasses
import gc
import hashlib
import io
import math
import os
import statistics
import sys
import time

import numpy as np
import pytest

from respifuse import cli
from respifuse.dsp import (
    FRAME_LEN,
    N_FREQ_BINS,
    N_STFT_COLS,
    TARGET_RATE,
    frame_signal,
    log_frequency_spectrogram,
    stft_magnitude,
)
from respifuse.evaluation import ScoredPatient, roc_auc
from respifuse.ingest import AudioClip, generate_synthetic_dataset, parse_manifest
from respifuse.model import (
    CLASSIFIER_INPUT_LEN,
    FEATURE_DIM,
    ContextualAttention,
    ModelConfig,
    OuterFusion,
)
from respifuse.pipeline import load_dataset, preprocess_manifest
from respifuse.train import (
    TrainingRun,
    average_epochs,
    balance_training_set,
    run_cross_validation,
    score_patients,
    simulate_early_stopping,
    train_final,
)


def _report(num: int, desc: str, ok: bool, detail: str = ""):
    line = f"criterion {num:2d} {desc}: {'PASS' if ok else 'FAIL'}"
    if detail:
        line += f"  [{detail}]"
    print(line, file=sys.stderr)
    assert ok, line


# --- criterion 1: published-number reproduction is out of reach; the blind
# scoring workflow (scores without labels) must still work ---------------------

def test_criterion_01_blind_test_workflow(tmp_path, capsys):
    manifest = generate_synthetic_dataset(12, 21, tmp_path / "d",
                                          test_fraction=0.1666667)
    records = parse_manifest(manifest)
    # blind the test labels, as a held-out challenge set would be
    blinded = [dataclasses.replace(r, label="unknown")
               if r.partition == "test" else r for r in records]
    from respifuse.ingest import write_manifest
    blind_manifest = write_manifest(blinded, tmp_path / "d" / "manifest.csv")
    cache = str(tmp_path / "cache")
    preprocess_manifest(parse_manifest(blind_manifest), cache)
    run_dir = str(tmp_path / "run")
    ds = load_dataset([r for r in blinded if r.partition == "train"], cache, ("B",))
    run_cross_validation(ModelConfig(("B",), seed=0), ds, run_dir,
                         max_epochs=1, batch_size=8)
    code = cli.main(["eval", "--run-dir", run_dir, "--manifest", str(blind_manifest),
                     "--cache", cache, "--set", "test"])
    out = capsys.readouterr().out
    ok = code == 0 and "AUC skipped" in out and \
        sum(1 for l in out.splitlines() if l.startswith("p") and "," in l) == 2
    _report(1, "blind test sets yield scores, no AUC claims", ok)


# --- criterion 2: gradient integrity --------------------------------------

def test_criterion_02_gradcheck():
    buf = io.StringIO()
    t0 = time.time()
    ok = cli.run_gradcheck(stream=buf)
    elapsed = time.time() - t0
    ok = ok and elapsed < 60.0
    _report(2, "all layer + full-stack gradient checks < tol in < 60 s",
            ok, f"{elapsed:.1f} s")


# --- criterion 3: fusion algebra ------------------------------------------

def test_criterion_03_fusion_algebra():
    rng = np.random.default_rng(303)
    n = 1000
    fc = rng.standard_normal((n, FEATURE_DIM))
    fb = rng.standard_normal((n, FEATURE_DIM))
    fs = rng.standard_normal((n, FEATURE_DIM))
    fusion = OuterFusion()
    cube = fusion.forward([fc, fb, fs]).reshape(n, 17, 17, 17)
    ok = (
        np.array_equal(cube[:, :16, 16, 16], fc)
        and np.array_equal(cube[:, 16, :16, 16], fb)
        and np.array_equal(cube[:, 16, 16, :16], fs)
        and np.all(cube[:, 16, 16, 16] == 1.0)
    )
    # length table
    pair = fusion.forward([fc[:2], fb[:2]])
    ok = ok and pair.shape[1] == CLASSIFIER_INPUT_LEN[2] == 289
    ok = ok and cube.reshape(n, -1).shape[1] == CLASSIFIER_INPUT_LEN[3] == 4913
    ok = ok and CLASSIFIER_INPUT_LEN[1] == 16
    # multilinearity, exact: integer-valued vectors, power-of-two scalars
    ia = rng.integers(-8, 9, (n, FEATURE_DIM)).astype(np.float64)
    ib = rng.integers(-8, 9, (n, FEATURE_DIM)).astype(np.float64)
    ic = rng.integers(-8, 9, (n, FEATURE_DIM)).astype(np.float64)
    base = fusion.forward([ia, ib, ic])
    for k, scaled_args in enumerate(([2.0 * ia, ib, ic],
                                     [ia, 2.0 * ib, ic],
                                     [ia, ib, 2.0 * ic])):
        scaled = fusion.forward(scaled_args)
        zero_args = [np.zeros_like(ia) if i == k else a
                     for i, a in enumerate([ia, ib, ic])]
        fixed = fusion.forward(zero_args)  # augmentation plane, constant in arg k
        ok = ok and np.array_equal(scaled - fixed, 2.0 * (base - fixed))
        # additivity in argument k
        sum_args = [a + a if i == k else a for i, a in enumerate([ia, ib, ic])]
        summed = fusion.forward(sum_args)
        ok = ok and np.array_equal(summed - fixed, 2.0 * (base - fixed))
    _report(3, "fusion edges/corner/lengths/multilinearity exact on 1000 draws", ok)


# --- criterion 4: attention contract --------------------------------------

def test_criterion_04_attention_contract():
    rng = np.random.default_rng(404)
    ok = True
    for i in range(1000):
        att = ContextualAttention(np.random.default_rng(i), dtype=np.float64)
        f = rng.standard_normal((2, FEATURE_DIM))
        alpha = att.attention_weights(f)
        ok = ok and np.all(alpha >= 0.0)
        ok = ok and np.all(np.abs(alpha.sum(axis=1) - 1.0) <= 1e-12)
        att.u_c.data[:] = 0.0
        out = att.forward(f)
        ok = ok and np.array_equal(out, f / 16.0)
        if not ok:
            break
    _report(4, "attention weights valid and u_c=0 uniform on 1000 draws", ok)


# --- criterion 5: AUC oracle equivalence ----------------------------------

def _brute_auc(scores, labels):
    pos = scores[labels]
    neg = scores[~labels]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def test_criterion_05_auc_oracle():
    rng = np.random.default_rng(505)
    ok = True
    for _ in range(500):
        n = int(rng.integers(2, 201))
        labels = rng.random(n) < rng.uniform(0.2, 0.8)
        if labels.all() or not labels.any():
            labels[0] = True
            labels[1 % n] = False
        # dyadic quantization: ties are plentiful and monotone transforms exact
        scores = rng.integers(0, 33, n) / 32.0
        scored = [ScoredPatient(f"p{i}", s, "positive" if l else "negative")
                  for i, (s, l) in enumerate(zip(scores, labels))]
        auc = roc_auc(scored)
        ok = ok and auc == _brute_auc(scores, labels)
        affine = [ScoredPatient(s.patient_id, 2.0 * s.score + 1.0, s.label)
                  for s in scored]
        cubed = [ScoredPatient(s.patient_id, s.score ** 3, s.label) for s in scored]
        ok = ok and roc_auc(affine) == auc and roc_auc(cubed) == auc
        if not ok:
            break
    _report(5, "rank AUC == brute force and monotone-invariant on 500 instances", ok)


# --- criterion 6: overfit check -------------------------------------------

def test_criterion_06_overfit(small_dataset):
    manifest, cache, records = small_dataset
    train = [r for r in records if r.partition == "train"]
    ok = True
    details = []
    for mod in ("C", "B", "S"):
        ds = load_dataset(train, cache, (mod,))
        cfg = ModelConfig((mod,), seed=6)
        t0 = time.time()
        reached = None
        for epochs in range(1, 101):
            model = train_final(cfg, ds, epochs=epochs, batch_size=8)
            scores = score_patients(model, ds, [r.patient_id for r in train],
                                    batch_size=8)
            scored = [ScoredPatient(pid, s, ds[pid].record.label)
                      for pid, s in scores.items()]
            del model
            gc.collect()
            if roc_auc(scored) == 1.0:
                reached = epochs
                break
            if time.time() - t0 > 110.0:
                break
        elapsed = time.time() - t0
        details.append(f"{mod}:{reached}ep/{elapsed:.0f}s")
        ok = ok and reached is not None and elapsed < 120.0
        del ds
        gc.collect()
    _report(6, "mono models reach train AUC 1.0 in <=100 epochs, <2 min each",
            ok, " ".join(details))


# --- criterion 7: fusion benefit at desk scale -----------------------------

def test_criterion_07_fusion_benefit(tmp_path):
    t0 = time.time()
    manifest = generate_synthetic_dataset(
        60, 11, tmp_path / "d", snr_db={"breath": -3.0, "speech": -3.0})
    records = [r for r in parse_manifest(manifest) if r.partition == "train"]
    cache = str(tmp_path / "cache")
    preprocess_manifest(records, cache)
    aucs = {"B": [], "S": [], "BS": []}
    for seed in (1, 2, 3):
        for key, mods in (("B", ("B",)), ("S", ("S",)), ("BS", ("B", "S"))):
            ds = load_dataset(records, cache, mods)
            summary = run_cross_validation(
                ModelConfig(mods, seed=seed), ds,
                str(tmp_path / f"run_{key}_{seed}"),
                max_epochs=1, batch_size=16, lr=3e-3)
            aucs[key].append(summary["pooled_validation_auc"])
            del ds
            gc.collect()
    med = {k: statistics.median(v) for k, v in aucs.items()}
    elapsed = time.time() - t0
    ok = (med["BS"] >= 0.90
          and med["BS"] >= max(med["B"], med["S"]) - 0.02
          and elapsed < 900.0)
    _report(7, "B(x)S pooled val AUC >= 0.90 and >= max mono - 0.02 in < 15 min",
            ok, f"B={med['B']:.3f} S={med['S']:.3f} BS={med['BS']:.3f} "
            f"{elapsed:.0f}s")


# --- criterion 8: training-protocol conformance ----------------------------

def test_criterion_08_training_protocol():
    rng = np.random.default_rng(808)
    ok = True
    # early stopping vs direct simulation, 1000 random sequences
    for _ in range(1000):
        n = int(rng.integers(1, 130))
        losses = list(np.round(rng.random(n), 2))  # coarse grid forces plateaus
        got = simulate_early_stopping(losses, patience=15, max_epochs=100)
        best_val, best_e, since, stop = math.inf, 0, 0, min(n, 100)
        for e, l in enumerate(losses[:100], start=1):
            if l < best_val:
                best_val, best_e, since = l, e, 0
            else:
                since += 1
            if since >= 15:
                stop = e
                break
        ok = ok and got == (best_e, stop)
        if not ok:
            break
    # the patience bound itself: stop == best + 15 whenever patience triggers
    ok = ok and simulate_early_stopping([0.5] + [0.6] * 50) == (1, 16)

    # average_epochs == ceil(mean): the value depends only on the tuple's sum,
    # so exhausting all attainable sums (5..500) plus random tuples covers
    # every 5-tuple with entries in 1..100
    def runs_for(tup):
        return [TrainingRun(fold_id=i, best_epoch=b) for i, b in enumerate(tup)]

    for s in range(5, 501):
        base, extra = divmod(s - 5, 5)
        tup = [1 + base + (1 if i < extra else 0) for i in range(5)]
        assert sum(tup) == s
        ok = ok and average_epochs(runs_for(tup)) == math.ceil(s / 5.0)
    for _ in range(1000):
        tup = rng.integers(1, 101, 5)
        ok = ok and average_epochs(runs_for(tup)) == math.ceil(tup.sum() / 5.0)

    # replication balancing: exact equality for every (P, N), 1 <= P <= N <= 1000
    for n in range(1, 1001):
        labels_n = [0] * n
        for p in range(1, n + 1):
            out = balance_training_set(list(range(p + n)), [1] * p + labels_n)
            if len(out.entries) != 2 * n:
                ok = False
                break
            if p in (1, n // 2, n):  # spot-check composition on the edges
                pos = sum(1 for e in out.entries if e < p)
                if pos != n:
                    ok = False
                    break
        if not ok:
            break
    _report(8, "early stopping, epoch-mean rule, and balancing conform", ok)


# --- criterion 9: DSP conformance -----------------------------------------

def test_criterion_09_dsp_conformance(tmp_path):
    t = np.arange(12 * TARGET_RATE) / TARGET_RATE
    clip = AudioClip(0.5 * np.sin(2 * np.pi * 1000.0 * t), TARGET_RATE)
    frames = frame_signal(clip)
    ok = len(frames) == 4
    rows = []
    for frame in frames:
        mag = stft_magnitude(frame)
        ok = ok and mag.shape == (N_FREQ_BINS, N_STFT_COLS)
        ok = ok and np.all(np.argmax(mag, axis=0) == 256)
        grid = log_frequency_spectrogram(mag)
        rows.append(int(np.median(np.argmax(grid, axis=0))))
    ok = ok and all(abs(r - 83) <= 1 for r in rows)

    # bit determinism across runs and worker counts
    manifest = generate_synthetic_dataset(4, 9, tmp_path / "d")
    records = parse_manifest(manifest)

    def cache_digest(workers, tag):
        cache = str(tmp_path / f"cache_{tag}")
        preprocess_manifest(records, cache, workers=workers)
        h = hashlib.sha256()
        for root, _, files in sorted(os.walk(cache)):
            for name in sorted(files):
                rel = os.path.relpath(os.path.join(root, name), cache)
                h.update(rel.encode())
                h.update(open(os.path.join(root, name), "rb").read())
        return h.hexdigest()

    d1 = cache_digest(1, "a")
    d2 = cache_digest(1, "b")
    d3 = cache_digest(2, "c")
    ok = ok and d1 == d2 == d3
    _report(9, "STFT shape/sine bin/log row and bit determinism", ok,
            f"rows={sorted(set(rows))}")


# --- criterion 10: end-to-end determinism ----------------------------------

def test_criterion_10_end_to_end_determinism(tmp_path):
    def pipeline(tag):
        base = tmp_path / tag
        data = str(base / "data")
        cache = str(base / "cache")
        run = str(base / "run")
        for argv in (
            ["synth", "--patients", "12", "--seed", "4", "--out", data,
             "--test-fraction", "0.1666667"],
            ["preprocess", "--manifest", f"{data}/manifest.csv", "--cache", cache],
            ["train", "--manifest", f"{data}/manifest.csv", "--cache", cache,
             "--run-dir", run, "--modalities", "B", "--seed", "4",
             "--epochs", "1"],
            ["eval", "--run-dir", run, "--manifest", f"{data}/manifest.csv",
             "--cache", cache, "--set", "val"],
            ["eval", "--run-dir", run, "--manifest", f"{data}/manifest.csv",
             "--cache", cache, "--set", "test"],
        ):
            assert cli.main(argv) == 0, f"{argv[0]} failed"
        digests = {}
        for root, _, files in sorted(os.walk(run)):
            for name in sorted(files):
                path = os.path.join(root, name)
                rel = os.path.relpath(path, run)
                digests[rel] = hashlib.sha256(open(path, "rb").read()).hexdigest()
        return digests

    a = pipeline("a")
    gc.collect()
    b = pipeline("b")
    checkpoints = [k for k in a if k.endswith(".rfus")]
    ok = (a == b and len(checkpoints) == 6 and "results.csv" in a)
    _report(10, "synth->preprocess->train->eval twice is byte-identical", ok)
