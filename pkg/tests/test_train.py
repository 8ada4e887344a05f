"""Fold planning, class balancing, early stopping, and the CV protocol."""

import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from respifuse import errors
from respifuse.ingest import PatientRecord
from respifuse.model import ModelConfig
from respifuse.pipeline import load_dataset
from respifuse.train import (
    balance_training_set,
    average_epochs,
    make_fold_plans,
    run_cross_validation,
    score_patients,
    simulate_early_stopping,
    train_final,
    train_fold,
    TrainingRun,
)


def _record(pid, fold, label="positive", partition="train"):
    return PatientRecord(patient_id=pid, cough_path="", breath_path="",
                         speech_path="", sex="f", label=label,
                         partition=partition, fold=fold)


class TestFoldPlans:
    def test_partition(self):
        records = [_record(f"p{i}", i % 5) for i in range(10)]
        records.append(_record("t0", None, partition="test"))
        plans = make_fold_plans(records)
        assert len(plans) == 5
        for plan in plans:
            assert len(plan.val_ids) == 2
            assert len(plan.train_ids) == 8
            assert not set(plan.val_ids) & set(plan.train_ids)
            assert "t0" not in plan.val_ids + plan.train_ids
        all_val = [pid for plan in plans for pid in plan.val_ids]
        assert sorted(all_val) == sorted(r.patient_id for r in records[:10])


class TestBalancing:
    def test_already_balanced(self):
        samples = [("a", 0), ("b", 0)]
        out = balance_training_set(samples, [0, 1])
        assert out.entries == samples

    def test_replication_counts(self):
        samples = [("p", i) for i in range(7)]
        labels = [1, 1, 0, 0, 0, 0, 0]  # 2 positive, 5 negative
        out = balance_training_set(samples, labels)
        labels_of = dict(zip(samples, labels))
        pos_count = sum(1 for e in out.entries if labels_of[e] == 1)
        neg_count = sum(1 for e in out.entries if labels_of[e] == 0)
        assert pos_count == neg_count == 5
        # originals keep their order at the front
        assert out.entries[:7] == samples

    def test_single_class_rejected(self):
        with pytest.raises(errors.SingleClass):
            balance_training_set([("a", 0)], [1])

    @given(p=st.integers(1, 60), n=st.integers(1, 60))
    @settings(max_examples=60, deadline=None)
    def test_property_exact_balance(self, p, n):
        samples = [("pos", i) for i in range(p)] + [("neg", i) for i in range(n)]
        labels = [1] * p + [0] * n
        out = balance_training_set(samples, labels)
        pos = sum(1 for s in out.entries if s[0] == "pos")
        neg = len(out.entries) - pos
        assert pos == neg == max(p, n)


class TestEarlyStopping:
    def test_monotone_decrease_never_stops(self):
        losses = [1.0 / (i + 1) for i in range(50)]
        best, stopped = simulate_early_stopping(losses, patience=15, max_epochs=100)
        assert (best, stopped) == (50, 50)

    def test_patience_triggers(self):
        losses = [0.5, 0.4] + [0.45] * 20
        best, stopped = simulate_early_stopping(losses, patience=15, max_epochs=100)
        assert (best, stopped) == (2, 17)

    def test_plateau_is_not_improvement(self):
        losses = [0.3] * 20
        best, stopped = simulate_early_stopping(losses, patience=15, max_epochs=100)
        assert (best, stopped) == (1, 16)

    def test_max_epochs_cap(self):
        losses = [1.0 / (i + 1) for i in range(200)]
        best, stopped = simulate_early_stopping(losses, patience=15, max_epochs=100)
        assert (best, stopped) == (100, 100)

    @given(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=120))
    @settings(max_examples=100, deadline=None)
    def test_property_matches_bruteforce(self, losses):
        best, stopped = simulate_early_stopping(losses, patience=15, max_epochs=100)
        capped = losses[:100]
        # brute-force reference
        ref_best, since, ref_stop = 0, 0, len(capped)
        best_val = math.inf
        for e, l in enumerate(capped, start=1):
            if l < best_val:
                best_val, ref_best, since = l, e, 0
            else:
                since += 1
            if since >= 15:
                ref_stop = e
                break
        assert (best, stopped) == (ref_best, ref_stop)


class TestAverageEpochs:
    def test_ceiling_rule(self):
        runs = [TrainingRun(fold_id=i, best_epoch=b)
                for i, b in enumerate([3, 4, 4, 5, 5])]
        assert average_epochs(runs) == math.ceil(21 / 5)

    def test_exact_mean(self):
        runs = [TrainingRun(fold_id=i, best_epoch=4) for i in range(5)]
        assert average_epochs(runs) == 4

    def test_wrong_fold_count(self):
        with pytest.raises(errors.WrongFoldCount):
            average_epochs([TrainingRun(fold_id=0, best_epoch=1)])


class TestTraining:
    def test_train_fold_deterministic(self, small_dataset):
        manifest, cache, records = small_dataset
        train = [r for r in records if r.partition == "train"]
        ds = load_dataset(train, cache, ("B",))
        plans = make_fold_plans(train)
        cfg = ModelConfig(("B",), seed=3)

        def once():
            run, model, scored = train_fold(plans[0], cfg, ds, max_epochs=2,
                                            patience=15, batch_size=8)
            return ([p.data.copy() for p in model.params()],
                    [(s.patient_id, s.score) for s in scored], run.best_epoch)

        pa, sa, ba = once()
        pb, sb, bb = once()
        assert ba == bb and sa == sb
        for x, y in zip(pa, pb):
            np.testing.assert_array_equal(x, y)

    def test_single_class_fold_rejected(self, small_dataset):
        manifest, cache, records = small_dataset
        train = [r for r in records if r.partition == "train"]
        ds = load_dataset(train, cache, ("B",))
        plan = make_fold_plans(train)[0]
        broken = plan.__class__(fold_id=plan.fold_id,
                                train_ids=plan.train_ids,
                                val_ids=tuple(pid for pid in plan.val_ids
                                              if ds[pid].record.label == "positive"))
        with pytest.raises(errors.SingleClass):
            train_fold(broken, ModelConfig(("B",)), ds, max_epochs=1)

    def test_score_patients_range_and_keys(self, small_dataset):
        manifest, cache, records = small_dataset
        train = [r for r in records if r.partition == "train"]
        ds = load_dataset(train, cache, ("B",))
        from respifuse.model import CovidModel
        model = CovidModel(ModelConfig(("B",), seed=0))
        ids = [r.patient_id for r in train[:3]]
        scores = score_patients(model, ds, ids, batch_size=8)
        assert sorted(scores) == sorted(ids)
        assert all(0.0 <= v <= 1.0 for v in scores.values())

    def test_run_cross_validation_outputs(self, split_dataset, tmp_path):
        manifest, cache, records = split_dataset
        train = [r for r in records if r.partition == "train"]
        ds = load_dataset(train, cache, ("B",))
        run_dir = str(tmp_path / "run")
        summary = run_cross_validation(ModelConfig(("B",), seed=1), ds, run_dir,
                                       max_epochs=1, batch_size=8)
        for k in range(5):
            assert os.path.exists(os.path.join(run_dir, f"fold{k}", "checkpoint.rfus"))
            assert os.path.exists(os.path.join(run_dir, f"fold{k}", "history.csv"))
        assert os.path.exists(os.path.join(run_dir, "final", "checkpoint.rfus"))
        with open(os.path.join(run_dir, "config.json")) as fh:
            stored = json.load(fh)
        assert stored["pooled_validation_auc"] == summary["pooled_validation_auc"]
        assert stored["final_epochs"] == 1
        assert 0.0 <= summary["pooled_validation_auc"] <= 1.0

    def test_train_final_epoch_validation(self, small_dataset):
        manifest, cache, records = small_dataset
        train = [r for r in records if r.partition == "train"]
        ds = load_dataset(train, cache, ("B",))
        with pytest.raises(ValueError):
            train_final(ModelConfig(("B",)), ds, epochs=0)
