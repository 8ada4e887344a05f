"""ROC/AUC oracles and results-table round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from respifuse import errors
from respifuse.evaluation import (
    ResultsTable,
    ScoredPatient,
    aggregate_patient_scores,
    fold_averaged_auc,
    format_table,
    modality_row_key,
    parse_report,
    pooled_validation_auc,
    roc_auc,
    write_report,
)


def _scored(scores, labels):
    return [ScoredPatient(f"p{i}", s, l) for i, (s, l) in enumerate(zip(scores, labels))]


def _brute_force_auc(scored):
    pos = [s.score for s in scored if s.label == "positive"]
    neg = [s.score for s in scored if s.label == "negative"]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestRocAuc:
    def test_perfect_separation(self):
        scored = _scored([0.9, 0.8, 0.2, 0.1],
                         ["positive", "positive", "negative", "negative"])
        assert roc_auc(scored) == 1.0

    def test_perfectly_wrong(self):
        scored = _scored([0.1, 0.9], ["positive", "negative"])
        assert roc_auc(scored) == 0.0

    def test_all_tied_is_half(self):
        scored = _scored([0.5] * 6, ["positive", "negative"] * 3)
        assert roc_auc(scored) == 0.5

    def test_known_value(self):
        # pairs: (.7,.6)=1, (.7,.4)=1, (.3,.6)=0, (.3,.4)=0 -> AUC = 0.5
        scored = _scored([0.7, 0.3, 0.6, 0.4],
                         ["positive", "positive", "negative", "negative"])
        assert roc_auc(scored) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(errors.SingleClass):
            roc_auc(_scored([0.5, 0.6], ["positive", "positive"]))

    @given(st.lists(st.tuples(st.integers(0, 20), st.booleans()),
                    min_size=2, max_size=40))
    @settings(max_examples=100, deadline=None)
    def test_property_matches_bruteforce(self, data):
        labels = [l for _, l in data]
        if not (any(labels) and not all(labels)):
            return
        # quantized scores force plenty of ties
        scored = _scored([s / 20.0 for s, _ in data],
                         ["positive" if l else "negative" for l in labels])
        assert roc_auc(scored) == pytest.approx(_brute_force_auc(scored), abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(0)
        scores = rng.integers(0, 10, 30) / 10.0
        labels = ["positive" if b else "negative" for b in rng.random(30) < 0.4]
        if "positive" not in labels:
            labels[0] = "positive"
        if "negative" not in labels:
            labels[1] = "negative"
        base = roc_auc(_scored(scores, labels))
        affine = roc_auc(_scored(2.0 * scores + 1.0, labels))
        cubed = roc_auc(_scored(scores ** 3, labels))
        assert base == affine == cubed


class TestAggregation:
    def test_mean(self):
        s = aggregate_patient_scores("p0", [0.2, 0.4, 0.9], "positive")
        assert s.score == pytest.approx(0.5)
        assert s.label == "positive"

    def test_empty_rejected(self):
        with pytest.raises(errors.EmptyFrameSet):
            aggregate_patient_scores("p0", [], "positive")


class TestPooling:
    def _folds(self):
        return [
            _scored([0.9, 0.1], ["positive", "negative"]),
            [ScoredPatient("q0", 0.8, "positive"), ScoredPatient("q1", 0.2, "negative")],
            [ScoredPatient("r0", 0.7, "positive"), ScoredPatient("r1", 0.3, "negative")],
            [ScoredPatient("s0", 0.6, "positive"), ScoredPatient("s1", 0.4, "negative")],
            [ScoredPatient("t0", 0.55, "positive"), ScoredPatient("t1", 0.45, "negative")],
        ]

    def test_pooled_perfect(self):
        assert pooled_validation_auc(self._folds()) == 1.0

    def test_fold_averaged(self):
        assert fold_averaged_auc(self._folds()) == 1.0

    def test_duplicate_patient_rejected(self):
        folds = self._folds()
        folds[1][0] = ScoredPatient("p0", 0.8, "positive")
        with pytest.raises(errors.DuplicatePatient):
            pooled_validation_auc(folds)

    def test_wrong_fold_count(self):
        with pytest.raises(errors.MissingFold):
            pooled_validation_auc(self._folds()[:3])

    def test_pooling_differs_from_averaging(self):
        # per-fold ranking is perfect but the folds' score ranges interleave,
        # so the pooled AUC drops below the fold-averaged one
        folds = [
            _scored([0.9, 0.8], ["positive", "negative"]),
            [ScoredPatient("q0", 0.3, "positive"), ScoredPatient("q1", 0.2, "negative")],
            [ScoredPatient("r0", 0.7, "positive"), ScoredPatient("r1", 0.6, "negative")],
            [ScoredPatient("s0", 0.5, "positive"), ScoredPatient("s1", 0.4, "negative")],
            [ScoredPatient("t0", 0.95, "positive"), ScoredPatient("t1", 0.1, "negative")],
        ]
        assert fold_averaged_auc(folds) == 1.0
        assert pooled_validation_auc(folds) < 1.0


class TestResultsTable:
    def test_roundtrip(self, tmp_path):
        table = ResultsTable()
        table.set("B*S", "baseline", "val", 0.9321)
        table.set("C", "sex_attention", "test", 0.75)
        path = write_report(table, str(tmp_path / "results.csv"))
        back = parse_report(path)
        assert back.get("B*S", "baseline", "val") == pytest.approx(0.9321)
        assert back.get("C", "sex_attention", "test") == pytest.approx(0.75)
        assert back.get("C", "baseline", "val") is None

    def test_auc_validation(self):
        with pytest.raises(ValueError):
            ResultsTable().set("B", "baseline", "val", 1.5)

    def test_modality_row_key(self):
        assert modality_row_key(("C", "B", "S")) == "C*B*S"
        assert modality_row_key(("B",)) == "B"

    def test_format_table_cells(self):
        table = ResultsTable()
        table.set("B", "baseline", "val", 0.8765)
        text = format_table(table)
        assert "87.65" in text
        assert "--" in text
        assert "Sound types" in text
        # unreported modality rows are omitted entirely
        assert "C*B*S" not in text
