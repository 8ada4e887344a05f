"""Patient-level scoring, ROC/AUC, and results reporting."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import DuplicatePatient, EmptyFrameSet, IoError, MissingFold, SingleClass

MODALITY_ROWS = ("C", "B", "S", "C*B", "C*S", "B*S", "C*B*S")
VARIANT_COLS = ("baseline", "sex", "attention", "sex_attention")


@dataclass(frozen=True)
class ScoredPatient:
    patient_id: str
    score: float   # positive-class probability in [0, 1]
    label: str     # 'positive' | 'negative'


def aggregate_patient_scores(patient_id: str, frame_probs, label: str) -> ScoredPatient:
    """Collapse per-frame positive-class probabilities to one patient score
    by arithmetic mean."""
    frame_probs = np.asarray(frame_probs, dtype=np.float64)
    if frame_probs.size == 0:
        raise EmptyFrameSet(f"patient {patient_id!r} has no frame scores")
    return ScoredPatient(patient_id=patient_id, score=float(frame_probs.mean()), label=label)


def roc_auc(scored: list[ScoredPatient]) -> float:
    """Mann-Whitney AUC via tie-averaged rank sums, O(n log n).

    Equals brute-force pair counting (ties get half credit) exactly: the rank
    sum numerator is a sum of half-integers, which is exact in double
    precision at any realistic n.
    """
    scores = np.array([s.score for s in scored], dtype=np.float64)
    pos = np.array([s.label == "positive" for s in scored])
    n_pos = int(pos.sum())
    n_neg = len(scored) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs at least one positive and one negative patient")
    ranks = rankdata(scores, method="average")
    rank_sum = ranks[pos].sum()
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pooled_validation_auc(fold_scores: list[list[ScoredPatient]]) -> float:
    """Concatenate the five folds' validation scores and compute one AUC.

    Each training-partition patient must appear in exactly one fold.
    """
    if len(fold_scores) != 5:
        raise MissingFold(f"expected 5 folds, got {len(fold_scores)}")
    pooled = []
    seen = set()
    for fold in fold_scores:
        for s in fold:
            if s.patient_id in seen:
                raise DuplicatePatient(f"patient {s.patient_id!r} scored in two folds")
            seen.add(s.patient_id)
            pooled.append(s)
    return roc_auc(pooled)


def fold_averaged_auc(fold_scores: list[list[ScoredPatient]]) -> float:
    """Mean of per-fold AUCs (alternative pooling rule, off by default)."""
    if len(fold_scores) != 5:
        raise MissingFold(f"expected 5 folds, got {len(fold_scores)}")
    return float(np.mean([roc_auc(fold) for fold in fold_scores]))


class ResultsTable:
    """AUC percentages keyed by (modality row, variant, set); unknown cells
    render as '--' like unreported entries."""

    def __init__(self):
        self.cells: dict[tuple[str, str, str], float] = {}

    def set(self, modalities: str, variant: str, subset: str, auc: float):
        if not 0.0 <= auc <= 1.0:
            raise ValueError(f"AUC must be in [0,1], got {auc}")
        self.cells[(modalities, variant, subset)] = auc

    def get(self, modalities: str, variant: str, subset: str) -> float | None:
        return self.cells.get((modalities, variant, subset))


def modality_row_key(modalities) -> str:
    return "*".join(modalities)


def write_report(table: ResultsTable, csv_path: str) -> str:
    """Emit results.csv (modalities,variant,set,auc_percent) with 4 decimals."""
    try:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["modalities", "variant", "set", "auc_percent"])
            for (mods, variant, subset), auc in sorted(table.cells.items()):
                writer.writerow([mods, variant, subset, f"{100.0 * auc:.4f}"])
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return csv_path


def parse_report(csv_path: str) -> ResultsTable:
    table = ResultsTable()
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            table.set(row["modalities"], row["variant"], row["set"],
                      float(row["auc_percent"]) / 100.0)
    return table


def format_table(table: ResultsTable) -> str:
    """Human-readable table: one block per modality combination, columns for
    the four model variants, validation and test rows."""
    headers = ["Sound types", "Set", "Baseline", "Sex", "C. Att.", "Sex & C. Att."]
    lines = ["  ".join(f"{h:>14}" for h in headers)]
    for mods in MODALITY_ROWS:
        for subset in ("val", "test"):
            cells = []
            any_value = False
            for variant in VARIANT_COLS:
                auc = table.get(mods, variant, subset)
                if auc is None:
                    cells.append("--")
                else:
                    cells.append(f"{100.0 * auc:.2f}")
                    any_value = True
            if any_value:
                row = [mods, subset.capitalize() + "."] + cells
                lines.append("  ".join(f"{c:>14}" for c in row))
    return "\n".join(lines) + "\n"
