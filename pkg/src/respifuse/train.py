"""5-fold cross-validation training with replication balancing, AUC-based
early stopping, and the epoch-mean rule for the final full-data model."""

from __future__ import annotations

import gc
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteLoss, SingleClass, WrongFoldCount
from .evaluation import ScoredPatient, pooled_validation_auc, roc_auc
from .model import CovidModel, ModelConfig, save_checkpoint
from .nncore import Adam, softmax_probs
from .pipeline import PatientTensors

BATCH_SIZE = 64
MAX_EPOCHS = 100
PATIENCE = 15
LEARNING_RATE = 1e-3


@dataclass(frozen=True)
class FoldPlan:
    fold_id: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]


@dataclass
class TrainingRun:
    fold_id: int
    epoch_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)  # L_AUC = 1 - AUC per epoch
    best_epoch: int = 0
    stopped_epoch: int = 0
    seed: int = 0


@dataclass
class BalancedIndex:
    entries: list[tuple[str, int]]  # (patient_id, frame_index)


def make_fold_plans(records) -> list[FoldPlan]:
    """Patient-level fold plans from the manifest's fold assignments."""
    train = sorted((r for r in records if r.partition == "train"), key=lambda r: r.patient_id)
    plans = []
    for k in range(5):
        val = tuple(r.patient_id for r in train if r.fold == k)
        tr = tuple(r.patient_id for r in train if r.fold != k)
        plans.append(FoldPlan(fold_id=k, train_ids=tr, val_ids=val))
    return plans


def balance_training_set(samples: list[tuple[str, int]], labels: list[int]) -> BalancedIndex:
    """Replicate minority-class samples until class counts match exactly.

    With P minority and N majority samples, every minority sample appears
    floor(N/P) times and the first (N mod P) of them (in sorted order) once
    more, so the minority count becomes exactly N. Original entries keep their
    order; replicas are appended.
    """
    labels = list(labels)
    pos = [s for s, l in zip(samples, labels) if l == 1]
    neg = [s for s, l in zip(samples, labels) if l == 0]
    if not pos or not neg:
        raise SingleClass("balancing needs both classes present")
    minority, n_major = (pos, len(neg)) if len(pos) <= len(neg) else (neg, len(pos))
    n_minor = len(minority)
    entries = list(samples)
    if n_minor == n_major:
        return BalancedIndex(entries=entries)
    reps, extra = divmod(n_major, n_minor)
    ordered = sorted(minority)
    for _ in range(reps - 1):
        entries.extend(ordered)
    entries.extend(ordered[:extra])
    return BalancedIndex(entries=entries)


def simulate_early_stopping(val_losses: list[float], patience: int = PATIENCE,
                            max_epochs: int = MAX_EPOCHS) -> tuple[int, int]:
    """Return (best_epoch, stopped_epoch) for a validation-loss sequence.

    Epochs are 1-based; improvement must be strict; training halts after
    ``patience`` consecutive non-improving epochs or at ``max_epochs``.
    """
    best = math.inf
    best_epoch = 0
    since_best = 0
    for epoch, loss in enumerate(val_losses[:max_epochs], start=1):
        if loss < best:
            best = loss
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= patience:
            return best_epoch, epoch
    return best_epoch, min(len(val_losses), max_epochs)


def average_epochs(runs: list[TrainingRun]) -> int:
    """Ceiling of the mean best epoch over the five folds."""
    if len(runs) != 5:
        raise WrongFoldCount(f"expected 5 fold runs, got {len(runs)}")
    return math.ceil(sum(r.best_epoch for r in runs) / 5.0)


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class _FlatData:
    """Frame tensors of a patient subset flattened for fast batch indexing."""
    X: dict[str, np.ndarray]          # modality -> (n, 3, 224, 224)
    labels: np.ndarray                # (n,) class indices
    sex: np.ndarray                   # (n,) in {0, 1}
    entries: list[tuple[str, int]]    # (patient_id, frame_index) per row
    row_of: dict[tuple[str, int], int]


def _flatten(dataset: dict[str, PatientTensors], patient_ids,
             modalities) -> _FlatData:
    X = {m: [] for m in modalities}
    labels, sex, entries = [], [], []
    for pid in sorted(patient_ids):
        p = dataset[pid]
        for m in modalities:
            X[m].append(p.frames[m])
        labels.extend([p.label_index] * p.n_frames)
        sex.extend([p.sex_value] * p.n_frames)
        entries.extend((pid, i) for i in range(p.n_frames))
    return _FlatData(
        X={m: np.concatenate(X[m]) for m in modalities},
        labels=np.array(labels, dtype=np.int64),
        sex=np.array(sex, dtype=np.float32),
        entries=entries,
        row_of={e: i for i, e in enumerate(entries)},
    )


def _train_one_epoch(model: CovidModel, opt: Adam, flat: _FlatData,
                     balanced_rows: np.ndarray, seed: int, fold_id: int,
                     epoch: int, batch_size: int) -> float:
    mods = model.config.modalities
    rng_shuffle = np.random.default_rng([seed, fold_id, epoch])
    order = balanced_rows[rng_shuffle.permutation(len(balanced_rows))]
    total, count = 0.0, 0
    for b_idx in range(0, len(order), batch_size):
        rows = order[b_idx:b_idx + batch_size]
        batch_rng = np.random.default_rng([seed, fold_id, epoch, b_idx // batch_size])
        frames = {m: flat.X[m][rows] for m in mods}
        sex = flat.sex[rows] if model.config.use_sex else None
        logits = model.forward(frames, sex, mode="train", rng=batch_rng)
        loss, _ = model.loss_head.forward(logits, flat.labels[rows])
        opt.zero_grad()
        model.backward(model.loss_head.backward())
        opt.step()
        total += loss * len(rows)
        count += len(rows)
    return total / count


def score_patients(model: CovidModel, dataset: dict[str, PatientTensors],
                   patient_ids, batch_size: int = BATCH_SIZE) -> dict[str, float]:
    """Mean per-frame positive-class probability per patient (eval mode)."""
    mods = model.config.modalities
    flat = _flatten(dataset, patient_ids, mods)
    n = len(flat.entries)
    probs = np.empty(n, dtype=np.float64)
    for i in range(0, n, batch_size):
        sl = slice(i, min(i + batch_size, n))
        frames = {m: flat.X[m][sl] for m in mods}
        sex = flat.sex[sl] if model.config.use_sex else None
        probs[sl] = model.predict_proba(frames, sex)[:, 1]
    out = {}
    for pid in sorted(patient_ids):
        rows = [flat.row_of[(pid, i)] for i in range(dataset[pid].n_frames)]
        out[pid] = float(probs[rows].mean())
    return out


def _scored(dataset, scores: dict[str, float]) -> list[ScoredPatient]:
    return [ScoredPatient(pid, s, dataset[pid].record.label)
            for pid, s in sorted(scores.items())]


def train_fold(plan: FoldPlan, config: ModelConfig, dataset: dict[str, PatientTensors],
               max_epochs: int = MAX_EPOCHS, patience: int = PATIENCE,
               batch_size: int = BATCH_SIZE, lr: float = LEARNING_RATE,
               ) -> tuple[TrainingRun, CovidModel, list[ScoredPatient]]:
    """Train one fold with early stopping on L_AUC = 1 - AUC.

    Returns the run record, the model restored to its best-epoch parameters,
    and the best-epoch validation scores.
    """
    val_labels = {dataset[pid].record.label for pid in plan.val_ids}
    if val_labels != {"positive", "negative"}:
        raise SingleClass(
            f"fold {plan.fold_id} validation set needs both classes, has {sorted(val_labels)};"
            " use a dataset with at least 5 training patients per class")
    mods = config.modalities
    flat = _flatten(dataset, plan.train_ids, mods)
    balanced = balance_training_set(flat.entries, list(flat.labels))
    balanced_rows = np.array([flat.row_of[e] for e in balanced.entries], dtype=np.int64)

    model_seed = _derive_seed(config.seed, plan.fold_id)
    model = CovidModel(ModelConfig(mods, config.use_attention, config.use_sex, model_seed))
    opt = Adam(model.params(), lr=lr)

    run = TrainingRun(fold_id=plan.fold_id, seed=config.seed)
    best = math.inf
    best_state = None
    best_scores: list[ScoredPatient] = []
    since_best = 0
    for epoch in range(1, max_epochs + 1):
        loss = _train_one_epoch(model, opt, flat, balanced_rows,
                                config.seed, plan.fold_id, epoch, batch_size)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"fold {plan.fold_id} epoch {epoch}: loss {loss}")
        scores = score_patients(model, dataset, plan.val_ids, batch_size)
        scored = _scored(dataset, scores)
        l_auc = 1.0 - roc_auc(scored)
        run.epoch_losses.append(loss)
        run.val_losses.append(l_auc)
        if l_auc < best:
            best = l_auc
            run.best_epoch = epoch
            best_state = {k: v.copy() for k, v in model.state_tensors().items()}
            best_scores = scored
            since_best = 0
        else:
            since_best += 1
        run.stopped_epoch = epoch
        if since_best >= patience:
            break
    model.load_state_tensors(best_state)
    return run, model, best_scores


def train_final(config: ModelConfig, dataset: dict[str, PatientTensors], epochs: int,
                batch_size: int = BATCH_SIZE, lr: float = LEARNING_RATE) -> CovidModel:
    """Train on the full training partition for a fixed epoch count."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    mods = config.modalities
    train_ids = [pid for pid, p in dataset.items() if p.record.partition == "train"]
    flat = _flatten(dataset, train_ids, mods)
    balanced = balance_training_set(flat.entries, list(flat.labels))
    balanced_rows = np.array([flat.row_of[e] for e in balanced.entries], dtype=np.int64)

    model_seed = _derive_seed(config.seed, 999)
    model = CovidModel(ModelConfig(mods, config.use_attention, config.use_sex, model_seed))
    opt = Adam(model.params(), lr=lr)
    for epoch in range(1, epochs + 1):
        loss = _train_one_epoch(model, opt, flat, balanced_rows,
                                config.seed, 999, epoch, batch_size)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"final training epoch {epoch}: loss {loss}")
    return model


def run_cross_validation(config: ModelConfig, dataset: dict[str, PatientTensors],
                         run_dir: str, max_epochs: int = MAX_EPOCHS,
                         patience: int = PATIENCE, batch_size: int = BATCH_SIZE,
                         lr: float = LEARNING_RATE) -> dict:
    """Full training protocol: 5 folds, epoch-mean rule, final model.

    Writes fold<k>/checkpoint.rfus + history.csv, final/checkpoint.rfus, and
    config.json under ``run_dir``. Returns a summary dict.
    """
    os.makedirs(run_dir, exist_ok=True)
    records = [p.record for p in dataset.values()]
    plans = make_fold_plans(records)
    runs = []
    fold_scores = []
    for plan in plans:
        run, model, scored = train_fold(plan, config, dataset, max_epochs,
                                        patience, batch_size, lr)
        fold_dir = os.path.join(run_dir, f"fold{plan.fold_id}")
        os.makedirs(fold_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(fold_dir, "checkpoint.rfus"))
        with open(os.path.join(fold_dir, "history.csv"), "w") as fh:
            fh.write("epoch,train_loss,val_auc\n")
            for i, (tl, vl) in enumerate(zip(run.epoch_losses, run.val_losses), start=1):
                fh.write(f"{i},{tl:.6f},{1.0 - vl:.6f}\n")
        runs.append(run)
        fold_scores.append(scored)
        # the model's layer work buffers hold hundreds of MB; release them
        # before the next fold allocates its own
        del model
        gc.collect()

    pooled_auc = pooled_validation_auc(fold_scores)
    final_epochs = average_epochs(runs)
    final_model = train_final(config, dataset, final_epochs, batch_size, lr)
    final_dir = os.path.join(run_dir, "final")
    os.makedirs(final_dir, exist_ok=True)
    save_checkpoint(final_model, os.path.join(final_dir, "checkpoint.rfus"))
    del final_model
    gc.collect()

    summary = {
        "config": config.to_dict(),
        "max_epochs": max_epochs,
        "patience": patience,
        "batch_size": batch_size,
        "learning_rate": lr,
        "best_epochs": [r.best_epoch for r in runs],
        "stopped_epochs": [r.stopped_epoch for r in runs],
        "final_epochs": final_epochs,
        "pooled_validation_auc": pooled_auc,
    }
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
