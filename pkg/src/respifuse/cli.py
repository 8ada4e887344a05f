"""Command-line interface: synthesize, preprocess, train, evaluate, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data/processing error, 3 check
failure. Every command is deterministic given its flags and seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import nncore, train as training
from .errors import GradCheckFailed, RespifuseError
from .evaluation import (
    ResultsTable,
    ScoredPatient,
    format_table,
    modality_row_key,
    parse_report,
    pooled_validation_auc,
    roc_auc,
    write_report,
)
from .ingest import generate_synthetic_dataset, parse_manifest
from .model import (
    ContextualAttention,
    CovidModel,
    ModelConfig,
    OuterFusion,
    load_checkpoint,
    read_checkpoint,
)
from .pipeline import load_dataset, preprocess_manifest
from .train import make_fold_plans, run_cross_validation, score_patients

VARIANT_NAMES = {
    (False, False): "baseline",
    (True, False): "sex",
    (False, True): "attention",
    (True, True): "sex_attention",
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a train/eval command needs, resolved from flags."""
    manifest: str
    cache_dir: str
    run_dir: str
    modalities: tuple[str, ...]
    use_sex: bool = False
    use_attention: bool = False
    seed: int = 0
    epochs: int | None = None

    @property
    def variant(self) -> str:
        return VARIANT_NAMES[(self.use_sex, self.use_attention)]


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _parse_modalities(parser: argparse.ArgumentParser, text: str) -> tuple[str, ...]:
    letters = tuple(p.strip().upper() for p in text.split(",") if p.strip())
    if not letters or any(m not in ("C", "B", "S") for m in letters):
        parser.error(f"--modalities must be a comma-separated subset of C,B,S, got {text!r}")
    return letters


def build_parser() -> _Parser:
    parser = _Parser(prog="respifuse",
                     description="Multimodal respiratory-audio screening pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[], help="generate a synthetic dataset",
                       description="Write a deterministic synthetic WAV dataset and manifest.")
    p.add_argument("--patients", type=int, required=True, help="number of patients (even)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--snr", default=None,
                   help="per-sound-type SNR in dB, e.g. 'cough=0,breath=-3,speech=-3'")
    p.add_argument("--test-fraction", type=float, default=0.0)

    p = sub.add_parser("preprocess", help="build the spectrogram cache",
                       description="Resample, frame, and render every clip into the cache.")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="run 5-fold cross-validation training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--modalities", required=True, help="comma-separated subset of C,B,S")
    p.add_argument("--sex", action="store_true", help="feed the sex covariate to the classifier")
    p.add_argument("--attention", action="store_true", help="enable contextual attention")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--epochs", type=int, default=None, help="override the max-epoch cap")

    p = sub.add_parser("eval", help="score a partition and update results.csv")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--set", dest="subset", choices=("val", "test"), required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    p.add_argument("--corrupt", default=None, metavar="LAYER",
                   help="debug flag: perturb LAYER's analytic gradient so the check must fail")
    return parser


def _parse_snr(parser: argparse.ArgumentParser, text: str | None) -> dict[str, float] | None:
    if text is None:
        return None
    out = {}
    for part in text.split(","):
        if "=" not in part:
            parser.error(f"--snr entries must look like sound=dB, got {part!r}")
        key, _, value = part.partition("=")
        key = key.strip()
        if key not in ("cough", "breath", "speech"):
            parser.error(f"--snr sound type must be cough/breath/speech, got {key!r}")
        try:
            out[key] = float(value)
        except ValueError:
            parser.error(f"--snr value for {key!r} is not a number: {value!r}")
    return out


def cmd_synth(parser, args) -> int:
    if args.patients < 4 or args.patients % 2:
        parser.error("--patients must be even and >= 4")
    snr = _parse_snr(parser, args.snr)
    manifest = generate_synthetic_dataset(args.patients, args.seed, args.out,
                                          snr_db=snr, test_fraction=args.test_fraction)
    print(manifest)
    return 0


def cmd_preprocess(parser, args) -> int:
    records = parse_manifest(args.manifest)
    stats = preprocess_manifest(records, args.cache, workers=args.workers)
    for sound in sorted(stats):
        st = stats[sound]
        mu = ",".join(f"{v:.6f}" for v in st.mu)
        print(f"{sound}: mu=[{mu}] frames cached")
    return 0


def cmd_train(parser, args) -> int:
    modalities = _parse_modalities(parser, args.modalities)
    if args.epochs is not None and args.epochs < 1:
        parser.error("--epochs must be >= 1")
    records = parse_manifest(args.manifest)
    train_records = [r for r in records if r.partition == "train"]
    dataset = load_dataset(train_records, args.cache, modalities)
    config = ModelConfig(modalities=modalities, use_attention=args.attention,
                         use_sex=args.sex, seed=args.seed)
    max_epochs = args.epochs if args.epochs is not None else training.MAX_EPOCHS
    summary = run_cross_validation(config, dataset, args.run_dir, max_epochs=max_epochs)
    print(f"run dir: {args.run_dir}")
    print(f"best epochs per fold: {summary['best_epochs']}")
    print(f"final model epochs: {summary['final_epochs']}")
    print(f"pooled validation AUC: {100.0 * summary['pooled_validation_auc']:.2f}%")
    return 0


def _eval_val(config: ModelConfig, run_dir: str, dataset, records) -> float:
    plans = make_fold_plans(records)
    fold_scores = []
    for plan in plans:
        path = os.path.join(run_dir, f"fold{plan.fold_id}", "checkpoint.rfus")
        model, _ = load_checkpoint(path)
        scores = score_patients(model, dataset, plan.val_ids)
        fold_scores.append([ScoredPatient(pid, s, dataset[pid].record.label)
                            for pid, s in sorted(scores.items())])
    return pooled_validation_auc(fold_scores)


def cmd_eval(parser, args) -> int:
    final_path = os.path.join(args.run_dir, "final", "checkpoint.rfus")
    config, _, _ = read_checkpoint(final_path)
    records = parse_manifest(args.manifest)
    variant = VARIANT_NAMES[(config.use_sex, config.use_attention)]
    row = modality_row_key(config.modalities)
    csv_path = os.path.join(args.run_dir, "results.csv")
    table = parse_report(csv_path) if os.path.exists(csv_path) else ResultsTable()

    if args.subset == "val":
        train_records = [r for r in records if r.partition == "train"]
        dataset = load_dataset(train_records, args.cache, config.modalities)
        auc = _eval_val(config, args.run_dir, dataset, train_records)
    else:
        test_records = [r for r in records if r.partition == "test"]
        if not test_records:
            print("no test-partition patients in manifest", file=sys.stderr)
            return 2
        dataset = load_dataset(test_records, args.cache, config.modalities)
        model, _ = load_checkpoint(final_path)
        scores = score_patients(model, dataset, [r.patient_id for r in test_records])
        for pid, score in sorted(scores.items()):
            print(f"{pid},{score:.6f}")
        if any(r.label == "unknown" for r in test_records):
            print("test labels are blind; scores emitted, AUC skipped")
            return 0
        auc = roc_auc([ScoredPatient(pid, s, dataset[pid].record.label)
                       for pid, s in sorted(scores.items())])

    table.set(row, variant, args.subset, auc)
    write_report(table, csv_path)
    print(format_table(table))
    print(f"{row} {variant} {args.subset} AUC: {100.0 * auc:.2f}%")
    return 0


# --- gradcheck command ---

def _as_input_param(x: np.ndarray, name: str) -> nncore.Parameter:
    return nncore.Parameter(np.asarray(x, dtype=np.float64), name)


def _layer_checks():
    """Yield (name, params, loss_fn) triples, all in double precision.

    Each loss is a random linear functional of the layer output so that input
    gradients are generic; inputs are wrapped as parameters so the checker
    probes them along with the weights.
    """
    rng = np.random.default_rng(20240917)

    def linear_loss(forward, backward, params, y):
        def loss_fn():
            out = forward()
            loss = float((out * y).sum())
            backward(y.copy())
            return loss
        return params, loss_fn

    # conv2d
    conv = nncore.Conv2d(3, 4, rng, np.float64)
    xc = _as_input_param(rng.standard_normal((2, 3, 6, 6)), "x")
    yc = rng.standard_normal((2, 4, 6, 6))
    yield ("conv2d", *linear_loss(
        lambda: conv.forward(xc.data),
        lambda d: xc.grad.__iadd__(conv.backward(d)),
        conv.params() + [xc], yc))

    # batchnorm (train mode, frozen running stats)
    bn = nncore.BatchNorm2d(4, np.float64)
    bn.track_running = False
    xb = _as_input_param(rng.standard_normal((3, 4, 5, 5)), "x")
    yb = rng.standard_normal((3, 4, 5, 5))
    yield ("batchnorm", *linear_loss(
        lambda: bn.forward(xb.data),
        lambda d: xb.grad.__iadd__(bn.backward(d)),
        bn.params() + [xb], yb))

    # relu (input gradient only; inputs kept away from the kink at zero)
    relu = nncore.ReLU()
    raw = rng.standard_normal((4, 8))
    xr = _as_input_param(np.sign(raw) * (0.5 + np.abs(raw)), "x")
    yr = rng.standard_normal((4, 8))
    yield ("relu", *linear_loss(
        lambda: relu.forward(xr.data),
        lambda d: xr.grad.__iadd__(relu.backward(d)),
        [xr], yr))

    # maxpool (well-separated values, no ties)
    pool = nncore.MaxPool2d()
    xm = _as_input_param(rng.permutation(np.arange(2 * 3 * 4 * 4, dtype=np.float64))
                         .reshape(2, 3, 4, 4), "x")
    ym = rng.standard_normal((2, 3, 2, 2))
    yield ("maxpool", *linear_loss(
        lambda: pool.forward(xm.data),
        lambda d: xm.grad.__iadd__(pool.backward(d)),
        [xm], ym))

    # adaptive average pool (odd size exercises overlapping regions)
    apool = nncore.AdaptiveAvgPool2d()
    xa = _as_input_param(rng.standard_normal((2, 3, 5, 5)), "x")
    ya = rng.standard_normal((2, 3, 2, 2))
    yield ("avgpool", *linear_loss(
        lambda: apool.forward(xa.data),
        lambda d: xa.grad.__iadd__(apool.backward(d)),
        [xa], ya))

    # dense
    dense = nncore.Dense(6, 3, rng, np.float64)
    xd = _as_input_param(rng.standard_normal((4, 6)), "x")
    yd = rng.standard_normal((4, 3))
    yield ("dense", *linear_loss(
        lambda: dense.forward(xd.data),
        lambda d: xd.grad.__iadd__(dense.backward(d)),
        dense.params() + [xd], yd))

    # dropout (deterministic mask via a fixed rng each call)
    drop = nncore.Dropout(0.3)
    xo = _as_input_param(rng.standard_normal((4, 6)), "x")
    yo = rng.standard_normal((4, 6))
    yield ("dropout", *linear_loss(
        lambda: drop.forward(xo.data, rng=np.random.default_rng(5)),
        lambda d: xo.grad.__iadd__(drop.backward(d)),
        [xo], yo))

    # softmax cross-entropy (gradient w.r.t. logits)
    ce = nncore.SoftmaxCrossEntropy()
    xl = _as_input_param(rng.standard_normal((6, 2)), "logits")
    tl = np.array([0, 1, 1, 0, 1, 0])

    def ce_loss():
        loss, _ = ce.forward(xl.data, tl)
        xl.grad += ce.backward()
        return loss
    yield "softmax_ce", [xl], ce_loss

    # contextual attention
    att = ContextualAttention(rng, np.float64)
    xt = _as_input_param(rng.standard_normal((3, 16)), "f")
    yt = rng.standard_normal((3, 16))
    yield ("attention", *linear_loss(
        lambda: att.forward(xt.data),
        lambda d: xt.grad.__iadd__(att.backward(d)),
        att.params() + [xt], yt))

    # outer fusion (3 modalities)
    fus = OuterFusion()
    fa = [_as_input_param(rng.standard_normal((2, 16)), f"f{i}") for i in range(3)]
    yf = rng.standard_normal((2, 17 ** 3))

    def fus_loss():
        out = fus.forward([p.data for p in fa])
        loss = float((out * yf).sum())
        for p, g in zip(fa, fus.backward(yf.copy())):
            p.grad += g
        return loss
    yield "fusion", fa, fus_loss


def _full_stack_check():
    """Extractor -> attention -> fusion -> classifier -> CE at reduced size."""
    config = ModelConfig(modalities=("B", "S"), use_attention=True, use_sex=True, seed=11)
    model = CovidModel(config, dtype=np.float64)
    model.set_batchnorm_tracking(False)
    rng = np.random.default_rng(3)
    frames = {m: rng.standard_normal((2, 3, 8, 8)) for m in config.modalities}
    sex = np.array([0.0, 1.0])
    targets = np.array([0, 1])

    def loss_fn():
        logits = model.forward(frames, sex, mode="train", rng=np.random.default_rng(9))
        loss, _ = model.loss_head.forward(logits, targets)
        model.backward(model.loss_head.backward())
        return loss
    return model.params(), loss_fn


def run_gradcheck(corrupt: str | None = None, stream=None) -> bool:
    """Check every layer (tolerance 1e-6) and the full stack (1e-4).

    Prints one line per check; returns True when all pass. ``corrupt``
    perturbs the named check's analytic gradient as a checker self-test.
    """
    stream = stream or sys.stdout
    ok = True
    checks = list(_layer_checks()) + [("full_stack", *_full_stack_check())]
    for name, params, loss_fn in checks:
        tol = 1e-4 if name == "full_stack" else 1e-6
        fn = loss_fn
        if corrupt == name:
            def fn(inner=loss_fn, target=params[0]):
                loss = inner()
                target.grad += 0.05 * (1.0 + np.abs(target.grad))
                return loss
        max_coords = 40 if name == "full_stack" else 200
        err = nncore.gradient_check(fn, params, max_coords=max_coords)
        passed = err < tol
        ok = ok and passed
        status = "PASS" if passed else "FAIL"
        print(f"{name:12s} max relative error {err:.3e}  (tol {tol:.0e})  {status}",
              file=stream)
    return ok


def cmd_gradcheck(parser, args) -> int:
    t0 = time.time()
    ok = run_gradcheck(corrupt=args.corrupt)
    print(f"total runtime {time.time() - t0:.1f} s")
    if not ok:
        raise GradCheckFailed("at least one gradient check exceeded tolerance")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {
        "synth": cmd_synth,
        "preprocess": cmd_preprocess,
        "train": cmd_train,
        "eval": cmd_eval,
        "gradcheck": cmd_gradcheck,
    }
    try:
        return handlers[args.command](parser, args)
    except SystemExit as exc:  # parser.error inside a handler
        return int(exc.code or 0)
    except GradCheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (RespifuseError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
