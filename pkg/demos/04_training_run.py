"""Train a small breath-modality model end to end and print its results.

Synthesizes 12 patients, preprocesses them into spectrogram caches, runs the
5-fold cross-validation protocol with early stopping, and reports the pooled
validation AUC. Uses a short epoch cap so the whole demo finishes in a couple
of minutes on one core.
"""

import os
import tempfile

from respifuse.ingest import generate_synthetic_dataset, parse_manifest
from respifuse.model import ModelConfig
from respifuse.pipeline import load_dataset, preprocess_manifest
from respifuse.train import run_cross_validation


def main():
    base = tempfile.mkdtemp(prefix="respifuse_demo_")
    print(f"working under {base}")

    manifest = generate_synthetic_dataset(12, seed=7, out_dir=os.path.join(base, "data"))
    records = parse_manifest(manifest)
    print(f"synthesized {len(records)} patients")

    cache = os.path.join(base, "cache")
    preprocess_manifest(records, cache)
    print("preprocessed all clips into spectrogram caches")

    dataset = load_dataset(records, cache, ("B",))
    summary = run_cross_validation(
        ModelConfig(("B",), seed=1), dataset,
        run_dir=os.path.join(base, "run"),
        max_epochs=3, batch_size=8,
    )
    print(f"best epoch per fold: {summary['best_epochs']}")
    print(f"final model trained for {summary['final_epochs']} epoch(s)")
    print(f"pooled validation AUC: {100.0 * summary['pooled_validation_auc']:.1f}%")
    print(f"checkpoints and histories are under {os.path.join(base, 'run')}")


if __name__ == "__main__":
    main()
