"""Shared fixtures: small synthetic datasets with preprocessed caches.

These are session-scoped because synthesis + preprocessing dominate test
runtime; tests must treat the cache directories as read-only.
"""

import os

import pytest

from respifuse.ingest import generate_synthetic_dataset, parse_manifest
from respifuse.pipeline import preprocess_manifest


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """8 train-only patients at the default SNR, fully preprocessed.

    Returns (manifest_path, cache_dir, records).
    """
    base = tmp_path_factory.mktemp("smallset")
    manifest = generate_synthetic_dataset(8, 42, os.fspath(base / "data"))
    records = parse_manifest(manifest)
    cache = os.fspath(base / "cache")
    preprocess_manifest(records, cache)
    return manifest, cache, records


@pytest.fixture(scope="session")
def split_dataset(tmp_path_factory):
    """12 patients with a 2-patient test split, fully preprocessed.

    10 training patients give every fold exactly one positive and one
    negative validation patient. Returns (manifest_path, cache_dir, records).
    """
    base = tmp_path_factory.mktemp("splitset")
    manifest = generate_synthetic_dataset(12, 7, os.fspath(base / "data"),
                                          test_fraction=1 / 6)
    records = parse_manifest(manifest)
    cache = os.fspath(base / "cache")
    preprocess_manifest(records, cache)
    return manifest, cache, records
