"""Preprocessing pipeline: audio -> cached spectrogram tensors + stats.

Cache layout under a cache directory:

    <patient_id>/meta.json                  content hash + frame count
    <patient_id>/<sound_type>/frameNNN.npy  float32 (3,224,224) in [0,1]
    <patient_id>/<sound_type>/frameNNN.png  8-bit render for inspection
    stats_<sound_type>.json                 {"sound_type", "mu", "sigma"}

The .npy sidecars are the training inputs; PNGs are lossy 8-bit views.
Re-running preprocessing skips patients whose source audio is unchanged
(sha256 over the three WAV files plus the pipeline parameters).
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import dsp
from .errors import CacheMiss, EmptySet
from .ingest import SOUND_TYPES, PatientRecord, load_wav
from .model import MODALITY_SOUND

PIPELINE_TAG = "v1:16k:5s:4096/128:log224:magma"


def _patient_hash(record: PatientRecord) -> str:
    h = hashlib.sha256(PIPELINE_TAG.encode())
    for sound in SOUND_TYPES:
        with open(record.path_for(sound), "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def _frame_paths(cache_dir: str, pid: str, sound: str, idx: int) -> tuple[str, str]:
    base = os.path.join(cache_dir, pid, sound, f"frame{idx:03d}")
    return base + ".npy", base + ".png"


def preprocess_patient(record: PatientRecord, cache_dir: str) -> int:
    """Preprocess one patient's three clips into cached frames.

    Returns the per-sound-type frame count (identical across sound types by
    construction). Skips work when the cached content hash matches.
    """
    pid = record.patient_id
    meta_path = os.path.join(cache_dir, pid, "meta.json")
    content_hash = _patient_hash(record)
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        if meta.get("hash") == content_hash:
            return meta["n_frames"]

    clips = {}
    for sound in SOUND_TYPES:
        clip = load_wav(record.path_for(sound), source=f"{pid}/{sound}")
        clips[sound] = dsp.resample_to_16k(clip)
    clips["cough"], clips["breath"], clips["speech"] = dsp.equalize_durations(
        clips["cough"], clips["breath"], clips["speech"])

    n_frames = None
    for sound in SOUND_TYPES:
        windows = dsp.frame_signal(clips[sound])
        n_frames = len(windows)
        os.makedirs(os.path.join(cache_dir, pid, sound), exist_ok=True)
        for idx, window in enumerate(windows):
            mag = dsp.stft_magnitude(window)
            grid = dsp.log_frequency_spectrogram(mag)
            frame = dsp.render_magma(grid, pid, sound, idx)
            npy_path, png_path = _frame_paths(cache_dir, pid, sound, idx)
            np.save(npy_path, frame.pixels.astype(np.float32))
            img = np.round(frame.pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)
            Image.fromarray(img, mode="RGB").save(png_path)

    with open(meta_path, "w") as fh:
        json.dump({"hash": content_hash, "n_frames": n_frames}, fh, sort_keys=True)
    return n_frames


def load_cached_frames(cache_dir: str, pid: str, sound: str) -> list[dsp.SpectrogramFrame]:
    meta_path = os.path.join(cache_dir, pid, "meta.json")
    if not os.path.exists(meta_path):
        raise CacheMiss(f"patient {pid!r} not in cache {cache_dir!r}")
    with open(meta_path) as fh:
        n_frames = json.load(fh)["n_frames"]
    frames = []
    for idx in range(n_frames):
        npy_path, _ = _frame_paths(cache_dir, pid, sound, idx)
        if not os.path.exists(npy_path):
            raise CacheMiss(f"missing cached frame {npy_path!r}")
        frames.append(dsp.SpectrogramFrame(
            pixels=np.load(npy_path), patient_id=pid, sound_type=sound, frame_index=idx))
    return frames


def _stats_path(cache_dir: str, sound: str) -> str:
    return os.path.join(cache_dir, f"stats_{sound}.json")


def compute_cache_stats(records: list[PatientRecord], cache_dir: str) -> dict[str, dsp.StandardizationStats]:
    """Standardization stats per sound type from training-partition frames,
    accumulated in sorted patient order."""
    train = sorted((r for r in records if r.partition == "train"), key=lambda r: r.patient_id)
    if not train:
        raise EmptySet("no training-partition patients")
    stats = {}
    for sound in SOUND_TYPES:
        frames = []
        for r in train:
            frames.extend(load_cached_frames(cache_dir, r.patient_id, sound))
        st = dsp.compute_standardization(frames)
        stats[sound] = st
        with open(_stats_path(cache_dir, sound), "w") as fh:
            json.dump({"sound_type": sound,
                       "mu": st.mu.tolist(),
                       "sigma": st.sigma.tolist()}, fh, sort_keys=True)
    return stats


def load_cache_stats(cache_dir: str) -> dict[str, dsp.StandardizationStats]:
    stats = {}
    for sound in SOUND_TYPES:
        path = _stats_path(cache_dir, sound)
        if not os.path.exists(path):
            raise CacheMiss(f"missing stats file {path!r}")
        with open(path) as fh:
            d = json.load(fh)
        stats[sound] = dsp.StandardizationStats(
            mu=np.array(d["mu"]), sigma=np.array(d["sigma"]), sound_type=d["sound_type"])
    return stats


def preprocess_manifest(records: list[PatientRecord], cache_dir: str,
                        workers: int = 1) -> dict[str, dsp.StandardizationStats]:
    """Preprocess every patient (optionally in a worker pool), then compute
    training-partition standardization stats."""
    os.makedirs(cache_dir, exist_ok=True)
    ordered = sorted(records, key=lambda r: r.patient_id)
    if workers <= 1:
        for r in ordered:
            preprocess_patient(r, cache_dir)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(preprocess_patient, ordered, [cache_dir] * len(ordered)))
    return compute_cache_stats(records, cache_dir)


@dataclass
class PatientTensors:
    """All standardized frames of one patient, per selected modality."""
    record: PatientRecord
    frames: dict[str, np.ndarray]  # modality letter -> (n_frames, 3, 224, 224) float32
    n_frames: int

    @property
    def label_index(self) -> int:
        # class index 1 = positive
        return 1 if self.record.label == "positive" else 0

    @property
    def sex_value(self) -> float:
        return 1.0 if self.record.sex == "m" else 0.0


def load_dataset(records: list[PatientRecord], cache_dir: str,
                 modalities: tuple[str, ...]) -> dict[str, PatientTensors]:
    """Load standardized frame tensors for the given patients and modalities."""
    stats = load_cache_stats(cache_dir)
    out = {}
    for r in sorted(records, key=lambda x: x.patient_id):
        frames = {}
        n_frames = None
        for m in modalities:
            sound = MODALITY_SOUND[m]
            raw = load_cached_frames(cache_dir, r.patient_id, sound)
            std = [dsp.standardize(f, stats[sound]) for f in raw]
            frames[m] = np.stack([f.pixels for f in std]).astype(np.float32)
            n_frames = len(std)
        out[r.patient_id] = PatientTensors(record=r, frames=frames, n_frames=n_frames)
    return out
