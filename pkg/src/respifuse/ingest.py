"""Dataset manifests, WAV loading, and deterministic synthetic data generation.

A dataset is described by a CSV manifest with one row per patient pointing at
three recordings (cough, breath, speech). The synthetic generator produces
class-separable audio so the full pipeline can be exercised and verified at
desk scale.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, replace

import numpy as np
from scipy.io import wavfile

from .errors import (
    BadFoldIndex,
    CorruptHeader,
    DuplicatePatient,
    IoError,
    ManifestError,
    MissingColumn,
    UnreadableFile,
    UnsupportedEncoding,
)

MANIFEST_HEADER = [
    "patient_id", "cough_path", "breath_path", "speech_path",
    "sex", "label", "partition", "fold",
]

SOUND_TYPES = ("cough", "breath", "speech")

# Per-sound-type frequency band (Hz) carrying the synthetic class signal.
DISCRIMINATIVE_BANDS = {
    "cough": (300.0, 600.0),
    "breath": (800.0, 1600.0),
    "speech": (2000.0, 4000.0),
}


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    cough_path: str
    breath_path: str
    speech_path: str
    sex: str          # 'f' or 'm'
    label: str        # 'positive', 'negative', or 'unknown'
    partition: str    # 'train' or 'test'
    fold: int | None  # 0..4 for train records, None for test

    def path_for(self, sound_type: str) -> str:
        return {
            "cough": self.cough_path,
            "breath": self.breath_path,
            "speech": self.speech_path,
        }[sound_type]


@dataclass
class AudioClip:
    samples: np.ndarray  # float64, amplitude in [-1, 1]
    sample_rate: int
    source: str = ""     # "<patient_id>/<sound_type>"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


def parse_manifest(path: str | os.PathLike) -> list[PatientRecord]:
    """Read a manifest CSV and return validated patient records.

    Relative audio paths are resolved against the manifest's directory.
    """
    path = os.fspath(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            rows = list(reader)
    except OSError as exc:
        raise UnreadableFile(f"cannot read manifest {path!r}: {exc}") from exc
    if not rows or rows[0] != MANIFEST_HEADER:
        raise MissingColumn(
            f"manifest header must be exactly {','.join(MANIFEST_HEADER)}"
        )

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str) -> str:
        return p if os.path.isabs(p) else os.path.join(base, p)

    records = []
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(MANIFEST_HEADER):
            raise MissingColumn(f"line {lineno}: expected {len(MANIFEST_HEADER)} columns")
        pid, cough, breath, speech, sex, label, partition, fold_s = row
        if pid in seen:
            raise DuplicatePatient(f"line {lineno}: duplicate patient_id {pid!r}")
        seen.add(pid)
        if sex not in ("f", "m"):
            raise ManifestError(f"line {lineno}: sex must be 'f' or 'm', got {sex!r}")
        if label not in ("positive", "negative", "unknown"):
            raise ManifestError(f"line {lineno}: bad label {label!r}")
        if partition not in ("train", "test"):
            raise ManifestError(f"line {lineno}: bad partition {partition!r}")
        if label == "unknown" and partition != "test":
            raise ManifestError(f"line {lineno}: label 'unknown' only allowed on test rows")
        if partition == "train":
            try:
                fold = int(fold_s)
            except ValueError:
                raise BadFoldIndex(f"line {lineno}: train row needs an integer fold") from None
            if not 0 <= fold <= 4:
                raise BadFoldIndex(f"line {lineno}: fold {fold} outside 0..4")
        else:
            if fold_s != "":
                raise BadFoldIndex(f"line {lineno}: test rows must leave fold empty")
            fold = None
        record = PatientRecord(
            patient_id=pid,
            cough_path=resolve(cough),
            breath_path=resolve(breath),
            speech_path=resolve(speech),
            sex=sex, label=label, partition=partition, fold=fold,
        )
        for sound in SOUND_TYPES:
            p = record.path_for(sound)
            if not os.path.isfile(p):
                raise UnreadableFile(f"line {lineno}: missing audio file {p!r}")
        records.append(record)
    return records


def write_manifest(records: list[PatientRecord], path: str | os.PathLike) -> str:
    """Write records to a manifest CSV; audio paths are stored relative to it."""
    path = os.fspath(path)
    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(MANIFEST_HEADER)
            for r in records:
                writer.writerow([
                    r.patient_id,
                    os.path.relpath(r.cough_path, base),
                    os.path.relpath(r.breath_path, base),
                    os.path.relpath(r.speech_path, base),
                    r.sex, r.label, r.partition,
                    "" if r.fold is None else str(r.fold),
                ])
    except OSError as exc:
        raise IoError(f"cannot write manifest {path!r}: {exc}") from exc
    return path


def load_wav(path: str | os.PathLike, source: str = "") -> AudioClip:
    """Load a PCM WAV as a mono clip with samples in [-1, 1].

    16/32-bit integer PCM and 32/64-bit float PCM are supported; multichannel
    audio is mixed down by averaging channels.
    """
    path = os.fspath(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError as exc:
        raise UnreadableFile(str(exc)) from exc
    except ValueError as exc:
        msg = str(exc).lower()
        if "unknown wave file format" in msg or "unsupported" in msg \
                or "compression" in msg or "mu-law" in msg:
            raise UnsupportedEncoding(f"{path!r}: {exc}") from exc
        raise CorruptHeader(f"{path!r}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data / 2.0 ** 15
    elif data.dtype == np.int32:
        samples = data / 2.0 ** 31
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    else:
        raise UnsupportedEncoding(f"{path!r}: unsupported sample dtype {data.dtype}")
    if samples.ndim > 1:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise CorruptHeader(f"{path!r}: no audio samples")
    return AudioClip(samples=samples, sample_rate=int(rate), source=source)


def _bandlimited_noise(rng: np.random.Generator, n: int, sr: int,
                       lo: float, hi: float) -> np.ndarray:
    """Unit-RMS white noise restricted to [lo, hi] Hz via FFT masking."""
    white = rng.standard_normal(n)
    spectrum = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, d=1.0 / sr)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spectrum, n=n)
    rms = np.sqrt(np.mean(x ** 2))
    return x / max(rms, 1e-12)


def generate_synthetic_dataset(
    n_patients: int,
    seed: int,
    out_dir: str | os.PathLike,
    snr_db: dict[str, float] | None = None,
    test_fraction: float = 0.0,
    sample_rate: int = 44100,
) -> str:
    """Write a deterministic synthetic dataset and return the manifest path.

    Half the patients are positive, half negative; a positive patient's clips
    carry extra narrowband energy in a per-sound-type discriminative band
    (``DISCRIMINATIVE_BANDS``), at a configurable SNR relative to the broadband
    background noise. Clip durations are drawn in [3 s, 9 s]. Everything is a
    pure function of (n_patients, seed, snr_db, test_fraction, sample_rate).
    """
    if n_patients < 4 or n_patients % 2 != 0:
        raise ValueError("n_patients must be even and >= 4")
    snr = dict.fromkeys(SOUND_TYPES, 0.0)
    if snr_db:
        snr.update(snr_db)
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(str(exc)) from exc

    n_test = int(round(n_patients * test_fraction))
    records = []
    # per-class round-robin keeps every fold two-class whenever each class
    # has at least five training patients
    class_counts = {"positive": 0, "negative": 0}
    for i in range(n_patients):
        pid = f"p{i:03d}"
        label = "positive" if i % 2 == 0 else "negative"
        sex = "f" if (i // 2) % 2 == 0 else "m"
        partition = "test" if i >= n_patients - n_test else "train"
        if partition == "train":
            fold = class_counts[label] % 5
            class_counts[label] += 1
        else:
            fold = None

        paths = {}
        for s_idx, sound in enumerate(SOUND_TYPES):
            rng = np.random.default_rng([seed, i, s_idx])
            n = int(round(rng.uniform(3.0, 9.0) * sample_rate))
            noise = rng.standard_normal(n)
            noise /= np.sqrt(np.mean(noise ** 2))
            x = noise
            if label == "positive":
                lo, hi = DISCRIMINATIVE_BANDS[sound]
                band = _bandlimited_noise(rng, n, sample_rate, lo, hi)
                x = noise + 10.0 ** (snr[sound] / 20.0) * band
            x = 0.5 * x / np.max(np.abs(x))
            fname = f"{pid}_{sound}.wav"
            fpath = os.path.join(out_dir, fname)
            pcm = np.round(x * 32767.0).astype(np.int16)
            try:
                wavfile.write(fpath, sample_rate, pcm)
            except OSError as exc:
                raise IoError(str(exc)) from exc
            paths[sound] = fpath
        records.append(PatientRecord(
            patient_id=pid,
            cough_path=paths["cough"],
            breath_path=paths["breath"],
            speech_path=paths["speech"],
            sex=sex, label=label, partition=partition, fold=fold,
        ))
    return write_manifest(records, os.path.join(out_dir, "manifest.csv"))
