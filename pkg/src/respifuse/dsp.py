"""Audio-to-spectrogram preprocessing.

Raw clips are downsampled to 16 kHz, duration-equalized per patient by
repetition, cut into 5 s frames with 50 % overlap, and turned into
224x224 colour spectrogram tensors on a logarithmic frequency axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import resample_poly
from scipy.signal.windows import hann

from .errors import (
    AlreadyStandardized,
    EmptyClip,
    EmptySet,
    MixedSoundTypes,
    OutOfRange,
    SoundTypeMismatch,
    UpsamplingRequired,
    WrongSampleRate,
    WrongLength,
)
from .ingest import AudioClip
from .magma_table import MAGMA_TABLE

TARGET_RATE = 16000
FRAME_LEN = 5 * TARGET_RATE          # 80000 samples
FRAME_HOP = FRAME_LEN // 2           # 40000 samples
STFT_WIN = 4096
STFT_HOP = 128
N_FREQ_BINS = STFT_WIN // 2 + 1      # 2049
N_STFT_COLS = (FRAME_LEN - STFT_WIN) // STFT_HOP + 1  # 594
IMAGE_SIZE = 224
LOG_F_MIN = 31.25
LOG_F_MAX = 8000.0
DB_FLOOR = -80.0

_MAGMA = np.asarray(MAGMA_TABLE, dtype=np.float64)  # (256, 3)

_KAISER_BETA = 8.6  # anti-alias filter window shape for resampling


@dataclass
class SpectrogramFrame:
    pixels: np.ndarray   # (3, 224, 224), channels R,G,B
    patient_id: str
    sound_type: str      # 'cough' | 'breath' | 'speech'
    frame_index: int
    standardized: bool = False


@dataclass
class StandardizationStats:
    mu: np.ndarray       # per-channel mean, shape (3,)
    sigma: np.ndarray    # per-channel population std, shape (3,)
    sound_type: str


def resample_to_16k(clip: AudioClip) -> AudioClip:
    """Downsample to 16 kHz with a Kaiser-windowed polyphase sinc filter.

    Inputs below 16 kHz are rejected: upsampling would invent content that
    was never recorded.
    """
    rate = clip.sample_rate
    if rate < TARGET_RATE:
        raise UpsamplingRequired(f"sample rate {rate} Hz is below {TARGET_RATE} Hz")
    if rate == TARGET_RATE:
        return clip
    g = math.gcd(TARGET_RATE, rate)
    up, down = TARGET_RATE // g, rate // g
    out = resample_poly(clip.samples, up, down, window=("kaiser", _KAISER_BETA))
    target_len = int(round(len(clip.samples) * TARGET_RATE / rate))
    if len(out) > target_len:
        out = out[:target_len]
    elif len(out) < target_len:
        out = np.pad(out, (0, target_len - len(out)))
    return AudioClip(samples=out, sample_rate=TARGET_RATE, source=clip.source)


def _tile_to_length(x: np.ndarray, n: int) -> np.ndarray:
    """Extend x to length n by wrap-around repetition from its start."""
    if len(x) == 0:
        raise EmptyClip("cannot extend an empty signal")
    if len(x) >= n:
        return x[:n]
    reps = -(-n // len(x))
    return np.tile(x, reps)[:n]


def equalize_durations(
    cough: AudioClip, breath: AudioClip, speech: AudioClip
) -> tuple[AudioClip, AudioClip, AudioClip]:
    """Extend the shorter clips by repetition so all three match the longest."""
    clips = (cough, breath, speech)
    for c in clips:
        if len(c.samples) == 0:
            raise EmptyClip(f"empty clip {c.source!r}")
        if c.sample_rate != TARGET_RATE:
            raise ValueError(f"clip {c.source!r} not at {TARGET_RATE} Hz")
    target = max(len(c.samples) for c in clips)
    return tuple(
        AudioClip(
            samples=_tile_to_length(c.samples, target),
            sample_rate=TARGET_RATE,
            source=c.source,
        )
        for c in clips
    )


def frame_signal(clip: AudioClip) -> list[np.ndarray]:
    """Cut a 16 kHz clip into 5 s frames with 50 % overlap.

    A ragged tail is avoided by first extending the signal via wrap-around
    repetition to the smallest length >= max(FRAME_LEN, n) with
    (length - FRAME_LEN) a multiple of FRAME_HOP.
    """
    if clip.sample_rate != TARGET_RATE:
        raise WrongSampleRate(
            f"framing expects {TARGET_RATE} Hz input, got {clip.sample_rate} Hz"
        )
    x = clip.samples
    if len(x) == 0:
        raise EmptyClip(f"empty clip {clip.source!r}")
    n = max(len(x), FRAME_LEN)
    rem = (n - FRAME_LEN) % FRAME_HOP
    if rem:
        n += FRAME_HOP - rem
    x = _tile_to_length(x, n)
    n_frames = (n - FRAME_LEN) // FRAME_HOP + 1
    return [x[i * FRAME_HOP: i * FRAME_HOP + FRAME_LEN] for i in range(n_frames)]


_HANN = hann(STFT_WIN, sym=False)


def stft_magnitude(window: np.ndarray) -> np.ndarray:
    """Magnitude STFT of one 5 s frame: Hann window 4096, hop 128, no padding.

    Returns a (2049, 594) non-negative matrix (frequency x time).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (FRAME_LEN,):
        raise WrongLength(f"expected {FRAME_LEN} samples, got {window.shape}")
    segments = np.lib.stride_tricks.sliding_window_view(window, STFT_WIN)[::STFT_HOP]
    spec = np.fft.rfft(segments * _HANN, axis=1)
    return np.abs(spec).T  # (2049, 594)


# Log-spaced frequency centers and their (fractional) STFT bin positions.
_LOG_FREQS = LOG_F_MIN * (LOG_F_MAX / LOG_F_MIN) ** (np.arange(IMAGE_SIZE) / (IMAGE_SIZE - 1))
_LOG_BIN_POS = _LOG_FREQS * STFT_WIN / TARGET_RATE


def _interp_rows(mat: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Linear interpolation of matrix rows at fractional row positions."""
    lo = np.clip(np.floor(positions).astype(int), 0, mat.shape[0] - 2)
    w = (positions - lo)[:, None]
    return mat[lo] * (1.0 - w) + mat[lo + 1] * w


def _log_band_edges(positions: np.ndarray) -> np.ndarray:
    """Geometric midpoints between adjacent log-spaced bin positions."""
    mids = np.sqrt(positions[:-1] * positions[1:])
    ratio = positions[1] / positions[0]
    return np.concatenate(([positions[0] / math.sqrt(ratio)], mids,
                           [positions[-1] * math.sqrt(ratio)]))


def _resample_log_axis(mat: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Resample matrix rows onto log-spaced centers.

    Where adjacent centers are more than one bin apart, each output row
    averages the bins whose centers fall inside its band, so narrow spectral
    peaks are not skipped; elsewhere it linearly interpolates at the center.
    """
    edges = _log_band_edges(positions)
    interp = _interp_rows(mat, positions)
    out = interp.copy()
    for j in range(len(positions)):
        lo = int(np.ceil(edges[j] - 0.5))
        hi = int(np.ceil(edges[j + 1] - 0.5))
        lo = max(lo, 0)
        hi = min(hi, mat.shape[0])
        if hi - lo >= 2:
            out[j] = mat[lo:hi].mean(axis=0)
    return out


def log_frequency_spectrogram(mag: np.ndarray) -> np.ndarray:
    """Collapse a (2049, 594) magnitude matrix to a 224x224 grid in [0, 1].

    Steps: dB conversion clamped to [-80, 0] relative to the matrix max,
    resampling of the frequency axis onto 224 log-spaced centers
    (31.25 Hz .. 8 kHz, row 0 = highest frequency), linear time resampling
    594 -> 224, then per-image min-max normalization.
    """
    mag = np.asarray(mag, dtype=np.float64)
    if mag.shape != (N_FREQ_BINS, N_STFT_COLS):
        raise WrongLength(f"expected {(N_FREQ_BINS, N_STFT_COLS)}, got {mag.shape}")
    db = 20.0 * np.log10(mag + 1e-10)
    db = np.clip(db - db.max(), DB_FLOOR, 0.0)

    grid = _resample_log_axis(db, _LOG_BIN_POS)[::-1]  # row 0 = highest frequency
    t_pos = np.arange(IMAGE_SIZE) * (N_STFT_COLS - 1) / (IMAGE_SIZE - 1)
    grid = _interp_rows(grid.T, t_pos).T

    lo, hi = grid.min(), grid.max()
    if hi - lo < 1e-12:
        return np.zeros_like(grid)
    return (grid - lo) / (hi - lo)


def render_magma(
    grid: np.ndarray, patient_id: str = "", sound_type: str = "", frame_index: int = 0
) -> SpectrogramFrame:
    """Map a [0, 1] grid through the magma lookup table to an RGB tensor."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.min() < 0.0 or grid.max() > 1.0:
        raise OutOfRange("grid values must lie in [0, 1]")
    pos = grid * 255.0
    lo = np.clip(np.floor(pos).astype(int), 0, 254)
    w = (pos - lo)[..., None]
    rgb = _MAGMA[lo] * (1.0 - w) + _MAGMA[lo + 1] * w  # (224, 224, 3)
    return SpectrogramFrame(
        pixels=np.ascontiguousarray(rgb.transpose(2, 0, 1)),
        patient_id=patient_id,
        sound_type=sound_type,
        frame_index=frame_index,
        standardized=False,
    )


def compute_standardization(frames: list[SpectrogramFrame]) -> StandardizationStats:
    """Per-channel mean and population std over all pixels of all frames.

    Only training-partition frames of a single sound type should be passed.
    Sigma is floored at 1e-6 so constant channels stay usable.
    """
    if not frames:
        raise EmptySet("no frames to compute statistics from")
    sound_type = frames[0].sound_type
    for f in frames:
        if f.sound_type != sound_type:
            raise MixedSoundTypes(f"{f.sound_type!r} mixed with {sound_type!r}")
        if f.standardized:
            raise AlreadyStandardized(f"frame {f.patient_id}/{f.frame_index}")
    stacked = np.stack([f.pixels for f in frames]).astype(np.float64)  # (n, 3, H, W)
    mu = stacked.mean(axis=(0, 2, 3))
    sigma = np.maximum(stacked.std(axis=(0, 2, 3)), 1e-6)
    return StandardizationStats(mu=mu, sigma=sigma, sound_type=sound_type)


def standardize(frame: SpectrogramFrame, stats: StandardizationStats) -> SpectrogramFrame:
    """Apply per-channel (x - mu) / sigma."""
    if frame.standardized:
        raise AlreadyStandardized(f"frame {frame.patient_id}/{frame.frame_index}")
    if frame.sound_type != stats.sound_type:
        raise SoundTypeMismatch(f"{frame.sound_type!r} vs stats {stats.sound_type!r}")
    pixels = (frame.pixels - stats.mu[:, None, None]) / stats.sigma[:, None, None]
    return SpectrogramFrame(
        pixels=pixels,
        patient_id=frame.patient_id,
        sound_type=frame.sound_type,
        frame_index=frame.frame_index,
        standardized=True,
    )
