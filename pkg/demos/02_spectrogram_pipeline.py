"""Walk one audio clip through the full spectrogram pipeline.

A synthetic chirp is resampled to 16 kHz, cut into 5 s frames with 50 %
overlap, transformed with a Hann-4096/hop-128 STFT, collapsed onto a
224-point log-frequency axis (31.25 Hz - 8 kHz, 80 dB range), and rendered
through the magma colormap. The result is saved as a PNG next to this script.
"""

import os

import numpy as np
from PIL import Image

from respifuse.dsp import (
    frame_signal,
    log_frequency_spectrogram,
    render_magma,
    resample_to_16k,
    stft_magnitude,
)
from respifuse.ingest import AudioClip


def main():
    rate = 44100
    t = np.arange(int(6.0 * rate)) / rate
    # exponential chirp from 100 Hz to 4 kHz: a straight line on a log axis
    freq = 100.0 * (4000.0 / 100.0) ** (t / t[-1])
    phase = np.cumsum(2 * np.pi * freq / rate)
    clip = AudioClip(samples=0.5 * np.sin(phase), sample_rate=rate, source="demo/chirp")

    clip16 = resample_to_16k(clip)
    print(f"resampled: {len(clip.samples)} samples @ {rate} Hz "
          f"-> {len(clip16.samples)} @ {clip16.sample_rate} Hz")

    frames = frame_signal(clip16)
    print(f"framed into {len(frames)} overlapping 5 s windows")

    mag = stft_magnitude(frames[0])
    print(f"STFT magnitude matrix: {mag.shape} (freq bins x time columns)")

    grid = log_frequency_spectrogram(mag)
    print(f"log-frequency image: {grid.shape}, values in "
          f"[{grid.min():.2f}, {grid.max():.2f}]")

    frame = render_magma(grid, patient_id="demo", sound_type="cough", frame_index=0)
    rgb = (np.clip(frame.pixels, 0.0, 1.0) * 255).astype(np.uint8).transpose(1, 2, 0)
    out_path = os.path.join(os.path.dirname(__file__), "chirp_spectrogram.png")
    Image.fromarray(rgb).save(out_path)
    print(f"rendered spectrogram saved to {out_path}")
    print("the chirp appears as a straight diagonal line: frequency is "
          "exponential in time, and the vertical axis is logarithmic.")


if __name__ == "__main__":
    main()
