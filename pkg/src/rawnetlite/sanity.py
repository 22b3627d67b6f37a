"""Synthetic sine-vs-noise corpus for smoke tests and CI sanity runs.

Pure sine sweeps (random frequency 100-1000 Hz) act as the "real" class and
white noise as the "fake" class; the two are separable by construction, so a
healthy pipeline must overfit them quickly.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .audio_io import CLIP_SAMPLES, TARGET_RATE_HZ, Waveform, encode_wav_pcm16


def sine_clip(rng: np.random.Generator, n: int = CLIP_SAMPLES) -> np.ndarray:
    t = np.arange(n) / TARGET_RATE_HZ
    freq = rng.uniform(100.0, 1000.0)
    x = np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    return x / np.max(np.abs(x))


def noise_clip(rng: np.random.Generator, n: int = CLIP_SAMPLES) -> np.ndarray:
    x = rng.normal(size=n)
    return x / np.max(np.abs(x))


def generate_corpus(out_dir, n_per_class: int = 64, seed: int = 42,
                    domain: str = "sanity") -> Path:
    """Write WAV files plus a manifest CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_per_class):
        path = wav_dir / f"real_{i:04d}.wav"
        path.write_bytes(encode_wav_pcm16(Waveform(TARGET_RATE_HZ, sine_clip(rng)[None, :])))
        rows.append([str(path), "real", domain])
    for i in range(n_per_class):
        path = wav_dir / f"fake_{i:04d}.wav"
        path.write_bytes(encode_wav_pcm16(Waveform(TARGET_RATE_HZ, noise_clip(rng)[None, :])))
        rows.append([str(path), "fake", domain])
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "domain"])
        writer.writerows(rows)
    return manifest
