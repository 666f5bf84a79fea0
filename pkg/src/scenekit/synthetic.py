"""Synthetic acoustic scenes with known class structure.

Each class mixes band-passed noise confined to its own octave with a
class-specific set of steady tones, so a bag-of-frames classifier should
separate them almost perfectly.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import signal as sps

from .dataset import AudioClip, LabeledDataset, write_manifest, write_wav

OCTAVES = ((250.0, 500.0), (500.0, 1000.0), (1000.0, 2000.0), (2000.0, 4000.0),
           (125.0, 250.0), (4000.0, 7000.0))
TONES = ((330.0, 415.0), (660.0, 880.0, 740.0), (1320.0, 1760.0), (2640.0, 3100.0, 3520.0),
         (150.0, 200.0), (4400.0, 5200.0))


def scene_clip(class_index: int, rng, duration: float = 3.0, sample_rate: int = 16000) -> np.ndarray:
    n = int(round(duration * sample_rate))
    lo, hi = OCTAVES[class_index]
    sos = sps.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    noise = sps.sosfilt(sos, rng.standard_normal(n))
    noise /= np.max(np.abs(noise)) + 1e-12
    t = np.arange(n) / sample_rate
    tones = sum(
        rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * f * rng.uniform(0.99, 1.01) * t + rng.uniform(0, 2 * np.pi))
        for f in TONES[class_index]
    )
    tones /= np.max(np.abs(tones)) + 1e-12
    x = rng.uniform(0.4, 0.7) * noise + rng.uniform(0.2, 0.5) * tones
    return 0.9 * x / np.max(np.abs(x))


def make_scene_dataset(
    num_classes: int = 4,
    clips_per_class: int = 10,
    duration: float = 3.0,
    sample_rate: int = 16000,
    seed: int = 0,
) -> LabeledDataset:
    if not 1 <= num_classes <= len(OCTAVES):
        raise ValueError(f"num_classes must lie in [1, {len(OCTAVES)}]")
    rng = np.random.default_rng(seed)
    clips, labels = [], []
    for c in range(num_classes):
        for i in range(clips_per_class):
            label = f"scene{c}"
            clips.append(AudioClip(scene_clip(c, rng, duration, sample_rate), sample_rate, f"{label}_{i:02d}.wav"))
            labels.append(label)
    return LabeledDataset(clips, labels)


def write_dataset(dataset: LabeledDataset, directory) -> Path:
    """Write every clip as a 16-bit WAV under ``directory`` plus a manifest.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for clip in dataset.clips:
        write_wav(directory / clip.id, clip.samples, clip.sample_rate)
    manifest = directory / "manifest.csv"
    write_manifest(manifest, [(c.id, label) for c, label in zip(dataset.clips, dataset.labels)])
    return manifest
