"""Labeled audio collections, framing and cross-validation partitions."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps
from scipy.io import wavfile

from . import DatasetError

WINDOWS = ("hamming", "hann", "rectangular")


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    id: str

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise DatasetError(f"{self.id}: sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LabeledDataset:
    clips: list[AudioClip]
    labels: list[str]
    universe: tuple[str, ...] = ()
    manifest_path: str | None = None

    def __post_init__(self):
        if len(self.clips) != len(self.labels):
            raise DatasetError("clips and labels differ in length")
        if not self.universe:
            self.universe = tuple(sorted(set(self.labels)))
        unknown = set(self.labels) - set(self.universe)
        if unknown:
            raise DatasetError(f"labels outside the universe: {sorted(unknown)}")
        seen = set()
        for clip in self.clips:
            if clip.id in seen:
                raise DatasetError(f"duplicate clip id: {clip.id}")
            seen.add(clip.id)

    def __len__(self):
        return len(self.clips)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.clips]

    def label_of(self, clip_id: str) -> str:
        return self.labels[self.ids.index(clip_id)]

    def index_sets(self) -> dict[str, list[int]]:
        """Indices of the clips belonging to each class."""
        out = {label: [] for label in self.universe}
        for i, label in enumerate(self.labels):
            out[label].append(i)
        return out

    def subset(self, ids: Sequence[str]) -> "LabeledDataset":
        pos = {c.id: i for i, c in enumerate(self.clips)}
        idx = [pos[i] for i in ids]
        return LabeledDataset(
            [self.clips[i] for i in idx],
            [self.labels[i] for i in idx],
            self.universe,
            self.manifest_path,
        )


@dataclass(frozen=True)
class FrameSequence:
    frames: np.ndarray
    frame_length: int
    hop: int
    window: str
    padded: int = 0
    short: bool = False

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class FoldPlan:
    folds: list[tuple[list[str], list[str]]]
    num_folds: int
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "folds": [{"train": list(tr), "test": list(te)} for tr, te in self.folds],
            },
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        data = json.loads(text)
        folds = [(list(f["train"]), list(f["test"])) for f in data["folds"]]
        return cls(folds, len(folds), int(data["seed"]))


def read_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM or float WAV file as mono float64 samples in [-1, 1].

    8-bit files are unsigned, 16/24/32-bit integer files are signed; stereo
    and multichannel files are downmixed by averaging the channels.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing audio file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except Exception as exc:  # scipy raises assorted types on corrupt headers
        raise DatasetError(f"malformed WAV file {path}: {exc}") from exc

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise DatasetError(f"unsupported WAV sample format {data.dtype} in {path}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return x, int(rate)


def write_wav(path, samples, sample_rate: int, bits: int = 16):
    """Write mono or (n, channels) samples in [-1, 1] as a WAV file."""
    x = np.asarray(samples, dtype=np.float64)
    if bits == 16:
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    elif bits == 32:
        data = x.astype(np.float32)
    else:
        raise ValueError("bits must be 16 or 32 (float)")
    wavfile.write(path, sample_rate, data)


def read_manifest_rows(path) -> list[tuple[Path, str, str]]:
    """Parse a `path,label` manifest into (audio path, label, clip id) rows.

    Relative audio paths are resolved against the manifest's directory; the
    clip id is the path exactly as written in the manifest.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing manifest: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["path", "label"]:
            raise DatasetError(f"{path}: manifest header must be 'path,label'")
        rows = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            rel = (row.get("path") or "").strip()
            label = (row.get("label") or "").strip()
            if not rel or not label:
                raise DatasetError(f"{path}:{lineno}: empty path or label")
            if rel in seen:
                raise DatasetError(f"{path}:{lineno}: duplicate clip id {rel}")
            seen.add(rel)
            audio = Path(rel)
            if not audio.is_absolute():
                audio = path.parent / audio
            rows.append((audio, label, rel))
    if not rows:
        raise DatasetError(f"empty manifest: {path}")
    return rows


def load_manifest(path) -> LabeledDataset:
    clips, labels = [], []
    for audio, label, clip_id in read_manifest_rows(path):
        samples, rate = read_wav(audio)
        if samples.size == 0:
            raise DatasetError(f"empty audio file: {audio}")
        clips.append(AudioClip(samples, rate, clip_id))
        labels.append(label)
    return LabeledDataset(clips, labels, manifest_path=str(path))


def write_manifest(path, entries: Sequence[tuple[str, str]]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        writer.writerows(entries)


def get_window(name: str, length: int) -> np.ndarray:
    if name == "rectangular":
        return np.ones(length)
    if name in ("hamming", "hann"):
        return sps.get_window(name, length, fftbins=True)
    raise DatasetError(f"unknown window {name!r}; expected one of {WINDOWS}")


def frame_signal(
    clip: AudioClip,
    frame_ms: float = 50.0,
    hop_fraction: float = 0.5,
    window: str = "hamming",
) -> FrameSequence:
    """Cut a clip into overlapping windowed frames.

    The last frame is zero-padded to full length. A clip shorter than one
    frame yields a single padded frame with ``short=True``.
    """
    if frame_ms <= 0:
        raise DatasetError("frame_ms must be positive")
    if not 0 < hop_fraction <= 1:
        raise DatasetError("hop_fraction must lie in (0, 1]")
    x = np.asarray(clip.samples, dtype=np.float64)
    n = round(frame_ms * clip.sample_rate / 1000.0)
    if n < 1:
        raise DatasetError(f"frame of {frame_ms} ms is shorter than one sample at {clip.sample_rate} Hz")
    hop = max(1, round(hop_fraction * n))
    short = len(x) < n
    if short:
        count = 1
    else:
        count = math.ceil((len(x) - n) / hop) + 1
    total = (count - 1) * hop + n
    padded = np.zeros(total)
    padded[: len(x)] = x
    idx = np.arange(n)[None, :] + hop * np.arange(count)[:, None]
    frames = padded[idx] * get_window(window, n)[None, :]
    return FrameSequence(frames, n, hop, window, padded=total - len(x), short=short)


def stratified_kfold(dataset: LabeledDataset, k: int = 5, seed: int = 0) -> FoldPlan:
    """Partition clip ids into k stratified folds.

    Each class is shuffled with a seeded generator and dealt round-robin
    into the folds, continuing the deal from where the previous class
    stopped so fold sizes stay balanced.
    """
    if k < 2:
        raise DatasetError("k must be at least 2 (k=1 leaves no held-out data)")
    groups = dataset.index_sets()
    for label, members in groups.items():
        if len(members) < k:
            raise DatasetError(f"class {label!r} has {len(members)} members, fewer than k={k}")
    rng = np.random.default_rng(seed)
    assignment = np.empty(len(dataset), dtype=int)
    offset = 0
    for label in dataset.universe:
        members = np.array(groups[label])
        members = members[rng.permutation(len(members))]
        for j, i in enumerate(members):
            assignment[i] = (offset + j) % k
        offset = (offset + len(members)) % k
    ids = dataset.ids
    folds = []
    for f in range(k):
        test = [ids[i] for i in range(len(ids)) if assignment[i] == f]
        train = [ids[i] for i in range(len(ids)) if assignment[i] != f]
        folds.append((train, test))
    return FoldPlan(folds, k, seed)
