"""Frame-level feature transforms and their post-processing.

Every spectral primitive accepts a single frame (1-D) or a stack of frames
(..., n) and works along the last axis. Silent frames never produce NaN or
Inf: spectral descriptors fall back to 0 Hz, subband ratios to 0 and the
MFCC log is floored.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.fft import dct

from . import FeatureError, __version__
from .dataset import AudioClip, frame_signal

LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8
FEATURE_NAMES = ("mfcc", "zcr", "centroid", "rolloff", "subbands", "lpc")
CACHE_FORMAT = "scenekit-features"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FeatureMatrix:
    values: np.ndarray
    layout: tuple[str, ...]
    source_id: str = ""
    recipe_fingerprint: str | None = None
    silent: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise FeatureError(f"feature values must be 2-D, got shape {v.shape}")
        if v.shape[1] != len(self.layout) or v.shape[1] < 1:
            raise FeatureError(f"layout has {len(self.layout)} names for {v.shape[1]} columns")
        if not np.all(np.isfinite(v)):
            raise FeatureError(f"{self.source_id}: non-finite feature values")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "layout", tuple(self.layout))

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def replace(self, values, layout=None) -> "FeatureMatrix":
        return FeatureMatrix(
            values,
            self.layout if layout is None else layout,
            self.source_id,
            self.recipe_fingerprint,
            self.silent,
        )


# -- spectral primitives -----------------------------------------------------


def _magnitude(frames, n_fft=None):
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[-1] if n_fft is None else n_fft
    mag = np.abs(np.fft.rfft(frames, n=n, axis=-1))
    return mag, np.fft.rfftfreq(n)


def _scalar(x):
    return float(x) if np.ndim(x) == 0 else x


def zero_crossing_rate(frame):
    """Fraction of adjacent sample pairs whose sign differs.

    Zero counts as non-negative.
    """
    x = np.asarray(frame, dtype=np.float64)
    if x.shape[-1] < 2:
        raise FeatureError("zero crossing rate needs at least 2 samples")
    nonneg = x >= 0
    changes = nonneg[..., 1:] != nonneg[..., :-1]
    return _scalar(changes.mean(axis=-1))


def _centroid_from_spectrum(mag, freqs):
    total = mag.sum(axis=-1)
    safe = np.where(total > 0, total, 1.0)
    return np.where(total > 0, (mag * freqs).sum(axis=-1) / safe, 0.0)


def spectral_centroid(frame, sample_rate, n_fft=None):
    """Magnitude-weighted mean frequency in Hz (0 for a silent frame)."""
    mag, freqs = _magnitude(frame, n_fft)
    return _scalar(_centroid_from_spectrum(mag, freqs * sample_rate))


def _rolloff_from_spectrum(mag, freqs, threshold):
    total = mag.sum(axis=-1, keepdims=True)
    cum = np.cumsum(mag, axis=-1)
    # relative slack so an exact tie on the threshold resolves to the lower bin
    reached = cum >= threshold * total * (1 - 1e-12)
    idx = np.argmax(reached, axis=-1)
    return np.where(total[..., 0] > 0, freqs[idx], 0.0)


def spectral_rolloff(frame, sample_rate, threshold=0.85, n_fft=None):
    """Lowest bin frequency below which `threshold` of the magnitude lies."""
    if not 0 < threshold < 1:
        raise FeatureError("rolloff threshold must lie in (0, 1)")
    mag, freqs = _magnitude(frame, n_fft)
    return _scalar(_rolloff_from_spectrum(mag, freqs * sample_rate, threshold))


class SubbandEnergies(NamedTuple):
    raw: np.ndarray
    ratios: np.ndarray
    silent: np.ndarray


def _band_index(freqs, band_edges):
    edges = np.asarray(band_edges, dtype=np.float64)
    idx = np.searchsorted(edges, freqs, side="right") - 1
    # the top edge belongs to the last band
    idx[freqs == edges[-1]] = len(edges) - 2
    idx[(freqs < edges[0]) | (freqs > edges[-1])] = -1
    return idx


def subband_energies(frame, sample_rate, band_edges, n_fft=None) -> SubbandEnergies:
    """Power summed per frequency band, raw and as a fraction of the in-band total."""
    edges = np.asarray(band_edges, dtype=np.float64)
    nyquist = sample_rate / 2.0
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise FeatureError("band edges must be strictly increasing with at least 2 entries")
    if edges[0] < 0 or edges[-1] > nyquist:
        raise FeatureError(f"band edges must lie within [0, {nyquist}] Hz")
    mag, freqs = _magnitude(frame, n_fft)
    power = mag**2
    idx = _band_index(freqs * sample_rate, edges)
    nbands = edges.size - 1
    raw = np.stack([power[..., idx == b].sum(axis=-1) for b in range(nbands)], axis=-1)
    total = raw.sum(axis=-1, keepdims=True)
    silent = total[..., 0] <= 0
    ratios = np.where(total > 0, raw / np.where(total > 0, total, 1.0), 0.0)
    return SubbandEnergies(raw, ratios, silent)


def mel_band_edges(num_bands, sample_rate):
    """Edges of `num_bands` bands equally spaced on the mel scale up to Nyquist."""
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_bands + 1))
    edges[0], edges[-1] = 0.0, sample_rate / 2.0
    return edges


# -- mel filterbank and MFCC ---------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    num_bands: int
    fft_size: int
    sample_rate: int
    weights: np.ndarray
    centers: np.ndarray


@lru_cache(maxsize=32)
def build_mel_filterbank(num_bands: int, fft_size: int, sample_rate: int) -> MelFilterbank:
    """Triangular filters with centres equally spaced on the mel scale.

    Each triangle rises from the previous centre and falls to the next one,
    so adjacent filters cross at each other's centres.
    """
    if num_bands < 2:
        raise FeatureError("need at least 2 mel bands")
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise FeatureError(f"fft_size must be a power of two, got {fft_size}")
    points = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_bands + 2))
    freqs = np.fft.rfftfreq(fft_size, 1.0 / sample_rate)
    lo, center, hi = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (freqs[None, :] - lo) / (center - lo)
    falling = (hi - freqs[None, :]) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise FeatureError(
            f"{num_bands} mel bands are too many for fft_size {fft_size} at {sample_rate} Hz "
            f"(filters {empty.tolist()} cover no FFT bin)"
        )
    weights.setflags(write=False)
    return MelFilterbank(num_bands, fft_size, sample_rate, weights, points[1:-1])


def mfcc(frame, bank: MelFilterbank, num_coeffs: int = 13):
    """First `num_coeffs` DCT-II (orthonormal) coefficients of the log mel magnitudes.

    Frames shorter than the filterbank's FFT size are zero-padded, longer
    ones truncated. Coefficient 0 is kept.
    """
    if not 1 <= num_coeffs <= bank.num_bands:
        raise FeatureError(f"num_coeffs must lie in [1, {bank.num_bands}]")
    mag, _ = _magnitude(frame, bank.fft_size)
    energies = mag @ bank.weights.T
    logmel = np.log(energies + LOG_FLOOR)
    return dct(logmel, type=2, norm="ortho", axis=-1)[..., :num_coeffs]


# -- linear prediction ----------------------------------------------------------


class LpcResult(NamedTuple):
    coefficients: np.ndarray
    error: float
    silent: bool


def autocorrelation(x, max_lag):
    """Biased autocorrelation r[0..max_lag] (normalised by the frame length)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    return np.array([np.dot(x[: n - k], x[k:]) / n for k in range(max_lag + 1)])


def lpc(frame, order: int) -> LpcResult:
    """Autoregressive coefficients a_1..a_p by Levinson-Durbin recursion.

    The frame is modelled as x[t] = sum_i a_i x[t-i] + e[t] with zeros
    outside the frame. ``error`` is the minimised mean squared residual,
    sum(e**2) / len(frame), and never exceeds the frame's mean power.
    """
    x = np.asarray(frame, dtype=np.float64)
    if order < 1 or len(x) <= order:
        raise FeatureError(f"need frame length > order >= 1 (length {len(x)}, order {order})")
    r = autocorrelation(x, order)
    a = np.zeros(order)
    if r[0] <= 0:
        return LpcResult(a, 0.0, True)
    err = r[0]
    for i in range(order):
        acc = r[i + 1] - np.dot(a[:i], r[i:0:-1])
        k = acc / err
        prev = a[:i].copy()
        a[:i] = prev - k * prev[::-1]
        a[i] = k
        err = max(err * (1.0 - k * k), 0.0)
        if err <= r[0] * 1e-15:
            break
    return LpcResult(a, float(err), False)


# -- post-processing ------------------------------------------------------------


def delta_features(features: FeatureMatrix) -> FeatureMatrix:
    """First differences between consecutive frames; the first row is zero."""
    v = features.values
    d = np.zeros_like(v)
    d[1:] = v[1:] - v[:-1]
    return features.replace(d, tuple("d_" + name for name in features.layout))


@dataclass(frozen=True, eq=False)
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    layout: tuple[str, ...]

    def to_dict(self):
        return {"layout": list(self.layout), "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64), tuple(d["layout"]))


def _check_layouts(mats: Sequence[FeatureMatrix]):
    layout = mats[0].layout
    for m in mats[1:]:
        if m.layout != layout:
            raise FeatureError(f"layout mismatch between {mats[0].source_id!r} and {m.source_id!r}")
    return layout


def fit_normalization(train_features: Sequence[FeatureMatrix], floor: float = STD_FLOOR) -> NormalizationStats:
    """Global per-column mean and (population) standard deviation of the pooled frames."""
    if not train_features:
        raise FeatureError("no training features")
    layout = _check_layouts(train_features)
    pooled = np.concatenate([m.values for m in train_features], axis=0)
    if pooled.shape[0] < 2:
        raise FeatureError("normalization needs at least 2 pooled frames")
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), floor)
    return NormalizationStats(mean, std, layout)


def apply_normalization(features: FeatureMatrix, stats: NormalizationStats) -> FeatureMatrix:
    """(x - mean) / std per column. Not idempotent: applying twice shifts again."""
    if features.layout != stats.layout:
        raise FeatureError(f"{features.source_id}: layout does not match normalization stats")
    return features.replace((features.values - stats.mean) / stats.std)


@dataclass(frozen=True, eq=False)
class PcaTransform:
    mean: np.ndarray
    basis: np.ndarray
    explained_variance: np.ndarray
    layout: tuple[str, ...]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def to_dict(self):
        return {
            "layout": list(self.layout),
            "mean": self.mean.tolist(),
            "basis": self.basis.tolist(),
            "explained_variance": self.explained_variance.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["mean"], dtype=np.float64),
            np.array(d["basis"], dtype=np.float64),
            np.array(d["explained_variance"], dtype=np.float64),
            tuple(d["layout"]),
        )


def fit_pca(train_features, rank: int) -> PcaTransform:
    """Top-`rank` eigenvectors of the pooled sample covariance.

    ``train_features`` is a pooled (frames, d) array or a list of
    FeatureMatrix. Each basis vector's largest-magnitude entry is made
    positive so the result is reproducible.
    """
    if isinstance(train_features, np.ndarray):
        pooled = np.asarray(train_features, dtype=np.float64)
        layout = tuple(f"x_{i:02d}" for i in range(pooled.shape[1]))
    else:
        layout = _check_layouts(train_features)
        pooled = np.concatenate([m.values for m in train_features], axis=0)
    d = pooled.shape[1]
    if not 1 <= rank <= d:
        raise FeatureError(f"PCA rank must lie in [1, {d}], got {rank}")
    if pooled.shape[0] < 2:
        raise FeatureError("PCA needs at least 2 frames")
    mean = pooled.mean(axis=0)
    centered = pooled - mean
    cov = centered.T @ centered / (pooled.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:rank]
    evals = np.maximum(evals[order], 0.0)
    basis = evecs[:, order]
    flip = np.sign(basis[np.argmax(np.abs(basis), axis=0), np.arange(rank)])
    basis = basis * np.where(flip == 0, 1.0, flip)
    return PcaTransform(mean, basis, evals, layout)


def apply_pca(features: FeatureMatrix, transform: PcaTransform) -> FeatureMatrix:
    if features.layout != transform.layout:
        raise FeatureError(f"{features.source_id}: layout does not match PCA transform")
    projected = (features.values - transform.mean) @ transform.basis
    return features.replace(projected, tuple(f"pc_{i:02d}" for i in range(transform.rank)))


# -- recipes and extraction -------------------------------------------------------

_DEFAULT_PARAM = {"mfcc": 13, "subbands": 4, "lpc": 10}


@dataclass(frozen=True)
class Recipe:
    """Which per-frame features to compute and how to post-process them.

    ``features`` is an ordered tuple of (name, parameter) pairs; the
    parameter is the coefficient count for mfcc, the band count for
    subbands, the order for lpc and unused otherwise.
    """

    features: tuple[tuple[str, int | None], ...] = (("mfcc", 13),)
    deltas: bool = False
    normalize: bool = False
    pca: int | None = None
    frame_ms: float = 50.0
    hop_fraction: float = 0.5
    window: str = "hamming"
    n_mels: int = 26
    rolloff_threshold: float = 0.85
    subband_edges: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.features:
            raise FeatureError("empty recipe: name at least one feature")
        for name, _ in self.features:
            if name not in FEATURE_NAMES:
                raise FeatureError(f"unknown feature {name!r}; expected one of {FEATURE_NAMES}")

    @classmethod
    def parse(cls, text: str, **frame_params) -> "Recipe":
        """Build a recipe from a comma list such as ``mfcc:13,deltas,normalize``."""
        features, deltas, normalize, pca = [], False, False, None
        for token in filter(None, (t.strip() for t in text.split(","))):
            name, _, arg = token.partition(":")
            if name == "deltas":
                deltas = True
            elif name == "normalize":
                normalize = True
            elif name == "pca":
                pca = int(arg)
            elif name in FEATURE_NAMES:
                features.append((name, int(arg) if arg else _DEFAULT_PARAM.get(name)))
            else:
                raise FeatureError(f"unknown recipe entry {token!r}")
        return cls(tuple(features), deltas, normalize, pca, **frame_params)

    def spec(self) -> str:
        parts = [f"{n}:{p}" if p is not None else n for n, p in self.features]
        if self.deltas:
            parts.append("deltas")
        if self.normalize:
            parts.append("normalize")
        if self.pca:
            parts.append(f"pca:{self.pca}")
        return ",".join(parts)

    def to_dict(self):
        d = asdict(self)
        d["features"] = [list(f) for f in self.features]
        if self.subband_edges is not None:
            d["subband_edges"] = list(self.subband_edges)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["features"] = tuple((n, p) for n, p in d["features"])
        if d.get("subband_edges") is not None:
            d["subband_edges"] = tuple(d["subband_edges"])
        return cls(**d)

    def fingerprint(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def frame_dim(self) -> int:
        """Number of columns produced per frame before PCA."""
        d = 0
        for name, param in self.features:
            if name in ("mfcc", "lpc", "subbands"):
                d += len(self.subband_edges) - 1 if name == "subbands" and self.subband_edges else param
            else:
                d += 1
        return 2 * d if self.deltas else d


def fft_size_for(frame_length: int) -> int:
    return 1 << max(1, (frame_length - 1).bit_length())


def extract(clip: AudioClip, recipe: Recipe, bank: MelFilterbank | None = None) -> FeatureMatrix:
    """Per-frame feature vectors of one clip, concatenated in recipe order.

    Normalization and PCA are fitted on training data and applied later by
    the classifier bundle; only the per-clip transforms happen here.
    """
    if bank is not None and bank.sample_rate != clip.sample_rate:
        raise FeatureError(
            f"{clip.id}: sample rate {clip.sample_rate} Hz does not match filterbank ({bank.sample_rate} Hz)"
        )
    seq = frame_signal(clip, recipe.frame_ms, recipe.hop_fraction, recipe.window)
    frames = seq.frames
    sr = clip.sample_rate
    n_fft = fft_size_for(seq.frame_length)
    columns, layout = [], []
    for name, param in recipe.features:
        if name == "mfcc":
            fb = bank or build_mel_filterbank(recipe.n_mels, n_fft, sr)
            columns.append(mfcc(frames, fb, param))
            layout += [f"mfcc_{i:02d}" for i in range(param)]
        elif name == "zcr":
            columns.append(np.atleast_1d(zero_crossing_rate(frames))[:, None])
            layout.append("zcr")
        elif name == "centroid":
            columns.append(np.atleast_1d(spectral_centroid(frames, sr, n_fft))[:, None])
            layout.append("centroid")
        elif name == "rolloff":
            columns.append(np.atleast_1d(spectral_rolloff(frames, sr, recipe.rolloff_threshold, n_fft))[:, None])
            layout.append("rolloff")
        elif name == "subbands":
            edges = recipe.subband_edges or tuple(mel_band_edges(param, sr))
            bands = subband_energies(frames, sr, edges, n_fft)
            columns.append(bands.ratios)
            layout += [f"band_{i:02d}" for i in range(len(edges) - 1)]
        elif name == "lpc":
            columns.append(np.array([lpc(f, param).coefficients for f in frames]))
            layout += [f"lpc_{i:02d}" for i in range(1, param + 1)]
    fm = FeatureMatrix(
        np.concatenate(columns, axis=1),
        tuple(layout),
        clip.id,
        recipe.fingerprint(),
        silent=~np.any(frames != 0, axis=1),
    )
    if recipe.deltas:
        fm = fm.replace(np.concatenate([fm.values, delta_features(fm).values], axis=1),
                        fm.layout + tuple("d_" + n for n in fm.layout))
    return fm


def extract_all(clips: Sequence[AudioClip], recipe: Recipe) -> list[FeatureMatrix]:
    """Extract every clip; a dataset mixing sample rates is rejected."""
    rates = sorted({c.sample_rate for c in clips})
    if len(rates) > 1:
        raise FeatureError(f"mixed sample rates in dataset: {rates} (resampling is not supported)")
    return [extract(c, recipe) for c in clips]


# -- feature cache ----------------------------------------------------------------
#
# One file per clip: a single UTF-8 JSON header line terminated by "\n",
# followed by rows * cols little-endian float64 values in row-major order.


def write_feature_cache(path, features: FeatureMatrix, recipe: Recipe, extra: dict | None = None):
    header = {
        "format": CACHE_FORMAT,
        "version": CACHE_VERSION,
        "toolkit": __version__,
        "source_id": features.source_id,
        "rows": features.num_frames,
        "cols": features.dim,
        "layout": list(features.layout),
        "recipe": recipe.to_dict(),
        "recipe_fingerprint": recipe.fingerprint(),
        "frame": {"frame_ms": recipe.frame_ms, "hop_fraction": recipe.hop_fraction, "window": recipe.window},
    }
    header.update(extra or {})
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(features.values.astype("<f8").tobytes())
    tmp.replace(path)


def read_cache_header(path) -> dict:
    with open(path, "rb") as fh:
        return _parse_header(path, fh.readline())


def _parse_header(path, line) -> dict:
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise FeatureError(f"{path}: unreadable feature cache header") from exc
    if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
        raise FeatureError(f"{path}: not a version {CACHE_VERSION} feature cache")
    return header


def read_feature_cache(path) -> tuple[FeatureMatrix, dict]:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    header = _parse_header(path, line)
    rows, cols = header["rows"], header["cols"]
    if len(payload) != rows * cols * 8:
        raise FeatureError(f"{path}: truncated feature cache")
    values = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    fm = FeatureMatrix(values, tuple(header["layout"]), header["source_id"], header["recipe_fingerprint"])
    return fm, header
