"""Per-class generative models: diagonal-covariance GMMs, centroids, exemplars."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import ModelError
from .features import FeatureMatrix

LOG_2PI = math.log(2.0 * math.pi)


def _as_array(features) -> np.ndarray:
    if isinstance(features, FeatureMatrix):
        return features.values
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], FeatureMatrix):
        return np.concatenate([f.values for f in features], axis=0)
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


@dataclass(frozen=True, eq=False)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    label: str = ""

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self):
        return {
            "label": self.label,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            np.array(d["weights"], dtype=np.float64),
            np.array(d["means"], dtype=np.float64).reshape(len(d["weights"]), -1),
            np.array(d["variances"], dtype=np.float64).reshape(len(d["weights"]), -1),
            d.get("label", ""),
        )


@dataclass(frozen=True)
class EmConfig:
    n_components: int = 8
    tol: float = 1e-5
    max_iter: int = 200
    n_init: int = 3
    var_floor: float = 1e-4
    seed: int = 0


@dataclass
class FitReport:
    log_likelihood_trace: list[float]
    iterations: int
    converged: bool
    seed: int
    reseeds: int = 0
    restart_log_likelihoods: list[float] = field(default_factory=list)


def component_log_density(x, means, variances):
    """log N(x_t; mu_k, diag(var_k)) for every frame t and component k, shape (T, K)."""
    diff = x[:, None, :] - means[None, :, :]
    quad = (diff * diff / variances[None, :, :]).sum(axis=-1)
    logdet = np.log(variances).sum(axis=-1)
    return -0.5 * (quad + logdet[None, :] + x.shape[1] * LOG_2PI)


def frame_log_likelihood(model: GmmModel, features) -> np.ndarray:
    x = _as_array(features)
    if x.shape[1] != model.dim:
        raise ModelError(f"feature dimension {x.shape[1]} does not match model dimension {model.dim}")
    with np.errstate(divide="ignore"):
        logw = np.log(model.weights)
    return logsumexp(component_log_density(x, model.means, model.variances) + logw[None, :], axis=1)


def gmm_log_likelihood(model: GmmModel, features) -> float:
    """Total log-likelihood of all frames, summed with exact rounding.

    ``math.fsum`` makes the total independent of frame order.
    """
    return math.fsum(frame_log_likelihood(model, features))


def _kmeanspp(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ModelError("not enough distinct frames to seed the mixture")
        idx = rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _em_run(x, cfg: EmConfig, rng, global_var):
    n, d = x.shape
    k = cfg.n_components
    weights = np.full(k, 1.0 / k)
    means = _kmeanspp(x, k, rng)
    variances = np.tile(global_var, (k, 1))

    def estep(w, mu, var):
        joint = component_log_density(x, mu, var) + np.log(w)[None, :]
        per_frame = logsumexp(joint, axis=1)
        return math.fsum(per_frame), joint - per_frame[:, None]

    ll, log_resp = estep(weights, means, variances)
    trace = [ll]
    converged = False
    reseeds = 0
    iterations = 0
    for iterations in range(1, cfg.max_iter + 1):
        resp = np.exp(log_resp)
        nk = resp.sum(axis=0)
        dead = nk < 1e-8
        nk_safe = np.where(dead, 1.0, nk)
        weights = nk / n
        means = (resp.T @ x) / nk_safe[:, None]
        diff = x[:, None, :] - means[None, :, :]
        variances = (resp[:, :, None] * diff * diff).sum(axis=0) / nk_safe[:, None]
        variances = np.maximum(variances, cfg.var_floor)
        if dead.any():
            # keep K fixed: restart each empty component from a random frame
            for j in np.flatnonzero(dead):
                means[j] = x[rng.integers(n)]
                variances[j] = global_var
                weights[j] = 1.0 / n
            weights = weights / weights.sum()
            reseeds += int(dead.sum())
        new_ll, log_resp = estep(weights, means, variances)
        trace.append(new_ll)
        gain = (new_ll - ll) / n
        ll = new_ll
        if gain < cfg.tol:
            converged = True
            break
    model = GmmModel(weights, means, variances)
    return model, trace, iterations, converged, reseeds


def fit_gmm(features, n_components: int | None = None, config: EmConfig | None = None, label: str = ""):
    """Fit a diagonal-covariance GMM by expectation-maximisation.

    Means are seeded k-means++ style from the data, weights start uniform
    and every variance starts at the global per-dimension variance. Each of
    the ``n_init`` restarts stops when the per-frame log-likelihood gain
    drops below ``tol``; the restart with the highest final log-likelihood
    is returned together with its FitReport.
    """
    cfg = config or EmConfig()
    if n_components is not None:
        cfg = EmConfig(n_components, cfg.tol, cfg.max_iter, cfg.n_init, cfg.var_floor, cfg.seed)
    x = _as_array(features)
    n, d = x.shape
    k = cfg.n_components
    if k < 1:
        raise ModelError("n_components must be at least 1")
    if n == 0:
        raise ModelError("no frames to fit")
    distinct = np.unique(x, axis=0).shape[0]
    if k > distinct:
        raise ModelError(f"{k} components requested but only {distinct} distinct frames available")
    if n < k * d:
        warnings.warn(f"fitting {k} components of dimension {d} on only {n} frames", stacklevel=2)
    global_var = np.maximum(x.var(axis=0), cfg.var_floor)

    best = None
    finals = []
    for child in np.random.SeedSequence(cfg.seed).spawn(max(1, cfg.n_init)):
        run = _em_run(x, cfg, np.random.default_rng(child), global_var)
        finals.append(run[1][-1])
        if best is None or run[1][-1] > best[1][-1]:
            best = run
    model, trace, iterations, converged, reseeds = best
    model = GmmModel(model.weights, model.means, model.variances, label)
    return model, FitReport(trace, iterations, converged, cfg.seed, reseeds, finals)


@dataclass(frozen=True, eq=False)
class CentroidModel:
    centroid: np.ndarray
    label: str = ""

    def to_dict(self):
        return {"label": self.label, "centroid": self.centroid.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["centroid"], dtype=np.float64), d.get("label", ""))


def fit_centroid(features, label: str = "") -> CentroidModel:
    x = _as_array(features)
    if x.shape[0] < 1:
        raise ModelError("centroid needs at least one frame")
    return CentroidModel(x.mean(axis=0), label)


@dataclass(frozen=True, eq=False)
class ExemplarStore:
    vectors: np.ndarray
    labels: tuple[str, ...]
    mode: str = "clip-mean"

    def __len__(self):
        return len(self.labels)

    def to_dict(self):
        return {"mode": self.mode, "labels": list(self.labels), "vectors": self.vectors.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["vectors"], dtype=np.float64), tuple(d["labels"]), d["mode"])


def build_exemplar_store(features, labels, summarization: str = "clip-mean") -> ExemplarStore:
    """Store labelled vectors for nearest-neighbour search.

    ``clip-mean`` keeps one mean vector per clip, ``frame-level`` keeps
    every frame under its clip's label. Duplicates are preserved.
    """
    if not features:
        raise ModelError("exemplar store needs at least one clip")
    if len(features) != len(labels):
        raise ModelError("features and labels differ in length")
    arrays = [_as_array(f) for f in features]
    dims = {a.shape[1] for a in arrays}
    if len(dims) != 1:
        raise ModelError(f"exemplars have mixed dimensions {sorted(dims)}")
    if summarization == "clip-mean":
        return ExemplarStore(np.array([a.mean(axis=0) for a in arrays]), tuple(labels), summarization)
    if summarization == "frame-level":
        vecs = np.concatenate(arrays, axis=0)
        labs = tuple(lab for a, lab in zip(arrays, labels) for _ in range(len(a)))
        return ExemplarStore(vecs, labs, summarization)
    raise ModelError(f"unknown summarization {summarization!r}")
