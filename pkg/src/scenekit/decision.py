"""Decision criteria mapping a clip's features and trained models to a label.

All ties are broken towards the lexicographically smallest label so that
evaluation runs are reproducible.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import FeatureError, ModelError, __version__
from .dataset import AudioClip
from .features import (
    FeatureMatrix,
    NormalizationStats,
    PcaTransform,
    Recipe,
    apply_normalization,
    apply_pca,
    extract,
    fit_normalization,
    fit_pca,
)
from .models import (
    CentroidModel,
    EmConfig,
    ExemplarStore,
    GmmModel,
    build_exemplar_store,
    fit_centroid,
    fit_gmm,
    gmm_log_likelihood,
)

CRITERIA = ("ml", "map", "centroid", "knn")
MODEL_KINDS = ("gmm", "centroid", "knn")
BUNDLE_SCHEMA = 1


@dataclass(frozen=True)
class Prediction:
    label: str
    scores: dict[str, float]
    criterion: str

    @property
    def score(self) -> float:
        return self.scores[self.label]


def argmax_label(scores: dict[str, float]) -> str:
    """Highest-scoring label; equal scores go to the lexicographically first label."""
    best = max(scores.values())
    return min(label for label, s in scores.items() if s == best)


@dataclass(frozen=True, eq=False)
class ClassifierBundle:
    kind: str
    labels: tuple[str, ...]
    recipe: Recipe
    gmms: dict[str, GmmModel] = field(default_factory=dict)
    centroids: dict[str, CentroidModel] = field(default_factory=dict)
    store: ExemplarStore | None = None
    normalization: NormalizationStats | None = None
    pca: PcaTransform | None = None
    priors: dict[str, float] = field(default_factory=dict)
    knn_k: int = 1

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ModelError(f"unknown model kind {self.kind!r}")
        labels = tuple(sorted(self.labels))
        object.__setattr__(self, "labels", labels)
        models = {"gmm": self.gmms, "centroid": self.centroids}.get(self.kind)
        if models is not None and set(models) != set(labels):
            raise ModelError(f"model labels {sorted(models)} do not match bundle labels {list(labels)}")
        if self.kind == "knn" and (self.store is None or not set(self.store.labels) <= set(labels)):
            raise ModelError("knn bundle needs an exemplar store over the bundle labels")
        priors = self.priors or {label: 1.0 / len(labels) for label in labels}
        if set(priors) != set(labels):
            raise ModelError("priors must cover exactly the bundle labels")
        if abs(math.fsum(priors.values()) - 1.0) > 1e-9 or min(priors.values()) < 0:
            raise ModelError("priors must be a probability vector")
        object.__setattr__(self, "priors", {label: float(priors[label]) for label in labels})

    def prepare(self, features: FeatureMatrix) -> FeatureMatrix:
        """Apply the training-set normalization and PCA to raw clip features."""
        if features.recipe_fingerprint is not None and features.recipe_fingerprint != self.recipe.fingerprint():
            raise FeatureError(
                f"{features.source_id}: features were extracted with recipe "
                f"{features.recipe_fingerprint}, bundle expects {self.recipe.fingerprint()}"
            )
        if self.normalization is not None:
            features = apply_normalization(features, self.normalization)
        if self.pca is not None:
            features = apply_pca(features, self.pca)
        return features

    def to_dict(self) -> dict:
        d = {
            "schema_version": BUNDLE_SCHEMA,
            "toolkit": __version__,
            "kind": self.kind,
            "labels": list(self.labels),
            "recipe": self.recipe.to_dict(),
            "recipe_fingerprint": self.recipe.fingerprint(),
            "priors": self.priors,
            "knn_k": self.knn_k,
            "normalization": self.normalization.to_dict() if self.normalization else None,
            "pca": self.pca.to_dict() if self.pca else None,
        }
        if self.kind == "gmm":
            d["models"] = [self.gmms[label].to_dict() for label in self.labels]
        elif self.kind == "centroid":
            d["models"] = [self.centroids[label].to_dict() for label in self.labels]
        else:
            d["store"] = self.store.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierBundle":
        if d.get("schema_version") != BUNDLE_SCHEMA:
            raise ModelError(f"unsupported bundle schema {d.get('schema_version')!r}")
        recipe = Recipe.from_dict(d["recipe"])
        if recipe.fingerprint() != d["recipe_fingerprint"]:
            raise ModelError("bundle recipe does not match its fingerprint")
        kw = dict(
            kind=d["kind"],
            labels=tuple(d["labels"]),
            recipe=recipe,
            normalization=NormalizationStats.from_dict(d["normalization"]) if d["normalization"] else None,
            pca=PcaTransform.from_dict(d["pca"]) if d["pca"] else None,
            priors=d["priors"],
            knn_k=d.get("knn_k", 1),
        )
        if d["kind"] == "gmm":
            kw["gmms"] = {m["label"]: GmmModel.from_dict(m) for m in d["models"]}
        elif d["kind"] == "centroid":
            kw["centroids"] = {m["label"]: CentroidModel.from_dict(m) for m in d["models"]}
        else:
            kw["store"] = ExemplarStore.from_dict(d["store"])
        return cls(**kw)


def save_bundle(bundle: ClassifierBundle, path, extra: dict | None = None):
    # json writes floats with repr(), which round-trips float64 exactly
    d = bundle.to_dict()
    d.update(extra or {})
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(d, fh, indent=1, allow_nan=False)
        fh.write("\n")


def load_bundle(path) -> ClassifierBundle:
    with open(path, encoding="utf-8") as fh:
        return ClassifierBundle.from_dict(json.load(fh))


def _class_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def train_bundle(
    features: Sequence[FeatureMatrix],
    labels: Sequence[str],
    recipe: Recipe,
    kind: str = "gmm",
    em: EmConfig | None = None,
    universe: Sequence[str] | None = None,
    priors: dict[str, float] | str | None = None,
    knn_k: int = 1,
    summarization: str = "clip-mean",
) -> ClassifierBundle:
    """Fit normalization, optional PCA and one model per class on training clips.

    ``priors`` may be a mapping, ``"empirical"`` (training clip frequencies)
    or None for uniform priors.
    """
    if len(features) != len(labels) or not features:
        raise ModelError("need one label per training clip and at least one clip")
    classes = tuple(sorted(universe or set(labels)))
    missing = sorted(set(classes) - set(labels))
    if missing:
        raise ModelError(f"no training clips for classes {missing}")
    normalization = fit_normalization(features) if recipe.normalize else None
    if normalization is not None:
        features = [apply_normalization(f, normalization) for f in features]
    pca = fit_pca(list(features), recipe.pca) if recipe.pca else None
    if pca is not None:
        features = [apply_pca(f, pca) for f in features]
    if priors == "empirical":
        priors = {c: sum(1 for lab in labels if lab == c) / len(labels) for c in classes}

    kw = dict(kind=kind, labels=classes, recipe=recipe, normalization=normalization, pca=pca,
              priors=dict(priors or {}), knn_k=knn_k)
    em = em or EmConfig()
    if kind == "gmm":
        gmms = {}
        for i, c in enumerate(classes):
            pooled = np.concatenate([f.values for f, lab in zip(features, labels) if lab == c], axis=0)
            cfg = EmConfig(em.n_components, em.tol, em.max_iter, em.n_init, em.var_floor, _class_seed(em.seed, i))
            gmms[c], _ = fit_gmm(pooled, config=cfg, label=c)
        kw["gmms"] = gmms
    elif kind == "centroid":
        kw["centroids"] = {
            c: fit_centroid([f for f, lab in zip(features, labels) if lab == c], label=c) for c in classes
        }
    elif kind == "knn":
        kw["store"] = build_exemplar_store(list(features), list(labels), summarization)
    else:
        raise ModelError(f"unknown model kind {kind!r}")
    return ClassifierBundle(**kw)


def _values(features) -> np.ndarray:
    x = features.values if isinstance(features, FeatureMatrix) else np.atleast_2d(np.asarray(features, float))
    if x.shape[0] == 0:
        raise FeatureError("empty feature matrix")
    return x


def classify_ml(features, bundle: ClassifierBundle) -> Prediction:
    """Pick the class whose GMM gives the highest total log-likelihood."""
    x = _values(features)
    scores = {label: gmm_log_likelihood(bundle.gmms[label], x) for label in bundle.labels}
    return Prediction(argmax_label(scores), scores, "ml")


def classify_map(features, bundle: ClassifierBundle, priors: dict[str, float] | None = None) -> Prediction:
    """Maximum a posteriori: log prior plus total log-likelihood.

    A class with zero prior scores -inf and is never chosen. Priors are
    renormalised to sum to one.
    """
    priors = bundle.priors if priors is None else priors
    if set(priors) != set(bundle.labels):
        raise ModelError("priors must cover exactly the bundle labels")
    if any(p < 0 for p in priors.values()):
        raise ModelError("priors must be non-negative")
    total = math.fsum(priors.values())
    if total <= 0:
        raise ModelError("priors put zero mass on every class")
    x = _values(features)
    scores = {}
    for label in bundle.labels:
        p = priors[label] / total
        scores[label] = -math.inf if p == 0 else math.log(p) + gmm_log_likelihood(bundle.gmms[label], x)
    return Prediction(argmax_label(scores), scores, "map")


def clip_mean(x) -> np.ndarray:
    """Column means summed with exact rounding, so frame order cannot matter."""
    return np.array([math.fsum(col) for col in x.T]) / x.shape[0]


def _distances(vectors, query):
    diff = vectors - query[None, :]
    return np.sqrt((diff * diff).sum(axis=1))


def classify_centroid(features, bundle: ClassifierBundle) -> Prediction:
    """Nearest class centroid (Euclidean) to the clip's mean frame."""
    query = clip_mean(_values(features))
    centroids = np.array([bundle.centroids[label].centroid for label in bundle.labels])
    dist = _distances(centroids, query)
    scores = {label: -float(d) for label, d in zip(bundle.labels, dist)}
    return Prediction(argmax_label(scores), scores, "centroid")


def _knn_vote(store: ExemplarStore, query, k):
    dist = _distances(store.vectors, query)
    nearest = np.argsort(dist, kind="stable")[:k]
    counts, sums = defaultdict(int), defaultdict(float)
    for i in nearest:
        counts[store.labels[i]] += 1
        sums[store.labels[i]] += dist[i]
    winner = min(counts, key=lambda label: (-counts[label], sums[label], label))
    return winner, counts


def classify_knn(features, store: ExemplarStore, k: int = 1, query: str = "clip-mean",
                 labels: Sequence[str] | None = None) -> Prediction:
    """Majority label among the k nearest stored exemplars.

    With ``query="clip-mean"`` the clip is summarised by its mean frame;
    with ``query="frames"`` every frame votes and the clip takes the frame
    majority. Vote ties go to the smaller summed distance, then to the
    lexicographically first label. Scores are vote counts.
    """
    if len(store) == 0:
        raise ModelError("empty exemplar store")
    if not 1 <= k <= len(store):
        raise ModelError(f"k must lie in [1, {len(store)}], got {k}")
    x = _values(features)
    universe = sorted(set(labels or ()) | set(store.labels))
    if query == "clip-mean":
        winner, counts = _knn_vote(store, clip_mean(x), k)
        scores = {label: float(counts.get(label, 0)) for label in universe}
        return Prediction(winner, scores, "knn")
    if query == "frames":
        votes = [_knn_vote(store, row, k)[0] for row in x]
        scores = {label: float(votes.count(label)) for label in universe}
        return Prediction(frame_majority_vote(votes), scores, "knn")
    raise ModelError(f"unknown knn query mode {query!r}")


def frame_majority_vote(frame_predictions: Sequence[str], weights: Sequence[float] | None = None) -> str:
    """Most common (optionally weighted) label among frame decisions."""
    if len(frame_predictions) == 0:
        raise ModelError("no frame predictions to vote on")
    if weights is None:
        weights = [1.0] * len(frame_predictions)
    if len(weights) != len(frame_predictions):
        raise ModelError("weights and frame predictions differ in length")
    if any(w < 0 for w in weights):
        raise ModelError("vote weights must be non-negative")
    tally = defaultdict(list)
    for label, w in zip(frame_predictions, weights):
        tally[label].append(float(w))
    return argmax_label({label: math.fsum(ws) for label, ws in tally.items()})


def classify_features(features: FeatureMatrix, bundle: ClassifierBundle, criterion: str = "ml") -> Prediction:
    """Normalize/project raw clip features with the bundle, then apply a criterion."""
    if criterion not in CRITERIA:
        raise ModelError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    needed = {"ml": "gmm", "map": "gmm", "centroid": "centroid", "knn": "knn"}[criterion]
    if bundle.kind != needed:
        raise ModelError(f"criterion {criterion!r} needs a {needed} bundle, got {bundle.kind}")
    prepared = bundle.prepare(features)
    if criterion == "ml":
        return classify_ml(prepared, bundle)
    if criterion == "map":
        return classify_map(prepared, bundle)
    if criterion == "centroid":
        return classify_centroid(prepared, bundle)
    return classify_knn(prepared, bundle.store, bundle.knn_k, labels=bundle.labels)


def classify_clip(clip: AudioClip, bundle: ClassifierBundle, criterion: str = "ml") -> Prediction:
    """Extract, normalize, project and classify one unlabelled clip."""
    return classify_features(extract(clip, bundle.recipe), bundle, criterion)
