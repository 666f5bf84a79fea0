"""Cross-validated evaluation, significance ranking and disagreement analysis."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import CoverageError, DatasetError, ScenekitError
from .dataset import FoldPlan, LabeledDataset
from .decision import argmax_label, classify_features, train_bundle
from .features import FeatureMatrix, Recipe, extract_all
from .models import EmConfig

# total length of a 95% bar is 3.92 standard errors (2 x 1.96)
CI_BAR_FACTOR = 3.92
MV_ID = "MV"
DECISION_COLUMNS = ("clip_id", "true_label", "predicted_label", "criterion", "score")


@dataclass(frozen=True)
class DecisionRecord:
    clip_id: str
    true_label: str
    predicted_label: str
    classifier_id: str = ""
    fold_index: int = -1
    criterion: str = ""
    score: float = math.nan

    @property
    def correct(self) -> bool:
        return self.true_label == self.predicted_label


def format_score(x: float) -> str:
    return repr(float(x))


def decisions_to_csv(records: Sequence[DecisionRecord], comments: Sequence[str] = ()) -> str:
    """Serialise records to the decisions CSV; ``comments`` become leading '#' lines."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(DECISION_COLUMNS)
    for r in records:
        writer.writerow([r.clip_id, r.true_label, r.predicted_label, r.criterion, format_score(r.score)])
    return buf.getvalue()


def write_decisions(path, records, comments=()):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(decisions_to_csv(records, comments))


def read_decisions(path, classifier_id: str | None = None) -> list[DecisionRecord]:
    """Read a decisions CSV; the classifier id defaults to the file stem."""
    path = Path(path)
    cid = classifier_id if classifier_id is not None else path.stem
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None or tuple(reader.fieldnames) != DECISION_COLUMNS:
        raise ScenekitError(f"{path}: expected columns {','.join(DECISION_COLUMNS)}")
    records = [
        DecisionRecord(row["clip_id"], row["true_label"], row["predicted_label"], cid,
                       criterion=row["criterion"], score=float(row["score"]))
        for row in reader
    ]
    ids = [r.clip_id for r in records]
    if len(set(ids)) != len(ids):
        raise ScenekitError(f"{path}: duplicate clip ids")
    return records


# -- cross-validation ------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a cross-validation run needs besides the data.

    ``model`` is one of gmm, centroid, knn or the debug classifiers
    ``echo`` (returns the true label) and ``random`` (seeded uniform guess).
    """

    recipe: Recipe = field(default_factory=lambda: Recipe.parse("mfcc:13,normalize"))
    model: str = "gmm"
    criterion: str = "ml"
    em: EmConfig = field(default_factory=EmConfig)
    knn_k: int = 1
    summarization: str = "clip-mean"
    priors: str | None = None
    seed: int = 0


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    labels: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def percentages(self) -> np.ndarray:
        """Rows normalised to percent of each true class (empty rows stay 0)."""
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.where(rows > 0, 100.0 * self.counts / np.where(rows > 0, rows, 1), 0.0)

    def to_csv(self, percent: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["true\\predicted", *self.labels])
        values = self.percentages() if percent else self.counts
        for label, row in zip(self.labels, values):
            writer.writerow([label, *(f"{v:.6f}" if percent else int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(records: Sequence[DecisionRecord], labels: Sequence[str] | None = None) -> ConfusionMatrix:
    """Entry (i, j) counts clips of true class i predicted as class j."""
    if not records:
        raise ScenekitError("no decision records")
    universe = tuple(sorted(labels if labels is not None else {r.true_label for r in records}))
    index = {label: i for i, label in enumerate(universe)}
    counts = np.zeros((len(universe), len(universe)), dtype=np.int64)
    for r in records:
        if r.true_label not in index or r.predicted_label not in index:
            raise ScenekitError(f"{r.clip_id}: label outside the universe {list(universe)}")
        counts[index[r.true_label], index[r.predicted_label]] += 1
    return ConfusionMatrix(counts, universe)


def accuracy_confidence_interval(fold_accuracies: Sequence[float]) -> tuple[float, float]:
    """Mean fold accuracy and the half-width of its 95% bar.

    The whole bar spans 3.92 sample standard deviations over sqrt(k).
    """
    acc = np.asarray(fold_accuracies, dtype=np.float64)
    k = acc.size
    if k < 2:
        raise ScenekitError("need at least 2 fold accuracies")
    sigma = acc.std(ddof=1)
    return float(acc.mean()), CI_BAR_FACTOR / 2.0 * float(sigma) / math.sqrt(k)


@dataclass
class EvaluationReport:
    fold_accuracies: list[float]
    mean_accuracy: float
    half_width: float
    confusion: ConfusionMatrix
    per_file: dict[str, bool]
    classifier_id: str = ""

    @property
    def overall_accuracy(self) -> float:
        return self.confusion.accuracy

    def to_dict(self) -> dict:
        return {
            "classifier_id": self.classifier_id,
            "fold_accuracies": self.fold_accuracies,
            "mean_accuracy": self.mean_accuracy,
            "half_width": self.half_width,
            "bar_length": 2.0 * self.half_width,
            "overall_accuracy": self.overall_accuracy,
            "labels": list(self.confusion.labels),
            "confusion": self.confusion.counts.tolist(),
            "per_file": self.per_file,
        }


def _check_plan(dataset: LabeledDataset, plan: FoldPlan):
    ids = set(dataset.ids)
    seen: set[str] = set()
    for f, (train, test) in enumerate(plan.folds):
        unknown = (set(train) | set(test)) - ids
        if unknown:
            raise DatasetError(f"fold {f} references ids not in the dataset: {sorted(unknown)[:5]}")
        if set(train) & set(test):
            raise DatasetError(f"fold {f}: train and test overlap")
        if seen & set(test):
            raise DatasetError(f"fold {f}: test ids already tested in an earlier fold")
        seen |= set(test)
    if seen != ids:
        raise DatasetError(f"fold plan never tests {sorted(ids - seen)[:5]}")


def run_cross_validation(
    dataset: LabeledDataset,
    plan: FoldPlan,
    config: PipelineConfig | None = None,
    features: Mapping[str, FeatureMatrix] | None = None,
    classifier_id: str = "",
) -> tuple[EvaluationReport, list[DecisionRecord]]:
    """Train on each fold's training clips only and classify its test clips.

    ``features`` may supply precomputed raw features per clip id; otherwise
    every clip is extracted once up front (extraction is per clip, so it
    cannot leak information across folds).
    """
    cfg = config or PipelineConfig()
    _check_plan(dataset, plan)
    label_of = dict(zip(dataset.ids, dataset.labels))
    debug = cfg.model in ("echo", "random")
    if features is None and not debug:
        features = dict(zip(dataset.ids, extract_all(dataset.clips, cfg.recipe)))

    records: list[DecisionRecord] = []
    fold_acc = []
    for f, (train, test) in enumerate(plan.folds):
        if cfg.model == "echo":
            preds = [(label_of[c], 1.0) for c in test]
        elif cfg.model == "random":
            rng = np.random.default_rng([cfg.seed, f])
            preds = [(dataset.universe[rng.integers(len(dataset.universe))], 0.0) for _ in test]
        else:
            em = EmConfig(cfg.em.n_components, cfg.em.tol, cfg.em.max_iter, cfg.em.n_init,
                          cfg.em.var_floor, int(np.random.SeedSequence([cfg.seed, f]).generate_state(1)[0]))
            bundle = train_bundle(
                [features[c] for c in train], [label_of[c] for c in train], cfg.recipe,
                kind=cfg.model, em=em, universe=dataset.universe, priors=cfg.priors,
                knn_k=cfg.knn_k, summarization=cfg.summarization,
            )
            preds = []
            for c in test:
                p = classify_features(features[c], bundle, cfg.criterion)
                preds.append((p.label, p.score))
        correct = 0
        for c, (label, score) in zip(test, preds):
            records.append(DecisionRecord(c, label_of[c], label, classifier_id, f, cfg.criterion if not debug else cfg.model, score))
            correct += label == label_of[c]
        fold_acc.append(correct / len(test))

    mean, half = accuracy_confidence_interval(fold_acc) if len(fold_acc) >= 2 else (fold_acc[0], 0.0)
    report = EvaluationReport(
        fold_acc, mean, half,
        confusion_matrix(records, dataset.universe),
        {r.clip_id: r.correct for r in records},
        classifier_id,
    )
    return report, records


# -- paired comparison and ranking --------------------------------------------------


def _aligned(records_a, records_b):
    a = {r.clip_id: r for r in records_a}
    b = {r.clip_id: r for r in records_b}
    if a.keys() != b.keys():
        missing = sorted(a.keys() ^ b.keys())
        raise CoverageError(f"decision sets cover different clips; unmatched ids: {missing[:10]}", missing)
    return [(a[c], b[c]) for c in sorted(a)]


@dataclass(frozen=True)
class SignTestResult:
    p_value: float
    reject: bool
    n_plus: int
    n_minus: int
    n_ties: int


def sign_test_p_value(n_plus: int, n_minus: int) -> float:
    """Exact two-sided binomial p-value for the split of nonzero differences."""
    n = n_plus + n_minus
    if n == 0:
        return 1.0
    tail = sum(math.comb(n, i) for i in range(min(n_plus, n_minus) + 1))
    return min(1.0, 2 * tail / 2**n)


def sign_test(records_a, records_b, alpha: float = 0.05) -> SignTestResult:
    """Paired sign test on per-clip correctness; ties (both right or both wrong) are dropped."""
    pairs = _aligned(records_a, records_b)
    diffs = [int(ra.correct) - int(rb.correct) for ra, rb in pairs]
    n_plus, n_minus = diffs.count(1), diffs.count(-1)
    p = sign_test_p_value(n_plus, n_minus)
    return SignTestResult(p, p <= alpha, n_plus, n_minus, diffs.count(0))


def accuracy_of(records) -> float:
    return sum(r.correct for r in records) / len(records)


@dataclass
class RankingResult:
    order: list[str]
    accuracies: list[float]
    p_values: np.ndarray
    boxes: list[tuple[int, int]]
    alpha: float = 0.05

    def box_members(self) -> list[list[str]]:
        return [self.order[i:j + 1] for i, j in self.boxes]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "order": self.order,
            "accuracies": self.accuracies,
            "p_values": self.p_values.tolist(),
            "boxes": [{"first": i, "last": j, "members": self.order[i:j + 1]} for i, j in self.boxes],
        }


def rank_with_boxes(records_by_classifier: Mapping[str, Sequence[DecisionRecord]], alpha: float = 0.05) -> RankingResult:
    """Sort classifiers by accuracy and group them into significance boxes.

    A box is a maximal run of consecutive classifiers (in accuracy order)
    in which no pair differs significantly under the sign test. Boxes may
    overlap. The majority-vote ensemble is not admissible here because its
    decisions are not independent of its members'.
    """
    if MV_ID in records_by_classifier:
        raise ScenekitError("the majority-vote ensemble cannot take part in sign-test ranking")
    if len(records_by_classifier) < 2:
        raise ScenekitError("ranking needs at least 2 classifiers")
    ids = list(records_by_classifier)
    for other in ids[1:]:
        _aligned(records_by_classifier[ids[0]], records_by_classifier[other])
    acc = {c: accuracy_of(records_by_classifier[c]) for c in ids}
    order = sorted(ids, key=lambda c: (-acc[c], c))
    n = len(order)
    p = np.ones((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            res = sign_test(records_by_classifier[order[i]], records_by_classifier[order[j]], alpha)
            p[i, j] = p[j, i] = res.p_value
    boxes = []
    last_end = -1
    for i in range(n):
        j = i
        while j + 1 < n and all(p[a, j + 1] > alpha for a in range(i, j + 1)):
            j += 1
        if j > last_end:
            boxes.append((i, j))
            last_end = j
    return RankingResult(order, [acc[c] for c in order], p, boxes, alpha)


def majority_vote_ensemble(records_by_classifier: Mapping[str, Sequence[DecisionRecord]]) -> list[DecisionRecord]:
    """Per clip, the label predicted by most classifiers (ties: lexicographic)."""
    if len(records_by_classifier) < 2:
        raise ScenekitError("majority vote needs at least 2 classifiers")
    groups = list(records_by_classifier.values())
    for g in groups[1:]:
        _aligned(groups[0], g)
    by_clip = [{r.clip_id: r for r in g} for g in groups]
    out = []
    for first in groups[0]:
        votes = Counter(m[first.clip_id].predicted_label for m in by_clip)
        label = argmax_label(dict(votes))
        out.append(DecisionRecord(first.clip_id, first.true_label, label, MV_ID, first.fold_index,
                                  "majority_vote", float(votes[label])))
    return out


@dataclass
class PerFileAccuracy:
    fractions: dict[str, float]
    histogram: list[tuple[float, int]]
    never_correct: list[str]
    num_classifiers: int

    def histogram_csv(self) -> str:
        lines = ["bin,count"] + [f"{b:.6f},{c}" for b, c in self.histogram]
        return "\n".join(lines) + "\n"


def per_file_accuracy(records_by_classifier: Mapping[str, Sequence[DecisionRecord]]) -> PerFileAccuracy:
    """Fraction of classifiers that get each clip right, with its histogram (bin width 1/m)."""
    groups = list(records_by_classifier.values())
    if not groups:
        raise ScenekitError("no classifiers")
    for g in groups[1:]:
        _aligned(groups[0], g)
    m = len(groups)
    hits = Counter()
    for g in groups:
        for r in g:
            hits[r.clip_id] += r.correct
    clips = [r.clip_id for r in groups[0]]
    fractions = {c: hits[c] / m for c in clips}
    counts = Counter(hits[c] for c in clips)
    histogram = [(i / m, counts.get(i, 0)) for i in range(m + 1)]
    return PerFileAccuracy(fractions, histogram, [c for c in clips if hits[c] == 0], m)


@dataclass
class CumulativeAccuracy:
    accuracy: np.ndarray
    derivative: np.ndarray
    mean_derivative: float
    t_statistic: float
    p_greater: float
    p_less: float


def cumulative_accuracy(flags: Sequence[bool]) -> CumulativeAccuracy:
    """A(t) = correct among the first t decisions / t, and A'(t) = A(t) - A(t-1).

    The t-test fields test the mean of A' against zero, one-sided in each
    direction; they are NaN when fewer than two differences exist or the
    differences are constant.
    """
    f = np.asarray(flags, dtype=np.float64)
    if f.size < 1:
        raise ScenekitError("need at least one decision")
    acc = np.cumsum(f) / np.arange(1, f.size + 1)
    deriv = np.diff(acc)
    mean = float(deriv.mean()) if deriv.size else 0.0
    t = pg = pl = math.nan
    if deriv.size >= 2 and np.ptp(deriv) > 0:
        t = float(stats.ttest_1samp(deriv, 0.0).statistic)
        pg = float(stats.ttest_1samp(deriv, 0.0, alternative="greater").pvalue)
        pl = float(stats.ttest_1samp(deriv, 0.0, alternative="less").pvalue)
    return CumulativeAccuracy(acc, deriv, mean, t, pg, pl)


# -- disagreement space ----------------------------------------------------------------


def disagreement_distance(records_a, records_b) -> int:
    """Number of clips on which two classifiers predict different labels."""
    return sum(ra.predicted_label != rb.predicted_label for ra, rb in _aligned(records_a, records_b))


def disagreement_matrix(records_by_classifier: Mapping[str, Sequence[DecisionRecord]]) -> tuple[list[str], np.ndarray]:
    ids = list(records_by_classifier)
    n = len(ids)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = disagreement_distance(records_by_classifier[ids[i]], records_by_classifier[ids[j]])
    return ids, d


@dataclass
class MdsEmbedding:
    coordinates: np.ndarray
    stress: float
    eigenvalues: np.ndarray
    distances: np.ndarray
    padded: bool = False

    def to_csv(self, names: Sequence[str]) -> str:
        r = self.coordinates.shape[1]
        lines = ["classifier," + ",".join(f"dim_{i + 1}" for i in range(r))]
        for name, row in zip(names, self.coordinates):
            lines.append(name + "," + ",".join(f"{v:.9f}" for v in row))
        return "\n".join(lines) + "\n"


def mds(distances, r: int = 2) -> MdsEmbedding:
    """Classical (Torgerson) multidimensional scaling.

    Double-centres the squared distances, keeps the top ``r`` positive
    eigenpairs and reports Kruskal-style stress
    sqrt(sum (d - d_hat)^2 / sum d^2) over distinct pairs. When fewer than
    ``r`` eigenvalues are positive the missing dimensions are zero and
    ``padded`` is set.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ScenekitError("distance matrix must be square")
    scale = max(float(np.abs(d).max()), 1.0)
    if not np.allclose(d, d.T, rtol=0, atol=1e-12 * scale) or np.any(np.diag(d) != 0) or np.any(d < 0):
        raise ScenekitError("distance matrix must be symmetric, non-negative, with a zero diagonal")
    if r < 1:
        raise ScenekitError("target dimension must be at least 1")
    n = d.shape[0]
    j = np.eye(n) - np.full((n, n), 1.0 / n)
    b = -0.5 * j @ (d * d) @ j
    b = 0.5 * (b + b.T)
    evals, evecs = np.linalg.eigh(b)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = 1e-10 * max(float(np.abs(evals).max()), 1e-300)
    positive = int(np.sum(evals > tol))
    keep = min(r, positive)
    vecs = evecs[:, :keep]
    if keep:
        flip = np.sign(vecs[np.argmax(np.abs(vecs), axis=0), np.arange(keep)])
        vecs = vecs * np.where(flip == 0, 1.0, flip)
    coords = np.zeros((n, r))
    coords[:, :keep] = vecs * np.sqrt(evals[:keep])
    coords -= coords.mean(axis=0)
    diff = coords[:, None, :] - coords[None, :, :]
    embedded = np.sqrt((diff * diff).sum(axis=-1))
    iu = np.triu_indices(n, 1)
    denom = float((d[iu] ** 2).sum())
    num = float(((d[iu] - embedded[iu]) ** 2).sum())
    stress = math.sqrt(num / denom) if denom > 0 else math.sqrt(num)
    return MdsEmbedding(coords, stress, evals, embedded, padded=keep < r)
