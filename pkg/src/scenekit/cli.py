"""Command-line front end: extract | train | classify | evaluate | rank | mds.

Exit codes: 0 success, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import re
import sys
from dataclasses import dataclass
from pathlib import Path

from . import CoverageError, FeatureError, ScenekitError, __version__
from .dataset import AudioClip, load_manifest, read_manifest_rows, read_wav, stratified_kfold
from .decision import classify_features, load_bundle, save_bundle, train_bundle
from .evaluation import (
    MV_ID,
    DecisionRecord,
    PipelineConfig,
    accuracy_of,
    disagreement_matrix,
    majority_vote_ensemble,
    mds,
    per_file_accuracy,
    rank_with_boxes,
    read_decisions,
    run_cross_validation,
    write_decisions,
)
from .features import Recipe, extract, read_cache_header, read_feature_cache, write_feature_cache
from .models import EmConfig

log = logging.getLogger("scenekit")


@dataclass
class RunConfig:
    recipe: str = "mfcc:13,normalize"
    frame_ms: float = 50.0
    hop_fraction: float = 0.5
    window: str = "hamming"
    n_mels: int = 26
    model: str = "gmm"
    gmm_k: int = 8
    em_tol: float = 1e-5
    em_max_iter: int = 200
    em_n_init: int = 3
    var_floor: float = 1e-4
    criterion: str = "ml"
    knn_k: int = 1
    priors: str | None = None
    folds: int = 5
    seed: int = 0
    alpha: float = 0.05
    manifest: str | None = None
    cache_dir: str | None = None
    output_dir: str | None = None

    # locations do not change results, so they stay out of the hash
    _UNHASHED = ("cache_dir", "output_dir")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ScenekitError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def settings(self) -> dict:
        return {k: v for k, v in self.to_dict().items() if k not in self._UNHASHED}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.settings(), sort_keys=True).encode()).hexdigest()[:16]

    def build_recipe(self) -> Recipe:
        return Recipe.parse(self.recipe, frame_ms=self.frame_ms, hop_fraction=self.hop_fraction,
                            window=self.window, n_mels=self.n_mels)

    def pipeline(self) -> PipelineConfig:
        em = EmConfig(self.gmm_k, self.em_tol, self.em_max_iter, self.em_n_init, self.var_floor, self.seed)
        return PipelineConfig(self.build_recipe(), self.model, self.criterion, em, self.knn_k,
                              priors=self.priors, seed=self.seed)

    def stamp(self) -> str:
        return f"scenekit {__version__} config={self.config_hash()}"


def _meta(config: RunConfig) -> dict:
    return {"toolkit": __version__, "config_hash": config.config_hash(), "config": config.settings()}


def _write_json(path: Path, data: dict):
    path.write_text(json.dumps(data, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _require(value, flag):
    if value is None:
        raise ScenekitError(f"{flag} is required")
    return value


def _outdir(config: RunConfig) -> Path:
    out = Path(_require(config.output_dir, "--output-dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- feature cache --------------------------------------------------------------------


def cache_path(cache_dir: Path, clip_id: str) -> Path:
    safe = re.sub(r"[^A-Za-z0-9._-]+", "_", clip_id)[-80:]
    digest = hashlib.sha1(clip_id.encode()).hexdigest()[:8]
    return cache_dir / f"{safe}.{digest}.feat"


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_extract(config: RunConfig) -> dict:
    """Write one feature cache per clip, skipping files that are already current.

    A cache is current when both the audio content hash and the recipe
    fingerprint in its header match. Per-file failures are collected rather
    than aborting the run.
    """
    recipe = config.build_recipe()
    cache_dir = Path(_require(config.cache_dir, "--cache-dir"))
    cache_dir.mkdir(parents=True, exist_ok=True)
    written, skipped, failed = [], [], []
    for audio, label, clip_id in read_manifest_rows(_require(config.manifest, "--manifest")):
        target = cache_path(cache_dir, clip_id)
        try:
            digest = _file_sha256(audio) if audio.is_file() else None
            if digest and target.is_file():
                try:
                    header = read_cache_header(target)
                    if header.get("source_sha256") == digest and header["recipe_fingerprint"] == recipe.fingerprint():
                        skipped.append(clip_id)
                        continue
                except FeatureError:
                    pass
            samples, rate = read_wav(audio)
            if samples.size == 0:
                raise ScenekitError(f"empty audio file: {audio}")
            fm = extract(AudioClip(samples, rate, clip_id), recipe)
            write_feature_cache(target, fm, recipe, {"source_sha256": digest, "label": label,
                                                     "config_hash": config.config_hash()})
            written.append(clip_id)
        except ScenekitError as exc:
            failed.append((str(audio), str(exc)))
            log.error("%s", exc)
    return {"written": written, "skipped": skipped, "failed": failed}


def _load_features(config: RunConfig, dataset, recipe: Recipe):
    """Raw features per clip id, taken from valid caches where available."""
    if not config.cache_dir:
        return None
    cache_dir = Path(config.cache_dir)
    features = {}
    for clip in dataset.clips:
        target = cache_path(cache_dir, clip.id)
        if target.is_file():
            fm, header = read_feature_cache(target)
            if header["recipe_fingerprint"] != recipe.fingerprint():
                raise FeatureError(
                    f"{target}: cached with recipe {header['recipe']} but the config asks for {recipe.spec()}"
                )
            features[clip.id] = fm
        else:
            features[clip.id] = extract(clip, recipe)
    return features


# -- train / classify / evaluate ---------------------------------------------------------


def cmd_train(config: RunConfig, bundle_path) -> Path:
    dataset = load_manifest(_require(config.manifest, "--manifest"))
    pipe = config.pipeline()
    feats = _load_features(config, dataset, pipe.recipe)
    feats = [feats[c.id] for c in dataset.clips] if feats else [extract(c, pipe.recipe) for c in dataset.clips]
    bundle = train_bundle(feats, dataset.labels, pipe.recipe, kind=config.model, em=pipe.em,
                          universe=dataset.universe, priors=config.priors, knn_k=config.knn_k)
    bundle_path = Path(bundle_path)
    save_bundle(bundle, bundle_path, {"meta": _meta(config)})
    return bundle_path


def cmd_classify(config: RunConfig, bundle_path, output) -> list[DecisionRecord]:
    bundle = load_bundle(bundle_path)
    records = []
    for audio, label, clip_id in read_manifest_rows(_require(config.manifest, "--manifest")):
        samples, rate = read_wav(audio)
        p = classify_features(extract(AudioClip(samples, rate, clip_id), bundle.recipe), bundle, config.criterion)
        records.append(DecisionRecord(clip_id, label, p.label, criterion=config.criterion, score=p.score))
    write_decisions(output, records, [config.stamp()])
    return records


def cmd_evaluate(config: RunConfig):
    """Stratified k-fold evaluation; writes decisions, report, confusion and fold plan."""
    out = _outdir(config)
    dataset = load_manifest(_require(config.manifest, "--manifest"))
    pipe = config.pipeline()
    plan = stratified_kfold(dataset, config.folds, config.seed)
    features = None if config.model in ("echo", "random") else _load_features(config, dataset, pipe.recipe)
    report, records = run_cross_validation(dataset, plan, pipe, features, classifier_id=config.model)
    write_decisions(out / "decisions.csv", records, [config.stamp()])
    _write_json(out / "report.json", {**report.to_dict(), **_meta(config)})
    (out / "confusion.csv").write_text(f"# {config.stamp()}\n" + report.confusion.to_csv(), encoding="utf-8")
    (out / "confusion_percent.csv").write_text(
        f"# {config.stamp()}\n" + report.confusion.to_csv(percent=True), encoding="utf-8")
    _write_json(out / "folds.json", {**json.loads(plan.to_json()), **_meta(config)})
    print(f"accuracy {report.mean_accuracy:.6f} ± {report.half_width:.6f}")
    return report, records


# -- rank / mds -------------------------------------------------------------------------------


def _load_decision_sets(paths) -> dict[str, list[DecisionRecord]]:
    """Decision sets keyed by file stem, or by parent directory when stems collide."""
    paths = [Path(p) for p in paths]
    stems = [p.stem for p in paths]
    names = stems if len(set(stems)) == len(stems) else [p.parent.name or p.stem for p in paths]
    if len(set(names)) != len(names):
        names = [str(p.with_suffix("")) for p in paths]
    return {n: read_decisions(p, n) for n, p in zip(names, paths)}


def cmd_rank(config: RunConfig, decision_paths):
    if len(decision_paths) < 2:
        raise ScenekitError("rank needs at least 2 decision files")
    out = _outdir(config)
    sets = _load_decision_sets(decision_paths)
    sets.pop(MV_ID, None)
    result = rank_with_boxes(sets, config.alpha)
    mv = majority_vote_ensemble(sets)
    data = {**result.to_dict(), "majority_vote_accuracy": accuracy_of(mv), **_meta(config)}
    _write_json(out / "ranking.json", data)
    lines = [f"# {config.stamp()}", "box,first,last,members"]
    for b, (i, j) in enumerate(result.boxes):
        lines.append(f"{b},{i},{j},{' '.join(result.order[i:j + 1])}")
    (out / "boxes.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    pfa = per_file_accuracy(sets)
    (out / "per_file_histogram.csv").write_text(f"# {config.stamp()}\n" + pfa.histogram_csv(), encoding="utf-8")
    write_decisions(out / "MV.csv", mv, [config.stamp()])
    for name, acc in zip(result.order, result.accuracies):
        print(f"{name:<24} {acc:.6f}")
    print(f"{MV_ID + ' (not ranked)':<24} {accuracy_of(mv):.6f}")
    for i, j in result.boxes:
        print("box: " + " ".join(result.order[i:j + 1]))
    return result


def cmd_mds(config: RunConfig, decision_paths, dims: int = 2):
    if len(decision_paths) < 3:
        raise ScenekitError("mds needs at least 3 decision files")
    out = _outdir(config)
    sets = _load_decision_sets(decision_paths)
    names, dist = disagreement_matrix(sets)
    emb = mds(dist, dims)
    (out / "mds.csv").write_text(f"# {config.stamp()}\n" + emb.to_csv(names), encoding="utf-8")
    rows = ["classifier," + ",".join(names)]
    rows += [n + "," + ",".join(str(int(v)) for v in row) for n, row in zip(names, dist)]
    (out / "disagreements.csv").write_text(f"# {config.stamp()}\n" + "\n".join(rows) + "\n", encoding="utf-8")
    print(f"stress {emb.stress:.6f}" + (" (padded: too few positive eigenvalues)" if emb.padded else ""))
    return emb


# -- argument parsing ----------------------------------------------------------------------------

_FLAG_FIELDS = {
    "recipe": str, "frame_ms": float, "hop_fraction": float, "window": str, "n_mels": int,
    "model": str, "gmm_k": int, "em_tol": float, "em_max_iter": int, "em_n_init": int,
    "var_floor": float, "criterion": str, "knn_k": int, "priors": str, "folds": int, "seed": int,
    "alpha": float, "manifest": str, "cache_dir": str, "output_dir": str,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenekit", description="Acoustic scene classification toolkit")
    parser.add_argument("--version", action="version", version=f"scenekit {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON RunConfig file; explicit flags override its values")
    for name, typ in _FLAG_FIELDS.items():
        common.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("extract", parents=[common], help="write per-clip feature caches")
    p = sub.add_parser("train", parents=[common], help="fit a classifier bundle on a manifest")
    p.add_argument("--bundle", required=True)
    p = sub.add_parser("classify", parents=[common], help="classify a manifest with a trained bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--output", required=True)
    sub.add_parser("evaluate", parents=[common], help="stratified k-fold cross-validation")
    p = sub.add_parser("rank", parents=[common], help="sign-test ranking of decision files")
    p.add_argument("decisions", nargs="+")
    p = sub.add_parser("mds", parents=[common], help="MDS of pairwise classifier disagreements")
    p.add_argument("decisions", nargs="+")
    p.add_argument("--dims", type=int, default=2)
    return parser


def resolve_config(args) -> RunConfig:
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for name in _FLAG_FIELDS:
        value = getattr(args, name)
        if value is not None:
            base[name] = value
    return RunConfig.from_dict(base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        if args.command == "extract":
            res = cmd_extract(config)
            print(f"written {len(res['written'])}, up to date {len(res['skipped'])}, failed {len(res['failed'])}")
            for path, msg in res["failed"]:
                print(f"error: {msg}", file=sys.stderr)
            return 1 if res["failed"] else 0
        if args.command == "train":
            print(cmd_train(config, args.bundle))
        elif args.command == "classify":
            records = cmd_classify(config, args.bundle, args.output)
            print(f"classified {len(records)} clips, accuracy {accuracy_of(records):.6f}")
        elif args.command == "evaluate":
            cmd_evaluate(config)
        elif args.command == "rank":
            cmd_rank(config, args.decisions)
        elif args.command == "mds":
            cmd_mds(config, args.decisions, args.dims)
        return 0
    except (ScenekitError, CoverageError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
