"""
Verification and identification in the shared embedding space, plus the
fold, ablation and model-comparison harnesses built on them.

Scores follow "higher = more similar": score = -||z1 - z2||.
"""

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from sklearn.metrics import auc as trapezoid_auc
from sklearn.metrics import roc_curve

from . import describe_version
from .checkpoint import Checkpoint
from .config import RunConfig, config_from_dict
from .console import get_logger, success
from .datamodel import DatasetManifest, Domain, ManifestEntry
from .errors import ConfigError, ProtocolError, StageDependencyError
from .losses import ABLATION_VARIANTS, ablation_weights
from .networks import UNetEncoder, build_encoder, build_generator

logger = get_logger(__name__)

FAR_BUDGETS = (0.01, 0.001)
SCALAR_METRICS = ("auc", "eer", "gar@0.01", "gar@0.001", "accuracy", "rank1")


# ==========================================
#  TYPES
# ==========================================

@dataclass
class ScoreSet:
    """Genuine and impostor similarity scores (higher = more similar)"""
    genuine_scores: List[float]
    impostor_scores: List[float]

    def validate(self) -> None:
        if not self.genuine_scores or not self.impostor_scores:
            raise ProtocolError("verification needs non-empty genuine and impostor score lists")

    def labelled(self) -> Tuple[np.ndarray, np.ndarray]:
        """(labels, scores) with genuine = 1 for the ROC routines"""
        scores = np.concatenate([np.asarray(self.genuine_scores, dtype=np.float64),
                                 np.asarray(self.impostor_scores, dtype=np.float64)])
        labels = np.concatenate([np.ones(len(self.genuine_scores)), np.zeros(len(self.impostor_scores))])
        return labels, scores


@dataclass
class MetricsReport:
    label: str = ""
    roc: List[Tuple[float, float]] = field(default_factory=list)  # (FAR, GAR)
    thresholds: List[float] = field(default_factory=list)
    auc: float = float("nan")
    eer: float = float("nan")
    gar_at_far: Dict[float, float] = field(default_factory=dict)
    cmc: List[float] = field(default_factory=list)
    accuracy_at_best_threshold: float = float("nan")
    balanced_accuracy: float = float("nan")
    best_threshold: float = float("nan")
    num_genuine: int = 0
    num_impostor: int = 0
    extra: Dict = field(default_factory=dict)
    config: Dict = field(default_factory=dict)
    version: str = field(default_factory=describe_version)

    @property
    def rank1(self) -> float:
        return self.cmc[0] if self.cmc else float("nan")

    def scalars(self) -> Dict[str, float]:
        return {
            "auc": self.auc,
            "eer": self.eer,
            "gar@0.01": self.gar_at_far.get(0.01, float("nan")),
            "gar@0.001": self.gar_at_far.get(0.001, float("nan")),
            "accuracy": self.accuracy_at_best_threshold,
            "rank1": self.rank1,
        }

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["gar_at_far"] = {str(k): v for k, v in self.gar_at_far.items()}
        data["roc"] = [list(p) for p in self.roc]
        return data

    def write_json(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(strict_json(self.to_dict()), encoding="utf-8")
        return path

    def write_csv(self, stem: Path) -> List[Path]:
        """<stem>_roc.csv (far, gar, threshold) and <stem>_cmc.csv (rank, accuracy)"""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        written = []
        roc_path = stem.with_name(stem.name + "_roc.csv")
        with open(roc_path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["far", "gar", "threshold"])
            for (far, gar), t in zip(self.roc, self.thresholds):
                writer.writerow([far, gar, t])
        written.append(roc_path)
        if self.cmc:
            cmc_path = stem.with_name(stem.name + "_cmc.csv")
            with open(cmc_path, "w", newline="", encoding="utf-8") as handle:
                writer = csv.writer(handle)
                writer.writerow(["rank", "accuracy"])
                for k, value in enumerate(self.cmc, start=1):
                    writer.writerow([k, value])
            written.append(cmc_path)
        return written

    def write_svg(self, path: Path) -> Path:
        return plot_curves({self.label or "model": self}, path)


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serialisable")


def _finite(value):
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    if isinstance(value, float):
        return value if math.isfinite(value) else None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite(v) for v in value]
    return value


def strict_json(data) -> str:
    """RFC 8259 JSON: NaN and infinities become null"""
    return json.dumps(_finite(data), indent=2, allow_nan=False, default=_json_default)


def plot_curves(reports: Dict[str, MetricsReport], path: Path) -> Path:
    """ROC (log FAR axis) and CMC side by side as one SVG"""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_roc, ax_cmc) = plt.subplots(1, 2, figsize=(10, 4))
    for name, report in reports.items():
        far = [max(p[0], 1e-4) for p in report.roc]
        gar = [p[1] for p in report.roc]
        ax_roc.plot(far, gar, label=f"{name} (AUC {report.auc:.3f})")
        if report.cmc:
            ax_cmc.plot(range(1, len(report.cmc) + 1), report.cmc, marker=".", label=name)
    ax_roc.set_xscale("log")
    ax_roc.set_xlabel("FAR")
    ax_roc.set_ylabel("GAR")
    ax_roc.set_title("Verification ROC")
    ax_roc.legend(loc="lower right", fontsize="small")
    ax_cmc.set_xlabel("rank")
    ax_cmc.set_ylabel("identification rate")
    ax_cmc.set_title("CMC")
    ax_cmc.legend(loc="lower right", fontsize="small")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


# ==========================================
#  VERIFICATION
# ==========================================

def equal_error_rate(far: np.ndarray, frr: np.ndarray) -> float:
    """FAR where it meets FRR, interpolated linearly between bracketing thresholds"""
    gap = far - frr
    crossing = int(np.argmax(gap >= 0))
    if gap[crossing] < 0:
        return float(far[-1])
    if crossing == 0:
        return float(far[0])
    lo, hi = crossing - 1, crossing
    alpha = -gap[lo] / (gap[hi] - gap[lo])
    return float(far[lo] + alpha * (far[hi] - far[lo]))


def compute_verification(scores: ScoreSet, label: str = "") -> MetricsReport:
    """ROC sweep over every distinct threshold; FAR = P(impostor >= t), GAR = P(genuine >= t)"""
    scores.validate()
    labels, values = scores.labelled()
    far, gar, thresholds = roc_curve(labels, values, pos_label=1, drop_intermediate=False)
    # the reject-all point: smallest float above every score instead of inf
    thresholds = np.where(np.isfinite(thresholds), thresholds, np.nextafter(values.max(), np.inf))
    frr = 1.0 - gar

    gar_at_far = {}
    for budget in FAR_BUDGETS:
        allowed = far <= budget
        gar_at_far[budget] = float(gar[allowed].max())

    n_gen, n_imp = len(scores.genuine_scores), len(scores.impostor_scores)
    balanced = 0.5 * (gar + (1.0 - far))
    best = int(np.argmax(balanced))
    accuracy = (gar[best] * n_gen + (1.0 - far[best]) * n_imp) / (n_gen + n_imp)

    return MetricsReport(
        label=label,
        roc=[(float(a), float(b)) for a, b in zip(far, gar)],
        thresholds=[float(t) for t in thresholds],
        auc=float(trapezoid_auc(far, gar)),
        eer=equal_error_rate(far, frr),
        gar_at_far=gar_at_far,
        accuracy_at_best_threshold=float(accuracy),
        balanced_accuracy=float(balanced[best]),
        best_threshold=float(thresholds[best]),
        num_genuine=n_gen,
        num_impostor=n_imp,
    )


# ==========================================
#  IDENTIFICATION
# ==========================================

def cmc_curve(probe_embeddings: np.ndarray, probe_ids: Sequence[int],
              gallery_embeddings: np.ndarray, gallery_ids: Sequence[int]) -> List[float]:
    """Rank-k identification rates, k = 1..gallery size; ties keep gallery order"""
    gallery_ids = list(gallery_ids)
    if len(set(gallery_ids)) != len(gallery_ids):
        raise ProtocolError("gallery must hold exactly one entry per identity")
    position = {identity: i for i, identity in enumerate(gallery_ids)}
    missing = sorted({int(i) for i in probe_ids} - set(position))
    if missing:
        raise ProtocolError(f"probe identities {missing} are missing from the gallery")
    probes = np.asarray(probe_embeddings, dtype=np.float64)
    gallery = np.asarray(gallery_embeddings, dtype=np.float64)
    distances = np.sqrt(((probes[:, None, :] - gallery[None, :, :]) ** 2).sum(axis=-1))

    ranks = np.empty(len(probe_ids), dtype=np.int64)
    for row, identity in enumerate(probe_ids):
        order = np.argsort(distances[row], kind="stable")
        ranks[row] = int(np.nonzero(order == position[int(identity)])[0][0])
    return [float(np.mean(ranks < k)) for k in range(1, len(gallery_ids) + 1)]


# ==========================================
#  EMBEDDING A SPLIT
# ==========================================

def restore_encoders(checkpoint: Checkpoint) -> Tuple[UNetEncoder, UNetEncoder]:
    """(profile encoder z1, frontal encoder z2) for any learner's checkpoint"""
    model_cfg = config_from_dict(checkpoint.config).model
    if checkpoint.model == "cpgan":
        g_pr = checkpoint.load_into("g_pr", build_generator(model_cfg, 0))
        g_fr = checkpoint.load_into("g_fr", build_generator(model_cfg, 0))
        encoders = (g_pr.encoder, g_fr.encoder)
    elif checkpoint.model in ("cpcnn", "adda"):
        if checkpoint.model == "adda" and checkpoint.stage != "2":
            raise StageDependencyError("an ADDA stage-1 checkpoint has no profile encoder",
                                       field="checkpoint")
        encoders = (checkpoint.load_into("enc_pr", build_encoder(model_cfg, 0)),
                    checkpoint.load_into("enc_fr", build_encoder(model_cfg, 0)))
    else:
        raise ConfigError(f"unknown model {checkpoint.model}", field="model")
    for encoder in encoders:
        encoder.eval()
    return encoders


def embed(encoder: UNetEncoder, manifest: DatasetManifest, entries: Sequence[ManifestEntry],
          batch: int = 64) -> np.ndarray:
    chunks = []
    with torch.no_grad():
        for start in range(0, len(entries), batch):
            images = manifest.tensor(entries[start:start + batch])
            chunks.append(encoder(images).embedding.double().numpy())
    return np.concatenate(chunks) if chunks else np.zeros((0, encoder.config.embedding_dim))


def _check_held_out(checkpoint: Checkpoint, test_folds: Sequence[int]) -> None:
    trained_test = set(checkpoint.config.get("train", {}).get("test_folds", ()) or ())
    leaked = sorted(set(test_folds) - trained_test)
    if leaked:
        raise ProtocolError(
            f"folds {leaked} were used to train this checkpoint (held out: {sorted(trained_test)})")


@dataclass
class EmbeddedSplit:
    profile_z: np.ndarray
    profile_ids: List[int]
    frontal_z: np.ndarray
    frontal_ids: List[int]
    gallery_rows: List[int]  # index into frontal rows, one per identity


def embed_split(checkpoint: Checkpoint, manifest: DatasetManifest,
                test_folds: Sequence[int]) -> EmbeddedSplit:
    if not test_folds:
        raise ConfigError("no test folds given", field="test_folds")
    _check_held_out(checkpoint, test_folds)
    profiles = manifest.select(test_folds, Domain.PROFILE)
    frontals = manifest.select(test_folds, Domain.FRONTAL)
    if not profiles or not frontals:
        raise ProtocolError(f"test folds {list(test_folds)} hold no profile/frontal images")
    enc_pr, enc_fr = restore_encoders(checkpoint)

    gallery_rows, seen = [], set()
    for row, entry in enumerate(frontals):
        if entry.identity not in seen:
            seen.add(entry.identity)
            gallery_rows.append(row)
    return EmbeddedSplit(
        profile_z=embed(enc_pr, manifest, profiles),
        profile_ids=[e.identity for e in profiles],
        frontal_z=embed(enc_fr, manifest, frontals),
        frontal_ids=[e.identity for e in frontals],
        gallery_rows=gallery_rows,
    )


def scores_from_embeddings(profile_z: np.ndarray, profile_ids: Sequence[int],
                           frontal_z: np.ndarray, frontal_ids: Sequence[int]) -> ScoreSet:
    """Every profile x frontal pair, score = -Euclidean distance"""
    distances = np.sqrt(((profile_z[:, None, :] - frontal_z[None, :, :]) ** 2).sum(axis=-1))
    same = np.asarray(profile_ids)[:, None] == np.asarray(frontal_ids)[None, :]
    scores = -distances
    return ScoreSet(genuine_scores=scores[same].tolist(), impostor_scores=scores[~same].tolist())


def score_pairs(checkpoint: Checkpoint, manifest: DatasetManifest, test_folds: Sequence[int]) -> ScoreSet:
    split = embed_split(checkpoint, manifest, test_folds)
    return scores_from_embeddings(split.profile_z, split.profile_ids, split.frontal_z, split.frontal_ids)


def compute_identification(checkpoint: Checkpoint, manifest: DatasetManifest,
                           test_folds: Sequence[int]) -> List[float]:
    """CMC with every test profile as probe and the first frontal of each identity as gallery"""
    split = embed_split(checkpoint, manifest, test_folds)
    return _identification(split)


def _identification(split: EmbeddedSplit) -> List[float]:
    gallery_z = split.frontal_z[split.gallery_rows]
    gallery_ids = [split.frontal_ids[r] for r in split.gallery_rows]
    return cmc_curve(split.profile_z, split.profile_ids, gallery_z, gallery_ids)


def evaluate_checkpoint(checkpoint: Checkpoint, manifest: DatasetManifest,
                        test_folds: Optional[Sequence[int]] = None, label: str = "") -> MetricsReport:
    """Verification plus identification on the held-out folds"""
    if test_folds is None:
        test_folds = checkpoint.config.get("train", {}).get("test_folds") or ()
    test_folds = sorted(set(int(f) for f in test_folds))
    split = embed_split(checkpoint, manifest, test_folds)
    scores = scores_from_embeddings(split.profile_z, split.profile_ids, split.frontal_z, split.frontal_ids)
    report = compute_verification(scores, label=label or checkpoint.model)
    report.cmc = _identification(split)
    report.config = checkpoint.config
    report.extra.update({"model": checkpoint.model, "epoch": checkpoint.epoch, "test_folds": test_folds,
                         "test_identities": len(split.gallery_rows)})
    return report


# ==========================================
#  HARNESSES
# ==========================================

def aggregate_reports(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """Mean and sample standard deviation of each scalar metric"""
    if not reports:
        raise ConfigError("nothing to aggregate", field="reports")
    summary = {}
    for name in SCALAR_METRICS:
        values = np.array([r.scalars()[name] for r in reports], dtype=np.float64)
        summary[name] = {
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            "values": values.tolist(),
        }
    return summary


@dataclass
class ComparisonResult:
    """Reports per variant (one per seed) and the combined ROC table"""
    reports: Dict[str, List[MetricsReport]]
    kind: str = "comparison"

    def median_auc(self, name: str) -> float:
        return float(np.median([r.auc for r in self.reports[name]]))

    def roc_table(self) -> List[Dict]:
        rows = []
        for name, reports in self.reports.items():
            for seed_index, report in enumerate(reports):
                for (far, gar), t in zip(report.roc, report.thresholds):
                    rows.append({"variant": name, "seed_index": seed_index, "far": far,
                                 "gar": gar, "threshold": t})
        return rows

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, reports in self.reports.items():
            for i, report in enumerate(reports):
                stem = out_dir / f"{_slug(name)}_seed{i}"
                report.write_json(stem.with_suffix(".json"))
                report.write_csv(stem)
        with open(out_dir / f"{self.kind}_roc.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=["variant", "seed_index", "far", "gar", "threshold"])
            writer.writeheader()
            writer.writerows(self.roc_table())
        summary = {
            "kind": self.kind,
            "version": describe_version(),
            "variants": {name: {"median_auc": self.median_auc(name),
                                "aggregate": aggregate_reports(reports)}
                         for name, reports in self.reports.items()},
        }
        path = out_dir / f"{self.kind}_summary.json"
        path.write_text(strict_json(summary), encoding="utf-8")
        try:
            plot_curves({name: reports[0] for name, reports in self.reports.items()},
                        out_dir / f"{self.kind}.svg")
        except ImportError:
            logger.warning("matplotlib unavailable, skipping %s.svg", self.kind)
        return path


def _slug(name: str) -> str:
    return name.replace("+", "_")


def _held_out(config: RunConfig) -> List[int]:
    folds = list(config.train.test_folds)
    if not folds:
        raise ConfigError("held-out evaluation needs train.test_folds", field="test_folds")
    return folds


def _variant_config(config: RunConfig, out_dir: Path, seed: int, **changes) -> RunConfig:
    variant = copy.deepcopy(config)
    variant.train.seed = seed
    variant.paths.out = str(out_dir)
    for key, value in changes.items():
        section, attr = key.split("__")
        setattr(getattr(variant, section), attr, value)
    return variant.validate()


def run_ablation(manifest: DatasetManifest, config: RunConfig,
                 seeds: Optional[Sequence[int]] = None, out_dir: Optional[Path] = None) -> ComparisonResult:
    """Train the three loss variants on identical seeds and batches; one report each per seed"""
    from .trainer import train_cpgan

    test_folds = _held_out(config)
    seeds = list(seeds) if seeds else [config.train.seed]
    root = Path(out_dir or config.paths.out)
    reports: Dict[str, List[MetricsReport]] = {v: [] for v in ABLATION_VARIANTS}
    for variant in ABLATION_VARIANTS:
        weights = ablation_weights(config.train.weights, variant)
        for seed in seeds:
            run_cfg = _variant_config(config, root / _slug(variant) / f"seed{seed}", seed,
                                      train__weights=weights, run__model="cpgan", run__ablation=variant)
            logger.info("ablation %s seed %d: lambda=(%g, %g, %g)", variant, seed,
                        weights.lambda1, weights.lambda2, weights.lambda3)
            checkpoint = train_cpgan(manifest, run_cfg)
            report = evaluate_checkpoint(checkpoint, manifest, test_folds, label=variant)
            report.extra["weights"] = asdict(weights)
            report.extra["seed"] = seed
            reports[variant].append(report)
    result = ComparisonResult(reports, kind="ablation")
    result.write(root)
    for variant in ABLATION_VARIANTS:
        success(logger, "ablation %-10s median AUC %.3f", variant, result.median_auc(variant))
    return result


def run_model_comparison(manifest: DatasetManifest, config: RunConfig,
                         models: Sequence[str] = ("cpgan", "cpcnn", "adda"),
                         seeds: Optional[Sequence[int]] = None,
                         out_dir: Optional[Path] = None) -> ComparisonResult:
    """Train each learner with the same seeds and schedule and report all of them"""
    from .baselines import train_model

    test_folds = _held_out(config)
    seeds = list(seeds) if seeds else [config.train.seed]
    root = Path(out_dir or config.paths.out)
    reports: Dict[str, List[MetricsReport]] = {m: [] for m in models}
    for model in models:
        for seed in seeds:
            run_cfg = _variant_config(config, root / model / f"seed{seed}", seed,
                                      run__model=model, run__stage=("both" if model == "adda" else None),
                                      run__ablation=None)
            checkpoint = train_model(manifest, run_cfg)
            report = evaluate_checkpoint(checkpoint, manifest, test_folds, label=model)
            report.extra["seed"] = seed
            reports[model].append(report)
    result = ComparisonResult(reports, kind="comparison")
    result.write(root)
    for model in models:
        success(logger, "%-6s median AUC %.3f", model, result.median_auc(model))
    return result


@dataclass
class KFoldResult:
    fold_reports: List[MetricsReport]
    aggregate: Dict[str, Dict[str, float]]
    fold_groups: List[List[int]]

    def write(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        for i, report in enumerate(self.fold_reports):
            report.write_json(out_dir / f"fold{i}.json")
            report.write_csv(out_dir / f"fold{i}")
        path = out_dir / "kfold_summary.json"
        path.write_text(strict_json({"fold_groups": self.fold_groups, "aggregate": self.aggregate,
                                      "version": describe_version()}), encoding="utf-8")
        return path


def kfold_evaluate(manifest: DatasetManifest, config: RunConfig, num_folds: int,
                   out_dir: Optional[Path] = None) -> KFoldResult:
    """Train on every fold group but one, test on the held-out group, for each group"""
    from .baselines import train_model

    if num_folds < 2:
        raise ConfigError("k-fold needs at least 2 folds", field="num_folds")
    if manifest.num_folds < num_folds:
        raise ConfigError(f"manifest has {manifest.num_folds} folds, {num_folds} requested",
                          field="num_folds")
    groups = [[f for f in range(manifest.num_folds) if f % num_folds == i] for i in range(num_folds)]
    root = Path(out_dir or config.paths.out)
    reports = []
    for i, test_folds in enumerate(groups):
        run_cfg = _variant_config(config, root / f"fold{i}", config.train.seed,
                                  train__test_folds=tuple(test_folds))
        train_ids = set(manifest.identities(manifest.split(test_folds)[0]))
        if train_ids & set(manifest.identities(test_folds)):
            raise ProtocolError(f"fold group {i} shares identities with its training folds")
        checkpoint = train_model(manifest, run_cfg)
        reports.append(evaluate_checkpoint(checkpoint, manifest, test_folds, label=f"fold{i}"))
    result = KFoldResult(reports, aggregate_reports(reports), groups)
    result.write(root)
    auc = result.aggregate["auc"]
    success(logger, "%d-fold AUC %.3f +/- %.3f", num_folds, auc["mean"], auc["std"])
    return result
