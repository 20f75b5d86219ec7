"""Embedding a dataset with a trained model and scoring it end to end."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .datamodel import Manifest, VideoRecord
from .encoder import MultiCueModel
from .errors import ConfigError, DataError
from .evaluation import (
    AVERAGING_MODES,
    PHASE_FRACTIONS,
    EvalReport,
    average_scores,
    baseline_random,
    baseline_uniform,
    kendalls_tau,
    ksl_metrics,
    phase_classification,
)
from .keysteps import ExtractConfig, KeyStepResult, cluster_features, extract_key_steps

log = logging.getLogger(__name__)

BASELINES = ("random", "uniform", "raw")


@dataclass
class EvalOptions:
    num_clusters: int = 7
    modalities: Optional[list[str]] = None  # None = first modality
    baselines: list[str] = field(default_factory=list)
    fractions: tuple[float, ...] = PHASE_FRACTIONS
    subsample: int = 1  # keep every n-th frame when scoring
    clustering: str = "kmeans"
    seed: int = 0

    def validate(self) -> None:
        if self.num_clusters < 1:
            raise ConfigError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if self.subsample < 1:
            raise ConfigError(f"subsample must be >= 1, got {self.subsample}")
        unknown = [b for b in self.baselines if b not in BASELINES]
        if unknown:
            raise ConfigError(f"unknown baselines {unknown}; supported: {', '.join(BASELINES)}")
        for f in self.fractions:
            if not 0 < f <= 1:
                raise ConfigError(f"phase fractions must be in (0, 1], got {f}")


FeatureFn = Callable[[VideoRecord], np.ndarray]


def model_features(model: MultiCueModel, modalities: Optional[list[str]] = None) -> FeatureFn:
    return lambda rec: model.adapted_features(rec, modalities)


def raw_features(names: list[str]) -> FeatureFn:
    return lambda rec: rec.features(names).astype(np.float64)


def extract_all(manifest: Manifest, features: FeatureFn, cfg: ExtractConfig) -> dict[str, KeyStepResult]:
    cfg.validate()
    return {rec.video_id: extract_key_steps(features(rec), rec.timestamps, cfg) for rec in manifest}


def _require_steps(manifest: Manifest) -> None:
    if not manifest.has_step_labels:
        missing = [r.video_id for r in manifest if r.step_labels is None]
        raise DataError(f"manifest lacks step_labels for videos: {', '.join(missing)}")


def ksl_scores(labels_per_video: list[np.ndarray], gt_per_video: list[np.ndarray],
               num_clusters: int, stride: int = 1) -> dict[str, dict]:
    out = {}
    for mode in AVERAGING_MODES:
        scores = [ksl_metrics(p[::stride], g[::stride], mode, num_clusters)
                  for p, g in zip(labels_per_video, gt_per_video)]
        out[mode] = average_scores(scores).to_json()
    return out


def cluster_labels(feats: list[np.ndarray], K: int, algorithm: str, seed: int) -> list[np.ndarray]:
    return [cluster_features(x, K, algorithm, seed)[1] for x in feats]


def phase_split(n_videos: int) -> tuple[list[int], list[int]]:
    """Last ``max(1, V // 5)`` videos are held out; a single video is split inside itself."""
    if n_videos < 2:
        return [0], []
    n_test = max(1, n_videos // 5)
    return list(range(n_videos - n_test)), list(range(n_videos - n_test, n_videos))


def phase_accuracies(feats: list[np.ndarray], labels: list[np.ndarray], fractions, seed: int) -> dict:
    train_idx, test_idx = phase_split(len(feats))
    if test_idx:
        tr_x = np.concatenate([feats[i] for i in train_idx])
        tr_y = np.concatenate([labels[i] for i in train_idx])
        te_x = np.concatenate([feats[i] for i in test_idx])
        te_y = np.concatenate([labels[i] for i in test_idx])
    else:
        # one video: even frames train, odd frames test
        tr_x, te_x = feats[0][0::2], feats[0][1::2]
        tr_y, te_y = labels[0][0::2], labels[0][1::2]
    return {str(f): phase_classification(tr_x, tr_y, te_x, te_y, f, seed) for f in fractions}


def tau_pairs(feats: list[np.ndarray], ids: list[str]) -> dict:
    pairs = []
    for i, j in itertools.combinations(range(len(feats)), 2):
        pairs.append({"a": ids[i], "b": ids[j], "tau": kendalls_tau(feats[i], feats[j])})
    mean = float(np.mean([p["tau"] for p in pairs])) if pairs else None
    return {"pairs": pairs, "mean": mean}


def evaluate(manifest: Manifest, features: FeatureFn, opts: EvalOptions,
             meta: Optional[dict] = None) -> EvalReport:
    """Key-step localization, phase probe and Kendall's tau for one feature source plus baselines."""
    opts.validate()
    _require_steps(manifest)
    K = opts.num_clusters
    stride = opts.subsample
    records = manifest.records
    gt = [np.asarray(r.step_labels) for r in records]
    feats = [features(r) for r in records]
    report = EvalReport(meta=dict(meta or {}))
    report.meta.update({"num_clusters": K, "videos": len(records), "subsample": stride})

    report.ksl["model"] = ksl_scores(cluster_labels(feats, K, opts.clustering, opts.seed), gt, K, stride)
    for name in opts.baselines:
        if name == "random":
            preds = [baseline_random(r.frame_count, K, opts.seed + i) for i, r in enumerate(records)]
        elif name == "uniform":
            preds = [baseline_uniform(r.frame_count, K) for r in records]
        else:
            raw = [raw_features(manifest.modality_names)(r) for r in records]
            preds = cluster_labels(raw, K, opts.clustering, opts.seed)
        report.ksl[name] = ksl_scores(preds, gt, K, stride)

    if manifest.has_phase_labels and opts.fractions:
        phases = [np.asarray(r.phase_labels)[::stride] for r in records]
        report.phase_accuracy = phase_accuracies([x[::stride] for x in feats], phases,
                                                 opts.fractions, opts.seed)
    else:
        log.info("skipping phase classification: no phase_labels in manifest")
    if len(records) >= 2:
        report.kendalls_tau = tau_pairs([x[::stride] for x in feats], [r.video_id for r in records])
    return report
