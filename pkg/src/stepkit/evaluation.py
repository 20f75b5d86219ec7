"""Key-step localization metrics, phase-classification probe, Kendall's tau and baselines."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from sklearn.svm import LinearSVC

from .errors import ConfigError, DataError

AVERAGING_MODES = ("per_step", "overall")
PHASE_FRACTIONS = (0.1, 0.5, 1.0)


def overlap_matrix(pred, gt, clusters, steps) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    keep = (gt >= 0) & (pred >= 0)
    ci = {c: i for i, c in enumerate(clusters)}
    si = {s: i for i, s in enumerate(steps)}
    O = np.zeros((len(clusters), len(steps)), dtype=np.int64)
    for p, g in zip(pred[keep], gt[keep]):
        if p in ci and g in si:
            O[ci[p], si[g]] += 1
    return O


def _best_total(O: np.ndarray) -> int:
    if O.size == 0:
        return 0
    r, c = linear_sum_assignment(O, maximize=True)
    return int(O[r, c].sum())


def _label_sets(pred, gt, num_clusters, num_steps):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    clusters = set(int(x) for x in np.unique(pred[pred >= 0]))
    steps = set(int(x) for x in np.unique(gt[gt >= 0]))
    if num_clusters is not None:
        clusters |= set(range(num_clusters))
    if num_steps is not None:
        steps |= set(range(num_steps))
    return sorted(clusters), sorted(steps)


def hungarian_match(pred_labels, gt_labels, num_clusters: Optional[int] = None,
                    num_steps: Optional[int] = None) -> dict[int, int]:
    """One-to-one cluster -> step map of size min(K, S) with maximal frame overlap.

    Background (-1) frames never count. Among optimal matchings the one that is
    lexicographically smallest in cluster order is returned: cluster 0 takes
    the lowest step it can while staying optimal, then cluster 1, and so on
    (being matched is preferred over being left out).
    """
    clusters, steps = _label_sets(pred_labels, gt_labels, num_clusters, num_steps)
    O = overlap_matrix(pred_labels, gt_labels, clusters, steps)
    K, S = O.shape
    target = _best_total(O)
    need = min(K, S)
    mapping: dict[int, int] = {}
    fixed = 0
    cols = list(range(S))
    for k in range(K):
        rows_after = list(range(k + 1, K))
        chosen = False
        for s in cols:
            rest = [c for c in cols if c != s]
            if len(mapping) + 1 + min(len(rows_after), len(rest)) != need:
                continue
            total = fixed + O[k, s] + _best_total(O[np.ix_(rows_after, rest)])
            if total == target:
                mapping[k] = s
                fixed += int(O[k, s])
                cols = rest
                chosen = True
                break
        if not chosen:
            # leaving k unmatched must still allow an optimal full-size matching
            assert len(mapping) + min(len(rows_after), len(cols)) == need
    return {clusters[k]: steps[s] for k, s in mapping.items()}


@dataclass
class StepScore:
    precision: float
    recall: float
    f1: float
    iou: float


@dataclass
class KSLScores:
    precision: float
    recall: float
    f1: float
    iou: float
    mode: str
    per_step: dict[int, StepScore] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_step"] = {str(k): asdict(v) for k, v in self.per_step.items()}
        return d


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _canonical_match(pred: np.ndarray, gt: np.ndarray, num_clusters: Optional[int]) -> dict[int, int]:
    """Hungarian match on clusters renamed by content, so the tie rule never depends on cluster ids.

    Clusters are ranked by (frame count, overlap row); clusters that still tie are
    interchangeable for every metric.
    """
    clusters, steps = _label_sets(pred, gt, num_clusters, None)
    O = overlap_matrix(pred, gt, clusters, steps)
    sizes = [int((pred == c).sum()) for c in clusters]
    order = sorted(range(len(clusters)), key=lambda i: (sizes[i], tuple(O[i]), clusters[i]))
    rank = {clusters[i]: r for r, i in enumerate(order)}
    canon = np.array([rank.get(int(p), -1) for p in pred], dtype=np.int64)
    mapping = hungarian_match(canon, gt, num_clusters=len(clusters))
    return {clusters[order[r]]: s for r, s in mapping.items()}


def ksl_metrics(pred_labels, gt_labels, mode: str = "per_step",
                num_clusters: Optional[int] = None) -> KSLScores:
    """Precision/recall/F1/IoU after Hungarian matching (invariant to cluster relabeling).

    ``per_step`` averages precision, recall and IoU over the ground-truth steps
    present (an unmatched step scores 0) and reports F1 as the harmonic mean of
    the averaged precision and recall. ``overall`` pools frames over all steps.
    """
    if mode not in AVERAGING_MODES:
        raise ConfigError(f"mode must be one of {AVERAGING_MODES}, got {mode!r}")
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape:
        raise DataError(f"label length mismatch: pred {pred.shape} vs gt {gt.shape}")
    gt_key = gt >= 0
    if not gt_key.any():
        raise DataError("ground truth has no key-step frames; metrics undefined")
    pred_key = pred >= 0
    mapping = _canonical_match(pred, gt, num_clusters)

    steps = sorted(int(s) for s in np.unique(gt[gt_key]))
    inverse = {s: k for k, s in mapping.items()}
    per_step = {}
    correct = 0
    for s in steps:
        in_gt = gt == s
        k = inverse.get(s)
        if k is None:
            per_step[s] = StepScore(0.0, 0.0, 0.0, 0.0)
            continue
        in_pred = pred == k
        tp = int((in_gt & in_pred).sum())
        correct += tp
        p = tp / int(in_pred.sum()) if in_pred.any() else 0.0
        r = tp / int(in_gt.sum())
        iou = tp / int((in_gt | in_pred).sum())
        per_step[s] = StepScore(p, r, _f1(p, r), iou)

    if mode == "per_step":
        p = float(np.mean([v.precision for v in per_step.values()]))
        r = float(np.mean([v.recall for v in per_step.values()]))
        iou = float(np.mean([v.iou for v in per_step.values()]))
    else:
        n_pred = int(pred_key.sum())
        n_gt = int(gt_key.sum())
        p = correct / n_pred if n_pred else 0.0
        r = correct / n_gt
        iou = correct / (n_pred + n_gt - correct)
    return KSLScores(p, r, _f1(p, r), iou, mode, per_step)


def average_scores(scores: list[KSLScores]) -> KSLScores:
    """Mean over videos; F1 re-derived from the averaged precision and recall."""
    if not scores:
        raise DataError("no scores to average")
    p = float(np.mean([s.precision for s in scores]))
    r = float(np.mean([s.recall for s in scores]))
    iou = float(np.mean([s.iou for s in scores]))
    return KSLScores(p, r, _f1(p, r), iou, scores[0].mode)


# -- phase classification --------------------------------------------------


def stratified_subset(labels, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Indices covering ``fraction`` of each class, at least one example per class."""
    labels = np.asarray(labels)
    picked = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        n = min(len(idx), max(1, int(round(fraction * len(idx)))))
        picked.append(idx if n == len(idx) else rng.choice(idx, size=n, replace=False))
    return np.sort(np.concatenate(picked))


def phase_classification(train_x, train_y, test_x, test_y, fraction: float = 1.0,
                         seed: int = 0, C: float = 1.0) -> float:
    """Per-frame accuracy of a linear max-margin probe fit on ``fraction`` of the training frames."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    train_x = np.asarray(train_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    rng = np.random.default_rng(seed)
    sub = stratified_subset(train_y, fraction, rng)
    classes = np.unique(train_y[sub])
    if len(classes) < 2:
        # a single class cannot be separated; predict it everywhere
        return float(np.mean(np.asarray(test_y) == classes[0]))
    clf = LinearSVC(C=C, max_iter=20000, random_state=seed)
    clf.fit(train_x[sub], train_y[sub])
    pred = clf.predict(np.asarray(test_x, dtype=np.float64))
    return float(np.mean(pred == np.asarray(test_y)))


# -- Kendall's tau ---------------------------------------------------------


def nearest_neighbors(emb_a, emb_b) -> np.ndarray:
    d = cdist(np.asarray(emb_a, dtype=np.float64), np.asarray(emb_b, dtype=np.float64))
    return np.argmin(d, axis=1)  # lowest index wins ties


def kendalls_tau(emb_a, emb_b) -> float:
    """Rank agreement of frame order in ``emb_a`` with the order of their nearest neighbors in ``emb_b``.

    Pairs whose retrieved indices coincide count as discordant.
    """
    a = np.asarray(emb_a)
    if a.shape[0] < 2 or np.asarray(emb_b).shape[0] < 2:
        raise DataError("Kendall's tau needs at least two frames per video")
    nn = nearest_neighbors(a, emb_b)
    return tau_from_retrieval(nn)


def tau_from_retrieval(nn) -> float:
    nn = np.asarray(nn)
    n = len(nn)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    # for i < j, (i - j) < 0, so the pair is concordant iff nn[i] < nn[j]
    concordant = int((nn[:, None] < nn[None, :])[upper].sum())
    total = n * (n - 1) // 2
    return (2 * concordant - total) / total


# -- baselines -------------------------------------------------------------


def baseline_random(T: int, K: int, seed: int = 0) -> np.ndarray:
    if T < K:
        raise DataError(f"T={T} < K={K}")
    return np.random.default_rng(seed).integers(0, K, size=T)


def baseline_uniform(T: int, K: int) -> np.ndarray:
    if T < K:
        raise DataError(f"T={T} < K={K}")
    return (np.arange(T) * K) // T


@dataclass
class EvalReport:
    ksl: dict = field(default_factory=dict)         # method -> mode -> scores json
    phase_accuracy: dict = field(default_factory=dict)  # fraction -> accuracy
    kendalls_tau: dict = field(default_factory=dict)    # {"pairs": [...], "mean": x}
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)
