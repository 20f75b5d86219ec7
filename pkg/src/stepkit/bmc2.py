"""Window construction and the bootstrapped multi-cue contrastive objective.

Notation used below: ``N`` sampled frames of one video, ``M`` modalities,
``W`` the sigma-window over true timestamps, ``W_prime`` the window
recovered from raw-feature distances, ``W_tilde`` their union.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
from scipy.spatial.distance import cdist

from .errors import ConfigError

BOOTSTRAP_VARIANTS = ("union_pos_neg", "union_neg_only", "sampled_only", "none")
REDUCTIONS = ("mean_over_pairs", "sum")
GAMMA_POSITIONS = ("chunk_index", "normalized")


@dataclass
class LossConfig:
    sigma: float = 10.0  # seconds
    margin: float = 2.0
    # M x M weights in modality order; None selects the default scheme
    lambdas: Optional[list[list[float]]] = None
    bootstrap_enabled: bool = True
    bootstrap_modality: Optional[str] = None  # None = first modality, or "concat"
    bootstrap_variant: str = "union_pos_neg"
    reduction: str = "mean_over_pairs"
    delta_includes_anchor: bool = True
    max_negatives: Optional[int] = None
    # temporal weighting positions: sampled index 0..N-1, or that index divided by N-1
    gamma_positions: str = "chunk_index"

    @property
    def variant(self) -> str:
        return self.bootstrap_variant if self.bootstrap_enabled else "none"

    def validate(self) -> None:
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not self.margin > 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.bootstrap_variant not in BOOTSTRAP_VARIANTS:
            raise ConfigError(f"bootstrap_variant must be one of {BOOTSTRAP_VARIANTS}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}")
        if self.gamma_positions not in GAMMA_POSITIONS:
            raise ConfigError(f"gamma_positions must be one of {GAMMA_POSITIONS}")
        if self.max_negatives is not None and self.max_negatives < 1:
            raise ConfigError("max_negatives must be positive when set")
        if self.lambdas is not None:
            lam = np.asarray(self.lambdas, dtype=np.float64)
            if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
                raise ConfigError(f"lambdas must be square, got shape {lam.shape}")
            if not np.all(np.diag(lam) == 1.0):
                raise ConfigError("lambda diagonal entries must all be 1")

    def lambda_matrix(self, num_modalities: int) -> np.ndarray:
        M = num_modalities
        if self.lambdas is not None:
            lam = np.asarray(self.lambdas, dtype=np.float64)
            if lam.shape != (M, M):
                raise ConfigError(f"lambdas shape {lam.shape} does not match {M} modalities")
            return lam
        if M <= 2:
            return np.ones((M, M))
        # more than two cues: same-cue terms plus terms anchored on the appearance cue
        lam = np.eye(M)
        lam[0, :] = 1.0
        return lam


@dataclass
class WindowSet:
    W: np.ndarray
    W_prime: np.ndarray
    W_tilde: np.ndarray
    delta: np.ndarray
    variant: str = "union_pos_neg"
    # pairs excluded from the loss (padding duplicates); True = usable
    valid: Optional[np.ndarray] = None
    negative_keep: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def anchors(self) -> np.ndarray:
        return np.arange(self.W.shape[0])

    def _usable(self) -> np.ndarray:
        n = self.W.shape[0]
        mask = ~np.eye(n, dtype=bool)
        if self.valid is not None:
            mask &= self.valid
        return mask

    def positive_mask(self) -> np.ndarray:
        pos = {
            "union_pos_neg": self.W_tilde,
            "union_neg_only": self.W,
            "sampled_only": self.W_prime,
            "none": self.W,
        }[self.variant]
        return pos & self._usable()

    def negative_mask(self) -> np.ndarray:
        excl = {
            "union_pos_neg": self.W_tilde,
            "union_neg_only": self.W_tilde,
            "sampled_only": self.W_prime,
            "none": self.W,
        }[self.variant]
        neg = ~excl & self._usable()
        if self.negative_keep is not None:
            neg &= self.negative_keep
        return neg

    def to_json(self) -> dict:
        return {
            "variant": self.variant,
            "delta": [float(x) for x in self.delta],
            "W": self.W.astype(int).tolist(),
            "W_prime": self.W_prime.astype(int).tolist(),
            "W_tilde": self.W_tilde.astype(int).tolist(),
        }


def sigma_window(timestamps, sigma: float) -> np.ndarray:
    ts = np.asarray(timestamps, dtype=np.float64)
    return np.abs(ts[:, None] - ts[None, :]) <= sigma


def raw_distances(raw) -> np.ndarray:
    x = np.asarray(raw, dtype=np.float64)
    return cdist(x, x)


def bootstrap_window(raw, W, anchor: int, variant: str = "union_pos_neg",
                     include_anchor: bool = True):
    """Threshold, recovered row and final row for a single anchor.

    Distances are Euclidean on the raw rows exactly as given.
    """
    x = np.asarray(raw, dtype=np.float64)
    d = np.linalg.norm(x - x[anchor], axis=1)
    return _bootstrap_rows(d[None, :], np.asarray(W)[anchor][None, :], np.array([anchor]),
                           variant, include_anchor)


def _bootstrap_rows(dist, W, anchors, variant, include_anchor):
    inside = W.copy()
    if not include_anchor:
        inside[np.arange(len(anchors)), anchors] = False
    cnt = inside.sum(axis=1)
    delta = np.where(cnt > 0, (dist * inside).sum(axis=1) / np.maximum(cnt, 1), 0.0)
    W_prime = dist <= delta[:, None]
    if variant == "sampled_only":
        W_tilde = W_prime | False
    elif variant == "none":
        W_tilde = W.copy()
    else:
        W_tilde = W | W_prime
    if len(anchors) == 1:
        return float(delta[0]), W_prime[0], W_tilde[0]
    return delta, W_prime, W_tilde


def build_windows(raw, timestamps, cfg: LossConfig, valid: Optional[np.ndarray] = None,
                  rng: Optional[np.random.Generator] = None) -> WindowSet:
    """Windows for every anchor of a sampled sub-sequence.

    ``raw`` are the bootstrap-modality raw rows (N x D_i); ``timestamps`` in seconds.
    """
    W = sigma_window(timestamps, cfg.sigma)
    n = W.shape[0]
    variant = cfg.variant
    if variant == "none":
        W_prime = np.zeros_like(W)
        W_tilde = W.copy()
        delta = np.zeros(n)
    else:
        dist = raw_distances(raw)
        np.fill_diagonal(dist, 0.0)
        delta, W_prime, W_tilde = _bootstrap_rows(dist, W, np.arange(n), "union_pos_neg",
                                                  cfg.delta_includes_anchor)
        if n == 1:
            delta, W_prime, W_tilde = np.array([delta]), W_prime[None, :], W_tilde[None, :]
    ws = WindowSet(W, W_prime, W_tilde, np.asarray(delta, dtype=np.float64), variant, valid)
    if cfg.max_negatives is not None:
        ws.negative_keep = _cap_negatives(ws.negative_mask(), cfg.max_negatives,
                                          rng or np.random.default_rng(0))
    return ws


def _cap_negatives(neg: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    keep = np.zeros_like(neg)
    for a in range(neg.shape[0]):
        idx = np.flatnonzero(neg[a])
        if len(idx) > cap:
            idx = rng.choice(idx, size=cap, replace=False)
        keep[a, idx] = True
    return keep


def bootstrap_features(raw_by_modality: dict[str, np.ndarray], names: Sequence[str],
                       cfg: LossConfig) -> np.ndarray:
    choice = cfg.bootstrap_modality
    if choice is None:
        return np.asarray(raw_by_modality[names[0]])
    if choice == "concat":
        return np.concatenate([np.asarray(raw_by_modality[m]) for m in names], axis=1)
    if choice not in raw_by_modality:
        raise ConfigError(f"bootstrap modality {choice!r} not among {list(names)}")
    return np.asarray(raw_by_modality[choice])


def cidm_pair_loss(q_a, q_j, t_a: float, t_j: float, w: int, margin: float) -> float:
    d = float(np.linalg.norm(np.asarray(q_a, dtype=np.float64) - np.asarray(q_j, dtype=np.float64)))
    gamma = (t_a - t_j) ** 2 + 1.0
    return w * d / gamma + (1 - w) * gamma * max(0.0, margin - d)


def pairwise_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Euclidean distances with a zero (not NaN) gradient at coincident rows."""
    sq = (a * a).sum(-1)[:, None] + (b * b).sum(-1)[None, :] - 2.0 * a @ b.T
    sq = sq.clamp_min(0.0)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def bmc2_loss_from_windows(Q: Union[Sequence[torch.Tensor], dict], windows: WindowSet,
                           cfg: LossConfig, positions=None,
                           return_count: bool = False):
    """Loss for one video given precomputed windows.

    ``positions`` are the values fed to the temporal weighting; default is the
    sampled index 0..N-1.
    """
    qs = list(Q.values()) if isinstance(Q, dict) else list(Q)
    M = len(qs)
    lam = cfg.lambda_matrix(M)
    n = qs[0].shape[0]
    if any(q.shape[0] != n for q in qs):
        raise ConfigError("all modalities must share the sampled length N")
    ref = qs[0]
    if positions is None:
        t = torch.arange(n, dtype=ref.dtype)
        if cfg.gamma_positions == "normalized" and n > 1:
            t = t / (n - 1)
    else:
        t = torch.as_tensor(positions, dtype=ref.dtype)
    gamma = (t[:, None] - t[None, :]) ** 2 + 1.0
    pos = torch.as_tensor(windows.positive_mask())
    neg = torch.as_tensor(windows.negative_mask())
    pos_w = pos.to(ref.dtype) / gamma
    neg_w = neg.to(ref.dtype) * gamma
    pairs = int((pos | neg).sum())
    total = ref.new_zeros(())
    count = 0
    for u in range(M):
        for v in range(M):
            if lam[u, v] == 0:
                continue
            d = pairwise_distance(qs[u], qs[v])
            term = (pos_w * d).sum() + (neg_w * torch.relu(cfg.margin - d)).sum()
            total = total + float(lam[u, v]) * term
            count += pairs
    if cfg.reduction == "mean_over_pairs":
        loss = total / max(count, 1)
    else:
        loss = total
    return (loss, count) if return_count else loss


def bmc2_loss(Q, raw, timestamps, cfg: LossConfig, positions=None, valid=None, rng=None):
    """Returns ``(loss, windows)``; ``raw`` are the bootstrap-modality raw rows."""
    cfg.validate()
    qs = list(Q.values()) if isinstance(Q, dict) else list(Q)
    if cfg.lambdas is not None and np.asarray(cfg.lambdas).shape != (len(qs), len(qs)):
        raise ConfigError(
            f"lambda matrix {np.asarray(cfg.lambdas).shape} does not match {len(qs)} modalities"
        )
    windows = build_windows(raw, timestamps, cfg, valid=valid, rng=rng)
    return bmc2_loss_from_windows(qs, windows, cfg, positions), windows
