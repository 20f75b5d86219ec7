"""Synthetic multi-cue procedural recordings with known step structure.

Each video is a sequence of contiguous step segments separated by short
background stretches. Every frame's feature in modality ``m`` is the step's
prototype for ``m`` plus isotropic Gaussian noise. A step may recur later in
the video (separated by at least one other step) using the *same* prototype,
which gives the bootstrapped window an unambiguous false-negative to recover.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .datamodel import FeatureSequence, Manifest, VideoRecord
from .errors import ConfigError


@dataclass
class SynthConfig:
    num_videos: int = 5
    num_steps: int = 5
    frames_per_video: int = 500
    modalities: int = 2
    dims: Sequence[int] = (64, 32)
    background_fraction: float = 0.1
    repeat_probability: float = 0.0
    cue_noise: Union[float, Sequence[float]] = 0.1
    fps: float = 1.0
    seed: int = 0
    modality_names: Optional[Sequence[str]] = None

    def noise_scales(self) -> list[float]:
        if np.isscalar(self.cue_noise):
            return [float(self.cue_noise)] * self.modalities
        return [float(s) for s in self.cue_noise]

    def names(self) -> list[str]:
        if self.modality_names is not None:
            return list(self.modality_names)
        return [f"m{i + 1}" for i in range(self.modalities)]

    def validate(self) -> None:
        K, T = self.num_steps, self.frames_per_video
        if self.num_videos < 1:
            raise ConfigError(f"num_videos must be >= 1, got {self.num_videos}")
        if K < 2:
            raise ConfigError(f"num_steps must be >= 2, got {K}")
        if T < 10 * K:
            raise ConfigError(f"frames_per_video must be >= 10 * num_steps ({10 * K}), got {T}")
        if self.modalities < 1:
            raise ConfigError(f"modalities must be >= 1, got {self.modalities}")
        if len(self.dims) != self.modalities:
            raise ConfigError(f"expected {self.modalities} dims, got {list(self.dims)}")
        if any(d < 2 for d in self.dims):
            raise ConfigError(f"all dims must be >= 2, got {list(self.dims)}")
        if not 0.0 <= self.background_fraction < 1.0:
            raise ConfigError(f"background_fraction must be in [0, 1), got {self.background_fraction}")
        if not 0.0 <= self.repeat_probability <= 1.0:
            raise ConfigError(f"repeat_probability must be in [0, 1], got {self.repeat_probability}")
        noise = self.noise_scales()
        if len(noise) != self.modalities or any(not np.isfinite(s) or s < 0 for s in noise):
            raise ConfigError(f"cue_noise must be >= 0 per modality, got {self.cue_noise}")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        if len(self.names()) != self.modalities or len(set(self.names())) != self.modalities:
            raise ConfigError(f"need {self.modalities} distinct modality names, got {self.names()}")
        fg = T - int(round(self.background_fraction * T))
        if fg < 4 * K:
            raise ConfigError("background_fraction leaves too few foreground frames for the steps")


@dataclass
class SynthGroundTruth:
    step_labels: list[np.ndarray]
    phase_labels: list[np.ndarray]
    # modality -> (K_true + 1, dim); the last row is the background prototype
    prototypes: dict[str, np.ndarray]
    # per video: list of (step, start, stop) with stop exclusive, in temporal order
    segments: list[list[tuple[int, int, int]]] = field(default_factory=list)

    @property
    def num_steps(self) -> int:
        return next(iter(self.prototypes.values())).shape[0] - 1

    def repeated_steps(self, video: int) -> list[int]:
        seen: dict[int, int] = {}
        for step, _, _ in self.segments[video]:
            seen[step] = seen.get(step, 0) + 1
        return sorted(s for s, c in seen.items() if c > 1)


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _step_sequence(rng: np.random.Generator, K: int, repeat_probability: float) -> list[int]:
    order = list(range(K))
    for _ in range(int(rng.integers(0, K // 2 + 1))):
        i = int(rng.integers(0, K - 1))
        order[i], order[i + 1] = order[i + 1], order[i]
    seq = list(order)
    for step in order:
        if rng.random() >= repeat_probability:
            continue
        pos = seq.index(step)
        # insertion slot j puts the repeat before seq[j]; keep >= 1 other step in between
        slots = [
            j for j in range(pos + 2, len(seq) + 1)
            if seq[j - 1] != step and (j == len(seq) or seq[j] != step)
        ]
        if slots:
            seq.insert(int(rng.choice(slots)), step)
    return seq


def _integer_lengths(weights: np.ndarray, total: int) -> np.ndarray:
    # largest-remainder rounding, every part >= 1
    n = len(weights)
    base = np.ones(n, dtype=np.int64)
    share = weights / weights.sum() * (total - n)
    floor = np.floor(share).astype(np.int64)
    rest = total - n - floor.sum()
    order = np.argsort(-(share - floor), kind="stable")
    floor[order[:rest]] += 1
    return base + floor


def _video_layout(rng: np.random.Generator, cfg: SynthConfig):
    K, T = cfg.num_steps, cfg.frames_per_video
    seq = _step_sequence(rng, K, cfg.repeat_probability)
    n_bg = int(round(cfg.background_fraction * T))
    n_fg = T - n_bg
    lengths = _integer_lengths(rng.uniform(0.5, 1.5, len(seq)), n_fg)
    gaps = rng.multinomial(n_bg, np.full(len(seq) + 1, 1.0 / (len(seq) + 1)))
    labels = np.empty(T, dtype=np.int64)
    segments = []
    t = 0
    for i, step in enumerate(seq):
        labels[t:t + gaps[i]] = -1
        t += int(gaps[i])
        labels[t:t + lengths[i]] = step
        segments.append((step, t, t + int(lengths[i])))
        t += int(lengths[i])
    labels[t:] = -1
    return labels, segments


def generate(config: SynthConfig) -> tuple[Manifest, SynthGroundTruth]:
    config.validate()
    K = config.num_steps
    names = config.names()
    noise = config.noise_scales()
    root = np.random.SeedSequence(config.seed)
    proto_seed, *video_seeds = root.spawn(1 + config.num_videos)
    proto_rng = np.random.default_rng(proto_seed)
    prototypes = {name: _unit_rows(proto_rng, K + 1, dim) for name, dim in zip(names, config.dims)}

    records, steps, phases, all_segments = [], [], [], []
    for v, vseed in enumerate(video_seeds):
        rng = np.random.default_rng(vseed)
        labels, segments = _video_layout(rng, config)
        proto_idx = np.where(labels < 0, K, labels)
        mods = {}
        for name, scale in zip(names, noise):
            clean = prototypes[name][proto_idx]
            feats = clean + scale * rng.standard_normal(clean.shape) if scale > 0 else clean
            mods[name] = FeatureSequence(name, feats, fps=config.fps)
        phase = proto_idx.copy()
        records.append(VideoRecord(f"video{v:03d}", mods, labels, phase))
        steps.append(labels)
        phases.append(phase)
        all_segments.append(segments)
    gt = SynthGroundTruth(steps, phases, prototypes, all_segments)
    return Manifest(records, names), gt


def separability_report(manifest: Manifest, gt: SynthGroundTruth) -> float:
    """Accuracy of a nearest-prototype classifier on the raw features (background is its own class)."""
    K = gt.num_steps
    correct = total = 0
    for rec, labels in zip(manifest.records, gt.step_labels):
        dist = np.zeros((rec.frame_count, K + 1))
        for name in manifest.modality_names:
            x = rec.modalities[name].data.astype(np.float64)
            p = gt.prototypes[name]
            dist += ((x[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)
        pred = np.argmin(dist, axis=1)
        truth = np.where(labels < 0, K, labels)
        correct += int((pred == truth).sum())
        total += len(truth)
    return correct / total
