"""Temporal sampling augmentation, the optimization loop and gradient checking."""

from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .bmc2 import (LossConfig, WindowSet, bmc2_loss_from_windows, bootstrap_features, build_windows,
                   pairwise_distance)
from .datamodel import Manifest, VideoRecord
from .encoder import EncoderConfig, MultiCueModel, build_model, timestamps_to_positions
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    num_chunks: int = 1024
    temporal_extent: float = 1.0
    batch_size: int = 4
    learning_rate: float = 1e-3
    epochs: int = 300
    lr_drop_epoch: Optional[int] = None
    seed: int = 0
    deterministic: bool = True
    threads: Optional[int] = None
    prefetch: bool = False
    dtype: str = "float32"
    loss: LossConfig = field(default_factory=LossConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.num_chunks < 2:
            raise ConfigError(f"num_chunks must be >= 2, got {self.num_chunks}")
        if not 0.0 < self.temporal_extent <= 1.0:
            raise ConfigError(f"temporal_extent must be in (0, 1], got {self.temporal_extent}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        self.loss.validate()
        self.encoder.validate()

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.epoch_loss)

    def to_json(self, include_timing: bool = True) -> dict:
        doc = {"epochs": len(self.epoch_loss), "epoch_loss": list(self.epoch_loss)}
        if include_timing:
            doc["epoch_seconds"] = list(self.epoch_seconds)
        return doc


def sample_chunks(T: int, N: int, beta: float, rng: np.random.Generator) -> np.ndarray:
    """One random frame per chunk of a random extent covering about ``beta * T`` frames.

    Returns fewer than ``N`` indices when the extent is shorter than ``N``.
    """
    if T < 2:
        raise DataError(f"need at least 2 frames to sample chunks, got T={T}")
    if N < 1:
        raise ConfigError(f"N must be positive, got {N}")
    extent = min(T, max(1, int(round(beta * T))))
    start = int(rng.integers(0, T - extent + 1))
    n = min(N, extent)
    bounds = start + (np.arange(n + 1) * extent) // n
    return rng.integers(bounds[:-1], bounds[1:]).astype(np.int64)


@dataclass
class Sample:
    """Gathered inputs for one video of a minibatch."""

    raw: dict[str, np.ndarray]       # modality -> (N, D_i)
    positions: np.ndarray            # (N,) frame-index positions for the sinusoid
    pad: np.ndarray                  # (N,) True where the row is padding
    windows: WindowSet


def prepare_sample(rec: VideoRecord, names: list[str], cfg: TrainConfig,
                   rng: np.random.Generator) -> Sample:
    idx = sample_chunks(rec.frame_count, cfg.num_chunks, cfg.temporal_extent, rng)
    n_real = len(idx)
    if n_real < cfg.num_chunks:
        idx = np.concatenate([idx, np.full(cfg.num_chunks - n_real, idx[-1])])
    pad = np.arange(len(idx)) >= n_real
    raw = {m: np.asarray(rec.modalities[m].data)[idx] for m in names}
    ts = rec.timestamps[idx]
    valid = ~pad[:, None] & ~pad[None, :]
    boot = bootstrap_features(raw, names, cfg.loss)
    windows = build_windows(boot, ts, cfg.loss, valid=valid, rng=rng)
    return Sample(raw, timestamps_to_positions(ts, rec.fps), pad, windows)


def batch_loss(model: MultiCueModel, samples: list[Sample], loss_cfg: LossConfig):
    """Mean over videos of the per-video objective."""
    dtype = next(model.parameters()).dtype
    names = model.modality_names
    positions = torch.as_tensor(np.stack([s.positions for s in samples]), dtype=dtype)
    pad = torch.as_tensor(np.stack([s.pad for s in samples]))
    pad_mask = pad if pad.any() else None
    projected = {}
    for m in names:
        raw = torch.as_tensor(np.stack([s.raw[m] for s in samples]), dtype=dtype)
        projected[m] = model[m](raw, positions, pad_mask)
    losses = [
        bmc2_loss_from_windows([projected[m][b] for m in names], s.windows, loss_cfg)
        for b, s in enumerate(samples)
    ]
    return torch.stack(losses).mean()


def _configure_torch(cfg: TrainConfig) -> None:
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    elif cfg.threads:
        torch.set_num_threads(int(cfg.threads))


def _optimizer_state_tensors(opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for i, st in opt.state_dict()["state"].items():
        for k, v in st.items():
            t = v if isinstance(v, torch.Tensor) else torch.tensor(float(v))
            out[f"optim/{i}/{k}"] = t.detach().clone()
    return out


def _restore_optimizer(opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    sd = opt.state_dict()
    state: dict[int, dict] = {}
    for key, t in tensors.items():
        if not key.startswith("optim/"):
            continue
        _, i, k = key.split("/")
        state.setdefault(int(i), {})[k] = t.clone()
    sd["state"] = state
    opt.load_state_dict(sd)


@dataclass
class TrainState:
    """Everything needed to continue a run."""

    model: MultiCueModel
    history: TrainHistory
    epochs_done: int = 0
    rng_state: Optional[dict] = None
    optimizer_tensors: dict = field(default_factory=dict)


def train(manifest: Manifest, cfg: TrainConfig, resume: Optional[TrainState] = None,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainState:
    """Optimize the per-modality encoders on every video of ``manifest``.

    Returns the final ``TrainState``; ``state.model`` holds the parameters.
    """
    cfg.validate()
    if len(manifest) == 0:
        raise DataError("cannot train on an empty manifest")
    problems = manifest.violations()
    if problems:
        raise DataError("manifest failed validation: " + "; ".join(problems[:5]))
    _configure_torch(cfg)
    names = list(manifest.modality_names)
    dims = {m: manifest.records[0].modalities[m].dim for m in names}

    if resume is None:
        torch.manual_seed(cfg.seed)
        model = build_model(dims, cfg.encoder, seed=cfg.seed, dtype=cfg.torch_dtype)
        history = TrainHistory()
        rng = np.random.default_rng(cfg.seed)
        epochs_done = 0
    else:
        model, history, epochs_done = resume.model, resume.history, resume.epochs_done
        if list(model.modality_names) != names:
            raise ConfigError(f"checkpoint modalities {model.modality_names} != manifest {names}")
        rng = np.random.default_rng()
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state

    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    if resume is not None and resume.optimizer_tensors:
        _restore_optimizer(opt, resume.optimizer_tensors)

    records = manifest.records
    model.train()
    pool = ThreadPoolExecutor(max_workers=1) if cfg.prefetch else None
    try:
        for epoch in range(epochs_done, cfg.epochs):
            lr = cfg.learning_rate
            if cfg.lr_drop_epoch is not None and epoch >= cfg.lr_drop_epoch:
                lr *= 0.1
            for group in opt.param_groups:
                group["lr"] = lr
            t0 = time.perf_counter()
            order = rng.permutation(len(records))
            batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]

            def prep(b):
                return [prepare_sample(records[i], names, cfg, rng) for i in b]

            losses = []
            pending = pool.submit(prep, batches[0]) if pool else None
            for bi, batch in enumerate(batches):
                if pool:
                    samples = pending.result()
                    if bi + 1 < len(batches):
                        pending = pool.submit(prep, batches[bi + 1])
                else:
                    samples = prep(batch)
                try:
                    loss = batch_loss(model, samples, cfg.loss)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch} batch {bi}: {exc}") from exc
                if not torch.isfinite(loss):
                    raise NumericError(f"non-finite loss at epoch {epoch} batch {bi}")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
            history.epoch_loss.append(float(np.mean(losses)))
            history.epoch_seconds.append(time.perf_counter() - t0)
            log.info("epoch %d loss %.6f", epoch + 1, history.epoch_loss[-1])
            if on_epoch is not None:
                on_epoch(epoch, history.epoch_loss[-1])
    finally:
        if pool:
            pool.shutdown()
    model.eval()
    return TrainState(model, history, cfg.epochs if cfg.epochs > epochs_done else epochs_done,
                      rng.bit_generator.state, _optimizer_state_tensors(opt))


def _flat_direction(params, generator, only: Optional[int] = None):
    dirs = []
    for i, p in enumerate(params):
        if only is None or i == only:
            dirs.append(torch.randn(p.shape, generator=generator, dtype=p.dtype))
        else:
            dirs.append(torch.zeros_like(p))
    norm = torch.sqrt(sum((d * d).sum() for d in dirs))
    return [d / norm for d in dirs]


def gradient_check(model: MultiCueModel, samples: list[Sample], loss_cfg: LossConfig,
                   eps: float = 1e-5, num_directions: int = 4, per_tensor: bool = True,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference directional derivatives.

    Runs on a float64 copy of ``model``. Directions: ``num_directions`` random
    directions over all parameters, plus (``per_tensor``) one random direction
    confined to each parameter tensor.
    """
    m64 = copy.deepcopy(model).double()
    m64.eval()
    params = [p for p in m64.parameters() if p.requires_grad]
    gen = torch.Generator().manual_seed(seed)

    def f():
        with torch.no_grad():
            return float(batch_loss(m64, samples, loss_cfg))

    m64.zero_grad(set_to_none=True)
    loss = batch_loss(m64, samples, loss_cfg)
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]

    directions = [_flat_direction(params, gen) for _ in range(num_directions)]
    if per_tensor:
        directions += [_flat_direction(params, gen, only=i) for i in range(len(params))]
    worst = 0.0
    for dirs in directions:
        analytic = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            f_plus = f()
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            f_minus = f()
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (f_plus - f_minus) / (2 * eps)
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst


def hinge_gap(model: MultiCueModel, samples: list[Sample], loss_cfg: LossConfig) -> float:
    """Smallest |d - margin| over negative pairs; small values put a hinge kink near the test point."""
    gap = float("inf")
    with torch.no_grad():
        batch = []
        dtype = next(model.parameters()).dtype
        for s in samples:
            pos = torch.as_tensor(s.positions, dtype=dtype)
            qs = [model[m](torch.as_tensor(s.raw[m], dtype=dtype), pos) for m in model.modality_names]
            batch.append(qs)
        for s, qs in zip(samples, batch):
            neg = torch.as_tensor(s.windows.negative_mask())
            for qu in qs:
                for qv in qs:
                    d = pairwise_distance(qu, qv)[neg]
                    if d.numel():
                        gap = min(gap, float((d - loss_cfg.margin).abs().min()))
    return gap
