"""Per-modality temporal encoder, projection head and checkpoint archive."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, CorruptionError, FormatError, NumericError

PE_PLACEMENTS = ("after_projection", "raw", "none")
HEAD_ACTIVATIONS = ("gelu", "identity")
NORM_EPS = 1e-12


@dataclass
class EncoderConfig:
    num_layers: int = 2
    num_heads: int = 2
    model_dim: int = 128
    mlp_hidden: int = 128
    positional_base: float = 10000.0
    dropout: float = 0.0
    # where the sinusoidal code is added: after the input projection (default),
    # straight onto the raw features (needs even raw dims), or not at all
    pos_encoding: str = "after_projection"
    head_bias: bool = True
    head_activation: str = "gelu"

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "model_dim", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.model_dim % 2:
            raise ConfigError(f"model_dim must be even for the sinusoidal code, got {self.model_dim}")
        if not self.positional_base > 0:
            raise ConfigError(f"positional_base must be positive, got {self.positional_base}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.pos_encoding not in PE_PLACEMENTS:
            raise ConfigError(f"pos_encoding must be one of {PE_PLACEMENTS}, got {self.pos_encoding!r}")
        if self.head_activation not in HEAD_ACTIVATIONS:
            raise ConfigError(f"head_activation must be one of {HEAD_ACTIVATIONS}")


def positional_encoding(positions, dim: int, base: float = 10000.0):
    """Sinusoidal code: sin at even columns, cos at odd columns.

    ``positions`` may be a numpy array or a tensor of any leading shape; the
    result has one extra trailing axis of size ``dim`` and matches the input
    container type.
    """
    if dim % 2:
        raise ConfigError(f"positional encoding needs an even dimension, got {dim}")
    as_numpy = not isinstance(positions, torch.Tensor)
    pos = torch.as_tensor(np.asarray(positions, dtype=np.float64)) if as_numpy else positions
    if not pos.is_floating_point():
        pos = pos.double()
    i = torch.arange(dim // 2, dtype=pos.dtype, device=pos.device)
    freq = torch.pow(torch.as_tensor(base, dtype=pos.dtype), -2.0 * i / dim)
    angle = pos.unsqueeze(-1) * freq
    pe = torch.stack((torch.sin(angle), torch.cos(angle)), dim=-1).flatten(-2)
    return pe.numpy() if as_numpy else pe


def timestamps_to_positions(timestamps, fps: float) -> np.ndarray:
    """Scaled positions for the sinusoid: original frame indices."""
    return np.asarray(timestamps, dtype=np.float64) * float(fps)


class EncoderLayer(nn.Module):
    """Pre-norm bidirectional self-attention block."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        D = cfg.model_dim
        self.norm1 = nn.LayerNorm(D)
        self.attn = nn.MultiheadAttention(D, cfg.num_heads, dropout=cfg.dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(D)
        self.ff = nn.Sequential(
            nn.Linear(D, cfg.mlp_hidden),
            nn.GELU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.mlp_hidden, D),
        )
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, pad_mask=None):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, key_padding_mask=pad_mask, need_weights=False)
        x = x + self.drop(h)
        return x + self.drop(self.ff(self.norm2(x)))


class ProjectionHead(nn.Module):
    def __init__(self, dim: int, bias: bool = True, activation: str = "gelu"):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim, bias=bias)
        self.act = nn.GELU() if activation == "gelu" else nn.Identity()
        self.fc2 = nn.Linear(dim, dim, bias=bias)

    def forward(self, x):
        h = self.fc2(self.act(self.fc1(x)))
        return h / (torch.linalg.vector_norm(h, dim=-1, keepdim=True) + NORM_EPS)


class TemporalEncoder(nn.Module):
    """Raw features of one modality -> adapted features (``encode``) -> unit projections (``project``)."""

    def __init__(self, in_dim: int, cfg: EncoderConfig):
        super().__init__()
        if cfg.pos_encoding == "raw" and in_dim % 2:
            raise ConfigError(f"pos_encoding='raw' needs an even raw dimension, got {in_dim}")
        self.cfg = cfg
        self.in_dim = in_dim
        self.input_proj = nn.Linear(in_dim, cfg.model_dim)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.num_layers))
        self.final_norm = nn.LayerNorm(cfg.model_dim)
        self.head = ProjectionHead(cfg.model_dim, cfg.head_bias, cfg.head_activation)

    def encode(self, raw, positions, pad_mask=None):
        """raw: (B, N, D_i) or (N, D_i); positions: matching (B, N) or (N,)."""
        squeeze = raw.dim() == 2
        if squeeze:
            raw, positions = raw.unsqueeze(0), positions.unsqueeze(0)
            pad_mask = None if pad_mask is None else pad_mask.unsqueeze(0)
        if raw.shape[-1] != self.in_dim:
            raise ConfigError(f"expected raw dim {self.in_dim}, got {raw.shape[-1]}")
        if positions.shape != raw.shape[:2]:
            raise ConfigError(f"positions shape {tuple(positions.shape)} != {tuple(raw.shape[:2])}")
        base = self.cfg.positional_base
        positions = positions.to(raw.dtype)
        if self.cfg.pos_encoding == "raw":
            raw = raw + positional_encoding(positions, self.in_dim, base)
        x = self.input_proj(raw)
        if self.cfg.pos_encoding == "after_projection":
            x = x + positional_encoding(positions, self.cfg.model_dim, base)
        for i, layer in enumerate(self.layers):
            x = layer(x, pad_mask)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activations after encoder layer {i}")
        x = self.final_norm(x)
        return x.squeeze(0) if squeeze else x

    def project(self, adapted):
        return self.head(adapted)

    def forward(self, raw, positions, pad_mask=None):
        return self.project(self.encode(raw, positions, pad_mask))


class MultiCueModel(nn.Module):
    """One ``TemporalEncoder`` per modality, in training-modality order."""

    def __init__(self, input_dims: dict[str, int], cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.modality_names = list(input_dims)
        self.input_dims = dict(input_dims)
        self.encoders = nn.ModuleDict({m: TemporalEncoder(d, cfg) for m, d in input_dims.items()})

    def __getitem__(self, name: str) -> TemporalEncoder:
        return self.encoders[name]

    @torch.no_grad()
    def adapted_features(self, record, modalities: Optional[list[str]] = None) -> np.ndarray:
        """Full-length adapted features of a video; several modalities are concatenated frame-wise."""
        names = modalities or self.modality_names[:1]
        positions = torch.as_tensor(timestamps_to_positions(record.timestamps, record.fps))
        dtype = next(self.parameters()).dtype
        outs = []
        for m in names:
            if m not in self.encoders:
                raise ConfigError(f"model has no encoder for modality {m!r}; has {self.modality_names}")
            raw = torch.tensor(np.asarray(record.modalities[m].data), dtype=dtype)
            outs.append(self.encoders[m].encode(raw, positions.to(dtype)))
        return torch.cat(outs, dim=-1).double().numpy()


def init_parameters(model: nn.Module, generator: torch.Generator) -> None:
    """Fan-in scaled uniform weights, zero biases, unit/zero normalization parameters."""
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, nn.LayerNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        for name, p in model.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if "norm" in name:
                continue
            if p.dim() >= 2:
                bound = math.sqrt(3.0 / p.shape[1])
                p.copy_(torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 * bound - bound)
            elif leaf.endswith("bias"):
                p.zero_()


def build_model(input_dims: dict[str, int], cfg: EncoderConfig, seed: int = 0,
                dtype=torch.float32) -> MultiCueModel:
    model = MultiCueModel(input_dims, cfg)
    gen = torch.Generator().manual_seed(int(seed))
    init_parameters(model, gen)
    return model.to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- checkpoint archive ----------------------------------------------------
#
# magic b"STPC" | version u32 | meta_len u64 | meta JSON (utf-8, sorted keys)
# followed by one block per tensor listed in meta["tensors"], each an
# STPF-style block: b"STPF" | u32 version | u64 rows | u64 cols | payload,
# payload little-endian in the tensor's declared dtype, row-major.

CKPT_MAGIC = b"STPC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sIQ")
_BLOCK_HEADER = struct.Struct("<4sIQQ")
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def _as_2d(shape) -> tuple[int, int]:
    if len(shape) == 0:
        return 1, 1
    return int(shape[0]), int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1


def save_checkpoint(path, model: MultiCueModel, meta: Optional[dict] = None,
                    extra_tensors: Optional[dict[str, torch.Tensor]] = None) -> None:
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    index = []
    blocks = []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy()
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ConfigError(f"cannot serialize tensor {name} of dtype {dtype}")
        rows, cols = _as_2d(arr.shape)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        blocks.append(_BLOCK_HEADER.pack(b"STPF", 1, rows, cols) + payload)
        index.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
    doc = {
        "format": "stepkit-checkpoint",
        "encoder_config": asdict(model.cfg),
        "modality_names": model.modality_names,
        "input_dims": model.input_dims,
        "tensors": index,
        "meta": meta or {},
    }
    meta_bytes = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(meta_bytes)))
        fh.write(meta_bytes)
        for b in blocks:
            fh.write(b)


def load_checkpoint(path) -> tuple[MultiCueModel, dict, dict[str, torch.Tensor]]:
    """Returns (model, user meta, extra tensors not belonging to the model)."""
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: too short for a checkpoint header")
    magic, version, mlen = _CKPT_HEADER.unpack_from(raw, 0)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise FormatError(f"{path}: not a stepkit checkpoint (magic {magic!r}, version {version})")
    off = _CKPT_HEADER.size
    doc = json.loads(raw[off:off + mlen])
    off += mlen
    tensors = {}
    for entry in doc["tensors"]:
        if off + _BLOCK_HEADER.size > len(raw):
            raise CorruptionError(f"{path}: truncated before tensor {entry['name']}")
        bmagic, _, rows, cols = _BLOCK_HEADER.unpack_from(raw, off)
        off += _BLOCK_HEADER.size
        if bmagic != b"STPF":
            raise FormatError(f"{path}: bad block magic for {entry['name']}")
        np_dtype = np.dtype(_DTYPES[entry["dtype"]])
        n = rows * cols
        if off + n * np_dtype.itemsize > len(raw):
            raise CorruptionError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(raw, dtype=np_dtype, count=n, offset=off).reshape(entry["shape"])
        off += n * np_dtype.itemsize
        tensors[entry["name"]] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("=")))
    cfg = EncoderConfig(**doc["encoder_config"])
    model = MultiCueModel({m: int(doc["input_dims"][m]) for m in doc["modality_names"]}, cfg)
    state = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    extra = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return model, doc["meta"], extra
