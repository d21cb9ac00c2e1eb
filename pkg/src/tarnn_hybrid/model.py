"""Time-aware BiGRU with self-attention and dual-level (visit/feature) attention.

Forward pass, per window::

    v_t   = mean of frozen code embeddings in visit t (padding ignored)
    v~_t  = v_t + TE(e_t)                      sinusoidal elapsed-time code
    h_t   = BiGRU(v~)_t                        2 layers, dropout between layers
    H_att = LayerNorm(H + MHA(H, H, H))
    alpha = softmax_t(w_a . H_att_t + b_a)
    beta_t = softmax_j(tanh(W_b H_att_t + b_b))
    c     = sum_t alpha_t (beta_t * v_t)
    y     = sigmoid(MLP([context_scale * c ; demographics]))

Cost per window is O(T K d + L T h (d + h) + H T^2 h); the T^2 term comes
from the pairwise visit interactions in self-attention.

``context_scale`` (default ``d``) undoes the 1/d magnitude that a
near-uniform feature softmax puts on ``c``, so the MLP sees inputs on the
scale of a visit embedding.  It multiplies the MLP input only; ``c``,
``alpha`` and ``beta`` are reported unscaled.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, FormatError, NumericError
from .ontology import EmbeddingMatrix


@dataclass
class ModelConfig:
    d: int
    h: int = 32
    layers: int = 2
    heads: int = 4
    lam: float = 10000.0
    dropout: float = 0.2
    k_max: int = 32
    t_s: int = 4
    demo_dim: int = 0
    mlp_hidden: Optional[Tuple[int, ...]] = None
    context_scale: Optional[float] = None
    use_visit_attention: bool = True
    use_feature_attention: bool = True
    use_time_encoding: bool = True

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = (self.d,)
        self.mlp_hidden = tuple(int(x) for x in self.mlp_hidden)
        if self.context_scale is None:
            self.context_scale = float(self.d)
        if min(self.d, self.h, self.layers, self.heads, self.k_max, self.t_s) < 1 or self.demo_dim < 0:
            raise ConfigError("model dimensions must be >= 1")
        if self.d % 2:
            raise ConfigError(f"embedding dim d={self.d} must be even for the sinusoidal encoding")
        if (2 * self.h) % self.heads:
            raise ConfigError(f"heads={self.heads} must divide the BiGRU width 2h={2 * self.h}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.lam <= 0:
            raise ConfigError("lam must be positive")

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["mlp_hidden"] = list(self.mlp_hidden)
        return out

    @classmethod
    def from_dict(cls, data) -> "ModelConfig":
        return cls(**data)


@dataclass
class ForwardOutput:
    """Batched forward results; leading dimension is the batch."""

    risk: torch.Tensor
    logit: torch.Tensor
    alpha: torch.Tensor
    beta: torch.Tensor
    visit_vectors: torch.Tensor
    context: torch.Tensor

    def sample(self, i: int = 0) -> Dict[str, np.ndarray]:
        return {
            "risk": float(self.risk[i]),
            "alpha": self.alpha[i].detach().cpu().numpy(),
            "beta": self.beta[i].detach().cpu().numpy(),
            "visit_vectors": self.visit_vectors[i].detach().cpu().numpy(),
            "context": self.context[i].detach().cpu().numpy(),
        }


def temporal_encoding(e: Union[float, torch.Tensor], d: int, lam: float = 10000.0) -> torch.Tensor:
    """``sin(e / lam**(2i/d))`` at even ``i``, ``cos(...)`` at odd ``i``; broadcasts over ``e``."""
    if d % 2:
        raise ConfigError("d must be even")
    e = torch.as_tensor(e, dtype=torch.float64) if not torch.is_tensor(e) else e
    i = torch.arange(d, dtype=e.dtype)
    angle = e.unsqueeze(-1) / torch.pow(torch.tensor(lam, dtype=e.dtype), 2.0 * i / d)
    return torch.where(i % 2 == 0, torch.sin(angle), torch.cos(angle))


def encode_visit(code_ids: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
    """Mean of embedding rows over non-padding ids; an all-padding visit gives zeros.

    ``code_ids`` has shape ``(..., K)``; output ``(..., d)``.
    """
    n = embedding.shape[0]
    if code_ids.numel() and (int(code_ids.min()) < 0 or int(code_ids.max()) >= n):
        raise IndexError(f"code id outside [0, {n - 1}]")
    z = embedding[code_ids]
    mask = (code_ids != 0).to(z.dtype).unsqueeze(-1)
    count = mask.sum(dim=-2).clamp_min(1.0)
    return (z * mask).sum(dim=-2) / count


def _check(stage: str, x: torch.Tensor):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values after stage '{stage}'")


class TarnnHybrid(nn.Module):
    """The network; the embedding matrix is a frozen buffer, never a parameter."""

    def __init__(self, config: ModelConfig, matrix: Union[EmbeddingMatrix, np.ndarray]):
        super().__init__()
        rows = matrix.rows if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix)
        if rows.shape[1] != config.d:
            raise ConfigError(f"embedding width {rows.shape[1]} != config.d {config.d}")
        self.config = config
        self.register_buffer("embedding", torch.tensor(np.array(rows, dtype=np.float32)))
        d, h = config.d, config.h
        self.gru = nn.GRU(d, h, num_layers=config.layers, bidirectional=True, batch_first=True,
                          dropout=config.dropout if config.layers > 1 else 0.0)
        self.mha = nn.MultiheadAttention(2 * h, config.heads, batch_first=True)
        self.norm = nn.LayerNorm(2 * h)
        self.visit_attn = nn.Linear(2 * h, 1)
        self.feature_attn = nn.Linear(2 * h, d)
        dims = (d + config.demo_dim,) + config.mlp_hidden
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], 1)

    def decay_parameters(self):
        """Weight matrices of the recurrent and dense layers (L2 targets)."""
        for name, p in self.named_parameters():
            if "weight" in name and not name.startswith("norm."):
                yield p

    def forward(self, code_ids, elapsed, demo, check_finite: bool = True) -> ForwardOutput:
        cfg = self.config
        emb = self.embedding
        v = encode_visit(code_ids, emb)
        if cfg.use_time_encoding:
            x = v + temporal_encoding(elapsed.to(emb.dtype), cfg.d, cfg.lam)
        else:
            x = v
        h, _ = self.gru(x)
        if check_finite:
            _check("bigru", h)
        attn, _ = self.mha(h, h, h, need_weights=False)
        h_att = self.norm(h + attn)
        if check_finite:
            _check("self-attention", h_att)
        batch, steps = v.shape[0], v.shape[1]
        if cfg.use_visit_attention:
            alpha = torch.softmax(self.visit_attn(h_att).squeeze(-1), dim=-1)
        else:
            alpha = torch.full((batch, steps), 1.0 / steps, dtype=v.dtype)
        if cfg.use_feature_attention:
            beta = torch.softmax(torch.tanh(self.feature_attn(h_att)), dim=-1)
            context = (alpha.unsqueeze(-1) * beta * v).sum(dim=1)
            fused = context * cfg.context_scale
        else:
            beta = torch.full_like(v, 1.0 / cfg.d)
            context = (alpha.unsqueeze(-1) * v).sum(dim=1)
            fused = context
        u = torch.cat([fused, demo.to(v.dtype)], dim=-1)
        for layer in self.hidden:
            u = torch.tanh(layer(u))
        logit = self.out(u).squeeze(-1)
        if check_finite:
            _check("output", logit)
        return ForwardOutput(torch.sigmoid(logit), logit, alpha, beta, v, context)


def build_model(config: ModelConfig, matrix, seed: int = 0, dtype=torch.float32) -> TarnnHybrid:
    """Construct with a seeded initialization that leaves the global torch RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = TarnnHybrid(config, matrix)
    return model.to(dtype)


def batch_tensors(batch, dtype=torch.float32):
    """``(code_ids, elapsed, demo, targets)`` tensors from a :class:`WindowBatch` or single sample."""
    if hasattr(batch, "demo_vec"):
        code_ids = torch.as_tensor(batch.code_ids).unsqueeze(0)
        elapsed = torch.as_tensor(batch.elapsed, dtype=dtype).unsqueeze(0)
        demo = torch.as_tensor(batch.demo_vec, dtype=dtype).unsqueeze(0)
        targets = torch.as_tensor([batch.target], dtype=dtype)
    else:
        code_ids = torch.as_tensor(batch.code_ids)
        elapsed = torch.as_tensor(batch.elapsed, dtype=dtype)
        demo = torch.as_tensor(batch.demo, dtype=dtype)
        targets = torch.as_tensor(batch.targets, dtype=dtype)
    return code_ids, elapsed, demo, targets


def forward(model: TarnnHybrid, batch, mode: str = "eval") -> ForwardOutput:
    """Run the model on a sample or batch. ``eval`` disables dropout and is deterministic."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    dtype = model.embedding.dtype
    code_ids, elapsed, demo, _ = batch_tensors(batch, dtype)
    if code_ids.shape[1:] != (model.config.t_s, model.config.k_max):
        raise ConfigError(f"sample shape {tuple(code_ids.shape[1:])} != (t_s, k_max)="
                          f"{(model.config.t_s, model.config.k_max)}")
    if mode == "eval":
        with torch.no_grad():
            return model(code_ids, elapsed, demo)
    return model(code_ids, elapsed, demo)


def weighted_bce_logits(logits: torch.Tensor, targets: torch.Tensor, delta: float) -> torch.Tensor:
    """Mean of ``-[delta y log s + (1 - delta)(1 - y) log(1 - s)]`` with ``s = sigmoid(logit)``."""
    return (delta * targets * F.softplus(-logits) + (1 - delta) * (1 - targets) * F.softplus(logits)).mean()


def l2_penalty(model: TarnnHybrid) -> torch.Tensor:
    return sum((p * p).sum() for p in model.decay_parameters())


def gradients(batch, model: TarnnHybrid, delta: float = 0.7, l2: float = 0.0, mode: str = "eval") -> Dict[str, torch.Tensor]:
    """Exact gradients of the weighted loss for every trainable tensor (the embedding has none)."""
    model.train(mode == "train")
    dtype = model.embedding.dtype
    code_ids, elapsed, demo, targets = batch_tensors(batch, dtype)
    if len(targets) == 0:
        raise ConfigError("empty batch")
    model.zero_grad(set_to_none=True)
    out = model(code_ids, elapsed, demo)
    loss = weighted_bce_logits(out.logit, targets, delta)
    if l2:
        loss = loss + l2 * l2_penalty(model)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        grads[name] = g
    model.zero_grad(set_to_none=True)
    return grads


# --------------------------------------------------------------------------
# checkpoints

_CKPT_FORMAT = "tarnn-checkpoint/1"


def save_checkpoint(model: TarnnHybrid, path, extra: Optional[Dict] = None) -> Tuple[Path, Path]:
    """Flat little-endian float32 blob of all trainable tensors plus a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.detach().cpu().numpy(), dtype="<f4")
        chunks.append(arr.tobytes())
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    blob = b"".join(chunks)
    path.write_bytes(blob)
    emb = np.ascontiguousarray(model.embedding.detach().cpu().numpy(), dtype="<f4").tobytes()
    manifest = {
        "format": _CKPT_FORMAT,
        "config": model.config.to_dict(),
        "tensors": tensors,
        "n_values": offset,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "embedding_sha256": hashlib.sha256(emb).hexdigest(),
        "build": _build_id(),
    }
    if extra:
        manifest.update(extra)
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path, side


def read_checkpoint_manifest(path) -> Dict:
    side = Path(path).with_name(Path(path).name + ".json")
    try:
        return json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"missing checkpoint manifest {side}") from None


def load_checkpoint(path, matrix: EmbeddingMatrix) -> TarnnHybrid:
    path = Path(path)
    manifest = read_checkpoint_manifest(path)
    if manifest.get("format") != _CKPT_FORMAT:
        raise FormatError(f"unexpected checkpoint format {manifest.get('format')!r}")
    blob = path.read_bytes()
    if len(blob) != 4 * manifest["n_values"] or hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise FormatError("checkpoint blob does not match its manifest")
    emb = np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes()
    if hashlib.sha256(emb).hexdigest() != manifest["embedding_sha256"]:
        raise FormatError("embedding matrix differs from the one the checkpoint was trained with")
    config = ModelConfig.from_dict(manifest["config"])
    model = build_model(config, matrix)
    flat = np.frombuffer(blob, dtype="<f4")
    params = dict(model.named_parameters())
    with torch.no_grad():
        for entry in manifest["tensors"]:
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            values = flat[entry["offset"] : entry["offset"] + size].reshape(entry["shape"])
            params[entry["name"]].copy_(torch.from_numpy(values.astype(np.float32)))
    return model


def _build_id() -> str:
    from . import __version__

    return f"tarnn_hybrid-{__version__}/torch-{torch.__version__}"
