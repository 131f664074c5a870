"""Transformer building blocks, parameter optimizer and gradient checking.

Autodiff is torch's reverse mode; everything runs in float32.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import asdict, dataclass, fields
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFinite, ShapeMismatch, ValidationError

DTYPE = torch.float32
MASK_VALUE = -1e9
INIT_STD = 0.02


@dataclass(frozen=True)
class ArchConfig:
    enc_layers: int = 2
    enc_heads: int = 6
    enc_head_dim: int = 16
    enc_mlp_factor: float = 1.0
    dec_layers: int = 2
    dec_heads: int = 6
    dec_head_dim: int = 16
    dec_mlp_factor: float = 1.0
    latent_dim: int = 32
    max_rows: int = 10
    max_cols: int = 10

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0 or (f.name not in ("enc_layers", "dec_layers") and v <= 0):
                raise ValidationError(f"ArchConfig.{f.name}={v} must be positive")
        if not (1 <= self.max_rows <= 30 and 1 <= self.max_cols <= 30):
            raise ValidationError("max_rows/max_cols must lie in 1..30")

    @property
    def enc_hidden(self) -> int:
        return self.enc_heads * self.enc_head_dim

    @property
    def dec_hidden(self) -> int:
        return self.dec_heads * self.dec_head_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# Hyperparameter tables of the five experiment families.
ARCH_PRESETS = {
    "overfit": ArchConfig(0, 6, 16, 1.0, 3, 6, 16, 1.0, 32, 30, 30),
    "pattern": ArchConfig(2, 6, 16, 1.0, 2, 6, 16, 1.0, 32, 10, 10),
    "tiny": ArchConfig(2, 6, 12, 4.0, 2, 6, 12, 4.0, 2, 4, 4),
    "ood": ArchConfig(4, 8, 8, 2.0, 2, 8, 4, 1.0, 32, 10, 10),
    "arc": ArchConfig(4, 8, 32, 4.0, 8, 8, 32, 4.0, 256, 30, 30),
}

# Parameter counts reported alongside those tables.
REPORTED_PARAM_COUNTS = {
    "overfit": 829_000,
    "pattern": 973_000,
    "tiny": 1_000_000,
    "ood": 1_000_000,
    "arc": 39_000_000,
}


def init_weights(module: nn.Module):
    """Truncated normal (std 0.02) for dense/embedding weights, zero biases, unit norm scales."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.trunc_normal_(m.weight, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        else:
            # free-standing vectors such as the CLS token
            for p in m.parameters(recurse=False):
                nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``; rows with no allowed key give zeros."""
    scores = scores.masked_fill(~mask, MASK_VALUE)
    weights = torch.softmax(scores, dim=-1)
    any_allowed = mask.any(dim=-1, keepdim=True)
    return weights * any_allowed.to(weights.dtype)


_attention_mode = threading.local()


@contextlib.contextmanager
def exact_attention():
    """Use the explicit masked-softmax attention path inside this block.

    The fused kernel has no double backward, so anything differentiating
    through a gradient (meta-gradient training) must run under this context.
    """
    prev = getattr(_attention_mode, "exact", False)
    _attention_mode.exact = True
    try:
        yield
    finally:
        _attention_mode.exact = prev


def attend(q, k, v, mask):
    """Scaled dot-product attention. q/k/v: (B, heads, L, hd); mask: (B, Lq, Lk) bool."""
    mask = mask.unsqueeze(1)
    if getattr(_attention_mode, "exact", False):
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        return masked_softmax(scores, mask) @ v
    any_allowed = mask.any(dim=-1, keepdim=True)
    y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask | ~any_allowed)
    return torch.where(any_allowed, y, torch.zeros((), dtype=y.dtype))


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden: int, heads: int):
        super().__init__()
        if hidden % heads:
            raise ShapeMismatch(f"hidden {hidden} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = hidden // heads
        self.qkv = nn.Linear(hidden, 3 * hidden)
        self.out = nn.Linear(hidden, hidden)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, L, h = x.shape
        q, k, v = self.qkv(x).view(b, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        y = attend(q, k, v, mask).transpose(1, 2).reshape(b, L, h)
        return self.out(y)


class TransformerBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, mlp_factor: float):
        super().__init__()
        mlp = max(1, int(round(mlp_factor * hidden)))
        self.norm1 = nn.LayerNorm(hidden)
        self.attn = MultiHeadAttention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden)
        self.mlp = nn.Sequential(nn.Linear(hidden, mlp), nn.GELU(), nn.Linear(mlp, hidden))

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


class TransformerStack(nn.Module):
    """``layers`` pre-norm blocks; zero layers is the identity."""

    def __init__(self, layers: int, hidden: int, heads: int, mlp_factor: float):
        super().__init__()
        self.hidden = hidden
        self.blocks = nn.ModuleList(TransformerBlock(hidden, heads, mlp_factor) for _ in range(layers))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.hidden:
            raise ShapeMismatch(f"embedding size {x.shape[-1]} != {self.hidden}")
        if mask.shape[-2:] != (x.shape[1], x.shape[1]):
            raise ShapeMismatch(f"mask {tuple(mask.shape)} does not match sequence length {x.shape[1]}")
        for block in self.blocks:
            x = block(x, mask)
        return x


def transformer_stack(tokens, mask, stack: TransformerStack):
    return stack(tokens, mask)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------- optimizer


@dataclass
class OptimConfig:
    lr: float = 4e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float = 1.0


def make_optimizer(params, cfg: OptimConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params, lr=cfg.lr, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay
    )


def clip_grad_norm(params: Sequence[torch.Tensor], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Raises NonFinite when any gradient holds NaN/Inf. Returns the pre-clip norm.
    """
    params = [p for p in params if p.grad is not None]
    if not params:
        return 0.0
    norm = float(torch.nn.utils.clip_grad_norm_(params, max_norm, error_if_nonfinite=False))
    if not math.isfinite(norm):
        raise NonFinite(f"non-finite gradient norm ({norm}); update skipped")
    return norm


def optimizer_step(params, optimizer: torch.optim.Optimizer, clip_norm: float) -> float:
    """Global-norm clip, then one AdamW update. Returns the pre-clip gradient norm."""
    params = list(params)
    norm = clip_grad_norm(params, clip_norm)
    optimizer.step()
    return norm


# --------------------------------------------------------------------------- gradcheck


@dataclass
class GradcheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: {self.checked} coords, max rel {self.max_rel_error:.3e}, "
            f"max abs {self.max_abs_error:.3e}"
        )


def gradcheck(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    analytic_grad: Optional[torch.Tensor] = None,
    num_coords: int = 16,
    h: float = 1e-3,
    rtol: float = 1e-2,
    atol: float = 1e-3,
    seed: int = 0,
    numeric_fn: Optional[Callable[[torch.Tensor], torch.Tensor]] = None,
) -> GradcheckReport:
    """Compare the reverse-mode gradient of scalar ``fn`` at ``point`` with central differences.

    A coordinate passes when ``|a - n| <= atol`` or ``|a - n| <= rtol * max(|a|, |n|)``.
    ``analytic_grad`` overrides autograd (used for negative controls).
    ``numeric_fn`` (default ``fn``) is evaluated in float64 for the differences,
    which keeps f32 roundoff out of the reference.
    """
    point = point.detach().to(DTYPE)
    if analytic_grad is None:
        x = point.clone().requires_grad_(True)
        (analytic_grad,) = torch.autograd.grad(fn(x), x)
    analytic_grad = analytic_grad.detach().reshape(-1)
    if numeric_fn is None:
        numeric_fn, flat = fn, point.reshape(-1)
    else:
        flat = point.to(torch.float64).reshape(-1)
    rng = np.random.default_rng(seed)
    count = min(num_coords, flat.numel())
    coords = rng.choice(flat.numel(), size=count, replace=False)
    numeric = np.zeros(count)
    analytic = np.zeros(count)
    with torch.no_grad():
        for k, c in enumerate(coords):
            plus = flat.clone()
            minus = flat.clone()
            plus[c] += h
            minus[c] -= h
            fp = float(numeric_fn(plus.view(point.shape)))
            fm = float(numeric_fn(minus.view(point.shape)))
            numeric[k] = (fp - fm) / (2 * h)
            analytic[k] = float(analytic_grad[c])
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(scale > 0, diff / np.where(scale > 0, scale, 1), 0.0)
    ok = (diff <= atol) | (rel <= rtol)
    return GradcheckReport(
        max_rel_error=float(rel.max()) if count else 0.0,
        max_abs_error=float(diff.max()) if count else 0.0,
        checked=count,
        passed=bool(ok.all()),
        analytic=analytic,
        numeric=numeric,
    )
