"""Pair encoder: one input/output pair -> diagonal Gaussian over latent programs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import EmptySet
from .nncore import ArchConfig, TransformerStack

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0


class GridEmbedding(nn.Module):
    """Embeds a padded grid sequence: value tables plus pe(i, j, c) = pr(i) + pc(j) + emb(c).

    Row and column counts share one value table; the two shape slots get
    dedicated position vectors.
    """

    def __init__(self, hidden: int, max_rows: int, max_cols: int):
        super().__init__()
        self.max_rows, self.max_cols = max_rows, max_cols
        self.color = nn.Embedding(10, hidden)
        self.shape_value = nn.Embedding(max(max_rows, max_cols), hidden)
        self.row_pos = nn.Embedding(max_rows, hidden)
        self.col_pos = nn.Embedding(max_cols, hidden)
        self.channel = nn.Embedding(2, hidden)
        self.shape_pos = nn.Embedding(2, hidden)
        rows = torch.arange(max_rows).repeat_interleave(max_cols)
        cols = torch.arange(max_cols).repeat(max_rows)
        self.register_buffer("_rows", rows, persistent=False)
        self.register_buffer("_cols", cols, persistent=False)

    def forward(self, shapes: torch.Tensor, pixels: torch.Tensor, channel: int) -> torch.Tensor:
        """(B, 2), (B, R*C) -> (B, 2 + R*C, H)."""
        chan = self.channel.weight[channel]
        shape_tok = torch.stack(
            [self.shape_value(shapes[:, 0] - 1), self.shape_value(shapes[:, 1] - 1)], dim=1
        ) + self.shape_pos.weight
        pix = self.color(pixels) + self.row_pos(self._rows) + self.col_pos(self._cols)
        return torch.cat([shape_tok, pix], dim=1) + chan


def pixel_mask(shapes: torch.Tensor, max_rows: int, max_cols: int) -> torch.Tensor:
    """(B, 2) shapes -> (B, R*C) bool, true on in-bounds cells."""
    r = torch.arange(max_rows, device=shapes.device).repeat_interleave(max_cols)
    c = torch.arange(max_cols, device=shapes.device).repeat(max_rows)
    return (r[None] < shapes[:, :1]) & (c[None] < shapes[:, 1:2])


def grid_token_mask(shapes, max_rows, max_cols):
    ones = torch.ones(shapes.shape[0], 2, dtype=torch.bool, device=shapes.device)
    return torch.cat([ones, pixel_mask(shapes, max_rows, max_cols)], dim=1)


class Encoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        h = cfg.enc_hidden
        self.cfg = cfg
        self.embed = GridEmbedding(h, cfg.max_rows, cfg.max_cols)
        self.cls = nn.Parameter(torch.zeros(h))
        self.cls_pos = nn.Parameter(torch.zeros(h))
        self.stack = TransformerStack(cfg.enc_layers, h, cfg.enc_heads, cfg.enc_mlp_factor)
        self.norm = nn.LayerNorm(h)
        self.mean_head = nn.Linear(h, cfg.latent_dim)
        self.log_var_head = nn.Linear(h, cfg.latent_dim)

    def forward(self, in_shapes, in_pixels, out_shapes, out_pixels):
        """Returns (mean, log_var), each (B, d)."""
        R, C = self.cfg.max_rows, self.cfg.max_cols
        b = in_shapes.shape[0]
        x = torch.cat(
            [
                self.embed(in_shapes, in_pixels, 0),
                self.embed(out_shapes, out_pixels, 1),
                (self.cls + self.cls_pos).expand(b, 1, -1),
            ],
            dim=1,
        )
        keys = torch.cat(
            [
                grid_token_mask(in_shapes, R, C),
                grid_token_mask(out_shapes, R, C),
                torch.ones(b, 1, dtype=torch.bool, device=x.device),
            ],
            dim=1,
        )
        mask = keys[:, None, :].expand(b, x.shape[1], x.shape[1])
        h = self.norm(self.stack(x, mask)[:, -1])
        log_var = self.log_var_head(h).clamp(LOG_VAR_MIN, LOG_VAR_MAX)
        return self.mean_head(h), log_var


@dataclass(frozen=True)
class LatentPosterior:
    mean: np.ndarray
    log_var: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def sample_latent(mean: torch.Tensor, log_var: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw ``mean + noise * exp(log_var / 2)``."""
    return mean + noise * torch.exp(0.5 * log_var)


def aggregate_latents(latents: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Arithmetic mean along ``dim``, summed in sorted order so the result is
    bitwise independent of the order of the latents."""
    if latents.shape[dim] == 0:
        raise EmptySet("cannot aggregate an empty set of latents")
    ordered, _ = torch.sort(latents, dim=dim)
    return ordered.sum(dim=dim) / latents.shape[dim]


def leave_one_out_means(latents: torch.Tensor) -> torch.Tensor:
    """(B, n, d) -> (B, n, d) where row i averages every latent except i."""
    n = latents.shape[1]
    if n < 2:
        raise EmptySet("leave-one-out aggregation needs at least two pairs")
    others = torch.tensor([[j for j in range(n) if j != i] for i in range(n)], device=latents.device)
    return aggregate_latents(latents[:, others], dim=2)
