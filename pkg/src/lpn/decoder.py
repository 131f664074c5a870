"""Latent-conditioned autoregressive grid decoder.

Sequence layout: ``[latent] ++ input grid (2 + R*C) ++ target grid (2 + R*C)``.
The latent+input prefix attends non-causally within itself; the target half is
causal and its padding is masked from the target's own shape tokens.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import GridEmbedding, grid_token_mask, pixel_mask
from .nncore import ArchConfig, TransformerStack, attend


@dataclass
class DecoderOutput:
    row_logits: torch.Tensor  # (B, max_rows), class k means k+1 rows
    col_logits: torch.Tensor  # (B, max_cols)
    grid_logits: torch.Tensor  # (B, R*C, 10)


class Decoder(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        h = cfg.dec_hidden
        self.cfg = cfg
        self.latent_proj = nn.Linear(cfg.latent_dim, h)
        self.latent_pos = nn.Parameter(torch.zeros(h))
        self.embed = GridEmbedding(h, cfg.max_rows, cfg.max_cols)
        self.stack = TransformerStack(cfg.dec_layers, h, cfg.dec_heads, cfg.dec_mlp_factor)
        self.norm = nn.LayerNorm(h)
        self.row_head = nn.Linear(h, cfg.max_rows)
        self.col_head = nn.Linear(h, cfg.max_cols)
        self.grid_head = nn.Linear(h, 10)
        RC = cfg.max_rows * cfg.max_cols
        self.prefix_len = 1 + 2 + RC
        self.seq_len = self.prefix_len + 2 + RC
        q = torch.arange(self.seq_len)
        struct = (q[None, :] < self.prefix_len) | (q[:, None] >= q[None, :])
        self.register_buffer("_struct", struct, persistent=False)

    # ------------------------------------------------------------------ layout helpers

    def predictor_index(self, out_shapes: torch.Tensor) -> torch.Tensor:
        """Sequence position whose embedding predicts each target pixel, (B, R*C).

        Raster next-token prediction, except that the first cell of row i is
        predicted from the last in-bounds cell of row i-1.
        """
        R, C = self.cfg.max_rows, self.cfg.max_cols
        base = self.prefix_len + 2
        k = torch.arange(R * C, device=out_shapes.device)
        i, j = k // C, k % C
        idx = (base + k - 1).expand(out_shapes.shape[0], -1).clone()
        row_start = (j == 0) & (i > 0)
        remap = base + (i[None] - 1) * C + out_shapes[:, 1:2] - 1
        idx = torch.where(row_start[None], remap, idx)
        idx[:, 0] = self.prefix_len + 1
        return idx

    def _embed(self, z, in_shapes, in_pixels, out_shapes, out_pixels):
        lat = (self.latent_proj(z) + self.latent_pos).unsqueeze(1)
        return torch.cat(
            [lat, self.embed(in_shapes, in_pixels, 0), self.embed(out_shapes, out_pixels, 1)], dim=1
        )

    def attention_mask(self, in_shapes, out_shapes) -> torch.Tensor:
        R, C = self.cfg.max_rows, self.cfg.max_cols
        b = in_shapes.shape[0]
        keys = torch.cat(
            [
                torch.ones(b, 1, dtype=torch.bool, device=in_shapes.device),
                grid_token_mask(in_shapes, R, C),
                grid_token_mask(out_shapes, R, C),
            ],
            dim=1,
        )
        return self._struct[None] & keys[:, None, :]

    # ------------------------------------------------------------------ teacher forcing

    def forward(self, z, in_shapes, in_pixels, out_shapes, out_pixels) -> DecoderOutput:
        x = self._embed(z, in_shapes, in_pixels, out_shapes, out_pixels)
        h = self.norm(self.stack(x, self.attention_mask(in_shapes, out_shapes)))
        P = self.prefix_len
        idx = self.predictor_index(out_shapes)
        pix_h = torch.gather(h, 1, idx.unsqueeze(-1).expand(-1, -1, h.shape[-1]))
        return DecoderOutput(
            row_logits=self.row_head(h[:, P - 1]),
            col_logits=self.col_head(h[:, P]),
            grid_logits=self.grid_head(pix_h),
        )

    def log_likelihood(self, z, in_shapes, in_pixels, out_shapes, out_pixels) -> torch.Tensor:
        """Per-example log p(y | x, z): shape tokens plus every in-bounds cell, (B,)."""
        out = self(z, in_shapes, in_pixels, out_shapes, out_pixels)
        return sequence_log_likelihood(out, out_shapes, out_pixels, self.cfg)

    # ------------------------------------------------------------------ generation

    @torch.no_grad()
    def generate(self, z, in_shapes, in_pixels, return_logprob: bool = False):
        """Greedy decoding with cached keys/values.

        Returns ``(shapes (B, 2), pixels (B, R*C))`` and, optionally, the summed
        log-probability of the emitted tokens.
        """
        cfg = self.cfg
        R, C = cfg.max_rows, cfg.max_cols
        b = z.shape[0]
        dev = z.device
        P, L = self.prefix_len, self.seq_len
        blocks = self.stack.blocks
        cache_k = [None] * len(blocks)
        cache_v = [None] * len(blocks)
        key_valid = torch.zeros(b, L, dtype=torch.bool, device=dev)
        key_valid[:, 0] = True
        key_valid[:, 1:P] = grid_token_mask(in_shapes, R, C)
        embed = self.embed

        # Prefix: non-causal among itself.
        lat = (self.latent_proj(z) + self.latent_pos).unsqueeze(1)
        x = torch.cat([lat, embed(in_shapes, in_pixels, 0)], dim=1)
        pmask = key_valid[:, None, :P].expand(b, P, P)
        for li, blk in enumerate(blocks):
            n1 = blk.norm1(x)
            q, k, v = _split_qkv(blk, n1)
            cache_k[li] = torch.zeros(b, blk.attn.heads, L, blk.attn.head_dim, device=dev)
            cache_v[li] = torch.zeros_like(cache_k[li])
            cache_k[li][:, :, :P] = k
            cache_v[li][:, :, :P] = v
            x = x + _attend(blk, q, k, v, pmask)
            x = x + blk.mlp(blk.norm2(x))
        hidden = torch.zeros(b, L, self.cfg.dec_hidden, device=dev)
        hidden[:, P - 1] = self.norm(x[:, P - 1])

        chan = embed.channel.weight[1]

        def step(pos: int, tok_emb: torch.Tensor):
            key_valid_now = key_valid[:, : pos + 1]
            h = tok_emb.unsqueeze(1)
            for li, blk in enumerate(blocks):
                q, k, v = _split_qkv(blk, blk.norm1(h))
                cache_k[li][:, :, pos : pos + 1] = k
                cache_v[li][:, :, pos : pos + 1] = v
                h = h + _attend(
                    blk, q, cache_k[li][:, :, : pos + 1], cache_v[li][:, :, : pos + 1],
                    key_valid_now[:, None, :],
                )
                h = h + blk.mlp(blk.norm2(h))
            hidden[:, pos] = self.norm(h[:, 0])

        logprob = torch.zeros(b, device=dev)
        row_lp = F.log_softmax(self.row_head(hidden[:, P - 1]), -1)
        rows = row_lp.argmax(-1) + 1
        logprob += row_lp.gather(1, (rows - 1)[:, None])[:, 0]
        key_valid[:, P] = True
        step(P, embed.shape_value(rows - 1) + embed.shape_pos.weight[0] + chan)
        col_lp = F.log_softmax(self.col_head(hidden[:, P]), -1)
        cols = col_lp.argmax(-1) + 1
        logprob += col_lp.gather(1, (cols - 1)[:, None])[:, 0]
        key_valid[:, P + 1] = True
        step(P + 1, embed.shape_value(cols - 1) + embed.shape_pos.weight[1] + chan)

        shapes = torch.stack([rows, cols], dim=1)
        inb = pixel_mask(shapes, R, C)
        key_valid[:, P + 2 :] = inb
        pred_idx = self.predictor_index(shapes)
        pixels = torch.zeros(b, R * C, dtype=torch.long, device=dev)
        last_k = int(torch.nonzero(inb.any(0)).max()) if inb.any() else -1
        for kk in range(last_k + 1):
            src = pred_idx[:, kk]
            h_src = hidden[torch.arange(b, device=dev), src]
            lp = F.log_softmax(self.grid_head(h_src), -1)
            color = lp.argmax(-1)
            color = torch.where(inb[:, kk], color, torch.zeros_like(color))
            pixels[:, kk] = color
            logprob += torch.where(inb[:, kk], lp.gather(1, color[:, None])[:, 0], torch.zeros_like(logprob))
            if kk < last_k:
                tok = embed.color(color) + embed.row_pos.weight[kk // C] + embed.col_pos.weight[kk % C] + chan
                step(P + 2 + kk, tok)
        if return_logprob:
            return shapes, pixels, logprob
        return shapes, pixels


def _split_qkv(blk, x):
    b, L, h = x.shape
    att = blk.attn
    q, k, v = att.qkv(x).view(b, L, 3, att.heads, att.head_dim).permute(2, 0, 3, 1, 4)
    return q, k, v


def _attend(blk, q, k, v, mask):
    y = attend(q, k, v, mask).transpose(1, 2).reshape(q.shape[0], q.shape[2], -1)
    return blk.attn.out(y)


def sequence_log_likelihood(out: DecoderOutput, out_shapes, out_pixels, cfg: ArchConfig) -> torch.Tensor:
    row_lp = F.log_softmax(out.row_logits, -1).gather(1, (out_shapes[:, :1] - 1))[:, 0]
    col_lp = F.log_softmax(out.col_logits, -1).gather(1, (out_shapes[:, 1:2] - 1))[:, 0]
    cell_lp = F.log_softmax(out.grid_logits, -1).gather(2, out_pixels.unsqueeze(-1))[..., 0]
    inb = pixel_mask(out_shapes, cfg.max_rows, cfg.max_cols)
    cell_lp = torch.where(inb, cell_lp, torch.zeros_like(cell_lp))
    return row_lp + col_lp + cell_lp.sum(-1)
