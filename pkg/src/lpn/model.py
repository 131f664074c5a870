"""The encoder/decoder pair plus tensor plumbing from grids and tasks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .decoder import Decoder
from .encoder import Encoder, LatentPosterior
from .errors import ShapeMismatch
from .grids import Grid, TaskInstance, arrays_to_grid, grids_to_arrays
from .nncore import ArchConfig, count_parameters, init_weights


class LPN(nn.Module):
    def __init__(self, cfg: ArchConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        init_weights(self)
        torch.random.set_rng_state(gen_state)

    def num_parameters(self) -> int:
        return count_parameters(self)

    def named_tensors(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items()}


@dataclass
class PairBatch:
    """Padded tensors for a flat list of (input, output) pairs."""

    in_shapes: torch.Tensor
    in_pixels: torch.Tensor
    out_shapes: torch.Tensor
    out_pixels: torch.Tensor

    def __len__(self):
        return self.in_shapes.shape[0]

    def index(self, idx) -> "PairBatch":
        return PairBatch(self.in_shapes[idx], self.in_pixels[idx], self.out_shapes[idx], self.out_pixels[idx])

    def reshape(self, *lead) -> "PairBatch":
        rc = self.in_pixels.shape[-1]
        return PairBatch(
            self.in_shapes.reshape(*lead, 2),
            self.in_pixels.reshape(*lead, rc),
            self.out_shapes.reshape(*lead, 2),
            self.out_pixels.reshape(*lead, rc),
        )

    def flat(self) -> "PairBatch":
        return self.reshape(-1)

    def tensors(self):
        return self.in_shapes, self.in_pixels, self.out_shapes, self.out_pixels


def pairs_to_batch(pairs: Sequence[tuple[Grid, Grid]], cfg: ArchConfig) -> PairBatch:
    xs, ys = zip(*pairs) if pairs else ((), ())
    ins, inp = grids_to_arrays(xs, cfg.max_rows, cfg.max_cols)
    outs, outp = grids_to_arrays(ys, cfg.max_rows, cfg.max_cols)
    t = torch.from_numpy
    return PairBatch(t(ins), t(inp), t(outs), t(outp))


def tasks_to_batch(tasks: Sequence[TaskInstance], cfg: ArchConfig) -> PairBatch:
    """Stack the specification pairs of equally sized tasks into a (T, n, ...) batch."""
    n = {t.n for t in tasks}
    if len(n) != 1:
        raise ShapeMismatch(f"tasks have differing pair counts {sorted(n)}")
    flat = [p for t in tasks for p in t.pairs]
    return pairs_to_batch(flat, cfg).reshape(len(tasks), n.pop())


def inputs_to_tensors(grids: Sequence[Grid], cfg: ArchConfig):
    s, p = grids_to_arrays(grids, cfg.max_rows, cfg.max_cols)
    return torch.from_numpy(s), torch.from_numpy(p)


def tensors_to_grids(shapes: torch.Tensor, pixels: torch.Tensor, cfg: ArchConfig) -> list[Grid]:
    s = shapes.cpu().numpy()
    p = pixels.cpu().numpy()
    return [arrays_to_grid(s[k], p[k], cfg.max_cols) for k in range(s.shape[0])]


@torch.no_grad()
def encode_pair(model: LPN, x: Grid, y: Grid) -> LatentPosterior:
    b = pairs_to_batch([(x, y)], model.cfg)
    mean, log_var = model.encoder(*b.tensors())
    return LatentPosterior(mean[0].numpy().copy(), log_var[0].numpy().copy())


@torch.no_grad()
def generate(model: LPN, x: Grid, z) -> Grid:
    s, p = inputs_to_tensors([x], model.cfg)
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32).reshape(1, -1)
    shapes, pixels = model.decoder.generate(z, s, p)
    return tensors_to_grids(shapes, pixels, model.cfg)[0]


def output_logits(model: LPN, x: Grid, y: Grid, z):
    """Teacher-forced logits and log-likelihood of ``y`` given ``x`` and latent ``z``."""
    b = pairs_to_batch([(x, y)], model.cfg)
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32).reshape(1, -1)
    from .decoder import sequence_log_likelihood

    out = model.decoder(z, *b.tensors())
    ll = sequence_log_likelihood(out, b.out_shapes, b.out_pixels, model.cfg)
    return out, ll[0]
