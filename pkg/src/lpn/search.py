"""Test-time search in latent program space.

All routines are batched over tasks: a ``PairBatch`` of shape (T, n) holds the
n specification pairs of T tasks, latents are (T, d). Updates are elementwise
per task, so batching never mixes tasks.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
import torch

from .encoder import aggregate_latents, sample_latent
from .errors import EmptySet, ValidationError
from .grids import Grid
from .model import LPN, PairBatch, pairs_to_batch

METHODS = ("mean", "gradient_ascent", "random_search")
INITS = ("encoder_mean", "encoder_sample", "prior")


@dataclass(frozen=True)
class SearchConfig:
    method: str = "mean"
    steps: int = 0
    budget: int = 1
    step_size: float = 0.1
    optimizer: str = "plain"  # plain | adam
    lr_schedule: str = "constant"  # constant | cosine
    betas: tuple = (0.9, 0.9)
    eps: float = 1e-8
    init: str = "encoder_mean"
    rs_around: str = "prior"  # prior | posterior
    track_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"unknown search method {self.method!r}")
        if self.init not in INITS:
            raise ValidationError(f"unknown init {self.init!r}")
        if self.optimizer not in ("plain", "adam") or self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError("optimizer must be plain|adam, lr_schedule constant|cosine")
        if self.steps < 0 or self.budget < 1:
            raise ValidationError("steps >= 0 and budget >= 1 required")
        if self.method == "gradient_ascent" and self.step_size <= 0:
            raise ValidationError("gradient ascent needs a positive step size")
        if self.rs_around not in ("prior", "posterior"):
            raise ValidationError("rs_around must be prior|posterior")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @property
    def label(self) -> str:
        if self.method == "gradient_ascent":
            return f"GA {self.steps}"
        if self.method == "random_search":
            return f"RS {self.budget}"
        return "Mean"


# Adam ascent (beta1 = beta2 = 0.9) with cosine decay from 1.0, used for ARC-scale inference.
ARC_SEARCH = SearchConfig(
    method="gradient_ascent", step_size=1.0, optimizer="adam", lr_schedule="cosine", betas=(0.9, 0.9)
)
PATTERN_SEARCH = SearchConfig(method="gradient_ascent", step_size=0.1)


def parse_infer(spec: str, base: SearchConfig = PATTERN_SEARCH, init: Optional[str] = None) -> SearchConfig:
    """``mean`` | ``ga:K`` | ``rs:B`` -> SearchConfig derived from ``base``."""
    spec = spec.strip().lower()
    kw = {} if init is None else {"init": init}
    if spec == "mean":
        return replace(base, method="mean", steps=0, **kw)
    kind, _, num = spec.partition(":")
    try:
        value = int(num)
    except ValueError:
        raise ValidationError(f"bad inference spec {spec!r}; use mean, ga:K or rs:B") from None
    if kind == "ga":
        return replace(base, method="gradient_ascent", steps=value, **kw)
    if kind == "rs":
        return replace(base, method="random_search", budget=value, **kw)
    raise ValidationError(f"bad inference spec {spec!r}; use mean, ga:K or rs:B")


@dataclass
class SearchReport:
    init_latent: np.ndarray
    init_loglik: float
    best_latent: np.ndarray
    best_loglik: float
    trajectory: list = field(default_factory=list)  # [(latent, loglik), ...]
    steps_taken: int = 0
    nonfinite: bool = False

    def points(self):
        """All visited points, init first."""
        return [(self.init_latent, self.init_loglik)] + list(self.trajectory)

    def running_best(self) -> list[float]:
        out, best = [], -math.inf
        for _, ll in self.points():
            best = max(best, ll)
            out.append(best)
        return out

    def second_best(self) -> Optional[np.ndarray]:
        """Highest-likelihood visited latent that differs from ``best_latent``."""
        order = sorted(range(len(self.points())), key=lambda k: -self.points()[k][1])
        for k in order:
            z, _ = self.points()[k]
            if not np.array_equal(z, self.best_latent):
                return z
        return None

    def to_json(self) -> dict:
        return {
            "init_latent": self.init_latent.tolist(),
            "init_loglik": self.init_loglik,
            "best_latent": self.best_latent.tolist(),
            "best_loglik": self.best_loglik,
            "trajectory": [{"latent": z.tolist(), "loglik": ll} for z, ll in self.trajectory],
            "steps_taken": self.steps_taken,
            "nonfinite": self.nonfinite,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json())


# --------------------------------------------------------------------------- objective


def _expand(batch: PairBatch, z: torch.Tensor):
    t, n = batch.in_shapes.shape[:2]
    zz = z.unsqueeze(1).expand(t, n, z.shape[-1]).reshape(t * n, -1)
    return zz, batch.flat()


def batched_loglik(model: LPN, batch: PairBatch, z: torch.Tensor, chunk: int = 128) -> torch.Tensor:
    """Sum over each task's pairs of log p(y_i | x_i, z), shape (T,). Differentiable in z."""
    if batch.in_shapes.ndim != 3:
        raise ValidationError("batch must be shaped (T, n)")
    t, n = batch.in_shapes.shape[:2]
    if n == 0:
        raise EmptySet("no specification pairs")
    per_chunk = max(1, chunk // n)
    outs = []
    for s in range(0, t, per_chunk):
        sub = batch.index(slice(s, s + per_chunk))
        zz, flat = _expand(sub, z[s : s + per_chunk])
        ll = model.decoder.log_likelihood(zz, *flat.tensors()).reshape(-1, n)
        outs.append(ll.sum(-1))
    return torch.cat(outs)


def loglik_and_grad(model: LPN, batch: PairBatch, z: torch.Tensor, chunk: int = 128):
    """Objective values (T,) and their gradients with respect to z (T, d)."""
    t, n = batch.in_shapes.shape[:2]
    per_chunk = max(1, chunk // n)
    lls, grads = [], []
    for s in range(0, t, per_chunk):
        zc = z[s : s + per_chunk].detach().clone().requires_grad_(True)
        ll = batched_loglik(model, batch.index(slice(s, s + per_chunk)), zc, chunk)
        (g,) = torch.autograd.grad(ll.sum(), zc)
        lls.append(ll.detach())
        grads.append(g)
    return torch.cat(lls), torch.cat(grads)


# --------------------------------------------------------------------------- init


@torch.no_grad()
def encode_batch(model: LPN, batch: PairBatch, chunk: int = 256):
    t, n = batch.in_shapes.shape[:2]
    flat = batch.flat()
    means, lvs = [], []
    for s in range(0, t * n, chunk):
        m, lv = model.encoder(*flat.index(slice(s, s + chunk)).tensors())
        means.append(m)
        lvs.append(lv)
    d = model.cfg.latent_dim
    return torch.cat(means).reshape(t, n, d), torch.cat(lvs).reshape(t, n, d)


def init_latent(
    model: LPN, batch: Optional[PairBatch], mode: str, generator: torch.Generator, num_tasks: Optional[int] = None
) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Starting latent (T, d) and, for encoder modes, the mean posterior std (T, d)."""
    d = model.cfg.latent_dim
    if mode == "prior":
        t = num_tasks if num_tasks is not None else batch.in_shapes.shape[0]
        return torch.randn(t, d, generator=generator), None
    if batch is None or batch.in_shapes.shape[1] == 0:
        raise EmptySet("encoder initialisation needs at least one specification pair")
    mean, log_var = encode_batch(model, batch)
    std = aggregate_latents(torch.exp(0.5 * log_var), dim=1)
    if mode == "encoder_mean":
        return aggregate_latents(mean, dim=1), std
    if mode == "encoder_sample":
        noise = torch.randn(mean.shape, generator=generator)
        return aggregate_latents(sample_latent(mean, log_var, noise), dim=1), std
    raise ValidationError(f"unknown init {mode!r}")


# --------------------------------------------------------------------------- search


def _lr(cfg: SearchConfig, k: int) -> float:
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return cfg.step_size * 0.5 * (1.0 + math.cos(math.pi * k / cfg.steps))
    return cfg.step_size


def latent_optimize_batch(
    model: LPN,
    batch: PairBatch,
    init: torch.Tensor,
    cfg: SearchConfig,
    generator: Optional[torch.Generator] = None,
    posterior_std: Optional[torch.Tensor] = None,
    chunk: int = 128,
) -> list[SearchReport]:
    """Run ``cfg`` on every task of ``batch`` starting from ``init`` (T, d)."""
    if generator is None:
        generator = torch.Generator().manual_seed(cfg.seed)
    init = init.detach().to(torch.float32)
    t = init.shape[0]
    if not torch.isfinite(init).all():
        raise ValidationError("initial latent must be finite")

    if cfg.method == "gradient_ascent" and cfg.steps > 0:
        ll, g = loglik_and_grad(model, batch, init, chunk)
    else:
        with torch.no_grad():
            ll = batched_loglik(model, batch, init, chunk)
        g = None
    reports = [
        SearchReport(init[k].numpy().copy(), float(ll[k]), init[k].numpy().copy(), float(ll[k])) for k in range(t)
    ]
    alive = torch.ones(t, dtype=torch.bool)

    def record(z, ll_new, step):
        for k in range(t):
            if not alive[k]:
                continue
            val = float(ll_new[k])
            zk = z[k].numpy().copy()
            if not (math.isfinite(val) and np.isfinite(zk).all()):
                reports[k].nonfinite = True
                alive[k] = False
                continue
            r = reports[k]
            r.trajectory.append((zk, val))
            r.steps_taken = step
            if val > r.best_loglik or not cfg.track_best:
                r.best_latent, r.best_loglik = zk, val

    if cfg.method == "gradient_ascent":
        z = init.clone()
        m = torch.zeros_like(z)
        v = torch.zeros_like(z)
        b1, b2 = cfg.betas
        for step in range(1, cfg.steps + 1):
            lr = _lr(cfg, step - 1)
            if cfg.optimizer == "adam":
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                m_hat = m / (1 - b1**step)
                v_hat = v / (1 - b2**step)
                delta = lr * m_hat / (torch.sqrt(v_hat) + cfg.eps)
            else:
                delta = lr * g
            z = torch.where(alive[:, None], z + delta, z)
            if step < cfg.steps:
                ll, g = loglik_and_grad(model, batch, z, chunk)
            else:
                with torch.no_grad():
                    ll = batched_loglik(model, batch, z, chunk)
            record(z, ll, step)
            if not alive.any():
                break
    elif cfg.method == "random_search":
        d = init.shape[1]
        noise = torch.randn(t, cfg.budget, d, generator=generator)
        if cfg.rs_around == "posterior":
            if posterior_std is None:
                raise ValidationError("posterior-centred random search needs the posterior std")
            cands = init[:, None] + noise * posterior_std[:, None]
        else:
            cands = noise
        for j in range(cfg.budget):
            with torch.no_grad():
                ll = batched_loglik(model, batch, cands[:, j], chunk)
            record(cands[:, j], ll, j + 1)
    return reports


def latent_optimize(
    model: LPN,
    pairs: Sequence[tuple[Grid, Grid]],
    init,
    cfg: SearchConfig,
    generator: Optional[torch.Generator] = None,
) -> SearchReport:
    if len(pairs) == 0:
        raise EmptySet("no specification pairs")
    batch = pairs_to_batch(pairs, model.cfg).reshape(1, len(pairs))
    z0 = torch.as_tensor(np.asarray(init), dtype=torch.float32).reshape(1, -1)
    return latent_optimize_batch(model, batch, z0, cfg, generator)[0]
