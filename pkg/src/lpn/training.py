"""Training: leave-one-out latents, optional inner latent ascent, reconstruction + KL.

Tasks are sampled online from the synthetic families (or drawn from a loaded
ARC-format dataset), so steps are the only unit of progress.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .encoder import leave_one_out_means, sample_latent
from .errors import CheckpointMismatch, NonFinite, ShapeMismatch, ValidationError
from .grids import TaskInstance
from .model import LPN, PairBatch, tasks_to_batch
from .nncore import ARCH_PRESETS, ArchConfig, OptimConfig, exact_attention, make_optimizer, optimizer_step
from .taskgen import FAMILIES, default_family_config, generate_tasks

log = logging.getLogger(__name__)

INNER_MODES = ("stop_gradient", "meta_gradient")


@dataclass
class TrainConfig:
    preset: str = "pattern"
    family: str = "pattern"
    family_overrides: dict = field(default_factory=dict)
    program_seed: int = 0
    dataset: Optional[str] = None  # ARC-format JSON used instead of a synthetic family
    steps: int = 20_000
    batch_size: int = 128
    pairs: int = 4
    inner_steps: int = 0
    inner_mode: str = "stop_gradient"
    inner_step_size: float = 0.1
    beta: float = 1e-4
    optim: OptimConfig = field(default_factory=OptimConfig)
    micro_batch: int = 32
    eval_every: int = 1000
    eval_tasks: int = 64
    eval_infer: tuple = ("mean", "ga:5")
    log_every: int = 50
    ckpt_every: int = 1000
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**{**self.optim, "betas": tuple(self.optim.get("betas", (0.9, 0.999)))})
        self.eval_infer = tuple(self.eval_infer)
        self.validate()

    def validate(self):
        if self.pairs < 2:
            raise ValidationError("training needs at least 2 pairs per task (leave-one-out)")
        if self.inner_steps < 0:
            raise ValidationError("inner_steps must be >= 0")
        if self.inner_mode not in INNER_MODES:
            raise ValidationError(f"inner_mode must be one of {INNER_MODES}")
        if self.steps < 0 or self.batch_size < 1 or self.micro_batch < 1:
            raise ValidationError("steps >= 0, batch_size >= 1 and micro_batch >= 1 required")
        if self.beta < 0 or not math.isfinite(self.beta):
            raise ValidationError("beta must be a finite non-negative number")
        if self.inner_step_size <= 0:
            raise ValidationError("inner_step_size must be positive")
        if self.dataset is None and self.family not in FAMILIES:
            raise ValidationError(f"unknown family {self.family!r}")
        if self.optim.lr <= 0 or self.optim.clip_norm <= 0:
            raise ValidationError("learning rate and clip norm must be positive")

    @property
    def mean_training(self) -> bool:
        return self.inner_steps == 0

    def family_config(self):
        return default_family_config(self.family, pairs_per_task=self.pairs, query_pairs=0, **self.family_overrides)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optim"]["betas"] = list(self.optim.betas)
        d["eval_infer"] = list(self.eval_infer)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in names})


# Named presets: architecture plus training settings of each experiment family.
TRAIN_PRESETS = {
    "overfit": TrainConfig(preset="overfit", family="fixed-program", steps=10_000, beta=1e-4),
    "pattern": TrainConfig(preset="pattern", family="pattern", steps=20_000, beta=1e-4),
    "tiny": TrainConfig(preset="tiny", family="tiny-pattern", steps=200_000, beta=1e-3),
    "ood": TrainConfig(preset="ood", family="pattern", steps=100_000, beta=1e-4),
    "arc": TrainConfig(preset="arc", family="pattern", steps=220_000, beta=1e-4, micro_batch=4,
                       family_overrides={"grid_rows": 30, "grid_cols": 30}),
}


def preset(name: str, **overrides) -> tuple[ArchConfig, TrainConfig]:
    if name not in TRAIN_PRESETS:
        raise ValidationError(f"unknown preset {name!r}; choose from {sorted(TRAIN_PRESETS)}")
    return ARCH_PRESETS[name], replace(TRAIN_PRESETS[name], **overrides)


def kl_gaussian(mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """KL(N(mean, exp(log_var)) || N(0, I)) summed over the last axis."""
    return 0.5 * torch.sum(mean * mean + torch.exp(log_var) - 1.0 - log_var, dim=-1)


def _others(n: int) -> torch.Tensor:
    return torch.tensor([[j for j in range(n) if j != i] for i in range(n)])


def context_loglik(model: LPN, batch: PairBatch, z: torch.Tensor) -> torch.Tensor:
    """For latents z (b, n, d): sum over j != i of log p(y_j | x_j, z_i), shape (b, n)."""
    b, n = batch.in_shapes.shape[:2]
    ctx = batch.index((slice(None), _others(n)))  # (b, n, n-1)
    zz = z[:, :, None].expand(b, n, n - 1, z.shape[-1]).reshape(-1, z.shape[-1])
    ll = model.decoder.log_likelihood(zz, *ctx.flat().tensors())
    return ll.reshape(b, n, n - 1).sum(-1)


@dataclass
class ChunkLosses:
    rec: torch.Tensor  # (b, n) negative log-likelihood per pair
    kl: torch.Tensor  # (b, n)
    z_init: torch.Tensor  # leave-one-out latents before inner steps
    z_final: torch.Tensor
    inner_grad_calls: int


def inner_ascent(model: LPN, batch: PairBatch, z: torch.Tensor, steps: int, alpha: float, meta: bool):
    """``steps`` plain ascent steps on the context log-likelihood.

    In stop-gradient mode the update is a constant offset, so parameter gradients
    flow only through the starting latent; in meta mode they also flow through
    the gradient itself.
    """
    calls = 0
    for _ in range(steps):
        if meta:
            (g,) = torch.autograd.grad(context_loglik(model, batch, z).sum(), z, create_graph=True)
        else:
            zd = z.detach().requires_grad_(True)
            (g,) = torch.autograd.grad(context_loglik(model, batch, zd).sum(), zd)
        z = z + alpha * g
        calls += 1
    return z, calls


def task_losses(model: LPN, batch: PairBatch, noise: torch.Tensor, cfg: TrainConfig) -> ChunkLosses:
    """Per-pair reconstruction and KL terms for a (b, n) batch with noise (b, n, d)."""
    if batch.in_shapes.ndim != 3:
        raise ShapeMismatch("training batch must be shaped (tasks, pairs)")
    b, n = batch.in_shapes.shape[:2]
    d = model.cfg.latent_dim
    if noise.shape != (b, n, d):
        raise ShapeMismatch(f"noise shape {tuple(noise.shape)} != {(b, n, d)}")
    meta = cfg.inner_mode == "meta_gradient" and cfg.inner_steps > 0
    flat = batch.flat()
    # the fused attention kernel cannot be differentiated twice
    with exact_attention() if meta else contextlib.nullcontext():
        mean, log_var = model.encoder(*flat.tensors())
        mean, log_var = mean.reshape(b, n, d), log_var.reshape(b, n, d)
        z = leave_one_out_means(sample_latent(mean, log_var, noise))
        z0 = z
        calls = 0
        if cfg.inner_steps > 0:
            z, calls = inner_ascent(model, batch, z, cfg.inner_steps, cfg.inner_step_size, meta)
        ll = model.decoder.log_likelihood(z.reshape(b * n, d), *flat.tensors()).reshape(b, n)
    return ChunkLosses(-ll, kl_gaussian(mean, log_var), z0, z, calls)


@dataclass
class StepResult:
    step: int
    loss: float
    rec: float
    kl: float
    grad_norm: float
    inner_grad_calls: int
    seconds: float

    def to_dict(self):
        return asdict(self)


def step_noise(seed: int, step: int, shape) -> torch.Tensor:
    """Reparameterization noise for one step, a pure function of (seed, step)."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(step), 1))
    gen = torch.Generator().manual_seed(int(ss.generate_state(1, np.uint64)[0] >> 1))
    return torch.randn(shape, generator=gen)


def train_step(
    model: LPN,
    optimizer: torch.optim.Optimizer,
    tasks: Sequence[TaskInstance],
    cfg: TrainConfig,
    noise: torch.Tensor,
    step: int = 0,
) -> StepResult:
    """One synchronous parameter update over ``tasks``.

    Gradients are accumulated over micro-batches of ``cfg.micro_batch`` tasks;
    the loss is the mean over pairs and tasks of rec + beta * KL.
    Raises NonFinite (parameters untouched) on NaN/Inf loss or gradients.
    """
    if any(t.n != cfg.pairs for t in tasks):
        raise ShapeMismatch(f"every task must have exactly {cfg.pairs} pairs")
    t0 = time.perf_counter()
    batch = tasks_to_batch(tasks, model.cfg)
    B = len(tasks)
    denom = B * cfg.pairs
    model.train()
    optimizer.zero_grad(set_to_none=True)
    rec_sum, kl_sum, calls = 0.0, 0.0, 0
    for s in range(0, B, cfg.micro_batch):
        sub = batch.index(slice(s, s + cfg.micro_batch))
        out = task_losses(model, sub, noise[s : s + cfg.micro_batch], cfg)
        rec_c = out.rec.sum()
        kl_c = out.kl.sum()
        if not (torch.isfinite(rec_c) and torch.isfinite(kl_c)):
            optimizer.zero_grad(set_to_none=True)
            raise NonFinite(
                f"step {step}: non-finite loss (rec={float(rec_c.detach())}, kl={float(kl_c.detach())}) in tasks "
                f"{[t.task_id for t in tasks[s : s + cfg.micro_batch]][:4]}"
            )
        ((rec_c + cfg.beta * kl_c) / denom).backward()
        rec_sum += float(rec_c.detach())
        kl_sum += float(kl_c.detach())
        calls += out.inner_grad_calls
    try:
        norm = optimizer_step(model.parameters(), optimizer, cfg.optim.clip_norm)
    except NonFinite as e:
        optimizer.zero_grad(set_to_none=True)
        raise NonFinite(f"step {step}: {e}") from None
    rec = rec_sum / denom
    kl = kl_sum / denom
    return StepResult(step, rec + cfg.beta * kl, rec, kl, norm, calls, time.perf_counter() - t0)


# --------------------------------------------------------------------------- data


class TaskSource:
    """Deterministic supply of training batches: batch ``step`` depends only on (seed, step)."""

    def __init__(self, cfg: TrainConfig, arch: ArchConfig):
        self.cfg = cfg
        self.tasks = None
        if cfg.dataset is not None:
            from .grids import load_arc_json

            loaded = load_arc_json(Path(cfg.dataset).read_bytes())
            self.tasks = [t for t in loaded.values() if t.n >= 1]
            if not self.tasks:
                raise ValidationError(f"{cfg.dataset}: no usable tasks")
        else:
            self.family_cfg = cfg.family_config()
            if self.family_cfg.grid_rows > arch.max_rows or self.family_cfg.grid_cols > arch.max_cols:
                raise ValidationError("family grids exceed the model's grid layout")

    def batch(self, step: int) -> list[TaskInstance]:
        cfg = self.cfg
        if self.tasks is None:
            return generate_tasks(
                cfg.family, self.family_cfg, cfg.seed, cfg.batch_size, start=step * cfg.batch_size,
                program_seed=cfg.program_seed,
            )
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(step, 2)))
        out = []
        for k in rng.integers(0, len(self.tasks), size=cfg.batch_size):
            t = self.tasks[int(k)]
            pool = list(t.pairs) + [(x, y) for x, y in t.query if y is not None]
            pick = rng.choice(len(pool), size=cfg.pairs, replace=len(pool) < cfg.pairs)
            out.append(TaskInstance(tuple(pool[int(j)] for j in pick), (), t.task_id))
        return out

    def eval_tasks(self, count: int) -> list[TaskInstance]:
        if self.tasks is not None:
            return [t for t in self.tasks if t.query and all(y is not None for _, y in t.query)][:count]
        fc = replace(self.family_cfg, query_pairs=1)
        return generate_tasks(self.cfg.family, fc, self.cfg.seed + 1_000_003, count, program_seed=self.cfg.program_seed)


# --------------------------------------------------------------------------- loop


class Trainer:
    """Owns the model, optimizer and run directory of one training run."""

    def __init__(
        self,
        arch: ArchConfig,
        cfg: TrainConfig,
        out_dir=None,
        model: Optional[LPN] = None,
        optimizer=None,
        start_step: int = 0,
    ):
        self.arch = arch
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = model if model is not None else LPN(arch, seed=cfg.seed)
        if self.model.cfg != arch:
            raise CheckpointMismatch(f"model arch {self.model.cfg} != {arch}")
        self.optimizer = optimizer if optimizer is not None else make_optimizer(self.model.parameters(), cfg.optim)
        self.step = start_step
        self.source = TaskSource(cfg, arch)
        self.history: list[StepResult] = []

    @property
    def metrics_path(self):
        return self.out_dir / "metrics.jsonl" if self.out_dir else None

    def _log(self, record: dict):
        if self.out_dir is not None:
            from .persistence import append_jsonl

            append_jsonl(self.metrics_path, record)

    def checkpoint_meta(self) -> dict:
        return {"step": self.step, "seed": self.cfg.seed, "train_config": self.cfg.to_dict()}

    def save(self, name: str = "latest.ckpt"):
        from .persistence import save_checkpoint

        if self.out_dir is None:
            return None
        path = save_checkpoint(self.out_dir / name, self.model, self.optimizer, self.checkpoint_meta())
        return path

    def evaluate(self, count: Optional[int] = None) -> dict:
        from .eval import evaluate_tasks, summarize
        from .search import parse_infer

        tasks = self.source.eval_tasks(count or self.cfg.eval_tasks)
        out = {}
        for spec in self.cfg.eval_infer:
            s = summarize(evaluate_tasks(self.model, tasks, parse_infer(spec), 1, seed=self.cfg.seed))
            out[spec] = {"exact": s["exact_top1"], "pixel": s["pixel_accuracy"]}
        return out

    def train_one(self) -> StepResult:
        tasks = self.source.batch(self.step)
        noise = step_noise(self.cfg.seed, self.step, (len(tasks), self.cfg.pairs, self.arch.latent_dim))
        res = train_step(self.model, self.optimizer, tasks, self.cfg, noise, self.step)
        self.step += 1
        res.step = self.step
        self.history.append(res)
        return res

    def run(self, until: Optional[int] = None, progress: bool = False) -> list[StepResult]:
        """Train up to step ``until`` (default ``cfg.steps``)."""
        until = self.cfg.steps if until is None else until
        cfg = self.cfg
        while self.step < until:
            try:
                res = self.train_one()
            except NonFinite as e:
                self._log({"event": "nonfinite", "step": self.step, "message": str(e)})
                log.error("aborting: %s", e)
                raise
            done = self.step
            record = None
            if cfg.log_every and (done % cfg.log_every == 0 or done == until):
                record = {"event": "train", **res.to_dict()}
            if cfg.eval_every and done % cfg.eval_every == 0:
                record = {**(record or {"event": "train", **res.to_dict()}), "eval": self.evaluate()}
            if record is not None:
                self._log(record)
                if progress:
                    log.info(json.dumps(record))
            if cfg.ckpt_every and done % cfg.ckpt_every == 0:
                self.save()
        self.save()
        return self.history


def train(arch: ArchConfig, cfg: TrainConfig, out_dir=None, resume: bool = False, progress: bool = False) -> Trainer:
    """Run (or resume) a training run in ``out_dir``; returns the finished Trainer."""
    from .persistence import write_manifest

    trainer = None
    if resume and out_dir is not None and (Path(out_dir) / "latest.ckpt").exists():
        trainer = resume_trainer(Path(out_dir) / "latest.ckpt", arch, cfg, out_dir)
    if trainer is None:
        trainer = Trainer(arch, cfg, out_dir)
        if out_dir is not None:
            write_manifest(
                Path(out_dir) / "manifest.json",
                {"arch": arch.to_dict(), "train": cfg.to_dict()},
                {"num_parameters": trainer.model.num_parameters()},
            )
    trainer.run(progress=progress)
    return trainer


def resume_trainer(checkpoint, arch: ArchConfig, cfg: TrainConfig, out_dir=None, reset_optimizer: bool = False) -> Trainer:
    from .persistence import load_checkpoint

    model, opt, meta = load_checkpoint(checkpoint, expect_arch=arch, optim_config=cfg.optim)
    if reset_optimizer:
        opt = make_optimizer(model.parameters(), cfg.optim)
    return Trainer(arch, cfg, out_dir, model=model, optimizer=opt, start_step=int(meta.get("step", 0)))


def finetune_with_inner_steps(
    checkpoint, arch: ArchConfig, cfg: TrainConfig, steps: int, out_dir=None, reset_optimizer: bool = False
) -> LPN:
    """Continue a checkpointed run for ``steps`` more steps with ``cfg.inner_steps``."""
    trainer = resume_trainer(checkpoint, arch, cfg, out_dir, reset_optimizer)
    trainer.run(until=trainer.step + steps)
    return trainer.model
