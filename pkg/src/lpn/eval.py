"""Scoring, batched task evaluation and the experiment protocols built on it."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.stats import norm

from .errors import EmptySpecification, MissingTruth, ValidationError, WrongLatentDim
from .grids import Grid, TaskInstance
from .model import LPN, inputs_to_tensors, tasks_to_batch, tensors_to_grids
from .persistence import atomic_write_text
from .search import SearchConfig, encode_batch, init_latent, latent_optimize_batch
from .encoder import aggregate_latents
from .taskgen import PatternFamilyConfig, generate_tasks


def score_prediction(pred: Grid, truth: Grid) -> tuple[bool, float]:
    """Exact match and pixel accuracy (matching overlap cells over truth cells)."""
    r = min(pred.rows, truth.rows)
    c = min(pred.cols, truth.cols)
    matches = int(np.sum(pred.cells[:r, :c] == truth.cells[:r, :c]))
    exact = pred.shape == truth.shape and matches == truth.cells.size
    return exact, matches / truth.cells.size


def canonical_order(task: TaskInstance) -> TaskInstance:
    """Sort specification pairs by content so results never depend on their listed order."""
    pairs = sorted(task.pairs, key=lambda p: (p[0].key(), p[1].key()))
    return TaskInstance(tuple(pairs), task.query, task.task_id)


@dataclass
class TaskResult:
    task_id: str
    predictions: list  # per attempt, list of Grid per query
    exact: list  # per attempt, list of bool per query
    pixel: list  # per attempt, list of float per query
    best_loglik: float
    init_loglik: float

    @property
    def attempts(self) -> int:
        return len(self.predictions)

    def solved(self, k: int = 1) -> bool:
        """Solved at top-k: some attempt among the first k matches every query."""
        return any(all(self.exact[a]) for a in range(min(k, self.attempts)))

    def query_solved(self, k: int = 1) -> list[bool]:
        nq = len(self.exact[0])
        return [any(self.exact[a][q] for a in range(min(k, self.attempts))) for q in range(nq)]

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "solved_top1": self.solved(1),
            "solved_top2": self.solved(2),
            "exact": self.exact,
            "pixel_accuracy": self.pixel,
            "best_loglik": self.best_loglik,
            "init_loglik": self.init_loglik,
            "predictions": [[g.to_list() for g in att] for att in self.predictions],
        }


def _decode(model: LPN, inputs: Sequence[Grid], latents: torch.Tensor) -> list[Grid]:
    s, p = inputs_to_tensors(inputs, model.cfg)
    with torch.no_grad():
        shapes, pixels = model.decoder.generate(latents, s, p)
    return tensors_to_grids(shapes, pixels, model.cfg)


def infer_tasks(
    model: LPN,
    tasks: Sequence[TaskInstance],
    cfg: SearchConfig,
    attempts: int = 1,
    seed: Optional[int] = None,
    batch_size: int = 64,
):
    """Search then decode every query input. Query outputs are never read.

    Returns ``(predictions, reports)`` where ``predictions[t][a][q]`` is the grid
    for attempt ``a`` of query ``q`` of task ``t``. Exactly one decode per attempt.
    """
    if attempts not in (1, 2):
        raise ValidationError("attempts must be 1 or 2")
    seed = cfg.seed if seed is None else seed
    gen = torch.Generator().manual_seed(int(seed))
    tasks = [canonical_order(t) for t in tasks]
    for t in tasks:
        if t.n < 1:
            raise EmptySpecification(f"task {t.task_id!r} has no specification pairs")
    preds: list = [None] * len(tasks)
    reports: list = [None] * len(tasks)
    groups: dict[int, list[int]] = {}
    for k, t in enumerate(tasks):
        groups.setdefault(t.n, []).append(k)
    model.eval()
    for n in sorted(groups):
        idx = groups[n]
        for s in range(0, len(idx), batch_size):
            chunk = idx[s : s + batch_size]
            batch = tasks_to_batch([tasks[k] for k in chunk], model.cfg)
            z0, std = init_latent(model, batch, cfg.init, gen)
            reps = latent_optimize_batch(model, batch, z0, cfg, gen, posterior_std=std)
            fallback = None
            if attempts == 2:
                mean, _ = encode_batch(model, batch)
                fallback = aggregate_latents(mean, dim=1)
            # one decode per (task, attempt, query), batched across tasks
            inputs, latents, owners = [], [], []
            for j, k in enumerate(chunk):
                r = reps[j]
                lat = [r.best_latent]
                if attempts == 2:
                    second = r.second_best()
                    lat.append(second if second is not None else fallback[j].numpy())
                for a, z in enumerate(lat):
                    for q, (x, _) in enumerate(tasks[k].query):
                        inputs.append(x)
                        latents.append(z)
                        owners.append((k, a, q))
                preds[k] = [[None] * len(tasks[k].query) for _ in lat]
                reports[k] = r
            if inputs:
                zs = torch.as_tensor(np.stack(latents), dtype=torch.float32)
                for s2 in range(0, len(inputs), 256):
                    grids = _decode(model, inputs[s2 : s2 + 256], zs[s2 : s2 + 256])
                    for (k, a, q), g in zip(owners[s2 : s2 + 256], grids):
                        preds[k][a][q] = g
    return preds, reports


def evaluate_tasks(
    model: LPN,
    tasks: Sequence[TaskInstance],
    cfg: SearchConfig,
    attempts: int = 1,
    seed: Optional[int] = None,
    batch_size: int = 64,
) -> list[TaskResult]:
    for t in tasks:
        if not t.query:
            raise MissingTruth(f"task {t.task_id!r} has no query pairs")
        if any(y is None for _, y in t.query):
            raise MissingTruth(f"task {t.task_id!r} is missing query outputs")
    # search and decoding only ever see inputs; truth is attached afterwards
    blind = [TaskInstance(t.pairs, tuple((x, None) for x, _ in t.query), t.task_id) for t in tasks]
    preds, reports = infer_tasks(model, blind, cfg, attempts, seed, batch_size)
    results = []
    for t, pr, rep in zip(tasks, preds, reports):
        exact, pixel = [], []
        for att in pr:
            scores = [score_prediction(g, y) for g, (_, y) in zip(att, t.query)]
            exact.append([e for e, _ in scores])
            pixel.append([p for _, p in scores])
        results.append(TaskResult(t.task_id, pr, exact, pixel, rep.best_loglik, rep.init_loglik))
    return results


def evaluate_task(model: LPN, task: TaskInstance, cfg: SearchConfig, attempts: int = 1, seed=None) -> TaskResult:
    return evaluate_tasks(model, [task], cfg, attempts, seed)[0]


def summarize(results: Sequence[TaskResult]) -> dict:
    if not results:
        return {"tasks": 0}
    q1 = [s for r in results for s in r.query_solved(1)]
    q2 = [s for r in results for s in r.query_solved(2)]
    pix = [p for r in results for p in r.pixel[0]]
    return {
        "tasks": len(results),
        "exact_top1": float(np.mean([r.solved(1) for r in results])),
        "exact_top2": float(np.mean([r.solved(2) for r in results])),
        "query_exact_top1": float(np.mean(q1)),
        "query_exact_top2": float(np.mean(q2)),
        "pixel_accuracy": float(np.mean(pix)),
    }


# --------------------------------------------------------------------------- tables


@dataclass
class TableArtifact:
    rows: list  # dicts
    config: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"config": self.config, "rows": self.rows}, indent=2, sort_keys=True)

    def write(self, stem):
        stem = Path(stem)
        atomic_write_text(stem.with_suffix(".csv"), self.to_csv())
        atomic_write_text(stem.with_suffix(".json"), self.to_json())


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of per-seed values."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_ablation_grid(
    runs: dict,
    infer_cfgs: Sequence[SearchConfig],
    tasks: Sequence[TaskInstance],
    attempts: int = 1,
    eval_seed: int = 0,
) -> TableArtifact:
    """``runs`` maps a training label to one model per seed.

    Each cell holds the mean and std over seeds of exact-match accuracy (percent),
    with pixel accuracy as a secondary column.
    """
    rows = []
    for label, models in runs.items():
        row = {"training": label}
        for cfg in infer_cfgs:
            accs, pix = [], []
            for m in models:
                s = summarize(evaluate_tasks(m, tasks, cfg, attempts, eval_seed))
                accs.append(100.0 * s["exact_top1"])
                pix.append(100.0 * s["pixel_accuracy"])
            mu, sd = mean_std(accs)
            row[f"{cfg.label} mean"] = mu
            row[f"{cfg.label} std"] = sd
            row[f"{cfg.label} pixel"] = mean_std(pix)[0]
        rows.append(row)
    config = {
        "inference": [c.to_dict() for c in infer_cfgs],
        "training_runs": {k: len(v) for k, v in runs.items()},
        "num_tasks": len(tasks),
        "task_ids": [t.task_id for t in tasks],
        "attempts": attempts,
        "eval_seed": eval_seed,
    }
    return TableArtifact(rows, config)


OOD_DENSITIES = (0.5, 0.75, 1.0)


def run_ood_protocol(
    model: LPN,
    infer_cfgs: Sequence[SearchConfig],
    densities: Sequence[float] = OOD_DENSITIES,
    num_tasks: int = 100,
    family_cfg: Optional[PatternFamilyConfig] = None,
    data_seed: int = 1,
    eval_seed: int = 0,
) -> TableArtifact:
    """Accuracy per pattern density, one row per density."""
    base = family_cfg or PatternFamilyConfig()
    for d in densities:
        if not (0.0 <= d <= 1.0) or math.isnan(d):
            raise ValidationError(f"density {d} outside [0, 1]")
    rows = []
    for d in densities:
        tasks = generate_tasks("pattern", replace(base, color_density=float(d)), data_seed, num_tasks)
        row = {"density": float(d)}
        for cfg in infer_cfgs:
            s = summarize(evaluate_tasks(model, tasks, cfg, 1, eval_seed))
            row[cfg.label] = 100.0 * s["exact_top1"]
            row[f"{cfg.label} pixel"] = 100.0 * s["pixel_accuracy"]
        rows.append(row)
    config = {
        "densities": [float(d) for d in densities],
        "family": base.to_dict(),
        "inference": [c.to_dict() for c in infer_cfgs],
        "num_tasks": num_tasks,
        "data_seed": data_seed,
        "eval_seed": eval_seed,
        "arch": model.cfg.to_dict(),
    }
    return TableArtifact(rows, config)


# --------------------------------------------------------------------------- traversal


def traversal_latents(resolution: int) -> np.ndarray:
    """(R, R, 2) latents: cell (a, b) sits at the centre of its unit-square bin,
    pushed through the inverse normal CDF."""
    if resolution < 1:
        raise ValidationError("resolution must be >= 1")
    u = (np.arange(resolution) + 0.5) / resolution
    v = norm.ppf(u)
    return np.stack(np.meshgrid(v, v, indexing="ij"), axis=-1)


@dataclass
class Traversal:
    latents: np.ndarray  # (R, R, 2)
    tiles: list  # R lists of R Grids
    marker_input: Grid

    def to_json(self) -> dict:
        r = self.latents.shape[0]
        return {
            "resolution": r,
            "marker_input": self.marker_input.to_list(),
            "tiles": [
                [{"latent": self.latents[a, b].tolist(), "grid": self.tiles[a][b].to_list()} for b in range(r)]
                for a in range(r)
            ],
        }

    def to_ppm(self, cell: int = 8, gap: int = 2) -> bytes:
        """Binary PPM mosaic of the R x R decoded tiles."""
        r = len(self.tiles)
        th = max(g.rows for row in self.tiles for g in row)
        tw = max(g.cols for row in self.tiles for g in row)
        H = r * (th * cell + gap) + gap
        W = r * (tw * cell + gap) + gap
        img = np.full((H, W, 3), 255, dtype=np.uint8)
        for a in range(r):
            for b in range(r):
                g = self.tiles[a][b]
                y0 = gap + a * (th * cell + gap)
                x0 = gap + b * (tw * cell + gap)
                rgb = PALETTE[g.cells].repeat(cell, 0).repeat(cell, 1)
                img[y0 : y0 + rgb.shape[0], x0 : x0 + rgb.shape[1]] = rgb
        return f"P6 {W} {H} 255\n".encode() + img.tobytes()


# the usual ARC colour scheme
PALETTE = np.array(
    [
        (0, 0, 0),
        (0, 116, 217),
        (255, 65, 54),
        (46, 204, 64),
        (255, 220, 0),
        (170, 170, 170),
        (240, 18, 190),
        (255, 133, 27),
        (127, 219, 255),
        (135, 12, 37),
    ],
    dtype=np.uint8,
)


def latent_traversal(model: LPN, resolution: int, marker_input: Optional[Grid] = None) -> Traversal:
    if model.cfg.latent_dim != 2:
        raise WrongLatentDim(f"traversal needs a 2-d latent space, model has {model.cfg.latent_dim}")
    if marker_input is None:
        cells = np.zeros((model.cfg.max_rows, model.cfg.max_cols), dtype=np.int64)
        cells[0, 0] = 1
        marker_input = Grid(cells)
    lat = traversal_latents(resolution)
    flat = torch.as_tensor(lat.reshape(-1, 2), dtype=torch.float32)
    grids = _decode(model, [marker_input] * flat.shape[0], flat)
    tiles = [grids[a * resolution : (a + 1) * resolution] for a in range(resolution)]
    return Traversal(lat, tiles, marker_input)
