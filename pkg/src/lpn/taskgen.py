"""Synthetic pattern-pasting program families.

Every task draws one pattern and pastes it (top-left anchored) at a marker
location in each pair. Inputs are black grids holding only the marker; outputs
are black grids holding only the pasted pattern.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import ValidationError
from .grids import Grid, TaskInstance

FAMILIES = ("pattern", "tiny-pattern", "fixed-program")


@dataclass(frozen=True)
class PatternFamilyConfig:
    grid_rows: int = 10
    grid_cols: int = 10
    pattern_rows: int = 4
    pattern_cols: int = 4
    color_density: float = 0.5
    marker_color: int = 1
    pairs_per_task: int = 4
    query_pairs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.grid_rows <= 30 and 1 <= self.grid_cols <= 30):
            raise ValidationError("grid dims must lie in 1..30")
        if not (1 <= self.pattern_rows <= self.grid_rows and 1 <= self.pattern_cols <= self.grid_cols):
            raise ValidationError("pattern must fit inside the grid")
        if not (0.0 <= self.color_density <= 1.0):
            raise ValidationError(f"color_density {self.color_density} outside [0, 1]")
        if not (1 <= self.marker_color <= 9):
            raise ValidationError("marker_color must be a non-black color 1..9")
        if self.pairs_per_task < 1 or self.query_pairs < 0:
            raise ValidationError("pairs_per_task >= 1 and query_pairs >= 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


TINY_CONFIG = PatternFamilyConfig(grid_rows=4, grid_cols=4, pattern_rows=2, pattern_cols=2)


def task_stream(master_seed: int, index: int) -> np.random.Generator:
    """Independent stream for task ``index``; tasks never share random state."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(index),)))


def sample_pattern(cfg: PatternFamilyConfig, rng: np.random.Generator) -> np.ndarray:
    colored = rng.random((cfg.pattern_rows, cfg.pattern_cols)) < cfg.color_density
    colors = rng.integers(1, 10, size=(cfg.pattern_rows, cfg.pattern_cols))
    return np.where(colored, colors, 0).astype(np.int64)


def _paste_pairs(pattern: np.ndarray, cfg: PatternFamilyConfig, rng: np.random.Generator, count: int):
    pr, pc = pattern.shape
    pairs = []
    for _ in range(count):
        r = int(rng.integers(0, cfg.grid_rows - pr + 1))
        c = int(rng.integers(0, cfg.grid_cols - pc + 1))
        x = np.zeros((cfg.grid_rows, cfg.grid_cols), dtype=np.int64)
        x[r, c] = cfg.marker_color
        y = np.zeros_like(x)
        y[r : r + pr, c : c + pc] = pattern
        pairs.append((Grid(x), Grid(y)))
    return pairs


def _build_task(pattern, cfg, rng, task_id) -> TaskInstance:
    pairs = _paste_pairs(pattern, cfg, rng, cfg.pairs_per_task + cfg.query_pairs)
    n = cfg.pairs_per_task
    return TaskInstance(tuple(pairs[:n]), tuple(pairs[n:]), task_id)


def sample_pattern_task(
    cfg: PatternFamilyConfig, rng: np.random.Generator, task_id: str = ""
) -> TaskInstance:
    pattern = sample_pattern(cfg, rng)
    return _build_task(pattern, cfg, rng, task_id)


def sample_tiny_pattern_task(rng: np.random.Generator, task_id: str = "", **overrides) -> TaskInstance:
    return sample_pattern_task(replace(TINY_CONFIG, **overrides), rng, task_id)


def fixed_program_pattern(program_seed: int, cfg: PatternFamilyConfig) -> np.ndarray:
    return sample_pattern(cfg, np.random.default_rng(np.random.SeedSequence(int(program_seed))))


def fixed_program_family(
    program_seed: int,
    rng: np.random.Generator,
    cfg: Optional[PatternFamilyConfig] = None,
    task_id: str = "",
) -> TaskInstance:
    """A task whose pattern is fixed by ``program_seed``; only markers vary with ``rng``."""
    cfg = cfg or PatternFamilyConfig()
    return _build_task(fixed_program_pattern(program_seed, cfg), cfg, rng, task_id)


def family_sampler(
    family: str, cfg: PatternFamilyConfig, program_seed: int = 0
) -> Callable[[np.random.Generator, str], TaskInstance]:
    if family == "pattern":
        return lambda rng, tid: sample_pattern_task(cfg, rng, tid)
    if family == "tiny-pattern":
        return lambda rng, tid: sample_pattern_task(cfg, rng, tid)
    if family == "fixed-program":
        return lambda rng, tid: fixed_program_family(program_seed, rng, cfg, tid)
    raise ValidationError(f"unknown family {family!r}; choose from {FAMILIES}")


def default_family_config(family: str, **overrides) -> PatternFamilyConfig:
    base = TINY_CONFIG if family == "tiny-pattern" else PatternFamilyConfig()
    return replace(base, **overrides)


def generate_tasks(
    family: str,
    cfg: PatternFamilyConfig,
    master_seed: int,
    count: int,
    start: int = 0,
    program_seed: int = 0,
) -> list[TaskInstance]:
    """Tasks ``start .. start+count-1`` of the family; each index has its own stream,
    so any split of the index range reproduces the same tasks."""
    sampler = family_sampler(family, cfg, program_seed)
    return [
        sampler(task_stream(master_seed, k), f"gen:{family}:{master_seed}:{k}")
        for k in range(start, start + count)
    ]


def iter_tasks(family: str, cfg: PatternFamilyConfig, master_seed: int, start: int = 0,
               program_seed: int = 0) -> Iterator[TaskInstance]:
    sampler = family_sampler(family, cfg, program_seed)
    k = start
    while True:
        yield sampler(task_stream(master_seed, k), f"gen:{family}:{master_seed}:{k}")
        k += 1
