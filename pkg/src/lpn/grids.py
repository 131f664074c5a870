"""Colored grids, their padded sequence layout, and ARC-format JSON I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptySpecification, InvalidShape, ParseError, ValidationError

MAX_SIDE = 30
NUM_COLORS = 10
PAD_VALUE = 0


@dataclass(frozen=True, eq=False)
class Grid:
    """An immutable rows x cols grid of color indices in 0..9."""

    cells: np.ndarray

    def __post_init__(self):
        arr = np.array(self.cells, dtype=np.int64, copy=True)
        if arr.ndim != 2:
            raise ValidationError(f"grid must be 2-D, got shape {arr.shape}")
        rows, cols = arr.shape
        if not (1 <= rows <= MAX_SIDE and 1 <= cols <= MAX_SIDE):
            raise InvalidShape(f"grid dims {rows}x{cols} outside 1..{MAX_SIDE}")
        if arr.min() < 0 or arr.max() >= NUM_COLORS:
            raise ValidationError("cell values must lie in 0..9")
        arr = arr.astype(np.uint8)
        arr.flags.writeable = False
        object.__setattr__(self, "cells", arr)

    @classmethod
    def from_list(cls, rows: Sequence[Sequence[int]]) -> "Grid":
        if not isinstance(rows, (list, tuple)) or len(rows) == 0:
            raise ValidationError("grid must be a non-empty list of rows")
        width = None
        for r in rows:
            if not isinstance(r, (list, tuple)):
                raise ValidationError("grid rows must be lists")
            if width is None:
                width = len(r)
            elif len(r) != width:
                raise ValidationError("ragged rows")
            for v in r:
                if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                    raise ValidationError(f"cell value {v!r} is not an integer")
        return cls(np.asarray(rows, dtype=np.int64))

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    def to_list(self) -> list[list[int]]:
        return self.cells.astype(int).tolist()

    def key(self) -> bytes:
        """Canonical byte key, used for content ordering and hashing."""
        return bytes([self.rows, self.cols]) + self.cells.tobytes()

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.cells, other.cells))

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"Grid({self.rows}x{self.cols}, {self.to_list()})"


@dataclass(frozen=True, eq=False)
class GridSequence:
    """Padded raster-scan layout: 2 shape tokens followed by max_rows*max_cols pixels.

    Row stride is always ``max_cols``; padded slots hold ``PAD_VALUE`` and are
    false in ``pad_mask``.
    """

    shape_tokens: np.ndarray
    pixel_tokens: np.ndarray
    pad_mask: np.ndarray
    max_rows: int = MAX_SIDE
    max_cols: int = MAX_SIDE

    def __len__(self):
        return 2 + self.pixel_tokens.size


def _check_layout(max_rows: int, max_cols: int):
    if not (1 <= max_rows <= MAX_SIDE and 1 <= max_cols <= MAX_SIDE):
        raise ValidationError(f"layout {max_rows}x{max_cols} outside 1..{MAX_SIDE}")


def encode_sequence(g: Grid, max_rows: int = MAX_SIDE, max_cols: int = MAX_SIDE) -> GridSequence:
    _check_layout(max_rows, max_cols)
    if g.rows > max_rows or g.cols > max_cols:
        raise InvalidShape(f"grid {g.rows}x{g.cols} exceeds layout {max_rows}x{max_cols}")
    pixels = np.full((max_rows, max_cols), PAD_VALUE, dtype=np.int64)
    pixels[: g.rows, : g.cols] = g.cells
    mask = np.zeros((max_rows, max_cols), dtype=bool)
    mask[: g.rows, : g.cols] = True
    return GridSequence(
        shape_tokens=np.array([g.rows, g.cols], dtype=np.int64),
        pixel_tokens=pixels.reshape(-1),
        pad_mask=mask.reshape(-1),
        max_rows=max_rows,
        max_cols=max_cols,
    )


def decode_sequence(s: GridSequence) -> Grid:
    rows, cols = (int(v) for v in s.shape_tokens)
    if not (1 <= rows <= s.max_rows and 1 <= cols <= s.max_cols):
        raise InvalidShape(f"shape tokens ({rows}, {cols}) outside 1..{s.max_rows}/1..{s.max_cols}")
    pixels = np.asarray(s.pixel_tokens).reshape(s.max_rows, s.max_cols)
    return Grid(pixels[:rows, :cols])


def grids_to_arrays(grids: Iterable[Grid], max_rows: int = MAX_SIDE, max_cols: int = MAX_SIDE):
    """Stack grids into ``(shapes[N, 2], pixels[N, max_rows*max_cols])`` int64 arrays."""
    _check_layout(max_rows, max_cols)
    grids = list(grids)
    shapes = np.zeros((len(grids), 2), dtype=np.int64)
    pixels = np.full((len(grids), max_rows, max_cols), PAD_VALUE, dtype=np.int64)
    for k, g in enumerate(grids):
        if g.rows > max_rows or g.cols > max_cols:
            raise InvalidShape(f"grid {g.rows}x{g.cols} exceeds layout {max_rows}x{max_cols}")
        shapes[k] = g.shape
        pixels[k, : g.rows, : g.cols] = g.cells
    return shapes, pixels.reshape(len(grids), -1)


def arrays_to_grid(shape, pixels, max_cols: int) -> Grid:
    rows, cols = int(shape[0]), int(shape[1])
    pix = np.asarray(pixels).reshape(-1, max_cols)
    return Grid(pix[:rows, :cols])


@dataclass(frozen=True)
class TaskInstance:
    """Specification pairs sharing one program, plus optional query pairs."""

    pairs: tuple
    query: tuple = ()
    task_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple((x, y) for x, y in self.pairs))
        object.__setattr__(self, "query", tuple((x, y) for x, y in self.query))
        if len(self.pairs) < 1:
            raise ValidationError(f"task {self.task_id!r} has no specification pairs")

    @property
    def n(self) -> int:
        return len(self.pairs)

    def with_query_outputs(self, outputs: Sequence[Grid]) -> "TaskInstance":
        if len(outputs) != len(self.query):
            raise ValidationError(
                f"task {self.task_id!r}: {len(outputs)} solutions for {len(self.query)} queries"
            )
        q = tuple((x, y) for (x, _), y in zip(self.query, outputs))
        return TaskInstance(self.pairs, q, self.task_id)

    def __eq__(self, other):
        if not isinstance(other, TaskInstance):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.pairs == other.pairs
            and self.query == other.query
        )


def _grid_from_json(obj, where: str) -> Grid:
    try:
        return Grid.from_list(obj)
    except ValidationError as e:
        raise ValidationError(f"{where}: {e}") from None


def _parse_document(data) -> dict:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    if hasattr(data, "read"):
        data = data.read()
        if isinstance(data, bytes):
            data = data.decode("utf-8")
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ParseError(f"malformed JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object mapping task id to task")
    return doc


def load_arc_json(data, solutions=None) -> dict[str, TaskInstance]:
    """Parse an ARC challenges document (bytes, str or file object).

    ``solutions``, when given, is a companion document mapping task id to a
    list of output grids, one per test entry; they fill the query outputs.
    """
    doc = _parse_document(data)
    tasks = {}
    for task_id, body in doc.items():
        if not isinstance(body, dict) or "train" not in body:
            raise ParseError(f"task {task_id!r}: expected object with a 'train' list")
        train = body["train"]
        test = body.get("test", [])
        if not isinstance(train, list) or not isinstance(test, list):
            raise ParseError(f"task {task_id!r}: 'train' and 'test' must be lists")
        if not train:
            raise EmptySpecification(f"task {task_id!r} has no specification pairs")
        pairs = []
        for k, p in enumerate(train):
            if not isinstance(p, dict) or "input" not in p or "output" not in p:
                raise ParseError(f"task {task_id!r} train[{k}]: needs input and output")
            where = f"task {task_id!r} train[{k}]"
            pairs.append((_grid_from_json(p["input"], where), _grid_from_json(p["output"], where)))
        query = []
        for k, p in enumerate(test):
            if not isinstance(p, dict) or "input" not in p:
                raise ParseError(f"task {task_id!r} test[{k}]: needs input")
            where = f"task {task_id!r} test[{k}]"
            out = p.get("output")
            query.append(
                (_grid_from_json(p["input"], where), None if out is None else _grid_from_json(out, where))
            )
        tasks[task_id] = TaskInstance(tuple(pairs), tuple(query), task_id)
    if solutions is not None:
        tasks = merge_solutions(tasks, solutions)
    return tasks


def merge_solutions(tasks: Mapping[str, TaskInstance], solutions) -> dict[str, TaskInstance]:
    sol = _parse_document(solutions) if not isinstance(solutions, dict) else solutions
    merged = dict(tasks)
    for task_id, grids in sol.items():
        if task_id not in merged:
            raise ValidationError(f"solution for unknown task {task_id!r}")
        if not isinstance(grids, list):
            raise ParseError(f"solutions for {task_id!r} must be a list of grids")
        outs = [_grid_from_json(g, f"solution {task_id!r}[{k}]") for k, g in enumerate(grids)]
        merged[task_id] = merged[task_id].with_query_outputs(outs)
    return merged


def task_to_json(task: TaskInstance) -> dict:
    train = [{"input": x.to_list(), "output": y.to_list()} for x, y in task.pairs]
    test = []
    for x, y in task.query:
        entry = {"input": x.to_list()}
        if y is not None:
            entry["output"] = y.to_list()
        test.append(entry)
    return {"train": train, "test": test}


def dump_arc_json(tasks: Mapping[str, TaskInstance] | Iterable[TaskInstance]) -> str:
    """Serialize tasks to the ARC challenges schema (deterministic bytes for equal input)."""
    if not isinstance(tasks, Mapping):
        tasks = {t.task_id: t for t in tasks}
    doc = {tid: task_to_json(t) for tid, t in tasks.items()}
    return json.dumps(doc, separators=(",", ":"))


def dump_solutions(predictions: Mapping[str, Sequence[Grid]]) -> str:
    return json.dumps(
        {tid: [g.to_list() for g in grids] for tid, grids in predictions.items()},
        separators=(",", ":"),
    )
