"""Checkpoint container, run manifests and artifact writes.

Checkpoint layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"LPNCKPT\\0"
    offset 8   uint32    format version (currently 1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    offset 20+H          tensor data, concatenated, float32 little-endian, C order

The header holds ``arch`` (ArchConfig fields), ``meta`` (step, seed, ...),
``optim`` (optimizer step count and settings, or null) and ``tensors``: a list
of ``{name, shape, dtype, offset, nbytes, sha256}`` with offsets relative to the
start of the data section. ``data_sha256`` covers the whole data section.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .errors import ChecksumMismatch, CheckpointMismatch, CorruptCheckpoint, UnsupportedVersion
from .model import LPN
from .nncore import ArchConfig, make_optimizer

MAGIC = b"LPNCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
OPTIM_PREFIX = "optim/"


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).contiguous().numpy()
    return arr.astype("<f4", copy=False).tobytes()


def optimizer_tensors(model: LPN, optimizer: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Name-keyed AdamW moments plus a small JSON-able summary."""
    names = {id(p): n for n, p in model.named_parameters()}
    tensors, step = {}, 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p)
            if not state:
                continue
            name = names[id(p)]
            tensors[f"{OPTIM_PREFIX}exp_avg/{name}"] = state["exp_avg"]
            tensors[f"{OPTIM_PREFIX}exp_avg_sq/{name}"] = state["exp_avg_sq"]
            step = int(state["step"])
    g = optimizer.param_groups[0]
    info = {
        "step": step,
        "lr": g["lr"],
        "betas": list(g["betas"]),
        "eps": g["eps"],
        "weight_decay": g["weight_decay"],
    }
    return tensors, info


def restore_optimizer(model: LPN, optimizer: torch.optim.Optimizer, tensors: dict, info: dict):
    params = dict(model.named_parameters())
    for name, p in params.items():
        key = f"{OPTIM_PREFIX}exp_avg/{name}"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(info["step"])),
            "exp_avg": tensors[key].clone(),
            "exp_avg_sq": tensors[f"{OPTIM_PREFIX}exp_avg_sq/{name}"].clone(),
        }


def serialize_checkpoint(model: LPN, optimizer=None, meta: Optional[dict] = None) -> bytes:
    tensors = dict(model.state_dict())
    optim_info = None
    if optimizer is not None:
        opt_t, optim_info = optimizer_tensors(model, optimizer)
        tensors.update(opt_t)
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        raw = _tensor_bytes(t)
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "<f4",
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    data = b"".join(chunks)
    header = {
        "format": "lpn-checkpoint",
        "format_version": FORMAT_VERSION,
        "arch": model.cfg.to_dict(),
        "init_seed": model.seed,
        "meta": meta or {},
        "optim": optim_info,
        "tensors": entries,
        "num_parameters": model.num_parameters(),
        "data_sha256": hashlib.sha256(data).hexdigest(),
    }
    hbytes = canonical_json(header).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + data


def save_checkpoint(path, model: LPN, optimizer=None, meta: Optional[dict] = None) -> Path:
    blob = serialize_checkpoint(model, optimizer, meta)
    try:
        atomic_write_bytes(path, blob)
    except OSError as e:
        raise OSError(f"writing checkpoint {path}: {e}") from e
    return Path(path)


@dataclass
class CheckpointContents:
    header: dict
    tensors: dict

    @property
    def arch(self) -> ArchConfig:
        return ArchConfig.from_dict(self.header["arch"])

    @property
    def meta(self) -> dict:
        return self.header.get("meta", {})


def read_checkpoint(path, select: Optional[Iterable[str]] = None, verify: bool = True) -> CheckpointContents:
    """Parse a checkpoint. ``select`` keeps only tensors whose name starts with one of the prefixes."""
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"reading checkpoint {path}: {e}") from e
    if len(blob) < _PREFIX.size:
        raise CorruptCheckpoint(f"{path}: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CorruptCheckpoint(f"{path}: not an LPN checkpoint")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(blob) < start + hlen:
        raise CorruptCheckpoint(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: bad header ({e})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: header version {header.get('format_version')}")
    data = blob[start + hlen :]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(data) != expected:
        raise CorruptCheckpoint(f"{path}: data section is {len(data)} bytes, header says {expected}")
    if verify and hashlib.sha256(data).hexdigest() != header["data_sha256"]:
        raise ChecksumMismatch(f"{path}: data checksum mismatch")
    prefixes = tuple(select) if select is not None else None
    tensors = {}
    for e in header["tensors"]:
        if prefixes is not None and not e["name"].startswith(prefixes):
            continue
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        if verify and hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise ChecksumMismatch(f"{path}: tensor {e['name']} checksum mismatch")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return CheckpointContents(header, tensors)


def load_checkpoint(path, expect_arch: Optional[ArchConfig] = None, optim_config=None):
    """Rebuild the model. Returns ``(model, optimizer, meta)``.

    With ``optim_config`` an AdamW over the rebuilt model is created and its
    moments restored from the checkpoint (if it holds any); otherwise the
    optimizer slot is None.
    """
    ck = read_checkpoint(path)
    arch = ck.arch
    if expect_arch is not None and expect_arch != arch:
        raise CheckpointMismatch(f"{path}: checkpoint arch {arch} != expected {expect_arch}")
    model = LPN(arch, seed=ck.header.get("init_seed", 0))
    state = {k: v for k, v in ck.tensors.items() if not k.startswith(OPTIM_PREFIX)}
    expected = set(model.state_dict())
    if set(state) != expected:
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        raise CheckpointMismatch(f"{path}: tensor names differ (missing {missing[:3]}, extra {extra[:3]})")
    for name, t in model.state_dict().items():
        if tuple(t.shape) != tuple(state[name].shape):
            raise CheckpointMismatch(f"{path}: tensor {name} has shape {tuple(state[name].shape)}")
    model.load_state_dict(state)
    optimizer = None
    if optim_config is not None:
        optimizer = make_optimizer(model.parameters(), optim_config)
        if ck.header.get("optim"):
            restore_optimizer(model, optimizer, ck.tensors, ck.header["optim"])
    return model, optimizer, ck.meta


def write_manifest(path, config: dict, extra: Optional[dict] = None):
    import platform
    import subprocess
    import sys

    from . import __version__

    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, cwd=Path(__file__).parent, timeout=5
        ).stdout.strip()
    except Exception:
        rev = ""
    manifest = {
        "config": config,
        "package_version": __version__,
        "git_revision": rev or None,
        "python": sys.version.split()[0],
        "torch": torch.__version__,
        "numpy": np.__version__,
        "platform": platform.platform(),
    }
    if extra:
        manifest.update(extra)
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def append_jsonl(path, record: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")
        f.flush()
