import hashlib
import json
import os
import struct
from pathlib import Path

import pytest
import torch

from lpn.errors import ChecksumMismatch, CheckpointMismatch, CorruptCheckpoint, UnsupportedVersion
from lpn.model import LPN
from lpn.nncore import ArchConfig, OptimConfig, make_optimizer, optimizer_step
from lpn.persistence import (
    MAGIC,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
    serialize_checkpoint,
    write_manifest,
)

from conftest import SMALL

GOLDEN = Path(__file__).parent / "fixtures" / "golden_v1.ckpt"
GOLDEN_ARCH = ArchConfig(1, 1, 4, 1.0, 1, 1, 4, 1.0, latent_dim=2, max_rows=2, max_cols=2)


def golden_model() -> LPN:
    """Tiny model whose weights come from a closed-form formula, independent of any RNG."""
    m = LPN(GOLDEN_ARCH, seed=0)
    with torch.no_grad():
        for k, (_, p) in enumerate(sorted(m.named_parameters())):
            n = p.numel()
            vals = (torch.arange(n, dtype=torch.float64) * 0.25 + k) % 7 - 3
            p.copy_((vals / 8).reshape(p.shape))
    return m


def _same(a: LPN, b: LPN):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for k in sa:
        assert torch.equal(sa[k], sb[k]), k


def test_round_trip_is_bitwise(tmp_path, small_model):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model, meta={"step": 12})
    model, optim, meta = load_checkpoint(path, expect_arch=SMALL)
    _same(model, small_model)
    assert meta == {"step": 12} and optim is None
    assert serialize_checkpoint(model, meta=meta) == path.read_bytes()


def test_golden_file_bytes():
    blob = serialize_checkpoint(golden_model(), meta={"step": 3})
    if os.environ.get("LPN_REGENERATE_GOLDEN"):
        GOLDEN.write_bytes(blob)
    assert blob == GOLDEN.read_bytes()


def test_golden_file_layout():
    blob = GOLDEN.read_bytes()
    assert blob[:8] == MAGIC == b"LPNCKPT\x00"
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    assert version == 1
    header_bytes = blob[20 : 20 + hlen]
    header = json.loads(header_bytes)
    assert json.dumps(header, sort_keys=True, separators=(",", ":")).encode() == header_bytes
    data = blob[20 + hlen :]
    assert hashlib.sha256(data).hexdigest() == header["data_sha256"]
    offset = 0
    for e in header["tensors"]:
        assert e["dtype"] == "<f4" and e["offset"] == offset
        n = 1
        for s in e["shape"]:
            n *= s
        assert e["nbytes"] == 4 * n
        assert hashlib.sha256(data[offset : offset + e["nbytes"]]).hexdigest() == e["sha256"]
        offset += e["nbytes"]
    assert offset == len(data)
    assert header["arch"] == GOLDEN_ARCH.to_dict()
    assert header["num_parameters"] == golden_model().num_parameters()
    model, _, meta = load_checkpoint(GOLDEN)
    _same(model, golden_model())
    assert meta == {"step": 3}


def test_future_version_is_rejected(tmp_path, small_model):
    blob = bytearray(serialize_checkpoint(small_model))
    struct.pack_into("<I", blob, 8, 2)
    (tmp_path / "v2.ckpt").write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVersion):
        read_checkpoint(tmp_path / "v2.ckpt")


def test_flipped_byte_is_detected(tmp_path, small_model):
    blob = bytearray(serialize_checkpoint(small_model))
    blob[-10] ^= 0x01
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    with pytest.raises(ChecksumMismatch):
        read_checkpoint(tmp_path / "bad.ckpt")


@pytest.mark.parametrize("cut", [4, 30, -8])
def test_truncation_is_detected(tmp_path, small_model, cut):
    blob = serialize_checkpoint(small_model)
    (tmp_path / "t.ckpt").write_bytes(blob[:cut])
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(tmp_path / "t.ckpt")


def test_wrong_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"PK\x03\x04" + b"\x00" * 40)
    with pytest.raises(CorruptCheckpoint):
        read_checkpoint(tmp_path / "x.ckpt")


def test_architecture_mismatch(tmp_path, small_model):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, expect_arch=GOLDEN_ARCH)


def test_encoder_only_subset(tmp_path, small_model):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model)
    ck = read_checkpoint(path, select=["encoder."])
    assert ck.tensors and all(k.startswith("encoder.") for k in ck.tensors)
    fresh = LPN(SMALL, seed=99)
    fresh.encoder.load_state_dict({k[len("encoder."):]: v for k, v in ck.tensors.items()})
    for k, v in fresh.encoder.state_dict().items():
        assert torch.equal(v, small_model.encoder.state_dict()[k])


def test_atomic_write_leaves_no_temporary_files(tmp_path, small_model):
    save_checkpoint(tmp_path / "m.ckpt", small_model)
    save_checkpoint(tmp_path / "m.ckpt", small_model)
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_failed_write_keeps_previous_file(tmp_path, small_model, monkeypatch):
    path = save_checkpoint(tmp_path / "m.ckpt", small_model)
    before = path.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr("os.fsync", boom)
    with pytest.raises(OSError):
        save_checkpoint(path, LPN(SMALL, seed=5))
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_optimizer_state_restores_identical_continuation(tmp_path):
    def step(model, opt):
        opt.zero_grad()
        sum((p * p).sum() for p in model.parameters()).backward()
        optimizer_step(model.parameters(), opt, 1.0)

    a = LPN(SMALL, seed=0)
    opt_a = make_optimizer(a.parameters(), OptimConfig())
    step(a, opt_a)
    path = save_checkpoint(tmp_path / "m.ckpt", a, opt_a)
    assert read_checkpoint(path).header["optim"]["step"] == 1
    b, opt_b, _ = load_checkpoint(path, optim_config=OptimConfig())
    assert load_checkpoint(path)[1] is None
    for _ in range(2):
        step(a, opt_a)
        step(b, opt_b)
    _same(a, b)


def test_manifest_records_environment(tmp_path):
    m = write_manifest(tmp_path / "manifest.json", {"k": 1}, {"extra": True})
    on_disk = json.loads((tmp_path / "manifest.json").read_text())
    assert on_disk == m
    assert {"config", "torch", "numpy", "python", "package_version"} <= set(on_disk)
