"""Checkpoint file format and parent-hash lineage."""
import numpy as np
import pytest
import torch

from dialbench.checkpoints import (
    MAGIC,
    file_sha256,
    load_checkpoint,
    read_header,
    save_checkpoint,
    verify_lineage,
)
from dialbench.dmmn import DmmnConfig, DmmnModel

TINY = DmmnConfig(patch_size=16, base_channels=2, depth=2, rng_seed=7)


def test_round_trip_exact(tmp_path):
    model = DmmnModel(TINY)
    path = tmp_path / "m.ckpt"
    digest = save_checkpoint(path, model, meta={"round": 3, "note": "x"})
    assert digest == file_sha256(path)

    loaded, header = load_checkpoint(path)
    assert DmmnConfig(**header["config"]) == TINY
    assert header["parent_hash"] is None
    assert header["meta"] == {"round": 3, "note": "x"}

    orig = model.state_dict()
    got = loaded.state_dict()
    assert list(orig) == list(got)
    for name in orig:
        assert torch.equal(orig[name], got[name]), name


def test_loaded_model_predicts_identically(tmp_path):
    model = DmmnModel(TINY)
    model.eval()
    save_checkpoint(tmp_path / "m.ckpt", model)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    loaded.eval()
    g = torch.Generator().manual_seed(0)
    xs = [torch.rand(2, 3, 16, 16, generator=g) for _ in range(3)]
    with torch.no_grad():
        a = model(*xs)
        b = loaded(*xs)
    assert torch.equal(a, b)


def test_header_tensor_listing_matches_state(tmp_path):
    model = DmmnModel(TINY)
    save_checkpoint(tmp_path / "m.ckpt", model)
    header = read_header(tmp_path / "m.ckpt")
    state = model.state_dict()
    assert [e["name"] for e in header["tensors"]] == list(state)
    for entry in header["tensors"]:
        assert tuple(entry["shape"]) == tuple(state[entry["name"]].shape)


def test_lineage_chain_verifies(tmp_path):
    paths = []
    parent = None
    for i in range(3):
        model = DmmnModel(DmmnConfig(patch_size=16, base_channels=2, depth=2, rng_seed=i))
        p = tmp_path / f"gen{i}.ckpt"
        parent = save_checkpoint(p, model, parent_hash=parent, meta={"round": i})
        paths.append(p)
    verify_lineage(paths)


def test_lineage_detects_tampering(tmp_path):
    paths = []
    parent = None
    for i in range(3):
        model = DmmnModel(DmmnConfig(patch_size=16, base_channels=2, depth=2, rng_seed=i))
        p = tmp_path / f"gen{i}.ckpt"
        parent = save_checkpoint(p, model, parent_hash=parent)
        paths.append(p)
    # Flip one byte of tensor data in the middle checkpoint: its file hash no
    # longer matches what the third checkpoint recorded.
    raw = bytearray(paths[1].read_bytes())
    raw[-1] ^= 0xFF
    paths[1].write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="lineage break"):
        verify_lineage(paths)


def test_lineage_detects_wrong_recorded_parent(tmp_path):
    a = tmp_path / "a.ckpt"
    b = tmp_path / "b.ckpt"
    save_checkpoint(a, DmmnModel(TINY))
    save_checkpoint(b, DmmnModel(TINY), parent_hash="0" * 64)
    with pytest.raises(ValueError, match="lineage break"):
        verify_lineage([a, b])


def test_rejects_foreign_file(tmp_path):
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"PNG\x00" + b"\x01" * 64)
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_header(junk)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(junk)


def test_rejects_trailing_bytes(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, DmmnModel(TINY))
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(ValueError, match="trailing bytes"):
        load_checkpoint(p)


def test_file_layout_is_exactly_header_plus_float32(tmp_path):
    model = DmmnModel(TINY)
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, model)
    raw = p.read_bytes()
    assert raw.startswith(MAGIC)
    hlen = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 4], "little")
    n_params = sum(t.numel() for t in model.state_dict().values())
    assert len(raw) == len(MAGIC) + 4 + hlen + 4 * n_params
    # Tensor payload of the first tensor is its raw little-endian float32.
    first = next(iter(model.state_dict().values()))
    off = len(MAGIC) + 4 + hlen
    got = np.frombuffer(raw, dtype="<f4", count=first.numel(), offset=off)
    assert np.array_equal(got.reshape(first.shape), first.numpy())
