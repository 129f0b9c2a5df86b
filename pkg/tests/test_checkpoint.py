import struct

import numpy as np
import pytest
import torch

from aeris.checkpoint import MAGIC, load_model, read_checkpoint, save_checkpoint
from aeris.model import ModelConfig, build_model
from aeris.training import TrainConfig, make_optimizer

CFG = ModelConfig(backbone_channels=(8, 8, 16, 16, 32), blocks_per_stage=1, up_channels=(16, 16, 16), head_channels=16)


def test_layout(tmp_path):
    m = build_model(CFG, seed=0)
    p = save_checkpoint(tmp_path / "a.ckpt", m, TrainConfig(), meta={"epoch": 3})
    raw = p.read_bytes()
    assert raw[:8] == MAGIC
    version, n = struct.unpack("<IQ", raw[8:20])
    assert version == 1
    header, arrays = read_checkpoint(p)
    assert header["meta"] == {"epoch": 3} and header["train_config"]["lam"] == 0.4
    total = sum(e["count"] for e in header["tensors"])
    assert len(raw) == 20 + n + 4 * total
    assert set(arrays) == set(m.state_dict())


def test_model_roundtrip(tmp_path):
    m = build_model(CFG, seed=1)
    save_checkpoint(tmp_path / "m.ckpt", m)
    back, header = load_model(tmp_path / "m.ckpt")
    assert back.cfg == CFG
    for (k, a), (_, b) in zip(m.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b) and a.dtype == b.dtype, k


@pytest.mark.parametrize("optimizer,keys", [("sgd", ["momentum_buffer"]), ("adamw", ["exp_avg", "exp_avg_sq", "step"])])
def test_optimizer_buffers(tmp_path, optimizer, keys):
    m = build_model(CFG, seed=0)
    opt = make_optimizer(m, TrainConfig(optimizer=optimizer))
    m.forward_infer(torch.rand(2, 3, 64, 64)).heatmap.sum().backward()
    opt.step()
    _, arrays = read_checkpoint(save_checkpoint(tmp_path / "o.ckpt", m, optimizer=opt))
    for key in keys:
        np.testing.assert_array_equal(arrays[f"optim/hm_head.2.weight/{key}"],
                                      opt.state[m.hm_head[2].weight][key].numpy())


def test_rejects_foreign_file(tmp_path):
    f = tmp_path / "x.ckpt"
    f.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        read_checkpoint(f)


def test_no_temp_file_left(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", build_model(CFG))
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]
