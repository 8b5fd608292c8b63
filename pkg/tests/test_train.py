import math

import numpy as np
import pytest

from droppos import checkpoint as ckio
from droppos.data import synthetic_dataset
from droppos.errors import ContractError, FormatError, TrainingDiverged
from droppos.task import DropPosModel, TaskConfig
from droppos.train import (Checkpoint, OptimizerState, TrainConfig, adamw_step, decays,
                           load_checkpoint, lr_at, model_from_checkpoint, pretrain,
                           save_checkpoint)
from droppos.vit import ViTConfig

TINY = ViTConfig(image_size=8, patch_size=2, embed_dim=16, depth=1, heads=2,
                 decoder_dim=8, decoder_depth=1, decoder_heads=2)


def _cfg(**kw):
    base = dict(batch_size=8, epochs=2, seed=3, task=TaskConfig(gamma=0.5, gamma_pos=0.75))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(20, size=8, seed=0, labels=False)


def test_adamw_single_step_closed_form():
    p = {"w": np.array([1.0])}
    state = OptimizerState.zeros_like(p, beta1=0.9, beta2=0.95, eps=1e-8, weight_decay=0.0)
    adamw_step(p, {"w": np.array([1.0])}, state, lr=0.1)
    # bias-corrected m and v are both 1, so the step is lr / (1 + eps)
    assert p["w"][0] == pytest.approx(0.9, abs=1e-7)
    assert state.step == 1


def test_adamw_zero_grad_no_decay_is_identity():
    p = {"w": np.array([0.3, -2.0])}
    state = OptimizerState.zeros_like(p, weight_decay=0.0)
    adamw_step(p, {"w": np.zeros(2)}, state, lr=0.5)
    np.testing.assert_array_equal(p["w"], [0.3, -2.0])


def test_adamw_decoupled_decay():
    p = {"w": np.array([2.0, -4.0]), "encoder.norm.weight": np.array([2.0])}
    state = OptimizerState.zeros_like(p, weight_decay=0.1)
    adamw_step(p, {"w": np.zeros(2), "encoder.norm.weight": np.zeros(1)}, state, lr=0.5)
    np.testing.assert_allclose(p["w"], [2.0 - 0.05 * 2.0, -4.0 + 0.05 * 4.0], rtol=1e-15)
    np.testing.assert_array_equal(p["encoder.norm.weight"], [2.0])


def test_adamw_shape_mismatch():
    p = {"w": np.zeros(3)}
    with pytest.raises(ContractError):
        adamw_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), lr=0.1)


def test_decay_groups():
    assert not decays("encoder.blocks.0.norm1.weight")
    assert not decays("encoder.cls_token")
    assert not decays("p_mask")
    assert decays("encoder.blocks.0.attn.qkv.weight")


def test_lr_schedule():
    assert lr_at(0, 100, 10, 1e-3) == 0.0
    assert lr_at(10, 100, 10, 1e-3) == 1e-3
    assert lr_at(5, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at(55, 100, 10, 1e-3) == pytest.approx(5e-4)
    assert lr_at(100, 100, 10, 1e-3) == 0.0
    assert lr_at(10, 100, 10, 4e-3, batch_size=64) == pytest.approx(1e-3)
    assert lr_at(10, 100, 10, 1.5e-4, batch_size=256) == 1.5e-4
    assert lr_at(0, 10, 0, 1e-3) == 1e-3


def test_checkpoint_binary_round_trip(tmp_path):
    arrays = {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5, -np.inf, np.nan]),
        "scalar": np.array(7, dtype=np.int64),
        "bytes": np.frombuffer(b"hello", dtype=np.uint8),
        "i4": np.array([[-1], [2]], dtype=np.int32),
    }
    path = tmp_path / "x.dpos"
    ckio.save_arrays(path, arrays)
    raw = path.read_bytes()
    assert raw[:4] == b"DPOS"
    back = ckio.load_arrays(path)
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert ckio.encode_arrays(back) == raw


@pytest.mark.parametrize("damage", ["magic", "version", "truncate"])
def test_checkpoint_corruption(tmp_path, damage):
    path = tmp_path / "x.dpos"
    ckio.save_arrays(path, {"a": np.ones(8)})
    raw = bytearray(path.read_bytes())
    if damage == "magic":
        raw[:4] = b"NOPE"
    elif damage == "version":
        raw[4:8] = (99).to_bytes(4, "little")
    else:
        raw = raw[:-5]
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        ckio.load_arrays(path)


def test_full_checkpoint_round_trip(tmp_path):
    model = DropPosModel(TINY, seed=1)
    state = OptimizerState.zeros_like(model.params)
    state.step = 5
    ck = Checkpoint(model.state_dict(), state, 5, {"model": TINY.__dict__.copy(), "train": {}})
    save_checkpoint(tmp_path / "c.dpos", ck)
    back = load_checkpoint(tmp_path / "c.dpos")
    assert back.step == 5 and back.optimizer.step == 5
    restored = model_from_checkpoint(back)
    for k, t in model.params.items():
        assert restored.params[k].data.tobytes() == t.data.tobytes()
    with pytest.raises(FormatError):
        Checkpoint.from_arrays({"param/x": np.zeros(1)})


def test_zero_epochs_keeps_initialization(tmp_path, tiny_data):
    res = pretrain(_cfg(epochs=0), TINY, tiny_data, out_dir=tmp_path)
    init = DropPosModel(TINY, seed=3)
    ck = load_checkpoint(tmp_path / "checkpoint.dpos")
    for k, t in init.params.items():
        assert ck.params[k].tobytes() == t.data.tobytes()
    assert res.metrics == []


def test_pretrain_writes_metrics_and_reduces_loss(tmp_path, tiny_data):
    res = pretrain(_cfg(epochs=3, base_lr=4e-2), TINY, tiny_data, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,loss,acc,lr,sigma"
    assert len(lines) == 1 + 3 * 3
    assert float(res.metrics[0]["sigma"]) == 1.0
    assert float(res.metrics[0]["lr"]) == 0.0
    assert all(math.isfinite(float(r["loss"])) for r in res.metrics)
    assert load_checkpoint(tmp_path / "checkpoint.dpos").step == 9


def test_pretrain_is_deterministic(tmp_path, tiny_data):
    pretrain(_cfg(), TINY, tiny_data, out_dir=tmp_path / "a")
    pretrain(_cfg(), TINY, tiny_data, out_dir=tmp_path / "b")
    for name in ("metrics.csv", "checkpoint.dpos"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_matches_uninterrupted(tmp_path, tiny_data):
    pretrain(_cfg(), TINY, tiny_data, out_dir=tmp_path / "full")
    part = tmp_path / "part"
    pretrain(_cfg(), TINY, tiny_data, out_dir=part, stop_after=4)   # stops mid-epoch
    assert load_checkpoint(part / "checkpoint.dpos").step == 4
    pretrain(_cfg(), TINY, tiny_data, out_dir=part, resume=part / "checkpoint.dpos")
    for name in ("metrics.csv", "checkpoint.dpos"):
        assert (part / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_nan_loss_aborts_and_keeps_last_good(tmp_path, tiny_data):
    bad = tiny_data.subset(range(len(tiny_data)))
    bad.images = bad.images.copy()
    bad.images[:] = np.nan
    with pytest.raises(TrainingDiverged):
        pretrain(_cfg(), TINY, bad, out_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "checkpoint.dpos")
    assert ck.step == 0
    assert all(np.isfinite(a).all() for a in ck.params.values())
