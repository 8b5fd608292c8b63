import math
import time

import numpy as np
import pytest

from droppos import task as tk
from droppos.errors import ConfigError, ContractError
from droppos.rng import keyed_rng
from droppos.tensor import Tensor, backward
from droppos.vit import ViTConfig, build_sincos_pe

from oracles import assembled_pe_reference, smoothing_reference


@pytest.mark.parametrize("n,ratio,k", [(196, 0.75, 49), (64, 0.0, 64), (49, 0.75, 12),
                                       (49, 1.0, 0), (49, 0.0, 49), (64, 0.5, 32), (5, 0.9, 1)])
def test_keep_count(n, ratio, k):
    assert tk.keep_count(n, ratio) == k


def test_patch_mask_examples():
    m = tk.sample_patch_mask(196, 0.75, keyed_rng(0))
    assert m.bits.sum() == 49 and len(m.keep_ids) == 49
    assert np.all(np.diff(m.keep_ids) > 0)
    np.testing.assert_array_equal(np.flatnonzero(m.bits), m.keep_ids)
    assert tk.sample_patch_mask(64, 0.0, keyed_rng(0)).bits.sum() == 64
    a = tk.sample_patch_mask(196, 0.75, keyed_rng(5)).keep_ids
    b = tk.sample_patch_mask(196, 0.75, keyed_rng(5)).keep_ids
    c = tk.sample_patch_mask(196, 0.75, keyed_rng(6)).keep_ids
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_patch_mask_rejects_empty_visible_set():
    with pytest.raises(ConfigError):
        tk.sample_patch_mask(4, 0.9, keyed_rng(0))
    with pytest.raises(ConfigError):
        tk.sample_patch_mask(4, 1.0, keyed_rng(0))


def test_position_mask_examples():
    assert tk.sample_position_mask(49, 0.75, keyed_rng(0)).n_keep == 12
    assert tk.sample_position_mask(49, 1.0, keyed_rng(0)).n_keep == 0
    assert tk.sample_position_mask(49, 0.0, keyed_rng(0)).n_keep == 49
    m = tk.sample_position_mask(10, 0.5, keyed_rng(1))
    np.testing.assert_array_equal(np.flatnonzero(m.bits), np.sort(m.ids_shuffle[:5]))
    with pytest.raises(ConfigError):
        tk.sample_position_mask(10, 1.5, keyed_rng(0))


def test_gather():
    np.testing.assert_array_equal(tk.gather([10, 11, 12, 13], [0, 2]), [10, 12])
    seq = np.arange(7) * 3
    np.testing.assert_array_equal(tk.gather(seq, np.arange(7)), seq)
    with pytest.raises(ContractError):
        tk.gather(seq, [0, 7])
    with pytest.raises(ContractError):
        tk.gather(seq, [3, 1])


def _pe(n=16, d=8):
    g = int(math.isqrt(n))
    return build_sincos_pe(g, g, d, np.float64)


def test_assembly_matches_rowwise_reference():
    pe = _pe()
    p_mask = Tensor(np.full(8, 7.0))
    rng = np.random.default_rng(0)
    for trial in range(200):
        gamma = rng.choice([0.0, 0.25, 0.5, 0.75])
        gamma_pos = rng.choice([0.0, 0.25, 0.5, 0.75, 1.0])
        pm = tk.sample_patch_mask(16, gamma, rng)
        qm = tk.sample_position_mask(len(pm.keep_ids), gamma_pos, rng)
        out = tk.assemble_pe(pe, pm, qm, p_mask).data
        ref = assembled_pe_reference(pe, pm.keep_ids, qm.bits, p_mask.data)
        np.testing.assert_array_equal(out, ref)


def test_assembly_degenerate_masks():
    pe = _pe()
    p_mask = Tensor(np.full(8, -3.0))
    pm = tk.sample_patch_mask(16, 0.5, keyed_rng(1))
    all_kept = tk.sample_position_mask(8, 0.0, keyed_rng(1))
    none_kept = tk.sample_position_mask(8, 1.0, keyed_rng(1))
    np.testing.assert_array_equal(tk.assemble_pe(pe, pm, all_kept, p_mask).data[1:], pe[1:][pm.keep_ids])
    dropped = tk.assemble_pe(pe, pm, none_kept, p_mask).data
    np.testing.assert_array_equal(dropped[1:], np.broadcast_to(p_mask.data, (8, 8)))
    np.testing.assert_array_equal(dropped[0], pe[0])


def test_assembly_length_checks():
    pe = _pe()
    pm = tk.sample_patch_mask(16, 0.5, keyed_rng(1))
    with pytest.raises(ContractError):
        tk.assemble_pe(pe, pm, tk.sample_position_mask(7, 0.5, keyed_rng(1)), Tensor(np.zeros(8)))
    with pytest.raises(ContractError):
        tk.assemble_pe(_pe(64), pm, tk.sample_position_mask(8, 0.5, keyed_rng(1)), Tensor(np.zeros(8)))


def test_p_mask_receives_gradient_only_from_dropped_rows():
    pe = _pe()
    p_mask = Tensor(np.zeros(8), requires_grad=True)
    pm = tk.sample_patch_mask(16, 0.5, keyed_rng(2))
    qm = tk.sample_position_mask(8, 0.75, keyed_rng(2))
    backward(tk.assemble_pe(pe, pm, qm, p_mask).sum())
    np.testing.assert_array_equal(p_mask.grad, np.full(8, 8 - qm.n_keep))


def test_batch_masks_targets_and_item():
    m = tk.sample_batch_masks(3, 64, 0.5, 0.75, seed=4, step=2)
    assert m.ids_vis.shape == (3, 32) and m.n_keep == 8
    assert np.all(m.anchors.sum(axis=1) == 8)
    pm, qm = m.item(1)
    assert pm.bits.sum() == 32
    np.testing.assert_array_equal(pm.keep_ids, m.targets[1])
    np.testing.assert_array_equal(qm.bits, m.anchors[1])


def test_decoder_depth_zero_and_shape():
    cfg = ViTConfig(image_size=8, patch_size=2, embed_dim=8, depth=1, heads=2,
                    decoder_dim=4, decoder_depth=0, decoder_heads=2)
    p = {k: Tensor(v) for k, v in tk.init_decoder(cfg, keyed_rng(0)).items()}
    enc = Tensor(np.random.default_rng(0).normal(size=(2, 6, 8)))
    out = tk.decoder_forward(enc, p, cfg).data
    assert out.shape == (2, 5, 16)
    h = enc.data[:, 1:] @ p["decoder.embed.weight"].data + p["decoder.embed.bias"].data
    ref = h @ p["decoder.head.weight"].data + p["decoder.head.bias"].data
    np.testing.assert_allclose(out, ref, atol=1e-12)


@pytest.mark.parametrize("sigma", [0.25, 0.5, 1.0, 2.0])
def test_smoothing_matches_loop_reference(sigma):
    w = tk.smoothing_matrix(5, 5, sigma).w_star
    np.testing.assert_allclose(w, smoothing_reference(5, sigma), atol=1e-12)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    # symmetric base kernel; each row peaks on its own cell
    base = np.exp(-tk.grid_distances(5, 5) / sigma ** 2)
    np.testing.assert_array_equal(base, base.T)
    assert np.all(w.argmax(axis=1) == np.arange(25))


def test_smoothing_sigma_zero_is_identity():
    np.testing.assert_array_equal(tk.smoothing_matrix(8, 8, 0.0).w_star, np.eye(64))
    with pytest.raises(ConfigError):
        tk.smoothing_matrix(2, 2, -1.0)


def test_sigma_schedule():
    s = tk.SigmaSchedule(1.0, 0.0, 100)
    assert tk.sigma_at(0, s) == 1.0
    assert tk.sigma_at(100, s) == 0.0
    assert tk.sigma_at(50, s) == 0.5
    assert tk.sigma_at(250, s) == 0.0


def test_smoothing_cache_rebuilds_past_tolerance():
    cache = tk.SmoothingCache(4, 4)
    a = cache.get(0.5)
    assert cache.get(0.5 + 5e-5) is a
    assert cache.get(0.5 + 5e-4) is not a
    assert cache.get(0.0).sigma == 0.0


def test_affinity_examples():
    f = np.random.default_rng(0).normal(size=(5, 6))
    same = np.tile(f[:1], (5, 1))
    np.testing.assert_allclose(tk.affinity(f[0], same, 0.1).A, 0.2)
    f_cls = np.array([1.0, 0.0])
    pair = np.array([[2.0, 0.0], [0.0, 3.0]])
    e = math.exp(-10)
    np.testing.assert_allclose(tk.affinity(f_cls, pair, 0.1).A, [1 / (1 + e), e / (1 + e)], rtol=1e-12)
    # zero-norm features are guarded
    out = tk.affinity(np.zeros(4), np.zeros((3, 4)), 0.1).A
    np.testing.assert_allclose(out, 1 / 3)


def test_affinity_sums_to_one_and_scale_invariant():
    rng = np.random.default_rng(1)
    f_cls, f = rng.normal(size=(4, 8)), rng.normal(size=(4, 10, 8))
    A = tk.affinity(f_cls, f, 0.1).A
    np.testing.assert_allclose(A.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(tk.affinity(3.0 * f_cls, 0.5 * f, 0.1).A, A, atol=1e-12)


def _loss_case(rng, b=3, n=16, n_vis=8):
    o = rng.normal(0, 2, (b, n_vis, n))
    y = np.stack([np.sort(rng.permutation(n)[:n_vis]) for _ in range(b)])
    m_pos = (rng.random((b, n_vis)) < 0.4).astype(np.int8)
    m_pos[:, 0] = 0
    return o, y, m_pos


def test_loss_sigma_zero_equals_plain_ce():
    rng = np.random.default_rng(0)
    eye = tk.smoothing_matrix(4, 4, 0.0)
    for _ in range(20):
        o, y, m_pos = _loss_case(rng, b=1)
        got = float(tk.droppos_loss(Tensor(o[0]), y[0], m_pos[0], eye).data)
        assert abs(got - tk.plain_position_ce(o[0], y[0], m_pos[0])) < 1e-6


def test_loss_uniform_logits_is_log_n():
    rng = np.random.default_rng(1)
    _, y, m_pos = _loss_case(rng)
    got = float(tk.droppos_loss(Tensor(np.zeros((3, 8, 16))), y, m_pos, np.eye(16)).data)
    assert abs(got - math.log(16)) < 1e-5
    # smoothed targets still sum to one per row, so uniform logits give ln N again
    w = tk.smoothing_matrix(4, 4, 1.0)
    got = float(tk.droppos_loss(Tensor(np.zeros((3, 8, 16))), y, m_pos, w).data)
    assert abs(got - math.log(16)) < 1e-5


def test_loss_constant_affinity_cancels():
    rng = np.random.default_rng(2)
    o, y, m_pos = _loss_case(rng)
    w = tk.smoothing_matrix(4, 4, 0.7)
    plain = float(tk.droppos_loss(Tensor(o), y, m_pos, w).data)
    const = float(tk.droppos_loss(Tensor(o), y, m_pos, w, np.full((3, 8), 0.125)).data)
    assert abs(plain - const) < 1e-6


def test_loss_ignores_anchor_rows():
    rng = np.random.default_rng(3)
    o, y, m_pos = _loss_case(rng)
    base = float(tk.droppos_loss(Tensor(o), y, m_pos, np.eye(16)).data)
    o2 = o.copy()
    o2[m_pos == 1] += rng.normal(0, 5, o2[m_pos == 1].shape)
    assert float(tk.droppos_loss(Tensor(o2), y, m_pos, np.eye(16)).data) == pytest.approx(base, abs=1e-12)


def test_loss_is_mean_of_per_image_losses():
    rng = np.random.default_rng(4)
    o, y, m_pos = _loss_case(rng)
    w = tk.smoothing_matrix(4, 4, 0.5)
    A = rng.dirichlet(np.ones(8), size=3)
    batch = float(tk.droppos_loss(Tensor(o), y, m_pos, w, A).data)
    each = [float(tk.droppos_loss(Tensor(o[i]), y[i], m_pos[i], w, A[i]).data) for i in range(3)]
    assert batch == pytest.approx(np.mean(each), abs=1e-12)


def test_loss_contract_errors():
    o = Tensor(np.zeros((4, 16)))
    y = np.arange(4)
    with pytest.raises(ContractError, match="resample"):
        tk.droppos_loss(o, y, np.ones(4, np.int8), np.eye(16))
    with pytest.raises(ContractError):
        tk.droppos_loss(o, y, np.zeros(3, np.int8), np.eye(16))
    with pytest.raises(ContractError):
        tk.droppos_loss(o, y, np.zeros(4, np.int8), np.eye(9))


def _toy_model():
    cfg = ViTConfig()
    return tk.DropPosModel(cfg, seed=0), tk.TaskConfig(gamma=0.5, gamma_pos=0.75)


def test_forward_step_shapes_and_guard():
    model, task = _toy_model()
    images = np.random.default_rng(0).normal(size=(4, 32, 32, 3)).astype(np.float32)
    res = tk.forward_step(model, images, task, sigma=1.0, seed=0, step=0)
    assert res.logits.shape == (4, 32, 64)
    assert res.n_dropped == 4 * 24
    assert np.isfinite(float(res.loss.data))
    # a fresh model sits close to uniform prediction
    assert abs(float(res.loss.data) - math.log(64)) < 0.5
    with pytest.raises(ContractError):
        tk.forward_step(model, images, tk.TaskConfig(gamma=0.0, gamma_pos=0.0), 1.0, 0, 0)


def test_forward_backward_batch8_under_a_second():
    model, task = _toy_model()
    images = np.random.default_rng(0).normal(size=(8, 32, 32, 3)).astype(np.float32)
    tk.forward_step(model, images, task, 1.0, 0, 0)   # warm caches
    t0 = time.perf_counter()
    res = tk.forward_step(model, images, task, 1.0, 0, 1)
    backward(res.loss)
    assert time.perf_counter() - t0 < 1.0
    assert all(p.grad is not None for p in model.parameters())


def test_p_mask_gets_gradient_through_full_step():
    model, task = _toy_model()
    images = np.random.default_rng(1).normal(size=(2, 32, 32, 3)).astype(np.float32)
    res = tk.forward_step(model, images, task, 0.0, 0, 0)
    backward(res.loss)
    assert np.abs(model.params["p_mask"].grad).sum() > 0


def test_model_state_round_trip():
    model, _ = _toy_model()
    other = tk.DropPosModel(ViTConfig(), seed=1)
    other.load_state_dict(model.state_dict())
    for k in model.params:
        np.testing.assert_array_equal(other.params[k].data, model.params[k].data)
    with pytest.raises(ContractError):
        other.load_state_dict({})
