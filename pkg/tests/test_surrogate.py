"""Surrogate network tests: forward contract, loss oracles, training, checkpoints."""

import numpy as np
import pytest

from battwin import nn
from battwin.cycles import Sample
from battwin.errors import CheckpointError, TrainingError
from battwin.surrogate import (ClampCounter, SurrogateWeights, TrainConfig,
                               forward, forward_batch, init_weights, load_checkpoint,
                               loss, save_checkpoint, train, _loss_and_grads)

NORM = {"i_max": 6.0, "v_lo": 3.65, "v_hi": 4.15}


@pytest.fixture(scope="module")
def weights():
    return init_weights(3, NORM)


def _random_inputs(rng, n=None):
    shape = (20, 20) if n is None else (n, 20, 20)
    cn = rng.uniform(0, 1, shape)
    cp = rng.uniform(0, 1, shape)
    if n is None:
        return cn, cp, rng.uniform(0, 6), rng.uniform(0, 6), rng.uniform(3.7, 4.1)
    return (cn, cp, rng.uniform(0, 6, n), rng.uniform(0, 6, n),
            rng.uniform(3.7, 4.1, n))


# -- forward -------------------------------------------------------------------

def test_forward_output_contract(weights):
    rng = np.random.default_rng(0)
    v, cn, cp, p = forward(weights, *_random_inputs(rng))
    assert isinstance(v, float) and isinstance(p, float)
    assert cn.shape == (20, 20) and cp.shape == (20, 20)
    assert 0.0 < p < 1.0                      # sigmoid range, open interval
    # 801 regression outputs + 1 probability = 1 voltage, 800 grid values, 1 p
    assert 1 + cn.size + cp.size == 801


def test_forward_deterministic(weights):
    rng = np.random.default_rng(1)
    args = _random_inputs(rng)
    a = forward(weights, *args)
    b = forward(weights, *args)
    assert a[0] == b[0] and a[3] == b[3]
    assert np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


def test_forward_batch_matches_loop(weights):
    rng = np.random.default_rng(2)
    cn, cp, it, it100, vt = _random_inputs(rng, n=4)
    vb, cnb, cpb, pb = forward_batch(weights, cn, cp, it, it100, vt)
    for i in range(4):
        v1, cn1, cp1, p1 = forward(weights, cn[i], cp[i], it[i], it100[i], vt[i])
        assert abs(vb[i] - v1) < 1e-12
        np.testing.assert_allclose(cnb[i], cn1, atol=1e-12)
        assert abs(pb[i] - p1) < 1e-12


def test_forward_clamps_and_counts(weights):
    rng = np.random.default_rng(3)
    cn, cp, it, it100, vt = _random_inputs(rng)
    cn = cn.copy()
    cn[0, 0] = -0.3
    cn[0, 1] = 1.4
    counter = ClampCounter()
    forward(weights, cn, cp, 7.5, it100, vt, counter=counter)
    assert counter.grid == 2
    assert counter.current == 1


def test_architecture_arithmetic(weights):
    assert weights.feature_len == 2 * 2 * 64 == 256
    assert weights.tensors["reg1_w"].shape[1] == 256 + 3
    assert weights.tensors["reg3_w"].shape[0] == 801
    assert weights.tensors["fail3_w"].shape[0] == 1


def test_init_weights_deterministic():
    a = init_weights(9, NORM)
    b = init_weights(9, NORM)
    for k in a.tensors:
        assert np.array_equal(a.tensors[k], b.tensors[k])


# -- loss ------------------------------------------------------------------------

def _sample_from(pred, fail=0.0):
    v, cn, cp, _ = pred
    return Sample(c_n=np.zeros((20, 20)), c_p=np.zeros((20, 20)), V_t=0.0,
                  I_t=0.0, I_t100=0.0, fail=fail, c_n_next=cn.copy(),
                  c_p_next=cp.copy(), V_t100=v)


def test_loss_zero_for_exact_prediction(weights):
    rng = np.random.default_rng(5)
    pred = forward(weights, *_random_inputs(rng))
    target = _sample_from(pred, fail=pred[3])
    out = loss(pred, target)
    assert out["total"] == 0.0


def test_loss_voltage_weighting(weights):
    rng = np.random.default_rng(6)
    pred = forward(weights, *_random_inputs(rng))
    target = _sample_from(pred, fail=pred[3])
    target.V_t100 = pred[0] - 0.01
    out = loss(pred, target)
    assert out["volt"] == pytest.approx(10.0 * 0.01 ** 2, rel=1e-9)
    assert out["conc"] == 0.0 and out["fail"] == 0.0


def test_loss_matches_straight_line_oracle(weights):
    rng = np.random.default_rng(7)
    pred = forward(weights, *_random_inputs(rng))
    target = Sample(c_n=np.zeros((20, 20)), c_p=np.zeros((20, 20)), V_t=0.0,
                    I_t=0.0, I_t100=0.0, fail=1.0,
                    c_n_next=rng.uniform(0, 1, (20, 20)),
                    c_p_next=rng.uniform(0, 1, (20, 20)),
                    V_t100=rng.uniform(3.7, 4.1))
    out = loss(pred, target)
    # independent arithmetic, written as a straight line
    acc = 0.0
    for i in range(20):
        for j in range(20):
            acc += (pred[1][i, j] - target.c_n_next[i, j]) ** 2
            acc += (pred[2][i, j] - target.c_p_next[i, j]) ** 2
    expect_conc = acc / 800.0
    expect_volt = 10.0 * (pred[0] - target.V_t100) ** 2
    expect_fail = (pred[3] - 1.0) ** 2
    assert out["conc"] == pytest.approx(expect_conc, abs=1e-12)
    assert out["volt"] == pytest.approx(expect_volt, abs=1e-12)
    assert out["fail"] == pytest.approx(expect_fail, abs=1e-12)
    assert out["total"] == pytest.approx(expect_conc + expect_volt + expect_fail,
                                         abs=1e-12)


def test_loss_scale_hook(weights):
    rng = np.random.default_rng(8)
    pred = forward(weights, *_random_inputs(rng))
    target = _sample_from(pred)
    target.V_t100 = pred[0] + 0.05
    target.c_n_next = target.c_n_next + 0.01
    base = loss(pred, target, w_volt=10.0)
    scaled = loss(pred, target, w_volt=30.0)
    assert scaled["volt"] == pytest.approx(3.0 * base["volt"], rel=1e-12)
    assert scaled["conc"] == base["conc"]


# -- full-network gradient check ----------------------------------------------------

def test_full_network_gradient_check():
    rng = np.random.default_rng(12)
    w = init_weights(12, NORM, channels=(4, 6, 8), reg_hidden=(24, 24),
                     fail_hidden=(8, 4))
    n = 2
    cn, cp, it, it100, vt = _random_inputs(rng, n=n)
    batch = (cn, cp, it, it100, vt,
             rng.uniform(0, 1, (n, 20, 20)), rng.uniform(0, 1, (n, 20, 20)),
             rng.uniform(3.7, 4.1, n), rng.integers(0, 2, n).astype(float))

    def f(tensors):
        w.tensors = tensors
        comps, grads = _loss_and_grads(w, batch, 10.0, 1.0)
        return comps["total"], grads

    report = nn.grad_check(f, w.tensors, np.random.default_rng(99),
                           rel_tol=1e-4, max_coords=12)
    assert report["__all__"]["ok"], report


def test_full_size_network_gradient_check():
    rng = np.random.default_rng(13)
    w = init_weights(13, NORM)
    n = 2
    cn, cp, it, it100, vt = _random_inputs(rng, n=n)
    batch = (cn, cp, it, it100, vt,
             rng.uniform(0, 1, (n, 20, 20)), rng.uniform(0, 1, (n, 20, 20)),
             rng.uniform(3.7, 4.1, n), np.array([0.0, 1.0]))

    def f(tensors):
        w.tensors = tensors
        comps, grads = _loss_and_grads(w, batch, 10.0, 1.0)
        return comps["total"], grads

    report = nn.grad_check(f, w.tensors, np.random.default_rng(4),
                           rel_tol=1e-4, max_coords=6)
    assert report["__all__"]["ok"], report


# -- training --------------------------------------------------------------------

def test_one_epoch_64_samples_one_step(small_dataset):
    # restrict to exactly 64 train samples by duplicating the split arrays
    import battwin.cycles as cy
    recs = small_dataset.records
    idx = small_dataset.split_indices("train")
    take = np.resize(idx, 64)
    ds = cy.Dataset(records=recs[take],
                    cycles=[cy.CycleInfo(index=0, seed=None, split="train",
                                         start=0, count=64, failed=False,
                                         failure_window=None, currents=[0., 0.])],
                    manifest=dict(small_dataset.manifest))
    ds.manifest["counts"] = {"train_samples": 64, "test_samples": 0, "total": 64}
    weights, history = train(ds, TrainConfig(epochs=1, batch_size=64, seed=0))
    assert len(history) == 1
    assert history[0]["n_batches"] == 1


def test_training_deterministic(small_dataset):
    cfg = TrainConfig(epochs=2, batch_size=16, seed=5)
    w1, h1 = train(small_dataset, cfg)
    w2, h2 = train(small_dataset, TrainConfig(epochs=2, batch_size=16, seed=5))
    assert h1 == h2
    for k in w1.tensors:
        assert np.array_equal(w1.tensors[k], w2.tensors[k])


def test_training_loss_decreases(small_model):
    _, history = small_model
    assert history[-1]["total"] < history[0]["total"]


def test_learning_rate_schedule(small_model):
    _, history = small_model
    lrs = [h["lr"] for h in history]
    for a, b in zip(lrs, lrs[1:]):
        assert b == pytest.approx(0.7 * a)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(w_volt=0.0).validate()


# -- checkpoints -------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, small_model):
    weights, _ = small_model
    path = tmp_path / "m.ckpt"
    save_checkpoint(weights, path)
    back = load_checkpoint(path)
    rng = np.random.default_rng(20)
    args = _random_inputs(rng)
    a = forward(weights, *args)
    b = forward(back, *args)
    assert abs(a[0] - b[0]) / max(abs(a[0]), 1e-9) < 1e-6
    np.testing.assert_allclose(a[1], b[1], atol=1e-5)
    assert back.norm == weights.norm
    assert back.seed == weights.seed


def test_checkpoint_bytes_stable(tmp_path, small_model):
    weights, _ = small_model
    save_checkpoint(weights, tmp_path / "a.ckpt")
    save_checkpoint(weights, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    # save -> load -> save is also byte-stable (single precision fixed point)
    back = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(back, tmp_path / "c.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "c.ckpt").read_bytes()


def test_checkpoint_corrupt_header(tmp_path, small_model):
    weights, _ = small_model
    path = tmp_path / "m.ckpt"
    save_checkpoint(weights, path)
    blob = path.read_bytes()
    path.write_bytes(b"garbage" + blob[3:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_shape_edit_detected(tmp_path, small_model):
    import json
    weights, _ = small_model
    path = tmp_path / "m.ckpt"
    save_checkpoint(weights, path)
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    manifest = json.loads(blob[:nl])
    manifest["tensors"][0][1] = [7, 7, 2, 99]
    path.write_bytes(json.dumps(manifest, sort_keys=True).encode() + blob[nl:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncated_payload(tmp_path, small_model):
    weights, _ = small_model
    path = tmp_path / "m.ckpt"
    save_checkpoint(weights, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-50])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
