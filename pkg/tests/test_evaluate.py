"""Evaluation tests: oracle closure, hand-computed aggregates, thresholds, bench."""

import json

import numpy as np
import pytest

from battwin import cycles as cy
from battwin.cycles import DriveCycle
from battwin.electrochem import init_full_charge
from battwin.evaluate import (EvalReport, MetricTriple, bench_compare,
                              export_voltage_trace, failure_threshold_table,
                              kstep_eval, one_step_eval, rollout)


def make_truth_predictor(dataset, split="test"):
    """Replays ground truth: returns each input's true targets.

    Keys are cast through float32 because records store single precision
    while rollout demand currents arrive as the original doubles.
    """
    table = {}
    for info in dataset.split_cycles(split):
        recs = dataset.records[info.start:info.start + info.count]
        for r in recs:
            key = (float(r[800]), float(np.float32(r[801])), float(np.float32(r[802])))
            table[key] = r

    def predict(c_n, c_p, i_t, i_t100, v_t):
        key = (float(np.float32(v_t)), float(np.float32(i_t)),
               float(np.float32(i_t100)))
        r = table[key]
        return (float(r[1604]), r[804:1204].reshape(20, 20).astype(float),
                r[1204:1604].reshape(20, 20).astype(float), float(r[803]))

    return predict


# -- oracle closure -------------------------------------------------------------

def test_one_step_oracle_closure(small_dataset):
    rep = one_step_eval(make_truth_predictor(small_dataset), small_dataset)
    for q in ("voltage", "c_n", "c_p"):
        for row in ("mean", "max"):
            t = rep.metrics[q][row]
            assert t.l2 == 0.0 and t.l1 == 0.0 and t.linf == 0.0


def test_kstep_oracle_closure(small_dataset):
    rep = kstep_eval(make_truth_predictor(small_dataset), small_dataset)
    for q in ("voltage", "c_n", "c_p"):
        assert rep.metrics[q]["max"].linf == 0.0
    # perfect confusion: no false flags at any threshold
    for row in rep.failure_table:
        assert row["fn_pct"] == 0.0
        assert row["fp_pct"] == 0.0


# -- hand-computed aggregates ------------------------------------------------------

def _tiny_dataset():
    """Two cycles x one sample each with fully known values."""
    recs = np.zeros((2, cy.RECORD_LEN), dtype="<f4")
    for i in range(2):
        recs[i, cy._VT] = 4.0
        recs[i, cy._IT] = 1.0 + i
        recs[i, cy._IT100] = 2.0 + i
        recs[i, cy._VT100] = 3.9 - 0.1 * i
        recs[i, cy._CNT] = 0.5
        recs[i, cy._CPT] = 0.25
    cycles = [cy.CycleInfo(index=i, seed=i, split="test", start=i, count=1,
                           failed=False, failure_window=None,
                           currents=[1.0 + i, 2.0 + i]) for i in range(2)]
    manifest = {"counts": {"train_samples": 0, "test_samples": 2, "total": 2}}
    return cy.Dataset(records=recs, cycles=cycles, manifest=manifest)


def test_one_step_hand_computed_aggregates():
    ds = _tiny_dataset()

    def predict(c_n, c_p, i_t, i_t100, v_t):
        # constant prediction: V=3.85, grids 0.3 / 0.3
        return 3.85, np.full((20, 20), 0.3), np.full((20, 20), 0.3), 0.5

    rep = one_step_eval(predict, ds)
    # voltage errors: |3.85-3.9|=0.05 and |3.85-3.8|=0.05 (up to f32 storage)
    v = rep.metrics["voltage"]
    assert v["mean"].l1 == pytest.approx(0.05, abs=2e-7)
    assert v["max"].linf == pytest.approx(0.05, abs=2e-7)
    assert v["mean"].l2 == pytest.approx(0.05 ** 2, rel=1e-5)
    # c_n constant error 0.2, c_p constant error 0.05
    assert rep.metrics["c_n"]["mean"].l1 == pytest.approx(0.2, abs=1e-6)
    assert rep.metrics["c_n"]["max"].linf == pytest.approx(0.2, abs=1e-7)
    assert rep.metrics["c_p"]["mean"].l2 == pytest.approx(0.05 ** 2, rel=1e-5)
    assert rep.n_cycles == 2 and rep.n_intervals == 2


# -- rollout ------------------------------------------------------------------------

def _scripted_predictor(p_script):
    calls = {"n": 0}

    def predict(c_n, c_p, i_t, i_t100, v_t):
        p = p_script[min(calls["n"], len(p_script) - 1)]
        calls["n"] += 1
        return v_t - 0.01, c_n * 0.99, c_p * 0.99, p

    return predict


def test_rollout_lengths_and_stop(params):
    init = init_full_charge(params)
    cycle = DriveCycle(currents=np.linspace(0, 2, 7))  # 6 windows
    res = rollout(_scripted_predictor([0.1] * 10), cycle, init)
    assert len(res.voltages) == 6 and res.failure_window is None
    res2 = rollout(_scripted_predictor([0.1, 0.2, 0.9, 0.1]), cycle, init)
    assert res2.failure_window == 2
    assert len(res2.voltages) == 3          # stopped at the flagged window
    res3 = rollout(_scripted_predictor([0.1, 0.2, 0.9, 0.1]), cycle, init,
                   stop_on_fail=False)
    assert len(res3.voltages) == 6
    assert res3.failure_window == 2         # first crossing still reported


def test_rollout_deterministic(small_dataset, small_model, params):
    weights, _ = small_model
    init = init_full_charge(params)
    cycle = DriveCycle(currents=np.asarray(
        small_dataset.cycles[0].currents, dtype=float))
    a = rollout(weights, cycle, init)
    b = rollout(weights, cycle, init)
    assert np.array_equal(a.voltages, b.voltages)
    assert np.array_equal(a.p_fail, b.p_fail)
    assert a.failure_window == b.failure_window


# -- threshold table -----------------------------------------------------------------

def test_threshold_monotonicity(small_dataset, small_model):
    weights, _ = small_model
    table = failure_threshold_table(weights, small_dataset)
    fns = [r["fn_pct"] for r in table]
    fps = [r["fp_pct"] for r in table]
    assert fns == sorted(fns)
    assert fps == sorted(fps, reverse=True)


def test_degenerate_zero_threshold(small_dataset):
    # threshold 0 flags window 0 everywhere: no false negatives possible,
    # every never-failing or later-failing cycle becomes a false positive
    predict = make_truth_predictor(small_dataset)
    table = failure_threshold_table(predict, small_dataset, thresholds=(0.0,))
    row = table[0]
    assert row["fn_pct"] == 0.0
    infos = small_dataset.split_cycles("test")
    n_fp = sum(1 for c in infos
               if (not c.failed) or c.failure_window > 0)
    assert row["fp_pct"] == pytest.approx(100.0 * n_fp / len(infos))


# -- report serialization ---------------------------------------------------------------

def test_report_round_trip_bytes(tmp_path, small_dataset, small_model):
    weights, _ = small_model
    rep = kstep_eval(weights, small_dataset)
    p1 = tmp_path / "r1.json"
    p2 = tmp_path / "r2.json"
    rep.save(p1)
    EvalReport.load(p1).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_metric_triple_validation():
    MetricTriple(l2=0.1, l1=0.1, linf=0.2).validate()
    with pytest.raises(AssertionError):
        MetricTriple(l2=0.1, l1=0.3, linf=0.2).validate()


# -- bench ---------------------------------------------------------------------------

def test_bench_ratio_above_one(params, small_model):
    weights, _ = small_model
    cycle = DriveCycle(currents=np.array([2.0, 3.0, 2.5, 3.5]))
    out = bench_compare(weights, params, cycle, repeats=3)
    assert out["ratio"] > 1.0
    assert out["simulator_seconds"] > out["rollout_seconds"]
    assert "platform" in out["machine"]


# -- artifacts ----------------------------------------------------------------------

def test_voltage_trace_export(tmp_path):
    t = np.arange(5) * 100.0
    vt = np.linspace(4.1, 3.9, 5)
    vp = vt + 0.01
    csv = tmp_path / "trace.csv"
    svg = tmp_path / "trace.svg"
    export_voltage_trace(t, vt, vp, csv_path=csv, svg_path=svg)
    lines = csv.read_text().strip().split("\n")
    assert lines[0] == "t,V_true,V_pred"
    assert len(lines) == 6
    assert float(lines[1].split(",")[2]) == pytest.approx(vt[0] + 0.01)
    blob = svg.read_text()
    assert blob.startswith("<svg") and "polyline" in blob
    # deterministic bytes
    svg2 = tmp_path / "trace2.svg"
    export_voltage_trace(t, vt, vp, svg_path=svg2)
    assert svg.read_bytes() == svg2.read_bytes()
