"""One-step and K-step evaluation, failure-threshold analysis, and timing.

Error aggregation: per 100 s interval, each quantity yields a squared error,
a mean-absolute error, and a max-absolute error (grids average/max over
their 400 cells; the voltage is a scalar).  Per cycle, squared and absolute
errors average over the cycle's intervals while the max-abs takes the cycle
maximum.  A report then carries two rows per quantity: the mean over cycles
and the max over cycles.  The ``l2`` slot holds the plain mean squared
error.

K-step evaluation replays each test cycle from its recorded initial state,
feeding predictions back as inputs.  Prediction errors are scored against
the ground-truth states up to the true trajectory's length (the surrogate
keeps rolling past a predicted failure so every true window is scored);
failure flags are read from the predicted per-window probabilities.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, field

import numpy as np

from .cycles import Dataset, DriveCycle
from .electrochem import CellState, simulate_cycle
from .params import ParameterSet
from .surrogate import ClampCounter, SurrogateWeights, forward
from .svgplot import line_plot

DEFAULT_THRESHOLDS = (0.10, 0.20, 0.30, 0.40, 0.50)
ROLLOUT_FAIL_THRESHOLD = 0.50


@dataclass
class MetricTriple:
    """Plain MSE, mean-absolute, and max-absolute error."""

    l2: float
    l1: float
    linf: float

    def validate(self):
        assert self.l2 >= 0.0
        assert self.l1 <= self.linf + 1e-15

    def to_dict(self):
        return {"l2": self.l2, "l1": self.l1, "linf": self.linf}


def _aggregate(per_cycle):
    """Mean-over-cycles and max-over-cycles rows from per-cycle triples."""
    arr = np.array([[t.l2, t.l1, t.linf] for t in per_cycle])
    mean_row = MetricTriple(*(float(v) for v in arr.mean(axis=0)))
    max_row = MetricTriple(*(float(v) for v in arr.max(axis=0)))
    mean_row.validate()
    max_row.validate()
    # mean over cycles of per-cycle maxima never exceeds the global max
    assert mean_row.linf <= max_row.linf + 1e-15
    return {"mean": mean_row, "max": max_row}


def _cycle_triple(se, ae, mx):
    t = MetricTriple(l2=float(np.mean(se)), l1=float(np.mean(ae)),
                     linf=float(np.max(mx)))
    t.validate()
    return t


@dataclass
class EvalReport:
    """Per-quantity error rows plus failure confusion analysis."""

    kind: str
    n_cycles: int
    n_intervals: int
    metrics: dict
    failure_table: list = field(default_factory=list)
    confusion: dict = field(default_factory=dict)
    clamp: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_cycles": self.n_cycles,
            "n_intervals": self.n_intervals,
            "metrics": {q: {row: t.to_dict() for row, t in rows.items()}
                        for q, rows in self.metrics.items()},
            "failure_table": self.failure_table,
            "confusion": self.confusion,
            "clamp": self.clamp,
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            d = json.load(fh)
        metrics = {q: {row: MetricTriple(**t) for row, t in rows.items()}
                   for q, rows in d["metrics"].items()}
        return cls(kind=d["kind"], n_cycles=d["n_cycles"],
                   n_intervals=d["n_intervals"], metrics=metrics,
                   failure_table=d["failure_table"], confusion=d["confusion"],
                   clamp=d["clamp"])


def _as_predictor(model):
    """Accept SurrogateWeights or any callable with the forward signature."""
    if isinstance(model, SurrogateWeights):
        def predict(c_n, c_p, i_t, i_t100, v_t, counter=None):
            return forward(model, c_n, c_p, i_t, i_t100, v_t, counter=counter)
        return predict
    if callable(model):
        def predict(c_n, c_p, i_t, i_t100, v_t, counter=None):
            return model(c_n, c_p, i_t, i_t100, v_t)
        return predict
    raise TypeError("model must be SurrogateWeights or a predictor callable")


# -- one-step evaluation -------------------------------------------------------


def one_step_eval(model, dataset: Dataset, split: str = "test") -> EvalReport:
    """Forward every test sample with true inputs and score the predictions."""
    predict = _as_predictor(model)
    cycles = dataset.split_cycles(split)
    if not cycles:
        raise ValueError(f"dataset has no '{split}' cycles")
    per_cycle = {"voltage": [], "c_n": [], "c_p": []}
    n_intervals = 0
    for info in cycles:
        recs = dataset.records[info.start:info.start + info.count]
        se = {"voltage": [], "c_n": [], "c_p": []}
        ae = {"voltage": [], "c_n": [], "c_p": []}
        mx = {"voltage": [], "c_n": [], "c_p": []}
        for r in recs:
            v_hat, cn_hat, cp_hat, _ = predict(
                r[0:400].reshape(20, 20).astype(float),
                r[400:800].reshape(20, 20).astype(float),
                float(r[801]), float(r[802]), float(r[800]))
            ev = v_hat - float(r[1604])
            se["voltage"].append(ev * ev)
            ae["voltage"].append(abs(ev))
            mx["voltage"].append(abs(ev))
            for key, pred, tgt in (("c_n", cn_hat, r[804:1204]),
                                   ("c_p", cp_hat, r[1204:1604])):
                d = pred.reshape(-1) - tgt.astype(float)
                se[key].append(float(np.mean(d * d)))
                ae[key].append(float(np.mean(np.abs(d))))
                mx[key].append(float(np.max(np.abs(d))))
            n_intervals += 1
        for key in per_cycle:
            per_cycle[key].append(_cycle_triple(se[key], ae[key], mx[key]))
    metrics = {key: _aggregate(tr) for key, tr in per_cycle.items()}
    return EvalReport(kind="one_step", n_cycles=len(cycles),
                      n_intervals=n_intervals, metrics=metrics)


# -- recursive rollout -----------------------------------------------------------


@dataclass
class RolloutResult:
    """Predicted trajectory of one drive cycle."""

    voltages: np.ndarray          # V at windows 1..K
    c_n: list                     # predicted grids per window
    c_p: list
    p_fail: np.ndarray            # failure probability per window (index = window)
    failure_window: int | None    # first window with p_fail >= the 0.5 rule
    clamp: ClampCounter = field(default_factory=ClampCounter)


def _roll(predict, currents, cn0, cp0, v0, n_windows, stop_on_fail,
          threshold=ROLLOUT_FAIL_THRESHOLD):
    counter = ClampCounter()
    cn, cp, v = np.asarray(cn0, dtype=float), np.asarray(cp0, dtype=float), float(v0)
    vs, cns, cps, ps = [], [], [], []
    failure_window = None
    for k in range(n_windows):
        v_hat, cn_hat, cp_hat, p = predict(cn, cp, float(currents[k]),
                                           float(currents[k + 1]), v,
                                           counter=counter)
        vs.append(v_hat)
        cns.append(cn_hat)
        cps.append(cp_hat)
        ps.append(p)
        if failure_window is None and p >= threshold:
            failure_window = k
            if stop_on_fail:
                break
        cn, cp, v = cn_hat, cp_hat, v_hat
    return RolloutResult(voltages=np.array(vs), c_n=cns, c_p=cps,
                         p_fail=np.array(ps), failure_window=failure_window,
                         clamp=counter)


def rollout(model, cycle, init: CellState, stop_on_fail: bool = True) -> RolloutResult:
    """Recursively predict a whole cycle from an initial cell state.

    Each window feeds the previous prediction back as input; the rollout
    stops at the cycle end or at the first window whose failure probability
    reaches 0.5 (the predicted failure window).
    """
    predict = _as_predictor(model)
    currents = np.asarray(getattr(cycle, "currents", cycle), dtype=float)
    return _roll(predict, currents, init.c_n, init.c_p, init.V,
                 currents.size - 1, stop_on_fail)


# -- K-step evaluation -------------------------------------------------------------


def _kstep_rollouts(model, dataset: Dataset, split: str = "test"):
    """Roll every test cycle to its true length; yield (info, recs, result)."""
    predict = _as_predictor(model)
    out = []
    for info in dataset.split_cycles(split):
        recs = dataset.records[info.start:info.start + info.count]
        r0 = recs[0]
        result = _roll(predict, np.asarray(info.currents, dtype=float),
                       r0[0:400].reshape(20, 20).astype(float),
                       r0[400:800].reshape(20, 20).astype(float),
                       float(r0[800]), info.count, stop_on_fail=False)
        out.append((info, recs, result))
    return out


def kstep_eval(model, dataset: Dataset, split: str = "test",
               thresholds=DEFAULT_THRESHOLDS) -> EvalReport:
    """Score recursive rollouts against ground truth, window by window."""
    rolled = _kstep_rollouts(model, dataset, split)
    if not rolled:
        raise ValueError(f"dataset has no '{split}' cycles")
    per_cycle = {"voltage": [], "c_n": [], "c_p": []}
    n_intervals = 0
    clamp_grid = clamp_cur = 0
    for info, recs, result in rolled:
        se = {"voltage": [], "c_n": [], "c_p": []}
        ae = {"voltage": [], "c_n": [], "c_p": []}
        mx = {"voltage": [], "c_n": [], "c_p": []}
        for k in range(info.count):
            r = recs[k]
            ev = result.voltages[k] - float(r[1604])
            se["voltage"].append(ev * ev)
            ae["voltage"].append(abs(ev))
            mx["voltage"].append(abs(ev))
            for key, pred, tgt in (("c_n", result.c_n[k], r[804:1204]),
                                   ("c_p", result.c_p[k], r[1204:1604])):
                d = pred.reshape(-1) - tgt.astype(float)
                se[key].append(float(np.mean(d * d)))
                ae[key].append(float(np.mean(np.abs(d))))
                mx[key].append(float(np.max(np.abs(d))))
            n_intervals += 1
        for key in per_cycle:
            per_cycle[key].append(_cycle_triple(se[key], ae[key], mx[key]))
        clamp_grid += result.clamp.grid
        clamp_cur += result.clamp.current
    metrics = {key: _aggregate(tr) for key, tr in per_cycle.items()}
    table, confusion = _failure_analysis(rolled, thresholds)
    return EvalReport(kind="kstep", n_cycles=len(rolled),
                      n_intervals=n_intervals, metrics=metrics,
                      failure_table=table, confusion=confusion,
                      clamp={"grid": clamp_grid, "current": clamp_cur})


def _failure_analysis(rolled, thresholds):
    """False-negative / false-positive rates per probability threshold.

    A flag is the first window whose predicted failure probability reaches
    the threshold.  False negative: the cycle truly fails but no flag fires
    at or before the true failure window.  False positive: a flag fires
    strictly before the true failure window, or anywhere in a never-failing
    cycle.
    """
    n = len(rolled)
    table = []
    confusion = {}
    prev_fn = -1.0
    prev_fp = 101.0
    for th in thresholds:
        fn = fp_early = fp_nofail = timely = clean = 0
        for info, _, result in rolled:
            flags = np.nonzero(result.p_fail >= th)[0]
            flag = int(flags[0]) if flags.size else None
            if info.failed:
                fw = info.failure_window
                if flag is None or flag > fw:
                    fn += 1
                elif flag < fw:
                    fp_early += 1
                else:
                    timely += 1
            else:
                if flag is not None:
                    fp_nofail += 1
                else:
                    clean += 1
        counts = {"fn": fn, "fp_early": fp_early, "fp_never_failing": fp_nofail,
                  "timely": timely, "true_negative": clean}
        assert sum(counts.values()) == n
        fn_pct = 100.0 * fn / n
        fp_pct = 100.0 * (fp_early + fp_nofail) / n
        # rising thresholds shrink the flag set: FN can only grow, FP only shrink
        assert fn_pct >= prev_fn - 1e-12 and fp_pct <= prev_fp + 1e-12
        prev_fn, prev_fp = fn_pct, fp_pct
        table.append({"threshold_pct": round(100.0 * th, 6),
                      "fn_pct": fn_pct, "fp_pct": fp_pct})
        confusion[f"{round(100.0 * th, 6):g}"] = counts
    return table, confusion


def failure_threshold_table(model, dataset: Dataset,
                            thresholds=DEFAULT_THRESHOLDS, split: str = "test"):
    """Standalone threshold sweep over rollout failure probabilities."""
    rolled = _kstep_rollouts(model, dataset, split)
    table, _ = _failure_analysis(rolled, thresholds)
    return table


# -- timing benchmark ---------------------------------------------------------------


def bench_compare(model, params: ParameterSet, cycle, repeats: int = 5) -> dict:
    """Median wall time of the simulator vs a surrogate rollout, same cycle."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    cyc = cycle if isinstance(cycle, DriveCycle) else DriveCycle(
        currents=np.asarray(cycle, dtype=float))
    init = simulate_cycle(params, DriveCycle(
        currents=np.zeros(2))).trajectory[0]

    simulate_cycle(params, cyc)                         # warm-up
    sim_times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        simulate_cycle(params, cyc)
        sim_times.append(time.perf_counter() - t0)

    rollout(model, cyc, init)                           # warm-up
    roll_times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        rollout(model, cyc, init)
        roll_times.append(time.perf_counter() - t0)

    sim_s = float(np.median(sim_times))
    roll_s = float(np.median(roll_times))
    return {
        "simulator_seconds": sim_s,
        "rollout_seconds": roll_s,
        "ratio": sim_s / roll_s,
        "repeats": repeats,
        "machine": {"platform": platform.platform(),
                    "python": platform.python_version(),
                    "numpy": np.__version__},
    }


# -- trace artifacts -----------------------------------------------------------------


def export_voltage_trace(times, v_true, v_pred, csv_path=None, svg_path=None,
                         title="Predicted vs true voltage") -> None:
    """Write a (t, V_true, V_pred) CSV and/or an SVG line plot."""
    times = np.asarray(times, dtype=float)
    v_true = np.asarray(v_true, dtype=float)
    v_pred = np.asarray(v_pred, dtype=float)
    if csv_path is not None:
        with open(csv_path, "w") as fh:
            fh.write("t,V_true,V_pred\n")
            for t, a, b in zip(times, v_true, v_pred):
                fh.write(f"{float(t)!r},{float(a)!r},{float(b)!r}\n")
    if svg_path is not None:
        line_plot(svg_path, [(times, v_true, "simulator"),
                             (times, v_pred, "surrogate")],
                  title=title, xlabel="time (s)", ylabel="voltage (V)")
