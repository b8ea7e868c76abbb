"""Command-line front end: gen, train, eval, rollout, soh, bench, plot.

Every command accepts ``--config FILE`` (a JSON object of option defaults;
explicit flags win) and echoes the effective configuration, tool version,
and seeds into ``effective_config.json`` next to its outputs, so any run
can be reproduced exactly.  ``BATTWIN_THREADS`` sets the default worker
count for dataset generation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cycles import (DriveCycle, build_dataset, constant_current_dataset,
                     random_cycle, read_dataset, write_dataset)
from .electrochem import simulate_cycle
from .errors import BattwinError
from .evaluate import (bench_compare, export_voltage_trace, kstep_eval,
                       one_step_eval, rollout)
from .params import default_parameters, load_parameters
from .soh import estimate_gamma
from .surrogate import TrainConfig, load_checkpoint, save_checkpoint, train
from .svgplot import line_plot

PRESETS = {
    "desk": {"train_cycles": 1500, "test_cycles": 300, "windows": 40},
    "paper": {"train_cycles": 15000, "test_cycles": 3000, "windows": 40},
}


def _default_threads() -> int:
    try:
        return max(1, int(os.environ.get("BATTWIN_THREADS", "1")))
    except ValueError:
        return 1


def _load_params(path):
    return load_parameters(path) if path else default_parameters()


def _merge_config(args, parser) -> dict:
    """Config-file values fill in everything the command line left at default."""
    merged = vars(args).copy()
    cfg_path = merged.pop("config", None)
    if cfg_path:
        with open(cfg_path) as fh:
            file_cfg = json.load(fh)
        defaults = {a.dest: parser.get_default(a.dest) for a in parser._actions}
        for key, value in file_cfg.items():
            if key not in merged:
                raise BattwinError(f"unknown config key '{key}'")
            if merged[key] == defaults.get(key):
                merged[key] = value
    merged.pop("func", None)
    return merged


def _echo_config(directory, command, config) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "tool_version": __version__, **config}
    with open(directory / "effective_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- gen -------------------------------------------------------------------------


def cmd_gen(args, parser) -> int:
    cfg = _merge_config(args, parser)
    params = _load_params(cfg["params"])
    if cfg["preset"]:
        preset = PRESETS[cfg["preset"]]
        cfg["train_cycles"] = preset["train_cycles"]
        cfg["test_cycles"] = preset["test_cycles"]
        cfg["windows"] = preset["windows"]
    out = Path(cfg["out"])
    if cfg["constant_current"]:
        crates = [float(c) for c in cfg["constant_current"].split(",") if c]
        ds = constant_current_dataset(params, crates, repeats=cfg["repeats"],
                                      dt_internal=cfg["dt"],
                                      workers=cfg["threads"])
    else:
        print(f"generating {cfg['train_cycles']} train + {cfg['test_cycles']} "
              f"test cycles ({cfg['windows']} windows, seed {cfg['seed']}, "
              f"{cfg['threads']} workers)")
        ds = build_dataset(params, cfg["train_cycles"], cfg["test_cycles"],
                           base_seed=cfg["seed"], n_windows=cfg["windows"],
                           dt_internal=cfg["dt"], workers=cfg["threads"])
    write_dataset(ds, out)
    _echo_config(out, "gen", cfg)
    counts = ds.manifest["counts"]
    fail_frac = float(ds.records[:, 803].mean()) if ds.n_samples else 0.0
    print(f"wrote {counts['total']} samples ({counts['train_samples']} train / "
          f"{counts['test_samples']} test) to {out}")
    print(f"failure-sample fraction: {fail_frac:.4f}; skipped cycles: "
          f"{ds.manifest['skipped_cycles']}")
    return 0


# -- train ------------------------------------------------------------------------


def cmd_train(args, parser) -> int:
    cfg = _merge_config(args, parser)
    ds = read_dataset(cfg["data"])
    tc = TrainConfig(batch_size=cfg["batch"], epochs=cfg["epochs"],
                     learning_rate=cfg["lr"], lr_decay=cfg["decay"],
                     w_volt=cfg["w_volt"], w_fail=cfg["w_fail"],
                     seed=cfg["seed"])
    weights, history = train(ds, tc)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(weights, out)
    _write_json(out.with_suffix(".history.json"), history)
    _echo_config(out.parent, "train", cfg)
    for h in history:
        print(f"epoch {h['epoch']}: loss {h['total']:.6f} "
              f"(conc {h['conc']:.6f}, volt {h['volt']:.6f}, "
              f"fail {h['fail']:.6f}) lr {h['lr']:.2e}")
    print(f"saved checkpoint to {out}")
    return 0


# -- eval -------------------------------------------------------------------------


def cmd_eval(args, parser) -> int:
    cfg = _merge_config(args, parser)
    weights = load_checkpoint(cfg["model"])
    ds = read_dataset(cfg["data"])
    one = one_step_eval(weights, ds)
    kst = kstep_eval(weights, ds)
    report = {"one_step": one.to_dict(), "kstep": kst.to_dict()}
    report_path = Path(cfg["report"])
    report_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report_path, report)
    _echo_config(report_path.parent, "eval", cfg)
    if cfg["out"]:
        _export_example_traces(weights, ds, Path(cfg["out"]))
    v1 = one.metrics["voltage"]["mean"]
    vk = kst.metrics["voltage"]["mean"]
    print(f"one-step voltage:  l2 {v1.l2:.3e}  l1 {v1.l1:.3e}  linf {v1.linf:.3e}")
    print(f"k-step voltage:    l2 {vk.l2:.3e}  l1 {vk.l1:.3e}  linf {vk.linf:.3e}")
    for row in kst.failure_table:
        print(f"threshold {row['threshold_pct']:5.1f}%  FN {row['fn_pct']:6.2f}%  "
              f"FP {row['fp_pct']:6.2f}%")
    print(f"report written to {report_path}")
    return 0


def _export_example_traces(weights, ds, out_dir, n_cycles=3):
    from .evaluate import _kstep_rollouts
    out_dir.mkdir(parents=True, exist_ok=True)
    rolled = _kstep_rollouts(weights, ds)
    for info, recs, result in rolled[:n_cycles]:
        times = 100.0 * np.arange(1, info.count + 1)
        v_true = recs[:, 1604].astype(float)
        export_voltage_trace(
            times, v_true, result.voltages,
            csv_path=out_dir / f"cycle{info.index}_voltage.csv",
            svg_path=out_dir / f"cycle{info.index}_voltage.svg",
            title=f"cycle {info.index}: predicted vs simulated voltage")


# -- rollout -----------------------------------------------------------------------


def cmd_rollout(args, parser) -> int:
    cfg = _merge_config(args, parser)
    weights = load_checkpoint(cfg["model"])
    params = _load_params(cfg["params"])
    if cfg["currents"]:
        cyc = DriveCycle(currents=np.array(
            [float(c) for c in cfg["currents"].split(",") if c]))
    else:
        cyc = random_cycle(cfg["seed"], cfg["windows"])
    outcome = simulate_cycle(params, cyc)
    init = outcome.trajectory[0]
    result = rollout(weights, cyc, init, stop_on_fail=False)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    n_true = outcome.n_windows()
    k = min(n_true, len(result.voltages))
    v_true = np.array([outcome.trajectory[min(i + 1, len(outcome.trajectory) - 1)].V
                       for i in range(k)])
    times = 100.0 * np.arange(1, k + 1)
    export_voltage_trace(times, v_true, result.voltages[:k],
                         csv_path=out / "voltage.csv",
                         svg_path=out / "voltage.svg")
    summary = {
        "true_failed": outcome.failed,
        "true_failure_window": outcome.failure_window,
        "predicted_failure_window": result.failure_window,
        "windows_compared": int(k),
        "clamped_grid_values": result.clamp.grid,
        "clamped_current_values": result.clamp.current,
    }
    _write_json(out / "rollout.json", summary)
    _echo_config(out, "rollout", cfg)
    print(f"true failure window: {outcome.failure_window}; "
          f"predicted: {result.failure_window}")
    print(f"artifacts written to {out}")
    return 0


# -- soh ---------------------------------------------------------------------------


def cmd_soh(args, parser) -> int:
    cfg = _merge_config(args, parser)
    weights = load_checkpoint(cfg["model"])
    params = _load_params(cfg["params"])
    trials = []
    for t in range(cfg["trials"]):
        est = estimate_gamma(weights, params, gamma_true=cfg["gamma"],
                             n_cycles=cfg["cycles"],
                             base_seed=cfg["seed"] + 1000 * t,
                             n_windows=cfg["windows"])
        trials.append(est)
        ests = ", ".join("-" if v is None else f"{v:.3f}" for v in est.per_cycle)
        print(f"trial {t}: per-cycle [{ests}] -> final {est.final:.4f}")
    report = {
        "gamma_true": cfg["gamma"],
        "trials": [{"per_cycle": e.per_cycle, "final": e.final} for e in trials],
    }
    report_path = Path(cfg["report"])
    report_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report_path, report)
    _echo_config(report_path.parent, "soh", cfg)
    if cfg["out"]:
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        for ti, est in enumerate(trials):
            series = []
            for ci, (grid, vals) in enumerate(est.traces):
                with open(out / f"trial{ti}_cycle{ci}_objective.csv", "w") as fh:
                    fh.write("gamma,objective\n")
                    for g, v in zip(grid, vals):
                        fh.write(f"{float(g)!r},{float(v)!r}\n")
                series.append((grid, vals, f"cycle {ci}"))
            line_plot(out / f"trial{ti}_objective.svg", series,
                      title=f"SOH objective, trial {ti} "
                            f"(true {cfg['gamma']:.2f})",
                      xlabel="gamma candidate", ylabel="objective")
    return 0


# -- bench -------------------------------------------------------------------------


def cmd_bench(args, parser) -> int:
    cfg = _merge_config(args, parser)
    weights = load_checkpoint(cfg["model"])
    params = _load_params(cfg["params"])
    cyc = random_cycle(cfg["seed"], cfg["windows"])
    out = bench_compare(weights, params, cyc, repeats=cfg["repeats"])
    report_path = Path(cfg["report"])
    report_path.parent.mkdir(parents=True, exist_ok=True)
    _write_json(report_path, out)
    _echo_config(report_path.parent, "bench", cfg)
    print(f"simulator: {out['simulator_seconds'] * 1e3:.1f} ms; "
          f"rollout: {out['rollout_seconds'] * 1e3:.2f} ms; "
          f"ratio: {out['ratio']:.1f}x")
    return 0


# -- plot --------------------------------------------------------------------------


def cmd_plot(args, parser) -> int:
    cfg = _merge_config(args, parser)
    rows = Path(cfg["csv"]).read_text().strip().split("\n")
    header = rows[0].split(",")
    data = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    series = [(data[:, 0], data[:, i], header[i]) for i in range(1, len(header))]
    line_plot(cfg["out"], series, title=cfg["title"] or "",
              xlabel=header[0], ylabel="")
    print(f"wrote {cfg['out']}")
    return 0


# -- parser ------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="battwin",
        description="Cell simulator, CNN surrogate training, rollout "
                    "evaluation, and state-of-health estimation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a simulation-backed dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--params", default=None, help="parameter JSON (default bundled)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--train-cycles", dest="train_cycles", type=int, default=20)
    p.add_argument("--test-cycles", dest="test_cycles", type=int, default=5)
    p.add_argument("--windows", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--threads", type=int, default=_default_threads())
    p.add_argument("--constant-current", dest="constant_current", default=None,
                   help="comma-separated C-rates; full discharges instead of cycles")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train the surrogate on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--decay", type=float, default=0.7)
    p.add_argument("--w-volt", dest="w_volt", type=float, default=10.0)
    p.add_argument("--w-fail", dest="w_fail", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="one-step and K-step evaluation")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output report JSON")
    p.add_argument("--out", default=None, help="directory for trace artifacts")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("rollout", help="recursive prediction of one cycle")
    p.add_argument("--model", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--windows", type=int, default=40)
    p.add_argument("--currents", default=None,
                   help="comma-separated C-rate breakpoints")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("soh", help="state-of-health estimation trials")
    p.add_argument("--model", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--cycles", type=int, default=5)
    p.add_argument("--windows", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="soh_report.json")
    p.add_argument("--out", default=None, help="directory for objective curves")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_soh)

    p = sub.add_parser("bench", help="simulator vs rollout wall-time comparison")
    p.add_argument("--model", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--windows", type=int, default=12)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--report", default="bench_report.json")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="render a CSV trace as an SVG line plot")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = next(a for a in parser._subparsers._group_actions[0].choices.values()
               if a.get_default("func") is args.func)
    try:
        return args.func(args, sub)
    except BattwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
