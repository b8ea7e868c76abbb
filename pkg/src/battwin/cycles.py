"""Random drive cycles, simulation-backed datasets, and their file format.

A dataset directory holds ``manifest.json`` (counts, seeds, per-cycle
metadata, config digest) and ``samples.bin``, a flat little-endian float32
payload.  Each record is 1605 values / 6420 bytes laid out as::

    c_n[400] (x-major), c_p[400], V_t, I_t, I_t100, fail,
    c_n'[400], c_p'[400], V_t100

Sample grids are stored in single precision; records within one cycle chain
exactly (a sample's inputs are byte-identical to the previous sample's
targets).
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .electrochem import simulate_currents
from .errors import BattwinError, DataFormatError, DataIntegrityError
from .params import ParameterSet

RECORD_LEN = 1605
RECORD_BYTES = RECORD_LEN * 4
FORMAT_VERSION = 1
MAX_CRATE = 6.0

_CN = slice(0, 400)
_CP = slice(400, 800)
_VT = 800
_IT = 801
_IT100 = 802
_FAIL = 803
_CNT = slice(804, 1204)
_CPT = slice(1204, 1604)
_VT100 = 1604


@dataclass(frozen=True)
class DriveCycle:
    """C-rate breakpoints, one per 100 s boundary, linearly interpolated."""

    currents: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        cur = np.asarray(self.currents, dtype=float)
        object.__setattr__(self, "currents", cur)
        if cur.ndim != 1 or cur.size < 2:
            raise ValueError("a drive cycle needs at least two breakpoints")
        if cur.min() < 0.0 or cur.max() > MAX_CRATE:
            raise ValueError(f"cycle currents must lie in [0, {MAX_CRATE}] C")

    @property
    def n_windows(self) -> int:
        return self.currents.size - 1


def random_cycle(seed: int, n_windows: int) -> DriveCycle:
    """Uniform random breakpoints on [0, 6] C from a PCG64 generator.

    The generator is ``numpy.random.Generator(numpy.random.PCG64(seed))``;
    identical seeds reproduce identical cycles on any platform.
    """
    if n_windows < 2:
        raise ValueError("n_windows must be at least 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    return DriveCycle(currents=rng.uniform(0.0, MAX_CRATE, n_windows + 1), seed=seed)


@dataclass
class Sample:
    """One 100 s training record (input state/demand and target state)."""

    c_n: np.ndarray
    c_p: np.ndarray
    V_t: float
    I_t: float
    I_t100: float
    fail: int
    c_n_next: np.ndarray
    c_p_next: np.ndarray
    V_t100: float


@dataclass
class CycleInfo:
    """Per-cycle bookkeeping stored in the dataset manifest."""

    index: int
    seed: int | None
    split: str
    start: int
    count: int
    failed: bool
    failure_window: int | None
    currents: list

    def to_dict(self) -> dict:
        return {"index": self.index, "seed": self.seed, "split": self.split,
                "start": self.start, "count": self.count, "failed": self.failed,
                "failure_window": self.failure_window, "currents": self.currents}

    @classmethod
    def from_dict(cls, d: dict) -> "CycleInfo":
        return cls(**d)


class Dataset:
    """Sample records plus per-cycle metadata and a manifest."""

    def __init__(self, records: np.ndarray, cycles: list, manifest: dict):
        self.records = records
        self.cycles = cycles
        self.manifest = manifest

    @property
    def n_samples(self) -> int:
        return self.records.shape[0]

    def split_indices(self, split: str) -> np.ndarray:
        idx = []
        for c in self.cycles:
            if c.split == split:
                idx.extend(range(c.start, c.start + c.count))
        return np.asarray(idx, dtype=int)

    def split_cycles(self, split: str) -> list:
        return [c for c in self.cycles if c.split == split]

    def sample(self, i: int) -> Sample:
        r = self.records[i]
        return Sample(
            c_n=r[_CN].reshape(20, 20), c_p=r[_CP].reshape(20, 20),
            V_t=float(r[_VT]), I_t=float(r[_IT]), I_t100=float(r[_IT100]),
            fail=int(r[_FAIL]), c_n_next=r[_CNT].reshape(20, 20),
            c_p_next=r[_CPT].reshape(20, 20), V_t100=float(r[_VT100]))

    def arrays(self, split: str) -> dict:
        """Columnar views for training/evaluation (float32 copies)."""
        idx = self.split_indices(split)
        r = self.records[idx]
        n = len(idx)
        return {
            "c_n": r[:, _CN].reshape(n, 20, 20),
            "c_p": r[:, _CP].reshape(n, 20, 20),
            "v_t": r[:, _VT].copy(),
            "i_t": r[:, _IT].copy(),
            "i_t100": r[:, _IT100].copy(),
            "fail": r[:, _FAIL].copy(),
            "c_n_next": r[:, _CNT].reshape(n, 20, 20),
            "c_p_next": r[:, _CPT].reshape(n, 20, 20),
            "v_t100": r[:, _VT100].copy(),
        }

    def validate(self):
        counts = self.manifest["counts"]
        realized = {"train": 0, "test": 0}
        for c in self.cycles:
            realized[c.split] += c.count
        if counts["train_samples"] != realized["train"] \
                or counts["test_samples"] != realized["test"] \
                or counts["total"] != self.n_samples:
            raise DataIntegrityError("manifest counts do not match the payload")
        pos = 0
        for c in self.cycles:
            if c.start != pos:
                raise DataIntegrityError(
                    f"cycle {c.index} starts at record {c.start}, expected {pos}")
            pos += c.count
        if pos != self.n_samples:
            raise DataIntegrityError("cycle table does not tile the payload")

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and np.array_equal(self.records, other.records)
                and self.manifest == other.manifest
                and [c.to_dict() for c in self.cycles]
                == [c.to_dict() for c in other.cycles])


def _records_from_outcome(outcome, currents) -> np.ndarray:
    """Turn a recorded trajectory into chained sample records."""
    states = [(s.c_n.astype("<f4"), s.c_p.astype("<f4"), np.float32(s.V))
              for s in outcome.trajectory]
    n = len(states) - 1
    rec = np.zeros((n, RECORD_LEN), dtype="<f4")
    cur32 = np.asarray(currents, dtype="<f4")
    for k in range(n):
        cn, cp, v = states[k]
        cnt, cpt, vt = states[k + 1]
        rec[k, _CN] = cn.reshape(-1)
        rec[k, _CP] = cp.reshape(-1)
        rec[k, _VT] = v
        rec[k, _IT] = cur32[k]
        rec[k, _IT100] = cur32[k + 1]
        rec[k, _CNT] = cnt.reshape(-1)
        rec[k, _CPT] = cpt.reshape(-1)
        rec[k, _VT100] = vt
    if outcome.failed:
        rec[n - 1, _FAIL] = 1.0
    return rec


def _simulate_one(args):
    params, index, seed, split, n_windows, dt_internal, crate = args
    try:
        if crate is None:
            cycle = random_cycle(seed, n_windows)
        else:
            cycle = DriveCycle(currents=np.full(n_windows + 1, float(crate)), seed=None)
        outcome = simulate_currents(params, cycle.currents, dt_internal=dt_internal)
        rec = _records_from_outcome(outcome, cycle.currents)
        info = CycleInfo(index=index, seed=seed, split=split, start=-1,
                         count=rec.shape[0], failed=outcome.failed,
                         failure_window=outcome.failure_window,
                         currents=[float(c) for c in cycle.currents])
        return index, rec, info, None
    except BattwinError as exc:
        return index, None, None, f"cycle {index} (seed {seed}): {exc}"


def _run_jobs(jobs, workers):
    if workers <= 1:
        return [_simulate_one(j) for j in jobs]
    with multiprocessing.Pool(processes=workers) as pool:
        return pool.map(_simulate_one, jobs, chunksize=1)


def _assemble(params, results, manifest_extra) -> Dataset:
    records = []
    cycles = []
    skipped = []
    pos = 0
    for index, rec, info, err in results:
        if err is not None:
            skipped.append(err)
            continue
        info.start = pos
        pos += info.count
        records.append(rec)
        cycles.append(info)
    all_rec = (np.concatenate(records, axis=0) if records
               else np.zeros((0, RECORD_LEN), dtype="<f4"))
    counts = {
        "train_samples": int(sum(c.count for c in cycles if c.split == "train")),
        "test_samples": int(sum(c.count for c in cycles if c.split == "test")),
        "total": int(all_rec.shape[0]),
    }
    config = dict(manifest_extra)
    config["params_digest"] = params.digest()
    digest = hashlib.sha256(
        json.dumps(config, sort_keys=True).encode()).hexdigest()
    manifest = {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "counts": counts,
        "skipped_cycles": len(skipped),
        "skipped": skipped,
        "config_digest": digest,
        "v_cut": float(params.V_cut),
        "v_oc_full": float(params.v_oc_full),
        "i_max": MAX_CRATE,
        **config,
    }
    ds = Dataset(records=all_rec, cycles=cycles, manifest=manifest)
    ds.validate()
    return ds


def build_dataset(params: ParameterSet, n_train_cycles: int, n_test_cycles: int,
                  base_seed: int, n_windows: int = 40, dt_internal: float = 1.0,
                  workers: int = 1) -> Dataset:
    """Simulate seeded random cycles and chop them into training records.

    Cycle ``i`` uses seed ``base_seed + i``; the first ``n_train_cycles``
    cycles form the train split, the rest the test split.  Output is
    bit-identical for any worker count.
    """
    if n_train_cycles < 1 or n_test_cycles < 1:
        raise ValueError("cycle counts must be positive")
    jobs = []
    for i in range(n_train_cycles + n_test_cycles):
        split = "train" if i < n_train_cycles else "test"
        jobs.append((params, i, base_seed + i, split, n_windows, dt_internal, None))
    results = _run_jobs(jobs, workers)
    return _assemble(params, results, {
        "kind": "drive_cycle",
        "base_seed": int(base_seed),
        "n_train_cycles": int(n_train_cycles),
        "n_test_cycles": int(n_test_cycles),
        "n_windows": int(n_windows),
        "dt_internal": float(dt_internal),
    })


def constant_current_dataset(params: ParameterSet, crates, repeats: int = 1,
                             dt_internal: float = 1.0, workers: int = 1) -> Dataset:
    """One full constant-current discharge per C-rate, as a train-only dataset.

    ``repeats`` duplicates each discharge's records, weighting them in
    training the way repeated experiments would.
    """
    crates = [float(c) for c in crates]
    for c in crates:
        if not 0.0 < c <= MAX_CRATE:
            raise ValueError(f"constant-current rate {c} outside (0, {MAX_CRATE}]")
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    jobs = []
    index = 0
    for _ in range(repeats):
        for c in crates:
            n_windows = int(np.ceil(1.5 * 3600.0 / (100.0 * c))) + 2
            jobs.append((params, index, None, "train", n_windows, dt_internal, c))
            index += 1
    results = _run_jobs(jobs, workers)
    return _assemble(params, results, {
        "kind": "constant_current",
        "crates": crates,
        "repeats": int(repeats),
        "dt_internal": float(dt_internal),
    })


# -- persistence ---------------------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    """Write ``manifest.json`` + ``samples.bin`` into the directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    manifest = dict(dataset.manifest)
    manifest["cycles"] = [c.to_dict() for c in dataset.cycles]
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(d / "samples.bin", "wb") as fh:
        fh.write(dataset.records.astype("<f4", copy=False).tobytes())


def read_dataset(path) -> Dataset:
    d = Path(path)
    mpath = d / "manifest.json"
    bpath = d / "samples.bin"
    if not mpath.exists():
        raise DataFormatError(f"missing manifest: {mpath}")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest is not valid JSON: {exc.msg}",
                              byte_offset=exc.pos) from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(
            f"unsupported dataset format version {manifest.get('format_version')}")
    cycles = [CycleInfo.from_dict(c) for c in manifest.pop("cycles", [])]
    payload = bpath.read_bytes() if bpath.exists() else b""
    total = manifest["counts"]["total"]
    expected = total * RECORD_BYTES
    if len(payload) != expected:
        raise DataFormatError(
            f"payload holds {len(payload)} bytes, expected {expected}",
            byte_offset=min(len(payload), expected))
    records = np.frombuffer(payload, dtype="<f4").reshape(total, RECORD_LEN).copy()
    ds = Dataset(records=records, cycles=cycles, manifest=manifest)
    try:
        ds.validate()
    except DataIntegrityError:
        raise
    return ds
