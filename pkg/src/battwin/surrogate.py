"""The convolutional surrogate: forward pass, loss, training, checkpoints.

Architecture: the two 20x20 scaled-concentration grids are stacked as a
two-channel image and passed through three zero-padded ReLU convolutions
(7x7, 5x5, 3x3 kernels) with 3x3 max pooling after the first two, shrinking
the maps 20 -> 6 -> 2.  The flattened features are concatenated with the
normalized demand currents and measured voltage, then fed to two dense
heads: a regression head ending in 801 outputs (voltage plus both 20x20
target grids) and a sigmoid failure head ending in 1.

Normalization constants travel with the weights and are frozen into
checkpoints: currents divide by the training maximum (6C) and clamp to the
trained range, voltages map affinely from [V_cut, V_oc_full] to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .cycles import Dataset
from .errors import CheckpointError, DimensionError, TrainingError

CHECKPOINT_VERSION = 1
GRID = 20
N_OUT_REG = 801

_CONV_SPECS = (("conv1", 7), ("conv2", 5), ("conv3", 3))


@dataclass
class ClampCounter:
    """Counts inputs pulled back into the trained range."""

    grid: int = 0
    current: int = 0

    def add(self, grid=0, current=0):
        self.grid += int(grid)
        self.current += int(current)


@dataclass
class SurrogateWeights:
    """All learnable tensors plus architecture and normalization metadata."""

    tensors: dict
    channels: tuple = (16, 32, 64)
    reg_hidden: tuple = (256, 256)
    fail_hidden: tuple = (256, 64)
    norm: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def feature_len(self) -> int:
        # 20 -> (pool) 6 -> (pool) 2 with zero-padded convolutions
        return 2 * 2 * self.channels[2]

    def tensor_order(self) -> list:
        names = []
        for conv, _ in _CONV_SPECS:
            names += [f"{conv}_k", f"{conv}_b"]
        for i in range(1, 4):
            names += [f"reg{i}_w", f"reg{i}_b"]
        for i in range(1, 4):
            names += [f"fail{i}_w", f"fail{i}_b"]
        return names

    def expected_shapes(self) -> dict:
        c1, c2, c3 = self.channels
        n_in = self.feature_len + 3
        r1, r2 = self.reg_hidden
        f1, f2 = self.fail_hidden
        return {
            "conv1_k": (7, 7, 2, c1), "conv1_b": (c1,),
            "conv2_k": (5, 5, c1, c2), "conv2_b": (c2,),
            "conv3_k": (3, 3, c2, c3), "conv3_b": (c3,),
            "reg1_w": (r1, n_in), "reg1_b": (r1,),
            "reg2_w": (r2, r1), "reg2_b": (r2,),
            "reg3_w": (N_OUT_REG, r2), "reg3_b": (N_OUT_REG,),
            "fail1_w": (f1, n_in), "fail1_b": (f1,),
            "fail2_w": (f2, f1), "fail2_b": (f2,),
            "fail3_w": (1, f2), "fail3_b": (1,),
        }

    def validate(self):
        expected = self.expected_shapes()
        if set(self.tensors) != set(expected):
            raise DimensionError("weight tensor names do not match the architecture")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise DimensionError(
                    f"tensor '{name}' has shape {self.tensors[name].shape}, "
                    f"expected {shape}")
        if self.tensors["reg3_w"].shape[0] != N_OUT_REG:
            raise DimensionError("regression head must end in 801 outputs")
        if self.tensors["fail3_w"].shape[0] != 1:
            raise DimensionError("failure head must end in 1 output")
        for key in ("i_max", "v_lo", "v_hi"):
            if key not in self.norm:
                raise CheckpointError(f"missing normalization constant '{key}'")


def init_weights(seed: int, norm: dict, channels=(16, 32, 64),
                 reg_hidden=(256, 256), fail_hidden=(256, 64)) -> SurrogateWeights:
    """Fan-scaled uniform initialization, reproducible from the seed."""
    w = SurrogateWeights(tensors={}, channels=tuple(channels),
                         reg_hidden=tuple(reg_hidden),
                         fail_hidden=tuple(fail_hidden),
                         norm=dict(norm), seed=int(seed))
    rng = np.random.Generator(np.random.PCG64(seed))
    for name, shape in w.expected_shapes().items():
        if name.endswith("_b"):
            w.tensors[name] = np.zeros(shape)
        elif name.endswith("_k"):
            k, _, cin, cout = shape
            fan_in = k * k * cin
            fan_out = k * k * cout
            w.tensors[name] = nn.glorot_uniform(rng, shape, fan_in, fan_out)
        else:
            m, n = shape
            w.tensors[name] = nn.glorot_uniform(rng, shape, n, m)
    w.validate()
    return w


def _normalize_inputs(weights, c_n, c_p, i_t, i_t100, v_t, counter):
    x = np.stack([c_n, c_p], axis=-1)
    out_of_range = np.count_nonzero((x < 0.0) | (x > 1.0))
    if out_of_range:
        x = np.clip(x, 0.0, 1.0)
    i_max = weights.norm["i_max"]
    cur = np.stack([np.asarray(i_t, dtype=float) / i_max,
                    np.asarray(i_t100, dtype=float) / i_max], axis=-1)
    cur_clamped = np.count_nonzero((cur < 0.0) | (cur > 1.0))
    if cur_clamped:
        cur = np.clip(cur, 0.0, 1.0)
    if counter is not None:
        counter.add(grid=out_of_range, current=cur_clamped)
    v_lo = weights.norm["v_lo"]
    v_hi = weights.norm["v_hi"]
    v_norm = (np.asarray(v_t, dtype=float) - v_lo) / (v_hi - v_lo)
    return x, cur, v_norm


def _forward_core(weights, x, cur, v_norm, keep_ctx):
    t = weights.tensors
    backs = {}
    h, backs["c1"] = nn.conv2d(x, t["conv1_k"], t["conv1_b"], padding="same")
    h, backs["r1"] = nn.relu(h)
    h, backs["p1"] = nn.maxpool3(h)
    h, backs["c2"] = nn.conv2d(h, t["conv2_k"], t["conv2_b"], padding="same")
    h, backs["r2"] = nn.relu(h)
    h, backs["p2"] = nn.maxpool3(h)
    h, backs["c3"] = nn.conv2d(h, t["conv3_k"], t["conv3_b"], padding="same")
    h, backs["r3"] = nn.relu(h)
    n = x.shape[0]
    flat = h.reshape(n, -1)
    feats = np.concatenate([flat, cur, v_norm[:, None]], axis=1)

    g, backs["d1"] = nn.dense(feats, t["reg1_w"], t["reg1_b"])
    g, backs["dr1"] = nn.relu(g)
    g, backs["d2"] = nn.dense(g, t["reg2_w"], t["reg2_b"])
    g, backs["dr2"] = nn.relu(g)
    reg, backs["d3"] = nn.dense(g, t["reg3_w"], t["reg3_b"])

    f, backs["f1"] = nn.dense(feats, t["fail1_w"], t["fail1_b"])
    f, backs["fr1"] = nn.relu(f)
    f, backs["f2"] = nn.dense(f, t["fail2_w"], t["fail2_b"])
    f, backs["fr2"] = nn.relu(f)
    f, backs["f3"] = nn.dense(f, t["fail3_w"], t["fail3_b"])
    p_fail, backs["sig"] = nn.sigmoid(f[:, 0])
    return reg, p_fail, (backs, flat.shape) if keep_ctx else None


def forward_batch(weights: SurrogateWeights, c_n, c_p, i_t, i_t100, v_t,
                  counter: ClampCounter = None, keep_ctx: bool = False):
    """Batched prediction: (V_hat, c_n_hat, c_p_hat, p_fail[, ctx]).

    Grids and normalized currents outside the trained range are clamped (and
    counted when a ClampCounter is supplied).  Voltages are returned in
    volts; predicted grids are raw network outputs.
    """
    c_n = np.asarray(c_n, dtype=float)
    single = c_n.ndim == 2
    if single:
        c_n = c_n[None]
        c_p = np.asarray(c_p, dtype=float)[None]
        i_t, i_t100, v_t = [np.array([v], dtype=float) for v in (i_t, i_t100, v_t)]
    else:
        c_p = np.asarray(c_p, dtype=float)
    x, cur, v_norm = _normalize_inputs(weights, c_n, c_p, i_t, i_t100, v_t, counter)
    reg, p_fail, ctx = _forward_core(weights, x, cur, v_norm, keep_ctx)
    v_lo = weights.norm["v_lo"]
    v_hi = weights.norm["v_hi"]
    n = x.shape[0]
    v_hat = v_lo + reg[:, 0] * (v_hi - v_lo)
    cn_hat = reg[:, 1:401].reshape(n, GRID, GRID)
    cp_hat = reg[:, 401:801].reshape(n, GRID, GRID)
    if single:
        out = (float(v_hat[0]), cn_hat[0], cp_hat[0], float(p_fail[0]))
    else:
        out = (v_hat, cn_hat, cp_hat, p_fail)
    return out + ((reg, p_fail, ctx),) if keep_ctx else out


def forward(weights: SurrogateWeights, c_n, c_p, i_t, i_t100, v_t,
            counter: ClampCounter = None):
    """Single-sample prediction of the state 100 s ahead."""
    return forward_batch(weights, c_n, c_p, i_t, i_t100, v_t, counter=counter)


def loss(pred, target, w_volt: float = 10.0, w_fail: float = 1.0) -> dict:
    """Loss of one prediction tuple against a target Sample-like object.

    Components: mean squared error over the 800 grid cells, the voltage
    squared error scaled by ``w_volt``, and the failure-probability squared
    error; ``total`` is their sum.
    """
    v_hat, cn_hat, cp_hat, p_fail = pred
    conc = (np.sum((cn_hat - np.asarray(target.c_n_next, dtype=float)) ** 2)
            + np.sum((cp_hat - np.asarray(target.c_p_next, dtype=float)) ** 2)) / 800.0
    volt = w_volt * (v_hat - float(target.V_t100)) ** 2
    fail = w_fail * (p_fail - float(target.fail)) ** 2
    return {"total": float(conc + volt + fail), "conc": float(conc),
            "volt": float(volt), "fail": float(fail)}


def _loss_and_grads(weights, batch, w_volt, w_fail):
    """Mean-over-batch loss components and gradients for every tensor."""
    cn, cp, i_t, i_t100, v_t, cn_tgt, cp_tgt, v_tgt, f_tgt = batch
    n = cn.shape[0]
    v_hat, cn_hat, cp_hat, p_fail, (reg, _, (backs, _)) = forward_batch(
        weights, cn, cp, i_t, i_t100, v_t, keep_ctx=True)

    dcn = cn_hat - cn_tgt
    dcp = cp_hat - cp_tgt
    dv = v_hat - v_tgt
    dp = p_fail - f_tgt
    conc = float(np.sum(dcn ** 2) + np.sum(dcp ** 2)) / (800.0 * n)
    volt = float(w_volt * np.sum(dv ** 2)) / n
    fail = float(w_fail * np.sum(dp ** 2)) / n
    comps = {"total": conc + volt + fail, "conc": conc, "volt": volt, "fail": fail}

    v_scale = weights.norm["v_hi"] - weights.norm["v_lo"]
    g_reg = np.empty_like(reg)
    g_reg[:, 0] = 2.0 * w_volt * dv * v_scale / n
    g_reg[:, 1:401] = (2.0 / (800.0 * n)) * dcn.reshape(n, 400)
    g_reg[:, 401:801] = (2.0 / (800.0 * n)) * dcp.reshape(n, 400)
    g_p = 2.0 * w_fail * dp / n

    grads = {}
    gx = backs["sig"](g_p)[:, None]
    gx, grads["fail3_w"], grads["fail3_b"] = backs["f3"](gx)
    gx = backs["fr2"](gx)
    gx, grads["fail2_w"], grads["fail2_b"] = backs["f2"](gx)
    gx = backs["fr1"](gx)
    g_feats_f, grads["fail1_w"], grads["fail1_b"] = backs["f1"](gx)

    gx, grads["reg3_w"], grads["reg3_b"] = backs["d3"](g_reg)
    gx = backs["dr2"](gx)
    gx, grads["reg2_w"], grads["reg2_b"] = backs["d2"](gx)
    gx = backs["dr1"](gx)
    g_feats_r, grads["reg1_w"], grads["reg1_b"] = backs["d1"](gx)

    g_feats = g_feats_r + g_feats_f
    flat_len = weights.feature_len
    g_flat = g_feats[:, :flat_len].reshape(n, 2, 2, weights.channels[2])
    gx = backs["r3"](g_flat)
    gx, grads["conv3_k"], grads["conv3_b"] = backs["c3"](gx)
    gx = backs["p2"](gx)
    gx = backs["r2"](gx)
    gx, grads["conv2_k"], grads["conv2_b"] = backs["c2"](gx)
    gx = backs["p1"](gx)
    gx = backs["r1"](gx)
    _, grads["conv1_k"], grads["conv1_b"] = backs["c1"](gx)
    return comps, grads


@dataclass
class TrainConfig:
    """Mini-batch training hyperparameters."""

    batch_size: int = 64
    epochs: int = 5
    learning_rate: float = 1e-3
    lr_decay: float = 0.7
    w_volt: float = 10.0
    w_fail: float = 1.0
    seed: int = 0

    def validate(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be at least 1")
        if self.learning_rate <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("learning rate must be positive, decay in (0, 1]")
        if self.w_volt <= 0:
            raise ValueError("voltage loss weight must be positive")


def train(dataset: Dataset, config: TrainConfig):
    """Train on the dataset's train split; returns (weights, history).

    Shuffling, initialization, and therefore the final weights are fully
    determined by ``config.seed``.  The learning rate is multiplied by the
    decay factor after every epoch.
    """
    config.validate()
    arrays = dataset.arrays("train")
    n = arrays["v_t"].shape[0]
    if n == 0:
        raise TrainingError("train split is empty")
    norm = {"i_max": dataset.manifest["i_max"],
            "v_lo": dataset.manifest["v_cut"],
            "v_hi": dataset.manifest["v_oc_full"]}
    weights = init_weights(config.seed, norm)
    state = nn.init_adam(weights.tensors, alpha=config.learning_rate)
    rng = np.random.Generator(np.random.PCG64(config.seed))

    data = tuple(np.asarray(arrays[k], dtype=float) for k in
                 ("c_n", "c_p", "i_t", "i_t100", "v_t",
                  "c_n_next", "c_p_next", "v_t100", "fail"))
    history = []
    lr = config.learning_rate
    for epoch in range(config.epochs):
        state.alpha = lr
        perm = rng.permutation(n)
        sums = {"total": 0.0, "conc": 0.0, "volt": 0.0, "fail": 0.0}
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = tuple(a[idx] for a in data)
            comps, grads = _loss_and_grads(weights, batch, config.w_volt,
                                           config.w_fail)
            if not np.isfinite(comps["total"]):
                raise TrainingError("non-finite training loss", epoch=epoch,
                                    batch=n_batches, learning_rate=lr)
            nn.adam_step(weights.tensors, grads, state)
            for k in sums:
                sums[k] += comps[k] * len(idx)
            n_batches += 1
        history.append({"epoch": epoch,
                        "lr": lr,
                        "n_batches": n_batches,
                        **{k: sums[k] / n for k in sums}})
        lr *= config.lr_decay
    return weights, history


# -- checkpoint persistence ------------------------------------------------------


def save_checkpoint(weights: SurrogateWeights, path) -> None:
    """Single file: one JSON manifest line, then float32 tensors in order."""
    weights.validate()
    order = weights.tensor_order()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "channels": list(weights.channels),
        "reg_hidden": list(weights.reg_hidden),
        "fail_hidden": list(weights.fail_hidden),
        "norm": weights.norm,
        "seed": weights.seed,
        "tensors": [[name, list(weights.tensors[name].shape)] for name in order],
    }
    payload = b"".join(
        weights.tensors[name].astype("<f4").tobytes() for name in order)
    manifest["payload_bytes"] = len(payload)
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_checkpoint(path) -> SurrogateWeights:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError("checkpoint has no manifest line")
    try:
        manifest = json.loads(blob[:nl])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc.msg}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')}")
    weights = SurrogateWeights(
        tensors={}, channels=tuple(manifest["channels"]),
        reg_hidden=tuple(manifest["reg_hidden"]),
        fail_hidden=tuple(manifest["fail_hidden"]),
        norm=dict(manifest["norm"]), seed=int(manifest["seed"]))
    expected = weights.expected_shapes()
    payload = blob[nl + 1:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, manifest says "
            f"{manifest.get('payload_bytes')}")
    pos = 0
    for name, shape in manifest["tensors"]:
        shape = tuple(shape)
        if name not in expected or expected[name] != shape:
            raise CheckpointError(
                f"tensor '{name}' with shape {shape} does not fit the "
                "declared architecture")
        nbytes = int(np.prod(shape)) * 4
        if pos + nbytes > len(payload):
            raise CheckpointError("payload shorter than the declared tensors")
        weights.tensors[name] = np.frombuffer(
            payload[pos:pos + nbytes], dtype="<f4").astype(float).reshape(shape)
        pos += nbytes
    if pos != len(payload):
        raise CheckpointError("payload longer than the declared tensors")
    weights.validate()
    return weights
