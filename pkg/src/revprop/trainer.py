"""Training protocol: Adam on RMSE loss, plateau LR decay, early stopping,
multi-seed model selection and model-file persistence."""

from __future__ import annotations

import io
import json
import math
import os
import struct
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from revprop.engine import GradientSet, backward_efficient, backward_naive
from revprop.loss import rmse_loss, rmse_loss_batch
from revprop.network import NetworkParams, NetworkSpec, build, forward
from revprop.ops import ConvKernel
from revprop.tensor import PARAMETER, Tensor

__all__ = [
    "OptimizerState",
    "PatchSet",
    "TrainProtocol",
    "TrainRunRecord",
    "TrainingDiverged",
    "adam_step",
    "rmse_loss",
    "train",
    "train_multi_seed",
    "read_model",
    "write_model",
]

MODEL_MAGIC = b"RVPM"
MODEL_VERSION = 1
N_SEEDS = 4


class TrainingDiverged(RuntimeError):
    def __init__(self, record: "TrainRunRecord"):
        super().__init__(f"training diverged at epoch {len(record.epochs)} (seed {record.seed})")
        self.record = record


@dataclass
class OptimizerState:
    """Adam moments keyed ``"<path>.weight"`` / ``"<path>.bias"``."""

    m: "OrderedDict[str, Tensor]"
    v: "OrderedDict[str, Tensor]"
    step: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: NetworkParams, lr: float = 1e-4, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "OptimizerState":
        m, v = OrderedDict(), OrderedDict()
        for key, t in _named_tensors(params):
            m[key] = Tensor.zeros(t.shape, dtype=t.dtype, kind=PARAMETER)
            v[key] = Tensor.zeros(t.shape, dtype=t.dtype, kind=PARAMETER)
        return cls(m, v, 0, lr, beta1, beta2, eps)


def _named_tensors(params: NetworkParams):
    for path, k in params.items():
        yield path + ".weight", k.weights
        yield path + ".bias", k.bias


def _named_grads(grads: GradientSet):
    for path, (gw, gb) in grads.params.items():
        yield path + ".weight", gw
        yield path + ".bias", gb


def adam_step(state: OptimizerState, params: NetworkParams, grads: GradientSet):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if list(grads.params) != params.paths() or list(state.m) != [k for k, _ in _named_tensors(params)]:
        raise ValueError("parameter, gradient and optimizer registries are not aligned")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_vals = OrderedDict(), OrderedDict(), {}
    for (key, p), (_, g) in zip(_named_tensors(params), _named_grads(grads)):
        dt = p.dtype.type
        ga = g.numpy()
        m = dt(b1) * state.m[key].numpy() + dt(1 - b1) * ga
        v = dt(b2) * state.v[key].numpy() + dt(1 - b2) * ga * ga
        upd = dt(state.lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        new_vals[key] = Tensor.wrap((p.numpy() - upd).astype(p.dtype, copy=False), PARAMETER)
        new_m[key] = Tensor.wrap(m.astype(p.dtype, copy=False), PARAMETER)
        new_v[key] = Tensor.wrap(v.astype(p.dtype, copy=False), PARAMETER)
    kernels = OrderedDict(
        (path, ConvKernel(new_vals[path + ".weight"], new_vals[path + ".bias"], k.padding))
        for path, k in params.items()
    )
    new_state = OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps)
    return NetworkParams(kernels), new_state


def sum_gradients(sets: Sequence[GradientSet]) -> GradientSet:
    out = OrderedDict()
    for path in sets[0].params:
        gw, gb = sets[0].params[path]
        for s in sets[1:]:
            gw = gw + s.params[path][0]
            gb = gb + s.params[path][1]
        out[path] = (gw, gb)
    return GradientSet(out, None)


@dataclass
class TrainProtocol:
    max_epochs: int = 100
    batch_size: int = 12
    learning_rate: float = 1e-4
    lr_decay_patience: int = 5
    lr_decay_factor: float = 0.5
    lr_floor: float = 1e-6
    early_stop_patience: int = 10
    backprop: str = "efficient"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class PatchSet:
    """Stacked normalised patches: inputs ``(n, C, ...)`` and pre-shuffle targets."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    lr: float
    wall_time_s: float


@dataclass
class TrainRunRecord:
    seed: int
    epochs: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    best_val_rmse: float = math.inf

    def to_jsonl(self, wall_time: bool = True) -> str:
        """One JSON object per epoch; ``wall_time=False`` keeps only deterministic fields."""
        out = []
        for e in self.epochs:
            d = asdict(e)
            if not wall_time:
                del d["wall_time_s"]
            out.append(json.dumps(d, sort_keys=True) + "\n")
        return "".join(out)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "stop_reason": self.stop_reason,
            "best_epoch": self.best_epoch,
            "best_val_rmse": self.best_val_rmse,
            "n_epochs": len(self.epochs),
        }


def _batch_grads(params, spec, xs, ts, mode):
    if mode == "naive":
        caches, preds = [], []
        for x in xs:
            pred, cache = forward(params, spec, x, "naive")
            preds.append(pred)
            caches.append(cache)
        loss, gs = rmse_loss_batch(preds, ts)
        del preds
        sets = [backward_naive(params, spec, c, g) for c, g in zip(caches, gs)]
    elif mode == "efficient":
        ckpts, preds = [], []
        for x in xs:
            pred, ck = forward(params, spec, x, "efficient")
            preds.append(pred)
            ckpts.append(ck)
        loss, gs = rmse_loss_batch(preds, ts)
        del preds
        sets = [backward_efficient(params, spec, c, g) for c, g in zip(ckpts, gs)]
    else:
        raise ValueError(f"backprop must be 'naive' or 'efficient', got {mode!r}")
    return loss, sum_gradients(sets)


def validation_rmse(params: NetworkParams, spec: NetworkSpec, data: PatchSet) -> float:
    """RMSE over every element of every validation patch (inference mode)."""
    sq = 0.0
    n = 0
    dtype = spec.dtype
    for x, t in zip(data.inputs, data.targets):
        pred = forward(params, spec, Tensor(x, dtype=dtype), "inference")[0].numpy()
        d = pred.astype(np.float64) - t
        sq += float(np.sum(d * d))
        n += d.size
    return math.sqrt(sq / n)


def train(spec: NetworkSpec, train_set: PatchSet, val_set: PatchSet,
          protocol: TrainProtocol, seed: int = 0,
          params: Optional[NetworkParams] = None):
    """Train one model; returns ``(record, best_params)``.

    The returned parameters are those of the epoch with the lowest validation
    RMSE.  Raises :class:`TrainingDiverged` if the loss becomes non-finite.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    dtype = spec.dtype
    if params is None:
        params = build(spec, seed)
    state = OptimizerState.init(params, protocol.learning_rate, protocol.beta1,
                                protocol.beta2, protocol.eps)
    record = TrainRunRecord(seed=seed)
    best_params = params
    since_best = 0
    since_decay = 0
    for epoch in range(1, protocol.max_epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(len(train_set))
        losses = []
        for start in range(0, len(order), protocol.batch_size):
            idx = order[start:start + protocol.batch_size]
            xs = [Tensor(train_set.inputs[i], dtype=dtype) for i in idx]
            ts = [Tensor(train_set.targets[i], dtype=dtype) for i in idx]
            loss, grads = _batch_grads(params, spec, xs, ts, protocol.backprop)
            if not math.isfinite(loss):
                record.stop_reason = "diverged"
                raise TrainingDiverged(record)
            params, state = adam_step(state, params, grads)
            losses.append(loss)
        val = validation_rmse(params, spec, val_set)
        record.epochs.append(EpochRecord(
            epoch, float(np.mean(losses)), val, state.lr, time.perf_counter() - t0
        ))
        if not math.isfinite(val):
            record.stop_reason = "diverged"
            raise TrainingDiverged(record)
        if val < record.best_val_rmse:
            record.best_val_rmse = val
            record.best_epoch = epoch
            best_params = params
            since_best = 0
            since_decay = 0
        else:
            since_best += 1
            since_decay += 1
        if since_best >= protocol.early_stop_patience:
            record.stop_reason = "early_stop"
            break
        if since_decay >= protocol.lr_decay_patience:
            state.lr = max(state.lr * protocol.lr_decay_factor, protocol.lr_floor)
            since_decay = 0
    else:
        record.stop_reason = "max_epochs"
    return record, best_params


def train_multi_seed(spec: NetworkSpec, train_set: PatchSet, val_set: PatchSet,
                     protocol: TrainProtocol, seeds: Sequence[int], threads: int = 1):
    """Train one model per seed; returns ``(records, best_index, best_params)``.

    Ties in validation RMSE go to the earliest seed.
    """
    def run(s):
        return train(spec, train_set, val_set, protocol, seed=s)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    records = [r for r, _ in results]
    best = int(np.argmin([r.best_val_rmse for r in records]))
    return records, best, results[best][1]


def write_model(path, spec: NetworkSpec, params: NetworkParams) -> None:
    """Serialise ``spec`` and every registry tensor (weights then bias per kernel)."""
    dt = np.dtype("<f4" if spec.precision == 32 else "<f8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    spec_bytes = spec.to_json().encode("utf-8")
    buf.write(struct.pack("<II", MODEL_VERSION, len(spec_bytes)))
    buf.write(spec_bytes)
    entries = list(_named_tensors(params))
    buf.write(struct.pack("<I", len(entries)))
    for name, t in entries:
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", len(t.shape)))
        buf.write(struct.pack(f"<{len(t.shape)}I", *t.shape))
        buf.write(np.ascontiguousarray(t.numpy(), dtype=dt).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def read_model(path):
    """Inverse of :func:`write_model`; returns ``(spec, params)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not an RVPM model file")
    off = 4
    version, nspec = struct.unpack_from("<II", raw, off)
    off += 8
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    spec = NetworkSpec.from_dict(json.loads(raw[off:off + nspec].decode("utf-8")))
    off += nspec
    dt = np.dtype("<f4" if spec.precision == 32 else "<f8")
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=off).astype(spec.dtype)
        off += n * dt.itemsize
        tensors[name] = Tensor.wrap(arr.reshape(shape), PARAMETER)
    template = build(spec, 0)
    kernels = OrderedDict()
    for p, k in template.items():
        try:
            kernels[p] = ConvKernel(tensors[p + ".weight"], tensors[p + ".bias"], k.padding)
        except KeyError as exc:
            raise ValueError(f"{path}: missing tensor {exc.args[0]}") from None
    return spec, NetworkParams(kernels)
