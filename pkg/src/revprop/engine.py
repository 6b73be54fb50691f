"""Naive and memory-efficient backpropagation, plus step profiling.

``backward_naive`` sweeps the full graph recorded by a naive-mode forward.
``backward_efficient`` walks the sections in reverse using only the cached
stack-boundary activations: each ESPCN layer is replayed on a one-layer
local graph from its cached input, and each RevNet stack is unwound block by
block, reconstructing activations from outputs.
"""

from __future__ import annotations

import json
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from revprop.graph import Graph
from revprop.loss import rmse_loss
from revprop.network import (
    NaiveCache,
    NetworkParams,
    NetworkSpec,
    TrainingCheckpointSet,
    apply_layer,
    block_path,
    forward,
)
from revprop.revnet import revnet_backward
from revprop.tensor import PARAMETER, Tensor, ledger_scope

__all__ = [
    "GradientSet",
    "TrainingCheckpointSet",
    "backward_naive",
    "backward_efficient",
    "profile_step",
    "ProfileResult",
]


@dataclass
class GradientSet:
    """Per-kernel ``(grad_weights, grad_bias)`` plus the gradient w.r.t. the input."""

    params: "OrderedDict[str, tuple[Tensor, Tensor]]"
    input: Optional[Tensor]

    def paths(self) -> list[str]:
        return list(self.params)

    def flat(self) -> np.ndarray:
        """All parameter gradients concatenated in registry order."""
        parts = []
        for gw, gb in self.params.values():
            parts += [gw.data, gb.data]
        return np.concatenate(parts)


def _ordered(params: NetworkParams, collected: dict) -> "OrderedDict":
    out = OrderedDict()
    for path, kern in params.items():
        got = collected.get(path)
        if got is None:
            dtype = kern.weights.dtype
            got = (
                Tensor.zeros(kern.weights.shape, dtype=dtype, kind=PARAMETER),
                Tensor.zeros(kern.bias.shape, dtype=dtype, kind=PARAMETER),
            )
        out[path] = got
    return out


def backward_naive(params: NetworkParams, spec: NetworkSpec, cache: NaiveCache,
                   grad_out: Tensor) -> GradientSet:
    """Reverse sweep over the graph of a naive-mode forward (consumes the graph)."""
    if not isinstance(cache, NaiveCache):
        raise ValueError("backward_naive needs the NaiveCache of a naive-mode forward")
    graph = cache.graph
    if not graph.nodes:
        raise ValueError("naive cache is empty or was already consumed")
    if grad_out.shape != cache.output_node.value.shape:
        raise ValueError(
            f"grad_out shape {grad_out.shape} != output shape {cache.output_node.value.shape}"
        )
    (gx,) = graph.backward([(cache.output_node, grad_out)], wrt=[cache.input_node])
    collected = graph.param_grads
    graph.param_grads = {}
    return GradientSet(_ordered(params, collected), gx)


def backward_efficient(
    params: NetworkParams,
    spec: NetworkSpec,
    checkpoints: TrainingCheckpointSet,
    grad_out: Tensor,
    on_reconstruct: Optional[Callable[[int, int, Tensor], None]] = None,
) -> GradientSet:
    """Checkpointed + reversible backward pass.

    Takes ownership of ``checkpoints``: each boundary activation is dropped
    from the set as soon as its section has been unwound.
    ``on_reconstruct(stack, block, x)`` (debugging aid) receives each block
    input as it is rebuilt from the block output.
    """
    if not isinstance(checkpoints, TrainingCheckpointSet):
        raise ValueError("backward_efficient needs the checkpoints of an efficient forward")
    if len(checkpoints) != spec.n_sections:
        raise ValueError(
            f"expected {spec.n_sections} checkpoints (one per stack), got {len(checkpoints)}"
        )
    collected: dict = {}
    g = grad_out
    for k in range(spec.n_sections, 0, -1):
        a = checkpoints.activations[k - 1]
        if a is None:
            raise ValueError("checkpoint set was already consumed")
        local = Graph()
        an = local.input(a)
        out = apply_layer(local, params, spec, k, an)
        (g,) = local.backward([(out, g)], wrt=[an])
        collected.update(local.param_grads)
        del local, an, out

        checkpoints.activations[k - 1] = None
        y = a
        del a
        for b in range(spec.n_blocks, 0, -1):
            y, g, pg = revnet_backward(params.block(k, b), y, g)
            prefix = block_path(k, b)
            for name, grads in pg.items():
                collected[prefix + name] = grads
            del pg
            if on_reconstruct is not None:
                on_reconstruct(k, b, y)
        del y
    return GradientSet(_ordered(params, collected), g)


@dataclass
class ProfileResult:
    mode: str
    n_blocks: int
    peak_elements: int
    fwd_ops: int
    bwd_ops: int
    wall_time_ms: float
    parameter_elements: int
    live_before: int
    live_after: int
    loss: float

    def to_json(self) -> str:
        keys = ("mode", "n_blocks", "peak_elements", "fwd_ops", "bwd_ops", "wall_time_ms")
        return json.dumps({k: getattr(self, k) for k in keys})


def training_step(params, spec, x, target, mode):
    """One forward + RMSE loss + backward. Returns ``(loss, GradientSet)``."""
    if mode == "naive":
        pred, cache = forward(params, spec, x, "naive")
        loss, grad = rmse_loss(pred, target)
        del pred
        grads = backward_naive(params, spec, cache, grad)
    elif mode == "efficient":
        pred, ckpt = forward(params, spec, x, "efficient")
        loss, grad = rmse_loss(pred, target)
        del pred
        grads = backward_efficient(params, spec, ckpt, grad)
    else:
        raise ValueError(f"training mode must be 'naive' or 'efficient', got {mode!r}")
    return loss, grads


def profile_step(params: NetworkParams, spec: NetworkSpec, x: Tensor, target: Tensor,
                 mode: str) -> ProfileResult:
    """Run one training step under a fresh ledger and report its counters.

    Only tensors allocated during the step are counted; ``x``, ``target`` and
    the parameters live outside the scope.
    """
    if target.shape != spec.output_shape(x.shape[1]):
        raise ValueError(
            f"target shape {target.shape} != network output {spec.output_shape(x.shape[1])}"
        )
    with ledger_scope() as ledger:
        before = ledger.snapshot().live_elements
        t0 = time.perf_counter()
        loss, grads = training_step(params, spec, x, target, mode)
        wall = (time.perf_counter() - t0) * 1e3
        del grads
        snap = ledger.snapshot()
    return ProfileResult(
        mode=mode,
        n_blocks=spec.n_blocks,
        peak_elements=snap.peak_elements,
        fwd_ops=snap.fwd_op_count,
        bwd_ops=snap.bwd_op_count,
        wall_time_ms=wall,
        parameter_elements=params.n_elements(),
        live_before=before,
        live_after=snap.live_elements,
        loss=loss,
    )
