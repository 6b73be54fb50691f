"""Reversible residual blocks with additive coupling.

Forward::

    z   = x_a + F1(x_b)
    y_b = x_b + F2(z)
    y_a = z

Inverse::

    z   = y_a
    x_b = y_b - F2(z)
    x_a = z - F1(x_b)

``revnet_backward`` needs only the block output and its gradient: it rebuilds
the input while replaying each residual function on a short-lived local graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from revprop.graph import Eager, Graph
from revprop.ops import ConvKernel
from revprop.tensor import PARAMETER, ShapeError, Tensor, concat_channels, split_channels

_EAGER = Eager()


def bottleneck_width(c: int) -> int:
    return max(c // 2, 1)


def he_kernel(rng: np.random.Generator, c_out: int, c_in: int, k: int,
              padding: int, dtype=np.float64) -> ConvKernel:
    """Zero-mean normal weights with variance ``2 / (c_in * k^3)``; zero bias."""
    std = np.sqrt(2.0 / (c_in * k**3))
    w = rng.standard_normal((c_out, c_in, k, k, k)) * std
    return ConvKernel(
        Tensor.wrap(w.astype(dtype), PARAMETER),
        Tensor.zeros((c_out,), dtype=dtype, kind=PARAMETER),
        padding,
    )


def zero_kernel(c_out: int, c_in: int, k: int, padding: int, dtype=np.float64) -> ConvKernel:
    return ConvKernel(
        Tensor.zeros((c_out, c_in, k, k, k), dtype=dtype, kind=PARAMETER),
        Tensor.zeros((c_out,), dtype=dtype, kind=PARAMETER),
        padding,
    )


@dataclass(frozen=True)
class BottleneckFn:
    """1^3 reduce -> ReLU -> 3^3 same-padded core -> ReLU -> 1^3 expand."""

    reduce: ConvKernel
    core: ConvKernel
    expand: ConvKernel

    def __post_init__(self):
        c = self.reduce.in_channels
        m = self.reduce.out_channels
        if (self.core.in_channels, self.core.out_channels) != (m, m):
            raise ShapeError("bottleneck core must preserve the reduced width")
        if self.core.padding != (self.core.size - 1) // 2:
            raise ShapeError("bottleneck core must be same-padded")
        if (self.expand.in_channels, self.expand.out_channels) != (m, c):
            raise ShapeError("bottleneck expand must restore the input width")
        if self.reduce.size != 1 or self.expand.size != 1:
            raise ShapeError("bottleneck reduce/expand kernels must be 1x1x1")

    @property
    def channels(self) -> int:
        return self.reduce.in_channels

    @classmethod
    def init(cls, c: int, rng: np.random.Generator, dtype=np.float64,
             zero_expand: bool = True) -> "BottleneckFn":
        m = bottleneck_width(c)
        reduce = he_kernel(rng, m, c, 1, 0, dtype)
        core = he_kernel(rng, m, m, 3, 1, dtype)
        if zero_expand:
            expand = zero_kernel(c, m, 1, 0, dtype)
        else:
            expand = he_kernel(rng, c, m, 1, 0, dtype)
        return cls(reduce, core, expand)

    def kernels(self) -> dict[str, ConvKernel]:
        return {"reduce": self.reduce, "core": self.core, "expand": self.expand}


def bottleneck(ex, fn: BottleneckFn, x, prefix: str = ""):
    """Evaluate ``fn`` on executor ``ex`` (see :mod:`revprop.graph`)."""
    h = ex.relu(ex.conv(x, fn.reduce, prefix + "reduce"))
    h = ex.relu(ex.conv(h, fn.core, prefix + "core"))
    return ex.conv(h, fn.expand, prefix + "expand")


@dataclass(frozen=True)
class RevNetBlock:
    f1: BottleneckFn
    f2: BottleneckFn

    def __post_init__(self):
        if self.f1.channels != self.f2.channels:
            raise ShapeError("F1 and F2 must act on the same half-width")

    @property
    def channels(self) -> int:
        return 2 * self.f1.channels

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float64,
             zero_expand: bool = True) -> "RevNetBlock":
        if channels % 2:
            raise ShapeError(f"RevNet blocks need an even channel count, got {channels}")
        c = channels // 2
        return cls(BottleneckFn.init(c, rng, dtype, zero_expand),
                   BottleneckFn.init(c, rng, dtype, zero_expand))

    def kernels(self) -> dict[str, ConvKernel]:
        out = {}
        for name, fn in (("f1", self.f1), ("f2", self.f2)):
            for k, v in fn.kernels().items():
                out[f"{name}.{k}"] = v
        return out

    def _check(self, t: Tensor) -> None:
        if t.shape[0] != self.channels:
            raise ShapeError(
                f"block expects {self.channels} channels, got shape {t.shape}"
            )


def revnet_apply(ex, block: RevNetBlock, x, prefix: str = ""):
    """Forward coupling on an arbitrary executor."""
    xa, xb = ex.split(x)
    z = ex.add(xa, bottleneck(ex, block.f1, xb, prefix + "f1."))
    yb = ex.add(xb, bottleneck(ex, block.f2, z, prefix + "f2."))
    return ex.concat(z, yb)


def revnet_forward(block: RevNetBlock, x: Tensor) -> Tensor:
    block._check(x)
    return revnet_apply(_EAGER, block, x)


def revnet_invert(block: RevNetBlock, y: Tensor) -> Tensor:
    block._check(y)
    z, yb = split_channels(y)
    xb = yb - bottleneck(_EAGER, block.f2, z)
    del yb
    xa = z - bottleneck(_EAGER, block.f1, xb)
    return concat_channels(xa, xb)


def revnet_backward(block: RevNetBlock, y: Tensor, grad_y: Tensor):
    """Rebuild the block input from ``y`` and backpropagate ``grad_y``.

    Returns ``(x, grad_x, grad_params)`` where ``grad_params`` maps local
    kernel names (``"f1.reduce"`` ...) to ``(grad_weights, grad_bias)``.
    Each residual function is evaluated exactly once here: the same local
    evaluation serves both the reconstruction and the gradient.
    """
    if y.shape != grad_y.shape:
        raise ShapeError(f"shape mismatch: y {y.shape} vs grad_y {grad_y.shape}")
    block._check(y)
    z, yb = split_channels(y)
    ga, gb = split_channels(grad_y)
    grad_params = {}

    g = Graph()
    zn = g.input(z)
    f2 = bottleneck(g, block.f2, zn, "f2.")
    xb = yb - f2.value
    del yb
    (dz,) = g.backward([(f2, gb)], wrt=[zn])
    grad_params.update(g.param_grads)
    del g, zn, f2
    dz = ga + dz if dz is not None else ga
    del ga

    g = Graph()
    xbn = g.input(xb)
    f1 = bottleneck(g, block.f1, xbn, "f1.")
    xa = z - f1.value
    del z
    (dxb,) = g.backward([(f1, dz)], wrt=[xbn])
    grad_params.update(g.param_grads)
    del g, xbn, f1
    if dxb is not None:
        gb = gb + dxb
    del dxb

    x = concat_channels(xa, xb)
    del xa, xb
    grad_x = concat_channels(dz, gb)
    return x, grad_x, grad_params
