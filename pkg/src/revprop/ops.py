"""Primitive operators with hand-written backward passes.

3D convolution (cross-correlation, stride 1, zero padding), ReLU, and the
sub-pixel shuffle / inverse shuffle between ``(r^3 C, X, Y, Z)`` and
``(C, rX, rY, rZ)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from revprop.tensor import PARAMETER, ShapeError, Tensor, current_ledger


@dataclass(frozen=True)
class ConvKernel:
    """Weights ``(C_out, C_in, k, k, k)``, bias ``(C_out,)`` and a padding width."""

    weights: Tensor
    bias: Tensor
    padding: int = 0

    def __post_init__(self):
        w = self.weights.shape
        if len(w) != 5 or w[2] != w[3] or w[3] != w[4]:
            raise ShapeError(f"kernel weights must be (C_out, C_in, k, k, k), got {w}")
        if w[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {w[2]}")
        if self.bias.shape != (w[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match C_out={w[0]}")
        if self.padding < 0:
            raise ShapeError("padding must be non-negative")

    @property
    def size(self) -> int:
        return self.weights.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def from_arrays(cls, weights, bias, padding: int = 0) -> "ConvKernel":
        return cls(
            Tensor(weights, kind=PARAMETER),
            Tensor(bias, kind=PARAMETER),
            padding,
        )

    def output_shape(self, in_shape) -> tuple:
        c, *spatial = in_shape
        if c != self.in_channels:
            raise ShapeError(
                f"input has {c} channels, kernel expects {self.in_channels}"
            )
        k, p = self.size, self.padding
        out = tuple(s - k + 1 + 2 * p for s in spatial)
        if any(s <= 0 for s in out):
            raise ShapeError(
                f"input spatial extents {tuple(spatial)} too small for k={k}, padding={p}"
            )
        return (self.out_channels, *out)


@numba.njit(cache=True)
def _im2col(x, k, p):
    """``(C, X, Y, Z)`` -> ``(C*k^3, X'*Y'*Z')`` patch matrix with implicit zero padding."""
    c, X, Y, Z = x.shape
    ox, oy, oz = X + 2 * p - k + 1, Y + 2 * p - k + 1, Z + 2 * p - k + 1
    cols = np.zeros((c * k * k * k, ox * oy * oz), dtype=x.dtype)
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    row = ((ch * k + i) * k + j) * k + l
                    for a in range(ox):
                        u = a + i - p
                        if u < 0 or u >= X:
                            continue
                        for b in range(oy):
                            v = b + j - p
                            if v < 0 or v >= Y:
                                continue
                            base = (a * oy + b) * oz
                            for d in range(oz):
                                w = d + l - p
                                if 0 <= w < Z:
                                    cols[row, base + d] = x[ch, u, v, w]
    return cols


@numba.njit(cache=True)
def _col2im(cols, c, k, p, X, Y, Z):
    """Adjoint of :func:`_im2col`: scatter-add columns back onto the unpadded grid."""
    ox, oy, oz = X + 2 * p - k + 1, Y + 2 * p - k + 1, Z + 2 * p - k + 1
    grid = np.zeros((c, X, Y, Z), dtype=cols.dtype)
    for ch in range(c):
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    row = ((ch * k + i) * k + j) * k + l
                    for a in range(ox):
                        u = a + i - p
                        if u < 0 or u >= X:
                            continue
                        for b in range(oy):
                            v = b + j - p
                            if v < 0 or v >= Y:
                                continue
                            base = (a * oy + b) * oz
                            for d in range(oz):
                                w = d + l - p
                                if 0 <= w < Z:
                                    grid[ch, u, v, w] += cols[row, base + d]
    return grid


def conv3d_forward(x: Tensor, kernel: ConvKernel) -> Tensor:
    out_shape = kernel.output_shape(x.shape)
    current_ledger().count_op("fwd")
    k, p = kernel.size, kernel.padding
    xa = x.numpy()
    w = kernel.weights.numpy()
    cols = xa.reshape(xa.shape[0], -1) if k == 1 and p == 0 else _im2col(xa, k, p)
    out = w.reshape(w.shape[0], -1) @ cols
    out += kernel.bias.numpy()[:, None]
    return Tensor.wrap(out.reshape(out_shape).astype(x.dtype, copy=False))


def conv3d_backward(
    x: Tensor, kernel: ConvKernel, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    """Gradients of ``conv3d_forward(x, kernel)`` w.r.t. input, weights and bias."""
    expected = kernel.output_shape(x.shape)
    if grad_out.shape != expected:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match forward output {expected}"
        )
    current_ledger().count_op("bwd")
    k, p = kernel.size, kernel.padding
    w = kernel.weights.numpy()
    c_out, c_in = w.shape[:2]
    g2 = grad_out.numpy().reshape(c_out, -1)
    xa = x.numpy()
    w2 = w.reshape(c_out, -1)

    direct = k == 1 and p == 0
    cols = xa.reshape(c_in, -1) if direct else _im2col(xa, k, p)
    grad_w = (g2 @ cols.T).reshape(w.shape)
    grad_b = g2.sum(axis=1)
    grad_cols = w2.T @ g2
    if direct:
        grad_x = grad_cols.reshape(xa.shape)
    else:
        grad_x = _col2im(np.ascontiguousarray(grad_cols), c_in, k, p, *xa.shape[1:])
    dtype = x.dtype
    return (
        Tensor.wrap(np.ascontiguousarray(grad_x, dtype=dtype)),
        Tensor.wrap(np.ascontiguousarray(grad_w, dtype=dtype), PARAMETER),
        Tensor.wrap(np.ascontiguousarray(grad_b, dtype=dtype), PARAMETER),
    )


def relu_forward(x: Tensor) -> Tensor:
    return Tensor.wrap(np.maximum(x.numpy(), x.dtype.type(0)))


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    """Mask ``grad_out`` where ``x <= 0`` (subgradient 0 at the kink)."""
    if x.shape != grad_out.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {grad_out.shape}")
    g = grad_out.numpy()
    return Tensor.wrap(np.where(x.numpy() > 0, g, g.dtype.type(0)))


def shuffle(x: Tensor, r: int) -> Tensor:
    """Sub-pixel shuffle ``(r^3 C, X, Y, Z) -> (C, rX, rY, rZ)``.

    ``out[c, x, y, z] = in[c*r^3 + (x%r)*r^2 + (y%r)*r + z%r, x//r, y//r, z//r]``
    """
    cin, X, Y, Z = x.shape
    if cin % r**3:
        raise ShapeError(f"channel count {cin} not divisible by r^3={r**3}")
    return Tensor.wrap(shuffle_array(x.numpy(), r))


def inverse_shuffle(y: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`shuffle`."""
    c, X, Y, Z = y.shape
    if X % r or Y % r or Z % r:
        raise ShapeError(f"spatial extents {(X, Y, Z)} not divisible by r={r}")
    return Tensor.wrap(inverse_shuffle_array(y.numpy(), r))


def inverse_shuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    c, X, Y, Z = a.shape
    b = a.reshape(c, X // r, r, Y // r, r, Z // r, r).transpose(0, 2, 4, 6, 1, 3, 5)
    return b.reshape(c * r**3, X // r, Y // r, Z // r).copy()


def shuffle_array(a: np.ndarray, r: int) -> np.ndarray:
    cin, X, Y, Z = a.shape
    c = cin // r**3
    b = a.reshape(c, r, r, r, X, Y, Z).transpose(0, 4, 1, 5, 2, 6, 3)
    return b.reshape(c, r * X, r * Y, r * Z).copy()


# shuffle is a permutation, so its adjoint is its inverse.
shuffle_backward = inverse_shuffle
inverse_shuffle_backward = shuffle
