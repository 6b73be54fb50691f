"""Synthetic IQT data: subjects, LR/HR pairs, patches, stitching, metrics.

Synthetic 6-channel smooth fields stand in for diffusion-tensor volumes.
Low-resolution volumes are block means of the high-resolution ones, so every
LR patch is exactly the block mean of the HR region it was cut against.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from revprop.ops import inverse_shuffle_array, shuffle_array

DEFAULT_PATCHES_PER_SUBJECT = 2250
VOLUME_MAGIC = b"RVOL"
VOLUME_VERSION = 1


@dataclass
class Volume:
    """Channel-first data ``(C, X, Y, Z)`` with a boolean brain mask ``(X, Y, Z)``."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be (C, X, Y, Z), got {self.data.shape}")
        if self.mask.shape != self.data.shape[1:]:
            raise ValueError(
                f"mask extents {self.mask.shape} != data extents {self.data.shape[1:]}"
            )
        self.mask = self.mask.astype(bool, copy=False)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def extents(self) -> tuple:
        return self.data.shape[1:]


def _gaussian_1d(n: int, centre: float, sigma: float) -> np.ndarray:
    t = np.arange(n, dtype=np.float64)
    return np.exp(-0.5 * ((t - centre) / sigma) ** 2)


def generate_synthetic_subject(seed: int, extent: int = 64, channels: int = 6,
                               n_bumps: int = 30) -> Volume:
    """Smooth random HR subject: per channel, a sum of random 3D Gaussian bumps.

    The mask is an ellipsoid centred in the grid with semi-axes between 30%
    and 40% of the extent, so it never touches the boundary.
    """
    rng = np.random.default_rng(seed)
    data = np.zeros((channels, extent, extent, extent))
    for c in range(channels):
        for _ in range(n_bumps):
            centre = rng.uniform(0, extent - 1, size=3)
            sigma = rng.uniform(extent / 12, extent / 5)
            amp = rng.normal()
            gx, gy, gz = (_gaussian_1d(extent, centre[i], sigma) for i in range(3))
            data[c] += amp * gx[:, None, None] * gy[None, :, None] * gz[None, None, :]
    axes = rng.uniform(0.3, 0.4, size=3) * extent
    mid = (extent - 1) / 2
    t = (np.arange(extent) - mid)
    rr = (t[:, None, None] / axes[0]) ** 2 + (t[None, :, None] / axes[1]) ** 2 \
        + (t[None, None, :] / axes[2]) ** 2
    return Volume(data, rr <= 1.0)


def downsample_blockmean(v: Volume, r: int = 2) -> Volume:
    """Replace each ``r^3`` block by its mean; a block is masked if any voxel is.

    The block sum is accumulated in a fixed (i, j, k) offset order.
    """
    ext = v.extents
    if any(e % r for e in ext):
        raise ValueError(f"extents {ext} are not divisible by r={r}")
    acc = None
    for i in range(r):
        for j in range(r):
            for k in range(r):
                part = v.data[:, i::r, j::r, k::r]
                acc = part.copy() if acc is None else acc + part
    data = acc / r**3
    m = v.mask.reshape(ext[0] // r, r, ext[1] // r, r, ext[2] // r, r)
    return Volume(data, m.any(axis=(1, 3, 5)))


@dataclass
class PatchPair:
    """LR input patch and its HR target in pre-shuffle layout."""

    lr: np.ndarray
    hr_target: np.ndarray
    subject: int
    corner: tuple
    margin: int = 2

    @property
    def footprint_corner(self) -> tuple:
        return tuple(c + self.margin for c in self.corner)


def valid_patch_corners(lr: Volume, patch: int = 11) -> np.ndarray:
    """All LR patch corners whose central voxel lies inside the mask."""
    half = patch // 2
    ext = lr.extents
    if any(e < patch for e in ext):
        return np.zeros((0, 3), dtype=int)
    centres = lr.mask[half:ext[0] - patch + half + 1,
                      half:ext[1] - patch + half + 1,
                      half:ext[2] - patch + half + 1]
    return np.argwhere(centres)


def cut_patch(lr: Volume, hr: Volume, corner, patch: int = 11, margin: int = 2,
              r: int = 2, subject: int = 0) -> PatchPair:
    a, b, c = corner
    lr_patch = lr.data[:, a:a + patch, b:b + patch, c:c + patch]
    fp = patch - 2 * margin
    ha, hb, hc = (r * (x + margin) for x in corner)
    hr_patch = hr.data[:, ha:ha + r * fp, hb:hb + r * fp, hc:hc + r * fp]
    return PatchPair(
        lr=np.ascontiguousarray(lr_patch),
        hr_target=inverse_shuffle_array(np.ascontiguousarray(hr_patch), r),
        subject=subject,
        corner=(int(a), int(b), int(c)),
        margin=margin,
    )


def extract_patches(lr: Volume, hr: Volume, count: int = DEFAULT_PATCHES_PER_SUBJECT,
                    seed: int = 0, patch: int = 11, margin: int = 2, r: int = 2,
                    subject: int = 0) -> list[PatchPair]:
    """Sample ``count`` distinct patches whose central LR voxel is masked."""
    if tuple(r * e for e in lr.extents) != hr.extents:
        raise ValueError(f"LR extents {lr.extents} do not match HR {hr.extents} at r={r}")
    corners = valid_patch_corners(lr, patch)
    if len(corners) < count:
        raise ValueError(
            f"requested {count} patches but only {len(corners)} valid positions exist"
        )
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(corners), size=count, replace=False)
    return [cut_patch(lr, hr, corners[i], patch, margin, r, subject) for i in pick]


def split_train_validation(pairs: Sequence, fraction: float = 0.8, seed: int = 0):
    """Deterministic shuffled split into ``(train, validation)``."""
    n = len(pairs)
    if n < 2:
        raise ValueError("need at least two patches to split")
    n_train = min(max(int(round(fraction * n)), 1), n - 1)
    order = np.random.default_rng(seed).permutation(n)
    return [pairs[i] for i in order[:n_train]], [pairs[i] for i in order[n_train:]]


@dataclass
class NormalizationStats:
    """Per-channel mean and standard deviation of LR inputs and HR targets.

    HR statistics are per HR channel (``C``); in pre-shuffle layout channel
    ``j`` belongs to HR channel ``j // r^3``.
    """

    lr_mean: np.ndarray
    lr_std: np.ndarray
    hr_mean: np.ndarray
    hr_std: np.ndarray
    r: int = 2

    def __post_init__(self):
        for name in ("lr_std", "hr_std"):
            s = np.asarray(getattr(self, name))
            if not np.all(s > 0):
                raise ValueError(f"degenerate channel: {name} has non-positive entries")

    def _hr(self):
        k = self.r**3
        return np.repeat(self.hr_mean, k), np.repeat(self.hr_std, k)

    def normalize_lr(self, a: np.ndarray) -> np.ndarray:
        return (a - self.lr_mean[:, None, None, None]) / self.lr_std[:, None, None, None]

    def normalize_hr_target(self, a: np.ndarray) -> np.ndarray:
        m, s = self._hr()
        return (a - m[:, None, None, None]) / s[:, None, None, None]

    def denormalize_hr_target(self, a: np.ndarray) -> np.ndarray:
        m, s = self._hr()
        return a * s[:, None, None, None] + m[:, None, None, None]

    def denormalize_lr(self, a: np.ndarray) -> np.ndarray:
        return a * self.lr_std[:, None, None, None] + self.lr_mean[:, None, None, None]

    def to_dict(self) -> dict:
        return {
            "lr_mean": self.lr_mean.tolist(), "lr_std": self.lr_std.tolist(),
            "hr_mean": self.hr_mean.tolist(), "hr_std": self.hr_std.tolist(),
            "r": self.r,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["lr_mean"]), np.array(d["lr_std"]),
                   np.array(d["hr_mean"]), np.array(d["hr_std"]), int(d["r"]))


def _channel_stats(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = tuple(i for i in range(stack.ndim) if i != 1)
    mean = stack.mean(axis=axes)
    var = ((stack - mean.reshape(1, -1, *([1] * (stack.ndim - 2)))) ** 2).mean(axis=axes)
    return mean, np.sqrt(var)


def compute_normalization(pairs: Sequence[PatchPair], r: int = 2) -> NormalizationStats:
    lr = np.stack([p.lr for p in pairs])
    hr = np.stack([shuffle_array(p.hr_target, r) for p in pairs])
    lm, ls = _channel_stats(lr)
    hm, hs = _channel_stats(hr)
    return NormalizationStats(lm, ls, hm, hs, r)


def normalize_pairs(pairs: Sequence[PatchPair], stats: NormalizationStats) -> list[PatchPair]:
    return [
        PatchPair(stats.normalize_lr(p.lr), stats.normalize_hr_target(p.hr_target),
                  p.subject, p.corner, p.margin)
        for p in pairs
    ]


def stack_pairs(pairs: Sequence[PatchPair], dtype=np.float64):
    """Stack into contiguous ``(n, ...)`` input and target arrays."""
    lr = np.ascontiguousarray(np.stack([p.lr for p in pairs]), dtype=dtype)
    hr = np.ascontiguousarray(np.stack([p.hr_target for p in pairs]), dtype=dtype)
    return lr, hr


def tile_corners(extent: int, size: int, stride: Optional[int] = None) -> list[int]:
    """Corners of windows of ``size`` covering ``[0, extent)``; the last is shifted in."""
    stride = size if stride is None else stride
    if extent < size:
        raise ValueError(f"extent {extent} smaller than tile {size}")
    corners = list(range(0, extent - size + 1, stride))
    if corners[-1] + size < extent:
        corners.append(extent - size)
    return corners


def stitch(predictions, extents, r: int = 2) -> np.ndarray:
    """Place HR patches at ``r`` times their LR footprint corner; average overlaps.

    ``predictions`` holds ``(lr_footprint_corner, hr_patch)`` items with
    ``hr_patch`` shaped ``(C, sx, sy, sz)``; ``extents`` is the HR grid.
    Voxels no patch touches are zero.
    """
    acc = None
    count = np.zeros(tuple(extents), dtype=np.int64)
    for corner, patch in predictions:
        patch = np.asarray(patch)
        if acc is None:
            acc = np.zeros((patch.shape[0], *extents), dtype=np.float64)
        lo = [r * c for c in corner]
        hi = [l + s for l, s in zip(lo, patch.shape[1:])]
        if any(l < 0 for l in lo) or any(h > e for h, e in zip(hi, extents)):
            raise ValueError(
                f"patch at HR {tuple(lo)} with size {patch.shape[1:]} exceeds extents {tuple(extents)}"
            )
        sl = tuple(slice(l, h) for l, h in zip(lo, hi))
        count[sl] += 1
        # running mean: exact wherever the overlapping patches agree
        region = acc[(slice(None), *sl)]
        region += (patch - region) / count[sl]
    if acc is None:
        raise ValueError("nothing to stitch")
    return acc


def interior_mask(mask: np.ndarray, margin: int = 2) -> np.ndarray:
    """Masked voxels whose whole ``(2m+1)^3`` neighbourhood is masked."""
    if margin == 0:
        return mask.copy()
    structure = np.ones((2 * margin + 1,) * 3, dtype=bool)
    return ndimage.binary_erosion(mask, structure=structure, border_value=0)


def evaluate_rmse(pred: np.ndarray, truth: np.ndarray, mask: np.ndarray,
                  margin: int = 2) -> dict:
    """RMSE over channels x voxels of the interior, exterior and whole mask.

    A region with no voxels reports ``None``.
    """
    if pred.shape != truth.shape or pred.shape[1:] != mask.shape:
        raise ValueError(f"extent mismatch: {pred.shape}, {truth.shape}, mask {mask.shape}")
    mask = mask.astype(bool)
    inner = interior_mask(mask, margin)
    outer = mask & ~inner
    sq = np.sum((pred.astype(np.float64) - truth) ** 2, axis=0)
    c = pred.shape[0]

    def region(m):
        n = int(m.sum())
        return None if n == 0 else float(np.sqrt(sq[m].sum() / (n * c)))

    return {"interior": region(inner), "exterior": region(outer), "total": region(mask)}


def write_volume(path, v: Volume, precision: int = 64) -> None:
    """Write ``v`` atomically in the flat RVOL format."""
    if precision not in (32, 64):
        raise ValueError("precision must be 32 or 64")
    dt = np.dtype("<f4" if precision == 32 else "<f8")
    c, x, y, z = v.data.shape
    buf = io.BytesIO()
    buf.write(VOLUME_MAGIC)
    buf.write(struct.pack("<IBIIII", VOLUME_VERSION, precision, c, x, y, z))
    buf.write(np.ascontiguousarray(v.data, dtype=dt).tobytes())
    buf.write(np.packbits(v.mask.reshape(-1), bitorder="little").tobytes())
    _atomic_write(path, buf.getvalue())


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if raw[:4] != VOLUME_MAGIC:
        raise ValueError(f"{path}: not an RVOL file")
    head = struct.calcsize("<IBIIII")
    version, precision, c, x, y, z = struct.unpack("<IBIIII", raw[4:4 + head])
    if version != VOLUME_VERSION:
        raise ValueError(f"{path}: unsupported RVOL version {version}")
    dt = np.dtype("<f4" if precision == 32 else "<f8")
    off = 4 + head
    n = c * x * y * z
    data = np.frombuffer(raw, dtype=dt, count=n, offset=off).astype(dt.newbyteorder("="))
    off += n * dt.itemsize
    nbits = x * y * z
    bits = np.frombuffer(raw, dtype=np.uint8, offset=off)
    mask = np.unpackbits(bits, count=nbits, bitorder="little").astype(bool)
    return Volume(data.reshape(c, x, y, z), mask.reshape(x, y, z))


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(payload)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()
