"""ESPCN and its elongation ESPCN-RN-N.

A network is a chain of ``K`` sections.  Section ``k`` is a stack of ``N``
RevNet blocks followed by ESPCN layer ``k`` (convolution plus optional ReLU).
With ``N = 0`` the chain is the plain ESPCN.  The last layer emits ``r^3 C``
channels; :func:`revprop.ops.shuffle` maps them to high resolution.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from revprop.graph import Eager, Graph, Node
from revprop.ops import ConvKernel
from revprop.revnet import BottleneckFn, RevNetBlock, he_kernel, revnet_apply
from revprop.tensor import ShapeError, Tensor

_EAGER = Eager()

MODES = ("inference", "naive", "efficient")


@dataclass(frozen=True)
class LayerSpec:
    kernel: int
    out_channels: int
    padding: int = 0
    relu: bool = True


@dataclass(frozen=True)
class NetworkSpec:
    input_channels: int = 6
    upsampling_rate: int = 2
    espcn_layers: tuple = (
        LayerSpec(3, 50, 0, True),
        LayerSpec(1, 100, 0, True),
        LayerSpec(3, 48, 0, False),
    )
    n_blocks: int = 4
    precision: int = 32
    input_extent: int = 11

    def __post_init__(self):
        layers = tuple(
            l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in self.espcn_layers
        )
        object.__setattr__(self, "espcn_layers", layers)
        self.validate()

    @classmethod
    def default(cls, n_blocks: int = 4, precision: int = 32) -> "NetworkSpec":
        return cls(n_blocks=n_blocks, precision=precision)

    @classmethod
    def toy(cls, n_blocks: int = 2, precision: int = 64, width: int = 8) -> "NetworkSpec":
        """Width-reduced ESPCN with the default topology and footprint."""
        return cls(
            input_channels=6,
            upsampling_rate=2,
            espcn_layers=(
                LayerSpec(3, width, 0, True),
                LayerSpec(1, 2 * width, 0, True),
                LayerSpec(3, 48, 0, False),
            ),
            n_blocks=n_blocks,
            precision=precision,
        )

    def validate(self) -> None:
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be non-negative")
        if self.precision not in (32, 64):
            raise ValueError(f"precision must be 32 or 64, got {self.precision}")
        if not self.espcn_layers:
            raise ValueError("at least one ESPCN layer is required")
        want = self.upsampling_rate**3 * self.input_channels
        if self.espcn_layers[-1].out_channels != want:
            raise ValueError(
                f"final layer must emit r^3*C = {want} channels, "
                f"got {self.espcn_layers[-1].out_channels}"
            )
        if self.n_blocks:
            for k, c in enumerate(self.stack_channels(), start=1):
                if c % 2:
                    raise ShapeError(
                        f"stack{k} sits on {c} channels; RevNet insertion needs an even count"
                    )
        self.section_shapes()

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def n_sections(self) -> int:
        return len(self.espcn_layers)

    def stack_channels(self) -> list[int]:
        chans = [self.input_channels]
        chans += [l.out_channels for l in self.espcn_layers[:-1]]
        return chans

    def input_shape(self, extent: Optional[int] = None) -> tuple:
        e = self.input_extent if extent is None else extent
        return (self.input_channels, e, e, e)

    def section_shapes(self, extent: Optional[int] = None) -> list[tuple]:
        """Shape entering each section, followed by the network output shape."""
        shape = self.input_shape(extent)
        shapes = [shape]
        for k, layer in enumerate(self.espcn_layers, start=1):
            spatial = tuple(s - layer.kernel + 1 + 2 * layer.padding for s in shape[1:])
            if any(s <= 0 for s in spatial):
                raise ShapeError(
                    f"layer{k}: input extents {shape[1:]} vanish under a "
                    f"{layer.kernel}^3 kernel with padding {layer.padding}"
                )
            shape = (layer.out_channels, *spatial)
            shapes.append(shape)
        return shapes

    def output_shape(self, extent: Optional[int] = None) -> tuple:
        return self.section_shapes(extent)[-1]

    def footprint_margin(self) -> int:
        """LR voxels lost per side between input patch and predicted footprint."""
        return sum((l.kernel - 1) // 2 - l.padding for l in self.espcn_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["espcn_layers"] = [asdict(l) for l in self.espcn_layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["espcn_layers"] = tuple(LayerSpec(**l) for l in d["espcn_layers"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class NetworkParams:
    """Ordered kernel registry, keyed by stable dotted paths."""

    kernels: "OrderedDict[str, ConvKernel]" = field(default_factory=OrderedDict)

    def __getitem__(self, path: str) -> ConvKernel:
        return self.kernels[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self.kernels)

    def __len__(self) -> int:
        return len(self.kernels)

    def items(self):
        return self.kernels.items()

    def paths(self) -> list[str]:
        return list(self.kernels)

    def layer(self, k: int) -> ConvKernel:
        return self.kernels[f"layer{k}"]

    def block(self, k: int, b: int) -> RevNetBlock:
        p = f"stack{k}.block{b}."
        fns = []
        for f in ("f1", "f2"):
            fns.append(BottleneckFn(
                self.kernels[p + f + ".reduce"],
                self.kernels[p + f + ".core"],
                self.kernels[p + f + ".expand"],
            ))
        return RevNetBlock(*fns)

    def n_elements(self) -> int:
        return sum(k.weights.size + k.bias.size for k in self.kernels.values())

    def replace(self, updates: dict) -> "NetworkParams":
        """Copy with the given paths swapped for new kernels."""
        new = OrderedDict(self.kernels)
        for path, kern in updates.items():
            if path not in new:
                raise KeyError(path)
            new[path] = kern
        return NetworkParams(new)


def block_path(k: int, b: int) -> str:
    return f"stack{k}.block{b}."


def build(spec: NetworkSpec, seed: int, identity_init: bool = True) -> NetworkParams:
    """He-initialised parameters, deterministic in ``(spec, seed)``.

    ESPCN layers draw from one stream and every RevNet block from its own
    seeded stream, so ``N = 0`` yields exactly the plain ESPCN weights and
    adding blocks leaves ESPCN weights untouched.  With ``identity_init`` the
    expand convolutions start at zero and every block is the identity.
    """
    spec.validate()
    dtype = spec.dtype
    layer_rng = np.random.default_rng([seed, 0])
    reg = OrderedDict()
    chans = spec.stack_channels()
    c_in = spec.input_channels
    for k, layer in enumerate(spec.espcn_layers, start=1):
        for b in range(1, spec.n_blocks + 1):
            rng = np.random.default_rng([seed, k, b])
            block = RevNetBlock.init(chans[k - 1], rng, dtype, zero_expand=identity_init)
            for name, kern in block.kernels().items():
                reg[block_path(k, b) + name] = kern
        reg[f"layer{k}"] = he_kernel(
            layer_rng, layer.out_channels, c_in, layer.kernel, layer.padding, dtype
        )
        c_in = layer.out_channels
    return NetworkParams(reg)


def apply_layer(ex, params: NetworkParams, spec: NetworkSpec, k: int, h):
    h = ex.conv(h, params.layer(k), f"layer{k}")
    if spec.espcn_layers[k - 1].relu:
        h = ex.relu(h)
    return h


def apply_stack(ex, params: NetworkParams, spec: NetworkSpec, k: int, h):
    for b in range(1, spec.n_blocks + 1):
        h = revnet_apply(ex, params.block(k, b), h, block_path(k, b))
    return h


@dataclass
class TrainingCheckpointSet:
    """Stack-boundary activations ``A^0 .. A^{K-1}``.

    ``activations[k]`` is the output of stack ``k+1`` (the input of ESPCN
    layer ``k+1``); nothing inside a stack is kept.
    """

    activations: list
    input_shape: tuple

    def __len__(self) -> int:
        return len(self.activations)

    def n_elements(self) -> int:
        return sum(a.size for a in self.activations)


@dataclass
class NaiveCache:
    """Full computational graph of one naive-mode forward pass."""

    graph: Graph
    input_node: Node
    output_node: Node


def _check_input(spec: NetworkSpec, x: Tensor) -> None:
    if x.shape[0] != spec.input_channels or len(x.shape) != 4:
        raise ShapeError(
            f"expected input (C={spec.input_channels}, X, Y, Z), got {x.shape}"
        )
    if x.precision != spec.precision:
        raise ShapeError(f"input is {x.precision}-bit, network is {spec.precision}-bit")
    if len(set(x.shape[1:])) != 1:
        raise ShapeError(f"input must be a cube, got {x.shape}")
    spec.section_shapes(x.shape[1])


def forward(params: NetworkParams, spec: NetworkSpec, x: Tensor, mode: str = "inference"):
    """Run the chain; returns ``(pre_shuffle_output, cache)``.

    ``cache`` is ``None`` for inference, a :class:`NaiveCache` holding the
    whole graph for ``"naive"``, or a :class:`TrainingCheckpointSet` for
    ``"efficient"``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    _check_input(spec, x)
    if mode == "naive":
        g = Graph()
        xn = g.input(x)
        h = xn
        for k in range(1, spec.n_sections + 1):
            h = apply_stack(g, params, spec, k, h)
            h = apply_layer(g, params, spec, k, h)
        return h.value, NaiveCache(g, xn, h)

    checkpoints = [] if mode == "efficient" else None
    h = x
    for k in range(1, spec.n_sections + 1):
        h = apply_stack(_EAGER, params, spec, k, h)
        if checkpoints is not None:
            checkpoints.append(h)
        h = apply_layer(_EAGER, params, spec, k, h)
    if checkpoints is None:
        return h, None
    return h, TrainingCheckpointSet(checkpoints, x.shape)


def predict(params: NetworkParams, spec: NetworkSpec, x: Tensor) -> Tensor:
    return forward(params, spec, x, "inference")[0]
