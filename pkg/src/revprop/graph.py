"""Two interchangeable executors for network code.

Model code (bottlenecks, RevNet blocks, ESPCN layers) is written once against
a tiny executor interface: ``conv``, ``relu``, ``add``, ``sub``, ``split``,
``concat``.  :class:`Eager` evaluates directly on tensors and keeps nothing;
:class:`Graph` records a tape of nodes holding every intermediate value so a
reverse sweep can produce gradients.  Both perform identical arithmetic, so
their outputs are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Optional

from revprop import ops
from revprop.ops import ConvKernel
from revprop.tensor import Tensor, concat_channels, split_channels


class Eager:
    """Graph-free evaluation; intermediates die as soon as they are unreferenced."""

    def conv(self, x: Tensor, kernel: ConvKernel, path: str) -> Tensor:
        return ops.conv3d_forward(x, kernel)

    def relu(self, x: Tensor) -> Tensor:
        return ops.relu_forward(x)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return a + b

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return a - b

    def split(self, x: Tensor):
        return split_channels(x)

    def concat(self, a: Tensor, b: Tensor) -> Tensor:
        return concat_channels(a, b)

    def value(self, x: Tensor) -> Tensor:
        return x


class Node:
    __slots__ = ("value", "parents", "backward")

    def __init__(self, value: Tensor, parents=(), backward: Optional[Callable] = None):
        self.value = value
        self.parents = parents
        self.backward = backward


class Graph:
    """Tape-based reverse-mode graph over :class:`Node` handles.

    Parameter gradients are accumulated per kernel path into
    ``param_grads[path] = (grad_weights, grad_bias)``.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.param_grads: dict[str, tuple[Tensor, Tensor]] = {}

    def _push(self, value, parents=(), backward=None) -> Node:
        node = Node(value, parents, backward)
        self.nodes.append(node)
        return node

    def input(self, value: Tensor) -> Node:
        return self._push(value)

    def value(self, node: Node) -> Tensor:
        return node.value

    def conv(self, x: Node, kernel: ConvKernel, path: str) -> Node:
        out = ops.conv3d_forward(x.value, kernel)
        xv = x.value

        def backward(g):
            gx, gw, gb = ops.conv3d_backward(xv, kernel, g)
            self._accumulate_param(path, gw, gb)
            return (gx,)

        return self._push(out, (x,), backward)

    def relu(self, x: Node) -> Node:
        xv = x.value
        return self._push(
            ops.relu_forward(xv), (x,), lambda g: (ops.relu_backward(xv, g),)
        )

    def add(self, a: Node, b: Node) -> Node:
        return self._push(a.value + b.value, (a, b), lambda g: (g, g))

    def sub(self, a: Node, b: Node) -> Node:
        return self._push(a.value - b.value, (a, b), lambda g: (g, g * -1.0))

    def split(self, x: Node):
        lo, hi = split_channels(x.value)
        # Each half routes its gradient into the matching channel range; the
        # missing half is treated as zero.
        a = self._push(lo, (x,), lambda g: (concat_channels(g, _zeros_like(g)),))
        b = self._push(hi, (x,), lambda g: (concat_channels(_zeros_like(g), g),))
        return a, b

    def concat(self, a: Node, b: Node) -> Node:
        return self._push(
            concat_channels(a.value, b.value), (a, b), lambda g: split_channels(g)
        )

    def _accumulate_param(self, path: str, gw: Tensor, gb: Tensor) -> None:
        prev = self.param_grads.get(path)
        if prev is None:
            self.param_grads[path] = (gw, gb)
        else:
            self.param_grads[path] = (prev[0] + gw, prev[1] + gb)

    def backward(self, seeds, wrt=()) -> list[Optional[Tensor]]:
        """Reverse sweep from ``seeds`` (pairs of node and upstream gradient).

        Returns the accumulated gradient for each node in ``wrt`` (``None`` if
        no gradient reached it).  Node values and closures are dropped as the
        sweep passes them, so the graph is spent afterwards.
        """
        grads: dict[int, Tensor] = {}
        for node, g in seeds:
            _accumulate(grads, node, g)
        wanted = {id(n) for n in wrt}
        kept: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is not None:
                if id(node) in wanted:
                    kept[id(node)] = g
                if node.backward is not None:
                    for parent, pg in zip(node.parents, node.backward(g)):
                        _accumulate(grads, parent, pg)
                del g
            node.value = None
            node.backward = None
            node.parents = ()
        self.nodes = []
        return [kept.get(id(n)) for n in wrt]


def _zeros_like(t: Tensor) -> Tensor:
    return Tensor.zeros(t.shape, dtype=t.dtype)


def _accumulate(grads: dict, node: Node, g: Tensor) -> None:
    key = id(node)
    prev = grads.get(key)
    grads[key] = g if prev is None else prev + g
