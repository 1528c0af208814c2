"""Dense tensors with reverse-mode differentiation.

Each op returns a :class:`Tensor` that remembers its parents and a closure
computing the parents' gradients from its own.  :class:`Graph` orders the
recorded nodes topologically from a scalar output and runs the closures in
reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


_KINKS: list | None = None


def record_kinks(*arrays: np.ndarray) -> None:
    """Log the discrete branch choices of a non-smooth op (masks, argmaxes).

    Only active inside :func:`kink_recording`; the gradient checker uses the
    log to detect stencils that straddle a kink.
    """
    if _KINKS is not None:
        for a in arrays:
            _KINKS.append(hash(np.ascontiguousarray(a).tobytes()))


class kink_recording:
    def __enter__(self) -> list:
        global _KINKS
        self._prev = _KINKS
        _KINKS = []
        return _KINKS

    def __exit__(self, *exc):
        global _KINKS
        _KINKS = self._prev
        return False


class NonFiniteError(FloatingPointError):
    """An activation or gradient became NaN / inf."""


class ShapeError(ValueError):
    """Incompatible operand shapes; the message names the offending node."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (),
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
                 op: str = "leaf", name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"


def parameter(data, name: str) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap an op result; gradient bookkeeping only when some parent needs it."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite activation produced by {op}")
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward_fn=backward_fn if needs else None, op=op)


class Graph:
    """Topologically ordered view of every node that feeds ``output``."""

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.requires_grad and n.backward_fn is None]

    def backward(self, check_finite: bool = True):
        if self.output.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.output.shape}")
        grads: dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if check_finite and not np.all(np.isfinite(pg)):
                    raise NonFiniteError(f"non-finite gradient flowing out of {node.op}")
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def backward(output: Tensor) -> Graph:
    graph = Graph(output)
    graph.backward()
    return graph


def forward_backward(loss_fn: Callable[..., Tensor], params: Iterable[Tensor],
                     *inputs) -> tuple[float, list[np.ndarray]]:
    """Run ``loss_fn(*inputs)`` then differentiate; zero-filled grads for unused params."""
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn(*inputs)
    backward(loss)
    return loss.item(), [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
