"""Minimal reverse-mode differentiation over small dense float64 tensors.

A :class:`Tape` records primitive operations in execution order, so a single
reverse sweep over ``tape.nodes`` visits every node after all of its
consumers. Backward rules operate on cotangents carrying one extra leading
axis of size ``K``: an ordinary backward pass uses ``K == 1``, while the HAM
fast path pushes ``K == H`` per-timestep cotangents through one sweep.

Example:
    >>> w = ParamGroup("w", np.array([3.0]))
    >>> tape = Tape()
    >>> loss = square(tape.param(w))
    >>> backward(loss, [w])
    >>> w.grad
    array([6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes violate a primitive's contract."""


@dataclass
class ParamGroup:
    """A named, learnable tensor and its gradient buffer."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        else:
            self.grad = np.array(self.grad, dtype=DTYPE)
        if self.grad.shape != self.value.shape:
            raise ShapeError(
                f"param {self.name!r}: gradient shape {self.grad.shape} != value shape {self.value.shape}"
            )

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


class Tensor:
    """A float64 array optionally attached to a tape."""

    __slots__ = ("data", "tape", "requires_grad")

    def __init__(self, data, tape: Tape | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


VjpFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: VjpFn


class Tape:
    """Computation record: an ordered list of primitive applications."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self._groups: dict[int, ParamGroup] = {}

    def param(self, group: ParamGroup) -> Tensor:
        """Leaf tensor bound to ``group``; repeated calls return the same leaf."""
        key = id(group)
        leaf = self._leaves.get(key)
        if leaf is None:
            leaf = Tensor(group.value, self, requires_grad=True)
            self._leaves[key] = leaf
            self._groups[key] = group
        return leaf

    def constant(self, data) -> Tensor:
        return Tensor(data, self, requires_grad=False)

    def leaf_for(self, group: ParamGroup) -> Tensor | None:
        return self._leaves.get(id(group))

    def record(self, kind: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: VjpFn) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        result = Tensor(out, self, requires_grad=needs)
        if needs:
            self.nodes.append(_Node(kind, tuple(inputs), result, vjp))
        return result


def _tape_of(inputs: Iterable) -> Tape | None:
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            return t.tape
    return None


def _as_tensors(inputs: Sequence) -> tuple[Tape, list[Tensor]]:
    tape = _tape_of(inputs) or Tape()
    out = [t if isinstance(t, Tensor) else tape.constant(t) for t in inputs]
    return tape, out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # grad has a leading K axis followed by a shape that ``shape`` broadcasts to
    while grad.ndim > len(shape) + 1:
        grad = grad.sum(axis=1)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i + 1] != 1:
            grad = grad.sum(axis=i + 1, keepdims=True)
    return grad


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise ShapeError(f"mean_axis: axis {a} out of range for ndim {ndim}")
        axes.append(a % ndim)
    return tuple(sorted(set(axes)))


# -- primitives -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``matmul`` semantics on operands of rank >= 2."""
    tape, (a, b) = _as_tensors((a, b))
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc
    av, bv = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if av.ndim == 2 and bv.ndim == 3:
                # shared left operand: contract over batch without materializing per-sample products
                ga = np.einsum("zbmn,bkn->zmk", g, bv, optimize=True)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim == 3:
                gb = np.einsum("bmk,zbmn->zkn", av, g, optimize=True)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return tape.record("matmul", (a, b), out, vjp)


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        target = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        target = None
    if target != a.shape:
        raise ShapeError(f"{kind}: second operand shape {b.shape} does not broadcast to {a.shape}")


def add(a, b) -> Tensor:
    """``a + b`` where ``b`` broadcasts to the shape of ``a``."""
    tape, (a, b) = _as_tensors((a, b))
    _check_broadcast("add", a, b)
    bshape = b.shape

    def vjp(g):
        return g, (_unbroadcast(g, bshape) if b.requires_grad else None)

    return tape.record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    """``a - b`` where ``b`` broadcasts to the shape of ``a``."""
    tape, (a, b) = _as_tensors((a, b))
    _check_broadcast("sub", a, b)
    bshape = b.shape

    def vjp(g):
        return g, (-_unbroadcast(g, bshape) if b.requires_grad else None)

    return tape.record("sub", (a, b), a.data - b.data, vjp)


def broadcast_sub_last(x) -> Tensor:
    """Subtract the last row along the time axis (-2) from every row."""
    tape, (x,) = _as_tensors((x,))
    if x.data.ndim < 2:
        raise ShapeError(f"broadcast_sub_last: need rank >= 2, got shape {x.shape}")
    out = x.data - x.data[..., -1:, :]

    def vjp(g):
        gx = g.copy()
        gx[..., -1, :] -= g.sum(axis=-2)
        return (gx,)

    return tape.record("broadcast_sub_last", (x,), out, vjp)


def relu(x) -> Tensor:
    tape, (x,) = _as_tensors((x,))
    keep = x.data > 0
    return tape.record("relu", (x,), np.where(keep, x.data, 0.0), lambda g: (g * keep,))


def dropout_masked(x, mask, p: float) -> Tensor:
    """Inverted dropout with an explicit binary ``mask`` and drop probability ``p``."""
    tape, (x,) = _as_tensors((x,))
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != x.shape:
        raise ShapeError(f"dropout_masked: mask shape {mask.shape} != input shape {x.shape}")
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout_masked: drop probability must be in [0, 1), got {p}")
    scale = mask / (1.0 - p)
    return tape.record("dropout_masked", (x,), x.data * scale, lambda g: (g * scale,))


def mean_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    tape, (x,) = _as_tensors((x,))
    axes = _normalize_axes(axis, x.data.ndim)
    out = x.data.mean(axis=axes, keepdims=keepdims)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    xshape = x.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, tuple(a + 1 for a in axes))
        return (np.broadcast_to(g / n, (g.shape[0],) + xshape).copy(),)

    return tape.record("mean_axis", (x,), out, vjp)


def square(x) -> Tensor:
    tape, (x,) = _as_tensors((x,))
    xv = x.data
    return tape.record("square", (x,), xv * xv, lambda g: (2.0 * xv * g,))


def gather_cyclic(x, index, axis: int = 0) -> Tensor:
    """Take entries of ``x`` at ``index mod n`` along ``axis``; ``index`` may be N-d."""
    tape, (x,) = _as_tensors((x,))
    ndim = x.data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"gather_cyclic: axis {axis} out of range for shape {x.shape}")
    ax = axis % ndim
    n = x.shape[ax]
    idx = np.asarray(index, dtype=np.int64) % n
    out = np.take(x.data, idx, axis=ax)
    xshape = x.shape

    def vjp(g):
        k = g.shape[0]
        # bring the gathered index axes to the front, flatten the rest
        src = list(range(1 + ax, 1 + ax + idx.ndim))
        moved = np.moveaxis(g, src, list(range(idx.ndim)))
        flat = moved.reshape(idx.size, -1)
        acc = np.zeros((n, flat.shape[1]), dtype=DTYPE)
        np.add.at(acc, idx.ravel(), flat)
        rest = (k,) + xshape[:ax] + xshape[ax + 1:]
        return (np.moveaxis(acc.reshape((n,) + rest), 0, 1 + ax),)

    return tape.record("gather_cyclic", (x,), out, vjp)


def reshape(x, shape: Sequence[int]) -> Tensor:
    tape, (x,) = _as_tensors((x,))
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from exc
    xshape = x.shape
    return tape.record("reshape", (x,), out, lambda g: (g.reshape((g.shape[0],) + xshape),))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "broadcast_sub_last": broadcast_sub_last,
    "relu": relu,
    "dropout_masked": dropout_masked,
    "mean_axis": mean_axis,
    "square": square,
    "gather_cyclic": gather_cyclic,
    "reshape": reshape,
}


def forward_primitive(kind: str, *inputs, **attrs) -> Tensor:
    """Apply the primitive named ``kind``; see :data:`PRIMITIVES`."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}; expected one of {sorted(PRIMITIVES)}") from None
    return fn(*inputs, **attrs)


# -- reverse sweep ------------------------------------------------------------


def vjp(output: Tensor, cotangents: np.ndarray, params: Sequence[ParamGroup]) -> list[np.ndarray]:
    """Push a stack of cotangents back from ``output`` to ``params``.

    ``cotangents`` has shape ``(K,) + output.shape``. Returns one array of shape
    ``(K,) + param.value.shape`` per param; params unreachable from ``output``
    get exact zeros.
    """
    cot = np.asarray(cotangents, dtype=DTYPE)
    if cot.shape[1:] != output.shape:
        raise ShapeError(f"vjp: cotangent shape {cot.shape} does not match (K,) + {output.shape}")
    k = cot.shape[0]
    tape = output.tape
    grads: dict[int, np.ndarray] = {}
    if output.requires_grad and tape is not None:
        grads[id(output)] = cot
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    result = []
    for p in params:
        leaf = tape.leaf_for(p) if tape is not None else None
        g = grads.get(id(leaf)) if leaf is not None else None
        if g is None:
            g = np.zeros((k,) + p.value.shape, dtype=DTYPE)
        result.append(g)
    return result


def backward(loss: Tensor, params: Sequence[ParamGroup], accumulate: bool = False) -> None:
    """Write ``d loss / d param`` into each ``param.grad``.

    Gradients overwrite previous contents unless ``accumulate`` is set.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    seed = np.ones((1,) + loss.shape, dtype=DTYPE)
    for p, g in zip(params, vjp(loss, seed, params)):
        if accumulate:
            p.grad = p.grad + g[0]
        else:
            p.grad = g[0].copy()


def grad_vector(params: Sequence[ParamGroup]) -> tuple[np.ndarray, list[int]]:
    """Concatenate gradients in the given order; ``offsets[i]:offsets[i+1]`` slices group ``i``."""
    offsets = [0]
    for p in params:
        offsets.append(offsets[-1] + p.size)
    if not params:
        return np.zeros(0, dtype=DTYPE), offsets
    return np.concatenate([p.grad.ravel() for p in params]), offsets


def split_vector(vector: np.ndarray, offsets: Sequence[int], params: Sequence[ParamGroup]) -> dict[str, np.ndarray]:
    return {
        p.name: vector[offsets[i]:offsets[i + 1]].reshape(p.value.shape)
        for i, p in enumerate(params)
    }
