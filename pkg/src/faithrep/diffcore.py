"""Dense-matrix reverse-mode differentiation for a fixed set of primitives.

A :class:`Tape` is built once (define-then-run): named leaves are declared,
primitive ops are appended in topological order, and selected nodes are
registered as outputs.  :func:`forward` binds concrete matrices to the leaves
and caches every node value; :func:`backward` then walks the records in
reverse and returns a gradient for every leaf.

All values are 2-D float64 arrays.  Scalars are 1x1 matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import ndtr

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are inconsistent for an op."""


class NonFiniteError(FloatingPointError):
    """A forward value contains NaN or Inf."""


class TapeStateError(RuntimeError):
    """Tape used out of order (e.g. backward before forward)."""


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    out: int
    attrs: dict = field(default_factory=dict)


class Node(int):
    """Integer node id; subclassed only so reprs read better in errors."""

    def __repr__(self) -> str:
        return f"Node({int(self)})"


class Tape:
    """Ordered list of primitive-op records over named leaves."""

    def __init__(self) -> None:
        self.records: list[Record] = []
        self.leaves: dict[str, Node] = {}
        self.frozen: set[str] = set()
        self.outputs: dict[str, Node] = {}
        self.names: dict[int, str] = {}
        self.values: list[np.ndarray | None] = []
        self._n = 0
        self._ran = False

    # -- construction -----------------------------------------------------

    def _new(self, name: str | None = None) -> Node:
        node = Node(self._n)
        self._n += 1
        self.values.append(None)
        if name is not None:
            self.names[node] = name
        return node

    def leaf(self, name: str, frozen: bool = False) -> Node:
        if name in self.leaves:
            return self.leaves[name]
        node = self._new(name)
        self.leaves[name] = node
        if frozen:
            self.frozen.add(name)
        return node

    def output(self, name: str, node: Node) -> Node:
        self.outputs[name] = node
        return node

    def _op(self, op: str, *inputs: Node, **attrs) -> Node:
        out = self._new()
        self.records.append(Record(op, tuple(inputs), out, attrs))
        return out

    def matmul(self, a: Node, b: Node) -> Node:
        return self._op("matmul", a, b)

    def transpose(self, a: Node) -> Node:
        return self._op("transpose", a)

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum; ``b`` may be a single row broadcast over ``a``."""
        return self._op("add", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._op("mul", a, b)

    def relu(self, a: Node) -> Node:
        return self._op("relu", a)

    def softmax(self, logits: Node) -> Node:
        return self._op("softmax", logits)

    def softmax_xent(self, target: Node, logits: Node) -> Node:
        """Mean over rows of ``-sum_c target_c * log softmax(logits)_c`` (1x1)."""
        return self._op("softmax_xent", target, logits)

    def clamp01(self, a: Node) -> Node:
        return self._op("clamp01", a)

    def scale(self, a: Node, c: float) -> Node:
        return self._op("scale", a, c=float(c))

    def scale_by(self, a: Node, s: Node) -> Node:
        """Multiply ``a`` by the 1x1 node ``s``."""
        return self._op("scale_by", a, s)

    def row_sum(self, a: Node) -> Node:
        return self._op("row_sum", a)

    def total_sum(self, a: Node) -> Node:
        return self._op("total_sum", a)

    def dropout(self, a: Node, mask: Node) -> Node:
        """Apply a precomputed (already rescaled) dropout mask."""
        return self._op("dropout", a, mask)

    def gauss_cdf(self, a: Node) -> Node:
        return self._op("gauss_cdf", a)

    def describe(self, node: int) -> str:
        if node in self.names:
            return self.names[node]
        for rec in self.records:
            if rec.out == node:
                return f"{rec.op}#{node}"
        return f"#{node}"

    def value(self, node: Node | str) -> np.ndarray:
        if not self._ran:
            raise TapeStateError("forward has not been run on this tape")
        if isinstance(node, str):
            node = self.outputs.get(node, self.leaves.get(node))
            if node is None:
                raise KeyError(node)
        return self.values[node]


# -- forward rules --------------------------------------------------------


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    """Row softmax with max subtraction."""
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def gaussian_cdf(u: np.ndarray) -> np.ndarray:
    return ndtr(u)


def gaussian_pdf(u: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * np.square(u)) * _INV_SQRT_2PI


def _shape_fail(tape: Tape, rec: Record, *shapes) -> ShapeError:
    names = ", ".join(f"{tape.describe(i)}{s}" for i, s in zip(rec.inputs, shapes))
    return ShapeError(f"{rec.op}: incompatible shapes {names}")


def _eval(tape: Tape, rec: Record, args: list[np.ndarray]) -> np.ndarray:
    op = rec.op
    if op == "matmul":
        a, b = args
        if a.shape[1] != b.shape[0]:
            raise _shape_fail(tape, rec, a.shape, b.shape)
        out = a @ b
        # BLAS does not raise floating-point flags
        if not np.isfinite(out).all():
            raise FloatingPointError("overflow in matmul")
        return out
    if op == "transpose":
        return args[0].T.copy()
    if op in ("add", "mul"):
        a, b = args
        if a.shape != b.shape and not (b.shape[0] == 1 and b.shape[1] == a.shape[1]):
            raise _shape_fail(tape, rec, a.shape, b.shape)
        return a + b if op == "add" else a * b
    if op == "relu":
        return np.maximum(args[0], 0.0)
    if op == "softmax":
        return softmax(args[0])
    if op == "softmax_xent":
        t, z = args
        if t.shape != z.shape:
            raise _shape_fail(tape, rec, t.shape, z.shape)
        rec.attrs["logp"] = logp = _log_softmax(z)
        return np.array([[-(t * logp).sum() / z.shape[0]]])
    if op == "clamp01":
        return np.clip(args[0], 0.0, 1.0)
    if op == "scale":
        return args[0] * rec.attrs["c"]
    if op == "scale_by":
        a, s = args
        if s.shape != (1, 1):
            raise _shape_fail(tape, rec, a.shape, s.shape)
        return a * s[0, 0]
    if op == "row_sum":
        return args[0].sum(axis=1, keepdims=True)
    if op == "total_sum":
        return np.array([[args[0].sum()]])
    if op == "dropout":
        a, m = args
        if a.shape != m.shape:
            raise _shape_fail(tape, rec, a.shape, m.shape)
        return a * m
    if op == "gauss_cdf":
        return gaussian_cdf(args[0])
    raise ValueError(f"unknown op {op!r}")


def forward(tape: Tape, inputs: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bind leaves, evaluate every record, and return the named outputs."""
    missing = [n for n in tape.leaves if n not in inputs]
    if missing:
        raise KeyError(f"unbound inputs: {', '.join(sorted(missing))}")
    for name, node in tape.leaves.items():
        v = np.asarray(inputs[name], dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"input {name!r} must be 2-D, got shape {v.shape}")
        tape.values[node] = v
        if not np.isfinite(v).all():
            raise NonFiniteError(f"non-finite value in input {name!r}")
    # with finite leaves, a non-finite intermediate can only arise through an
    # overflow or invalid operation, which errstate turns into an exception
    with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
        for rec in tape.records:
            try:
                tape.values[rec.out] = _eval(tape, rec, [tape.values[i] for i in rec.inputs])
            except FloatingPointError as exc:
                raise NonFiniteError(f"non-finite value at node {tape.describe(rec.out)}: {exc}") from None
    tape._ran = True
    return {name: tape.values[node] for name, node in tape.outputs.items()}


# -- backward rules -------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


def _vjp(tape: Tape, rec: Record, g: np.ndarray) -> list[np.ndarray | None]:
    op = rec.op
    vals = [tape.values[i] for i in rec.inputs]
    out = tape.values[rec.out]
    if op == "matmul":
        a, b = vals
        return [g @ b.T, a.T @ g]
    if op == "transpose":
        return [g.T]
    if op == "add":
        return [g, _unbroadcast(g, vals[1].shape)]
    if op == "mul":
        a, b = vals
        return [g * b, _unbroadcast(g * a, b.shape)]
    if op == "relu":
        return [g * (vals[0] > 0.0)]
    if op == "softmax":
        # J^T g for row softmax: p * (g - <g, p>)
        return [out * (g - (g * out).sum(axis=1, keepdims=True))]
    if op == "softmax_xent":
        t, _ = vals
        logp = rec.attrs["logp"]
        scale = g[0, 0] / t.shape[0]
        p = np.exp(logp)
        grad_t = -logp * scale
        grad_z = (p * t.sum(axis=1, keepdims=True) - t) * scale
        return [grad_t, grad_z]
    if op == "clamp01":
        x = vals[0]
        return [g * ((x > 0.0) & (x < 1.0))]
    if op == "scale":
        return [g * rec.attrs["c"]]
    if op == "scale_by":
        a, s = vals
        return [g * s[0, 0], np.array([[(g * a).sum()]])]
    if op == "row_sum":
        return [np.broadcast_to(g, vals[0].shape).copy()]
    if op == "total_sum":
        return [np.full(vals[0].shape, g[0, 0])]
    if op == "dropout":
        return [g * vals[1], None]
    if op == "gauss_cdf":
        return [g * gaussian_pdf(vals[0])]
    raise ValueError(f"unknown op {op!r}")


def backward(
    tape: Tape, seed: np.ndarray | float = 1.0, output: str | None = None
) -> dict[str, np.ndarray]:
    """Propagate ``seed`` from an output back to every leaf.

    ``output`` defaults to the first registered output.  Frozen leaves (and
    leaves the output does not depend on) receive zero matrices.
    """
    if not tape._ran:
        raise TapeStateError("backward called before forward")
    if output is None:
        output = next(iter(tape.outputs))
    root = tape.outputs[output]
    seed = np.asarray(seed, dtype=np.float64)
    if seed.ndim == 0:
        seed = np.full(tape.values[root].shape, float(seed))
    if seed.shape != tape.values[root].shape:
        raise ShapeError(f"seed shape {seed.shape} != output shape {tape.values[root].shape}")

    frozen_ids = {int(tape.leaves[n]) for n in tape.frozen}
    # nodes downstream of a trainable leaf; gradients are only needed there
    live = {int(v) for k, v in tape.leaves.items() if k not in tape.frozen}
    for rec in tape.records:
        if any(i in live for i in rec.inputs):
            live.add(int(rec.out))

    grads: dict[int, np.ndarray] = {int(root): seed}
    for rec in reversed(tape.records):
        g = grads.pop(int(rec.out), None)
        if g is None:
            continue
        for node, gi in zip(rec.inputs, _vjp(tape, rec, g)):
            if gi is None or node not in live or node in frozen_ids:
                continue
            prev = grads.get(int(node))
            grads[int(node)] = gi if prev is None else prev + gi
    return {
        name: grads.get(int(node), np.zeros_like(tape.values[node]))
        for name, node in tape.leaves.items()
    }


# -- verification ---------------------------------------------------------


def grad_check(
    objective: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    point: Mapping[str, np.ndarray],
    step: float = 1e-5,
    names: list[str] | None = None,
    reference: Callable[[dict[str, np.ndarray]], float] | None = None,
) -> float:
    """Max relative error of analytic gradients vs. central differences.

    ``objective(params)`` returns ``(value, grads)``; value must be a scalar
    (a 1x1 matrix is accepted).  Relative error per coordinate is
    ``|analytic - numeric| / max(1e-8, |numeric|)``.

    When ``reference`` is given, differences are taken on it instead of on
    ``objective``, with parameters perturbed in ``np.longdouble``; pass an
    independent extended-precision implementation of the same function to
    keep round-off out of the numeric side.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def scalar(v):
        arr = np.asarray(v)
        if arr.size != 1:
            raise ShapeError(f"objective must be scalar, got shape {arr.shape}")
        return arr.reshape(())[()]

    params = {k: np.array(v, dtype=np.float64, copy=True) for k, v in point.items()}
    base, grads = objective(params)
    scalar(base)
    if reference is None:
        def fn(p):
            return scalar(objective(p)[0])
    else:
        params = {k: v.astype(np.longdouble) for k, v in params.items()}

        def fn(p):
            return scalar(reference(p))

    worst = 0.0
    for name in names or list(params):
        flat = params[name].reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn(params)
            flat[i] = orig - step
            down = fn(params)
            flat[i] = orig
            numeric = float((up - down) / (2 * step))
            err = abs(analytic[i] - numeric) / max(1e-8, abs(numeric))
            worst = max(worst, err)
    return worst
