"""Reverse-mode automatic differentiation over dense float64 tensors.

Define-by-run: operations executed while a :class:`Tape` is active are
recorded and can be differentiated with :func:`backward`.  With no active
tape (or when no input requires a gradient) the same functions run as plain
numpy, which keeps evaluation passes cheap.

Every op validates shapes and checks its output for NaN/Inf; Cholesky adds
jitter (1e-6 * mean diagonal, retried once at 1e-4) before factorizing.
Composite operations with hand-derived backward rules (e.g. the LSTM loop in
:mod:`dklshift.nn`) plug in through :func:`custom_op`.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import (
    ContractError,
    DecompositionError,
    DimensionError,
    NumericError,
)

__all__ = [
    "Tensor",
    "Tape",
    "forward_op",
    "backward",
    "finite_diff_check",
    "custom_op",
    "no_grad",
]

_TAPE_STACK: list["Tape"] = []

JITTER_SCALE = 1e-6
JITTER_RETRY_SCALE = 1e-4


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """Dense float64 array, optionally tracked on a tape.

    ``grad`` is populated by :func:`backward` for leaves created with
    ``requires_grad=True``.  ``node_id`` identifies the tensor within the
    tape that last recorded it.
    """

    __slots__ = ("values", "requires_grad", "grad", "node_id", "tape")

    def __init__(self, values, requires_grad: bool = False):
        # ascontiguousarray would promote 0-d inputs to shape (1,)
        arr = np.asarray(values, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NumericError("tensor initialized with NaN/Inf entries")
        self.values = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detached(self) -> "Tensor":
        return Tensor(self.values.copy())

    # only the array and the grad flag travel across pickling; grads, node
    # ids, and the tape (whose nodes close over backward functions) are
    # per-process runtime state
    def __getstate__(self):
        return (self.values, self.requires_grad)

    def __setstate__(self, state):
        self.values, self.requires_grad = state
        self.grad = None
        self.node_id = None
        self.tape = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("op", "input_ids", "output_id", "backward_fn")

    def __init__(self, op, input_ids, output_id, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one forward pass.

    Node ids are assigned in execution order, so inputs always precede
    outputs and a single reverse sweep visits each node once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._next_id = 0
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TAPE_STACK.pop()
        return False

    def _register(self, tensor: Tensor) -> int:
        """Assign ``tensor`` a node id on this tape (leaf registration)."""
        if tensor.tape is self and tensor.node_id is not None:
            return tensor.node_id
        nid = self._next_id
        self._next_id += 1
        tensor.tape = self
        tensor.node_id = nid
        self._leaves[nid] = tensor
        return nid

    def _record(self, op, inputs, output: Tensor, backward_fn) -> Tensor:
        ids = tuple(self._register(t) if t.tape is not self else t.node_id for t in inputs)
        out_id = self._next_id
        self._next_id += 1
        output.tape = self
        output.node_id = out_id
        self.nodes.append(_Node(op, ids, out_id, backward_fn))
        return output

    def backward(self, root: Tensor) -> dict[int, np.ndarray]:
        return backward(self, root)


def no_grad():
    """Context with no active tape: ops run as plain numpy."""

    class _NoGrad:
        def __enter__(self):
            _TAPE_STACK.append(None)  # type: ignore[arg-type]
            return self

        def __exit__(self, exc_type, exc, tb):
            _TAPE_STACK.pop()
            return False

    return _NoGrad()


def _recording(inputs) -> Tape | None:
    tape = _active_tape()
    if tape is None:
        return None
    for t in inputs:
        if t.requires_grad or (t.tape is tape and t.node_id is not None):
            return tape
    return None


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # single-pass guard: any NaN/Inf entry makes the sum non-finite
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"NaN/Inf in output of op '{op}'")
    return arr


def _make_output(op, inputs, values, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = _check_finite(values, op)
    out.requires_grad = False
    out.grad = None
    out.node_id = None
    out.tape = None
    tape = _recording(inputs)
    if tape is not None:
        tape._record(op, inputs, out, backward_fn)
    return out


def custom_op(name: str, inputs, values: np.ndarray, backward_fn) -> Tensor:
    """Record a composite operation with a hand-derived backward rule.

    ``backward_fn(grad_out) -> list of grads`` aligned with ``inputs``
    (``None`` marks a non-differentiable input).
    """
    return _make_output(name, list(inputs), np.ascontiguousarray(values, dtype=np.float64), backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] > 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        vals = a.values + b.values
    except ValueError as e:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape}: {e}") from None

    def bwd(g):
        return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]

    return _make_output("add", [a, b], vals, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        vals = a.values - b.values
    except ValueError as e:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape}: {e}") from None

    def bwd(g):
        return [_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)]

    return _make_output("sub", [a, b], vals, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        vals = a.values * b.values
    except ValueError as e:
        raise DimensionError(f"elementwise_mul: shapes {a.shape} and {b.shape}: {e}") from None
    av, bv = a.values, b.values

    def bwd(g):
        return [_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)]

    return _make_output("elementwise_mul", [a, b], vals, bwd)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        return [g * c]

    return _make_output("scalar_mul", [a], a.values * c, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def bwd(g):
        return [g @ bv.T, av.T @ g]

    return _make_output("matmul", [a, b], av @ bv, bwd)


def sigmoid(a: Tensor) -> Tensor:
    vals = _sigmoid_stable(a.values)

    def bwd(g):
        return [g * vals * (1.0 - vals)]

    return _make_output("sigmoid", [a], vals, bwd)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    vals = np.tanh(a.values)

    def bwd(g):
        return [g * (1.0 - vals * vals)]

    return _make_output("tanh", [a], vals, bwd)


def relu(a: Tensor) -> Tensor:
    av = a.values

    def bwd(g):
        return [g * (av > 0)]

    return _make_output("relu", [a], np.maximum(av, 0.0), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as a NumericError below
        vals = np.exp(a.values)

    def bwd(g):
        return [g * vals]

    return _make_output("exp", [a], vals, bwd)


def log(a: Tensor) -> Tensor:
    av = a.values
    with np.errstate(divide="raise", invalid="raise"):
        try:
            vals = np.log(av)
        except FloatingPointError:
            raise NumericError("log of non-positive value") from None

    def bwd(g):
        return [g / av]

    return _make_output("log", [a], vals, bwd)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed stably as -softplus(-x)."""
    av = a.values
    vals = -np.logaddexp(0.0, -av)

    def bwd(g):
        return [g * _sigmoid_stable(-av)]

    return _make_output("log_sigmoid", [a], vals, bwd)


def sqrt(a: Tensor) -> Tensor:
    av = a.values
    if np.any(av < 0):
        raise NumericError("sqrt of negative value")
    vals = np.sqrt(av)

    def bwd(g):
        return [g * 0.5 / np.maximum(vals, 1e-300)]

    return _make_output("sqrt", [a], vals, bwd)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    av = a.values
    floor = float(floor)

    def bwd(g):
        return [g * (av > floor)]

    return _make_output("clamp_min", [a], np.maximum(av, floor), bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = a.values
    vals = av.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g, av.shape).copy()]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg, av.shape).copy()]

    return _make_output("sum", [a], np.asarray(vals, dtype=np.float64), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    av = a.values
    count = av.size if axis is None else av.shape[axis]
    vals = av.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return [np.broadcast_to(g / count, av.shape).copy()]
        gg = g if keepdims else np.expand_dims(g, axis)
        return [np.broadcast_to(gg / count, av.shape).copy()]

    return _make_output("mean", [a], np.asarray(vals, dtype=np.float64), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.values.shape

    def bwd(g):
        return [g.reshape(old)]

    out = a.values.reshape(shape)
    # ascontiguousarray promotes 0-d to 1-d, so only apply it to real arrays
    return _make_output("reshape", [a], np.ascontiguousarray(out) if out.ndim else out, bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return [
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        ]

    return _make_output("concat", tensors, vals, bwd)


def slice_(a: Tensor, idx) -> Tensor:
    av = a.values
    vals = av[idx]

    def bwd(g):
        out = np.zeros_like(av)
        out[idx] = g
        return [out]

    return _make_output("slice", [a], np.ascontiguousarray(vals), bwd)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")

    def bwd(g):
        return [np.ascontiguousarray(g.T)]

    return _make_output("transpose", [a], np.ascontiguousarray(a.values.T), bwd)


def make_diag(v: Tensor) -> Tensor:
    if v.values.ndim != 1:
        raise DimensionError(f"make_diag expects a vector, got {v.shape}")

    def bwd(g):
        return [np.ascontiguousarray(np.diagonal(g))]

    return _make_output("make_diag", [v], np.diag(v.values), bwd)


# ---------------------------------------------------------------------------
# linear algebra with custom backward rules
# ---------------------------------------------------------------------------

def _cholesky_smallest_pivot(a: np.ndarray) -> float:
    """Textbook factorization scan, used only to report the failing pivot."""
    n = a.shape[0]
    l = np.zeros_like(a)
    smallest = np.inf
    for j in range(n):
        pivot = a[j, j] - np.dot(l[j, :j], l[j, :j])
        smallest = min(smallest, pivot)
        if pivot <= 0:
            return pivot
        l[j, j] = np.sqrt(pivot)
        for i in range(j + 1, n):
            l[i, j] = (a[i, j] - np.dot(l[i, :j], l[j, :j])) / l[j, j]
    return smallest


def cholesky(a: Tensor) -> Tensor:
    """Lower Cholesky factor of a symmetric PSD matrix.

    A clean factorization is attempted first (so factoring L L^T returns L
    exactly); on failure, ``scale * mean(diag) * I`` jitter is added at
    escalating scales 1e-6 then 1e-4 before giving up.
    """
    av = a.values
    if av.ndim != 2 or av.shape[0] != av.shape[1]:
        raise DimensionError(f"cholesky expects a square matrix, got {av.shape}")
    asym = np.max(np.abs(av - av.T)) if av.size else 0.0
    if asym > 1e-10 * max(1.0, np.max(np.abs(av))):
        raise DimensionError(f"cholesky input not symmetric (max asymmetry {asym:.3e})")
    n = av.shape[0]
    mean_diag = float(np.trace(av)) / n if n else 0.0
    used_scale = None
    lower = None
    for scale in (0.0, JITTER_SCALE, JITTER_RETRY_SCALE):
        jittered = av if scale == 0.0 else av + (scale * mean_diag) * np.eye(n)
        try:
            lower = np.linalg.cholesky(jittered)
            used_scale = scale
            break
        except np.linalg.LinAlgError:
            continue
    if lower is None:
        pivot = _cholesky_smallest_pivot(av + (JITTER_RETRY_SCALE * mean_diag) * np.eye(n))
        raise DecompositionError(
            f"matrix not positive definite after jitter retry (smallest pivot {pivot:.6e})"
        )
    jitter_per_diag = used_scale / n

    def bwd(g):
        # Murray-style triangular backward: abar = sym(L^-T Phi(L^T g) L^-1)
        p = np.tril(lower.T @ g)
        p[np.diag_indices(n)] *= 0.5
        t = scipy.linalg.solve_triangular(lower, p.T, lower=True, trans="T")
        abar = scipy.linalg.solve_triangular(lower, t.T, lower=True, trans="T").T
        abar = 0.5 * (abar + abar.T)
        if jitter_per_diag:
            # the fallback jitter term depends on A through mean(diag)
            abar += (jitter_per_diag * np.trace(abar)) * np.eye(n)
        return [abar]

    return _make_output("cholesky", [a], lower, bwd)


def triangular_solve(l: Tensor, b: Tensor, trans: bool = False) -> Tensor:
    """Solve ``L x = b`` (or ``L^T x = b`` when ``trans``), L lower-triangular."""
    lv, bv = l.values, b.values
    if lv.ndim != 2 or lv.shape[0] != lv.shape[1]:
        raise DimensionError(f"triangular_solve: L must be square, got {lv.shape}")
    if bv.ndim != 2 or bv.shape[0] != lv.shape[0]:
        raise DimensionError(f"triangular_solve: shapes {lv.shape} and {bv.shape}")
    x = scipy.linalg.solve_triangular(lv, bv, lower=True, trans="T" if trans else "N")

    def bwd(g):
        gb = scipy.linalg.solve_triangular(lv, g, lower=True, trans="N" if trans else "T")
        if trans:
            gl = -np.tril(x @ gb.T)
        else:
            gl = -np.tril(gb @ x.T)
        return [gl, gb]

    return _make_output("triangular_solve", [l, b], x, bwd)


def log_det_from_cholesky(l: Tensor) -> Tensor:
    """log det(A) = 2 * sum(log diag L) for A = L L^T."""
    lv = l.values
    d = np.diagonal(lv)
    if np.any(d <= 0):
        raise NumericError("log_det_from_cholesky: non-positive diagonal")
    vals = np.asarray(2.0 * np.log(d).sum())

    def bwd(g):
        out = np.zeros_like(lv)
        out[np.diag_indices(lv.shape[0])] = 2.0 * g / d
        return [out]

    return _make_output("log_det_from_cholesky", [l], vals, bwd)


# ---------------------------------------------------------------------------
# spec surface: kind-dispatched forward, backward, finite differences
# ---------------------------------------------------------------------------

_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "scalar_mul": scalar_mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "mean": mean,
    "concat": concat,
    "slice": slice_,
    "transpose": transpose,
    "cholesky": cholesky,
    "triangular_solve": triangular_solve,
    "log_det_from_cholesky": log_det_from_cholesky,
    # extensions used by the model layers
    "log_sigmoid": log_sigmoid,
    "sqrt": sqrt,
    "clamp_min": clamp_min,
    "reshape": reshape,
    "make_diag": make_diag,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name; see ``_OP_TABLE`` for supported kinds."""
    if kind not in _OP_TABLE:
        raise ContractError(f"unknown op kind '{kind}'")
    if kind == "concat":
        return concat(list(inputs), **kwargs)
    return _OP_TABLE[kind](*inputs, **kwargs)


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep; returns node_id -> gradient for every leaf.

    Also populates ``.grad`` on each ``requires_grad`` leaf.  Leaves that do
    not reach the root get zero gradient.
    """
    if root.values.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if root.tape is not tape or root.node_id is None:
        raise ContractError("root tensor was not produced by this tape")
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output_id, None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for nid, ig in zip(node.input_ids, in_grads):
            if ig is None:
                continue
            acc = grads.get(nid)
            if acc is None:
                grads[nid] = ig
            else:
                grads[nid] = acc + ig
    out: dict[int, np.ndarray] = {}
    for nid, leaf in tape._leaves.items():
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(leaf.values)
        out[nid] = g
        if leaf.requires_grad:
            leaf.grad = g if leaf.grad is None else leaf.grad + g
    return out


def grad_of(f, x: Tensor) -> np.ndarray:
    """Analytic gradient of scalar-valued ``f`` at leaf ``x``."""
    x.zero_grad()
    with Tape() as tape:
        out = f(x)
    backward(tape, out)
    g = x.grad
    x.zero_grad()
    return g


def finite_diff_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per coordinate is |analytic - fd| / max(1, |analytic|).
    """
    if step <= 0:
        raise ContractError("finite_diff_check: step must be positive")
    analytic = grad_of(f, x)
    flat = x.values.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        try:
            hi = f(x).item()
            flat[k] = orig - step
            lo = f(x).item()
        except Exception as e:
            flat[k] = orig
            raise NumericError(f"finite_diff_check: f raised at coordinate {k}: {e}") from e
        flat[k] = orig
        fd = (hi - lo) / (2.0 * step)
        a = analytic.reshape(-1)[k]
        err = abs(a - fd) / max(1.0, abs(a))
        worst = max(worst, err)
    return worst
