"""Reverse-mode automatic differentiation over dense 2-D tensors.

The operation set is exactly what the prompt generator, the frozen
encoders, and the losses need: matmul, add (with row broadcast for
biases), scale, concat_rows, row_softmax, layer_norm, gelu, cosine_sim,
mean, log, neg, transpose and unit_normalize. The graph is define-by-run:
each op links its output to its parents, and backward() walks the nodes in
reverse topological order exactly once.

Tensors are single-threaded values. Parallelism belongs one level up,
over independent graphs.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

COS_EPS = 1e-8     # added to each norm denominator in cosine_sim / unit_normalize
LN_EPS = 1e-10     # variance guard in layer_norm; small enough to keep unit variance
GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's rule."""


class NonFiniteError(ValueError):
    """A NaN or Inf reached an op boundary."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return np.atleast_2d(arr)


class Tensor:
    """A dense 2-D array with optional gradient tracking.

    `data` is validated to be finite on construction, which covers every
    op boundary: each op validates its output once, so its consumers see
    pre-checked inputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        if not np.isfinite(self.data).all():
            raise NonFiniteError(f"non-finite values in tensor {name or '<anonymous>'}")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def grad_array(self) -> np.ndarray:
        """Gradient, or zeros when this leaf was unreachable from the loss."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"<{tag} {self.shape} {self.data.dtype}{' grad' if self.requires_grad else ''}>"


def constant(data, dtype=None, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype, name=name)


def parameter(data, dtype=None, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def _check_same_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(str(d) for d in dtypes)}")


def _node(op: str, data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), name=op)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    y = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node("matmul", y, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a (n, d) + (1, d) row broadcast is allowed for biases."""
    _check_same_dtype("add", a, b)
    if a.shape != b.shape and not (b.shape == (1, a.shape[1])):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not conform")
    y = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        if b.shape == a.shape:
            _accum(b, g)
        else:
            _accum(b, g.sum(axis=0, keepdims=True))

    return _node("add", y, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not differentiated w.r.t. c)."""
    c = float(c)
    if not math.isfinite(c):
        raise NonFiniteError("scale: non-finite constant")
    y = a.data * a.data.dtype.type(c)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * a.data.dtype.type(c))

    return _node("scale", y, (a,), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accum(a, -g)

    return _node("neg", -a.data, (a,), backward)


def concat_rows(tensors: Iterable[Tensor]) -> Tensor:
    parts = tuple(tensors)
    if not parts:
        raise ShapeError("concat_rows: empty input list")
    _check_same_dtype("concat_rows", *parts)
    width = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != width:
            raise ShapeError(f"concat_rows: widths differ ({p.shape[1]} vs {width})")
    y = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g: np.ndarray) -> None:
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _node("concat_rows", y, parts, backward)


def transpose(a: Tensor) -> Tensor:
    def backward(g: np.ndarray) -> None:
        _accum(a, g.T)

    return _node("transpose", a.data.T.copy(), (a,), backward)


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = (g * p).sum(axis=1, keepdims=True)
        _accum(a, p * (g - dot))

    return _node("row_softmax", p, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine.

    gamma and beta are (1, d); pass ones/zeros for the plain normalization.
    """
    _check_same_dtype("layer_norm", x, gamma, beta)
    d = x.shape[1]
    if gamma.shape != (1, d) or beta.shape != (1, d):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs width {d}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(LN_EPS))
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g: np.ndarray) -> None:
        _accum(beta, g.sum(axis=0, keepdims=True))
        _accum(gamma, (g * xhat).sum(axis=0, keepdims=True))
        if x.requires_grad:
            gh = g * gamma.data
            term = gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True)
            _accum(x, term * inv)

    return _node("layer_norm", y, (x, gamma, beta), backward)


def gelu(a: Tensor) -> Tensor:
    """GeLU with the tanh approximation; constants fixed so ports match to 1e-6."""
    x = a.data
    u = GELU_C * (x + GELU_K * x**3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        du = GELU_C * (1.0 + 3.0 * GELU_K * x**2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _node("gelu", y, (a,), backward)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two equal-length vectors, as a (1, 1) scalar.

    Each norm denominator carries +1e-8 so degenerate zero vectors stay
    finite.
    """
    _check_same_dtype("cosine_sim", a, b)
    if a.data.size != b.data.size or 1 not in a.shape or 1 not in b.shape:
        raise ShapeError(f"cosine_sim: expected equal-length vectors, got {a.shape} and {b.shape}")
    va = a.data.reshape(-1)
    vb = b.data.reshape(-1)
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    eps = float(COS_EPS)
    dot = float(va @ vb)
    c = dot / ((na + eps) * (nb + eps))

    def backward(g: np.ndarray) -> None:
        gs = float(g.reshape(-1)[0])
        if a.requires_grad:
            da = vb / ((na + eps) * (nb + eps))
            if na > 0.0:
                da = da - c * va / (na * (na + eps))
            _accum(a, (gs * da).reshape(a.shape).astype(a.data.dtype, copy=False))
        if b.requires_grad:
            db = va / ((na + eps) * (nb + eps))
            if nb > 0.0:
                db = db - c * vb / (nb * (nb + eps))
            _accum(b, (gs * db).reshape(b.shape).astype(b.data.dtype, copy=False))

    return _node("cosine_sim", np.array([[c]], dtype=a.data.dtype), (a, b), backward)


def unit_normalize(a: Tensor) -> Tensor:
    """Row-wise L2 normalization with the same +1e-8 denominator guard."""
    n = np.linalg.norm(a.data, axis=1, keepdims=True)
    denom = n + a.data.dtype.type(COS_EPS)
    y = a.data / denom

    def backward(g: np.ndarray) -> None:
        dot = (g * a.data).sum(axis=1, keepdims=True)
        safe_n = np.where(n > 0.0, n, 1.0)
        _accum(a, g / denom - a.data * (dot / (safe_n * denom * denom)))

    return _node("unit_normalize", y, (a,), backward)


def mean(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size

    def backward(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.data, float(g.reshape(-1)[0]) * inv))

    return _node("mean", np.array([[a.data.mean()]], dtype=a.data.dtype), (a,), backward)


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; with floor > 0, inputs are clamped to floor first and the
    clamped coordinates get zero gradient."""
    x = a.data
    if floor > 0.0:
        clamped = np.maximum(x, a.data.dtype.type(floor))
    else:
        clamped = x
        if (x <= 0.0).any():
            raise NonFiniteError("log: non-positive input without floor")
    y = np.log(clamped)

    def backward(g: np.ndarray) -> None:
        grad = g / clamped
        if floor > 0.0:
            grad = np.where(x >= floor, grad, 0.0)
        _accum(a, grad)

    return _node("log", y, (a,), backward)


_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "scale": scale,
    "concat_rows": lambda *ts: concat_rows(ts),
    "row_softmax": row_softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "cosine_sim": cosine_sim,
    "mean": mean,
    "log": log,
    "neg": neg,
    "transpose": transpose,
    "unit_normalize": unit_normalize,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name. Mostly useful for sweeping the op set in tests."""
    if kind not in _OPS:
        raise ValueError(f"unknown op kind '{kind}'")
    return _OPS[kind](*inputs, **kwargs)


def op_kinds() -> tuple[str, ...]:
    return tuple(_OPS)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate gradients of a scalar loss into every reachable
    requires_grad tensor. Leaves not on the graph keep grad=None, which
    grad_array() reports as zeros."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_map(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward and return name -> gradient, zeros for unreachable leaves."""
    for p in params.values():
        p.zero_grad()
    backward(loss)
    return {name: p.grad_array() for name, p in params.items()}


# ---------------------------------------------------------------------------
# optimizer


def sgd_momentum_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                      velocity: dict[str, np.ndarray], lr: float,
                      momentum: float, weight_decay: float) -> None:
    """One SGD step with momentum and L2 weight decay, in place.

    v <- momentum * v + (grad + weight_decay * param)
    param <- param - lr * v

    `velocity` is keyed like `params` and is created lazily per entry.
    """
    if lr <= 0.0:
        raise ValueError(f"sgd_momentum_step: lr must be positive, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"sgd_momentum_step: grad shape {g.shape} vs param {p.data.shape} for '{name}'")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        elif v.shape != p.data.shape:
            raise ShapeError(f"sgd_momentum_step: velocity shape {v.shape} vs param {p.data.shape} for '{name}'")
        dt = p.data.dtype.type
        v = dt(momentum) * v + (g + dt(weight_decay) * p.data)
        velocity[name] = v
        p.data = p.data - dt(lr) * v
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


def numeric_gradients(fn: Callable[[], Tensor], params: dict[str, Tensor],
                      step: float) -> dict[str, np.ndarray]:
    """Central differences of fn over every coordinate of every param."""
    if step <= 0.0:
        raise ValueError("numeric_gradients: step must be positive")
    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = np.empty(flat.size, dtype=np.float64)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            grad[i] = (f_plus - f_minus) / (2.0 * step)
        out[name] = grad.reshape(p.data.shape)
    return out


def max_relative_error(analytic: dict[str, np.ndarray],
                       numeric: dict[str, np.ndarray]) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        err = np.abs(a.astype(np.float64) - n) / np.maximum(1.0, np.abs(n))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def finite_difference_check(fn: Callable[[], Tensor], params: dict[str, Tensor],
                            step: float = 1e-4) -> float:
    """Max relative error between analytic gradients and central differences.

    `fn` rebuilds the graph from `params` and returns the scalar loss; it is
    evaluated twice up front to detect nondeterminism.
    """
    loss = fn()
    if fn().item() != loss.item():
        raise ValueError("finite_difference_check: fn is not deterministic")
    analytic = grad_map(loss, params)
    return max_relative_error(analytic, numeric_gradients(fn, params, step))
