"""
Reverse-Mode Autodiff
Dense float64 tensors that record the operations producing them, and the
primitives the tenor model is built from: dense layers, grouped dilated
convolution, gated activation and per-time-slice attention.

Graphs are built eagerly on every forward call. ``backward`` walks the
graph once in reverse topological order and accumulates gradients into
every node that requires them.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from src.core.errors import ComputeError, ConfigError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class DiffTensor:
    """
    A value in the computation graph.

    Attributes:
        value: float64 array
        grad: same-shape array, allocated on the first accumulation
        parents: tensors this one was computed from
        op: tag of the producing operation ("leaf" for inputs)
        requires_grad: whether gradients flow into this tensor
    """

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(
        self,
        value: ArrayLike,
        parents: Tuple["DiffTensor", ...] = (),
        backward: Optional[BackwardFn] = None,
        op: str = "leaf",
        requires_grad: Optional[bool] = None
    ):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.parents = tuple(parents)
        self.op = op
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @classmethod
    def leaf(cls, value: ArrayLike) -> "DiffTensor":
        """Trainable input whose gradient is wanted."""
        return cls(np.array(value, dtype=np.float64), requires_grad=True)

    @classmethod
    def constant(cls, value: ArrayLike) -> "DiffTensor":
        return cls(value, requires_grad=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"DiffTensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.value.shape:
            raise ShapeError(f"{self.op}: gradient shape {grad.shape} != value shape {self.value.shape}")
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64)
        else:
            self.grad += grad

    def topological_order(self) -> List["DiffTensor"]:
        """Nodes reachable from this one, parents before children."""
        order: List[DiffTensor] = []
        visited = set()
        stack: List[Tuple[DiffTensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[ArrayLike] = None) -> None:
        """
        Propagate d(self)/d(node) into every node requiring gradients.

        A scalar output seeds with 1; otherwise ``grad`` is required.
        """
        if grad is None:
            if self.value.size != 1:
                raise ShapeError(f"backward on non-scalar shape {self.shape} needs an explicit gradient")
            grad = np.ones_like(self.value)
        self._accumulate(np.asarray(grad, dtype=np.float64))

        for node in reversed(self.topological_order()):
            if node._backward is None or node.grad is None or not node.requires_grad:
                continue
            parent_grads = node._backward(node.grad)
            if len(parent_grads) != len(node.parents):
                raise ComputeError(f"{node.op}: backward returned {len(parent_grads)} gradients "
                                   f"for {len(node.parents)} parents")
            for parent, g in zip(node.parents, parent_grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(np.asarray(g, dtype=np.float64))

    def zero_grad(self) -> None:
        """Clear gradients on every node of this graph."""
        for node in self.topological_order():
            node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor.constant(x)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: DiffTensor, b: DiffTensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def custom_op(value: ArrayLike, parents: Sequence[DiffTensor], backward: BackwardFn,
              op: str = "custom") -> DiffTensor:
    """
    Graph node with a caller-supplied backward rule.

    ``backward`` receives the upstream gradient and returns one gradient
    (or None) per parent.
    """
    return DiffTensor(value, tuple(parents), backward, op)


def add(a, b) -> DiffTensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return DiffTensor(a.value + b.value, (a, b), backward, "add")


def mul(a, b) -> DiffTensor:
    """Elementwise product with broadcasting."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.value, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.value, b.shape) if b.requires_grad else None
        return ga, gb

    return DiffTensor(a.value * b.value, (a, b), backward, "mul")


def scale(a: DiffTensor, c: float) -> DiffTensor:
    return DiffTensor(a.value * c, (a,), lambda g: (g * c,), "scale")


def matmul(x, w) -> DiffTensor:
    """
    x[..., K] @ w[K, J].

    Leading dimensions of ``x`` are batch dimensions sharing ``w``.
    """
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {x.shape} by {w.shape}")

    def backward(g):
        gx = g @ w.value.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.value.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return DiffTensor(x.value @ w.value, (x, w), backward, "matmul")


def bmm(a, b) -> DiffTensor:
    """Batched a[B, I, K] @ b[B, K, J]."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.value.transpose(0, 2, 1) if a.requires_grad else None
        gb = a.value.transpose(0, 2, 1) @ g if b.requires_grad else None
        return ga, gb

    return DiffTensor(np.matmul(a.value, b.value), (a, b), backward, "bmm")


def transpose(a: DiffTensor, axes: Sequence[int]) -> DiffTensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return DiffTensor(a.value.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def reshape(a: DiffTensor, shape: Sequence[int]) -> DiffTensor:
    original = a.shape
    try:
        value = a.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {original} as {tuple(shape)}") from None
    return DiffTensor(value, (a,), lambda g: (g.reshape(original),), "reshape")


def sigmoid(a: DiffTensor) -> DiffTensor:
    s = special.expit(a.value)
    return DiffTensor(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a: DiffTensor) -> DiffTensor:
    t = np.tanh(a.value)
    return DiffTensor(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a: DiffTensor) -> DiffTensor:
    mask = a.value > 0
    return DiffTensor(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def _sorted_sum(values: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    # the same multiset always sums in the same order
    return np.sort(values, axis=axis).sum(axis=axis, keepdims=keepdims)


def softmax(a: DiffTensor, axis: int = -1, ordered: bool = False) -> DiffTensor:
    """
    Max-subtracted softmax along ``axis``.

    With ``ordered`` the denominator is summed in sorted order, so
    permuting entries along ``axis`` permutes the output bit for bit.
    """
    if ordered:
        e = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
        s = e / _sorted_sum(e, axis, keepdims=True)
    else:
        s = special.softmax(a.value, axis=axis)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return DiffTensor(s, (a,), backward, "softmax")


def sum(a: DiffTensor, axis: Optional[int] = None) -> DiffTensor:  # noqa: A001
    shape = a.shape
    value = a.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return DiffTensor(value, (a,), backward, "sum")


def ordered_sum(a: DiffTensor, axis: int = -1) -> DiffTensor:
    """Sum along ``axis`` that does not depend on the order of the entries."""
    shape = a.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return DiffTensor(_sorted_sum(a.value, axis), (a,), backward, "ordered_sum")


def termwise_matmul(x, w) -> DiffTensor:
    """
    x[..., K] @ w[K, J], accumulated one k at a time.

    Every output row goes through the same elementwise steps, so a row's
    value never depends on where it sits in the batch. Meant for the
    narrow token projections; use ``matmul`` for wide layers.
    """
    x, w = _wrap(x), _wrap(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"termwise_matmul: cannot multiply {x.shape} by {w.shape}")
    out = np.zeros(x.shape[:-1] + (w.shape[1],))
    for k in range(w.shape[0]):
        out += x.value[..., k:k + 1] * w.value[k]

    def backward(g):
        gx = g @ w.value.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.value.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return DiffTensor(out, (x, w), backward, "termwise_matmul")


def pair_scores(q, k) -> DiffTensor:
    """
    s[b, i, j] = sum_d q[b, i, d] * k[b, j, d], accumulated one d at a time.

    Relabeling i or j relabels the output exactly.
    """
    q, k = _wrap(q), _wrap(k)
    if q.ndim != 3 or q.shape != k.shape:
        raise ShapeError(f"pair_scores: incompatible shapes {q.shape} and {k.shape}")
    b, m, width = q.shape
    out = np.zeros((b, m, m))
    for d in range(width):
        out += q.value[:, :, None, d] * k.value[:, None, :, d]

    def backward(g):
        gq = g @ k.value if q.requires_grad else None
        gk = g.transpose(0, 2, 1) @ q.value if k.requires_grad else None
        return gq, gk

    return DiffTensor(out, (q, k), backward, "pair_scores")


def square(a: DiffTensor) -> DiffTensor:
    return DiffTensor(a.value * a.value, (a,), lambda g: (2.0 * a.value * g,), "square")


@dataclass(frozen=True)
class ConvSpec:
    """Kernel size k, dilation d and group count of a grouped convolution."""
    kernel_size: int
    dilation: int
    groups: int

    def __post_init__(self):
        if self.kernel_size < 1 or self.dilation < 1 or self.groups < 1:
            raise ConfigError(f"invalid conv spec {self}")

    @property
    def span(self) -> int:
        """Steps consumed from the sequence: T' = T - k*d."""
        return self.kernel_size * self.dilation

    def out_length(self, t_len: int) -> int:
        return t_len - self.span


def grouped_dilated_conv(x: DiffTensor, weights: DiffTensor, spec: ConvSpec) -> DiffTensor:
    """
    z_t = sum_{i=1..k} w_i * x_{t-i*d}, one kernel per series.

    Args:
        x: N x T x M input
        weights: M x k; column i-1 holds w_i for every series
        spec: kernel size, dilation and groups (= M)

    Returns:
        N x (T - k*d) x M; series never mix
    """
    x, weights = _wrap(x), _wrap(weights)
    if x.ndim != 3:
        raise ShapeError(f"conv input must be N x T x M, got {x.shape}")
    n, t_len, m = x.shape
    k, d = spec.kernel_size, spec.dilation
    if spec.groups != m or weights.shape != (m, k):
        raise ShapeError(f"conv weights {weights.shape} / groups {spec.groups} do not fit {m} series, k={k}")
    t_out = spec.out_length(t_len)
    if t_out < 1:
        raise ShapeError(f"sequence of length {t_len} too short for k={k}, d={d}")

    # output j reads input (k - i)*d + j for tap i
    offsets = [(k - i) * d for i in range(1, k + 1)]
    out = np.zeros((n, t_out, m))
    for i, off in enumerate(offsets):
        out += x.value[:, off:off + t_out, :] * weights.value[:, i]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            for i, off in enumerate(offsets):
                gx[:, off:off + t_out, :] += g * weights.value[:, i]
        if weights.requires_grad:
            gw = np.empty((m, k))
            for i, off in enumerate(offsets):
                gw[:, i] = (g * x.value[:, off:off + t_out, :]).sum(axis=(0, 1))
        return gx, gw

    return DiffTensor(out, (x, weights), backward, f"conv_k{k}_d{d}")


def gated_activation(z_alpha: DiffTensor, z_beta: DiffTensor) -> DiffTensor:
    """sigmoid(z_alpha) * tanh(z_beta)."""
    if z_alpha.shape != z_beta.shape:
        raise ShapeError(f"gate shapes differ: {z_alpha.shape} vs {z_beta.shape}")
    return mul(sigmoid(z_alpha), tanh(z_beta))


def slice_attention(
    z: DiffTensor,
    lift_u: DiffTensor,
    lift_b: DiffTensor,
    w_q: DiffTensor,
    w_k: DiffTensor,
    w_v: DiffTensor,
    d_k: Optional[int] = None,
    return_weights: bool = False
):
    """
    Self-attention across the M series of every time slice.

    Each scalar z[n, t, m] is lifted to a d_k token e = z*u + b; queries,
    keys and values are e @ w_q, e @ w_k, e @ w_v, shared by every t.

    Args:
        z: N x T x M latent
        lift_u, lift_b: (d_k,) token embedding
        w_q, w_k: d_k x d_k projections
        w_v: d_k x 1 value projection
        d_k: expected token width (checked against the weights)
        return_weights: also return the N x T x M x M attention weights

    Returns:
        N x T x M attended latent (and the weights if requested)
    """
    if z.ndim != 3:
        raise ShapeError(f"attention input must be N x T x M, got {z.shape}")
    width = lift_u.shape[0]
    if d_k is not None and d_k != width:
        raise ConfigError(f"d_k={d_k} but the token lift has width {width}")
    if width < 1:
        raise ConfigError("d_k must be >= 1")
    if lift_b.shape != (width,) or w_q.shape != (width, width) or w_k.shape != (width, width) \
            or w_v.shape != (width, 1):
        raise ShapeError("attention projection shapes do not match the token width")

    # every reduction over the series axis is order independent, so
    # relabeling series relabels the output bit for bit
    n, t_len, m = z.shape
    tokens = add(mul(reshape(z, (n * t_len, m, 1)), reshape(lift_u, (1, 1, width))), lift_b)
    queries = termwise_matmul(tokens, w_q)
    keys = termwise_matmul(tokens, w_k)
    values = termwise_matmul(tokens, w_v)
    scores = scale(pair_scores(queries, keys), 1.0 / np.sqrt(width))
    weights = softmax(scores, axis=-1, ordered=True)
    mixed = mul(weights, reshape(values, (n * t_len, 1, m)))
    out = reshape(ordered_sum(mixed, axis=-1), (n, t_len, m))
    if return_weights:
        return out, weights.value.reshape(n, t_len, m, m)
    return out


def residual_attention_block(z: DiffTensor, lift_u, lift_b, w_q, w_k, w_v) -> DiffTensor:
    """sigmoid(attention(z)) + z."""
    return add(sigmoid(slice_attention(z, lift_u, lift_b, w_q, w_k, w_v)), z)


def dense(x: DiffTensor, w: DiffTensor, b: DiffTensor) -> DiffTensor:
    """x @ w + b over the last axis."""
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match layer width {w.shape[1]}")
    return add(matmul(x, w), b)


def softmax_cross_entropy(logits: DiffTensor, labels: Sequence[int], reduction: str = "mean") -> DiffTensor:
    """
    Cross-entropy of integer labels under softmax(logits).

    Args:
        logits: N x C
        labels: N class indices in [0, C)
        reduction: "mean" over the batch or "sum"
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    if n == 0:
        raise ValidationError("cross-entropy of an empty batch")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    if reduction not in ("mean", "sum"):
        raise ValidationError(f"unknown reduction {reduction!r}")

    log_probs = special.log_softmax(logits.value, axis=1)
    rows = np.arange(n)
    total = -log_probs[rows, labels].sum()
    divisor = float(n) if reduction == "mean" else 1.0

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        return (probs * (g / divisor),)

    return DiffTensor(np.asarray(total / divisor), (logits,), backward, "cross_entropy")


def grad_check(
    f: Callable[[List[DiffTensor]], DiffTensor],
    params: Sequence[np.ndarray],
    h: float = 1e-5,
    n_coords: int = 200,
    abs_floor: float = 1e-6,
    seed: int = 0
) -> float:
    """
    Compare analytic gradients with central differences.

    Args:
        f: builds a scalar graph from one leaf per entry of ``params``
        params: evaluation point
        h: finite-difference step
        n_coords: coordinates checked when there are more than this many
        abs_floor: denominator floor for the relative error
        seed: coordinate sampling seed

    Returns:
        Max over checked coordinates of |a - n| / max(|a|, |n|, abs_floor)
    """
    base = [np.array(p, dtype=np.float64) for p in params]
    leaves = [DiffTensor.leaf(p) for p in base]
    out = f(leaves)
    if out.value.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.value).all():
        raise ComputeError("grad_check: function value is not finite")
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]

    sizes = [p.size for p in base]
    total = int(np.sum(sizes))
    if total == 0:
        return 0.0
    if total <= n_coords:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=n_coords, replace=False))
    bounds = np.cumsum([0] + sizes)

    def evaluate(values: List[np.ndarray]) -> float:
        result = float(f([DiffTensor.constant(v) for v in values]).value)
        if not np.isfinite(result):
            raise ComputeError("grad_check: non-finite value at a perturbed point")
        return result

    worst = 0.0
    for coord in flat:
        which = int(np.searchsorted(bounds, coord, side="right") - 1)
        idx = np.unravel_index(int(coord - bounds[which]), base[which].shape)
        shifted = [p.copy() for p in base]
        shifted[which][idx] += h
        upper = evaluate(shifted)
        shifted[which][idx] -= 2 * h
        lower = evaluate(shifted)
        numeric = (upper - lower) / (2 * h)
        exact = float(analytic[which][idx])
        if not np.isfinite(exact):
            raise ComputeError(f"grad_check: non-finite analytic gradient at parameter {which}{idx}")
        err = abs(exact - numeric) / max(abs(exact), abs(numeric), abs_floor)
        worst = max(worst, err)
    logger.debug(f"grad_check checked {len(flat)} of {total} coordinates, max relative error {worst:.3e}")
    return worst

