"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a new :class:`Tensor`. When any operand requires a
gradient, the result keeps references to its operands plus a closure mapping
the output gradient to operand gradients; :func:`backward` walks that record
in reverse topological order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    CheckInvalidError,
    ContractError,
    DimensionError,
    DomainError,
    EmptyInputError,
    NumericError,
)

LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, float(x)))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a forward result, recording the op only if a parent needs grads."""
    # a sum is non-finite iff some entry is (entries are far below overflow)
    if not math.isfinite(data.sum()):
        raise NumericError("non-finite value produced by forward operation")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Public hook for fused operations defined outside this module.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    return _node(np.asarray(data, dtype=np.float64), parents, backward_fn)


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _need_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-d tensor, got shape {t.shape}")


# --------------------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(t: Tensor) -> Tensor:
    _need_2d(t, "transpose")
    return _node(t.data.T.copy(), (t,), lambda g: (g.T,))


def add_rowvec(t: Tensor, b: Tensor) -> Tensor:
    """Add ``b[d]`` to every row of ``t[n x d]``."""
    _need_2d(t, "add_rowvec")
    if b.shape != (t.shape[1],):
        raise DimensionError(f"add_rowvec: bias {b.shape} does not fit {t.shape}")
    return _node(t.data + b.data, (t, b), lambda g: (g, g.sum(axis=0)))


def add_colvec(t: Tensor, b: Tensor) -> Tensor:
    """Add ``b[d]`` to every column of ``t[d x n]``."""
    _need_2d(t, "add_colvec")
    if b.shape != (t.shape[0],):
        raise DimensionError(f"add_colvec: bias {b.shape} does not fit {t.shape}")
    return _node(t.data + b.data[:, None], (t, b), lambda g: (g, g.sum(axis=1)))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map ``x @ w + b`` for ``x[n x d_in]``."""
    return add_rowvec(matmul(x, w), b)


# --------------------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(t: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(t.data * s, (t,), lambda g: (g * s,))


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _node
        y = np.exp(t.data)
    return _node(y, (t,), lambda g: (g * y,))


def log(t: Tensor) -> Tensor:
    x = t.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _node(np.log(x), (t,), lambda g: (g / x,))


def relu(t: Tensor) -> Tensor:
    on = t.data > 0
    return _node(np.where(on, t.data, 0.0), (t,), lambda g: (g * on,))


def gelu(t: Tensor) -> Tensor:
    """Tanh-approximated GELU; smooth, so finite differences behave near zero."""
    x = t.data
    c = math.sqrt(2.0 / math.pi)
    x2 = x * x
    th = np.tanh(c * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _node(y, (t,), bw)


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"exp": exp, "log": log, "relu": relu, "gelu": gelu}


def elementwise(kind: str, *args):
    """Dispatch by name: add/sub/mul take two tensors, scale a tensor and a
    float, exp/log/relu/gelu a single tensor."""
    if kind in _BINARY:
        return _BINARY[kind](*args)
    if kind == "scale":
        return scale(*args)
    if kind in _UNARY:
        return _UNARY[kind](*args)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def dropout(t: Tensor, rate: float, rng=None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or no generator is given."""
    if rate <= 0.0 or rng is None:
        return t
    keep = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
    return _node(t.data * keep, (t,), lambda g: (g * keep,))


def detach(t: Tensor) -> Tensor:
    return Tensor(t.data)


# --------------------------------------------------------------------------- reductions


def sum(t: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = t.shape
    return _node(np.array([t.data.sum()]), (t,), lambda g: (np.full(shape, g[0]),))


def mean(t: Tensor) -> Tensor:
    n = t.data.size
    shape = t.shape
    return _node(np.array([t.data.mean()]), (t,), lambda g: (np.full(shape, g[0] / n),))


def add_all(terms: Iterable[Tensor]) -> Tensor:
    """Sum a list of same-shape tensors with a single recorded node."""
    terms = list(terms)
    if not terms:
        raise ContractError("add_all of an empty list")
    for t in terms[1:]:
        _same_shape(terms[0], t, "add_all")
    data = terms[0].data.copy()
    for t in terms[1:]:
        data = data + t.data
    return _node(data, terms, lambda g: tuple(g for _ in terms))


# --------------------------------------------------------------------------- normalisation


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"log_softmax: axis {axis} invalid for shape {t.shape}")
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _node(y, (t,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)
    return _node(p, (t,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise each row of ``t[n x d]`` then apply ``gain`` and ``bias``."""
    _need_2d(t, "layer_norm")
    d = t.shape[1]
    if d <= 1:
        raise DimensionError("layer_norm needs feature dimension > 1")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError("layer_norm: gain/bias shape mismatch")
    x = t.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(xhat * gd + bias.data, (t, gain, bias), bw)


def normalize_columns(t: Tensor) -> Tensor:
    """Scale every column of ``t[d x n]`` to unit Euclidean norm."""
    _need_2d(t, "normalize_columns")
    x = t.data
    norms = np.sqrt((x * x).sum(axis=0, keepdims=True))
    if np.any(norms == 0):
        raise DomainError("zero-norm column cannot be normalised")
    y = x / norms
    return _node(y, (t,), lambda g: ((g - y * (g * y).sum(axis=0, keepdims=True)) / norms,))


def masked_logsumexp(t: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise log-sum-exp of ``t[r x n]`` restricted to ``mask`` entries."""
    _need_2d(t, "masked_logsumexp")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != t.shape:
        raise DimensionError("masked_logsumexp: mask shape mismatch")
    if not np.all(mask.any(axis=1)):
        raise ContractError("masked_logsumexp: a row has no selected entries")
    x = np.where(mask, t.data, -np.inf)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    p = e / s
    return _node(out, (t,), lambda g: (p * g[:, None],))


def take(t: Tensor, rows: Sequence[int], cols: Sequence[int]) -> Tensor:
    """Gather individual entries ``t[rows[i], cols[i]]`` into a vector."""
    _need_2d(t, "take")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    shape = t.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (r, c), g)
        return (out,)

    return _node(t.data[r, c], (t,), bw)


# --------------------------------------------------------------------------- indexing


def columns(t: Tensor, idx: Sequence[int]) -> Tensor:
    _need_2d(t, "columns")
    ix = np.asarray(idx, dtype=np.intp)
    if ix.size and (ix.min() < 0 or ix.max() >= t.shape[1]):
        raise ContractError("columns: index out of range")
    shape = t.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (slice(None), ix), g)
        return (out,)

    return _node(t.data[:, ix], (t,), bw)


def overwrite_columns(t: Tensor, idx: Sequence[int], vec: Tensor) -> Tensor:
    """Replace the listed columns of ``t[d x n]`` by the vector ``vec[d]``."""
    _need_2d(t, "overwrite_columns")
    d, n = t.shape
    if vec.shape != (d,):
        raise DimensionError(f"overwrite_columns: vector {vec.shape} does not fit {t.shape}")
    ix = np.unique(np.asarray(idx, dtype=np.intp))
    if ix.size and (ix[0] < 0 or ix[-1] >= n):
        raise ContractError("overwrite_columns: index out of range")
    out = t.data.copy()
    out[:, ix] = vec.data[:, None]

    def bw(g):
        gt = g.copy()
        gt[:, ix] = 0.0
        return gt, g[:, ix].sum(axis=1)

    return _node(out, (t, vec), bw)


def add_const(t: Tensor, const: np.ndarray) -> Tensor:
    """Add a non-differentiable array of the same shape."""
    if const.shape != t.shape:
        raise DimensionError("add_const: shape mismatch")
    return _node(t.data + const, (t,), lambda g: (g,))


# --------------------------------------------------------------------------- convolution


def conv_output_length(T: int, stride: int) -> int:
    return -(-T // stride)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """1-d convolution of ``x[d_in x T]`` with ``kernels[d_out x d_in x k]``.

    Zero padding is split as evenly as possible (extra column on the right) so
    that the output length is ``ceil(T / stride)``.
    """
    _need_2d(x, "conv1d")
    if kernels.data.ndim != 3:
        raise DimensionError("conv1d: kernels must be d_out x d_in x k")
    d_out, d_in, k = kernels.shape
    if stride < 1 or k < 1:
        raise ContractError("conv1d: stride and kernel width must be >= 1")
    if x.shape[0] != d_in:
        raise DimensionError(f"conv1d: input channels {x.shape[0]} != kernel channels {d_in}")
    T = x.shape[1]
    if T == 0:
        raise EmptyInputError("conv1d: empty input sequence")
    S = conv_output_length(T, stride)
    pad = max((S - 1) * stride + k - T, 0)
    left = pad // 2
    xp = np.zeros((d_in, T + pad))
    xp[:, left:left + T] = x.data
    idx = np.arange(S)[:, None] * stride + np.arange(k)[None, :]
    patches = xp[:, idx].transpose(1, 0, 2).reshape(S, d_in * k)
    wm = kernels.data.reshape(d_out, d_in * k)
    out = wm @ patches.T
    parents: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        if bias.shape != (d_out,):
            raise DimensionError("conv1d: bias shape mismatch")
        out = out + bias.data[:, None]
        parents = (x, kernels, bias)

    def bw(g):
        gw = (g @ patches).reshape(d_out, d_in, k)
        gp = (g.T @ wm).reshape(S, d_in, k)
        gxp = np.zeros_like(xp)
        span = stride * (S - 1) + 1
        for j in range(k):
            gxp[:, j:j + span:stride] += gp[:, :, j].T
        gx = gxp[:, left:left + T]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=1)

    return _node(out, parents, bw)


# --------------------------------------------------------------------------- attention


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int) -> Tensor:
    """Scaled dot-product attention over rows of ``q, k, v[S x d]``.

    The feature axis is split into ``n_heads`` contiguous groups; every query
    attends to every key (no causal or padding mask).
    """
    for t in (q, k, v):
        _need_2d(t, "multihead_attention")
    _same_shape(q, k, "multihead_attention")
    _same_shape(q, v, "multihead_attention")
    S, d = q.shape
    if d % n_heads:
        raise DimensionError("multihead_attention: d not divisible by n_heads")
    dh = d // n_heads
    sc = 1.0 / math.sqrt(dh)

    def split(a):
        return a.reshape(S, n_heads, dh).transpose(1, 0, 2)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scores = qh @ kh.transpose(0, 2, 1) * sc
    scores -= scores.max(axis=-1, keepdims=True)
    a = np.exp(scores)
    a /= a.sum(axis=-1, keepdims=True)
    out = (a @ vh).transpose(1, 0, 2).reshape(S, d)

    def bw(g):
        gh = split(g)
        gv = a.transpose(0, 2, 1) @ gh
        ga = gh @ vh.transpose(0, 2, 1)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * sc
        gq = gs @ kh
        gk = gs.transpose(0, 2, 1) @ qh

        def merge(x):
            return x.transpose(1, 0, 2).reshape(S, d)

        return merge(gq), merge(gk), merge(gv)

    return _node(out, (q, k, v), bw)


# --------------------------------------------------------------------------- parameters and backprop


class ParamStore:
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, params: dict[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, t in (params or {}).items():
            self[name] = t

    def __setitem__(self, name: str, t: Tensor) -> None:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._params[name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def num_values(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()]))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({n: Tensor(t.data.copy()) for n, t in self.items()})


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


def backward(loss: Tensor, params: ParamStore | None = None) -> None:
    """Populate ``grad`` on every reachable leaf (and every parameter).

    Parameters that the loss does not depend on receive a zero gradient.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(_topo_order(loss)):
            g = grads.get(id(node))
            if g is None:
                continue
            if node._backward is None:
                node.grad = g
                continue
            del grads[id(node)]
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    if params is not None:
        for _, p in params.items():
            g = grads.get(id(p))
            p.grad = np.zeros_like(p.data) if g is None else g


# --------------------------------------------------------------------------- finite differences


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_error <= self.tol


def finite_diff_check(
    f: Callable[[ParamStore], Tensor],
    params: ParamStore,
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare backward gradients of ``f`` against central differences.

    The error for one parameter is ``max|analytic - numeric|`` over the checked
    entries, divided by the larger of the two gradients' max magnitude (the
    analytic one taken over the whole tensor) and floored at
    ``atol * max(1, |f|)`` so that gradients that vanish analytically are
    judged against the round-off level of ``f`` itself.
    ``max_entries`` caps how many randomly chosen entries are perturbed per
    parameter.
    """
    first = f(params).item()
    if f(params).item() != first:
        raise CheckInvalidError("function is not deterministic between calls")
    loss = f(params)
    backward(loss, params)
    analytic = {n: p.grad.copy() for n, p in params.items()}
    floor = atol * max(1.0, abs(first))
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = np.arange(n)
        ga = analytic[name].reshape(-1)
        numeric = np.empty(len(entries))
        for j, e in enumerate(entries):
            orig = flat[e]
            flat[e] = orig + step
            fp = f(params).item()
            flat[e] = orig - step
            fm = f(params).item()
            flat[e] = orig
            numeric[j] = (fp - fm) / (2 * step)
        diff = np.abs(ga[entries] - numeric).max(initial=0.0)
        denom = max(np.abs(ga).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
        report.errors[name] = float(diff / denom)
    return report
