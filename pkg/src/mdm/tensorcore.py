"""Dense double-precision tensors with define-by-run reverse-mode autodiff.

Only the operations needed by the mask optimizer and the built-in models are
provided.  A graph is recorded only while a :class:`Session` is active and at
least one input requires a gradient; outside a session every op is a plain
numpy computation.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Session() as s:
    ...     loss = sq_l2(x, Tensor([0.0]))
    ...     s.backward(loss)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class AutodiffError(RuntimeError):
    """Misuse of a session: double backward, foreign node, non-scalar loss."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in tensor data."""


_ACTIVE: list["Session"] = []


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """An n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_session")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, _op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = _op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._session: Session | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(*shape: int, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    _check_finite(data, op)
    out.data = data
    out.grad = None
    out.op = op
    out._session = None
    session = _ACTIVE[-1] if _ACTIVE else None
    track = session is not None and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = parents
        out._backward = backward
        session._record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


class Session:
    """Records one forward graph and runs exactly one reverse sweep over it.

    Nodes are recorded in creation order, which is already a topological
    order, so the reverse sweep is a single backwards pass over the list.
    """

    def __init__(self) -> None:
        self._nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Session":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def _record(self, node: Tensor) -> None:
        if self._consumed:
            raise AutodiffError("session already consumed by backward; open a new one")
        node._session = self
        self._nodes.append(node)

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, session: Session | None = None) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient."""
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if session is None:
        session = loss._session
    if session is None or loss._session is not session:
        raise AutodiffError("loss was not recorded in this session")
    if session._consumed:
        raise AutodiffError("backward already ran for this session; re-record the graph")
    session._consumed = True

    nodes = session._nodes
    end = len(nodes) - 1
    while nodes[end] is not loss:
        end -= 1
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(nodes[: end + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent._backward is None:
                leaves[key] = parent
    for key, leaf in leaves.items():
        leaf.grad = grads[key].reshape(leaf.shape)


# --- elementwise ---------------------------------------------------------


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if like.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum())
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def clamp01(a: Tensor) -> Tensor:
    # Gradient passes on the closed interval so cells sitting exactly on a
    # bound can still be pulled back inside.
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    return _node(np.clip(a.data, 0.0, 1.0), (a,), lambda g: (g * inside,), "clamp01")


def power(a: Tensor, q: float, floor: float = 1e-12) -> Tensor:
    """Elementwise ``a**q`` for nonnegative ``a``; derivative evaluated at ``max(a, floor)``."""
    if (a.data < 0).any():
        raise ValueError("power is defined here for nonnegative inputs only")
    q = float(q)
    base = np.maximum(a.data, floor)
    return _node(a.data ** q, (a,), lambda g: (g * q * base ** (q - 1.0),), "power")


# --- reductions and reshaping ---------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _node(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def repeat_channels(a: Tensor, channels: int) -> Tensor:
    """Stack an H×W tensor ``channels`` times into C×H×W."""
    if a.data.ndim != 2:
        raise ShapeError(f"repeat_channels expects H×W, got {a.shape}")
    out = np.broadcast_to(a.data, (channels,) + a.shape).copy()
    return _node(out, (a,), lambda g: (g.sum(axis=0),), "repeat_channels")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, back, "concat")


def take(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Gather elements by flat (row-major) index."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= a.size:
        raise ShapeError(f"take: indices out of range for {a.size} elements")

    def back(g):
        full = np.zeros(a.size)
        np.add.at(full, idx, g)
        return (full.reshape(a.shape),)

    return _node(a.data.reshape(-1)[idx], (a,), back, "take")


# --- layers ---------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``weight @ x + bias`` for a vector ``x``."""
    if x.data.ndim != 1 or weight.data.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"linear: weight {weight.shape} incompatible with input {x.shape}")
    out = weight.data @ x.data
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def back(g):
        grads = [weight.data.T @ g, np.outer(g, x.data)]
        if bias is not None:
            grads.append(g)
        return grads

    return _node(out, parents, back, "linear")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p))) if p else x


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a C_in×H×W input with C_out×C_in×k×k kernels."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: expected C×H×W input and 4-d kernels, got {x.shape}, {kernels.shape}")
    c_out, c_in, k, k2 = kernels.shape
    if c_in != x.shape[0] or k != k2:
        raise ShapeError(f"conv2d: kernels {kernels.shape} do not fit input {x.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    _, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if k > hp or k > wp:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {hp}×{wp}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1

    xp = _pad(x.data, padding)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * k * k)
    wmat = kernels.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape(c_out, ho, wo)
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} channels")
        out = out + bias.data[:, None, None]
        parents = (x, kernels, bias)
    else:
        parents = (x, kernels)

    def back(g):
        g2 = g.reshape(c_out, ho * wo)
        gx = None
        if x.requires_grad:
            dcols = (g2.T @ wmat).reshape(ho, wo, c_in, k, k).transpose(2, 3, 4, 0, 1)
            dxp = np.zeros((c_in, hp, wp))
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += dcols[:, i, j]
            gx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        gk = (g2 @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        grads = [gx, gk]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return _node(out, parents, back, "conv2d")


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if x.data.ndim != 3:
        raise ShapeError(f"avg_pool2d: expected C×H×W, got {x.shape}")
    c, h, w = x.shape
    if window < 1 or window > h or window > w or stride < 1:
        raise ShapeError(f"avg_pool2d: window {window} does not fit {h}×{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    win = sliding_window_view(x.data, (window, window), axis=(1, 2))[:, ::stride, ::stride]
    out = win.mean(axis=(3, 4))
    share = 1.0 / (window * window)

    def back(g):
        dx = np.zeros(x.shape)
        gs = g * share
        for i in range(window):
            for j in range(window):
                dx[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += gs
        return (dx,)

    return _node(out, (x,), back, "avg_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """C×H×W -> C, the spatial mean of each channel."""
    if x.data.ndim != 3:
        raise ShapeError(f"global_avg_pool: expected C×H×W, got {x.shape}")
    c, h, w = x.shape
    n = h * w
    return _node(x.data.mean(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to((g / n)[:, None, None], x.shape).copy(),), "global_avg_pool")


def interp_matrix(src: int, dst: int) -> np.ndarray:
    """Linear interpolation weights (dst × src) under half-pixel centers.

    Source coordinate of output ``i`` is ``(i + 0.5) * src / dst - 0.5``,
    clamped to ``[0, src - 1]``.
    """
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0.0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    rows = np.arange(dst)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(d: Tensor, target: tuple[int, int]) -> Tensor:
    """Upsample an a×b grid to H×W (H >= a, W >= b) by bilinear interpolation."""
    if d.data.ndim != 2:
        raise ShapeError(f"bilinear_upsample expects a 2-d grid, got {d.shape}")
    a, b = d.shape
    h, w = target
    if h < a or w < b:
        raise ShapeError(f"bilinear_upsample: target {h}×{w} smaller than source {a}×{b}")
    rm, cm = interp_matrix(a, h), interp_matrix(b, w)
    return _node(rm @ d.data @ cm.T, (d,), lambda g: (rm.T @ g @ cm,), "bilinear_upsample")


# --- losses -----------------------------------------------------------------


def sq_l2(a, b) -> Tensor:
    """Squared Euclidean distance ``sum((a - b)**2)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sq_l2: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    return _node(np.asarray((diff * diff).sum()), (a, b),
                 lambda g: (2.0 * g * diff, -2.0 * g * diff), "sq_l2")


def l1_mean(d: Tensor) -> Tensor:
    """Mean absolute value; the subgradient at exactly 0 is taken as 0."""
    if d.size == 0:
        raise ShapeError("l1_mean of an empty tensor")
    n = d.size
    sign = np.sign(d.data)
    return _node(np.asarray(np.abs(d.data).mean()), (d,), lambda g: (g * sign / n,), "l1_mean")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = np.exp(z - z.max())
    return z / z.sum()


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_cross_entropy expects a logit vector, got {logits.shape}")
    k = logits.shape[0]
    if not 0 <= label < k:
        raise IndexError(f"label {label} out of range for {k} classes")
    z = logits.data - logits.data.max()
    logsum = np.log(np.exp(z).sum())
    p = np.exp(z - logsum)

    def back(g):
        onehot = np.zeros(k)
        onehot[label] = 1.0
        return (g * (p - onehot),)

    return _node(np.asarray(logsum - z[label]), (logits,), back, "softmax_cross_entropy")


# --- optimizer --------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls(m=[np.zeros(p.shape) for p in params],
                   v=[np.zeros(p.shape) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place to the leaf parameters."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and moment buffers differ in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros(p.shape)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: gradient {g.shape} does not match parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
