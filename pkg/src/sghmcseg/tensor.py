"""Dense numpy tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every primitive records its parents and a
closure that pushes the output gradient back to them.  ``backward`` walks the
recorded graph in reverse topological order, visiting each node once.

Values keep the dtype they were created with, so a graph built from float64
leaves runs entirely in 64-bit (used by the gradient and metric oracles) while
training runs in float32.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

_DEBUG = False


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf while debug mode was on."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (backward before forward, non-scalar root, ...)."""


def set_debug(flag: bool) -> None:
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def debug_mode(flag: bool = True):
    """Check every primitive output for non-finite values inside the block."""
    global _DEBUG
    prev = _DEBUG
    _DEBUG = bool(flag)
    try:
        yield
    finally:
        _DEBUG = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-d array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "",
                 name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = _op
        self.name = name
        if _DEBUG and _parents and not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite output from primitive {_op!r}")

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'})"

    # -- graph traversal --------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise GraphError("backward() without an explicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise GraphError("output does not depend on any tensor that requires grad")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # intermediate gradients are not needed after propagation
                    node.grad = None

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def log(self):
        return log(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def tensor(data, requires_grad: bool = False, dtype=np.float32, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    out = Tensor(a.data + b.data, _parents=(a, b), _op="add")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(_unbroadcast(g, a.shape))
            b._accumulate(_unbroadcast(g, b.shape))
        out._backward = _bw
    return out


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    out = Tensor(a.data * b.data, _parents=(a, b), _op="mul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * a.data, b.shape))
        out._backward = _bw
    return out


def div(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    out = Tensor(a.data / b.data, _parents=(a, b), _op="div")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))
        out._backward = _bw
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, _parents=(a,), _op="neg")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(-g)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), _parents=(a,), _op="log")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g / a.data)
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, _parents=(a,), _op="square")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(2.0 * g * a.data)
    return out


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input was inside the range."""
    out = Tensor(np.clip(a.data, lo, hi), _parents=(a,), _op="clamp")
    if out.requires_grad:
        def _bw(g):
            m = np.ones(a.shape, dtype=bool)
            if lo is not None:
                m &= a.data >= lo
            if hi is not None:
                m &= a.data <= hi
            a._accumulate(g * m)
        out._backward = _bw
    return out


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, a.data * a.data.dtype.type(slope)), _parents=(a,),
                 _op="leaky_relu")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(np.where(pos, g, g * g.dtype.type(slope)))
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), _parents=(a,), _op="sum")
    if out.requires_grad:
        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape))
        out._backward = _bw
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    s = sum_(a, axis, keepdims)
    return mul(s, np.asarray(1.0 / n, dtype=a.dtype))


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), _parents=(a,), _op="reshape")
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(g.reshape(a.shape))
    return out


def getitem(a: Tensor, idx) -> Tensor:
    out = Tensor(a.data[idx], _parents=(a,), _op="getitem")
    if out.requires_grad:
        def _bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accumulate(full)
        out._backward = _bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors),
                 _op="concat")
    if out.requires_grad:
        sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def _bw(g):
            for t, piece in zip(tensors, np.split(g, sizes, axis=axis)):
                t._accumulate(piece)
        out._backward = _bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data, _parents=(a, b), _op="matmul")
    if out.requires_grad:
        def _bw(g):
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)
        out._backward = _bw
    return out


# ---------------------------------------------------------------------------
# neural-network primitives (NCHW layout)
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = 1) -> Tensor:
    """Softmax over ``axis`` (the channel axis for NCHW maps)."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, _parents=(a,), _op="softmax")
    if out.requires_grad:
        def _bw(g):
            a._accumulate(s * (g - (g * s).sum(axis=axis, keepdims=True)))
        out._backward = _bw
    return out


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation.  x: (N, Cin, H, W), w: (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, kernel expects {cin_w}")
    p = int(padding)
    ho, wo = h + 2 * p - kh + 1, wd + 2 * p - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError("conv2d kernel larger than padded input")

    # channels-last columns ordered (kh, kw, cin) so each tap is a contiguous slab
    xl = x.data.transpose(0, 2, 3, 1)
    if p:
        xp = np.zeros((n, h + 2 * p, wd + 2 * p, cin), dtype=x.dtype)
        xp[:, p:p + h, p:p + wd] = xl
    else:
        xp = xl
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp).reshape(-1, cin)
    else:
        cols6 = np.empty((n, ho, wo, kh, kw, cin), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols6[:, :, :, i, j] = xp[:, i:i + ho, j:j + wo]
        cols = cols6.reshape(-1, kh * kw * cin)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    y = cols @ wmat.T
    if b is not None:
        y += b.data
    out_data = y.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)
    out = Tensor(np.ascontiguousarray(out_data), _parents=parents, _op="conv2d")

    if out.requires_grad:
        def _bw(g):
            gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
            if w.requires_grad:
                w._accumulate((gm.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2))
            if b is not None and b.requires_grad:
                b._accumulate(gm.sum(axis=0))
            if x.requires_grad:
                if kh == 1 and kw == 1:
                    dxp = (gm @ wmat).reshape(n, ho, wo, cin)
                elif cout < cin:
                    # transposed convolution: im2col over the (narrower) output gradient
                    gl = g.transpose(0, 2, 3, 1)
                    gp = np.zeros((n, ho + 2 * (kh - 1), wo + 2 * (kw - 1), cout), dtype=g.dtype)
                    gp[:, kh - 1:kh - 1 + ho, kw - 1:kw - 1 + wo] = gl
                    hp, wp = ho + kh - 1, wo + kw - 1
                    gcols = np.empty((n, hp, wp, kh, kw, cout), dtype=g.dtype)
                    for i in range(kh):
                        for j in range(kw):
                            gcols[:, :, :, i, j] = gp[:, i:i + hp, j:j + wp]
                    wflip = w.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, -1)
                    dxp = (gcols.reshape(-1, kh * kw * cout) @ wflip.T).reshape(n, hp, wp, cin)
                else:
                    dcols = (gm @ wmat).reshape(n, ho, wo, kh, kw, cin)
                    dxp = np.zeros((n, ho + kh - 1, wo + kw - 1, cin), dtype=g.dtype)
                    for i in range(kh):
                        for j in range(kw):
                            dxp[:, i:i + ho, j:j + wo] += dcols[:, :, :, i, j]
                if p:
                    dxp = dxp[:, p:p + h, p:p + wd]
                x._accumulate(dxp.transpose(0, 3, 1, 2))
        out._backward = _bw
    return out


def max_pool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], _parents=(x,),
                 _op="max_pool2x2")
    if out.requires_grad:
        def _bw(g):
            gb = np.zeros(blocks.shape, dtype=g.dtype)
            np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
            gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
            x._accumulate(gx)
        out._backward = _bw
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two spatial axes."""
    n, c, h, w = x.shape
    up = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)
    out = Tensor(np.ascontiguousarray(up), _parents=(x,), _op="upsample2x")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)))
    return out


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
                  eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalisation over the spatial axes, then optional scale/shift."""
    c = x.shape[1]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    g4 = gamma.data.reshape(1, c, 1, 1) if gamma is not None else 1.0
    out_data = xhat * g4
    if beta is not None:
        out_data = out_data + beta.data.reshape(1, c, 1, 1)
    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    out = Tensor(out_data, _parents=parents, _op="instance_norm")
    if out.requires_grad:
        def _bw(g):
            if gamma is not None and gamma.requires_grad:
                gamma._accumulate((g * xhat).sum(axis=(0, 2, 3)))
            if beta is not None and beta.requires_grad:
                beta._accumulate(g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gh = g * g4
                dx = (gh - gh.mean(axis=(2, 3), keepdims=True)
                      - xhat * (gh * xhat).mean(axis=(2, 3), keepdims=True)) * inv
                x._accumulate(dx)
        out._backward = _bw
    return out


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, active: bool = True) -> Tensor:
    """Inverted dropout: keep with probability 1-p and rescale by 1/(1-p)."""
    if not active or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if rng is None:
        raise ValueError("dropout sampling needs an rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    out = Tensor(x.data * mask, _parents=(x,), _op="dropout")
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * mask)
    return out


# ---------------------------------------------------------------------------
# graph-level helpers
# ---------------------------------------------------------------------------

class Graph:
    """A forward function over named inputs, evaluated define-by-run.

    ``fn`` receives a mapping name -> Tensor and returns a mapping of named
    output Tensors (or a single Tensor, stored under ``"out"``).
    """

    def __init__(self, fn: Callable[..., Mapping[str, Tensor] | Tensor],
                 input_names: Iterable[str]):
        self.fn = fn
        self.input_names = tuple(input_names)

    def __call__(self, inputs: Mapping[str, Tensor], **kwargs) -> dict[str, Tensor]:
        return evaluate(self, inputs, **kwargs)


def evaluate(graph: Graph, inputs: Mapping[str, Tensor | np.ndarray], **kwargs) -> dict[str, Tensor]:
    missing = [k for k in graph.input_names if k not in inputs]
    if missing:
        raise KeyError(f"unbound graph inputs: {missing}")
    bound = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in inputs.items()}
    out = graph.fn(bound, **kwargs)
    if isinstance(out, Tensor):
        out = {"out": out}
    return dict(out)


def backward(output: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Run reverse mode from a scalar output; return gradients of ``params``.

    Parameters with no path to ``output`` get a zero gradient.
    """
    if not isinstance(output, Tensor):
        raise GraphError("backward needs the Tensor produced by a forward pass")
    if output.data.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
    if params is not None:
        for p in params.values():
            p.grad = None
    output.backward()
    if params is None:
        return {}
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def finite_diff_check(fn: Callable[[Mapping[str, np.ndarray]], Tensor],
                      point: Mapping[str, np.ndarray], eps: float = 1e-6,
                      names: Iterable[str] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps a dict of float64 arrays to a scalar Tensor; it must be
    deterministic (re-seed any dropout stream inside ``fn``).  The error per
    coordinate is |a - c| / (|a| + |c| + 1e-12).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    point = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    names = list(point) if names is None else list(names)

    leaves = {k: Tensor(v, requires_grad=(k in names)) for k, v in point.items()}
    out = fn(leaves)
    if not np.isfinite(out.data).all():
        raise NonFiniteError("non-finite value at the check point")
    grads = backward(out, {k: leaves[k] for k in names})

    worst = 0.0
    for k in names:
        base = point[k]
        analytic = grads[k].ravel()
        numeric = np.empty(base.size)
        flat = base.ravel()
        for i in range(base.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn({kk: Tensor(vv) for kk, vv in point.items()}).data
            flat[i] = orig - eps
            fm = fn({kk: Tensor(vv) for kk, vv in point.items()}).data
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite value while perturbing {k}[{i}]")
            numeric[i] = (float(fp) - float(fm)) / (2.0 * eps)
        err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
