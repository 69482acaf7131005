"""Dense tensors with a recorded-tape reverse-mode gradient.

Arrays are channels-first ``(C, X, Y, Z)``; spatial axes are indexed in the
order x, y, z.  Every primitive is a small class with a ``forward`` that maps
numpy arrays to ``(output, saved)`` and a ``backward`` that maps the output
cotangent back to one cotangent per input.  When a :class:`Tape` is active and
any input requires a gradient, the call is appended to the tape; otherwise the
primitive runs as plain numpy.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "Node",
    "grad_eval",
    "conv3d",
    "conv3d_transposed",
    "concat_channels",
    "slice_channels",
    "relu",
    "softmax_channels",
    "log_softmax_channels",
    "nll_mean",
    "add",
    "scale",
    "tensor_sum",
    "SGD",
    "sgd_step",
]

_ACTIVE_TAPE: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "_ACTIVE_TAPE", default=None
)


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"only single-element tensors convert to float, got {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    """One executed primitive: which op, its inputs, output and saved context."""

    op: type
    inputs: tuple
    output: Tensor
    saved: Any
    kwargs: dict = field(default_factory=dict)


class Tape:
    """Ordered record of primitive calls, usable as a context manager.

    Nodes are appended in execution order, which is a topological order of
    the computation.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> List[np.ndarray]:
        """Re-execute every recorded node; returns the recomputed outputs."""
        values: Dict[int, np.ndarray] = {}
        outs = []
        for node in self.nodes:
            args = [values.get(id(t), t.data) for t in node.inputs]
            out, _ = node.op.forward(*args, **node.kwargs)
            values[id(node.output)] = out
            outs.append(out)
        return outs


def _apply(op: type, *inputs, **kwargs) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in inputs)
    out_data, saved = op.forward(*(t.data for t in tensors), **kwargs)
    needs = any(t.requires_grad for t in tensors)
    out = Tensor(out_data, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        tape.nodes.append(Node(op, tensors, out, saved, kwargs))
    return out


def grad_eval(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> Dict[str, np.ndarray]:
    """Reverse sweep over ``tape`` from the scalar ``loss``.

    Returns a mapping from parameter name to gradient.  Parameters that the
    loss does not depend on receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    cot: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = cot.pop(id(node.output), None)
        if g is None:
            continue
        if node.op is Conv3d:
            needs = tuple(t.requires_grad for t in node.inputs)
            grads = node.op.backward(node.saved, g, needs=needs, **node.kwargs)
        else:
            grads = node.op.backward(node.saved, g, **node.kwargs)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in cot:
                cot[key] = cot[key] + gi
            else:
                cot[key] = gi
    out: Dict[str, np.ndarray] = {}
    for p in params:
        key = p.name if p.name is not None else str(id(p))
        g = cot.get(id(p))
        out[key] = np.zeros_like(p.data) if g is None else g
    return out


# ---------------------------------------------------------------------------
# convolution helpers


def _im2col(xp: np.ndarray, k: int, s: int, out_sp) -> np.ndarray:
    C = xp.shape[0]
    X, Y, Z = out_sp
    cols = np.empty((C, k, k, k, X, Y, Z), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                cols[:, i, j, l] = xp[:, i : i + s * X : s, j : j + s * Y : s, l : l + s * Z : s]
    return cols.reshape(C * k**3, X * Y * Z)


def _col2im(dcols: np.ndarray, padded_shape, k: int, s: int, out_sp) -> np.ndarray:
    C = padded_shape[0]
    X, Y, Z = out_sp
    dcols = dcols.reshape(C, k, k, k, X, Y, Z)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    # fixed (i, j, l) order keeps the accumulation reproducible
    for i in range(k):
        for j in range(k):
            for l in range(k):
                dxp[:, i : i + s * X : s, j : j + s * Y : s, l : l + s * Z : s] += dcols[:, i, j, l]
    return dxp


def _shift(xp: np.ndarray, i: int, j: int, l: int, out_sp) -> np.ndarray:
    X, Y, Z = out_sp
    return xp[:, i : i + X, j : j + Y, l : l + Z].reshape(xp.shape[0], -1)


class Conv3d:
    """Cross-correlation; stride-1 calls accumulate one small matmul per kernel tap."""

    @staticmethod
    def forward(x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 5:
            raise DimensionError(f"conv3d expects (C,X,Y,Z) input and 5-d weights, got {x.shape}, {w.shape}")
        c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
        if x.shape[0] != c_in:
            raise DimensionError(f"weights expect {c_in} input channels, input has {x.shape[0]}")
        if w.shape[2:] != (k, k, k):
            raise DimensionError(f"kernel must be cubic, got {w.shape[2:]}")
        if b.shape != (c_out,):
            raise DimensionError(f"bias shape {b.shape} does not match {c_out} output channels")
        if stride < 1 or padding < 0:
            raise DimensionError("stride must be >= 1 and padding >= 0")
        sp = [n + 2 * padding for n in x.shape[1:]]
        if any(n < k for n in sp):
            raise DimensionError(f"padded extents {sp} smaller than kernel {k}")
        out_sp = tuple((n - k) // stride + 1 for n in sp)
        xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3) if padding else x
        if stride == 1:
            wt = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
            acc = np.zeros((c_out, int(np.prod(out_sp))), dtype=np.result_type(x, w))
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        acc += wt[i, j, l] @ _shift(xp, i, j, l, out_sp)
            out = acc.reshape((c_out,) + out_sp) + b[:, None, None, None]
            return out, (xp, w, out_sp, padding, xp.shape)
        cols = _im2col(xp, k, stride, out_sp)
        wm = w.reshape(c_out, -1)
        out = (wm @ cols).reshape((c_out,) + out_sp) + b[:, None, None, None]
        return out, (cols, w, out_sp, padding, xp.shape)

    @staticmethod
    def backward(saved, g, stride=1, padding=0, needs=(True, True, True)):
        data, w, out_sp, pad, xp_shape = saved
        c_out, c_in, k = w.shape[0], w.shape[1], w.shape[2]
        gm = g.reshape(c_out, -1)
        db = gm.sum(axis=1)
        if stride != 1:
            cols = data
            dw = (gm @ cols.T).reshape(w.shape)
            if not needs[0]:
                return None, dw, db
            dxp = _col2im(w.reshape(c_out, -1).T @ gm, xp_shape, k, stride, out_sp)
            if pad:
                dxp = dxp[:, pad:-pad, pad:-pad, pad:-pad]
            return dxp, dw, db
        xp = data
        dwt = np.empty((k, k, k, c_out, c_in), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                for l in range(k):
                    dwt[i, j, l] = gm @ _shift(xp, i, j, l, out_sp).T
        dw = dwt.transpose(3, 4, 0, 1, 2)
        if not needs[0]:
            return None, dw, db
        # input gradient: correlate g with the flipped, channel-swapped kernel
        q = k - 1 - pad
        in_sp = tuple(n - 2 * pad for n in xp.shape[1:])
        if q >= 0:
            gp = np.pad(g, ((0, 0),) + ((q, q),) * 3) if q else g
            wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 1, 0))
            acc = np.zeros((c_in, int(np.prod(in_sp))), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        acc += wf[i, j, l] @ _shift(gp, i, j, l, in_sp)
            return acc.reshape((c_in,) + in_sp), dw, db
        dxp = _col2im(w.reshape(c_out, -1).T @ gm, xp.shape, k, 1, out_sp)
        return dxp[:, pad:-pad, pad:-pad, pad:-pad], dw, db


def conv3d(x, w, b, stride: int = 1, padding: int = 0) -> Tensor:
    """3-d cross-correlation. ``w`` is ``(C_out, C_in, k, k, k)``."""
    return _apply(Conv3d, x, w, b, stride=stride, padding=padding)


class Conv3dTransposed:
    """Non-overlapping transposed convolution: kernel extent equals stride."""

    @staticmethod
    def forward(x, w, b, stride=2):
        if x.ndim != 4 or x.size == 0:
            raise DimensionError(f"conv3d_transposed expects a non-empty (C,X,Y,Z) input, got {x.shape}")
        if stride < 1:
            raise DimensionError("stride must be >= 1")
        c_in, c_out = w.shape[0], w.shape[1]
        if w.shape[2:] != (stride,) * 3:
            raise DimensionError(f"kernel extent must equal stride {stride}, got {w.shape[2:]}")
        if x.shape[0] != c_in:
            raise DimensionError(f"weights expect {c_in} input channels, input has {x.shape[0]}")
        if b.shape != (c_out,):
            raise DimensionError(f"bias shape {b.shape} does not match {c_out} output channels")
        X, Y, Z = x.shape[1:]
        s = stride
        xm = x.reshape(c_in, -1)
        wm = w.reshape(c_in, -1)  # (c_in, c_out*s^3)
        y = (wm.T @ xm).reshape(c_out, s, s, s, X, Y, Z)
        out = y.transpose(0, 4, 1, 5, 2, 6, 3).reshape(c_out, X * s, Y * s, Z * s)
        out = out + b[:, None, None, None]
        return out, (xm, wm, w.shape, x.shape)

    @staticmethod
    def backward(saved, g, stride=2):
        xm, wm, wshape, xshape = saved
        c_in, c_out, s = wshape[0], wshape[1], stride
        X, Y, Z = xshape[1:]
        db = g.sum(axis=(1, 2, 3))
        gr = g.reshape(c_out, X, s, Y, s, Z, s).transpose(0, 2, 4, 6, 1, 3, 5).reshape(c_out * s**3, -1)
        dw = (xm @ gr.T).reshape(wshape)
        dx = (wm @ gr).reshape(xshape)
        return dx, dw, db


def conv3d_transposed(x, w, b, stride: int = 2) -> Tensor:
    """Upsample by ``stride``; ``w`` is ``(C_in, C_out, s, s, s)``."""
    return _apply(Conv3dTransposed, x, w, b, stride=stride)


class Concat:
    @staticmethod
    def forward(*xs):
        if len(xs) == 0:
            raise DimensionError("concat_channels needs at least one input")
        sp = xs[0].shape[1:]
        for x in xs[1:]:
            if x.shape[1:] != sp:
                raise DimensionError(f"spatial extents differ: {sp} vs {x.shape[1:]}")
        return np.concatenate(xs, axis=0), [x.shape[0] for x in xs]

    @staticmethod
    def backward(saved, g):
        bounds = np.cumsum([0] + saved)
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(saved)))


def concat_channels(*xs) -> Tensor:
    return _apply(Concat, *xs)


class SliceChannels:
    @staticmethod
    def forward(x, start=0, stop=None):
        out = x[start:stop]
        if out.shape[0] == 0:
            raise DimensionError(f"empty channel slice [{start}:{stop}] of {x.shape[0]} channels")
        return out, x.shape

    @staticmethod
    def backward(saved, g, start=0, stop=None):
        dx = np.zeros(saved, dtype=g.dtype)
        dx[start:stop] = g
        return (dx,)


def slice_channels(x, start: int, stop: int) -> Tensor:
    return _apply(SliceChannels, x, start=start, stop=stop)


class Relu:
    @staticmethod
    def forward(x):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    @staticmethod
    def backward(mask, g):
        return (g * mask,)


def relu(x) -> Tensor:
    return _apply(Relu, x)


def _softmax0(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


class Softmax:
    @staticmethod
    def forward(x):
        p = _softmax0(x)
        return p, p

    @staticmethod
    def backward(p, g):
        return (p * (g - (g * p).sum(axis=0, keepdims=True)),)


def softmax_channels(x) -> Tensor:
    """Softmax over axis 0, computed after subtracting the per-voxel max."""
    return _apply(Softmax, x)


class LogSoftmax:
    @staticmethod
    def forward(x):
        z = x - x.max(axis=0, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=0, keepdims=True))
        out = z - lse
        return out, out

    @staticmethod
    def backward(out, g):
        return (g - np.exp(out) * g.sum(axis=0, keepdims=True),)


def log_softmax_channels(x) -> Tensor:
    return _apply(LogSoftmax, x)


class NllMean:
    @staticmethod
    def forward(logp, labels=None):
        flat = logp.reshape(logp.shape[0], -1)
        y = labels.reshape(-1)
        n = y.size
        picked = flat[y, np.arange(n)]
        return np.asarray(-picked.mean(), dtype=logp.dtype), (logp.shape, y, n)

    @staticmethod
    def backward(saved, g, labels=None):
        shape, y, n = saved
        d = np.zeros((shape[0], n), dtype=g.dtype)
        d[y, np.arange(n)] = -g / n
        return (d.reshape(shape),)


def nll_mean(logp, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logp``."""
    k = _as_tensor(logp).shape[0]
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ContractError(f"labels must lie in 0..{k - 1}")
    return _apply(NllMean, logp, labels=labels)


class Add:
    @staticmethod
    def forward(a, b):
        if a.shape != b.shape:
            raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")
        return a + b, None

    @staticmethod
    def backward(saved, g):
        return g, g


def add(a, b) -> Tensor:
    return _apply(Add, a, b)


class Scale:
    @staticmethod
    def forward(x, factor=1.0):
        return x * factor, None

    @staticmethod
    def backward(saved, g, factor=1.0):
        return (g * factor,)


def scale(x, factor: float) -> Tensor:
    return _apply(Scale, x, factor=float(factor))


class Sum:
    @staticmethod
    def forward(x):
        return np.asarray(x.sum(), dtype=x.dtype), x.shape

    @staticmethod
    def backward(shape, g):
        return (np.broadcast_to(g, shape).copy(),)


def tensor_sum(x) -> Tensor:
    return _apply(Sum, x)


# ---------------------------------------------------------------------------
# optimisation


def sgd_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, np.ndarray]:
    """In-place heavy-ball update ``v = m*v + g; theta -= lr*v``.

    Returns the velocity buffers (pass them back in on the next call).
    """
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    if not 0 <= momentum < 1:
        raise ContractError("momentum must lie in [0, 1)")
    velocity = {} if velocity is None else velocity
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        v = velocity.get(name)
        v = g.astype(p.data.dtype, copy=True) if v is None else momentum * v + g
        velocity[name] = v
        p.data -= lr * v
    return velocity


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        sgd_step(self.params, grads, self.lr, self.momentum, self.velocity)
