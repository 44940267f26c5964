"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op is built with :func:`from_op`, which records the
parents and a closure mapping the output gradient to one gradient per
parent.  :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.  Intermediate gradients live only for the duration of a
backward call; leaf tensors accumulate into ``.grad``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic: tensor-tensor ops need identical shapes; python scalars
    # and same-shape arrays are treated as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Tensor) else neg(other))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes)

    def log(self) -> Tensor:
        return log(self)

    def exp(self) -> Tensor:
        return exp(self)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every reachable leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _raise_item(t: Tensor):
    raise ValueError(f"item() needs a single element, got shape {t.shape}")


def _toposort(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward(grad)`` must return one gradient (or ``None``) per parent.
    The closure is only recorded when some parent requires grad.
    """
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _constant(b, shape, op):
    arr = np.asarray(b, dtype=DTYPE)
    if arr.ndim and arr.shape != shape:
        raise ValueError(f"{op}: constant shape {arr.shape} does not match {shape}")
    return arr


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "add")
        return from_op(a.data + b.data, (a, b), lambda g: (g, g))
    c = _constant(b, a.shape, "add")
    return from_op(a.data + c, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        return from_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    c = _constant(b, a.shape, "mul")
    return from_op(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.data
    return from_op(r, (a,), lambda g: (-g * r * r,))


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "div")
        out = a.data / b.data
        return from_op(out, (a, b), lambda g: (g / b.data, -g * out / b.data))
    c = _constant(b, a.shape, "div")
    return from_op(a.data / c, (a,), lambda g: (g / c,))


def log(a: Tensor) -> Tensor:
    return from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return from_op(out, (a,), lambda g: (g * out,))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return from_op(np.asarray(out), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; gradients scatter back with ``np.add.at``."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return from_op(np.array(out, dtype=DTYPE), (a,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return from_op(out, tuple(tensors), backward)


# ---------------------------------------------------------------------------
# network layers


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return from_op(x.data * mask, (x,), lambda g: (g * mask,))


def _check_layout(layout: str) -> None:
    if layout not in ("NCHW", "CNHW"):
        raise ValueError(f"unknown layout {layout!r}")


def _channel_axis(layout: str) -> int:
    _check_layout(layout)
    return 1 if layout == "NCHW" else 0


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, pad: int | None = None,
           layout: str = "NCHW") -> Tensor:
    """Stride-1 cross-correlation of ``x`` with ``weight[K, C, kh, kw]``.

    ``x`` is ``[N, C, H, W]``, or ``[C, N, H, W]`` with ``layout="CNHW"``
    (the layout the backbone uses internally).  ``pad`` defaults to
    ``kh // 2`` so 3x3 and 1x1 kernels preserve size.
    """
    _check_layout(layout)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    k, cw, kh, kw = weight.shape
    xd = x.data if layout == "CNHW" else x.data.transpose(1, 0, 2, 3)
    c, n, h, w = xd.shape
    if c != cw:
        raise ValueError(f"conv2d: input {x.shape} has {c} channels but weight {weight.shape} expects {cw}")
    if bias is not None and bias.shape != (k,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match weight {weight.shape}")
    if pad is None:
        pad = kh // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: input {x.shape} too small for kernel {weight.shape}")

    # Work on the zero-padded grid flattened to [C, N*hp*wp]: the tap (i, j)
    # of every output position is the same contiguous slice shifted by
    # i*wp + j, so the convolution is a sum of one small matrix product per
    # tap over strided views, and its adjoint scatters the same slices back.
    xp = np.zeros((c, n, hp, wp))
    xp[:, :, pad:pad + h, pad:pad + w] = xd
    total = n * hp * wp
    span = total - ((kh - 1) * wp + kw - 1)
    xf = xp.reshape(c, total)
    taps = [(i * wp + j, np.ascontiguousarray(weight.data[:, :, i, j])) for i in range(kh) for j in range(kw)]
    full = np.zeros((k, total))
    acc = full[:, :span]
    # a single input channel makes each tap a rank-one product; stacking the
    # shifted rows into one [taps, span] matrix is faster there
    stacked = np.stack([xf[0, o:o + span] for o, _ in taps]) if c == 1 else None
    if stacked is not None:
        np.matmul(weight.data.reshape(k, -1), stacked, out=acc)
    else:
        for o, wt in taps:
            acc += wt @ xf[:, o:o + span]
    out = full.reshape(k, n, hp, wp)[:, :, :ho, :wo]
    if bias is not None:
        out = out + bias.data[:, None, None, None]
    else:
        out = np.ascontiguousarray(out)
    if layout == "NCHW":
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        gc = g if layout == "CNHW" else g.transpose(1, 0, 2, 3)
        gfull = np.zeros((k, n, hp, wp))
        gfull[:, :, :ho, :wo] = gc
        gf = gfull.reshape(k, total)[:, :span]
        gw = gb = gx = None
        if weight.requires_grad:
            if stacked is not None:
                gw = (gf @ stacked.T).reshape(weight.shape)
            else:
                gw = np.empty_like(weight.data)
                for t, (o, _) in enumerate(taps):
                    gw[:, :, t // kw, t % kw] = gf @ xf[:, o:o + span].T
        if bias is not None and bias.requires_grad:
            gb = gc.sum(axis=(1, 2, 3))
        if x.requires_grad:
            gxf = np.zeros((c, total))
            for o, wt in taps:
                gxf[:, o:o + span] += wt.T @ gf
            gx = gxf.reshape(c, n, hp, wp)[:, :, pad:pad + h, pad:pad + w]
            gx = gx if layout == "CNHW" else gx.transpose(1, 0, 2, 3)
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, parents, backward)


@dataclass
class RunningStats:
    """Batchnorm running mean/variance for one layer."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> RunningStats:
        return cls(np.zeros(channels), np.ones(channels))


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, training: bool,
                momentum: float = BN_MOMENTUM, eps: float = BN_EPS, layout: str = "NCHW") -> Tensor:
    """Per-channel normalisation; batch statistics in training, running ones otherwise.

    Running variance is updated with the unbiased batch variance.
    """
    ca = _channel_axis(layout)
    if x.ndim != 4 or gamma.shape != (x.shape[ca],) or beta.shape != (x.shape[ca],):
        raise ValueError(f"batchnorm2d: input {x.shape} incompatible with gamma {gamma.shape}, beta {beta.shape}")
    axes = tuple(a for a in range(4) if a != ca)
    shape = [1, 1, 1, 1]
    shape[ca] = -1

    def bc(v):
        return v.reshape(shape)

    m = x.size // x.shape[ca]
    if training:
        mu = x.data.mean(axis=axes)
        centered = x.data - bc(mu)
        var = (centered * centered).mean(axis=axes)
        stats.mean = (1 - momentum) * stats.mean + momentum * mu
        stats.var = (1 - momentum) * stats.var + momentum * var * m / max(m - 1, 1)
    else:
        mu, var = stats.mean, stats.var
        centered = x.data - bc(mu)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * bc(inv)
    out = xhat * bc(gamma.data) + bc(beta.data)

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = bc(gamma.data * inv)
            if training:
                gx = scale * (g - bc(gb / m) - xhat * bc(gg / m))
            else:
                gx = g * scale
        return gx, gg, gb

    return from_op(out, (x, gamma, beta), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, over the last two axes; ties go to the first
    element in row-major window order."""
    a0, a1, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: spatial extents must be even, got {x.shape}")
    v = x.data.reshape(a0, a1, h // 2, 2, w // 2, 2)
    taps = [v[:, :, :, i, :, j] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(taps[0], taps[1]), np.maximum(taps[2], taps[3]))

    def backward(g):
        gx = np.zeros((a0, a1, h // 2, 2, w // 2, 2))
        taken = np.zeros(out.shape, dtype=bool)
        for t, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            hit = (taps[t] == out) & ~taken
            gx[:, :, :, i, :, j] = g * hit
            taken |= hit
        return (gx.reshape(a0, a1, h, w),)

    return from_op(out, (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    a0, a1, h, w = x.shape
    out = np.empty((a0, a1, h, 2, w, 2))
    out[...] = x.data[:, :, :, None, :, None]

    def backward(g):
        return (g.reshape(a0, a1, h, 2, w, 2).sum(axis=(3, 5)),)

    return from_op(out.reshape(a0, a1, 2 * h, 2 * w), (x,), backward)


def concat_channels(a: Tensor, b: Tensor, layout: str = "NCHW") -> Tensor:
    ca = _channel_axis(layout)
    other = 1 - ca
    if a.ndim != 4 or b.ndim != 4 or a.shape[other] != b.shape[other] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    split = a.shape[ca]
    out = np.concatenate([a.data, b.data], axis=ca)
    if ca == 0:
        return from_op(out, (a, b), lambda g: (g[:split], g[split:]))
    return from_op(out, (a, b), lambda g: (g[:, :split], g[:, split:]))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., din] @ weight[dout, din].T + bias[dout]``.

    Each row is reduced on its own (no BLAS), so a row's output does not
    depend on how many rows share the call.
    """
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = np.einsum("...i,oi->...o", x.data, weight.data)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        x2 = x.data.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, weight.shape[0])
        gx = g @ weight.data if x.requires_grad else None
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return from_op(out, parents, backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return from_op(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return from_op(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------------------
# parameters and checkpoints


class ParamStore(Mapping):
    """Named trainable tensors; iteration is sorted by name."""

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self._params: dict[str, Tensor] = {}
        for name, t in (params or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def count(self, prefix: str = "") -> int:
        return sum(t.size for name, t in self._params.items() if name.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self._params[name].data for name in self}


class CheckpointError(ValueError):
    pass


_MAGIC = b"M2CK"


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``arrays`` as: magic, u64 header length, JSON header, raw f64 payload.

    The header maps each name to ``{"shape", "dtype": "f64", "offset"}``
    where offset counts bytes from the start of the payload.
    """
    header: dict = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8"))
        header[name] = {"shape": list(arr.shape), "dtype": "f64", "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    if meta:
        header["__meta__"] = meta
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<Q", len(blob)) + blob)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC or len(raw) < 12:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    meta = header.pop("__meta__", {})
    payload = memoryview(raw)[12 + hlen:]
    out = {}
    for name, info in header.items():
        shape = tuple(info["shape"])
        start = info["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if start + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        out[name] = np.frombuffer(payload[start:start + nbytes], dtype="<f8").reshape(shape).astype(DTYPE)
    return out, meta


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    max_rel_error: float
    passed: bool
    location: tuple | None
    n_checked: int
    message: str = ""


def gradcheck(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5, tol: float = 1e-4,
              floor: float = 1e-6, max_checks: int | None = None, seed: int = 0) -> GradcheckReport:
    """Compare reverse-mode gradients of scalar ``f`` at ``point`` with central differences.

    The relative error of entry ``i`` is ``|a - n| / max(|a|, |n|, floor)``.
    When ``max_checks`` is set, that many entries are sampled at random.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=DTYPE)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise ValueError(f"gradcheck: f must be scalar-valued, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        return GradcheckReport(np.inf, False, None, 0, "non-finite value at the base point")
    y.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    indices = list(np.ndindex(base.shape))
    if max_checks is not None and max_checks < len(indices):
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(indices), size=max_checks, replace=False)
        indices = [indices[i] for i in sorted(pick)]

    worst, where = 0.0, None
    for idx in indices:
        probe = base.copy()
        probe[idx] += eps
        fp = f(Tensor(probe)).data.item()
        probe[idx] -= 2 * eps
        fm = f(Tensor(probe)).data.item()
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradcheckReport(np.inf, False, idx, len(indices), f"non-finite value probing {idx}")
        num = (fp - fm) / (2 * eps)
        a = analytic[idx]
        rel = abs(a - num) / max(abs(a), abs(num), floor)
        if rel > worst:
            worst, where = rel, idx
    return GradcheckReport(float(worst), bool(worst <= tol), where, len(indices))
