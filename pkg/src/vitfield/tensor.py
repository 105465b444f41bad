"""Dense tensors with reverse-mode automatic differentiation on a linear tape.

Every model in this package is expressed through the primitives below. A
``Tape`` records each primitive as it executes (inputs, output, backward
rule); ``backward`` replays the records in reverse to accumulate gradients
into the leaf tensors. A tape is single-writer: one tape per training step,
never shared across concurrent steps.
"""

from __future__ import annotations

import struct
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, LabelError, ShapeError, TrainingDiverged

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Set the float width for newly created tensors.

    float64 is the tested default; float32 is the documented speed switch
    for training runs.
    """
    global _default_dtype
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ConfigError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dt.type


def default_dtype():
    return _default_dtype


class Tensor:
    """N-dimensional real array with optional gradient tracking.

    ``grad`` is populated by ``backward`` and accumulates across calls; the
    training harness zeroes it explicitly at the start of each step.
    ``node_id`` is a handle into the tape currently recording this tensor.
    """

    __slots__ = ("data", "grad", "node_id", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_default_dtype)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.requires_grad = requires_grad

    @classmethod
    def param(cls, data) -> "Tensor":
        return cls(data, requires_grad=True)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeEntry(NamedTuple):
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient down to ``shape`` by summing broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Entries are appended in execution order, so inputs always precede the
    operations that consume them (topological order by construction). With
    ``recording=False`` the primitives still compute but nothing is recorded,
    which is the inference path.
    """

    def __init__(self, recording: bool = True):
        self.recording = recording
        self.entries: list[TapeEntry] = []
        self._tensors: dict[int, Tensor] = {}
        self._output_ids: set[int] = set()
        self._next_id = 0

    # -- bookkeeping ----------------------------------------------------

    def _register(self, t: Tensor) -> int:
        nid = t.node_id
        if nid is None or self._tensors.get(nid) is not t:
            nid = self._next_id
            self._next_id += 1
            t.node_id = nid
            self._tensors[nid] = t
        return nid

    def _emit(self, op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
        out = Tensor(out_data)
        if self.recording and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            in_ids = tuple(self._register(t) for t in inputs)
            out_id = self._register(out)
            self._output_ids.add(out_id)
            self.entries.append(TapeEntry(op, in_ids, out_id, backward))
        return out

    def constant(self, data) -> Tensor:
        return Tensor(data)

    # -- primitives -----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} x {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
        ad, bd = a.data, b.data

        def back(g):
            ga = _sum_to_shape(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
            gb = _sum_to_shape(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
            return ga, gb

        return self._emit("matmul", (a, b), np.matmul(ad, bd), back)

    def _binary(self, op: str, a: Tensor, b) -> Tensor:
        """Shared shape policy for add/sub/mul: equal shapes, scalar, or a
        trailing bias vector (add/sub only). Richer broadcasting is rejected
        to keep the backward rules auditable."""
        if not isinstance(b, Tensor):
            b = Tensor(b)
        if b.shape != a.shape and b.size != 1:
            trailing = b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]
            if not trailing or op == "mul":
                raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
        return b

    def add(self, a: Tensor, b) -> Tensor:
        b = self._binary("add", a, b)
        bshape = b.shape

        def back(g):
            return g, _sum_to_shape(g, bshape)

        return self._emit("add", (a, b), a.data + b.data, back)

    def sub(self, a: Tensor, b) -> Tensor:
        b = self._binary("sub", a, b)
        bshape = b.shape

        def back(g):
            return g, -_sum_to_shape(g, bshape)

        return self._emit("sub", (a, b), a.data - b.data, back)

    def mul(self, a: Tensor, b) -> Tensor:
        b = self._binary("mul", a, b)
        ad, bd = a.data, b.data

        def back(g):
            return _sum_to_shape(g * bd, ad.shape), _sum_to_shape(g * ad, bd.shape)

        return self._emit("mul", (a, b), ad * bd, back)

    def scale(self, a: Tensor, s: float) -> Tensor:
        s = float(s)

        def back(g):
            return (g * s,)

        return self._emit("scale", (a,), a.data * s, back)

    def gelu(self, x: Tensor) -> Tensor:
        xd = x.data
        phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
        out = xd * phi

        def back(g):
            # d/dx [x * Phi(x)] = Phi(x) + x * N(x; 0, 1)
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            return (g * (phi + xd * pdf),)

        return self._emit("gelu", (x,), out, back)

    def relu(self, x: Tensor) -> Tensor:
        mask = x.data > 0

        def back(g):
            return (g * mask,)

        return self._emit("relu", (x,), x.data * mask, back)

    def softmax(self, x: Tensor, axis: int = -1) -> Tensor:
        if not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
        z = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

        return self._emit("softmax", (x,), y, back)

    def layer_norm(self, x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(
                f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
        xhat = xc * inv
        gd = gain.data

        def back(g):
            dxhat = g * gd
            dx = inv * (dxhat
                        - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
            dgain = (g * xhat).reshape(-1, d).sum(axis=0)
            dbias = g.reshape(-1, d).sum(axis=0)
            return dx, dgain, dbias

        return self._emit("layer_norm", (x, gain, bias), xhat * gd + bias.data, back)

    def cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean negative log-probability of the true classes.

        ``logits`` is (batch, classes) or (classes,); ``labels`` holds class
        indices in [0, classes).
        """
        flat = logits.data if logits.ndim == 2 else logits.data[None, :]
        n, c = flat.shape
        lab = np.atleast_1d(np.asarray(labels, dtype=np.intp))
        if lab.shape != (n,):
            raise ShapeError(f"expected {n} labels for logits {logits.shape}, got {lab.shape}")
        for i, l in enumerate(lab):
            if not 0 <= l < c:
                raise LabelError(f"label {int(l)} at position {i} outside [0, {c})")
        m = flat.max(axis=1, keepdims=True)
        z = flat - m
        lse = np.log(np.exp(z).sum(axis=1))
        loss = float((lse - z[np.arange(n), lab]).mean())
        orig_shape = logits.shape

        def back(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(n), lab] -= 1.0
            return ((float(g) / n) * p.reshape(orig_shape),)

        return self._emit("cross_entropy", (logits,), np.asarray(loss), back)

    def transpose(self, x: Tensor) -> Tensor:
        if x.ndim < 2:
            raise ShapeError(f"transpose requires rank >= 2, got {x.shape}")

        def back(g):
            return (np.swapaxes(g, -1, -2),)

        return self._emit("transpose", (x,), np.swapaxes(x.data, -1, -2), back)

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        old = x.shape

        def back(g):
            return (g.reshape(old),)

        return self._emit("reshape", (x,), x.data.reshape(shape), back)

    def concat(self, xs: Sequence[Tensor], axis: int = -1) -> Tensor:
        sizes = [t.shape[axis] for t in xs]
        offsets = np.cumsum(sizes)[:-1]

        def back(g):
            return tuple(np.split(g, offsets, axis=axis))

        return self._emit("concat", tuple(xs), np.concatenate([t.data for t in xs], axis=axis), back)

    def narrow(self, x: Tensor, axis: int, start: int, length: int) -> Tensor:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        xshape = x.shape

        def back(g):
            gx = np.zeros(xshape, dtype=g.dtype)
            gx[idx] = g
            return (gx,)

        return self._emit("narrow", (x,), x.data[idx].copy(), back)

    def expand_leading(self, x: Tensor, n: int) -> Tensor:
        """Tile ``x`` along a new leading axis of size ``n``."""

        def back(g):
            return (g.sum(axis=0),)

        return self._emit("expand_leading", (x,),
                          np.broadcast_to(x.data, (n,) + x.shape).copy(), back)

    def sum(self, x: Tensor) -> Tensor:
        xshape = x.shape

        def back(g):
            return (np.broadcast_to(g, xshape).copy(),)

        return self._emit("sum", (x,), np.asarray(x.data.sum()), back)

    def conv2d(self, x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
        """3x3-style same-padded convolution, stride 1.

        ``x`` is (batch, H, W, C_in), ``w`` is (kh, kw, C_in, C_out) with odd
        kh/kw, ``bias`` is (C_out,).
        """
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape}, {w.shape}")
        kh, kw, cin, cout = w.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d kernel dims must be odd, got {(kh, kw)}")
        if x.shape[-1] != cin:
            raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
        b, h, wd = x.shape[:3]
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        out = np.zeros((b, h, wd, cout), dtype=x.data.dtype)
        for di in range(kh):
            for dj in range(kw):
                out += np.matmul(xp[:, di:di + h, dj:dj + wd, :], w.data[di, dj])
        out += bias.data
        wdat = w.data

        def back(g):
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wdat)
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, di:di + h, dj:dj + wd, :] += np.matmul(g, wdat[di, dj].T)
                    gw[di, dj] = np.tensordot(xp[:, di:di + h, dj:dj + wd, :], g,
                                              axes=([0, 1, 2], [0, 1, 2]))
            return gxp[:, ph:ph + h, pw:pw + wd, :], gw, g.sum(axis=(0, 1, 2))

        return self._emit("conv2d", (x, w, bias), out, back)

    def maxpool2d(self, x: Tensor, size: int = 2) -> Tensor:
        """Non-overlapping max pooling over (batch, H, W, C); ties resolve to
        the first (row-major) maximum."""
        b, h, wd, c = x.shape
        if h % size or wd % size:
            raise ShapeError(f"maxpool2d: spatial dims {(h, wd)} not divisible by {size}")
        ho, wo = h // size, wd // size
        windows = (x.data.reshape(b, ho, size, wo, size, c)
                   .transpose(0, 1, 3, 5, 2, 4)
                   .reshape(b, ho, wo, c, size * size))
        idx = windows.argmax(axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

        def back(g):
            gwin = np.zeros_like(windows)
            np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
            gx = (gwin.reshape(b, ho, wo, c, size, size)
                  .transpose(0, 1, 4, 2, 5, 3)
                  .reshape(b, h, wd, c))
            return (gx,)

        return self._emit("maxpool2d", (x,), out, back)


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into each tracked leaf tensor's ``grad``.

    Walks the tape once in reverse, so a node feeding several consumers
    receives the sum of their contributions before its own backward rule
    runs. Repeated calls without zeroing accumulate (the harness zeroes
    explicitly at step start).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {loss.shape}")
    if loss.node_id is None or tape._tensors.get(loss.node_id) is not loss:
        raise ContractError("backward root was not recorded on this tape")

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output_id, None)
        if g is None:
            continue
        contribs = entry.backward(g)
        for nid, contrib in zip(entry.input_ids, contribs):
            if contrib is None:
                continue
            tensor = tape._tensors[nid]
            if not tensor.requires_grad:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + contrib
            else:
                grads[nid] = contrib

    for nid, g in grads.items():
        tensor = tape._tensors[nid]
        if nid in tape._output_ids:
            continue  # intermediate whose grad nobody reads
        if tensor.grad is None:
            tensor.grad = np.array(g, dtype=tensor.data.dtype)
        else:
            tensor.grad = tensor.grad + g


# -- optimizers ----------------------------------------------------------


def _named(params) -> list[tuple[str, Tensor]]:
    out = []
    for i, p in enumerate(params):
        if isinstance(p, Tensor):
            out.append((f"param{i}", p))
        else:
            out.append((p[0], p[1]))
    return out


class SGD:
    """Plain gradient descent, kept behind a flag for tests."""

    def __init__(self, params, lr: float):
        self.params = _named(params)
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            if not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
            p.data = p.data - self.lr * p.grad


class Adam:
    """Adam with the de-facto transformer defaults (b1=0.9, b2=0.999, eps=1e-8)."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = _named(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for _, p in self.params]
        self._v = [np.zeros_like(p.data) for _, p in self.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, (name, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            mhat = self._m[i] / bc1
            vhat = self._v[i] / bc2
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoint serialization ---------------------------------------------

_MAGIC = b"VFTC"
_VERSION = 1


def save_tensors(path, named_tensors: Sequence[tuple[str, Tensor]]) -> None:
    """Write named tensors as a flat little-endian binary checkpoint.

    Layout: magic, u32 version, u32 count, then per tensor u16 name length,
    utf-8 name, u8 rank, u32 dims, row-major float64 values.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(named_tensors)))
        for name, t in named_tensors:
            arr = np.ascontiguousarray(t.data if isinstance(t, Tensor) else t, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by ``save_tensors``; preserves order."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ConfigError(f"{path}: not a vitfield checkpoint (bad magic)")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(dims)
            out[name] = arr.astype(_default_dtype)
        return out
