"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operators the segmentation network needs are provided. Tensors use
the layout ``(batch, channels, x, y, z)``. Gradients of leaf tensors
accumulate across ``backward`` calls until the caller resets them with
``zero_grad``.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from brainstrip._grid import linear_weights


class AutodiffError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"


def _node(values: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.op = op
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with
    ``requires_grad``; returns ``{leaf: grad}`` for this call only."""
    if loss.values.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            if node.requires_grad:
                leaves[node] = g
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaves


# -- elementwise and structural ops ----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise AutodiffError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _node(a.values + b.values, (a, b), "add", lambda g: (g, g))


def weighted_sum(x: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Scalar ``sum(weights * x)`` (plain sum when weights is None)."""
    if weights is None:
        return _node(np.array(x.values.sum()), (x,), "sum", lambda g: (np.full(x.shape, float(g)),))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise AutodiffError(f"weighted_sum: weights shape {w.shape} != {x.shape}")
    return _node(np.array((w * x.values).sum()), (x,), "weighted_sum", lambda g: (float(g) * w,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(x.values > 0, 1.0, slope)
    return _node(x.values * scale, (x,), "leaky_relu", lambda g: (g * scale,))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return np.split(g, bounds, axis=axis)

    return _node(np.concatenate([t.values for t in tensors], axis=axis), tensors, "concat", back)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), "softmax", back)


def select_channel(x: Tensor, index: int) -> Tensor:
    """``x[:, index]`` with the channel axis dropped."""

    def back(g):
        full = np.zeros(x.shape)
        full[:, index] = g
        return (full,)

    return _node(x.values[:, index].copy(), (x,), "select_channel", back)


# -- convolution ----------------------------------------------------------------


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """3D cross-correlation with zero padding.

    x: (B, C, X, Y, Z); w: (O, C, kx, ky, kz); b: (O,).
    """
    if x.values.ndim != 5 or w.values.ndim != 5:
        raise AutodiffError("conv3d expects 5D input and weights")
    if stride < 1 or pad < 0:
        raise AutodiffError("conv3d needs stride >= 1 and pad >= 0")
    B, C = x.shape[:2]
    O, Cw, kx, ky, kz = w.shape
    if C != Cw:
        raise AutodiffError(f"conv3d: input has {C} channels, kernel expects {Cw}")
    if b is not None and b.shape != (O,):
        raise AutodiffError(f"conv3d: bias shape {b.shape} != ({O},)")
    out_dims = tuple(conv_output_size(n, k, stride, pad) for n, k in zip(x.shape[2:], (kx, ky, kz)))
    if any(n < 1 for n in out_dims):
        raise AutodiffError(f"conv3d: kernel larger than padded input {x.shape[2:]}")

    if stride == 1:
        out, back = _conv3d_stride1(x, w, b, pad)
    else:
        out, back = _conv3d_strided(x, w, b, stride, pad, out_dims)
    parents = (x, w, b) if b is not None else (x, w)
    return _node(out, parents, "conv3d", back)


def _conv3d_stride1(x: Tensor, w: Tensor, b: Optional[Tensor], pad: int):
    # The padded input is flattened channel-first over (batch, x, y, z), so
    # each kernel offset becomes a constant shift of the flat index. One GEMM
    # applies every offset's kernel; the shifted partial results are summed.
    B, C = x.shape[:2]
    O, _, kx, ky, kz = w.shape
    K = kx * ky * kz
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.values
    Xp, Yp, Zp = xp.shape[2:]
    X, Y, Z = Xp - kx + 1, Yp - ky + 1, Zp - kz + 1
    flat = np.ascontiguousarray(xp.transpose(1, 0, 2, 3, 4)).reshape(C, -1)
    N = flat.shape[1]
    deltas = [i * Yp * Zp + j * Zp + k for i, j, k in np.ndindex(kx, ky, kz)]
    lead = deltas[-1]
    span = N - lead
    # rows ordered (offset, out_channel)
    w_all = w.values.reshape(O, C, K).transpose(2, 0, 1).reshape(K * O, C)

    partial = (w_all @ flat).reshape(K, O, N)
    acc = np.zeros((O, N))
    head = acc[:, :span]
    for part, d in zip(partial, deltas):
        head += part[:, d : d + span]
    del partial
    out = acc.reshape(O, B, Xp, Yp, Zp)[:, :, :X, :Y, :Z].transpose(1, 0, 2, 3, 4)
    if b is not None:
        out = out + b.values[None, :, None, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        # shifted[off, :, p] = g[:, p - delta_off] on the padded anchor grid
        g_pad = np.zeros((O, lead + N))
        g_pad[:, lead:].reshape(O, B, Xp, Yp, Zp)[:, :, :X, :Y, :Z] = g.transpose(1, 0, 2, 3, 4)
        shifted = np.concatenate([g_pad[:, lead - d : lead - d + N] for d in deltas], axis=0)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (shifted @ flat.T).reshape(K, O, C).transpose(1, 2, 0).reshape(w.shape)
        if x.requires_grad:
            gxp = (w_all.T @ shifted).reshape(C, B, Xp, Yp, Zp)
            if pad:
                gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
            gx = np.ascontiguousarray(gxp.transpose(1, 0, 2, 3, 4))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return out, back


def _conv3d_strided(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int, pad: int, out_dims):
    B, C = x.shape[:2]
    O, _, kx, ky, kz = w.shape
    xp = np.pad(x.values, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad))) if pad else x.values
    X, Y, Z = out_dims
    offsets = list(np.ndindex(kx, ky, kz))

    def window(arr, i, j, k):
        return arr[
            :,
            :,
            i : i + stride * (X - 1) + 1 : stride,
            j : j + stride * (Y - 1) + 1 : stride,
            k : k + stride * (Z - 1) + 1 : stride,
        ]

    acc = np.zeros((O, B, X, Y, Z))
    wv = w.values
    for i, j, k in offsets:
        acc += np.tensordot(wv[:, :, i, j, k], window(xp, i, j, k), axes=([1], [1]))
    out = acc.transpose(1, 0, 2, 3, 4)
    if b is not None:
        out = out + b.values[None, :, None, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3, 4))  # (O, B, X, Y, Z)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.zeros(w.shape)
            for i, j, k in offsets:
                gw[:, :, i, j, k] = np.tensordot(gt, window(xp, i, j, k), axes=([1, 2, 3, 4], [0, 2, 3, 4]))
        if x.requires_grad:
            gxp = np.zeros((C, B) + xp.shape[2:])
            for i, j, k in offsets:
                window(gxp, i, j, k)[...] += np.tensordot(wv[:, :, i, j, k], gt, axes=([0], [0]))
            gxp = gxp.transpose(1, 0, 2, 3, 4)
            if pad:
                gxp = gxp[:, :, pad:-pad, pad:-pad, pad:-pad]
            gx = np.ascontiguousarray(gxp)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3, 4))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return out, back


# -- resampling -------------------------------------------------------------------


def trilinear_resize(x: Tensor, size: Sequence[int]) -> Tensor:
    """Corner-aligned trilinear resize of the three spatial axes to ``size``."""
    size = tuple(int(s) for s in size)
    mats = [linear_weights(n_in, n_out) for n_in, n_out in zip(x.shape[2:], size)]
    y = x.values
    for axis, m in zip((2, 3, 4), mats):
        y = np.moveaxis(np.tensordot(m, y, axes=([1], [axis])), 0, axis)

    def back(g):
        for axis, m in zip((4, 3, 2), reversed(mats)):
            g = np.moveaxis(np.tensordot(m.T, g, axes=([1], [axis])), 0, axis)
        return (np.ascontiguousarray(g),)

    return _node(np.ascontiguousarray(y), (x,), "trilinear_resize", back)


def trilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 2 or int(factor) != factor:
        raise AutodiffError("upsample factor must be an integer >= 2")
    if any(n < 2 for n in x.shape[2:]):
        raise AutodiffError(f"upsample needs spatial dims >= 2, got {x.shape[2:]}")
    return trilinear_resize(x, tuple(n * factor for n in x.shape[2:]))


# -- loss ---------------------------------------------------------------------------

DICE_EPS = 1e-5


def soft_dice(prob: np.ndarray, target: np.ndarray, eps: float = DICE_EPS) -> float:
    inter = float((prob * target).sum())
    return (2.0 * inter + eps) / (float(prob.sum()) + float(target.sum()) + eps)


def dice_loss(logits: Tensor, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)`` with p the softmax
    foreground probability; sums run over the whole batch."""
    g_arr = np.asarray(target, dtype=np.float64)
    if g_arr.shape != (logits.shape[0],) + logits.shape[2:]:
        raise AutodiffError(f"dice_loss: target shape {g_arr.shape} does not match logits {logits.shape}")
    p = select_channel(softmax(logits, axis=1), 1)
    pv = p.values
    inter = float((pv * g_arr).sum())
    denom = float(pv.sum()) + float(g_arr.sum()) + eps
    numer = 2.0 * inter + eps
    loss = 1.0 - numer / denom

    def back(g):
        dp = -(2.0 * g_arr * denom - numer) / (denom * denom)
        return (float(g) * dp,)

    return _node(np.array(loss), (p,), "dice_loss", back)


# -- Adam ----------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, **hyper) -> AdamState:
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64), **hyper)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise AutodiffError("adam_step: parameter, gradient and moment shapes must match")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_param = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_param, replace(state, m=m, v=v, step=t)


# -- parameter container ----------------------------------------------------------------

CKPT_MAGIC = b"CKPT1"


def save_arrays(path, arrays: dict[str, np.ndarray], meta: Optional[dict[str, str]] = None) -> None:
    """Write named float64 arrays plus a key=value record, atomically.

    Layout (little-endian): magic ``CKPT1``; u32 record length, record text;
    u32 entry count; per entry u32 name length, name, u32 ndim, u64 dims,
    u64 value count, float64 values.
    """
    record = "".join(f"{k}={v}\n" for k, v in (meta or {}).items()).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", len(record)), record, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(struct.pack("<Q", a.size))
        parts.append(np.ascontiguousarray(a).tobytes())
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise AutodiffError(f"{path}: not a CKPT1 container")
    pos = len(CKPT_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (rec_len,) = take("<I")
        record = raw[pos : pos + rec_len].decode("utf-8")
        pos += rec_len
        meta = dict(line.split("=", 1) for line in record.splitlines() if line)
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (name_len,) = take("<I")
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = take("<I")
            shape = take(f"<{ndim}Q") if ndim else ()
            (size,) = take("<Q")
            if int(np.prod(shape, dtype=np.int64)) != size or pos + 8 * size > len(raw):
                raise AutodiffError(f"{path}: entry {name!r} is inconsistent or truncated")
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise AutodiffError(f"{path}: truncated container") from exc
    return arrays, meta
