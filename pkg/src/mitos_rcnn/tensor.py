"""Dense float64 tensors with tape-based reverse-mode differentiation.

Feature maps use the channels-first convention ``(C, H, W)``; ops work on a
single image, batching is done by the caller. Every op records itself on the
innermost active :class:`GradTape` when at least one input requires a
gradient, and :meth:`GradTape.backward` replays the records in reverse.

Example::

    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        loss = tsum(fully_connected(Tensor([1.0, 2.0]), w, Tensor(np.zeros(2))))
    tape.backward(loss)
"""
from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_EPS = 1e-12


_SWITCH_LOGS: list["record_switches"] = []


class record_switches:
    """Collect the branch choices of piecewise ops (ReLU masks, max-pool winners).

    Finite-difference checks use this to tell whether a perturbation crossed
    a point where the function is not differentiable. Passing ``replay``
    (an earlier recorder) makes the ops reuse its choices instead, which
    evaluates the smooth piece the earlier forward pass sat on::

        with record_switches() as base:
            f(theta)
        with record_switches(replay=base):
            f(theta + h * d)
    """

    def __init__(self, replay: Optional["record_switches"] = None):
        self.choices: list[np.ndarray] = []
        self._replay = iter(replay.choices) if replay is not None else None

    def __enter__(self) -> "record_switches":
        _SWITCH_LOGS.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _SWITCH_LOGS.remove(self)

    def same_as(self, other: "record_switches") -> bool:
        return len(self.choices) == len(other.choices) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.choices, other.choices))

    def _take(self, choice: np.ndarray) -> np.ndarray:
        if self._replay is not None:
            try:
                recorded = next(self._replay)
            except StopIteration:
                raise TapeError("replayed forward pass has more piecewise ops than the recording") from None
            if recorded.shape != choice.shape:
                raise TapeError(f"replayed choice shape {recorded.shape} != {choice.shape}")
            choice = recorded
        self.choices.append(choice)
        return choice


def _log_switch(choice: np.ndarray) -> np.ndarray:
    for log in reversed(_SWITCH_LOGS):
        choice = log._take(choice)
    return choice


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised on misuse of a gradient tape."""


class Tensor:
    """An n-dimensional float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # arithmetic sugar for loss assembly
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __neg__(self):
        return mul(self, -1.0)


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: tuple, backward: Callable):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_ACTIVE_TAPES: list["GradTape"] = []


class GradTape:
    """Ordered log of differentiable ops executed while the tape is active.

    A tape can be replayed once; a second :meth:`backward` raises
    :class:`TapeError` until a fresh forward pass is recorded on a new tape.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "GradTape":
        if self.consumed:
            raise TapeError("cannot re-enter a consumed tape")
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> list[int]:
        """Propagate d(loss)/d(.) into ``.grad`` of every tensor requiring it.

        Gradients add onto whatever ``.grad`` already holds, so several tapes
        can be replayed before an optimizer step. Returns the record indices
        in the order they were visited.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape; record a new forward pass")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True
        visited: list[int] = []
        if not loss.requires_grad:
            return visited

        local: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for idx in range(len(self.records) - 1, -1, -1):
            rec = self.records[idx]
            g = local.pop(id(rec.output), None)
            if g is None:
                continue
            rec.output.grad = g if rec.output.grad is None else rec.output.grad + g
            visited.append(idx)
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in local:
                    local[key] = local[key] + gi
                else:
                    local[key] = gi
        # whatever remains belongs to leaves; intermediates were popped above
        owners = {id(t): t for rec in self.records for t in rec.inputs if isinstance(t, Tensor)}
        owners[id(loss)] = loss
        for key, g in local.items():
            t = owners.get(key)
            if t is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.records.clear()
        return visited


def _record(out: Tensor, inputs: Sequence, backward: Callable) -> Tensor:
    if not _ACTIVE_TAPES:
        return out
    if not any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    _ACTIVE_TAPES[-1].records.append(_Record(out, tuple(inputs), backward))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural plumbing
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), backward)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""
    out = Tensor(x.data.sum())

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(out, (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def backward(g):
        return (g.reshape(x.shape),)

    return _record(out, (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(x.data, axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _record(out, (x,), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Select rows ``x[index]`` along axis 0; repeated indices are allowed."""
    index = np.asarray(index, dtype=np.int64)
    out = Tensor(x.data[index])

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = _log_switch(x.data > 0)
    out = Tensor(np.where(mask, x.data, 0.0))

    def backward(g):
        return (g * mask,)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------------------
# convolution family
# ---------------------------------------------------------------------------

def _window(arr: np.ndarray, i: int, j: int, oh: int, ow: int, stride: int) -> np.ndarray:
    return arr[:, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of a ``(C_in, H, W)`` map.

    ``kernels`` is ``(C_out, C_in, kH, kW)``; the output has spatial size
    ``floor((H + 2*pad - kH) / stride) + 1``.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) input and 4-d kernels, got {x.shape} and {kernels.shape}")
    c_in, h, w = x.shape
    c_out, k_cin, kh, kw = kernels.shape
    if k_cin != c_in:
        raise ShapeError(f"conv2d channel mismatch: kernels expect C_in={k_cin}, input has C={c_in}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")

    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # (kH, kW, C_out, C_in) slabs: strided kernel slices would bypass BLAS
    K = np.ascontiguousarray(kernels.data.transpose(2, 3, 0, 1))
    acc = np.zeros((c_out, oh * ow))
    for i in range(kh):
        for j in range(kw):
            patch = np.ascontiguousarray(_window(xp, i, j, oh, ow, stride)).reshape(c_in, -1)
            acc += K[i, j] @ patch
    if bias is not None:
        acc += bias.data[:, None]
    out = Tensor(acc.reshape(c_out, oh, ow))

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(c_out, -1))
        gK = np.empty_like(K) if kernels.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                if gK is not None:
                    patch = np.ascontiguousarray(_window(xp, i, j, oh, ow, stride)).reshape(c_in, -1)
                    gK[i, j] = g2 @ patch.T
                if gxp is not None:
                    _window(gxp, i, j, oh, ow, stride)[...] += (K[i, j].T @ g2).reshape(c_in, oh, ow)
        gx = None
        if gxp is not None:
            gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        gb = g2.sum(axis=1) if bias is not None else None
        return gx, (gK.transpose(2, 3, 0, 1) if gK is not None else None), gb

    return _record(out, (x, kernels, bias), backward)


def deconv2d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution; ``kernels`` is ``(C_in, C_out, kH, kW)``.

    Output size is ``(H - 1) * stride + kH``. This is the adjoint of
    :func:`conv2d` with the same kernel array and no padding.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise ShapeError(f"deconv2d expects (C,H,W) input and 4-d kernels, got {x.shape} and {kernels.shape}")
    c_in, h, w = x.shape
    k_cin, c_out, kh, kw = kernels.shape
    if k_cin != c_in:
        raise ShapeError(f"deconv2d channel mismatch: kernels expect C_in={k_cin}, input has C={c_in}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    oh, ow = (h - 1) * stride + kh, (w - 1) * stride + kw
    K = np.ascontiguousarray(kernels.data.transpose(2, 3, 0, 1))   # (kH, kW, C_in, C_out)
    flat = x.data.reshape(c_in, -1)
    res = np.zeros((c_out, oh, ow))
    for i in range(kh):
        for j in range(kw):
            _window(res, i, j, h, w, stride)[...] += (K[i, j].T @ flat).reshape(c_out, h, w)
    out = Tensor(res)

    def backward(g):
        gx = np.zeros((c_in, h * w)) if x.requires_grad else None
        gK = np.empty_like(K) if kernels.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gs = np.ascontiguousarray(_window(g, i, j, h, w, stride)).reshape(c_out, -1)
                if gx is not None:
                    gx += K[i, j] @ gs
                if gK is not None:
                    gK[i, j] = flat @ gs.T
        return (gx.reshape(x.shape) if gx is not None else None), (
            gK.transpose(2, 3, 0, 1) if gK is not None else None)

    return _record(out, (x, kernels), backward)


def maxpool2d(x: Tensor, window: int = 2, stride: int = 2) -> Tensor:
    """Max over ``window x window`` cells; trailing rows/cols that do not fill a window are dropped."""
    c, h, w = x.shape
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    stack = np.stack([_window(x.data, i, j, oh, ow, stride)
                      for i in range(window) for j in range(window)], axis=1)
    arg = _log_switch(stack.argmax(axis=1))
    out = Tensor(np.take_along_axis(stack, arg[:, None], axis=1)[:, 0])

    def backward(g):
        gx = np.zeros_like(x.data)
        for k in range(window * window):
            i, j = divmod(k, window)
            _window(gx, i, j, oh, ow, stride)[...] += np.where(arg == k, g, 0.0)
        return (gx,)

    return _record(out, (x,), backward)


def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``out = W x + b`` for ``x`` of shape ``(N,)`` or a batch ``(B, N)``."""
    m, n = weights.shape
    if x.shape[-1] != n or x.data.ndim > 2:
        raise ShapeError(f"fully_connected: weights take {n} inputs, got input shape {x.shape}")
    if bias.shape != (m,):
        raise ShapeError(f"fully_connected: bias must be ({m},), got {bias.shape}")
    out = Tensor(x.data @ weights.data.T + bias.data)

    def backward(g):
        g2 = np.atleast_2d(g)
        x2 = np.atleast_2d(x.data)
        gx = (g @ weights.data) if x.requires_grad else None
        gW = g2.T @ x2 if weights.requires_grad else None
        return gx, gW, g2.sum(axis=0)

    return _record(out, (x, weights, bias), backward)


# ---------------------------------------------------------------------------
# normalization, fusion
# ---------------------------------------------------------------------------

def softmax(logits: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max."""
    if logits.size == 0 or logits.shape[-1] == 0:
        raise ShapeError("softmax of an empty tensor")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (logits,), backward)


def l2_normalize_channels(fmap: Tensor, scale: Tensor) -> Tensor:
    """Divide each spatial position's channel vector by its norm, then scale per channel.

    Norms below 1e-12 are clamped to 1e-12 (treated as constant for the gradient).
    """
    c = fmap.shape[0]
    if fmap.data.ndim != 3 or scale.shape != (c,):
        raise ShapeError(f"l2_normalize_channels: map {fmap.shape} vs scale {scale.shape}")
    raw = np.sqrt((fmap.data ** 2).sum(axis=0, keepdims=True))
    clamped = raw < NORM_EPS
    norm = np.where(clamped, NORM_EPS, raw)
    unit = fmap.data / norm
    out = Tensor(unit * scale.data[:, None, None])

    def backward(g):
        gu = g * scale.data[:, None, None]
        radial = (gu * unit).sum(axis=0, keepdims=True)
        gx = np.where(clamped, gu / norm, (gu - unit * radial) / norm)
        gs = (g * unit).sum(axis=(1, 2))
        return gx, gs

    return _record(out, (fmap, scale), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def backward(g):
        return g[:ca], g[ca:]

    return _record(out, (a, b), backward)


def _bin_members(start: np.ndarray, span: np.ndarray, k: int):
    """Absolute member indices of ``k`` bins per region, padded to a common width.

    Bin ``i`` of a span ``n`` covers ``[floor(i*n/k), ceil((i+1)*n/k))``.
    Padding repeats the bin's first member, which leaves max and first-argmax
    unchanged. Returns ``(idx (R, k, L), nonempty (R, k))``.
    """
    i = np.arange(k)[None, :]
    n = span[:, None]
    lo = (i * n) // k
    hi = -((-(i + 1) * n) // k)
    length = np.maximum(hi - lo, 1)
    offs = np.arange(max(int(length.max()), 1))[None, None, :]
    idx = lo[:, :, None] + np.where(offs < length[:, :, None], offs, 0)
    return start[:, None, None] + idx, hi > lo


ROI_CHUNK_ELEMENTS = 1 << 23


def roi_pool(fmap: Tensor, cell_boxes: np.ndarray, out_size: tuple[int, int] = (7, 7)) -> Tensor:
    """Binned max pooling of rectangular regions given in map cells.

    ``cell_boxes`` is ``(R, 4)`` integer ``(c0, r0, c1, r1)`` with exclusive
    ends, already clipped to the map. Bin ``i`` of a span ``n`` covers
    ``[floor(i*n/k), ceil((i+1)*n/k))``; an empty region yields zeros.
    Returns ``(R, C, oh, ow)``.
    """
    c, H, W = fmap.shape
    oh, ow = out_size
    cell_boxes = np.asarray(cell_boxes, dtype=np.int64).reshape(-1, 4)
    n = len(cell_boxes)
    res = np.zeros((n, c, oh, ow))
    src = np.full((n, c, oh, ow), -1, dtype=np.int64)
    if n == 0:
        return _record(Tensor(res), (fmap,), lambda g: (np.zeros(fmap.shape),))
    cells_last = np.ascontiguousarray(fmap.data.reshape(c, -1).T)       # (H*W, C)
    c0, r0, c1, r1 = cell_boxes.T
    rows, row_ok = _bin_members(r0, r1 - r0, oh)                        # (R, oh, Ly)
    cols, col_ok = _bin_members(c0, c1 - c0, ow)                        # (R, ow, Lx)
    rows = np.clip(rows, 0, H - 1)
    cols = np.clip(cols, 0, W - 1)
    ok = (row_ok[:, :, None] & col_ok[:, None, :])[:, None]             # (R, 1, oh, ow)
    cells = rows[:, :, None, :, None] * W + cols[:, None, :, None, :]    # (R, oh, ow, Ly, Lx)
    cells = cells.reshape(n, oh, ow, -1)
    plane = (np.arange(c) * (H * W))[None, :, None, None]
    step = max(1, ROI_CHUNK_ELEMENTS // max(1, c * cells[0].size))
    for s in range(0, n, step):
        part = cells[s:s + step]
        vals = cells_last[part]                                         # (r, oh, ow, L, C)
        # running scan over bin members; strict ">" keeps the first maximum
        best = vals[:, :, :, 0].copy()                                  # (r, oh, ow, C)
        where = np.broadcast_to(part[:, :, :, :1], best.shape).copy()
        for m in range(1, vals.shape[3]):
            upd = vals[:, :, :, m] > best
            np.copyto(best, vals[:, :, :, m], where=upd)
            np.copyto(where, np.broadcast_to(part[:, :, :, m:m + 1], best.shape), where=upd)
        mask = ok[s:s + step]
        res[s:s + step] = np.where(mask, best.transpose(0, 3, 1, 2), 0.0)
        src[s:s + step] = np.where(mask, plane + where.transpose(0, 3, 1, 2), -1)
    if _SWITCH_LOGS:
        src = _log_switch(src)
        res = np.where(src >= 0, fmap.data.reshape(-1)[np.maximum(src, 0)], 0.0)
    out = Tensor(res)

    def backward(g):
        valid = src >= 0
        gx = np.bincount(src[valid], weights=g[valid], minlength=c * H * W)
        return (gx.reshape(c, H, W),)

    return _record(out, (fmap,), backward)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def smooth_l1(x) -> Tensor:
    """Elementwise robust loss: ``0.5 x^2`` for ``|x| < 1``, else ``|x| - 0.5``."""
    x = _as_tensor(x)
    a = np.abs(x.data)
    quad = a < 1.0
    out = Tensor(np.where(quad, 0.5 * x.data ** 2, a - 0.5))

    def backward(g):
        return (g * np.where(quad, x.data, np.sign(x.data)),)

    return _record(out, (x,), backward)


def cross_entropy(probs: Tensor, true_class) -> Tensor:
    """``-ln p[true_class]`` with ``p`` floored at 1e-12.

    ``probs`` may be a single distribution ``(K,)`` with an int class, or a
    batch ``(B, K)`` with an int array; the batch form returns ``(B,)``.
    """
    labels = np.asarray(true_class, dtype=np.int64)
    k = probs.shape[-1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise IndexError(f"class index out of range for {k} classes: {true_class}")
    if probs.data.ndim == 1:
        if labels.ndim != 0:
            raise ShapeError("single distribution needs a scalar class index")
        picked = probs.data[labels]
    else:
        if labels.shape != probs.shape[:1]:
            raise ShapeError(f"labels {labels.shape} do not match batch {probs.shape}")
        picked = probs.data[np.arange(len(labels)), labels]
    floored = picked < PROB_FLOOR
    out = Tensor(-np.log(np.maximum(picked, PROB_FLOOR)))

    def backward(g):
        gp = np.zeros_like(probs.data)
        local = np.where(floored, 0.0, -1.0 / np.maximum(picked, PROB_FLOOR)) * g
        if probs.data.ndim == 1:
            gp[labels] = local
        else:
            gp[np.arange(len(labels)), labels] = local
        return (gp,)

    return _record(out, (probs,), backward)
