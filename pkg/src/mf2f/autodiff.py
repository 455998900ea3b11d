"""Reverse-mode automatic differentiation over dense float64 arrays.

The training objective composes convolutions, resampling, warping and masked
L1 terms, and the parameter count rules out numeric differentiation in
production, so gradients come from a small tape-based reverse pass instead.
The primitive set is deliberately tiny: elementwise arithmetic, conv2d,
activations, 2x resampling, padding/cropping, reductions, concatenation and
gather.  Anything else is composed from these.

Conventions
-----------
* All values are float64.  Inputs are converted on entry.
* A ``Tape`` must be active (``with Tape() as tape``) for an op to record
  itself; outside a tape every op is a plain numpy computation.
* ``tape.backward(loss)`` walks the recorded nodes exactly once, newest
  first, accumulating into ``.grad``.  Running it twice without rebuilding
  the graph raises ContractError.
* Gradients of kinked ops (relu, leaky_relu, absolute) take the negative /
  zero branch at the kink itself; a ``kink_probe`` context reports how close
  a forward pass came to any kink so finite-difference checks can reject
  ill-conditioned evaluation points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import imageops
from .errors import ContractError, DimensionError

# Plain numpy arrays are the storage for pixel grids; these aliases mark
# intent in signatures ((H, W) vs (N, C, H, W)).
Array2D = np.ndarray
Array4D = np.ndarray

_TAPES: list["Tape"] = []
_KINK_PROBE: list["KinkProbe"] = []


class Tensor:
    """A value in the computation graph.

    ``requires_grad`` marks whether a reverse pass should reach this node;
    ``grad`` is lazily allocated the first time something accumulates into
    it.  ``grad_filled`` records that at least one reverse pass contributed,
    which is what adam_step checks before touching a parameter.
    """

    __slots__ = ("data", "grad", "requires_grad", "grad_filled", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.grad_filled = False
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants (floats / ndarrays) are allowed on either side.
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
        return neg(self)


class ParamTensor(Tensor):
    """A trainable leaf: value plus a preallocated co-shaped gradient."""

    __slots__ = ("name", "group")

    def __init__(self, value, name: str = "", group: str = ""):
        super().__init__(np.ascontiguousarray(value, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.group = group

    @property
    def value(self) -> np.ndarray:
        return self.data

    @value.setter
    def value(self, v):
        self.data = np.ascontiguousarray(v, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.grad_filled = False

    def zero_grad(self):
        self.grad[...] = 0.0
        self.grad_filled = False

    def __repr__(self):
        return f"ParamTensor({self.name or '<anon>'}, shape={self.data.shape})"


class Tape:
    """Ordered record of one forward pass.

    Nodes are appended in creation order, so walking the list in reverse is
    a valid topological order for the backward sweep.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor):
        """Run the reverse pass from ``root`` (usually the scalar loss).

        Seeds the root gradient with ones and visits every recorded node
        exactly once.  Nodes the root does not depend on carry no gradient
        and are skipped.
        """
        if self._consumed:
            raise ContractError("this tape's backward pass already ran; rebuild the forward graph first")
        if not isinstance(root, Tensor):
            raise ContractError("backward root must be a Tensor")
        self._consumed = True
        if not root.requires_grad:
            return
        if root.grad is None:
            root.grad = np.ones_like(root.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


class KinkProbe:
    """Collects the smallest |input| seen by any kinked op during a forward
    pass, so callers can verify finite differences stay off the kinks."""

    def __init__(self):
        self.margin = np.inf

    def __enter__(self):
        _KINK_PROBE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _KINK_PROBE.pop()
        return False


def kink_probe() -> KinkProbe:
    return KinkProbe()


def _note_kink(data: np.ndarray):
    if _KINK_PROBE:
        m = float(np.min(np.abs(data))) if data.size else np.inf
        probe = _KINK_PROBE[-1]
        if m < probe.margin:
            probe.margin = m


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def trace_op(out_data: np.ndarray, backward_fn, parents) -> Tensor:
    """Create a graph node for a custom op.

    ``backward_fn(g)`` must route the incoming gradient to the parents via
    ``accumulate_grad``.  When no tape is active (pure inference) the node
    is a detached constant and backward_fn is dropped.
    """
    tape = _TAPES[-1] if _TAPES else None
    needs = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=bool(tape is not None and needs))
    if out.requires_grad:
        out._backward = backward_fn
        tape._nodes.append(out)
    return out


def accumulate_grad(t, g):
    """Add ``g`` into ``t.grad`` if ``t`` participates in differentiation."""
    if not isinstance(t, Tensor) or not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g
    t.grad_filled = True


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da + db

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, da.shape))
        accumulate_grad(b, _unbroadcast(g, db.shape))

    return trace_op(out, backward, (a, b))


def sub(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da - db

    def backward(g):
        accumulate_grad(a, _unbroadcast(g, da.shape))
        accumulate_grad(b, -_unbroadcast(g, db.shape))

    return trace_op(out, backward, (a, b))


def mul(a, b) -> Tensor:
    da, db = _data(a), _data(b)
    out = da * db

    def backward(g):
        accumulate_grad(a, _unbroadcast(g * db, da.shape))
        accumulate_grad(b, _unbroadcast(g * da, db.shape))

    return trace_op(out, backward, (a, b))


def neg(a) -> Tensor:
    da = _data(a)

    def backward(g):
        accumulate_grad(a, -g)

    return trace_op(-da, backward, (a,))


def absolute(a) -> Tensor:
    """|x| with subgradient 0 at the kink."""
    da = _data(a)
    _note_kink(da)
    sign = np.sign(da)

    def backward(g):
        accumulate_grad(a, g * sign)

    return trace_op(np.abs(da), backward, (a,))


def square(a) -> Tensor:
    da = _data(a)

    def backward(g):
        accumulate_grad(a, g * (2.0 * da))

    return trace_op(da * da, backward, (a,))


def sqrt(a) -> Tensor:
    da = _data(a)
    root = np.sqrt(da)

    def backward(g):
        accumulate_grad(a, g * (0.5 / root))

    return trace_op(root, backward, (a,))


def relu(a) -> Tensor:
    da = _data(a)
    _note_kink(da)
    pos = da > 0

    def backward(g):
        accumulate_grad(a, g * pos)

    return trace_op(np.where(pos, da, 0.0), backward, (a,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    da = _data(a)
    _note_kink(da)
    pos = da > 0

    def backward(g):
        accumulate_grad(a, g * np.where(pos, 1.0, slope))

    return trace_op(np.where(pos, da, slope * da), backward, (a,))


# ---------------------------------------------------------------------------
# shape primitives
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    da = _data(a)

    def backward(g):
        accumulate_grad(a, g.reshape(da.shape))

    return trace_op(da.reshape(shape), backward, (a,))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    out = da.sum(axis=axis, keepdims=keepdims)
    kept = list(da.shape)
    for ax in range(da.ndim) if axis is None else np.atleast_1d(axis):
        kept[ax] = 1

    def backward(g):
        gk = g if keepdims else np.asarray(g).reshape(kept)
        accumulate_grad(a, np.broadcast_to(gk, da.shape))

    return trace_op(out, backward, (a,))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    da = _data(a)
    count = da.size if axis is None else np.prod([da.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(parts, axis: int) -> Tensor:
    datas = [_data(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]

    def backward(g):
        offset = 0
        for part, size in zip(parts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            accumulate_grad(part, g[tuple(sl)])
            offset += size

    return trace_op(out, backward, (*parts,))


def index_select(a, idx: np.ndarray) -> Tensor:
    """Gather along the first axis: out[pos] = a[idx[pos]].

    Used to expand a per-bin parameter vector onto a bin-index image; the
    backward pass scatter-adds duplicate indices.
    """
    da = _data(a)
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise DimensionError("index_select idx must be an integer array")
    out = da[idx]

    def backward(g):
        buf = np.zeros_like(da)
        np.add.at(buf, idx, g)
        accumulate_grad(a, buf)

    return trace_op(out, backward, (a,))


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-fills the complement."""
    da = _data(a)
    sl = [slice(None)] * da.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        buf = np.zeros_like(da)
        buf[sl] = g
        accumulate_grad(a, buf)

    return trace_op(da[sl].copy(), backward, (a,))


def pad2d(a, pads: tuple[int, int, int, int], mode: str = "reflect") -> Tensor:
    """Pad the trailing (H, W) axes by (top, bottom, left, right)."""
    da = _data(a)
    top, bottom, left, right = pads
    h, w = da.shape[-2:]
    if mode == "zero":
        cfg = [(0, 0)] * (da.ndim - 2) + [(top, bottom), (left, right)]
        out = np.pad(da, cfg)

        def backward(g):
            accumulate_grad(a, g[..., top : top + h, left : left + w])

        return trace_op(out, backward, (a,))

    if mode != "reflect":
        raise ValueError(f"unknown pad mode {mode!r}")
    iy = imageops.reflect_index(np.arange(-top, h + bottom), h)
    ix = imageops.reflect_index(np.arange(-left, w + right), w)
    out = da[..., iy[:, None], ix[None, :]]
    flat_map = (iy[:, None] * w + ix[None, :]).ravel()

    def backward(g):
        lead = g.reshape(-1, g.shape[-2] * g.shape[-1])
        buf = np.empty((lead.shape[0], h * w))
        for i in range(lead.shape[0]):
            buf[i] = np.bincount(flat_map, weights=lead[i], minlength=h * w)
        accumulate_grad(a, buf.reshape(da.shape))

    return trace_op(out, backward, (a,))


def crop2d(a, top: int, left: int, height: int, width: int) -> Tensor:
    da = _data(a)

    def backward(g):
        buf = np.zeros_like(da)
        buf[..., top : top + height, left : left + width] = g
        accumulate_grad(a, buf)

    return trace_op(da[..., top : top + height, left : left + width].copy(), backward, (a,))


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "reflect") -> Tensor:
    """2-D cross-correlation over (N, C, H, W) input.

    ``padding`` is one of reflect / zero / valid; reflect and zero use
    p = k//2 so stride-1 output keeps the input size.  Output spatial size is
    floor((H + 2p - k) / stride) + 1.
    """
    xd = _data(x)
    wd = _data(kernel)
    if xd.ndim != 4:
        raise DimensionError(f"conv2d input must be 4-D (N, C, H, W), got {xd.ndim}-D")
    if wd.ndim != 4:
        raise DimensionError(f"conv2d kernel must be 4-D (Co, Ci, kh, kw), got {wd.ndim}-D")
    co, ci, kh, kw = wd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel spatial size must be odd, got {kh}x{kw}")
    if xd.shape[1] != ci:
        raise DimensionError(f"conv2d channel axis mismatch: input has {xd.shape[1]} channels, kernel expects {ci}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    bd = None
    if bias is not None:
        bd = _data(bias)
        if bd.shape != (co,):
            raise DimensionError(f"conv2d bias must have shape ({co},), got {bd.shape}")

    n, _, h, w = xd.shape
    if padding == "valid":
        p = 0
        xp = xd
    elif padding == "zero":
        p = kh // 2
        xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)))
    elif padding == "reflect":
        p = kh // 2
        xp = imageops.pad_reflect(xd, p, p, p, p)
    else:
        raise ValueError(f"unknown padding {padding!r}")

    ho = (h + 2 * p - kh) // stride + 1
    wo = (w + 2 * p - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"conv2d output would be empty for input {h}x{w}, kernel {kh}x{kw}")

    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2).copy()
    if bd is not None:
        out += bd[None, :, None, None]

    def backward(g):
        if isinstance(kernel, Tensor) and kernel.requires_grad:
            dw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
            accumulate_grad(kernel, dw)
        if bias is not None and isinstance(bias, Tensor) and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        if isinstance(x, Tensor) and x.requires_grad:
            dxp = np.zeros_like(xp)
            gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N, Ho, Wo, Co)
            for i in range(kh):
                rows = slice(i, i + stride * (ho - 1) + 1, stride)
                for j in range(kw):
                    cols = slice(j, j + stride * (wo - 1) + 1, stride)
                    dxp[:, :, rows, cols] += (gt @ wd[:, :, i, j]).transpose(0, 3, 1, 2)
            if padding == "valid":
                accumulate_grad(x, dxp)
            elif padding == "zero":
                accumulate_grad(x, dxp[:, :, p : p + h, p : p + w])
            else:
                # fold reflected borders back with one-hot selection matrices
                hp, wp = xp.shape[-2:]
                iy = imageops.reflect_index(np.arange(-p, h + p), h)
                ix = imageops.reflect_index(np.arange(-p, w + p), w)
                ry = np.zeros((hp, h))
                ry[np.arange(hp), iy] = 1.0
                rx = np.zeros((wp, w))
                rx[np.arange(wp), ix] = 1.0
                folded_cols = dxp @ rx  # (N, C, Hp, W)
                folded = (folded_cols.transpose(0, 1, 3, 2) @ ry).transpose(0, 1, 3, 2)
                accumulate_grad(x, folded)

    return trace_op(out, backward, (x, kernel, bias) if bias is not None else (x, kernel))


def _down2_even(a) -> Tensor:
    da = _data(a)
    h, w = da.shape[-2:]
    shaped = da.reshape(da.shape[:-2] + (h // 2, 2, w // 2, 2))
    out = shaped.mean(axis=(-3, -1))

    def backward(g):
        accumulate_grad(a, 0.25 * np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1))

    return trace_op(out, backward, (a,))


def _up2_nearest(a) -> Tensor:
    da = _data(a)

    def backward(g):
        h2, w2 = g.shape[-2:]
        shaped = g.reshape(g.shape[:-2] + (h2 // 2, 2, w2 // 2, 2))
        accumulate_grad(a, shaped.sum(axis=(-3, -1)))

    return trace_op(np.repeat(np.repeat(da, 2, axis=-2), 2, axis=-1), backward, (a,))


def resample(a, factor: str, mode: str) -> Tensor:
    """2x down (block average) or up (nearest) over the trailing axes.

    Odd extents on the down path are reflect-padded by one row/column first,
    so the output is ceil(H/2) x ceil(W/2).
    """
    if (factor, mode) == ("down2", "average"):
        h, w = _data(a).shape[-2:]
        if h % 2 or w % 2:
            a = pad2d(a, (0, h % 2, 0, w % 2), mode="reflect")
        return _down2_even(a)
    if (factor, mode) == ("up2", "nearest"):
        return _up2_nearest(a)
    raise ValueError(f"unsupported resample combination factor={factor!r} mode={mode!r}")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter Adam accumulators with the usual bias correction."""

    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_param(cls, p: ParamTensor, lr: float = 1e-5, **kw) -> "AdamState":
        return cls(m=np.zeros_like(p.data), v=np.zeros_like(p.data), lr=lr, **kw)


def make_adam_states(params, lr: float = 1e-5) -> list[AdamState]:
    return [AdamState.for_param(p, lr=lr) for p in params]


def adam_step(params, states):
    """One Adam update per parameter.  Gradients are left untouched; the
    caller zeroes them before the next forward pass."""
    if len(params) != len(states):
        raise ContractError(f"adam_step got {len(params)} params but {len(states)} states")
    for p, s in zip(params, states):
        if not p.grad_filled:
            name = getattr(p, "name", "") or "<anon>"
            raise ContractError(f"parameter {name} has no gradient from a completed reverse pass")
        if p.grad.shape != s.m.shape:
            raise DimensionError(f"adam state shape {s.m.shape} does not match parameter shape {p.grad.shape}")
        s.step_count += 1
        g = p.grad
        s.m = s.beta1 * s.m + (1.0 - s.beta1) * g
        s.v = s.beta2 * s.v + (1.0 - s.beta2) * (g * g)
        m_hat = s.m / (1.0 - s.beta1**s.step_count)
        v_hat = s.v / (1.0 - s.beta2**s.step_count)
        p.data -= s.lr * m_hat / (np.sqrt(v_hat) + s.eps)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(loss_fn, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of ``loss_fn(params)`` w.r.t. every
    coordinate of every parameter.  Perturbs parameter storage in place and
    restores it exactly."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")
    grads = []
    for p in params:
        flat = p.data.ravel()
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = float(loss_fn(params))
            flat[i] = orig - h
            lm = float(loss_fn(params))
            flat[i] = orig
            g[i] = (lp - lm) / (2.0 * h)
        grads.append(g.reshape(p.data.shape))
    return grads


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """max |a-b| scaled by the largest magnitude present in either array."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(floor, float(np.max(np.abs(a) + np.abs(b))) if a.size else floor)
    return float(np.max(np.abs(a - b)) / denom) if a.size else 0.0
