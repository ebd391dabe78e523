"""Minimal reverse-mode autodiff on numpy arrays.

Everything downstream (sampling, fusion, heads, losses) is built from the
small op set in this module. A ``Value`` wraps an ndarray, records the ops
that produced it, and ``backward()`` accumulates gradients by walking the
tape in reverse topological order. Double precision is the default; the
gradient-check harness at the bottom verifies every op against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

EPS = 1e-5  # clamp / normalization floor shared by inverse_sigmoid and layer_normalize


class Value:
    """An ndarray with an optional gradient tape behind it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- gradient bookkeeping ------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Value":
        """Same data, cut off from the tape."""
        return Value(self.data, requires_grad=False)

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate gradients of a scalar (or explicitly seeded) output."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        order = _toposort(self)
        self.accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_value(x, dtype=None) -> Value:
    return x if isinstance(x, Value) else Value(x, dtype=dtype)


def _toposort(root: Value) -> list:
    order, seen, stack = [], set(), [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: Sequence[Value], backward) -> Value:
    """Wrap an op result; only tracked parents keep the tape alive."""
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Value(data, requires_grad=bool(tracked))
    if tracked:
        out._parents = tracked
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------


def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Value:
    """(..., n, k) @ (k, m); the weight side is limited to rank 2."""
    a, b = as_value(a), as_value(b)
    if b.data.ndim != 2:
        raise ValueError("matmul expects a rank-2 right operand")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            lead = a.data.reshape(-1, a.data.shape[-1])
            b.accumulate(lead.T @ g.reshape(-1, g.shape[-1]))

    return _make(out_data, (a, b), backward)


def relu(x) -> Value:
    x = as_value(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0.0)

    def backward(g):
        x.accumulate(g * mask)

    return _make(out_data, (x,), backward)


def tanh(x) -> Value:
    x = as_value(x)
    out_data = np.tanh(x.data)

    def backward(g):
        x.accumulate(g * (1.0 - out_data * out_data))

    return _make(out_data, (x,), backward)


def exp(x) -> Value:
    x = as_value(x)
    out_data = np.exp(x.data)

    def backward(g):
        x.accumulate(g * out_data)

    return _make(out_data, (x,), backward)


def log(x) -> Value:
    x = as_value(x)
    out_data = np.log(x.data)

    def backward(g):
        x.accumulate(g / x.data)

    return _make(out_data, (x,), backward)


def sigmoid(x) -> Value:
    x = as_value(x)
    out_data = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        x.accumulate(g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward)


def absolute(x) -> Value:
    x = as_value(x)
    sign = np.sign(x.data)
    out_data = np.abs(x.data)

    def backward(g):
        x.accumulate(g * sign)

    return _make(out_data, (x,), backward)


def clip(x, lo: float, hi: float) -> Value:
    """Clamp; gradient passes only where lo <= x <= hi."""
    x = as_value(x)
    out_data = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        x.accumulate(g * mask)

    return _make(out_data, (x,), backward)


def where(cond: np.ndarray, a, b) -> Value:
    """Select with a constant condition mask."""
    a, b = as_value(a), as_value(b)
    cond = np.asarray(cond, dtype=bool)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * cond, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ~cond, b.data.shape))

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions / reshaping
# ---------------------------------------------------------------------------


def vsum(x, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _make(out_data, (x,), backward)


def vmean(x, axis=None, keepdims=False) -> Value:
    x = as_value(x)
    out_data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size / max(out_data.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.accumulate(np.broadcast_to(g, x.data.shape) / count)

    return _make(out_data, (x,), backward)


def vmax(x, axis: int) -> Value:
    """Max over one axis; ties route the gradient to the first argmax."""
    x = as_value(x)
    out_data = x.data.max(axis=axis)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    onehot = np.zeros_like(x.data)
    np.put_along_axis(onehot, arg, 1.0, axis=axis)

    def backward(g):
        x.accumulate(np.expand_dims(g, axis) * onehot)

    return _make(out_data, (x,), backward)


def cumsum(x, axis: int) -> Value:
    x = as_value(x)
    out_data = np.cumsum(x.data, axis=axis)

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis), axis)
        x.accumulate(rev)

    return _make(out_data, (x,), backward)


def reshape(x, shape) -> Value:
    x = as_value(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        x.accumulate(g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def take(x, index) -> Value:
    """Advanced/basic indexing; backward scatter-adds into the source."""
    x = as_value(x)
    out_data = x.data[index]

    def backward(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, index, g)
        x.accumulate(buf)

    return _make(np.array(out_data, copy=True), (x,), backward)


def concat(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    out_data = np.concatenate([v.data for v in vals], axis=axis)
    sizes = [v.data.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for v, lo, hi in zip(vals, offsets[:-1], offsets[1:]):
            if v.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                v.accumulate(g[tuple(sl)])

    return _make(out_data, vals, backward)


def stack(values: Sequence, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    out_data = np.stack([v.data for v in vals], axis=axis)

    def backward(g):
        for i, v in enumerate(vals):
            if v.requires_grad:
                v.accumulate(np.take(g, i, axis=axis))

    return _make(out_data, vals, backward)


def scatter_rows(values, row_index: np.ndarray, n_rows: int) -> Value:
    """Place rows of ``values`` at ``row_index`` in an otherwise zero matrix."""
    values = as_value(values)
    out_data = np.zeros((n_rows,) + values.data.shape[1:], dtype=values.data.dtype)
    out_data[row_index] = values.data

    def backward(g):
        values.accumulate(g[row_index])

    return _make(out_data, (values,), backward)


def scatter_grid(values, rows: np.ndarray, cols: np.ndarray, grid_hw: tuple) -> Value:
    """Scatter per-cell feature rows (N, C) into a dense (C, H, W) grid."""
    values = as_value(values)
    h, w = grid_hw
    n, c = values.data.shape
    out_data = np.zeros((c, h, w), dtype=values.data.dtype)
    out_data[:, rows, cols] = values.data.T

    def backward(g):
        values.accumulate(g[:, rows, cols].T)

    return _make(out_data, (values,), backward)


def dropout(x, rate: float, rng: np.random.Generator) -> Value:
    """Inverted dropout; call only in training mode."""
    x = as_value(x)
    if rate <= 0.0:
        return x
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    out_data = x.data * keep * scale

    def backward(g):
        x.accumulate(g * keep * scale)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# softmax / normalization / squashing
# ---------------------------------------------------------------------------


def masked_softmax(logits, mask: Optional[np.ndarray], axis: int = -1) -> Value:
    """Softmax over the entries where ``mask`` is nonzero.

    Masked entries get exactly zero probability and zero gradient. Rows whose
    mask is entirely zero produce an all-zero row (a query no sensor can see
    must still yield a defined, differentiable output).
    """
    logits = as_value(logits)
    if mask is None:
        valid = np.ones_like(logits.data, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(mask).astype(bool), logits.data.shape)
    shifted = np.where(valid, logits.data, -np.inf)
    peak = shifted.max(axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)  # all-masked rows
    e = np.where(valid, np.exp(shifted - peak), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out_data = np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        logits.accumulate(out_data * (g - inner))

    return _make(out_data, (logits,), backward)


def softmax(logits, axis: int = -1) -> Value:
    return masked_softmax(logits, None, axis=axis)


def layer_normalize(x, gain=None, bias=None, eps: float = EPS) -> Value:
    """Normalize the last axis to zero mean / unit variance, then affine.

    The standard deviation is floored at ``eps``: non-constant vectors come out
    with exactly unit variance, constant vectors map to zero (then bias).
    """
    x = as_value(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt((centered * centered).mean(axis=-1, keepdims=True))
    denom = np.maximum(sigma, eps)
    xhat = centered / denom
    floored = sigma <= eps

    out = _make(xhat, (x,), None)

    def backward(g):
        g_centered = g - g.mean(axis=-1, keepdims=True)
        corr = xhat * (g * xhat).mean(axis=-1, keepdims=True)
        x.accumulate(np.where(floored, g_centered, g_centered - corr) / denom)

    out._backward = backward
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


def inverse_sigmoid(p, eps: float = EPS) -> Value:
    """logit(clamp(p, eps, 1-eps)); gradient is zero in the clamped zones."""
    p = as_value(p)
    pc = np.clip(p.data, eps, 1.0 - eps)
    out_data = np.log(pc) - np.log1p(-pc)
    interior = (p.data >= eps) & (p.data <= 1.0 - eps)

    def backward(g):
        p.accumulate(g * interior / (pc * (1.0 - pc)))

    return _make(out_data, (p,), backward)


# ---------------------------------------------------------------------------
# grid sampling
# ---------------------------------------------------------------------------


def bilinear_sample(feature_map, coords, padding: str = "border") -> Value:
    """Sample a (C, H, W) map at normalized (u, v) points, corner-aligned.

    Coordinate -1 maps to index 0 and +1 to index W-1 (resp. H-1); u indexes
    width, v height. ``border`` clamps out-of-range points to the boundary,
    ``zeros`` treats outside corners as zero. Gradients flow to both the map
    and the coordinates. Returns (N, C).
    """
    feature_map = as_value(feature_map)
    coords = as_value(coords)
    fmap = feature_map.data
    if fmap.ndim != 3 or fmap.shape[1] < 1 or fmap.shape[2] < 1 or fmap.size == 0:
        raise ValueError("bilinear_sample needs a non-empty (C, H, W) map")
    if padding not in ("border", "zeros"):
        raise ValueError(f"unknown padding mode: {padding!r}")
    pts = np.atleast_2d(coords.data)
    if not np.all(np.isfinite(pts)):
        raise ValueError("bilinear_sample got a non-finite coordinate")

    c, h, w = fmap.shape
    x = (pts[:, 0] + 1.0) * 0.5 * (w - 1)
    y = (pts[:, 1] + 1.0) * 0.5 * (h - 1)
    if padding == "border":
        xs = np.clip(x, 0.0, w - 1.0)
        ys = np.clip(y, 0.0, h - 1.0)
        x_in = (x >= 0.0) & (x <= w - 1.0)
        y_in = (y >= 0.0) & (y <= h - 1.0)
    else:
        # keep floor() index-safe for far-out points; their corners read as 0 anyway
        xs = np.clip(x, -2.0, w + 1.0)
        ys = np.clip(y, -2.0, h + 1.0)
        x_in = (x >= -2.0) & (x <= w + 1.0)
        y_in = (y >= -2.0) & (y <= h + 1.0)

    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1, y1 = x0 + 1, y0 + 1
    fx = xs - x0
    fy = ys - y0

    def corner(ix, iy):
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        vals = fmap[:, np.clip(iy, 0, h - 1), np.clip(ix, 0, w - 1)]
        return np.where(ok, vals, 0.0), ok  # (C, N), (N,)

    v00, ok00 = corner(x0, y0)
    v01, ok01 = corner(x1, y0)
    v10, ok10 = corner(x0, y1)
    v11, ok11 = corner(x1, y1)
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out_data = (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11).T  # (N, C)

    sx = 0.5 * (w - 1)
    sy = 0.5 * (h - 1)

    def backward(g):
        gt = g.T  # (C, N)
        if feature_map.requires_grad:
            buf = np.zeros_like(fmap)
            for ok, ix, iy, wgt in (
                (ok00, x0, y0, w00),
                (ok01, x1, y0, w01),
                (ok10, x0, y1, w10),
                (ok11, x1, y1, w11),
            ):
                if ok.any():
                    np.add.at(
                        buf,
                        (slice(None), np.clip(iy, 0, h - 1)[ok], np.clip(ix, 0, w - 1)[ok]),
                        (gt * wgt)[:, ok],
                    )
            feature_map.accumulate(buf)
        if coords.requires_grad:
            dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * gt
            dy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * gt
            du = dx.sum(axis=0) * sx * x_in
            dv = dy.sum(axis=0) * sy * y_in
            coords.accumulate(np.stack([du, dv], axis=-1).reshape(coords.data.shape))

    return _make(out_data, (feature_map, coords), backward)


# ---------------------------------------------------------------------------
# feed-forward blocks
# ---------------------------------------------------------------------------


@dataclass
class FfnParams:
    """Weights for a 1- or 2-layer feed-forward block.

    ``activation`` ('relu' or None) is applied between layers; with
    ``final_activation`` it also follows the last layer (after the optional
    affine layer norm), which covers linear -> norm -> relu encoders.
    """

    weights: list
    biases: list
    activation: Optional[str] = "relu"
    norm_gain: Optional[Value] = None
    norm_bias: Optional[Value] = None
    final_activation: bool = False

    def __post_init__(self):
        for wa, wb in zip(self.weights[:-1], self.weights[1:]):
            if wa.data.shape[1] != wb.data.shape[0]:
                raise ValueError("FfnParams layer shapes do not compose")

    @property
    def in_dim(self) -> int:
        return self.weights[0].data.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].data.shape[1]

    @staticmethod
    def create(
        dims: Sequence[int],
        rng: np.random.Generator,
        activation: Optional[str] = "relu",
        norm: bool = False,
        final_activation: bool = False,
        scale: float = 0.5,
        zero: bool = False,
        dtype=np.float64,
    ) -> "FfnParams":
        """Random (or zero) init; ``dims`` is (in, [hidden,] out)."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if zero:
                w = np.zeros((fan_in, fan_out), dtype=dtype)
            else:
                w = rng.normal(0.0, scale / np.sqrt(fan_in), (fan_in, fan_out)).astype(dtype)
            weights.append(Value(w, requires_grad=True))
            biases.append(Value(np.zeros(fan_out, dtype=dtype), requires_grad=True))
        gain = Value(np.ones(dims[-1], dtype=dtype), requires_grad=True) if norm else None
        bias = Value(np.zeros(dims[-1], dtype=dtype), requires_grad=True) if norm else None
        return FfnParams(weights, biases, activation, gain, bias, final_activation)

    def parameters(self, prefix: str) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.w{i}"] = w
            out[f"{prefix}.b{i}"] = b
        if self.norm_gain is not None:
            out[f"{prefix}.gain"] = self.norm_gain
            out[f"{prefix}.bias"] = self.norm_bias
        return out


def ffn_apply(x, params: FfnParams) -> Value:
    """Affine -> activation -> affine, plus the optional norm/final activation."""
    x = as_value(x)
    if x.data.shape[-1] != params.in_dim:
        raise ValueError(
            f"ffn_apply input dim {x.data.shape[-1]} != expected {params.in_dim}"
        )
    out = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out = add(matmul(out, w), b)
        if i < last and params.activation == "relu":
            out = relu(out)
    if params.norm_gain is not None:
        out = layer_normalize(out, params.norm_gain, params.norm_bias)
    if params.final_activation and params.activation == "relu":
        out = relu(out)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst_index: Optional[tuple]
    ok: bool
    note: str = ""


@dataclass
class GradCheckReport:
    entries: list = field(default_factory=list)
    tol: float = 1e-4

    @property
    def ok(self) -> bool:
        return all(e.ok for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.ok else "FAIL"
            line = (
                f"{status:4s} {e.name}: max_rel_err={e.max_rel_error:.3e} "
                f"checked={e.n_checked} excluded={e.n_excluded}"
            )
            if e.note:
                line += f" ({e.note})"
            lines.append(line)
        return "\n".join(lines)


def grad_check(
    fn: Callable[..., Value],
    inputs: dict,
    eps: float = 1e-6,
    tol: float = 1e-4,
    exclude: Optional[dict] = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``fn(**inputs)`` with central differences.

    ``fn`` must return a scalar Value. ``exclude`` maps input names to boolean
    masks of coordinates to skip (non-smooth points: clip boundaries, relu
    kinks, border clamp edges); excluded counts show up in the report. The
    relative error is |a - n| / max(1, |a|, |n|) so near-zero gradients are
    held to an absolute 'tol' instead of blowing up.
    """
    exclude = exclude or {}
    for v in inputs.values():
        v.zero_grad()
    out = fn(**inputs)
    if out.data.size != 1:
        raise ValueError("grad_check expects a scalar-valued function")
    out.backward()

    report = GradCheckReport(tol=tol)
    for name, v in inputs.items():
        analytic = v.grad if v.grad is not None else np.zeros_like(v.data)
        if not np.all(np.isfinite(analytic)):
            report.entries.append(
                GradCheckEntry(name, np.inf, 0, 0, None, False, "non-finite analytic gradient")
            )
            continue
        skip = np.broadcast_to(
            np.asarray(exclude.get(name, np.zeros(v.data.shape, dtype=bool))), v.data.shape
        )
        worst, worst_idx, checked, excluded = 0.0, None, 0, 0
        skip_flat = skip.reshape(-1)
        analytic_flat = analytic.reshape(-1)
        for i in range(v.data.size):
            idx = np.unravel_index(i, v.data.shape) if v.data.ndim else ()
            if skip_flat[i]:
                excluded += 1
                continue
            orig = float(v.data[idx])
            h = eps * max(1.0, abs(orig))
            v.data[idx] = orig + h
            f_plus = fn(**inputs).item()
            v.data[idx] = orig - h
            f_minus = fn(**inputs).item()
            v.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = analytic_flat[i]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            checked += 1
            if rel > worst:
                worst, worst_idx = rel, idx
        note = f"{excluded} non-smooth coordinate(s) excluded" if excluded else ""
        report.entries.append(
            GradCheckEntry(name, worst, checked, excluded, worst_idx, worst <= tol, note)
        )
    return report
