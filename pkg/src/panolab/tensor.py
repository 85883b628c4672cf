"""Minimal dense-tensor substrate with recorded backward rules.

Every differentiable quantity is a ``Tensor`` holding a 4-D
(batch, channel, height, width) float array. Operators are plain functions
that compute the forward result and attach a closure implementing the exact
vector-Jacobian product; ``Tensor.backward`` replays the closures in reverse
topological order. There is no graph compiler and no laziness: the network
is small and fixed, so explicitness wins.

``grad_check`` verifies any operator (or composition) against central finite
differences at double precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float64


class Tensor:
    """A 4-D (N, C, H, W) array plus an optional recorded backward rule."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 4:
            raise ValueError(
                f"tensors are (batch, channel, height, width); got {arr.ndim}-d "
                f"shape {arr.shape}"
            )
        if min(arr.shape) < 1:
            raise ValueError(f"all dimensions must be >= 1; got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self, grad=None):
        """Accumulate gradients of a scalar function of this tensor into the graph.

        ``grad`` is the gradient of that scalar with respect to this tensor
        (defaults to ones, i.e. the sum of all entries).
        """
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        # Iterative post-order DFS; recursion depth is unbounded on long chains.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        _accumulate(self, grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Param(Tensor):
    """A trainable tensor: gradient buffer is preallocated and persists across steps."""

    __slots__ = ("name",)

    def __init__(self, data, name=""):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name or '?'}, shape={self.shape})"


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _result(data, parents, backward):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitive operators
# ---------------------------------------------------------------------------

def _chan_map(mat, x):
    """out[n,o,h,w] = sum_c mat[o,c] * x[n,c,h,w], via BLAS."""
    return np.ascontiguousarray(
        np.tensordot(mat, x, axes=([1], [1])).transpose(1, 0, 2, 3)
    )


def pointwise_conv(x, w, bias=None):
    """1x1 convolution: out[n,o,h,w] = sum_c w[o,c] * x[n,c,h,w] (+ bias[o]).

    ``w`` has shape (C_out, C_in, 1, 1); ``bias`` (1, C_out, 1, 1) when given.
    """
    co, ci, kh, kw = w.shape
    if (kh, kw) != (1, 1):
        raise ValueError(f"pointwise kernel must be 1x1, got {kh}x{kw}")
    if ci != x.shape[1]:
        raise ValueError(
            f"weight input channels ({ci}) != tensor channels ({x.shape[1]})"
        )
    if bias is not None and bias.shape != (1, co, 1, 1):
        raise ValueError(f"bias shape {bias.shape} != (1, {co}, 1, 1)")

    w2d = w.data[:, :, 0, 0]
    out = _chan_map(w2d, x.data)
    if bias is not None:
        out = out + bias.data

    parents = [x, w] + ([bias] if bias is not None else [])

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, _chan_map(w2d.T, g))
        if w.requires_grad:
            gw = np.tensordot(g, x.data, axes=([0, 2, 3], [0, 2, 3]))
            _accumulate(w, gw.reshape(co, ci, 1, 1))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2, 3)).reshape(1, co, 1, 1))

    return _result(out, parents, _bw)


def conv3x3(x, w, stride=1):
    """3x3 cross-correlation with fixed padding 1; stride 1 preserves H, W."""
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    co, ci, kh, kw = w.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"kernel must be 3x3, got {kh}x{kw}")
    n, c, h, wd = x.shape
    if ci != c:
        raise ValueError(f"weight input channels ({ci}) != tensor channels ({c})")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh = (h - 1) // stride + 1
    ow = (wd - 1) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=x.data.dtype)
    for dy in range(3):
        for dx in range(3):
            patch = xp[:, :, dy : dy + stride * (oh - 1) + 1 : stride,
                           dx : dx + stride * (ow - 1) + 1 : stride]
            out += _chan_map(w.data[:, :, dy, dx], patch)

    def _bw(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        for dy in range(3):
            for dx in range(3):
                ys = slice(dy, dy + stride * (oh - 1) + 1, stride)
                xs = slice(dx, dx + stride * (ow - 1) + 1, stride)
                if gw is not None:
                    gw[:, :, dy, dx] = np.tensordot(
                        g, xp[:, :, ys, xs], axes=([0, 2, 3], [0, 2, 3])
                    )
                if gxp is not None:
                    gxp[:, :, ys, xs] += _chan_map(w.data[:, :, dy, dx].T, g)
        if gw is not None:
            _accumulate(w, gw)
        if gxp is not None:
            _accumulate(x, gxp[:, :, 1:-1, 1:-1])

    return _result(out, [x, w], _bw)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Per-(sample, group) standardization followed by a per-channel affine.

    ``gamma``/``beta`` carry shape (1, C, 1, 1). Variance is the biased
    estimate over each group's C/groups * H * W entries.
    """
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ValueError(f"channels ({c}) not divisible by groups ({groups})")
    if gamma.shape != (1, c, 1, 1) or beta.shape != (1, c, 1, 1):
        raise ValueError(
            f"gamma/beta must be (1, {c}, 1, 1); got {gamma.shape} and {beta.shape}"
        )
    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = (xg - mu) * inv
    xhat = xhat_g.reshape(n, c, h, w)
    out = gamma.data * xhat + beta.data

    def _bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1))
        if x.requires_grad:
            dxhat = (g * gamma.data).reshape(n, groups, m)
            t1 = m * dxhat
            t2 = dxhat.sum(axis=2, keepdims=True)
            t3 = xhat_g * (dxhat * xhat_g).sum(axis=2, keepdims=True)
            _accumulate(x, ((inv / m) * (t1 - t2 - t3)).reshape(n, c, h, w))

    return _result(out, [x, gamma, beta], _bw)


def global_avg_pool(x):
    """Spatial mean: (N, C, H, W) -> (N, C, 1, 1)."""
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g / (h * w), x.shape).copy())

    return _result(out, [x], _bw)


def _sigmoid_stable(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x):
    out = np.maximum(x.data, 0.0)

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0))

    return _result(out, [x], _bw)


def sigmoid(x):
    s = _sigmoid_stable(x.data)

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, g * s * (1.0 - s))

    return _result(s, [x], _bw)


def activation(x, kind):
    """Elementwise nonlinearity, kind in {"relu", "sigmoid"}."""
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation kind {kind!r}")


def _broadcast_allowed(shape_a, shape_b):
    if shape_a == shape_b:
        return True
    n, c, h, w = shape_a
    # spatial map broadcast over channels, or channel weights broadcast over space
    return shape_b in ((n, 1, h, w), (n, c, 1, 1))


def _reduce_to(g, shape):
    axes = tuple(i for i in range(4) if shape[i] == 1 and g.shape[i] > 1)
    return g.sum(axis=axes, keepdims=True) if axes else g


def elementwise(a, b, kind):
    """Elementwise mul/add; ``b`` may broadcast as (N,1,H,W) or (N,C,1,1)."""
    if kind not in ("mul", "add"):
        raise ValueError(f"kind must be 'mul' or 'add', got {kind!r}")
    if not _broadcast_allowed(a.shape, b.shape):
        raise ValueError(
            f"cannot broadcast second operand {b.shape} against {a.shape}; "
            "allowed: equal shape, (N,1,H,W), or (N,C,1,1)"
        )
    if kind == "mul":
        out = a.data * b.data

        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g * b.data)
            if b.requires_grad:
                _accumulate(b, _reduce_to(g * a.data, b.shape))
    else:
        out = a.data + b.data

        def _bw(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, _reduce_to(g, b.shape))

    return _result(out, [a, b], _bw)


def mul(a, b):
    return elementwise(a, b, "mul")


def add(a, b):
    return elementwise(a, b, "add")


def affine(x, scale, shift=0.0):
    """scale * x + shift with python-scalar coefficients."""
    out = scale * x.data + shift

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, scale * g)

    return _result(out, [x], _bw)


def add_n(tensors):
    """Sum of same-shape tensors."""
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"add_n shape mismatch: {t.shape} vs {shape}")
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data

    def _bw(g):
        for t in tensors:
            _accumulate(t, g)

    return _result(out, list(tensors), _bw)


def _interp_matrix(n_in, n_out, dtype):
    # half-pixel centers: source coordinate = (i + 0.5) * (n_in / n_out) - 0.5
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out, dtype=dtype) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] += 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x, out_h, out_w):
    """Bilinear interpolation to (out_h, out_w), half-pixel-center convention."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got ({out_h}, {out_w})")
    n, c, h, w = x.shape
    ry = _interp_matrix(h, out_h, x.data.dtype)
    rx = _interp_matrix(w, out_w, x.data.dtype)
    out = np.einsum("oh,pw,nchw->ncop", ry, rx, x.data, optimize=True)

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, np.einsum("oh,pw,ncop->nchw", ry, rx, g, optimize=True))

    return _result(out, [x], _bw)


# ---------------------------------------------------------------------------
# loss operators
# ---------------------------------------------------------------------------

def bce_with_logits(x, target):
    """Mean binary cross-entropy between logits ``x`` and targets in [0, 1]."""
    t = np.asarray(target, dtype=x.data.dtype)
    if t.shape != x.shape:
        raise ValueError(f"target shape {t.shape} != logits shape {x.shape}")
    z = x.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = loss.mean()
    count = z.size

    def _bw(g):
        if x.requires_grad:
            gs = float(g.reshape(()))
            _accumulate(x, (gs / count) * (_sigmoid_stable(z) - t))

    return _result(np.full((1, 1, 1, 1), value, dtype=z.dtype), [x], _bw)


def softmax_cross_entropy(x, labels, ignore_index=-1):
    """Mean per-position cross-entropy over the channel axis.

    ``labels`` is an integer array of shape (N, H, W); positions equal to
    ``ignore_index`` are excluded from the mean. Returns 0 when nothing
    is labelled.
    """
    n, k, h, w = x.shape
    lab = np.asarray(labels)
    if lab.shape != (n, h, w):
        raise ValueError(f"labels shape {lab.shape} != (N, H, W) = {(n, h, w)}")
    valid = lab != ignore_index
    count = int(valid.sum())
    z = x.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)

    safe = np.where(valid, lab, 0)
    picked = np.take_along_axis(logp, safe[:, None, :, :], axis=1)[:, 0]
    value = -(picked * valid).sum() / count if count else 0.0

    def _bw(g):
        if x.requires_grad and count:
            gs = float(g.reshape(()))
            p = ez / sez
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, safe[:, None, :, :], 1.0, axis=1)
            gx = (p - onehot) * valid[:, None, :, :]
            _accumulate(x, (gs / count) * gx)

    return _result(np.full((1, 1, 1, 1), value, dtype=z.dtype), [x], _bw)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    ok: bool
    note: str = ""


class GradCheckReport:
    """Per-input maximum relative errors between analytic and numeric gradients."""

    def __init__(self, entries, tolerance):
        self.entries = entries
        self.tolerance = tolerance

    @property
    def ok(self):
        return all(e.ok for e in self.entries)

    @property
    def failures(self):
        return [e for e in self.entries if not e.ok]

    def max_rel_error(self, name=None):
        if name is None:
            return max((e.max_rel_error for e in self.entries), default=0.0)
        for e in self.entries:
            if e.name == name:
                return e.max_rel_error
        raise KeyError(name)

    def __str__(self):
        width = max([len(e.name) for e in self.entries] + [5])
        lines = [f"{'input':<{width}}  {'max rel err':>12}  status"]
        for e in self.entries:
            status = "ok" if e.ok else "FAIL"
            if e.note:
                status += f" ({e.note})"
            lines.append(f"{e.name:<{width}}  {e.max_rel_error:>12.3e}  {status}")
        return "\n".join(lines)


def grad_check(fn, wrt, names=None, step=1e-5, tolerance=1e-5, rng=None,
               max_coords=24):
    """Check analytic gradients of ``fn`` against central finite differences.

    ``fn`` is a zero-argument callable rebuilding the computation from the
    leaf tensors in ``wrt`` (their ``.data`` is read fresh on every call).
    The scalar under test is sum(output * v) for a fixed random cotangent v.
    Per input, the reported error is

        max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)

    over a coordinate sample that always includes the largest-magnitude
    analytic entry; arrays up to ``max_coords`` entries are checked in full.
    A backward rule off by a factor of two therefore reports ~0.5.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if names is None:
        names = [getattr(t, "name", "") or f"input{i}" for i, t in enumerate(wrt)]

    out = fn()
    if not np.all(np.isfinite(out.data)):
        entries = [GradCheckEntry(n, np.inf, False, "non-finite forward output")
                   for n in names]
        return GradCheckReport(entries, tolerance)

    v = rng.standard_normal(out.shape).astype(out.data.dtype)

    def scalar():
        return float((fn().data * v).sum())

    for t in wrt:
        if isinstance(t, Param):
            t.zero_grad()
        else:
            t.grad = None
    out = fn()
    out.backward(v)

    entries = []
    for t, name in zip(wrt, names):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        aflat = analytic.reshape(-1)
        size = flat.size
        if size <= max_coords:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=max_coords, replace=False)
            coords = np.union1d(coords, [int(np.argmax(np.abs(aflat)))])
        diffs = []
        numeric_mags = []
        bad = False
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            s_plus = scalar()
            flat[i] = orig - step
            s_minus = scalar()
            flat[i] = orig
            if not (np.isfinite(s_plus) and np.isfinite(s_minus)):
                bad = True
                break
            num = (s_plus - s_minus) / (2.0 * step)
            diffs.append(abs(aflat[i] - num))
            numeric_mags.append(abs(num))
        if bad:
            entries.append(GradCheckEntry(name, np.inf, False,
                                          "non-finite forward output"))
            continue
        denom = max(float(np.abs(aflat).max()), max(numeric_mags, default=0.0), 1e-12)
        err = max(diffs, default=0.0) / denom
        entries.append(GradCheckEntry(name, err, err <= tolerance))
    return GradCheckReport(entries, tolerance)
