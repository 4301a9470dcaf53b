"""Reverse-mode automatic differentiation on float64 numpy arrays.

A forward pass run inside a `Tape` context records one node per operation,
in creation order (which is automatically topological).  `Tape.backward`
replays the nodes in reverse, accumulating gradients additively so that
fan-out (using a tensor twice) just works.  Outside of a tape, every
operation is a plain numpy computation: frozen parameters can be shared
across threads for inference.

Broadcasting is deliberately restricted to scalar-with-tensor and
equal-shape operands (plus the few fused ops below that state their own
shape contract); this keeps every backward formula short enough to audit
by eye.
"""

from __future__ import annotations

import threading

import numpy as np

NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not satisfy an op's contract."""


class DomainError(ValueError):
    """Operand values are outside an op's domain."""


class UsageError(RuntimeError):
    """An op was called in a way the tape cannot support."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


class Node:
    """One recorded op: output tensor plus a closure pulling grads back."""

    __slots__ = ("op", "out", "pull")

    def __init__(self, op, out, pull):
        self.op = op
        self.out = out
        self.pull = pull


_tls = threading.local()


def _active_tape():
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of ops for one forward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if _active_tape() is not None:
            raise UsageError("a tape is already active in this thread")
        _tls.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tape = None
        return False

    def backward(self, loss):
        """Reverse sweep from a scalar loss; fills .grad on reachable tensors."""
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        loss.accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node.out.grad is not None:
                node.pull(node.out.grad)


def _record(op, out, inputs, pull):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, out, pull))
    return out


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_pair(op, a, b):
    if a.data.shape == b.data.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} are neither equal nor scalar")


def _reduce_to(g, shape):
    # gradient of a scalar operand broadcast against a tensor
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_pair("add", a, b)
    out = Tensor(a.data + b.data)

    def pull(g):
        if a.requires_grad:
            a.accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g, b.data.shape))

    return _record("add", out, (a, b), pull)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_pair("mul", a, b)
    out = Tensor(a.data * b.data)

    def pull(g):
        if a.requires_grad:
            a.accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g * a.data, b.data.shape))

    return _record("mul", out, (a, b), pull)


def sub_from_one(x):
    out = Tensor(1.0 - x.data)

    def pull(g):
        if x.requires_grad:
            x.accumulate(-g)

    return _record("sub_from_one", out, (x,), pull)


def relu(x):
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def pull(g):
        if x.requires_grad:
            x.accumulate(g * mask)

    return _record("relu", out, (x,), pull)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sigmoid_fast(z):
    # bounded-activation path (LSTM gates): exp overflow saturates correctly
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


def sigmoid(x):
    s = _sigmoid(x.data)
    out = Tensor(s)

    def pull(g):
        if x.requires_grad:
            x.accumulate(g * s * (1.0 - s))

    return _record("sigmoid", out, (x,), pull)


def tanh(x):
    t = np.tanh(x.data)
    out = Tensor(t)

    def pull(g):
        if x.requires_grad:
            x.accumulate(g * (1.0 - t * t))

    return _record("tanh", out, (x,), pull)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def pull(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.T)
        if b.requires_grad:
            b.accumulate(a.data.T @ g)

    return _record("matmul", out, (a, b), pull)


def add_bias(x, b):
    """x[..., k] + b[k] with the bias broadcast over leading axes."""
    if x.data.shape[-1:] != b.data.shape:
        raise ShapeError(f"add_bias: bias {b.data.shape} does not match last axis of {x.data.shape}")
    out = Tensor(x.data + b.data)

    def pull(g):
        if x.requires_grad:
            x.accumulate(g)
        if b.requires_grad:
            b.accumulate(g.reshape(-1, b.data.shape[0]).sum(axis=0))

    return _record("add_bias", out, (x, b), pull)


def cosine(a, b):
    """cos(a, b) for 1-D vectors; 0 (with zero gradient) if either norm < 1e-12."""
    if a.data.ndim != 1 or b.data.ndim != 1 or a.data.shape != b.data.shape:
        raise ShapeError(f"cosine needs equal-length vectors, got {a.data.shape} and {b.data.shape}")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    degenerate = na < NORM_FLOOR or nb < NORM_FLOOR
    c = 0.0 if degenerate else float(a.data @ b.data) / (na * nb)
    out = Tensor(c)

    def pull(g):
        if degenerate:
            return
        gs = float(g)
        if a.requires_grad:
            a.accumulate(gs * (b.data / (na * nb) - c * a.data / (na * na)))
        if b.requires_grad:
            b.accumulate(gs * (a.data / (na * nb) - c * b.data / (nb * nb)))

    return _record("cosine", out, (a, b), pull)


def cosine_matrix(a, b):
    """All-pairs cosine: a[..., n, d] x b[..., m, d] -> [..., n, m].

    Either operand may be 2-D while the other is 3-D, in which case the 2-D
    one is shared across the batch axis.  Rows with norm < 1e-12 produce 0
    entries and receive no gradient.
    """
    if a.data.ndim not in (2, 3) or b.data.ndim not in (2, 3):
        raise ShapeError(f"cosine_matrix needs 2-D or 3-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-1]:
        raise ShapeError(f"cosine_matrix: vector widths disagree: {a.data.shape} vs {b.data.shape}")

    na = np.linalg.norm(a.data, axis=-1, keepdims=True)
    nb = np.linalg.norm(b.data, axis=-1, keepdims=True)
    live_a = na >= NORM_FLOOR
    live_b = nb >= NORM_FLOOR
    an = np.where(live_a, a.data / np.where(live_a, na, 1.0), 0.0)
    bn = np.where(live_b, b.data / np.where(live_b, nb, 1.0), 0.0)
    m = an @ bn.swapaxes(-1, -2)
    out = Tensor(m)

    def pull(g):
        if a.requires_grad:
            gb = g @ bn
            diag = np.sum(g * m, axis=-1, keepdims=True)
            da = np.where(live_a, (gb - diag * an) / np.where(live_a, na, 1.0), 0.0)
            if da.ndim > a.data.ndim:
                da = da.sum(axis=0)
            a.accumulate(da)
        if b.requires_grad:
            ga = g.swapaxes(-1, -2) @ an
            diag = np.sum(g * m, axis=-2)[..., None]
            db = np.where(live_b, (ga - diag * bn) / np.where(live_b, nb, 1.0), 0.0)
            if db.ndim > b.data.ndim:
                db = db.sum(axis=0)
            b.accumulate(db)

    return _record("cosine_matrix", out, (a, b), pull)


def softmax(v):
    """Max-subtracted stable softmax over a 1-D vector."""
    if v.data.ndim != 1 or v.data.shape[0] < 1:
        raise ShapeError(f"softmax needs a non-empty 1-D vector, got shape {v.data.shape}")
    z = v.data - np.max(v.data)
    e = np.exp(z)
    s = e / e.sum()
    out = Tensor(s)

    def pull(g):
        if v.requires_grad:
            v.accumulate(s * (g - float(g @ s)))

    return _record("softmax", out, (v,), pull)


def softmax_rows(v):
    """Row-wise stable softmax over a 2-D tensor."""
    if v.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a 2-D tensor, got shape {v.data.shape}")
    z = v.data - v.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    out = Tensor(s)

    def pull(g):
        if v.requires_grad:
            v.accumulate(s * (g - np.sum(g * s, axis=1, keepdims=True)))

    return _record("softmax_rows", out, (v,), pull)


# ---------------------------------------------------------------------------
# reductions and shaping


def pool(t, axis, kind):
    """Reduce one axis by max or mean.

    Max routes its gradient to the first-encountered argmax along the axis,
    so ties resolve to the lowest index.
    """
    if axis >= t.data.ndim:
        raise ShapeError(f"pool axis {axis} out of range for shape {t.data.shape}")
    if t.data.shape[axis] == 0:
        raise DomainError(f"pool over empty axis {axis} of shape {t.data.shape}")
    if kind == "max":
        idx = np.argmax(t.data, axis=axis)
        out = Tensor(np.take_along_axis(t.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis))

        def pull(g):
            if t.requires_grad:
                dt = np.zeros_like(t.data)
                np.put_along_axis(dt, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
                t.accumulate(dt)

    elif kind == "mean":
        n = t.data.shape[axis]
        out = Tensor(t.data.mean(axis=axis))

        def pull(g):
            if t.requires_grad:
                t.accumulate(np.repeat(np.expand_dims(g / n, axis), n, axis=axis))

    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    return _record(f"pool_{kind}", out, (t,), pull)


def asum(x):
    """Sum of all entries, as a scalar tensor."""
    out = Tensor(x.data.sum())

    def pull(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g)))

    return _record("asum", out, (x,), pull)


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))

    def pull(g):
        if x.requires_grad:
            x.accumulate(g.reshape(x.data.shape))

    return _record("reshape", out, (x,), pull)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]

    def pull(g):
        start = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + size)
                t.accumulate(g[tuple(sl)])
            start += size

    return _record("concat", out, tuple(tensors), pull)


def stack(tensors, axis=0):
    tensors = list(tensors)
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    def pull(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t.accumulate(np.take(g, i, axis=axis))

    return _record("stack", out, tuple(tensors), pull)


def take_row(x, i):
    """Row i of a 2-D tensor, as a 1-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"take_row needs a 2-D tensor, got shape {x.data.shape}")
    out = Tensor(x.data[i])

    def pull(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[i] = g
            x.accumulate(dx)

    return _record("take_row", out, (x,), pull)


def gather_rows(x, idx):
    """out[b] = x[b, idx[b]] for x[b, t, ...] and one time index per row."""
    idx = np.asarray(idx)
    if x.data.ndim < 2 or idx.shape != (x.data.shape[0],):
        raise ShapeError(f"gather_rows: indices {idx.shape} do not fit {x.data.shape}")
    rows = np.arange(x.data.shape[0])
    out = Tensor(x.data[rows, idx])

    def pull(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[rows, idx] = g
            x.accumulate(dx)

    return _record("gather_rows", out, (x,), pull)


def tile0(x, k):
    """Stack k copies of x along the leading axis: (b, ...) -> (k*b, ...)."""
    reps = (k,) + (1,) * (x.data.ndim - 1)
    out = Tensor(np.tile(x.data, reps))

    def pull(g):
        if x.requires_grad:
            x.accumulate(g.reshape((k,) + x.data.shape).sum(axis=0))

    return _record("tile0", out, (x,), pull)


def repeat0(x, k):
    """Repeat each leading-axis row k times consecutively: (b, ...) -> (b*k, ...)."""
    out = Tensor(np.repeat(x.data, k, axis=0))

    def pull(g):
        if x.requires_grad:
            x.accumulate(g.reshape((x.data.shape[0], k) + x.data.shape[1:]).sum(axis=1))

    return _record("repeat0", out, (x,), pull)


def permute0(x, perm):
    """Reorder leading-axis rows: out[i] = x[perm[i]] for a permutation."""
    perm = np.asarray(perm)
    out = Tensor(x.data[perm])

    def pull(g):
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            dx[perm] = g
            x.accumulate(dx)

    return _record("permute0", out, (x,), pull)


def bmm(a, b):
    """Batched matmul: (B, n, k) x (B, k, m) -> (B, n, m)."""
    if a.data.ndim != 3 or b.data.ndim != 3 or a.data.shape[0] != b.data.shape[0] \
            or a.data.shape[2] != b.data.shape[1]:
        raise ShapeError(f"bmm shapes disagree: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def pull(g):
        if a.requires_grad:
            a.accumulate(g @ b.data.transpose(0, 2, 1))
        if b.requires_grad:
            b.accumulate(a.data.transpose(0, 2, 1) @ g)

    return _record("bmm", out, (a, b), pull)


def scale_rows(x, s):
    """out[b] = s[b] * x[b] for x[b, ...] and a 1-D scale vector s."""
    if s.data.ndim != 1 or x.data.shape[0] != s.data.shape[0]:
        raise ShapeError(f"scale_rows: scale {s.data.shape} does not match leading axis of {x.data.shape}")
    sb = s.data.reshape((-1,) + (1,) * (x.data.ndim - 1))
    out = Tensor(x.data * sb)

    def pull(g):
        if x.requires_grad:
            x.accumulate(g * sb)
        if s.requires_grad:
            s.accumulate(np.sum(g * x.data, axis=tuple(range(1, x.data.ndim))))

    return _record("scale_rows", out, (x, s), pull)


def mask_rows(x, mask):
    """Zero the [..., t, :] rows where the constant mask[..., t] is 0."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.data.shape[:-1]:
        raise ShapeError(f"mask_rows: mask {m.shape} does not match row axes of {x.data.shape}")
    mb = m[..., None]
    out = Tensor(x.data * mb)

    def pull(g):
        if x.requires_grad:
            x.accumulate(g * mb)

    return _record("mask_rows", out, (x,), pull)


def masked_mean_rows(x, mask):
    """Mean of x[..., t, :] over the rows the constant mask marks real.

    Rows divide by the real-token count, never the padded length; an
    all-padded sequence yields an exactly zero vector.
    """
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.data.shape[:-1]:
        raise ShapeError(f"masked_mean_rows: mask {m.shape} does not match row axes of {x.data.shape}")
    n = m.sum(axis=-1)
    safe = np.where(n > 0, n, 1.0)
    out = Tensor((m[..., None, :] @ x.data)[..., 0, :] / safe[..., None])

    def pull(g):
        if x.requires_grad:
            scaled = (g / safe[..., None])[..., None, :]
            x.accumulate(m[..., None] @ scaled)

    return _record("masked_mean_rows", out, (x,), pull)


def rows_lookup(table, ids, mask):
    """Embedding lookup: table[V, d] gathered by ids[..., t], masked rows zeroed."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(f"token id out of range for table of {table.data.shape[0]} rows")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != ids.shape:
        raise ShapeError(f"rows_lookup: mask {m.shape} does not match ids {ids.shape}")
    out = Tensor(table.data[ids] * m[..., None])

    def pull(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g * m[..., None])  # in place: the table is huge

    return _record("rows_lookup", out, (table,), pull)


# ---------------------------------------------------------------------------
# convolution block


def conv2d_block(x, filters, bias):
    """Valid 3x3 convolution, ReLU, 2x2/stride-2 max-pool, flatten.

    x is (c, h, w) for one feature map or (batch, c, h, w); filters are
    (f, c, 3, 3).  Pooling uses clipped windows on odd boundaries (a lone
    trailing row/column pools with itself), and ties route to the
    first window cell in row-major order.
    """
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d_block needs (c,h,w) or (b,c,h,w), got {x.data.shape}")
    b_, c, h, w = xd.shape
    f, fc, kh, kw = filters.data.shape
    if fc != c:
        raise ShapeError(f"conv2d_block: input has {c} channels but filters expect {fc}")
    if h < kh or w < kw:
        raise ShapeError(f"conv2d_block: input {h}x{w} smaller than kernel {kh}x{kw}")
    h2, w2 = h - kh + 1, w - kw + 1

    # im2col: one GEMM instead of a slice loop
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b_ * h2 * w2, c * kh * kw)
    wmat = filters.data.reshape(f, c * kh * kw)
    conv = (cols @ wmat.T).reshape(b_, h2, w2, f).transpose(0, 3, 1, 2)
    conv = conv + bias.data[None, :, None, None]
    act = np.maximum(conv, 0.0)
    act_mask = conv > 0.0

    hp, wp = -(-h2 // 2), -(-w2 // 2)
    padded = np.full((b_, f, 2 * hp, 2 * wp), -np.inf)
    padded[:, :, :h2, :w2] = act
    windows = padded.reshape(b_, f, hp, 2, wp, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b_, f, hp, wp, 4)
    widx = np.argmax(windows, axis=-1)
    pooled = np.take_along_axis(windows, widx[..., None], axis=-1)[..., 0]
    out_data = pooled.reshape(b_, f * hp * wp)
    out = Tensor(out_data[0] if single else out_data)

    def pull(g):
        gq = (g[None] if single else g).reshape(b_, f, hp, wp)
        dact = np.zeros_like(act)
        win_r = 2 * np.arange(hp)[:, None] + widx // 2
        win_c = 2 * np.arange(wp)[None, :] + widx % 2
        bi, fi = np.meshgrid(np.arange(b_), np.arange(f), indexing="ij")
        np.add.at(dact, (bi[:, :, None, None], fi[:, :, None, None], win_r, win_c), gq)
        dconv = dact * act_mask
        dflat = dconv.transpose(0, 2, 3, 1).reshape(b_ * h2 * w2, f)
        if bias.requires_grad:
            bias.accumulate(dconv.sum(axis=(0, 2, 3)))
        if filters.requires_grad:
            filters.accumulate((dflat.T @ cols).reshape(filters.data.shape))
        if x.requires_grad:
            dcols = (dflat @ wmat).reshape(b_, h2, w2, c, kh, kw)
            dx = np.zeros_like(xd)
            for di in range(kh):
                for dj in range(kw):
                    dx[:, :, di:di + h2, dj:dj + w2] += dcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
            x.accumulate(dx[0] if single else dx)

    return _record("conv2d_block", out, (x, filters, bias), pull)


# ---------------------------------------------------------------------------
# LSTM


def lstm_batch(x, wx, wh, b):
    """LSTM over x[batch, T, d_in] from zero state; returns all hidden states.

    Weights: wx[d_in, 4h], wh[h, 4h], b[4h] with gates packed [input,
    forget, cell, output] along the last axis.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"lstm_batch needs (batch, T, d), got {x.data.shape}")
    bsz, steps, d_in = x.data.shape
    if steps < 1:
        raise DomainError("lstm over an empty sequence")
    hidden = wh.data.shape[0]
    if wx.data.shape != (d_in, 4 * hidden) or b.data.shape != (4 * hidden,):
        raise ShapeError(f"lstm weights inconsistent: wx{wx.data.shape} wh{wh.data.shape} b{b.data.shape}")

    gi = np.empty((bsz, steps, hidden))
    gf = np.empty((bsz, steps, hidden))
    gg = np.empty((bsz, steps, hidden))
    go = np.empty((bsz, steps, hidden))
    cs = np.empty((bsz, steps, hidden))
    tc = np.empty((bsz, steps, hidden))
    hs = np.empty((bsz, steps, hidden))

    xflat = x.data.reshape(bsz * steps, d_in)
    xproj = (xflat @ wx.data).reshape(bsz, steps, 4 * hidden)
    h = np.zeros((bsz, hidden))
    c = np.zeros((bsz, hidden))
    for t in range(steps):
        z = xproj[:, t] + h @ wh.data + b.data
        i = _sigmoid_fast(z[:, :hidden])
        f = _sigmoid_fast(z[:, hidden:2 * hidden])
        g_ = np.tanh(z[:, 2 * hidden:3 * hidden])
        o = _sigmoid_fast(z[:, 3 * hidden:])
        c = f * c + i * g_
        t_c = np.tanh(c)
        h = o * t_c
        gi[:, t], gf[:, t], gg[:, t], go[:, t] = i, f, g_, o
        cs[:, t], tc[:, t], hs[:, t] = c, t_c, h

    out = Tensor(hs)

    def pull(gh):
        dz_all = np.empty((bsz, steps, 4 * hidden))
        dh_rec = np.zeros((bsz, hidden))
        dc_rec = np.zeros((bsz, hidden))
        for t in range(steps - 1, -1, -1):
            dh = gh[:, t] + dh_rec
            i, f, g_, o = gi[:, t], gf[:, t], gg[:, t], go[:, t]
            dz = dz_all[:, t]
            dc = dh * o * (1.0 - tc[:, t] ** 2) + dc_rec
            dz[:, 3 * hidden:] = dh * tc[:, t] * o * (1.0 - o)
            dz[:, :hidden] = dc * g_ * i * (1.0 - i)
            dz[:, 2 * hidden:3 * hidden] = dc * i * (1.0 - g_ ** 2)
            c_prev = cs[:, t - 1] if t > 0 else 0.0
            dz[:, hidden:2 * hidden] = dc * c_prev * f * (1.0 - f)
            dh_rec = dz @ wh.data.T
            dc_rec = dc * f
        dz_flat = dz_all.reshape(bsz * steps, 4 * hidden)
        if wx.requires_grad:
            wx.accumulate(xflat.T @ dz_flat)
        if wh.requires_grad:
            h_prev = np.concatenate([np.zeros((bsz, 1, hidden)), hs[:, :-1]], axis=1)
            wh.accumulate(h_prev.reshape(bsz * steps, hidden).T @ dz_flat)
        if b.requires_grad:
            b.accumulate(dz_flat.sum(axis=0))
        if x.requires_grad:
            x.accumulate((dz_flat @ wx.data.T).reshape(x.data.shape))

    return _record("lstm", out, (x, wx, wh, b), pull)


def lstm_sequence(x, wx, wh, b):
    """LSTM over x[T, d_in]; returns (all hidden states [T, h], final state [h])."""
    if x.data.ndim != 2:
        raise ShapeError(f"lstm_sequence needs (T, d), got {x.data.shape}")
    steps = x.data.shape[0]
    if steps < 1:
        raise DomainError("lstm over an empty sequence")
    states3 = lstm_batch(reshape(x, (1,) + x.data.shape), wx, wh, b)
    states = reshape(states3, states3.data.shape[1:])
    return states, take_row(states, steps - 1)


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of sigmoid(logits) against {0,1} targets."""
    if logits.data.ndim != 1:
        raise ShapeError(f"bce_with_logits needs a 1-D logit vector, got {logits.data.shape}")
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.data.shape:
        raise ShapeError(f"bce_with_logits: targets {y.shape} do not match logits {logits.data.shape}")
    if np.any((y != 0.0) & (y != 1.0)):
        raise DomainError("bce_with_logits targets must be 0 or 1")
    z = logits.data
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.shape[0]
    out = Tensor(losses.mean())

    def pull(g):
        if logits.requires_grad:
            logits.accumulate(float(g) * (_sigmoid(z) - y) / n)

    return _record("bce_with_logits", out, (logits,), pull)


def bce_probs(probs, targets, mask=None):
    """Mean BCE of probabilities in (0,1) against {0,1} targets.

    Probabilities are clamped to [1e-12, 1 - 1e-12] before the logs; the
    mean runs over the positions the constant mask marks real.
    """
    y = np.asarray(targets, dtype=np.float64)
    p = probs.data
    if y.shape != p.shape:
        raise ShapeError(f"bce_probs: targets {y.shape} do not match probs {p.shape}")
    m = np.ones_like(p) if mask is None else np.asarray(mask, dtype=np.float64)
    live = m > 0
    if np.any(live & ((p <= 0.0) | (p >= 1.0))):
        raise DomainError("bce_probs: unmasked probability outside (0, 1)")
    n = live.sum()
    if n == 0:
        raise DomainError("bce_probs: mask selects no positions")
    pc = np.clip(p, 1e-12, 1.0 - 1e-12)
    losses = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    out = Tensor(float((losses * m).sum() / n))

    def pull(g):
        if probs.requires_grad:
            probs.accumulate(float(g) * m * (pc - y) / (pc * (1.0 - pc)) / n)

    return _record("bce_probs", out, (probs,), pull)


# ---------------------------------------------------------------------------
# optimizer and gradient checking


class AdamState:
    """First/second moment accumulators for one parameter list."""

    def __init__(self, params):
        self.step = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update with bias correction; mutates params and state."""
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad {g.shape} does not match param {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t)
        vhat = v / (1.0 - beta2 ** t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


def clip_grad_norm(grads, max_norm):
    """Scale the gradient list in place so its global L2 norm is <= max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def grad_check(fn, params, h=1e-5, tolerance=1e-4):
    """Max relative error between tape gradients and central differences.

    fn() must run a fresh forward pass over `params` and return a scalar
    Tensor.  Every entry of every parameter is perturbed, so keep the
    inputs desk-sized.

    Two classic FD artifacts are handled, and only those: an entry whose
    +-h window straddles a ReLU/argmax kink is re-measured at h/10 (inside
    the local linear piece; a genuine backward bug stays wrong at every
    step size), and the error is measured against max(|grad|, 1e-4)
    because cancellation noise (~eps*|loss|/h) makes smaller gradients
    unresolvable at 1e-4 relative accuracy in double precision.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def fd_error(flat, i, ai, step):
        keep = flat[i]
        flat[i] = keep + step
        up = fn().item()
        flat[i] = keep - step
        down = fn().item()
        flat[i] = keep
        numeric = (up - down) / (2.0 * step)
        return abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-4)

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            err = fd_error(flat, i, aflat[i], h)
            if err >= tolerance:
                err = min(err, fd_error(flat, i, aflat[i], h / 10.0))
            worst = max(worst, err)
    return worst
