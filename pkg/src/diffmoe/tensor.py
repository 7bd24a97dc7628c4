"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is exactly what the denoisers, routing agent and budget
objective need: elementwise arithmetic, matmul/conv, per-channel
normalization, a few activations, reductions, and structural ops (reshape,
concat, channel masking, unit permutation). Ops record onto the innermost
active ``Tape``; without one they are plain numpy and allocate no graph.
"""

from __future__ import annotations

import numpy as np

_TAPES: list = []  # stack; top entry None disables recording
_DEBUG_FINITE = False


def set_debug_checks(enabled: bool) -> None:
    """Debug mode asserts finiteness after every primitive."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


def _active():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """A numpy float64 array plus an optional handle into the active tape."""

    __slots__ = ("data", "node")

    def __init__(self, data, node=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor with a persistent gradient buffer."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = ""):
        super().__init__(data)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self):
        self.grad.fill(0.0)


class _Node:
    __slots__ = ("parents", "backward_fn", "grad", "index", "tape", "source")

    def __init__(self, parents, backward_fn, index, tape, source=None):
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None
        self.index = index
        self.tape = tape
        self.source = source


class Tape:
    """Ordered record of primitive ops; context manager enables recording."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPES.pop()
        assert popped is self

    def _leaf(self, tensor: Tensor) -> _Node:
        if tensor.node is not None and tensor.node.tape is self:
            return tensor.node
        source = tensor if isinstance(tensor, Parameter) else None
        node = _Node([], None, len(self.nodes), self, source=source)
        self.nodes.append(node)
        tensor.node = node
        return node

    def record(self, out: Tensor, parents, backward_fn) -> None:
        nodes = [self._leaf(p) for p in parents]
        node = _Node(nodes, backward_fn, len(self.nodes), self)
        self.nodes.append(node)
        out.node = node


class no_tape:
    """Temporarily disable recording inside an active tape."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()


def _make(data, parents, backward_fn) -> Tensor:
    if _DEBUG_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by primitive")
    out = Tensor(data)
    tape = _active()
    if tape is not None:
        tape.record(out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate Parameter.grad for every parameter reachable from `loss`.

    Repeated calls accumulate; callers zero grads between steps. Visits each
    tape node at most once, in reverse recording order.
    """
    if loss.node is None:
        raise ValueError("loss is not recorded on a tape")
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    tape = loss.node.tape
    for node in tape.nodes:
        node.grad = None
    loss.node.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        g = node.grad
        if g is None:
            continue
        if node.backward_fn is None:  # leaf
            if node.source is not None:
                node.source.grad += g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg
        node.grad = None


# ---------------------------------------------------------------------------
# shape / validation helpers


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.size == 0:
        raise ValueError(f"{op}: empty tensor")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, [a, b], lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, [a, b], lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, [a, b], lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, [a], lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, [a], lambda g: (g * s,))


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    return _make(a.data + c, [a], lambda g: (g,))


def smul(a: Tensor, s: Tensor) -> Tensor:
    """Multiply by a scalar tensor (broadcast), differentiable in both."""
    if s.data.size != 1:
        raise ValueError("smul: second operand must be scalar")
    ad, sv = a.data, float(s.data)
    return _make(
        ad * sv, [a, s], lambda g: (g * sv, np.sum(g * ad).reshape(s.data.shape))
    )


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, [a, b], lambda g: (g @ bd.T, ad.T @ g))


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over the last two axes (leading dims must match)."""
    ad, bd = a.data, b.data
    if ad.shape[:-2] != bd.shape[:-2] or ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"bmm: incompatible shapes {ad.shape} @ {bd.shape}")
    return _make(
        np.matmul(ad, bd),
        [a, b],
        lambda g: (np.matmul(g, np.swapaxes(bd, -1, -2)), np.matmul(np.swapaxes(ad, -1, -2), g)),
    )


def swap_last(a: Tensor) -> Tensor:
    return _make(np.swapaxes(a.data, -1, -2), [a], lambda g: (np.swapaxes(g, -1, -2),))


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map: x (B,n) @ w(m,n)^T + b(m,)."""
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"dense: incompatible shapes {xd.shape}, {wd.shape}")
    out = xd @ wd.T
    if b is None:
        return _make(out, [x, w], lambda g: (g @ wd, g.T @ xd))
    out = out + b.data
    return _make(out, [x, w, b], lambda g: (g @ wd, g.T @ xd, g.sum(0)))


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """1-D convolution, symmetric zero padding K//2, stride 1 or 2.

    x: (B, Cin, L), w: (Cout, Cin, K), b: (Cout,). Lowered to one batched
    GEMM over K shifted input slices.
    """
    xd, wd = x.data, w.data
    if stride not in (1, 2):
        raise ValueError("conv1d: stride must be 1 or 2")
    if xd.ndim != 3 or wd.ndim != 3 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv1d: incompatible shapes {xd.shape}, {wd.shape}")
    B, Cin, L = xd.shape
    Cout, _, K = wd.shape
    p = K // 2
    Lout = (L + 2 * p - K) // stride + 1
    wm = wd.reshape(Cout, Cin * K)

    # im2col: one large GEMM instead of per-sample batched ones
    if K == 1 and stride == 1:
        xcol = np.ascontiguousarray(xd.transpose(0, 2, 1)).reshape(B * L, Cin)
    else:
        xp = np.zeros((B, Cin, L + 2 * p))
        xp[:, :, p : p + L] = xd
        cols = np.empty((B, Lout, Cin, K))
        for k in range(K):
            cols[:, :, :, k] = xp[:, :, k : k + stride * Lout : stride].transpose(0, 2, 1)
        xcol = cols.reshape(B * Lout, Cin * K)
    out = (xcol @ wm.T).reshape(B, Lout, Cout)
    if b is not None:
        out = out.transpose(0, 2, 1) + b.data[None, :, None]
    else:
        out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def back(g):
        gcol = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * Lout, Cout)
        gw = (gcol.T @ xcol).reshape(Cout, Cin, K)
        gxcol = (gcol @ wm).reshape(B, Lout, Cin, K)
        if K == 1 and stride == 1:
            gx = np.ascontiguousarray(gxcol[:, :, :, 0].transpose(0, 2, 1))
        else:
            gxp = np.zeros((B, Cin, L + 2 * p))
            for k in range(K):
                gxp[:, :, k : k + stride * Lout : stride] += gxcol[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, p : p + L]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    parents = [x, w] if b is None else [x, w, b]
    return _make(out, parents, back)


# ---------------------------------------------------------------------------
# normalization and activations


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each channel over its spatial axis, then scale/shift per channel.

    Per-channel statistics keep masked channels from perturbing survivors,
    which the hard-prune equivalence oracle requires.
    """
    xd = x.data
    if xd.ndim != 3 or gamma.data.shape != (xd.shape[1],) or beta.data.shape != (xd.shape[1],):
        raise ValueError("channel_norm: expected x (B,C,L) with per-channel gamma/beta")
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    gd = gamma.data
    out = gd[None, :, None] * xhat + beta.data[None, :, None]

    def back(g):
        gxhat = g * gd[None, :, None]
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    return _make(out, [x, gamma, beta], back)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _stable_sigmoid(x.data)
    return _make(y, [x], lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    xd = x.data
    return _make(xd * s, [x], lambda g: (g * s * (1.0 + xd * (1.0 - s)),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, [x], lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.maximum(xd, 0.0), [x], lambda g: (g * (xd > 0.0),))


def softmax(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, [x], lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), [x], lambda g: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, [x], lambda g: (2.0 * g * xd,))


def abs_(x: Tensor) -> Tensor:
    """Absolute value; subgradient 0 at zero."""
    xd = x.data
    return _make(np.abs(xd), [x], lambda g: (g * np.sign(xd),))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; zero gradient where clamped."""
    xd = x.data
    mask = (xd > lo) & (xd < hi)
    return _make(np.clip(xd, lo, hi), [x], lambda g: (g * mask,))


def ste_round(x: Tensor) -> Tensor:
    """Round to nearest in the forward pass, identity gradient in the backward."""
    return _make(np.round(x.data), [x], lambda g: (g,))


# ---------------------------------------------------------------------------
# reductions


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ValueError("mean: empty tensor")
    return _make(np.array(x.data.mean()), [x], lambda g: (np.full_like(x.data, float(g) / n),))


def tsum(x: Tensor) -> Tensor:
    if x.data.size == 0:
        raise ValueError("sum: empty tensor")
    return _make(np.array(x.data.sum()), [x], lambda g: (np.full_like(x.data, float(g)),))


def cumsum(x: Tensor) -> Tensor:
    """Cumulative sum along the last axis."""
    return _make(
        np.cumsum(x.data, axis=-1),
        [x],
        lambda g: (np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1),),
    )


def flip_last(x: Tensor) -> Tensor:
    return _make(np.flip(x.data, axis=-1).copy(), [x], lambda g: (np.flip(g, axis=-1),))


def l2norm(x: Tensor) -> Tensor:
    xd = x.data
    n = float(np.sqrt((xd * xd).sum()))

    def back(g):
        if n == 0.0:
            return (np.zeros_like(xd),)
        return (float(g) * xd / n,)

    return _make(np.array(n), [x], back)


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two flat vectors."""
    ad, bd = a.data.ravel(), b.data.ravel()
    if ad.shape != bd.shape or ad.size == 0:
        raise ValueError("cosine: vectors must be equal-length and nonempty")
    na = float(np.sqrt((ad * ad).sum()))
    nb = float(np.sqrt((bd * bd).sum()))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine: zero-norm vector")
    c = float(ad @ bd) / (na * nb)

    def back(g):
        gf = float(g)
        ga = gf * (bd / (na * nb) - c * ad / (na * na))
        gb = gf * (ad / (na * nb) - c * bd / (nb * nb))
        return ga.reshape(a.data.shape), gb.reshape(b.data.shape)

    return _make(np.array(c), [a, b], back)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), [x], lambda g: (g.reshape(old),))


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ValueError("concat: no inputs")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), list(parts), back)


def mask_channels(x: Tensor, m: Tensor) -> Tensor:
    """Broadcast-multiply a per-channel vector m (C,) over axis 1 of x."""
    xd, md = x.data, m.data
    if md.ndim != 1 or xd.ndim < 2 or xd.shape[1] != md.shape[0]:
        raise ValueError(f"mask_channels: mask {md.shape} does not fit {xd.shape}")
    mb = md.reshape((1, -1) + (1,) * (xd.ndim - 2))

    def back(g):
        axes = (0,) + tuple(range(2, xd.ndim))
        return g * mb, (g * xd).sum(axis=axes)

    return _make(xd * mb, [x, m], back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis, broadcast over leading axes."""
    xd, bd = x.data, b.data
    if bd.ndim != 1 or xd.shape[-1] != bd.shape[0]:
        raise ValueError(f"add_bias: bias {bd.shape} does not fit {xd.shape}")
    axes = tuple(range(xd.ndim - 1))
    return _make(xd + bd, [x, b], lambda g: (g, g.sum(axis=axes)))


def add_spatial_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-(sample, channel) bias b (B,C) to x (B,C,L)."""
    xd, bd = x.data, b.data
    if xd.ndim != 3 or bd.shape != xd.shape[:2]:
        raise ValueError(f"add_spatial_bias: bias {bd.shape} does not fit {xd.shape}")
    return _make(xd + bd[:, :, None], [x, b], lambda g: (g, g.sum(axis=-1)))


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 along the spatial axis."""
    return _make(
        np.repeat(x.data, 2, axis=-1),
        [x],
        lambda g: (g[..., 0::2] + g[..., 1::2],),
    )


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table by integer index (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(table.data[idx], [table], back)


def take_elems(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather elements of a 1-D tensor by integer index (repeats allowed)."""
    if x.data.ndim != 1:
        raise ValueError("take_elems: 1-D tensor required")
    idx = np.asarray(idx, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(x.data[idx], [x], back)


def pick(x: Tensor, i: int) -> Tensor:
    """Extract element i of a 1-D tensor as a differentiable scalar."""
    if x.data.ndim != 1:
        raise ValueError("pick: 1-D tensor required")
    i = int(i)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[i] = float(g)
        return (gx,)

    return _make(np.array(x.data[i]), [x], back)


def scatter_perm(x: Tensor, perm: np.ndarray) -> Tensor:
    """Place x's entries at positions perm: out[perm[e]] = x[e] (1-D)."""
    perm = np.asarray(perm, dtype=np.int64)
    if x.data.ndim != 1 or perm.shape != x.data.shape:
        raise ValueError("scatter_perm: 1-D tensor and matching permutation required")
    out = np.empty_like(x.data)
    out[perm] = x.data
    return _make(out, [x], lambda g: (g[perm],))


def row_unit(v: Tensor) -> Tensor:
    """Normalize each row of a 2-D matrix to unit L2 norm."""
    vd = v.data
    norms = np.sqrt((vd * vd).sum(axis=1, keepdims=True))
    u = vd / norms

    def back(g):
        return ((g - u * (g * u).sum(axis=1, keepdims=True)) / norms,)

    return _make(u, [v], back)


def weight_norm(v: Tensor, g: Tensor) -> Tensor:
    """Fused row_scale(row_unit(v), g): rows of v rescaled to length g."""
    vd, gd = v.data, g.data
    if vd.ndim != 2 or gd.shape != (vd.shape[0],):
        raise ValueError("weight_norm: v must be 2-D with per-row g")
    norms = np.sqrt((vd * vd).sum(axis=1, keepdims=True))
    u = vd / norms
    out = u * gd[:, None]

    def back(gr):
        gu = gr * gd[:, None]
        gv = (gu - u * (gu * u).sum(axis=1, keepdims=True)) / norms
        return gv, (gr * u).sum(axis=1)

    return _make(out, [v, g], back)


def sum_last(x: Tensor) -> Tensor:
    """Sum along the last axis."""
    if x.data.size == 0:
        raise ValueError("sum_last: empty tensor")
    n = x.data.shape[-1]
    return _make(
        x.data.sum(axis=-1),
        [x],
        lambda g: (np.repeat(g[..., None], n, axis=-1),),
    )


def row_scale(w: Tensor, s: Tensor) -> Tensor:
    """Scale each row i of a 2-D matrix by s[i]."""
    wd, sd = w.data, s.data
    if wd.ndim != 2 or sd.shape != (wd.shape[0],):
        raise ValueError("row_scale: shape mismatch")
    return _make(
        wd * sd[:, None],
        [w, s],
        lambda g: (g * sd[:, None], (g * wd).sum(axis=1)),
    )
