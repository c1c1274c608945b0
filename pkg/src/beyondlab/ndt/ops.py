"""Differentiable primitives.

Every primitive has a reverse rule (vjp) and a forward rule (jvp).  Shapes
must match exactly; the only implicit broadcast is a scalar (python number or
0-d tensor) against a tensor.  ``bias_add`` is the one explicit exception and
adds a per-channel vector along axis 1.
"""

from __future__ import annotations

from numbers import Real

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTYPE, ShapeError, Tensor, emit

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _z(t, like):
    return np.zeros_like(like) if t is None else t


def _operands(a, b, kind):
    """Normalise a binary elementwise call; returns (tensors, arrays, scalar flags)."""
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    if ta is None and not isinstance(a, Real):
        raise TypeError(f"{kind}: unsupported operand {type(a).__name__}")
    if tb is None and not isinstance(b, Real):
        raise TypeError(f"{kind}: unsupported operand {type(b).__name__}")
    xa = ta.data if ta is not None else np.asarray(float(a), dtype=DTYPE)
    xb = tb.data if tb is not None else np.asarray(float(b), dtype=DTYPE)
    if xa.shape != xb.shape and xa.ndim != 0 and xb.ndim != 0:
        raise ShapeError(kind, xa.shape, xb.shape)
    return ta, tb, xa, xb


def _unscalar(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def _binary(kind, a, b, fwd, vjp_rule, jvp_rule):
    ta, tb, xa, xb = _operands(a, b, kind)
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite results are rejected by emit
        out = fwd(xa, xb)
    inputs = [t for t in (ta, tb) if t is not None]

    def vjp(g):
        ga, gb = vjp_rule(g, xa, xb)
        res = []
        if ta is not None:
            res.append(_unscalar(ga, xa.shape))
        if tb is not None:
            res.append(_unscalar(gb, xb.shape))
        return res

    def jvp(tans):
        it = iter(tans)
        da = _z(next(it), xa) if ta is not None else np.zeros_like(xa)
        db = _z(next(it), xb) if tb is not None else np.zeros_like(xb)
        return np.broadcast_to(jvp_rule(da, db, xa, xb), out.shape).copy()

    return emit(kind, inputs, out, vjp, jvp)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, xa, xb: (g, g), lambda da, db, xa, xb: da + db)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, xa, xb: (g, -g), lambda da, db, xa, xb: da - db)


def mul(a, b) -> Tensor:
    return _binary(
        "mul", a, b, np.multiply,
        lambda g, xa, xb: (g * xb, g * xa),
        lambda da, db, xa, xb: da * xb + xa * db,
    )


def div(a, b) -> Tensor:
    def fwd(xa, xb):
        if np.any(xb == 0):
            raise ZeroDivisionError("div: zero denominator")
        return xa / xb

    return _binary(
        "div", a, b, fwd,
        lambda g, xa, xb: (g / xb, -g * xa / (xb * xb)),
        lambda da, db, xa, xb: da / xb - xa * db / (xb * xb),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    xa, xb = a.data, b.data
    out = xa @ xb
    return emit(
        "matmul", [a, b], out,
        lambda g: (g @ xb.T, xa.T @ g),
        lambda t: _z(t[0], xa) @ xb + xa @ _z(t[1], xb),
    )


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector along axis 1 of an (N, C, ...) tensor."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError("bias_add", x.shape, b.shape)
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    xb = b.data.reshape(view)
    return emit(
        "bias_add", [x, b], x.data + xb,
        lambda g: (g, g.sum(axis=axes)),
        lambda t: _z(t[0], x.data) + _z(t[1], b.data).reshape(view),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit("relu", [x], np.where(mask, x.data, 0.0), lambda g: (g * mask,), lambda t: t[0] * mask)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    # boundary values pass gradient: images sit exactly on 0/1 a lot
    mask = (x.data >= lo) & (x.data <= hi)
    return emit(
        "clamp", [x], np.clip(x.data, lo, hi),
        lambda g: (g * mask,), lambda t: t[0] * mask, lo=lo, hi=hi,
    )


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _axes(axis, x.ndim)
    keep = [1 if i in axes else s for i, s in enumerate(x.shape)]
    shape = x.shape
    return emit(
        "sum", [x], x.data.sum(axis=axes),
        lambda g: (np.broadcast_to(g.reshape(keep), shape).copy(),),
        lambda t: t[0].sum(axis=axes),
    )


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    keep = [1 if i in axes else s for i, s in enumerate(x.shape)]
    shape = x.shape
    return emit(
        "mean", [x], x.data.mean(axis=axes),
        lambda g: (np.broadcast_to(g.reshape(keep) / n, shape).copy(),),
        lambda t: t[0].mean(axis=axes),
    )


def l2norm(x: Tensor, axis=None) -> Tensor:
    axes = _axes(axis, x.ndim)
    keep = [1 if i in axes else s for i, s in enumerate(x.shape)]
    norm = np.sqrt((x.data * x.data).sum(axis=axes))
    safe = np.where(norm > 0, norm, 1.0).reshape(keep)
    unit = x.data / safe
    return emit(
        "l2norm", [x], norm,
        lambda g: (g.reshape(keep) * unit,),
        lambda t: (t[0] * unit).sum(axis=axes),
    )


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Per-sample cross-entropy of (N, C) logits against integer targets."""
    y = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or y.shape[0] != logits.shape[0]:
        raise ShapeError("softmax_cross_entropy", logits.shape, y.shape)
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ValueError("softmax_cross_entropy: target out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(y.shape[0])
    out = lse - z[rows, y]
    p = softmax(logits.data)
    onehot = np.zeros_like(p)
    onehot[rows, y] = 1.0

    return emit(
        "softmax_cross_entropy", [logits], out,
        lambda g: (g[:, None] * (p - onehot),),
        lambda t: (p * t[0]).sum(axis=1) - t[0][rows, y],
    )


def stop_gradient(x: Tensor) -> Tensor:
    """Same value, no gradient path: the result is a constant."""
    return Tensor._wrap(x.data, False)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    src = x.shape
    return emit("reshape", [x], out, lambda g: (g.reshape(src),), lambda t: t[0].reshape(out.shape))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each sample along axis 0 ``k`` times: (N, ...) -> (N*k, ...)."""
    n = x.shape[0]
    rest = x.shape[1:]
    return emit(
        "repeat_rows", [x], np.repeat(x.data, k, axis=0),
        lambda g: (g.reshape((n, k) + rest).sum(axis=1),),
        lambda t: np.repeat(t[0], k, axis=0),
    )


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Columns as a (C*kh*kw, N*Ho*Wo) matrix, built from kh*kw strided slices."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    n, c, hp, wp = x.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((c, kh, kw, n, ho, wo))
    xt = x.transpose(1, 0, 2, 3)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), (n, ho, wo), x.shape


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    o, _, kh, kw = w.shape
    cols, (n, ho, wo), padded = _im2col(x, kh, kw, stride, padding)
    out = (w.reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols, padded


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, kh, kw) kernels.

    im2col + matmul; :func:`conv2d_reference` is the nested-loop oracle.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    o, c, kh, kw = w.shape
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than padded input")
    out, cols, padded = _conv_forward(x.data, w.data, stride, padding)
    wd = w.data
    n, _, ho, wo = out.shape

    def vjp(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(wd.shape)
        if stride == 1:
            # gradient wrt the padded input is a full correlation with the flipped kernel
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx = _conv_forward(g, flipped, 1, kh - 1)[0] if kh == kw else None
        else:
            gx = None
        if gx is None:
            dcols = (wd.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
            gx = np.zeros(padded)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        if padding:
            gx = gx[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]]
        return gx, gw

    def jvp(t):
        res = np.zeros_like(out)
        if t[0] is not None:
            res += _conv_forward(t[0], wd, stride, padding)[0]
        if t[1] is not None:
            res += (t[1].reshape(o, -1) @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
        return res

    return emit("conv2d", [x, w], out, vjp, jvp, stride=stride, padding=padding)


def conv2d_reference(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct nested-loop convolution; the oracle for :func:`conv2d`."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for p in range(kh):
                            for q in range(kw):
                                acc += x[b, ic, i * stride + p, j * stride + q] * w[oc, ic, p, q]
                    out[b, oc, i, j] = acc
    return out


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError("avg_pool2d", x.shape, (size, size), detail="spatial dims must divide pool size")
    shape6 = (n, c, h // size, size, w // size, size)

    def pool(a):
        return a.reshape(shape6).mean(axis=(3, 5))

    def vjp(g):
        return (np.repeat(np.repeat(g, size, axis=2), size, axis=3) / (size * size),)

    return emit("avg_pool2d", [x], pool(x.data), vjp, lambda t: pool(t[0]))


def resample(x: Tensor, index: np.ndarray, weight: np.ndarray, out_hw: tuple[int, int] | None = None) -> Tensor:
    """Per-sample linear resampling (the pixel map behind rotation).

    ``index`` and ``weight`` have shape (N, P, m): output pixel p of sample n is
    ``sum_j weight[n, p, j] * x[n, :, index[n, p, j]]`` over the flattened
    spatial grid.  Linear in ``x``.
    """
    n, c, h, w = x.shape
    if index.shape != weight.shape or index.shape[0] != n:
        raise ShapeError("resample", x.shape, index.shape, weight.shape)
    p, m = index.shape[1:]
    ho, wo = out_hw if out_hw is not None else (h, w)
    if ho * wo != p:
        raise ShapeError("resample", (ho, wo), index.shape, detail="output grid does not match index")
    flat_idx = index.reshape(n, 1, p * m)
    wts = weight[:, None]

    def apply(a):
        g = np.take_along_axis(a.reshape(n, c, h * w), np.broadcast_to(flat_idx, (n, c, p * m)), axis=2)
        return (g.reshape(n, c, p, m) * wts).sum(axis=3).reshape(n, c, ho, wo)

    base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
    scatter = (base + index[:, None]).ravel()

    def vjp(g):
        contrib = (g.reshape(n, c, p, 1) * wts).ravel()
        return (np.bincount(scatter, weights=contrib, minlength=n * c * h * w).reshape(n, c, h, w),)

    return emit("resample", [x], apply(x.data), vjp, lambda t: apply(t[0]))


def color_jitter(x: Tensor, brightness, contrast) -> Tensor:
    """Per-sample brightness then contrast, both linear in pixel values.

    ``y = b * x``; ``out = c * y + (1 - c) * mean_gray(y)`` where the grey
    mean is a per-sample scalar.  Clamping is left to the caller.
    """
    n, ch = x.shape[:2]
    b = np.asarray(brightness, dtype=DTYPE).reshape(n)
    c = np.asarray(contrast, dtype=DTYPE).reshape(n)
    gw = GRAY_WEIGHTS if ch == 3 else np.full(ch, 1.0 / ch)
    npix = x.shape[2] * x.shape[3]
    sb = b.reshape(n, 1, 1, 1)
    sc = c.reshape(n, 1, 1, 1)
    gwv = gw.reshape(1, ch, 1, 1)

    def apply(a):
        gray_mean = (a * gwv).sum(axis=1).mean(axis=(1, 2)).reshape(n, 1, 1, 1)
        return sc * sb * a + (1 - sc) * sb * gray_mean

    def vjp(g):
        total = g.sum(axis=(1, 2, 3)).reshape(n, 1, 1, 1)
        return (sc * sb * g + (1 - sc) * sb * total * gwv / npix,)

    return emit("color_jitter", [x], apply(x.data), vjp, lambda t: apply(t[0]))
