"""Fixed operator set over Tensors.

Each op computes its forward result with numpy and registers one
vector-Jacobian product per differentiable input. Convolutions follow
cross-correlation semantics (no kernel flip). Broadcasting is supported only
where the operator set needs it (bias adds, outer products in the scan).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ContractError, DimensionError
from .tensor import Tensor, as_tensor, record_op


def _unbroadcast(g, shape):
    """Sum a broadcasted cotangent back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return record_op(
        "add",
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return record_op(
        "sub",
        out,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return record_op(
        "mul",
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record_op(
        "div",
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return record_op("neg", -a.data, (a,), (lambda g: -g,))


# ---------------------------------------------------------------------------
# unary maps


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return record_op("exp", out, (a,), (lambda g: g * out,))


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)
    return record_op("log", out, (a,), (lambda g: g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return record_op("sqrt", out, (a,), (lambda g: g / (2.0 * out),))


def abs_(a):
    a = as_tensor(a)
    out = np.abs(a.data)
    return record_op("abs", out, (a,), (lambda g: g * np.sign(a.data),))


def clip_min(a, floor):
    """Elementwise max(a, floor); gradient passes only where a > floor."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)
    mask = a.data > floor
    return record_op("clip_min", out, (a,), (lambda g: g * mask,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return record_op("relu", a.data * mask, (a,), (lambda g: g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype)
    return record_op("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),))


def silu(a):
    a = as_tensor(a)
    x = a.data
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    out = (x * s).astype(x.dtype)
    return record_op("silu", out, (a,), (lambda g: g * (s * (1.0 + x * (1.0 - s))),))


def softplus(a):
    """log(1 + exp(x)), stabilized as max(x, 0) + log1p(exp(-|x|))."""
    a = as_tensor(a)
    x = a.data
    out = (np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)
    s = 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))
    return record_op("softplus", out, (a,), (lambda g: g * s,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record_op("tanh", out, (a,), (lambda g: g * (1.0 - out * out),))


# ---------------------------------------------------------------------------
# reductions


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)
    shape = a.shape
    return record_op(
        "sum", out, (a,), (lambda g: _expand_reduced(g, shape, axis, keepdims).copy(),)
    )


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims), dtype=a.data.dtype)
    shape = a.shape
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= shape[ax % len(shape)]
    return record_op(
        "mean",
        out,
        (a,),
        (lambda g: _expand_reduced(g, shape, axis, keepdims).copy() / count,),
    )


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a, shape):
    a = as_tensor(a)
    in_shape = a.shape
    out = a.data.reshape(shape)
    return record_op("reshape", out, (a,), (lambda g: g.reshape(in_shape),))


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record_op("transpose", out, (a,), (lambda g: g.transpose(inv),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return record_op("concat", out, tuple(tensors), tuple(make_vjp(i) for i in range(len(tensors))))


def narrow(a, axis, start, length):
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(sl)])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[tuple(sl)] = g
        return full

    return record_op("narrow", out, (a,), (vjp,))


def flip0(a):
    """Reverse along axis 0."""
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data[::-1])
    return record_op("flip0", out, (a,), (lambda g: np.ascontiguousarray(g[::-1]),))


def take_rows(a, index, unique=False):
    """Gather rows of ``a`` along axis 0 by an integer index vector.

    Set ``unique=True`` when the indices are known to be distinct (e.g. a
    permutation); the backward scatter then skips duplicate accumulation.
    """
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = a.data[index]
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        if unique:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return full

    return record_op("take_rows", out, (a,), (vjp,))


def select_class(a, labels):
    """From a [K, V] map pick entry (labels[v], v) for every column v."""
    a = as_tensor(a)
    labels = np.asarray(labels, dtype=np.int64)
    cols = np.arange(a.shape[1])
    out = a.data[labels, cols]
    shape = a.shape

    def vjp(g):
        # one picked entry per column, so the index pairs are unique
        full = np.zeros(shape, dtype=g.dtype)
        full[labels, cols] = g
        return full

    return record_op("select_class", out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# softmax family


def softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (g - dot) * out

    return record_op("softmax", out, (a,), (vjp,))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return g - np.exp(out) * g.sum(axis=axis, keepdims=True)

    return record_op("log_softmax", out, (a,), (vjp,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul requires [m,k] x [k,n], got {tuple(a.shape)} and {tuple(b.shape)}"
        )
    out = a.data @ b.data
    return record_op(
        "matmul",
        out,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def bmm(a, b):
    """Batched matmul [B,m,k] x [B,k,n] (internal helper for attention)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(
            f"bmm requires [B,m,k] x [B,k,n], got {tuple(a.shape)} and {tuple(b.shape)}"
        )
    out = np.matmul(a.data, b.data)
    return record_op(
        "bmm",
        out,
        (a, b),
        (
            lambda g: np.matmul(g, b.data.swapaxes(1, 2)),
            lambda g: np.matmul(a.data.swapaxes(1, 2), g),
        ),
    )


# ---------------------------------------------------------------------------
# convolution / pooling / resampling


def _pair(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise DimensionError(f"expected {n} values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


def conv2d(x, weight, bias=None, stride=1, padding=0):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise DimensionError(
            f"conv2d expects x[Cin,h,w] and weight[Cout,Cin,kh,kw], got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv2d channel mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    sh, sw = _pair(stride, 2)
    ph, pw = _pair(padding, 2)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(
            f"conv2d kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{w + 2 * pw})"
        )
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]
    _, oh, ow = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(oh * ow, cin * kh * kw)
    wm = weight.data.reshape(cout, -1)
    out = (cols @ wm.T).T.reshape(cout, oh, ow)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]

    def vjp_x(g):
        g2 = g.reshape(cout, oh * ow)
        dcols = (g2.T @ wm).reshape(oh, ow, cin, kh, kw).transpose(2, 3, 4, 0, 1)
        dxp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                dxp[:, ki : ki + sh * oh : sh, kj : kj + sw * ow : sw] += dcols[:, ki, kj]
        return dxp[:, ph : ph + h, pw : pw + w]

    def vjp_w(g):
        g2 = g.reshape(cout, oh * ow)
        return (g2 @ cols).reshape(weight.shape)

    parents = [x, weight]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(1, 2)))
    return record_op("conv2d", out, tuple(parents), tuple(vjps))


def conv3d(x, weight, bias=None, stride=1, padding=0):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 5:
        raise DimensionError(
            f"conv3d expects x[Cin,d,h,w] and weight[Cout,Cin,kd,kh,kw], got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    cin, d, h, w = x.shape
    cout, cin_w, kd, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(
            f"conv3d channel mismatch: input {tuple(x.shape)} vs weight {tuple(weight.shape)}"
        )
    sd, sh, sw = _pair(stride, 3)
    pd, ph, pw = _pair(padding, 3)
    if d + 2 * pd < kd or h + 2 * ph < kh or w + 2 * pw < kw:
        raise DimensionError(
            f"conv3d kernel ({kd},{kh},{kw}) larger than padded input "
            f"({d + 2 * pd},{h + 2 * ph},{w + 2 * pw})"
        )
    xp = np.pad(x.data, ((0, 0), (pd, pd), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kd, kh, kw), axis=(1, 2, 3))[:, ::sd, ::sh, ::sw]
    _, od, oh, ow = win.shape[:4]
    cols = np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5, 6)).reshape(
        od * oh * ow, cin * kd * kh * kw
    )
    wm = weight.data.reshape(cout, -1)
    out = (cols @ wm.T).T.reshape(cout, od, oh, ow)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None, None]

    def vjp_x(g):
        g2 = g.reshape(cout, od * oh * ow)
        dcols = (g2.T @ wm).reshape(od, oh, ow, cin, kd, kh, kw).transpose(3, 4, 5, 6, 0, 1, 2)
        dxp = np.zeros_like(xp)
        for ki in range(kd):
            for kj in range(kh):
                for kk in range(kw):
                    dxp[
                        :,
                        ki : ki + sd * od : sd,
                        kj : kj + sh * oh : sh,
                        kk : kk + sw * ow : sw,
                    ] += dcols[:, ki, kj, kk]
        return dxp[:, pd : pd + d, ph : ph + h, pw : pw + w]

    def vjp_w(g):
        g2 = g.reshape(cout, od * oh * ow)
        return (g2 @ cols).reshape(weight.shape)

    parents = [x, weight]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=(1, 2, 3)))
    return record_op("conv3d", out, tuple(parents), tuple(vjps))


def avg_pool2d(x, k):
    x = as_tensor(x)
    c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: extents {(h, w)} not divisible by {k}")
    out = x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def vjp(g):
        return np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)

    return record_op("avg_pool2d", out, (x,), (vjp,))


def avg_pool3d(x, k):
    x = as_tensor(x)
    c, d, h, w = x.shape
    if d % k or h % k or w % k:
        raise DimensionError(f"avg_pool3d: extents {(d, h, w)} not divisible by {k}")
    out = x.data.reshape(c, d // k, k, h // k, k, w // k, k).mean(axis=(2, 4, 6))

    def vjp(g):
        g = np.repeat(np.repeat(np.repeat(g, k, axis=1), k, axis=2), k, axis=3)
        return g / float(k**3)

    return record_op("avg_pool3d", out, (x,), (vjp,))


_INTERP_CACHE = {}


def _interp_matrix(n_in, factor, dtype):
    """Dense [n_out, n_in] linear-interpolation matrix (half-pixel-center
    convention, borders clamped); cached, axis extents are small here."""
    key = (n_in, factor, np.dtype(dtype).str)
    if key not in _INTERP_CACHE:
        n_out = n_in * factor
        src = (np.arange(n_out) + 0.5) / factor - 0.5
        i0 = np.floor(src).astype(np.int64)
        t = src - i0
        lo = np.clip(i0, 0, n_in - 1)
        hi = np.clip(i0 + 1, 0, n_in - 1)
        mat = np.zeros((n_out, n_in), dtype=dtype)
        np.add.at(mat, (np.arange(n_out), lo), 1.0 - t)
        np.add.at(mat, (np.arange(n_out), hi), t)
        _INTERP_CACHE[key] = mat
    return _INTERP_CACHE[key]


def _upsample_axis_linear(arr, axis, factor):
    mat = _interp_matrix(arr.shape[axis], factor, arr.dtype)
    moved = np.moveaxis(arr, axis, -1)
    return np.moveaxis(moved @ mat.T, -1, axis)


def _upsample_axis_linear_adjoint(g, axis, n_in, factor):
    mat = _interp_matrix(n_in, factor, g.dtype)
    moved = np.moveaxis(g, axis, -1)
    return np.ascontiguousarray(np.moveaxis(moved @ mat, -1, axis))


def upsample2d(x, factor, mode="nearest"):
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"upsample2d expects [C,h,w], got {tuple(x.shape)}")
    c, h, w = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

        def vjp(g):
            return g.reshape(c, h, factor, w, factor).sum(axis=(2, 4))

    elif mode == "bilinear":
        out = _upsample_axis_linear(_upsample_axis_linear(x.data, 1, factor), 2, factor)

        def vjp(g):
            g = _upsample_axis_linear_adjoint(g, 2, w, factor)
            return _upsample_axis_linear_adjoint(g, 1, h, factor)

    else:
        raise ContractError(f"unknown upsample2d mode '{mode}'")
    return record_op("upsample2d", np.ascontiguousarray(out, dtype=x.data.dtype), (x,), (vjp,))


def upsample3d(x, factor, mode="nearest"):
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample3d expects [C,d,h,w], got {tuple(x.shape)}")
    c, d, h, w = x.shape
    if mode == "nearest":
        out = x.data
        for ax in (1, 2, 3):
            out = np.repeat(out, factor, axis=ax)

        def vjp(g):
            return g.reshape(c, d, factor, h, factor, w, factor).sum(axis=(2, 4, 6))

    elif mode == "trilinear":
        out = x.data
        for ax in (1, 2, 3):
            out = _upsample_axis_linear(out, ax, factor)

        def vjp(g):
            g = _upsample_axis_linear_adjoint(g, 3, w, factor)
            g = _upsample_axis_linear_adjoint(g, 2, h, factor)
            return _upsample_axis_linear_adjoint(g, 1, d, factor)

    else:
        raise ContractError(f"unknown upsample3d mode '{mode}'")
    return record_op("upsample3d", np.ascontiguousarray(out, dtype=x.data.dtype), (x,), (vjp,))


def bilinear_sample(feature_map, u, v):
    """Sample a [C,h,w] map at continuous pixel coords (u, v) -> [V, C].

    Pixel (i, j) covers [j, j+1) x [i, i+1) with its center at
    (j+0.5, i+0.5); borders are clamped.
    """
    feature_map = as_tensor(feature_map)
    if feature_map.ndim != 3 or feature_map.shape[1] == 0 or feature_map.shape[2] == 0:
        raise DimensionError(
            f"bilinear_sample expects a non-empty [C,h,w] map, got {tuple(feature_map.shape)}"
        )
    c, h, w = feature_map.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    tx = (x - x0).astype(feature_map.data.dtype)
    ty = (y - y0).astype(feature_map.data.dtype)
    x0i = np.clip(x0, 0, w - 1).astype(np.int64)
    x1i = np.clip(x0 + 1, 0, w - 1).astype(np.int64)
    y0i = np.clip(y0, 0, h - 1).astype(np.int64)
    y1i = np.clip(y0 + 1, 0, h - 1).astype(np.int64)

    fm = feature_map.data
    w00 = ((1 - ty) * (1 - tx))[:, None]
    w01 = ((1 - ty) * tx)[:, None]
    w10 = (ty * (1 - tx))[:, None]
    w11 = (ty * tx)[:, None]
    # incremental form: exactly constant-preserving (differences vanish),
    # algebraically identical to the weighted corner sum
    v00 = fm[:, y0i, x0i].T
    v01 = fm[:, y0i, x1i].T
    v10 = fm[:, y1i, x0i].T
    v11 = fm[:, y1i, x1i].T
    txc = tx[:, None]
    tyc = ty[:, None]
    out = v00 + txc * (v01 - v00) + tyc * (v10 - v00) + (txc * tyc) * (v11 - v10 - v01 + v00)

    def vjp(g):
        dm = np.zeros((h, w, c), dtype=g.dtype)
        np.add.at(dm, (y0i, x0i), g * w00)
        np.add.at(dm, (y0i, x1i), g * w01)
        np.add.at(dm, (y1i, x0i), g * w10)
        np.add.at(dm, (y1i, x1i), g * w11)
        return dm.transpose(2, 0, 1)

    return record_op("bilinear_sample", np.ascontiguousarray(out), (feature_map,), (vjp,))


def causal_dwconv1d(x, weight, bias=None):
    """Depthwise causal 1-D convolution over a [L, D] sequence.

    weight[d, k]: tap k of channel d; tap K-1 multiplies the current step, so
    output t depends on inputs t-K+1 .. t only.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"causal_dwconv1d expects x[L,D], weight[D,K], got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    length, d = x.shape
    k = weight.shape[1]
    xp = np.concatenate([np.zeros((k - 1, d), dtype=x.data.dtype), x.data], axis=0)
    out = np.zeros_like(x.data)
    for tap in range(k):
        out += xp[tap : tap + length] * weight.data[:, tap]

    def vjp_x(g):
        dxp = np.zeros_like(xp)
        for tap in range(k):
            dxp[tap : tap + length] += g * weight.data[:, tap]
        return dxp[k - 1 :]

    def vjp_w(g):
        dw = np.empty_like(weight.data)
        for tap in range(k):
            dw[:, tap] = (xp[tap : tap + length] * g).sum(axis=0)
        return dw

    parents = [x, weight]
    vjps = [vjp_x, vjp_w]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
        vjps.append(lambda g: g.sum(axis=0))
    return record_op("causal_dwconv1d", out, tuple(parents), tuple(vjps))


# ---------------------------------------------------------------------------
# first-order linear recurrence h_t = a_t * h_{t-1} + b_t, h_0 = 0


def scan_sequential(a, b):
    """Reference per-step evaluation of the recurrence on raw arrays."""
    h = np.empty_like(b)
    carry = np.zeros(b.shape[1:], dtype=b.dtype)
    for t in range(a.shape[0]):
        carry = a[t] * carry + b[t]
        h[t] = carry
    return h


def scan_chunked(a, b, chunk=64):
    """Vectorized evaluation: all chunks advance one step per iteration (so
    the per-step state spans every chunk at once), then per-chunk carries are
    composed across chunks. Must match scan_sequential (tested)."""
    length = a.shape[0]
    rest = a.shape[1:]
    width = int(np.prod(rest)) if rest else 1
    n_chunks = -(-length // chunk)
    pad = n_chunks * chunk - length
    if pad:
        a = np.concatenate([a, np.ones((pad,) + rest, dtype=a.dtype)], axis=0)
        b = np.concatenate([b, np.zeros((pad,) + rest, dtype=b.dtype)], axis=0)
    # time-major within chunks: [chunk, n_chunks, width]
    a_tm = np.ascontiguousarray(a.reshape(n_chunks, chunk, width).swapaxes(0, 1))
    b_tm = np.ascontiguousarray(b.reshape(n_chunks, chunk, width).swapaxes(0, 1))
    h_local = np.empty_like(b_tm)
    a_run = np.empty_like(a_tm)
    carry = np.zeros((n_chunks, width), dtype=b.dtype)
    running = np.ones((n_chunks, width), dtype=a.dtype)
    for t in range(chunk):
        carry = a_tm[t] * carry + b_tm[t]
        h_local[t] = carry
        running = running * a_tm[t]
        a_run[t] = running
    # compose chunk carries sequentially, then apply in one vector op
    chunk_in = np.zeros((n_chunks, width), dtype=b.dtype)
    c = np.zeros(width, dtype=b.dtype)
    for j in range(1, n_chunks):
        c = h_local[-1, j - 1] + a_run[-1, j - 1] * c
        chunk_in[j] = c
    h = h_local + a_run * chunk_in[None, :, :]
    out = h.swapaxes(0, 1).reshape(n_chunks * chunk, width)[:length]
    return np.ascontiguousarray(out).reshape((length,) + rest)


def _run_scan(a, b, impl, chunk):
    if impl == "sequential":
        return scan_sequential(a, b)
    if impl == "chunked":
        return scan_chunked(a, b, chunk)
    raise ContractError(f"unknown scan impl '{impl}'")


def scan_cotangent(a, g, impl="chunked", chunk=64):
    """Reverse-time recurrence lambda_t = g_t + a_{t+1} * lambda_{t+1} on raw
    arrays: the adjoint state of the forward scan."""
    g_rev = np.ascontiguousarray(g[::-1])
    a_rev = a[::-1]
    a_shift = np.concatenate([np.ones_like(a_rev[:1]), a_rev[:-1]], axis=0)
    return _run_scan(a_shift, g_rev, impl, chunk)[::-1]


def linear_scan(a, b, impl="chunked", chunk=64):
    """Differentiable first-order recurrence over axis 0 (zero initial state).

    The backward pass is the reverse-time recurrence
    lambda_t = g_t + a_{t+1} * lambda_{t+1}, giving
    da_t = lambda_t * h_{t-1} and db_t = lambda_t.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"linear_scan shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[0] < 1:
        raise ContractError("linear_scan requires a sequence of length >= 1")
    h = _run_scan(a.data, b.data, impl, chunk)
    lam_cache = {}

    def lam(g):
        key = id(g)
        if key not in lam_cache:
            lam_cache[key] = scan_cotangent(a.data, g, impl, chunk)
        return lam_cache[key]

    def vjp_a(g):
        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
        return lam(g) * h_prev

    def vjp_b(g):
        return np.ascontiguousarray(lam(g))

    return record_op("linear_scan", h, (a, b), (vjp_a, vjp_b))
