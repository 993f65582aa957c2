"""Selective state-space recurrence and the Mamba block.

The recurrence h_k = A_bar h_{k-1} + B_bar x_k, y_k = C h_k runs per channel
with a diagonal state matrix A = -exp(A_log) (always decaying) and
input-dependent B_k, C_k and step size Delta_k (softplus-positive). A is
discretized by zero-order hold, B by the Euler rule B_bar = Delta * B.
"""

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .nn import Linear, Module, ModuleList, Parameter
from .numerics import ops
from .numerics.tensor import record_op


def _scan_core(x, delta, b_seq, c_seq, a_diag, impl, chunk):
    """Fused discretize + recurrence + readout with a hand-written backward.

    y[t, d] = sum_n C[t, n] * h[t, d, n] where
    h[t] = exp(delta[t] (x) A) * h[t-1] + (delta[t] * x[t]) (x) B[t].
    One op keeps the [L, D, N] intermediates off the tape (this is the hot
    path of every Frustum Mamba Layer).
    """
    length, d = x.shape
    n = a_diag.shape[1]
    decay = np.exp(delta.data[:, :, None] * a_diag.data[None, :, :])
    dx = delta.data * x.data
    drive = dx[:, :, None] * b_seq.data[:, None, :]
    h = ops._run_scan(decay, drive, impl, chunk)
    y = np.matmul(h, c_seq.data[:, :, None]).reshape(length, d)

    cache = {}

    def grads(g):
        if "lam" not in cache:
            dh = g[:, :, None] * c_seq.data[:, None, :]
            lam = ops.scan_cotangent(decay, dh, impl, chunk)
            h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
            ddecay_scaled = lam * h_prev * decay  # d/d(delta*A exponent)
            cache["lam"] = lam
            cache["ddecay_scaled"] = ddecay_scaled
            cache["mB"] = np.matmul(lam, b_seq.data[:, :, None]).reshape(length, d)
        return cache

    def vjp_x(g):
        c = grads(g)
        return c["mB"] * delta.data

    def vjp_delta(g):
        c = grads(g)
        from_decay = (c["ddecay_scaled"] * a_diag.data[None, :, :]).sum(axis=2)
        return from_decay + c["mB"] * x.data

    def vjp_b(g):
        c = grads(g)
        return np.matmul(c["lam"].transpose(0, 2, 1), dx[:, :, None]).reshape(length, n)

    def vjp_c(g):
        return np.matmul(h.transpose(0, 2, 1), g[:, :, None]).reshape(length, n)

    def vjp_a(g):
        c = grads(g)
        return (c["ddecay_scaled"] * delta.data[:, :, None]).sum(axis=0)

    return record_op(
        "selective_scan_core",
        y,
        (x, delta, b_seq, c_seq, a_diag),
        (vjp_x, vjp_delta, vjp_b, vjp_c, vjp_a),
    )


def discretize(a, b, delta):
    """Zero-order hold on the state matrix, Euler on the input matrix.

    Returns (exp(delta * a), delta * b) elementwise; delta must be > 0.
    """
    a, b, delta = ops.as_tensor(a), ops.as_tensor(b), ops.as_tensor(delta)
    if np.any(delta.data <= 0):
        raise ContractError("discretize requires strictly positive step sizes")
    return ops.exp(ops.mul(delta, a)), ops.mul(delta, b)


class SSMParams(Module):
    """State matrices and input-dependent projections of one selective scan.

    d_inner independent channels, each with n_state decaying states. The
    step-size bias is initialized so softplus lands in [1e-3, 1e-1],
    mirroring common selective-SSM practice.
    """

    def __init__(self, d_inner, n_state, rng):
        super().__init__()
        self.d_inner = d_inner
        self.n_state = n_state
        self.a_log = Parameter(
            np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1)))
        )
        scale = 1.0 / np.sqrt(d_inner)
        self.w_b = Parameter(rng.uniform(-scale, scale, (d_inner, n_state)))
        self.w_c = Parameter(rng.uniform(-scale, scale, (d_inner, n_state)))
        self.w_delta = Parameter(rng.uniform(-scale, scale, (d_inner, d_inner)))
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), d_inner))
        self.delta_bias = Parameter(np.log(np.expm1(dt)))
        self.d_skip = Parameter(np.ones(d_inner))


def selective_scan(x, params, impl="chunked", chunk=64, bidirectional=False):
    """Input-dependent state-space recurrence over a [L, d_inner] sequence.

    y_k = C_k . h_k + D_skip * x_k with h_0 = 0. The forward direction scans
    k = 1..L; the bidirectional variant adds the same recurrence run on the
    time-reversed sequence.
    """
    if x.ndim != 2:
        raise DimensionError(f"selective_scan expects [L, D], got {tuple(x.shape)}")
    if x.shape[0] < 1:
        raise ContractError("selective_scan requires a non-empty sequence")
    if x.shape[1] != params.d_inner:
        raise DimensionError(
            f"selective_scan width mismatch: x {tuple(x.shape)} vs d_inner {params.d_inner}"
        )
    length, d = x.shape
    n = params.n_state

    b_seq = ops.matmul(x, params.w_b)  # [L, N]
    c_seq = ops.matmul(x, params.w_c)  # [L, N]
    delta = ops.softplus(ops.add(ops.matmul(x, params.w_delta), params.delta_bias))  # [L, D]
    a_diag = ops.neg(ops.exp(params.a_log))  # [D, N]

    y = _scan_core(x, delta, b_seq, c_seq, a_diag, impl, chunk)
    if bidirectional:
        y_rev = _scan_core(
            ops.flip0(x), ops.flip0(delta), ops.flip0(b_seq), ops.flip0(c_seq), a_diag,
            impl, chunk,
        )
        y = ops.add(y, ops.flip0(y_rev))
    return ops.add(y, ops.mul(x, params.d_skip))


class MambaBlockParams(Module):
    """Projections of one Mamba block: widen, gate, depthwise causal conv,
    selective scan, narrow back."""

    def __init__(self, d_model, rng, expand=2, n_state=8, conv_width=4):
        super().__init__()
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.in_proj = Linear(d_model, 2 * self.d_inner, rng)
        scale = 1.0 / np.sqrt(conv_width)
        self.conv_weight = Parameter(rng.uniform(-scale, scale, (self.d_inner, conv_width)))
        self.conv_bias = Parameter(np.zeros(self.d_inner))
        self.ssm = SSMParams(self.d_inner, n_state, rng)
        self.out_proj = Linear(self.d_inner, d_model, rng)


def mamba_block(x, params, impl="chunked", chunk=64, bidirectional=False):
    """u, g = split(in_proj(x)); y = scan(silu(conv(u))); out_proj(y * silu(g))."""
    if x.ndim != 2 or x.shape[1] != params.d_model:
        raise DimensionError(
            f"mamba_block expects [L, {params.d_model}], got {tuple(x.shape)}"
        )
    if x.shape[0] < 1:
        raise ContractError("mamba_block requires a non-empty sequence")
    both = params.in_proj(x)
    u = ops.narrow(both, 1, 0, params.d_inner)
    gate = ops.narrow(both, 1, params.d_inner, params.d_inner)
    u = ops.silu(ops.causal_dwconv1d(u, params.conv_weight, params.conv_bias))
    y = selective_scan(u, params.ssm, impl=impl, chunk=chunk, bidirectional=bidirectional)
    y = ops.mul(y, ops.silu(gate))
    return params.out_proj(y)


class MambaBlock(Module):
    def __init__(self, d_model, rng, expand=2, n_state=8, conv_width=4, impl="chunked", chunk=64, bidirectional=False):
        super().__init__()
        self.params = MambaBlockParams(d_model, rng, expand=expand, n_state=n_state, conv_width=conv_width)
        self.impl = impl
        self.chunk = chunk
        self.bidirectional = bidirectional

    def forward(self, x):
        return mamba_block(
            x, self.params, impl=self.impl, chunk=self.chunk, bidirectional=self.bidirectional
        )


class MambaStack(Module):
    """A plain sequence of Mamba blocks (normalization and the residual link
    around the stack belong to the caller)."""

    def __init__(self, d_model, n_layers, rng, **kwargs):
        super().__init__()
        if n_layers < 1:
            raise ConfigError(f"MambaStack needs at least one layer, got {n_layers}")
        self.blocks = ModuleList([MambaBlock(d_model, rng, **kwargs) for _ in range(n_layers)])

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x
