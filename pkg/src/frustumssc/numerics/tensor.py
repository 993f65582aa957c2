"""N-d tensor with reverse-mode differentiation on an eager tape.

Tensors wrap contiguous numpy buffers (float32 by default, float64 for
gradient checking). Every differentiable operation appends an OpRecord to a
thread-local Graph; ``backward`` replays the tape in reverse, accumulating
vector-Jacobian products. There is no operator fusion and no broadcasting
beyond what the fixed operator set needs.
"""

import threading

import numpy as np

from ..errors import ContractError, NumericalError

_state = threading.local()


def _tls():
    if not hasattr(_state, "graph"):
        _state.graph = Graph()
        _state.grad_enabled = True
        _state.default_dtype = np.float32
        _state.debug_checks = False
    return _state


class OpRecord:
    """One tape entry: the op name, its input tensors, its output, and one
    vjp callable per input (None where no gradient is required)."""

    __slots__ = ("name", "inputs", "output", "vjps")

    def __init__(self, name, inputs, output, vjps):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.vjps = vjps


class Graph:
    """Topologically ordered op records for one forward pass.

    Eager recording keeps the list in topological order by construction, so
    backward is a single reverse sweep that visits each contributing record
    exactly once.
    """

    def __init__(self):
        self.records = []

    def append(self, record):
        self.records.append(record)

    def clear(self):
        self.records.clear()

    def __len__(self):
        return len(self.records)


def active_graph():
    return _tls().graph


def clear_graph():
    """Drop all recorded ops (call once per training step)."""
    _tls().graph.clear()


def is_grad_enabled():
    return _tls().grad_enabled


class no_grad:
    """Context manager disabling tape recording."""

    def __enter__(self):
        tls = _tls()
        self._prev = tls.grad_enabled
        tls.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _tls().grad_enabled = self._prev
        return False


def default_dtype():
    return _tls().default_dtype


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported default dtype {dtype}")
    _tls().default_dtype = dtype


class using_dtype:
    """Context manager switching the default dtype (float64 for grad checks)."""

    def __init__(self, dtype):
        self._dtype = np.dtype(dtype).type

    def __enter__(self):
        tls = _tls()
        self._prev = tls.default_dtype
        set_default_dtype(self._dtype)
        return self

    def __exit__(self, *exc):
        _tls().default_dtype = self._prev
        return False


def set_debug_checks(flag):
    """Enable per-op NaN/Inf scans of every forward result."""
    _tls().debug_checks = bool(flag)


def debug_checks_enabled():
    return _tls().debug_checks


class Tensor:
    """Contiguous floating-point buffer participating in the tape.

    ``grad`` is populated for leaves with ``requires_grad`` after
    ``backward``; intermediate gradients stay transient.
    """

    __slots__ = ("data", "grad", "requires_grad", "record", "_backward_done")

    def __init__(self, data, requires_grad=False, dtype=None):
        dtype = dtype or default_dtype()
        arr = np.ascontiguousarray(data, dtype=dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.record = None
        self._backward_done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype.type)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the implementations live in ops.py.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, axes):
        from . import ops

        return ops.transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=dtype)


def record_op(name, out_data, parents, vjps):
    """Wrap an op result, appending a tape record when grad flow is live.

    ``vjps`` aligns with ``parents``; each entry maps the output cotangent to
    that parent's cotangent (or is None for non-differentiable parents).
    """
    tls = _tls()
    if tls.debug_checks and not np.all(np.isfinite(out_data)):
        raise NumericalError(f"op '{name}' produced non-finite values")
    needs = tls.grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype.type)
    if needs:
        rec = OpRecord(name, tuple(parents), out, tuple(vjps))
        out.record = rec
        tls.graph.append(rec)
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    The loss must be scalar. Calling twice on the same loss without clearing
    the graph raises ContractError.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor loss")
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if loss._backward_done:
        raise ContractError("backward already ran for this loss; clear the graph first")
    loss._backward_done = True

    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(_tls().graph.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        for parent, vjp in zip(rec.inputs, rec.vjps):
            if vjp is None or not parent.requires_grad:
                continue
            g = vjp(g_out)
            if g is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
        # Leaves keep their gradient on .grad; intermediates stay transient.
        for parent in rec.inputs:
            if parent.record is None and parent.requires_grad and id(parent) in grads:
                g = grads.pop(id(parent))
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=parent.data.dtype)
                else:
                    parent.grad = parent.grad + g.astype(parent.data.dtype)

    # A loss that is itself a leaf (e.g. sum of a single leaf) was handled
    # above; any remaining entries belong to leaves fed straight into ops
    # recorded before graph clearing. Flush them.
    for tensor_id, g in list(grads.items()):
        if tensor_id == id(loss) and loss.record is None and loss.requires_grad:
            loss.grad = np.array(g, dtype=loss.data.dtype)
