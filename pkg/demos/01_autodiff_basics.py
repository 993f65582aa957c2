"""Tour of the tensor substrate: tape recording, backward, gradient checking.

Run:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from frustumssc.numerics import (
    Tensor,
    active_graph,
    backward,
    clear_graph,
    grad_check,
    ops,
    using_dtype,
)

# Every op records onto a thread-local tape. Backward replays it in reverse.
x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
w = Tensor([[0.5], [-1.0]], requires_grad=True)
y = ops.matmul(x, w)
loss = ops.sum_(ops.mul(y, y))
print(f"loss = {loss.item():.4f}, tape holds {len(active_graph().records)} ops")

backward(loss)
print("dL/dx =\n", x.grad)
print("dL/dw =\n", w.grad)
clear_graph()

# The same machinery drives convolutions, normalization, resampling...
img = Tensor(np.random.default_rng(0).normal(size=(3, 8, 8)).astype(np.float32), requires_grad=True)
kernel = Tensor(np.random.default_rng(1).normal(size=(4, 3, 3, 3)).astype(np.float32) * 0.2, requires_grad=True)
feat = ops.relu(ops.conv2d(img, kernel, padding=1))
pooled = ops.avg_pool2d(feat, 2)
backward(ops.mean(pooled))
print(f"\nconv path: feature map {feat.shape}, |dimg| = {np.abs(img.grad).sum():.4f}")
clear_graph()

# ... and everything is verified against central differences in float64.
with using_dtype(np.float64):
    a = Tensor(np.random.default_rng(2).normal(size=(5, 4)), requires_grad=True)
    b = Tensor(np.random.default_rng(3).normal(size=(4, 3)), requires_grad=True)

    def f(a_, b_):
        return ops.sum_(ops.silu(ops.matmul(a_, b_)))

    print(f"\ngrad_check(matmul∘silu) max rel error: {grad_check(f, [a, b]):.2e}")
clear_graph()

# The recurrence kernel behind the state-space layers: h_t = a_t h_(t-1) + b_t.
# A chunked evaluation must agree with the sequential reference before use.
rng = np.random.default_rng(4)
decay = rng.uniform(0.2, 0.99, size=(500, 8)).astype(np.float32)
drive = rng.normal(size=(500, 8)).astype(np.float32)
seq = ops.scan_sequential(decay, drive)
chk = ops.scan_chunked(decay, drive, chunk=64)
print(f"\nscan: chunked vs sequential max |diff| = {np.abs(seq - chk).max():.2e}")
