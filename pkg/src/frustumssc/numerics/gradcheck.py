"""Central-difference gradient verification oracle.

Runs in whatever dtype the supplied tensors carry; callers use float64 for
meaningful tolerances.
"""

import numpy as np

from .tensor import backward, clear_graph, no_grad


def grad_check(f, inputs, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the input tensors to a scalar Tensor and must be deterministic.
    Error per coordinate is |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    The active graph is cleared before and after; do not call mid-training.
    """
    clear_graph()
    for x in inputs:
        x.grad = None
    loss = f(*inputs)
    backward(loss)
    analytic = [
        np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs
    ]
    clear_graph()

    worst = 0.0
    with no_grad():
        for x, ga in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            gn = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = f(*inputs).item()
                flat[i] = orig - eps
                f_minus = f(*inputs).item()
                flat[i] = orig
                gn[i] = (f_plus - f_minus) / (2.0 * eps)
            ga_flat = ga.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(ga_flat), np.abs(gn)), 1e-8)
            err = float(np.max(np.abs(ga_flat - gn) / denom)) if flat.size else 0.0
            worst = max(worst, err)
    return worst
