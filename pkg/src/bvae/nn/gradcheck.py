"""Finite-difference gradient verification.

Central differences with step 1e-5 at float64; the reported figure is
max over elements of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
"""

import numpy as np

FD_STEP = 1e-5
_FLOOR = 1e-8


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _FLOOR)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(loss_fn, x, step=FD_STEP):
    """Central-difference gradient of a scalar function of one array.

    ``x`` is perturbed in place element by element and restored.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = loss_fn()
        flat[i] = old - step
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def grad_check(loss_and_grads, arrays, step=FD_STEP):
    """Compare analytic gradients against finite differences.

    ``loss_and_grads()`` evaluates the model at the current contents of
    ``arrays`` (a list of float64 numpy arrays, typically parameters plus
    inputs) and returns (loss, [grad per array]).  Returns the worst
    relative error over all elements of all arrays.
    """
    _, analytic = loss_and_grads()
    if len(analytic) != len(arrays):
        raise ValueError("loss_and_grads must return one gradient per checked array")
    worst = 0.0
    for arr, ana in zip(arrays, analytic):
        ana = np.array(ana, dtype=np.float64, copy=True)
        num = numerical_gradient(lambda: loss_and_grads()[0], arr, step)
        worst = max(worst, relative_error(ana, num))
    return worst
