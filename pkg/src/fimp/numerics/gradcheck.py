"""Central finite-difference verification of backpropagated gradients."""
import numpy as np

from fimp.errors import NumericInstabilityError
from fimp.numerics.tensor import Tensor, no_grad, precision

DEFAULT_STEP = 2.0 ** -20


def _relative_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(fn, point, step=DEFAULT_STEP):
    """Worst componentwise relative error between backprop and central differences.

    ``fn`` maps a Tensor to a scalar Tensor. Runs in 64-bit precision. The
    default step is a power of two so that linear functions difference exactly.
    """
    with precision(np.float64):
        x = Tensor(np.asarray(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
                   requires_grad=True)
        out = fn(x)
        _check_finite(out.data, "function value")
        out.backward()
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad
        numeric = _numeric_grad(lambda: fn(Tensor(x.data, dtype=np.float64)).data, x.data, step)
    return _relative_error(analytic, numeric)


def grad_check_params(loss_fn, params, step=DEFAULT_STEP):
    """Like :func:`grad_check` but perturbs existing parameter tensors in place.

    ``loss_fn()`` takes no arguments and closes over ``params``; all tensors
    involved must already be 64-bit.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    _check_finite(loss.data, "loss")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        numeric = _numeric_grad(lambda: loss_fn().data, p.data, step)
        worst = max(worst, _relative_error(analytic, numeric))
    return worst


def _numeric_grad(evaluate, array, step):
    numeric = np.zeros_like(array)
    flat = array.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(evaluate())
            flat[i] = orig - step
            down = float(evaluate())
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericInstabilityError(f"non-finite value while perturbing component {i}")
            numeric.reshape(-1)[i] = (up - down) / (2.0 * step)
    return numeric


def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NumericInstabilityError(f"{what} is not finite")
