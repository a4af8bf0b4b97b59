"""Central-difference gradient checking."""

import numpy as np

from cdcgen.diffmath.tensor import Tensor, backward, no_grad


class NonDeterministicError(RuntimeError):
    pass


def _scalar(out):
    data = out.data if isinstance(out, Tensor) else np.asarray(out)
    return float(data.reshape(-1)[0])


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def grad_check(function, point, step=1e-5):
    """Max relative error between the tape gradient and central differences.

    ``function`` maps a Tensor to a scalar Tensor.  The error per coordinate
    is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with no_grad():
        first = _scalar(function(Tensor(base)))
        second = _scalar(function(Tensor(base)))
    if first != second and not (np.isnan(first) and np.isnan(second)):
        raise NonDeterministicError(f"function returned {first!r} then {second!r} at the same point")

    x = Tensor(base.copy(), requires_grad=True)
    backward(function(x))
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    probe = base.copy()
    pflat = probe.reshape(-1)
    with no_grad():
        for i in range(pflat.size):
            orig = pflat[i]
            pflat[i] = orig + step
            up = _scalar(function(Tensor(probe)))
            pflat[i] = orig - step
            down = _scalar(function(Tensor(probe)))
            pflat[i] = orig
            flat[i] = (up - down) / (2.0 * step)
    return relative_error(analytic, numeric)


def check_parameters(loss_fn, params, step=1e-5, max_coords=None, rng=None):
    """Gradient check of ``loss_fn()`` against each tensor in ``params``.

    Parameters are perturbed in place and restored.  With ``max_coords``, a
    random subset of coordinates per parameter is probed.  Returns the max
    relative error over everything probed.
    """
    params = list(params)
    with no_grad():
        first = _scalar(loss_fn())
        second = _scalar(loss_fn())
    if first != second:
        raise NonDeterministicError(f"loss returned {first!r} then {second!r} with unchanged parameters")
    for p in params:
        p.grad = None
    backward(loss_fn())
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        numeric = np.empty(len(coords))
        with no_grad():
            for n, i in enumerate(coords):
                orig = flat[i]
                flat[i] = orig + step
                up = _scalar(loss_fn())
                flat[i] = orig - step
                down = _scalar(loss_fn())
                flat[i] = orig
                numeric[n] = (up - down) / (2.0 * step)
        worst = max(worst, relative_error(analytic.reshape(-1)[coords], numeric))
    for p in params:
        p.grad = None
    return worst
