"""Small dense numeric kernel: stable softmax, momentum SGD and a
finite-difference gradient checker.

Everything is float64. Gradients elsewhere in the package are derived by
hand; :func:`finite_diff_grad` is the independent oracle used to check them.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, NumericError

__all__ = [
    "as_vector",
    "check_finite",
    "matvec",
    "logsumexp",
    "softmax",
    "log_softmax",
    "OptimizerState",
    "sgd_momentum_step",
    "finite_diff_grad",
    "relative_error",
]


def as_vector(values, name="vector"):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-d, got shape {arr.shape}")
    return arr


def check_finite(arr, name="array"):
    """Raise :class:`NumericError` if ``arr`` holds NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite values")
    return arr


def matvec(matrix, vector):
    matrix = np.asarray(matrix, dtype=np.float64)
    vector = np.asarray(vector, dtype=np.float64)
    if matrix.ndim != 2 or vector.ndim != 1 or matrix.shape[1] != vector.shape[0]:
        raise DimensionError(
            f"cannot multiply matrix {matrix.shape} by vector {vector.shape}"
        )
    return matrix @ vector


def logsumexp(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("logsumexp of an empty array")
    top = np.max(logits, axis=axis, keepdims=True)
    out = top + np.log(np.sum(np.exp(logits - top), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(logits, axis=-1):
    """Max-subtracted softmax along ``axis``.

    >>> softmax([0.0, np.log(3.0)])
    array([0.25, 0.75])
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("softmax of an empty array")
    check_finite(logits, "logits")
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("log_softmax of an empty array")
    return logits - np.expand_dims(logsumexp(logits, axis=axis), axis)


@dataclass
class OptimizerState:
    """Heavy-ball momentum SGD with L2 weight decay.

    Velocity buffers are created lazily (zero-filled) on the first step,
    keyed by parameter name.
    """

    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_momentum_step(params, grads, state):
    """Apply one in-place update to every array in ``params``.

    ``v <- momentum * v - lr * (g + weight_decay * theta)``, then
    ``theta <- theta + v``. ``params`` and ``grads`` are dicts of arrays with
    matching keys and shapes. Returns ``params``.
    """
    if set(params) != set(grads):
        raise DimensionError(
            f"parameter/gradient keys differ: {sorted(set(params) ^ set(grads))}"
        )
    for name, theta in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != theta.shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {g.shape}, expected {theta.shape}"
            )
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(theta, dtype=np.float64)
        elif v.shape != theta.shape:
            raise DimensionError(f"velocity buffer for {name!r} has wrong shape")
        v = state.momentum * v - state.learning_rate * (g + state.weight_decay * theta)
        state.velocity[name] = v
        theta += v
        check_finite(theta, name)
    return params


def finite_diff_grad(f, theta, step=1e-3):
    """Central-difference gradient of the scalar function ``f`` at ``theta``.

    ``theta`` may have any shape; the result has the same shape. ``theta``
    is not modified.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(f(theta))
        flat[i] = orig - step
        down = float(f(theta))
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"objective is non-finite near coordinate {i}")
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a, b, floor=1e-12):
    """``||a - b|| / max(||a||, ||b||)``; 0 when both are (near) zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
