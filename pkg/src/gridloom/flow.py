"""Rectified-flow targets and Euler sampling for latent image tokens.

Training pairs a clean latent x0 with Gaussian noise x1 along the linear
path x_t = (1-t) x0 + t x1 and regresses the model's velocity output to
x0 - x1. Sampling starts from noise at t=1 and integrates the learned
velocity with uniform Euler steps down to t=0; since the velocity
estimates x0 - x1, each step is x <- x + v/N.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numeric import Tensor, sub, square, tmean, tensor


@dataclass(frozen=True)
class FlowSample:
    """One (clean, noise, time, interpolant) training tuple."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    xt: np.ndarray


def interpolate(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """(1-t) x0 + t x1, with t in [0, 1]."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolate shapes differ: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time {t} outside [0, 1]")
    return (1.0 - t) * x0 + t * x1


def make_flow_sample(x0: np.ndarray, rng: np.random.Generator) -> FlowSample:
    """Draw one (t, x1) pair for an image; one shared t per image."""
    t = float(rng.uniform(0.0, 1.0))
    x1 = rng.standard_normal(np.asarray(x0).shape)
    return FlowSample(np.asarray(x0, dtype=np.float64), x1, t, interpolate(x0, x1, t))


def flow_loss(predicted: Tensor, x0: np.ndarray, x1: np.ndarray) -> Tensor:
    """Mean squared error against the constant path velocity x0 - x1."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape or tuple(predicted.shape) != x0.shape:
        raise ShapeError(
            f"flow_loss shapes differ: pred {predicted.shape}, x0 {x0.shape}, x1 {x1.shape}")
    target = tensor(x0 - x1, dtype=predicted.dtype)
    return tmean(square(sub(predicted, target)))


def integrate(velocity_fn, x_start: np.ndarray, n_steps: int) -> np.ndarray:
    """Euler integration from t=1 to t=0 of the learned velocity field.

    `velocity_fn(x, t)` returns the velocity estimate at state x and time
    t. With the exact field x0 - x1 this returns x0 for any step count.
    """
    if n_steps < 1:
        raise ValueError("need at least one integration step")
    x = np.asarray(x_start, dtype=np.float64).copy()
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = 1.0 - k * dt
        v = np.asarray(velocity_fn(x, t), dtype=np.float64)
        if v.shape != x.shape:
            raise ShapeError(f"velocity shape {v.shape} != state shape {x.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("non-finite velocity during integration")
        x = x + dt * v
    return x


def sample_start(shape, rng: np.random.Generator) -> np.ndarray:
    """Seeded Gaussian start state at t=1."""
    return rng.standard_normal(shape)
