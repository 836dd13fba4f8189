"""Adam optimizer and finite-difference gradient checking."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .numeric import Tensor, backward
from .rng import make_rng


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators keyed by parameter name."""

    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def ensure(self, params: dict) -> None:
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros(p.shape, dtype=np.float64)
                self.v[name] = np.zeros(p.shape, dtype=np.float64)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None) -> AdamState:
    """One in-place Adam update over a dict of parameter Tensors.

    `lr` overrides the state's base rate for this step (used by warmup
    schedules); moment estimates update either way.
    """
    state.ensure(params)
    state.step += 1
    t = state.step
    rate = state.lr if lr is None else lr
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g.astype(np.float64) ** 2)
        update = rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype)
    return state


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    checked: int
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    params: list

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for p in self.params:
            flag = "ok" if p.passed else "FAIL"
            out.append(f"{p.name}\t{p.max_rel_err:.3e}\t{p.checked}\t{flag}")
        return out


def grad_check(forward_fn, params: dict, tolerance: float = 1e-3, h: float = 1e-4,
               samples_per_param: int = 6, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `forward_fn()` must rebuild the loss deterministically from the current
    values in `params`. For each parameter a fixed random subset of
    elements is perturbed by ±h. Relative error uses a unit floor so
    near-zero gradients are judged on absolute terms.
    """
    rng = make_rng(seed, 0xFD)
    loss = forward_fn()
    grads = backward(loss, params)
    results = []
    for name in sorted(params):
        p = params[name]
        n = p.data.size
        k = min(samples_per_param, n)
        flat_idx = rng.choice(n, size=k, replace=False) if n > k else np.arange(n)
        worst = 0.0
        for fi in flat_idx:
            idx = np.unravel_index(int(fi), p.shape)
            orig = p.data[idx]
            p.data[idx] = orig + h
            f_plus = forward_fn().item()
            p.data[idx] = orig - h
            f_minus = forward_fn().item()
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(grads[name][idx])
            denom = max(abs(numeric), abs(analytic), 1.0)
            rel = abs(numeric - analytic) / denom
            worst = max(worst, rel)
        results.append(ParamCheck(name, worst, int(k), worst < tolerance))
    return GradCheckReport(tolerance, results)
