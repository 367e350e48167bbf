"""Central finite-difference gradient oracle.

The oracle perturbs parameter entries in place by ±h, re-runs the forward
pass, and compares (f(x+h) - f(x-h)) / 2h against the recorded autodiff
gradient. Relative error uses a small floor so that noise on near-zero
gradients is not amplified:

    rel = |ad - fd| / max(|ad|, |fd|, 0.01)

The registry maps block names to builders; each builder returns a parameter
table and a loss closure that rebuilds its forward graph on every call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad, zero_grad

REL_FLOOR = 1e-2


@dataclass
class GradCheckReport:
    block: str
    seed: int
    worst_rel_err: float
    worst_param: str
    checked: int
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def finite_difference(loss_fn, param: Tensor, flat_index: int, h: float = 1e-6) -> float:
    flat = param.data.reshape(-1)
    original = flat[flat_index]
    with no_grad():
        flat[flat_index] = original + h
        up = loss_fn().item()
        flat[flat_index] = original - h
        down = loss_fn().item()
        flat[flat_index] = original
    return (up - down) / (2.0 * h)


def check_gradients(
    params: dict[str, Tensor],
    loss_fn,
    *,
    block: str = "",
    seed: int = 0,
    samples_per_tensor: int | None = None,
    h: float = 1e-6,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of loss_fn() against central differences.

    samples_per_tensor=None checks every entry; otherwise a random subset of
    that size per parameter tensor (drawn from ``rng``).
    """
    zero_grad(params)
    loss = loss_fn()
    loss.backward()
    report = GradCheckReport(block=block, seed=seed, worst_rel_err=0.0, worst_param="", checked=0)
    rng = rng or np.random.default_rng(seed)
    for name, p in params.items():
        grad = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.data.size
        if samples_per_tensor is None or samples_per_tensor >= n:
            indices = range(n)
        else:
            indices = rng.choice(n, size=samples_per_tensor, replace=False)
        gflat = grad.reshape(-1)
        for i in indices:
            fd = finite_difference(loss_fn, p, int(i), h=h)
            ad = float(gflat[int(i)])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), REL_FLOOR)
            report.checked += 1
            if rel > report.worst_rel_err:
                report.worst_rel_err = rel
                report.worst_param = f"{name}[{int(i)}]"
            if rel > tol:
                report.failures.append(
                    f"{name}[{int(i)}]: autodiff {ad:.10g} vs finite-diff {fd:.10g} (rel {rel:.3g})"
                )
    return report


# Populated lazily: the builders need the full model stack.
def registry():
    from . import gradcheck_blocks

    return gradcheck_blocks.REGISTRY
