"""Central finite-difference verification of autograd gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import WIDE, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: list = field(default_factory=list)
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAILED"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:.0e}, {self.checked} entries)"


def grad_check(fn, inputs, tolerance: float = 1e-4, step: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn(*inputs)`` to central differences.

    ``inputs`` are float64 tensors with ``requires_grad``. When
    ``max_entries`` is given only that many randomly chosen entries per
    input are perturbed. Relative error per entry is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != WIDE:
            raise TypeError("grad_check requires wide (float64) inputs")
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    rng = rng if rng is not None else np.random.default_rng(0)

    worst = 0.0
    per_input = []
    checked = 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        err_here = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn(*inputs).data)
            flat[i] = orig - step
            fm = float(fn(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2 * step)
            ana = a.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            err_here = max(err_here, rel)
        checked += len(idx)
        per_input.append(err_here)
        worst = max(worst, err_here)
    return GradCheckReport(max_rel_error=worst, tolerance=tolerance, per_input=per_input, checked=checked)


def wide(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=WIDE), requires_grad=requires_grad, dtype=WIDE)
