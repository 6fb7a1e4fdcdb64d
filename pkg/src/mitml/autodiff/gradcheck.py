"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mitml.autodiff.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list  # max relative error per input tensor
    errors: list = field(repr=False, default_factory=list)  # per-element arrays
    nonfinite: list = field(default_factory=list)  # (input index, flat element index)

    @property
    def finite(self) -> bool:
        return not self.nonfinite

    def passed(self, tol: float) -> bool:
        return self.finite and self.max_rel_err < tol


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    ``tol`` is not used to decide anything here; it is kept so callers can log
    which threshold the report was produced for. Use ``report.passed(tol)``.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    per_input, errors, nonfinite = [], [], []
    for k, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*inputs).item()
            flat[i] = orig - step
            lo = f(*inputs).item()
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
            if not (np.isfinite(hi) and np.isfinite(lo) and np.isfinite(analytic[k].reshape(-1)[i])):
                nonfinite.append((k, i))
        err = rel_err(analytic[k].reshape(-1), numeric)
        err = np.where(np.isfinite(err), err, np.inf)
        errors.append(err.reshape(t.shape))
        per_input.append(float(err.max()) if err.size else 0.0)
    for t in inputs:
        t.grad = None
    return GradCheckReport(max(per_input, default=0.0), per_input, errors, nonfinite)
