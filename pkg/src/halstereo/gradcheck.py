"""Finite-difference verification of the reverse-mode adjoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

FD_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.op_name:<32s} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} {status}")


def grad_check(op_closure, inputs, tolerance=DEFAULT_TOLERANCE, name="op",
               step=FD_STEP):
    """Compare reverse-mode gradients against central finite differences.

    ``op_closure`` maps the given tensors to a scalar loss. Relative error
    uses denominator max(|analytic|, |numeric|, 1e-8) per element.
    """
    leaves = [Tensor(t.data if isinstance(t, Tensor) else t, requires_grad=True)
              for t in inputs]
    loss = op_closure(*leaves)
    if loss.size != 1:
        raise ValueError("grad_check needs a scalar loss")
    loss.backward()

    max_rel = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        numeric = np.zeros(leaf.shape)
        flat = leaf.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = op_closure(*leaves).item()
            flat[i] = orig - step
            f_minus = op_closure(*leaves).item()
            flat[i] = orig
            nflat[i] = (f_plus - f_minus) / (2.0 * step)
        if np.isnan(numeric).any() or np.isnan(analytic).any():
            raise FloatingPointError("NaN encountered during grad check")
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        rel = np.abs(analytic - numeric) / denom
        max_rel = max(max_rel, float(rel.max()))
    return GradReport(op_name=name, max_rel_error=max_rel, tolerance=tolerance)
