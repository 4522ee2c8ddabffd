"""Finite-difference verification of recorded gradients.

Central differences with per-element step h = base * (|theta| + 1) are
compared against the tape gradient, one relative error per parameter
tensor. Run at 64-bit precision; 32-bit parameters make the comparison
meaningless.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .ops import Tape, Tensor


@dataclass
class GradCheckEntry:
    name: str
    rel_error: float
    ad_norm: float
    fd_norm: float
    finite: bool


@dataclass
class GradCheckReport:
    tol_rel: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.finite and e.rel_error <= self.tol_rel for e in self.entries)

    @property
    def failures(self) -> list[str]:
        return [e.name for e in self.entries
                if not e.finite or e.rel_error > self.tol_rel]

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [f"{e.name}: rel_err={e.rel_error:.3e}"
                 + ("" if e.finite else " (non-finite gradient)")
                 for e in self.entries]
        verdict = "PASS" if self.passed else "FAIL: " + ", ".join(self.failures)
        return "\n".join(lines + [verdict])


def grad_check(f: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, Tensor],
               tol_rel: float = 1e-4,
               base_step: float = 1e-5) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` against central FD.

    Per tensor, the relative error is ||g_ad - g_fd|| / max(||g_ad||,
    ||g_fd||, 1e-12); the report passes iff every tensor is at or below
    ``tol_rel`` and every recorded gradient is finite. ``f`` must be
    deterministic; parameter data is perturbed in place and restored.
    """
    with Tape() as tape:
        loss = f(params)
    ad = tape.grad_dict(loss, params)

    report = GradCheckReport(tol_rel=tol_rel)
    for name, theta in params.items():
        g_ad = ad[name]
        if not np.all(np.isfinite(g_ad)):
            report.entries.append(GradCheckEntry(name, np.inf, np.inf, 0.0, False))
            continue
        g_fd = np.zeros_like(theta.data)
        flat = theta.data.reshape(-1)
        fd_flat = g_fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = base_step * (abs(orig) + 1.0)
            flat[i] = orig + h
            hi = float(f(params).data)
            flat[i] = orig - h
            lo = float(f(params).data)
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * h)
        diff = float(np.linalg.norm(g_ad - g_fd))
        na, nf = float(np.linalg.norm(g_ad)), float(np.linalg.norm(g_fd))
        rel = diff / max(na, nf, 1e-12)
        report.entries.append(GradCheckEntry(name, rel, na, nf, True))
    return report
