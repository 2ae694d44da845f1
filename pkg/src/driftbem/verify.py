"""Property-check harness: empirical constants for solver and kernel estimates.

Each check measures a scale-invariant constant (energy ratios, Harnack
quotients, Rellich ratios, kernel defects) on concrete solutions or kernels
and reports it against a configured ceiling, together with the refinement
trend when data at several mesh levels is supplied.  The checks are
deliberately redundant with the solver's own validation: they exercise the
same objects through independent quadrature and sampling routes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = ["CheckReport", "inputs_digest", "trend_direction"]


def inputs_digest(*parts) -> str:
    """Short stable hash of heterogeneous check inputs (arrays, scalars, text)."""
    h = hashlib.sha256()
    for part in parts:
        if part is None:
            h.update(b"<none>")
        elif isinstance(part, np.ndarray):
            h.update(str(part.shape).encode())
            h.update(np.ascontiguousarray(part).tobytes())
        elif isinstance(part, (bytes, bytearray)):
            h.update(bytes(part))
        else:
            h.update(repr(part).encode())
        h.update(b"|")
    return h.hexdigest()[:16]


def trend_direction(values) -> str:
    """Monotonicity label for a sequence of per-level constants."""
    v = np.asarray([float(x) for x in values])
    if len(v) < 2:
        return "flat"
    d = np.diff(v)
    if np.all(np.abs(d) <= 1e-12 * np.abs(v[:-1]).max()):
        return "flat"
    if np.all(d <= 0):
        return "decreasing"
    if np.all(d >= 0):
        return "increasing"
    return "mixed"


@dataclass(frozen=True)
class CheckReport:
    """Outcome of one property check.

    constants maps named empirical quantities to their measured values;
    ceilings holds the pass thresholds actually applied (a constant without a
    ceiling is informational).  trend, when present, pairs mesh levels with a
    representative constant and carries a monotonicity label.
    """

    check: str
    inputs_digest: str
    constants: dict
    ceilings: dict
    passed: bool
    trend: tuple = None
    trend_monotone: str = None
    notes: tuple = ()

    def __post_init__(self):
        if self.passed:
            bad = {k: v for k, v in self.constants.items()
                   if not np.isfinite(v)}
            if bad:
                raise ValueError(
                    f"check {self.check!r} passed with non-finite constants {bad}")
        if self.trend is not None and self.trend_monotone is None:
            object.__setattr__(
                self, "trend_monotone",
                trend_direction([v for _, v in self.trend]))

    def as_dict(self) -> dict:
        """JSON-ready representation."""
        return {
            "check": self.check,
            "inputs_digest": self.inputs_digest,
            "constants": {k: float(v) for k, v in self.constants.items()},
            "ceilings": {k: float(v) for k, v in self.ceilings.items()},
            "passed": bool(self.passed),
            "trend": None if self.trend is None else
                     [[int(l), float(v)] for l, v in self.trend],
            "trend_monotone": self.trend_monotone,
            "notes": list(self.notes),
        }


def _report(check, digest, constants, ceilings, notes=(), trend=None) -> CheckReport:
    """Assemble a report; a check passes when every ceilinged constant obeys it."""
    passed = all(np.isfinite(v) for v in constants.values()) and \
        all(constants[k] <= c for k, c in ceilings.items() if k in constants)
    return CheckReport(check=check, inputs_digest=digest,
                       constants=dict(constants), ceilings=dict(ceilings),
                       passed=passed, trend=trend, notes=tuple(notes))
