"""Pass/fail records shared by model validation and run diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class CheckReport:
    """Outcome of one sampled or structural check.

    ``witness`` holds the worst offending sample (location and values) and
    ``value`` the worst margin or error found, in the units of the check.
    """

    name: str
    passed: bool
    tolerance: float = 0.0
    value: float = 0.0
    witness: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "tolerance": float(self.tolerance),
            "value": float(self.value),
            "witness": {k: _plain(v) for k, v in self.witness.items()},
            "note": self.note,
        }

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag} {self.name}: value={self.value:.3e} tol={self.tolerance:.1e} {self.note}".rstrip()


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    return v
