import sys
from pathlib import Path

import numpy as np
import pytest

from fracstep.geometry import interval_mesh
from fracstep.materials import BoundaryData, make_model
from fracstep.stepper import Problem, SchemeParams, Step1Result, initial_state

FIXTURES = Path(__file__).parent / "fixtures"


def small_problem(n_cells=1, length=1.0, tau=0.01, t_end=None, pins=((0, 0),), bc=None,
                  quasistatic=False, mesh=None, model="hydride", **params):
    """A 1D problem with default hydride parameters overridden by ``params``."""
    mesh = mesh or interval_mesh(n_cells, length)
    base = dict(C=1.0, lam=0.0, G=0.0) if model in ("hydride", "regular_solution") else {}
    base.update(params)
    mdl = make_model(model, dim=mesh.dim, **base)
    sp = SchemeParams(tau=tau, t_end=t_end or tau, quasistatic=quasistatic, pin_dofs=tuple(pins))
    return Problem(mesh, mdl, bc or BoundaryData(), sp)


def step1_result(problem, prev, u=None, chi=None):
    """Step-1 output assembled from given fields (for driving steps 2-4 directly)."""
    u = prev.u if u is None else np.asarray(u, dtype=float).reshape(prev.u.shape)
    chi = prev.chi if chi is None else np.asarray(chi, dtype=float).reshape(prev.chi.shape)
    return Step1Result(u, chi, problem.strain(u, chi), np.zeros_like(chi), (chi - prev.chi) / problem.tau)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=lambda k: int(k[1:])):
            terminalreporter.write_line(results[key])


__all__ = ["small_problem", "step1_result", "initial_state"]
