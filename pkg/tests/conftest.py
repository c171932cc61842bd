import sys

import numpy as np
import pytest

from freebound.mesh import Box, HalfBox, ProblemSpec, build_mesh, mesh_for
from freebound.solver import SolverConfig, harmonic_extension, solve


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def unit_square():
    return build_mesh(Box((0.0, 0.0), (1.0, 1.0)), 0.25)


@pytest.fixture(scope="session")
def half_square():
    return build_mesh(HalfBox((0.0, 0.0), (1.0, 1.0)), 0.125)


def wave_data(amp):
    """Sphere-valued data ``(cos θ, sin θ)`` with ``θ = amp cos(π x1)``, even in x1."""

    def data(x):
        th = amp * np.cos(np.pi * x[:, 0])
        return np.stack([np.cos(th), np.sin(th)], axis=1)

    return data


def strip_spec(p, amp=0.5):
    """[-1, 1] x [0, 1]: free bottom, natural sides, Dirichlet top."""
    return ProblemSpec(
        p, 2, 2, HalfBox((-1.0, 0.0), (1.0, 1.0)),
        free_boundary=("bottom",), natural_boundary=("x1-", "x1+"), dirichlet_data=wave_data(amp),
    )


_SOLVES = {}


def solved(spec, h, grad_tol=1e-10):
    """Converged solve cached per (spec, h) for the whole session."""
    key = (id(spec), h, grad_tol)
    if key not in _SOLVES:
        mesh = mesh_for(spec, h)
        _SOLVES[key] = solve(mesh, spec, harmonic_extension(mesh, spec), SolverConfig(grad_tol=grad_tol))
    return _SOLVES[key]


@pytest.fixture(scope="session")
def strip_p3():
    return strip_spec(3.0)


@pytest.fixture(scope="session")
def strip_p3_solves(strip_p3):
    return {h: solved(strip_p3, h) for h in (1 / 16, 1 / 32)}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[k])
