import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

from msimrt.lp import EQ, GE, LE, LinearProgram  # noqa: E402
from msimrt.model import PlanningData  # noqa: E402
from msimrt.phantom import CaseSpec  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_data(rng, F=2, P=2, nv=3, nb=2, uniform=True) -> PlanningData:
    """Random small planning instance: half the voxels are tumour."""
    D = [rng.uniform(0.0, 1.0, (nv, nb)) for _ in range(P)]
    tumor = np.zeros(nv, dtype=bool)
    tumor[: max(1, nv // 2)] = True
    q = np.full(P, 1.0 / P) if uniform else rng.dirichlet(np.ones(P))
    return PlanningData.from_arrays(D, q, F, tumor, np.where(tumor, 5.0, 0.0), np.where(tumor, 6.0, 2.0))


def random_lp(rng, m, n, bounded=True) -> LinearProgram:
    """Random feasible LP built around a known interior point."""
    A = rng.normal(size=(m, n))
    senses = rng.choice([LE, EQ, GE], size=m)
    x0 = rng.uniform(0.0, 2.0, n)
    slack = rng.uniform(0.0, 1.0, m)
    b = A @ x0 + np.where(senses == LE, slack, np.where(senses == GE, -slack, 0.0))
    c = rng.normal(size=n)
    ub = np.full(n, 5.0) if bounded else np.full(n, np.inf)
    return LinearProgram(c, A, senses, b, np.zeros(n), ub)


def tiny_spec(name="tiny") -> CaseSpec:
    """A 14^3 phantom with a handful of tumour voxels and one OAR."""
    return CaseSpec(name=name, volume_cm3=0.05, dims=(14, 14, 14), spacing_mm=(2.0, 2.0, 2.0), n_oars=1,
                    oar_volume_cm3=[0.03], oar_max_gy=[50.0], oar_directions=[[1.0, 0.0, 0.0]],
                    ptv_margin_mm=2.0, ctv_plus_margin_mm=0.0, shift_std_mm=1.5, n_beams=3,
                    beamlet_spacing_mm=4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
