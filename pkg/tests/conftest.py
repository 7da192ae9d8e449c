import numpy as np
import pytest

from jointsurv.data import (
    CohortDataset,
    LongitudinalRecord,
    SurvivalRecord,
    join_cohort,
)
from jointsurv.model import JointModelSpec
from jointsurv.sampler import McmcConfig, run_chains
from jointsurv.simulate import scenario, simulate_cohort


def build_cohort(patients):
    """Assemble a CohortDataset from (pid, os_time, event, group, visits) tuples.

    ``visits`` is a list of (time, sld) pairs.
    """
    longitudinal = []
    survival = []
    for pid, os_time, event, group, visits in patients:
        survival.append(SurvivalRecord(pid, os_time, bool(event), group))
        for t, y in visits:
            longitudinal.append(LongitudinalRecord(pid, t, y))
    return join_cohort(longitudinal, survival)


@pytest.fixture(scope="session")
def s4_sim():
    return simulate_cohort(scenario("S4"), seed=7)


@pytest.fixture(scope="session")
def s4_cohort(s4_sim) -> CohortDataset:
    return s4_sim.cohort


@pytest.fixture(scope="session")
def s4_samples(s4_cohort):
    """A small but real posterior on the tiny scenario, shared across tests."""
    spec = JointModelSpec()
    config = McmcConfig(n_chains=2, burn_in=400, estimation=1200, seed=3)
    return run_chains(spec, s4_cohort, config)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
