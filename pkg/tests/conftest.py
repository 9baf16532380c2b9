import pytest

from lpsr.calibration import calibrate
from lpsr.engine import EngineConfig
from lpsr.simulator import SimConfig, SimProblemSpec, Simulator, make_sim_problems

# K matches the number of simulator error modes; see the README's simulator notes
SIM_K = 8


@pytest.fixture(scope="session")
def sim():
    return Simulator(SimConfig())


@pytest.fixture(scope="session")
def sim_basis(sim):
    problems = make_sim_problems(sim, SimProblemSpec(n=200, seed=1, p_error=1.0))
    basis, _ = calibrate(sim, problems, EngineConfig(l_crit=4, mode="greedy"), SIM_K)
    return basis
