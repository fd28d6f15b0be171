import warnings

import numpy as np
import pytest

from qstress.case_io import BranchRecord, BusRecord, GenRecord, GridCase, builtin_case
from qstress.network_model import build_model

# load-bus positions of case ids 3, 12, 17, 28, 29, 30 (the 1st, 10th, 15th,
# 22nd, 23rd and 24th load buses of case30)
COMPENSATOR_LOADS = (0, 9, 14, 21, 22, 23)


def two_bus(q_load=-0.5, shunt=0.0, p_demand=0.0, susceptance=4.0, v_gen=1.0):
    """Generator bus 1 feeding load bus 2 through one lossless line."""
    return GridCase(
        base_mva=100.0,
        buses=(BusRecord(1, "generator", 0.0, 0.0, 0.0, v_gen),
               BusRecord(2, "load", p_demand, -q_load, shunt, 1.0)),
        branches=(BranchRecord(1, 2, 1.0 / susceptance),),
        gens=(GenRecord(1, p_demand),),
    )


def quiet_model(case, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_model(case, **kw)


@pytest.fixture(scope="session")
def case30():
    return builtin_case("case30")


@pytest.fixture(scope="session")
def model30(case30):
    return quiet_model(case30)


@pytest.fixture(scope="session")
def q_load30(case30):
    return case30.load_injections()


@pytest.fixture(scope="session")
def case2():
    return builtin_case("case2")


@pytest.fixture(scope="session")
def model2(case2):
    return quiet_model(case2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_grid(n_load, rng, n_gen=1):
    """Random connected meshed grid with ``n_gen`` generators and ``n_load`` loads."""
    gens = [BusRecord(k + 1, "generator", 0.0, 0.0, 0.0, float(rng.uniform(0.98, 1.05)))
            for k in range(n_gen)]
    loads = [BusRecord(n_gen + k + 1, "load", 0.0, float(rng.uniform(0.05, 0.6)),
                       float(rng.uniform(0.0, 0.2)), 1.0) for k in range(n_load)]
    pairs = {(rng.integers(1, n_gen + 1), n_gen + 1)}
    for k in range(1, n_load):
        pairs.add((n_gen + k, n_gen + k + 1))
        pairs.add((int(rng.integers(1, n_gen + k + 1)), n_gen + k + 1))
    for g in range(2, n_gen + 1):
        pairs.add((g, int(rng.integers(n_gen + 1, n_gen + n_load + 1))))
    branches = tuple(BranchRecord(int(a), int(b), float(rng.uniform(0.05, 0.4)))
                     for a, b in sorted(pairs) if a != b)
    return GridCase(100.0, tuple(gens + loads), branches,
                    tuple(GenRecord(g.id, 0.0) for g in gens))
