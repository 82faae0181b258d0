import os

os.environ.setdefault("LEVY_LIBOR_QUIET", "1")

import pytest

from drift_engine import DriftMode
from levy_driver import NIGParams, make_driver
from market import MarketBlock, load_market
from simulator import Scheme, SimConfig, make_grid, simulate


@pytest.fixture(scope="session")
def kluge():
    return load_market(MarketBlock(preset="kluge-2002"))


@pytest.fixture(scope="session")
def nig():
    return NIGParams(alpha=1.5, delta_bar=1.5)


@pytest.fixture(scope="session")
def driver(nig):
    return make_driver(nig)


@pytest.fixture(scope="session")
def grid(kluge):
    return make_grid(kluge.tenor, 5)


@pytest.fixture(scope="session")
def scenarios(kluge, driver, grid):
    """Small Full / Frozen / Picard scenario sets (exact drift) on one seed."""
    out = {}
    for scheme in Scheme:
        cfg = SimConfig(n_paths=2000, seed=7, scheme=scheme, drift_mode=DriftMode.EXACT, block_size=500)
        out[scheme] = simulate(kluge, driver, grid, cfg)
    return out
