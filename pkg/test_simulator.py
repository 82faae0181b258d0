import numpy as np
import pandas as pd
import pytest

from drift_engine import DriftMode, build_cumulant_cache, drift_vector
from errors import GridError, NumericalGuardError
from market import MarketBlock, load_market
from simulator import (
    Scheme,
    SimConfig,
    checkpoint_rates,
    dump_scenarios,
    make_grid,
    martingale_diagnostics,
    picard_iterate_paths,
    simulate,
)


def test_grid_contains_tenor_dates(kluge, grid):
    assert grid.n_steps == 45
    assert grid.tenor_steps == list(range(0, 46, 5))
    assert [grid.times[k] for k in grid.tenor_steps] == kluge.tenor.dates[:-1]
    assert np.all(grid.dts > 0.0)


def test_grid_rejects_zero_steps(kluge):
    with pytest.raises(GridError):
        make_grid(kluge.tenor, 0)


def test_initial_state_on_every_path(scenarios, kluge):
    for s in scenarios.values():
        assert np.all(s.log_rates[0] == np.log(kluge.libors.values))


def test_schemes_share_the_tape(scenarios):
    checksums = {s.tape_checksum for s in scenarios.values()}
    assert len(checksums) == 1


def test_terminal_rate_identical_across_schemes(scenarios):
    full = scenarios[Scheme.FULL].log_rates[:, :, -1]
    assert np.array_equal(full, scenarios[Scheme.FROZEN].log_rates[:, :, -1])
    assert np.array_equal(full, scenarios[Scheme.PICARD].log_rates[:, :, -1])


def test_rates_constant_after_fixing(scenarios, grid):
    z = scenarios[Scheme.FULL].log_rates
    for j, k in enumerate(grid.tenor_steps[1:]):
        assert np.all(z[k:, :, j] == z[k, :, j])


def test_schemes_differ_before_the_last_rate(scenarios):
    full = scenarios[Scheme.FULL].log_rates[:, :, 0]
    assert not np.array_equal(full, scenarios[Scheme.FROZEN].log_rates[:, :, 0])


@pytest.mark.parametrize("scheme", list(Scheme))
def test_results_independent_of_worker_count(kluge, driver, grid, scheme):
    base = SimConfig(n_paths=600, seed=11, scheme=scheme, drift_mode=DriftMode.SECOND_ORDER, block_size=200)
    one = simulate(kluge, driver, grid, base)
    many = simulate(kluge, driver, grid, base.model_copy(update={"n_workers": 4}))
    assert np.array_equal(one.log_rates, many.log_rates)
    assert one.tape_checksum == many.tape_checksum


@pytest.mark.parametrize("scheme", list(Scheme))
def test_results_independent_of_block_size(kluge, driver, grid, scheme):
    base = SimConfig(n_paths=1000, seed=3, scheme=scheme, drift_mode=DriftMode.SECOND_ORDER, block_size=1000)
    one = simulate(kluge, driver, grid, base)
    split = simulate(kluge, driver, grid, base.model_copy(update={"block_size": 500}))
    odd = simulate(kluge, driver, grid, base.model_copy(update={"block_size": 333, "n_workers": 3}))
    assert one.tape_checksum == split.tape_checksum == odd.tape_checksum
    assert np.array_equal(one.log_rates, split.log_rates)
    assert np.array_equal(one.log_rates, odd.log_rates)


def test_smaller_run_is_prefix_of_larger(kluge, driver, grid):
    cfg = SimConfig(n_paths=1500, seed=4, scheme=Scheme.FROZEN, drift_mode=DriftMode.FIRST_ORDER)
    large = simulate(kluge, driver, grid, cfg)
    small = simulate(kluge, driver, grid, cfg.model_copy(update={"n_paths": 700}))
    assert np.array_equal(small.tape, large.tape[:, :700])
    assert np.array_equal(small.log_rates, large.log_rates[:, :700])


def test_picard_iterate_is_frozen_scheme(kluge, driver, grid, scenarios):
    cfg = SimConfig(n_paths=2000, seed=7, scheme=Scheme.PICARD, drift_mode=DriftMode.EXACT, block_size=500)
    z1 = picard_iterate_paths(kluge, driver, grid, cfg)
    assert z1.scheme == Scheme.FROZEN
    assert np.array_equal(z1.log_rates, scenarios[Scheme.FROZEN].log_rates)


def test_frozen_drift_table_at_time_zero(kluge, driver, scenarios):
    s = scenarios[Scheme.FROZEN]
    cache = build_cumulant_cache(driver, kluge.vols, kluge.tenor, DriftMode.EXACT)
    b0 = drift_vector(DriftMode.EXACT, 0.0, kluge.libors.values, kluge.tenor.accruals, driver, kluge.vols, cache)
    assert np.array_equal(s.drift_table[0], b0)


def test_picard_increments_are_uncorrelated(scenarios):
    z = scenarios[Scheme.FROZEN].log_rates[:, :, 0]
    x = z[1] - z[0]
    y = z[3] - z[2]
    corr = np.corrcoef(x, y)[0, 1]
    assert abs(corr) < 3 / np.sqrt(len(x))


def test_zero_volatility_keeps_rates_constant(driver):
    market = load_market(MarketBlock(preset="kluge-2002", vols=[0.0] * 9))
    grid = make_grid(market.tenor, 2)
    for scheme in Scheme:
        s = simulate(market, driver, grid, SimConfig(n_paths=50, seed=1, scheme=scheme, block_size=20))
        assert np.all(s.log_rates == s.log_rates[0])
        fx = checkpoint_rates(s, 0.5)
        assert np.allclose(fx.rates, market.libors.values, rtol=1e-14)


def test_checkpoint_at_time_zero(scenarios, kluge):
    fx = checkpoint_rates(scenarios[Scheme.FULL], 0.0)
    assert fx.first_rate == 0
    assert fx.rates.shape == (2000, 9)
    assert np.all(fx.rates == fx.rates[0])
    assert np.allclose(fx.rates[0], kluge.libors.values, rtol=1e-14)


def test_checkpoint_columns_start_at_fixing_rate(scenarios):
    fx = checkpoint_rates(scenarios[Scheme.FULL], 2.0)
    assert fx.date_index == 4
    assert fx.first_rate == 3
    assert fx.rates.shape == (2000, 6)


def test_checkpoint_off_grid(scenarios):
    with pytest.raises(GridError):
        checkpoint_rates(scenarios[Scheme.FULL], 0.3)


def test_overflow_guard(kluge, driver, grid):
    with pytest.raises(NumericalGuardError):
        simulate(kluge, driver, grid, SimConfig(n_paths=10, seed=1, z_bound=1e-3))


def test_grid_must_match_market(kluge, driver):
    other = load_market(MarketBlock(dates=[0.0, 0.5, 1.0], bonds=[0.98, 0.96], vols=[0.2]))
    with pytest.raises(GridError):
        simulate(kluge, driver, make_grid(other.tenor), SimConfig(n_paths=10))


def test_near_guard_paths(kluge, driver, grid, scenarios):
    assert all(s.near_guard_paths == 0 for s in scenarios.values())
    # |log L(0, T_1)| > 3, so half of a bound of 6 is crossed on every path at t = 0
    s = simulate(kluge, driver, grid, SimConfig(n_paths=200, seed=2, scheme=Scheme.FROZEN, z_bound=6.0))
    assert s.near_guard_paths == 200


def test_martingale_diagnostics_table(scenarios, kluge):
    table = martingale_diagnostics(scenarios[Scheme.FULL], kluge)
    assert list(table.columns) == ["rate_index", "time", "mean", "stderr", "z_score"]
    assert list(table["rate_index"]) == list(range(1, 10))
    assert np.all(table["stderr"] > 0.0)


def test_dump_scenarios(tmp_path, driver):
    market = load_market(MarketBlock(dates=[0.0, 0.5, 1.0, 1.5], bonds=[0.98, 0.96, 0.94], vols=[0.2, 0.1]))
    s = simulate(market, driver, make_grid(market.tenor, 2), SimConfig(n_paths=3, seed=5))
    path = dump_scenarios(s, tmp_path / "scenarios.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["path", "time", "rate_index", "log_rate"]
    assert len(frame) == (s.grid.n_steps + 1) * 3 * 2
    row = frame[(frame.path == 2) & (frame.rate_index == 2)].iloc[-1]
    assert row.log_rate == pytest.approx(s.log_rates[-1, 2, 1])
    assert row.time == pytest.approx(s.grid.times[-1])


@pytest.mark.slow
def test_terminal_rate_martingale(kluge, driver, grid):
    L9 = kluge.libors.values[-1]
    for scheme in Scheme:
        s = simulate(kluge, driver, grid, SimConfig(n_paths=100_000, seed=2002, scheme=scheme))
        fixing = checkpoint_rates(s, kluge.tenor.dates[9]).rates[:, 0]
        stderr = fixing.std(ddof=1) / np.sqrt(len(fixing))
        assert abs(fixing.mean() - L9) < 3 * stderr
        if scheme == Scheme.FULL:
            table = martingale_diagnostics(s, kluge)
            assert np.all(np.abs(table["z_score"]) < 4.0)
        del s
