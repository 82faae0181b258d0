import numpy as np
import pytest

from errors import AssumptionError, ConfigError
from market import (
    DiscountCurve,
    MarketBlock,
    TenorStructure,
    VolatilityStructure,
    extend_market,
    initial_libors,
    load_market,
)


def test_preset(kluge):
    assert kluge.n_rates == 9
    assert np.allclose(kluge.tenor.deltas, 0.5)
    assert kluge.tenor.terminal == 5.0
    assert kluge.vols.at(0.0)[0] == 0.20
    assert kluge.terminal_bond == 0.7920573


def test_initial_libors_reference_values(kluge):
    L0 = kluge.libors.values
    assert L0[0] == pytest.approx(0.038610, abs=1e-6)
    assert L0[-1] == pytest.approx(0.0537648, abs=1e-6)
    assert np.all(L0 > 0.0)


def test_initial_libors_invert_compounding(kluge):
    b = kluge.curve.values
    L0 = kluge.libors.values
    acc = kluge.tenor.accruals
    assert np.allclose((1.0 + acc * L0) * b[1:], b[:-1], rtol=4e-15, atol=0.0)


def test_flat_curve_rejected():
    tenor = TenorStructure.from_dates([0.0, 0.5, 1.0])
    with pytest.raises(AssumptionError):
        initial_libors(tenor, DiscountCurve(bonds=[1.0, 1.0]))


def test_increasing_curve_names_violation():
    with pytest.raises(AssumptionError, match="B\\(0,T_3\\)"):
        DiscountCurve(bonds=[0.99, 0.98, 0.985]).check()


def test_bond_above_one_rejected():
    with pytest.raises(AssumptionError):
        DiscountCurve(bonds=[1.01, 0.98]).check()


def test_two_dates_one_bond_is_length_mismatch():
    with pytest.raises(ConfigError, match="length mismatch"):
        load_market(MarketBlock(dates=[0.0, 0.5], bonds=[0.98], vols=[0.2]))


def test_bond_count_mismatch():
    with pytest.raises(ConfigError, match="length mismatch"):
        load_market(MarketBlock(dates=[0.0, 0.5, 1.0, 1.5], bonds=[0.98, 0.96], vols=[0.2, 0.2]))


def test_vol_count_mismatch():
    with pytest.raises(ConfigError, match="length mismatch"):
        load_market(MarketBlock(preset="kluge-2002", vols=[0.2, 0.2]))


def test_negative_period_is_ordering_error():
    with pytest.raises(AssumptionError, match="strictly increasing"):
        load_market(MarketBlock(dates=[0.0, 1.0, 0.5], bonds=[0.98, 0.96], vols=[0.2]))


def test_tenor_must_start_at_zero():
    with pytest.raises(AssumptionError):
        TenorStructure.from_dates([0.5, 1.0, 1.5])


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown market preset"):
        load_market(MarketBlock(preset="nope"))


def test_explicit_fields_override_preset():
    market = load_market(MarketBlock(preset="kluge-2002", vols=[0.1] * 9))
    assert np.allclose(market.vols.at(0.0), 0.1)
    assert market.libors.L0[0] == pytest.approx(0.038610, abs=1e-6)


def test_vol_schedule():
    market = load_market(MarketBlock(
        dates=[0.0, 0.5, 1.0, 1.5],
        bonds=[0.98, 0.96, 0.94],
        vol_times=[0.0, 0.5],
        vol_schedule=[[0.2, 0.2], [0.3, 0.1]],
    ))
    vols = market.vols
    assert vols.regime_index(0.25) == 0
    assert vols.regime_index(0.5) == 1
    assert list(vols.at(0.25)) == [0.2, 0.2]
    # rate 1 is fixed at 0.5
    assert list(vols.at(0.75)) == [0.0, 0.1]
    assert list(vols.effective_regimes[1]) == [0.0, 0.1]
    assert list(vols.at(1.0)) == [0.0, 0.0]


def test_bad_vol_schedule_is_config_error():
    with pytest.raises(ConfigError):
        load_market(MarketBlock(
            dates=[0.0, 0.5, 1.0, 1.5],
            bonds=[0.98, 0.96, 0.94],
            vol_times=[0.0, 0.5],
            vol_schedule=[[0.2, 0.2]],
        ))


def test_volatility_shape_validation():
    with pytest.raises(ValueError):
        VolatilityStructure(maturities=[0.5, 1.0], times=[0.0], levels=[[0.1]])


def test_extend_market_small_keeps_preset_pattern():
    market = extend_market(5, u_max=1.5)
    assert market.n_rates == 5
    assert market.name == "kluge-2002-N5"
    assert market.curve.bonds == [0.9833630, 0.9647388, 0.9435826, 0.9228903, 0.9006922, 0.8790279]
    assert np.allclose(market.vols.at(0.0), [0.20, 0.19, 0.18, 0.17, 0.16])


def test_extend_market_rescales_for_long_tenors():
    market = extend_market(40, u_max=1.5, eps=0.01)
    assert market.n_rates == 40
    vols = market.vols.at(0.0)
    assert 1.01 * np.sum(np.abs(vols)) <= 1.5
    assert np.all(np.diff(market.curve.values) < 0.0)
    assert np.all(market.libors.values > 0.0)
