import numpy as np
import pytest
from scipy import integrate

from errors import AssumptionError, CumulantDomainError
from levy_driver import (
    NIGParams,
    jump_integral_quadrature,
    make_driver,
    nig_cumulant,
    nig_levy_density,
    sample_increments,
    sample_inverse_gaussian,
    substream,
    validate_driver,
)
from market import VolatilityStructure


def test_cumulant_reference_values(nig):
    assert nig_cumulant(0.0, nig) == 0.0
    assert nig_cumulant(1.0, nig) == pytest.approx(2.25 - 1.5 * np.sqrt(1.25), abs=1e-15)
    assert nig_cumulant(1.0, nig) == pytest.approx(0.5729490, abs=1e-7)
    assert nig_cumulant(1.5, nig) == pytest.approx(2.25, abs=1e-15)


def test_cumulant_outside_domain(nig):
    with pytest.raises(CumulantDomainError):
        nig_cumulant(1.6, nig)
    with pytest.raises(AssumptionError):
        nig_cumulant(np.array([0.1, -2.0]), nig)


def test_cumulant_symmetric_and_convex(nig):
    u = np.linspace(-1.4, 1.4, 141)
    k = nig_cumulant(u, nig)
    assert np.allclose(k, nig_cumulant(-u, nig), rtol=0, atol=1e-15)
    assert np.all(k[2:] - 2 * k[1:-1] + k[:-2] >= 0.0)


def test_cumulant_curvature_is_variance_rate(nig):
    h = 1e-4
    second = (nig_cumulant(h, nig) - 2 * nig_cumulant(0.0, nig) + nig_cumulant(-h, nig)) / h ** 2
    assert second == pytest.approx(nig.variance_rate, abs=1e-6)
    assert nig.variance_rate == pytest.approx(1.0)


@pytest.mark.parametrize("kwargs", [
    {"alpha": 0.0, "delta_bar": 1.0},
    {"alpha": 1.0, "delta_bar": -1.0},
    {"alpha": 1.0, "beta": 1.0, "delta_bar": 1.0},
])
def test_invalid_parameters(kwargs):
    with pytest.raises(AssumptionError):
        make_driver(NIGParams(**kwargs))


def test_negative_diffusion_rejected(nig):
    with pytest.raises(AssumptionError):
        make_driver(nig, diffusion_c=-0.1)


def test_jump_cumulant_is_compensated():
    spec = make_driver(NIGParams(alpha=2.0, beta=-0.5, delta_bar=1.0, mu=0.3))
    h = 1e-5
    slope = (spec.jump_cumulant(h) - spec.jump_cumulant(-h)) / (2 * h)
    assert abs(slope) < 1e-8
    assert spec.jump_cumulant(0.0) == 0.0
    assert spec.u_max == pytest.approx(1.5)


def test_symmetric_driver_cumulant_matches_closed_form(driver, nig):
    u = np.array([0.12, 0.5, 1.0])
    assert np.array_equal(driver.jump_cumulant(u), nig_cumulant(u, nig))
    assert np.array_equal(driver.cumulant(u), nig_cumulant(u, nig))


def test_gaussian_part_in_cumulant(nig):
    spec = make_driver(nig, diffusion_c=0.04)
    assert spec.cumulant(0.5) == pytest.approx(0.5 * 0.04 * 0.25 + nig_cumulant(0.5, nig))


def test_sampler_is_deterministic(nig):
    a = sample_increments(nig, 0.1, 1000, (1, 0, 3))
    b = sample_increments(nig, 0.1, 1000, (1, 0, 3))
    c = sample_increments(nig, 0.1, 1000, (1, 0, 4))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert a.stream_key == (1, 0, 3)


def test_substreams_differ_by_path_block():
    x = substream((5, 0, 0)).standard_normal(10)
    y = substream((5, 1000, 0)).standard_normal(10)
    assert not np.array_equal(x, y)


def test_sampler_rejects_bad_inputs(nig):
    with pytest.raises(AssumptionError):
        sample_increments(nig, 0.0, 10, (0, 0, 0))
    with pytest.raises(AssumptionError):
        sample_increments(nig, 0.1, 0, (0, 0, 0))


def test_inverse_gaussian_moments():
    rng = substream((11, 0, 0))
    x = sample_inverse_gaussian(0.5, 2.0, rng, 200_000)
    assert np.all(x > 0.0)
    sd = np.sqrt(0.5 ** 3 / 2.0)
    assert abs(x.mean() - 0.5) < 4 * sd / np.sqrt(len(x))


@pytest.mark.slow
def test_increment_moments(nig):
    dt = 0.1
    x = sample_increments(nig, dt, 4_000_000, (2002, 0, 0)).values
    assert abs(x.mean()) < 4 * x.std() / np.sqrt(len(x))
    assert x.var() == pytest.approx(nig.delta_bar * dt / nig.alpha, rel=0.01)

    u = 0.5
    e = np.exp(u * x)
    assert abs(e.mean() - np.exp(dt * nig_cumulant(u, nig))) < 4 * e.std() / np.sqrt(len(e))


def test_validate_reference_market(driver, kluge):
    report = validate_driver(driver, kluge.vols, eps=0.01)
    assert report.passed
    assert report.M == pytest.approx(1.44)
    assert report.margin == pytest.approx(1.5 - 1.01 * 1.44)
    report.raise_if_failed()


def test_validate_zero_vols(driver):
    vols = VolatilityStructure.constant([0.5, 1.0], [0.0, 0.0])
    report = validate_driver(driver, vols)
    assert report.passed and report.M == 0.0


def test_validate_single_large_vol(driver):
    vols = VolatilityStructure.constant([0.5], [2.0])
    report = validate_driver(driver, vols)
    assert not report.passed
    assert report.offending[0]["rates"] == [1]
    with pytest.raises(AssumptionError):
        report.raise_if_failed()


def test_levy_density_second_moment(nig):
    def f(x):
        return x * x * float(nig_levy_density(x, nig))

    total = sum(integrate.quad(f, lo, hi, limit=200)[0]
                for lo, hi in ((-np.inf, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, np.inf)))
    assert total == pytest.approx(nig.variance_rate, rel=1e-6)


def test_quadrature_without_later_rates_is_cumulant(nig):
    assert jump_integral_quadrature(0.2, [], [], nig) == pytest.approx(nig_cumulant(0.2, nig), rel=1e-7)


def test_quadrature_tails_with_heavy_loadings(nig):
    # unit weights collapse the product to e^{(l_1 + l_2) x}: the integral is kappa(a + s) - kappa(s)
    value = jump_integral_quadrature(0.5, [0.3, 0.3], [1.0, 1.0], nig)
    assert np.isfinite(value)
    assert value == pytest.approx(nig_cumulant(1.1, nig) - nig_cumulant(0.6, nig), rel=1e-7)


def test_quadrature_is_finite_for_every_reference_rate(kluge, nig):
    lam = kluge.vols.at(0.0)
    L0 = kluge.libors.values
    acc = kluge.tenor.accruals
    for i in range(kluge.n_rates):
        w = acc[i + 1:] * L0[i + 1:] / (1.0 + acc[i + 1:] * L0[i + 1:])
        assert np.isfinite(jump_integral_quadrature(lam[i], lam[i + 1:], w, nig))
