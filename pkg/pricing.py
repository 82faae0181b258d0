"""Caplet pricing under the terminal measure, Black-76 and implied volatilities."""

from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from scipy import optimize
from scipy.stats import norm

from errors import GridError, NumericalGuardError
from market import Market
from monitor import log
from simulator import ScenarioSet, checkpoint_rates

DEFAULT_STRIKE_MULTIPLIERS = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0)


class CapletSpec(BaseModel):
    """Caplet fixing at T_i on L(T_i, T_i), paying at T_{i+1}; 1 <= i <= N."""

    model_config = ConfigDict(frozen=True)

    maturity_index: int
    strike: float
    notional: float = 1.0
    strike_multiplier: Optional[float] = None


class CapletResult(BaseModel):
    maturity_index: int
    strike: float
    strike_multiplier: Optional[float] = None
    price: float
    stderr: float
    implied_vol: Optional[float] = None
    n_paths: int
    scheme: str
    drift_mode: str
    tape_checksum: str


def black76_price(F: float, K: float, sigma: float, T: float, DF: float, delta: float) -> float:
    """delta * DF * (F N(d1) - K N(d2)), d1,2 = (ln(F/K) +- sigma^2 T / 2) / (sigma sqrt(T))."""
    if F <= 0.0 or K <= 0.0 or T <= 0.0 or DF <= 0.0 or delta <= 0.0:
        raise ValueError(f"Black-76 needs F, K, T, DF, delta > 0 (got F={F}, K={K}, T={T}, DF={DF}, delta={delta})")
    if sigma < 0.0:
        raise ValueError(f"volatility must be >= 0, got {sigma}")
    vol = sigma * np.sqrt(T)
    if vol == 0.0:
        return delta * DF * max(F - K, 0.0)
    d1 = (np.log(F / K) + 0.5 * vol * vol) / vol
    d2 = d1 - vol
    return float(delta * DF * (F * norm.cdf(d1) - K * norm.cdf(d2)))


def black76_vega(F: float, K: float, sigma: float, T: float, DF: float, delta: float) -> float:
    vol = sigma * np.sqrt(T)
    if vol <= 0.0:
        return 0.0
    d1 = (np.log(F / K) + 0.5 * vol * vol) / vol
    return float(delta * DF * F * norm.pdf(d1) * np.sqrt(T))


def implied_vol(price: float, F: float, K: float, T: float, DF: float, delta: float) -> float:
    """Black-76 volatility reproducing `price`: Brent bracketing, then Newton polish."""
    intrinsic = delta * DF * max(F - K, 0.0)
    upper = delta * DF * F
    if not intrinsic < price < upper:
        raise NumericalGuardError(
            f"no implied volatility: price {price!r} outside the no-arbitrage bounds ({intrinsic!r}, {upper!r})",
            details=[{"price": price, "lower": intrinsic, "upper": upper, "F": F, "K": K, "T": T}],
        )

    def excess(sigma):
        return black76_price(F, K, sigma, T, DF, delta) - price

    hi = 1.0
    while excess(hi) < 0.0:
        hi *= 2.0
        if hi > 1e4:
            raise NumericalGuardError(f"implied volatility above {hi} for price {price!r}")
    sigma = optimize.brentq(excess, 0.0, hi, xtol=1e-300, rtol=4.0 * np.finfo(float).eps, maxiter=500)

    for _ in range(3):
        f = excess(sigma)
        vega = black76_vega(F, K, sigma, T, DF, delta)
        if abs(f) <= 1e-15 or vega <= 0.0:
            break
        step = f / vega
        if not 0.0 < sigma - step < hi or abs(excess(sigma - step)) >= abs(f):
            break
        sigma -= step
    return float(sigma)


def price_caplet(s: ScenarioSet, spec: CapletSpec, market: Market) -> CapletResult:
    """
    delta_i B(0,T_*) E[prod_{l>i}(1 + delta_l L(T_i,T_l)) (L(T_i,T_i) - K)^+] over the
    scenario paths; the scenario scheme decides whether L, L-hat or L-hat^0 is read.
    """
    n = market.n_rates
    i = spec.maturity_index
    if not 1 <= i <= n:
        raise GridError(f"caplet maturity index {i} outside 1..{n}")
    if not spec.strike > 0.0:
        raise ValueError(f"caplet strike must be positive, got {spec.strike}")
    if s.n_rates != n:
        raise GridError(f"scenario set has {s.n_rates} rates, market {n}")

    fx = checkpoint_rates(s, market.tenor.dates[i])
    acc = market.tenor.accruals
    compounding = np.prod(1.0 + acc[i:] * fx.rates[:, 1:], axis=1)
    payoff = spec.notional * acc[i - 1] * market.terminal_bond * compounding * np.maximum(fx.rates[:, 0] - spec.strike, 0.0)

    n_paths = len(payoff)
    # np.sum reduces pairwise over the whole contiguous array: independent of how paths were produced
    price = float(np.sum(payoff) / n_paths)
    stderr = float(np.std(payoff, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0

    F = market.libors.L0[i - 1]
    DF = market.curve.bonds[i]
    iv = None
    try:
        iv = implied_vol(price / spec.notional, F, spec.strike, market.tenor.dates[i], DF, acc[i - 1])
    except NumericalGuardError as e:
        log("price", f"T_{i} K={spec.strike:.6f} ({s.scheme.value}/{s.drift_mode.value}): {e}")

    return CapletResult(
        maturity_index=i,
        strike=spec.strike,
        strike_multiplier=spec.strike_multiplier,
        price=price,
        stderr=stderr,
        implied_vol=iv,
        n_paths=n_paths,
        scheme=s.scheme.value,
        drift_mode=s.drift_mode.value,
        tape_checksum=s.tape_checksum,
    )


def strike_grid(market: Market, multipliers: Sequence[float] = DEFAULT_STRIKE_MULTIPLIERS) -> List[CapletSpec]:
    """K = m * L(0, T_i) for every maturity and multiplier."""
    specs = []
    for i in range(1, market.n_rates + 1):
        for m in multipliers:
            specs.append(CapletSpec(maturity_index=i, strike=m * market.libors.L0[i - 1], strike_multiplier=m))
    return specs


def price_caplets(s: ScenarioSet, market: Market, multipliers: Sequence[float] = DEFAULT_STRIKE_MULTIPLIERS) -> List[CapletResult]:
    results = [price_caplet(s, spec, market) for spec in strike_grid(market, multipliers)]
    missing = sum(r.implied_vol is None for r in results)
    log("price", f"Priced {len(results)} caplets ({s.scheme.value}/{s.drift_mode.value}), {missing} without implied vol")
    return results


RESULT_COLUMNS = ["scheme", "drift_mode", "maturity_index", "strike", "price", "stderr", "implied_vol"]


def results_frame(results: List[CapletResult]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in results], columns=list(CapletResult.model_fields))


def write_results(results: List[CapletResult], path: Path) -> Path:
    results_frame(results)[RESULT_COLUMNS].to_csv(path, index=False)
    return path


def diff_table(base: List[CapletResult], alt: List[CapletResult]) -> pd.DataFrame:
    """Implied-vol differences 1e4 * (iv_alt - iv_base) in basis points per (maturity, strike)."""
    base_keys = [(r.maturity_index, r.strike) for r in base]
    alt_keys = [(r.maturity_index, r.strike) for r in alt]
    if sorted(base_keys) != sorted(alt_keys):
        raise GridError("diff table needs identical (maturity, strike) grids in both result sets")
    checksums = {r.tape_checksum for r in base} | {r.tape_checksum for r in alt}
    if len(checksums) != 1:
        raise GridError(f"result sets were simulated on different increment tapes: {sorted(checksums)}")

    alt_by_key = {(r.maturity_index, r.strike): r for r in alt}
    rows = []
    for b in base:
        a = alt_by_key[(b.maturity_index, b.strike)]
        diff = np.nan
        if b.implied_vol is not None and a.implied_vol is not None:
            diff = 1e4 * (a.implied_vol - b.implied_vol)
        rows.append({
            "maturity_index": b.maturity_index,
            "strike_multiplier": b.strike_multiplier,
            "strike": b.strike,
            "iv_base": b.implied_vol,
            "iv_alt": a.implied_vol,
            "diff_bp": diff,
        })
    return pd.DataFrame(rows)


def diff_summary(table: pd.DataFrame) -> dict:
    abs_diff = table["diff_bp"].abs()
    return {
        "max_abs_bp": float(abs_diff.max()) if abs_diff.notna().any() else None,
        "mean_abs_bp": float(abs_diff.mean()) if abs_diff.notna().any() else None,
        "missing": int(abs_diff.isna().sum()),
    }


def write_diff(table: pd.DataFrame, path: Path) -> Path:
    summary = diff_summary(table)
    tail = pd.DataFrame([
        {"maturity_index": "max_abs", "diff_bp": summary["max_abs_bp"]},
        {"maturity_index": "mean_abs", "diff_bp": summary["mean_abs_bp"]},
    ])
    pd.concat([table, tail], ignore_index=True).to_csv(path, index=False)
    return path
