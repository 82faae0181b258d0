# market.py

import json
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from errors import AssumptionError, ConfigError
from monitor import log

ROOT = Path(__file__).parent.resolve()
PRESET_DIR = ROOT / "presets"


class TenorStructure(BaseModel):
    """Dates T_0 = 0 < T_1 < ... < T_{N+1} = T_* in years."""

    model_config = ConfigDict(frozen=True)

    dates: List[float]

    @classmethod
    def from_dates(cls, dates: List[float]) -> "TenorStructure":
        dates = [float(d) for d in dates]
        if len(dates) < 3:
            raise ConfigError(f"length mismatch: a tenor needs at least 3 dates (T_0, T_1, T_*), got {len(dates)}")
        if dates[0] != 0.0:
            raise AssumptionError(f"tenor must start at T_0 = 0, got {dates[0]}")
        for k in range(1, len(dates)):
            if dates[k] <= dates[k - 1]:
                raise AssumptionError(
                    f"tenor dates must be strictly increasing: T_{k}={dates[k]} <= T_{k - 1}={dates[k - 1]}",
                    details=[{"index": k, "date": dates[k], "previous": dates[k - 1]}],
                )
        return cls(dates=dates)

    @property
    def times(self) -> np.ndarray:
        return np.asarray(self.dates, dtype=float)

    @property
    def deltas(self) -> np.ndarray:
        # delta_i = T_{i+1} - T_i, i = 0..N
        return np.diff(self.times)

    @property
    def n_rates(self) -> int:
        return len(self.dates) - 2

    @property
    def maturities(self) -> np.ndarray:
        """Fixing dates T_1..T_N of the N forward rates."""
        return self.times[1:-1]

    @property
    def accruals(self) -> np.ndarray:
        """delta_1..delta_N, the accrual of each forward rate."""
        return self.deltas[1:]

    @property
    def terminal(self) -> float:
        return self.dates[-1]


class DiscountCurve(BaseModel):
    """B(0, T_i) for i = 1..N+1."""

    model_config = ConfigDict(frozen=True)

    bonds: List[float]

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.bonds, dtype=float)

    def check(self):
        """Assumption (LR2): strictly positive and strictly decreasing."""
        for k, b in enumerate(self.bonds):
            if not b > 0.0 or b > 1.0:
                raise AssumptionError(
                    f"bond price B(0,T_{k + 1})={b} outside (0, 1]",
                    details=[{"index": k + 1, "bond": b}],
                )
        for k in range(1, len(self.bonds)):
            if self.bonds[k] >= self.bonds[k - 1]:
                raise AssumptionError(
                    f"discount curve not strictly decreasing: B(0,T_{k + 1})={self.bonds[k]} "
                    f">= B(0,T_{k})={self.bonds[k - 1]}",
                    details=[{"index": k + 1, "bond": self.bonds[k], "previous": self.bonds[k - 1]}],
                )


class VolatilityStructure(BaseModel):
    """
    Deterministic loadings lambda(s, T_i), piecewise constant in s.

    Row k of `levels` applies on [times[k], times[k+1]); constant volatilities
    are the single-row case. lambda(s, T_i) = 0 once s >= T_i.
    """

    model_config = ConfigDict(frozen=True)

    maturities: List[float]
    times: List[float] = [0.0]
    levels: List[List[float]]

    @model_validator(mode="after")
    def _shapes(self):
        if len(self.times) != len(self.levels):
            raise ValueError(f"{len(self.times)} regime times but {len(self.levels)} volatility rows")
        if not self.times or self.times[0] != 0.0:
            raise ValueError("the first volatility regime must start at 0")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("volatility regime times must be strictly increasing")
        for row in self.levels:
            if len(row) != len(self.maturities):
                raise ValueError(f"volatility row has {len(row)} entries for {len(self.maturities)} rates")
            if not all(np.isfinite(row)):
                raise ValueError("volatilities must be finite")
        return self

    @classmethod
    def constant(cls, maturities, vols) -> "VolatilityStructure":
        return cls(maturities=[float(t) for t in maturities], levels=[[float(v) for v in vols]])

    @property
    def n_rates(self) -> int:
        return len(self.maturities)

    @property
    def regimes(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=float).reshape(len(self.levels), self.n_rates)

    @property
    def effective_regimes(self) -> np.ndarray:
        """Regime rows with the loadings of rates already fixed at the regime start set to zero."""
        rows = self.regimes.copy()
        maturities = np.asarray(self.maturities)
        for r, start in enumerate(self.times):
            rows[r, maturities <= start] = 0.0
        return rows

    def regime_index(self, s: float) -> int:
        return max(int(np.searchsorted(np.asarray(self.times), s, side="right")) - 1, 0)

    def at(self, s: float) -> np.ndarray:
        lam = self.regimes[self.regime_index(s)].copy()
        lam[np.asarray(self.maturities) <= s] = 0.0
        return lam

    def scaled(self, factor: float) -> "VolatilityStructure":
        return VolatilityStructure(
            maturities=self.maturities,
            times=self.times,
            levels=[[v * factor for v in row] for row in self.levels],
        )


class InitialLibors(BaseModel):
    model_config = ConfigDict(frozen=True)

    L0: List[float]

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.L0, dtype=float)


class MarketBlock(BaseModel):
    """Market part of the experiment document: a preset name or explicit data."""

    model_config = ConfigDict(extra="forbid")

    preset: Optional[str] = None
    dates: Optional[List[float]] = None
    bonds: Optional[List[float]] = None
    vols: Optional[List[float]] = None
    vol_times: Optional[List[float]] = None
    vol_schedule: Optional[List[List[float]]] = None


class Market(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "custom"
    tenor: TenorStructure
    curve: DiscountCurve
    vols: VolatilityStructure
    libors: InitialLibors

    @property
    def n_rates(self) -> int:
        return self.tenor.n_rates

    @property
    def terminal_bond(self) -> float:
        return self.curve.bonds[-1]


def initial_libors(tenor: TenorStructure, curve: DiscountCurve) -> InitialLibors:
    """L(0,T_i) = (1/delta_i)(B(0,T_i)/B(0,T_{i+1}) - 1), i = 1..N."""
    if len(curve.bonds) != tenor.n_rates + 1:
        raise ConfigError(
            f"{len(curve.bonds)} bond prices for {len(tenor.dates)} dates; expected {tenor.n_rates + 1}"
        )
    curve.check()
    b = curve.values
    libors = (b[:-1] / b[1:] - 1.0) / tenor.accruals
    for i, rate in enumerate(libors, start=1):
        if not rate > 0.0:
            raise AssumptionError(
                f"initial LIBOR L(0,T_{i})={rate} is not strictly positive",
                details=[{"index": i, "libor": float(rate)}],
            )
    return InitialLibors(L0=[float(x) for x in libors])


def _preset(name: str) -> dict:
    path = PRESET_DIR / f"{name}.json"
    if not path.exists():
        known = sorted(p.stem for p in PRESET_DIR.glob("*.json"))
        raise ConfigError(f"unknown market preset '{name}' (known: {', '.join(known)})")
    return json.loads(path.read_text(encoding="utf-8"))


def load_market(block) -> Market:
    """Builds a validated market from a MarketBlock (or the equivalent dict)."""
    if isinstance(block, dict):
        block = MarketBlock(**block)

    data = {}
    name = "custom"
    if block.preset is not None:
        data = _preset(block.preset)
        name = block.preset
    # explicit fields override the preset
    for key in ("dates", "bonds", "vols", "vol_times", "vol_schedule"):
        value = getattr(block, key)
        if value is not None:
            data[key] = value

    for key in ("dates", "bonds"):
        if key not in data:
            raise ConfigError(f"market block is missing '{key}' (and no preset supplies it)")
    if "vols" not in data and "vol_schedule" not in data:
        raise ConfigError("market block needs 'vols' or 'vol_schedule'")

    tenor = TenorStructure.from_dates(data["dates"])
    n = tenor.n_rates
    if len(data["bonds"]) != n + 1:
        raise ConfigError(
            f"length mismatch: {len(data['dates'])} dates need {n + 1} bond prices, got {len(data['bonds'])}"
        )
    curve = DiscountCurve(bonds=[float(b) for b in data["bonds"]])

    try:
        if data.get("vol_schedule") is not None:
            vols = VolatilityStructure(
                maturities=list(tenor.maturities),
                times=data.get("vol_times") or [0.0],
                levels=data["vol_schedule"],
            )
        else:
            if len(data["vols"]) != n:
                raise ConfigError(f"length mismatch: {n} rates but {len(data['vols'])} volatilities")
            vols = VolatilityStructure.constant(tenor.maturities, data["vols"])
    except ValueError as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"invalid volatility structure: {e}") from e

    libors = initial_libors(tenor, curve)
    log("market", f"Loaded '{name}': N={n} rates, T_*={tenor.terminal}, L(0,T_1)={libors.L0[0]:.6f}")
    return Market(name=name, tenor=tenor, curve=curve, vols=vols, libors=libors)


def extend_market(
    n_rates: int,
    u_max: float,
    eps: float = 0.01,
    base: str = "kluge-2002",
    vol_step: float = 0.01,
    vol_floor: float = 0.01,
) -> Market:
    """
    Synthetic market with N rates following the preset's pattern.

    Bonds beyond the preset are extrapolated at the last forward rate; vols
    decay linearly from the first preset vol and are rescaled when their
    sum would break (LR1) for the given cumulant domain.
    """
    if n_rates < 1:
        raise ConfigError(f"need at least one rate, got N={n_rates}")
    data = _preset(base)
    dates = data["dates"]
    step = dates[1] - dates[0]
    new_dates = [k * step for k in range(n_rates + 2)]

    bonds = list(data["bonds"][: n_rates + 1])
    last_fwd = (data["bonds"][-2] / data["bonds"][-1] - 1.0) / step
    while len(bonds) < n_rates + 1:
        bonds.append(bonds[-1] / (1.0 + step * last_fwd))

    vols = [max(data["vols"][0] - vol_step * k, vol_floor) for k in range(n_rates)]
    total = sum(abs(v) for v in vols)
    if (1.0 + eps) * total > u_max:
        factor = u_max / ((1.0 + eps) * total) * (1.0 - 1e-9)
        vols = [v * factor for v in vols]
        log("market", f"Rescaled synthetic vols by {factor:.6f} so that (1+eps)*sum|lambda| <= {u_max}")

    return load_market(MarketBlock(dates=new_dates, bonds=bonds, vols=vols)).model_copy(
        update={"name": f"{base}-N{n_rates}"}
    )
