"""
No-arbitrage drift of the log-LIBOR rates under the terminal measure.

    b(s, T_i) = -1/2 lambda_i^2 c - c lambda_i sum_l w_l lambda_l - A,
    w_l = delta_l L_l / (1 + delta_l L_l),  l = i+1..N

The jump term A expands over subsets S of the later rates,

    A = sum_S (prod_{l in S} w_l) * C_S,
    C_S = sum_{U subset S} (-1)^{|S|-|U|} [kappa(lambda_i + Lambda_U) - kappa(Lambda_U)],

with Lambda_U the sum of the loadings in U and kappa the jump cumulant. C_S does
not depend on the state, so the path-dependent work is the multilinear
polynomial in w: 2^{N-i} terms exactly, or the degree-1 / degree-2 truncations.
"""

from enum import Enum
from typing import Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from errors import ConfigError, NumericalGuardError
from levy_driver import LevyDriverSpec
from market import VolatilityStructure

MAX_EXACT_RATES = 25


class DriftMode(str, Enum):
    EXACT = "exact"
    FIRST_ORDER = "first_order"
    SECOND_ORDER = "second_order"


class Provenance(str, Enum):
    LIVE = "live"
    FROZEN = "frozen"
    PICARD = "picard"


class RateState(BaseModel):
    """L(s-, T_l) for the rates after the one whose drift is wanted; shape (..., m)."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray
    accruals: np.ndarray
    provenance: Provenance = Provenance.LIVE

    @property
    def weights(self) -> np.ndarray:
        return compounding_weights(self.values, self.accruals)


def compounding_weights(libors, accruals) -> np.ndarray:
    dl = np.asarray(accruals) * libors
    return dl / (1.0 + dl)


def subset_sums(lams) -> np.ndarray:
    """Lambda_U for every U, indexed by bitmask (bit j <-> lams[j]), summed in index order."""
    sums = np.zeros(1)
    for lam in lams:
        sums = np.concatenate([sums, sums + lam])
    return sums


def ordered_sum(lams, indices) -> float:
    total = 0.0
    for j in sorted(indices):
        total += float(lams[j])
    return total


def mobius(g: np.ndarray) -> np.ndarray:
    """C_S = sum_{U subset S} (-1)^{|S|-|U|} g_U over bitmask-indexed g."""
    c = np.array(g, dtype=float)
    m = int(np.log2(len(c)))
    for k in range(m):
        view = c.reshape(-1, 2, 1 << k)
        view[:, 1, :] -= view[:, 0, :]
    return c


class DriftCoefficients(BaseModel):
    """State-independent coefficients of the jump polynomial for one rate and regime."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mode: DriftMode
    rate: int
    constant: float
    linear: np.ndarray
    quadratic: Optional[np.ndarray] = None
    subset: Optional[np.ndarray] = None


def _expansion_coefficients(kappa, i: int, n_rates: int, mode: DriftMode) -> DriftCoefficients:
    """kappa(indices) -> jump cumulant of the ordered loading sum over those rates."""
    later = list(range(i + 1, n_rates))
    m = len(later)
    k_i = kappa((i,))
    linear = np.empty(m)
    for a, l in enumerate(later):
        linear[a] = kappa((i, l)) - k_i - kappa((l,))
    quadratic = None
    if mode == DriftMode.SECOND_ORDER:
        quadratic = np.zeros((m, m))
        for a, k in enumerate(later):
            for b in range(a + 1, m):
                l = later[b]
                quadratic[a, b] = (
                    kappa((i, k, l)) - kappa((i, l)) - kappa((i, k)) - kappa((k, l))
                    + k_i + kappa((l,)) + kappa((k,))
                )
    return DriftCoefficients(mode=mode, rate=i, constant=float(k_i), linear=linear, quadratic=quadratic)


def _exact_coefficients(table: np.ndarray, i: int) -> DriftCoefficients:
    """`table` holds kappa(Lambda_V) for V subset {i..N-1}, bit 0 <-> rate i."""
    g = table[1::2] - table[0::2]
    c = mobius(g)
    singletons = 1 << np.arange(int(np.log2(len(c))))
    return DriftCoefficients(mode=DriftMode.EXACT, rate=i, constant=float(c[0]), linear=c[singletons], subset=c)


def _guard_exact(n: int):
    if n > MAX_EXACT_RATES:
        raise NumericalGuardError(
            f"exact drift for N={n} rates needs 2^{n} = {2 ** n:,} cumulant terms per drift "
            f"(limit N <= {MAX_EXACT_RATES}); use drift_mode 'first_order' or 'second_order'"
        )


class DirectCumulants:
    """Evaluates every cumulant on demand; same arithmetic as CumulantCache."""

    def __init__(self, spec: LevyDriverSpec, regimes: np.ndarray, mode: DriftMode):
        self.spec = spec
        self.regimes = np.asarray(regimes, dtype=float)
        self.mode = DriftMode(mode)
        self.n_rates = self.regimes.shape[1]

    def lookup(self, regime: int, indices) -> float:
        return float(self.spec.jump_cumulant(ordered_sum(self.regimes[regime], indices)))

    def exact_table(self, regime: int, i: int) -> np.ndarray:
        _guard_exact(self.n_rates - i)
        return self.spec.jump_cumulant(subset_sums(self.regimes[regime][i:]))

    def coefficients(self, regime: int, i: int) -> DriftCoefficients:
        if self.mode == DriftMode.EXACT:
            return _exact_coefficients(self.exact_table(regime, i), i)
        return _expansion_coefficients(lambda idx: self.lookup(regime, idx), i, self.n_rates, self.mode)


class CumulantCache(DirectCumulants):
    """
    Precomputed kappa(Lambda_V) for every index set V a mode needs, per
    volatility regime: all 2^N subsets for the exact mode, sets of up to two
    (first order) or three (second order) rates for the expansions.
    """

    def __init__(self, spec: LevyDriverSpec, regimes: np.ndarray, mode: DriftMode):
        super().__init__(spec, regimes, mode)
        self._tables: Dict[int, np.ndarray] = {}
        self._entries: Dict[int, Dict[Tuple[int, ...], float]] = {}
        self._coefficients: Dict[Tuple[int, int], DriftCoefficients] = {}

        if self.mode == DriftMode.EXACT:
            _guard_exact(self.n_rates)
            for r in range(len(self.regimes)):
                self._tables[r] = self.spec.jump_cumulant(subset_sums(self.regimes[r]))
        else:
            order = 2 if self.mode == DriftMode.FIRST_ORDER else 3
            for r in range(len(self.regimes)):
                entries = {}
                for idx in _index_sets(self.n_rates, order):
                    entries[idx] = DirectCumulants.lookup(self, r, idx)
                self._entries[r] = entries

    def lookup(self, regime: int, indices) -> float:
        key = tuple(sorted(indices))
        if self.mode == DriftMode.EXACT:
            mask = 0
            for j in key:
                mask |= 1 << j
            return float(self._tables[regime][mask])
        return self._entries[regime][key]

    def exact_table(self, regime: int, i: int) -> np.ndarray:
        # subsets of {i..N-1} are the masks whose low i bits are clear
        return self._tables[regime][:: 1 << i]

    def coefficients(self, regime: int, i: int) -> DriftCoefficients:
        key = (regime, i)
        if key not in self._coefficients:
            self._coefficients[key] = super().coefficients(regime, i)
        return self._coefficients[key]

    def entry_count(self, regime: int = 0, rate: Optional[int] = None) -> int:
        if self.mode == DriftMode.EXACT:
            table = self._tables[regime]
            return len(table) if rate is None else len(table[:: 1 << rate])
        return len(self._entries[regime])


def _index_sets(n: int, order: int):
    for a in range(n):
        yield (a,)
        if order >= 2:
            for b in range(a + 1, n):
                yield (a, b)
                if order >= 3:
                    for c in range(b + 1, n):
                        yield (a, b, c)


def build_cumulant_cache(spec: LevyDriverSpec, vols: VolatilityStructure, tenor=None, mode=DriftMode.EXACT) -> CumulantCache:
    """One cache per run; keyed by volatility regime when the loadings vary in time."""
    if tenor is not None and tenor.n_rates != vols.n_rates:
        raise ConfigError(f"tenor has {tenor.n_rates} rates but the volatility structure {vols.n_rates}")
    return CumulantCache(spec, vols.effective_regimes, DriftMode(mode))


def jump_term(coeffs: DriftCoefficients, w: np.ndarray):
    """A (or A', A'') for weights w of shape (..., m)."""
    w = np.asarray(w, dtype=float)
    m = w.shape[-1]
    if coeffs.mode == DriftMode.EXACT:
        poly = coeffs.subset
        # fold the highest bit first: P = P_low + w_k * P_high
        for k in range(m - 1, -1, -1):
            half = 1 << k
            poly = poly[..., :half] + w[..., k, None] * poly[..., half:]
        return poly[..., 0]

    total = coeffs.constant + np.sum(w * coeffs.linear, axis=-1)
    if coeffs.mode == DriftMode.SECOND_ORDER and m > 1:
        # quadratic is strictly upper triangular: inner[..., b] = sum_{a<b} w_a q_ab
        inner = np.sum(w[..., :, None] * coeffs.quadratic, axis=-2)
        total = total + np.sum(w * inner, axis=-1)
    return total


def drift_from_coefficients(coeffs: DriftCoefficients, lam_i: float, lam_later: np.ndarray, w: np.ndarray, c: float):
    gaussian = -0.5 * lam_i * lam_i * c - c * lam_i * np.sum(w * lam_later, axis=-1)
    return gaussian - jump_term(coeffs, w)


def _drift(mode: DriftMode, i: int, s: float, state: RateState, spec: LevyDriverSpec,
           vols: VolatilityStructure, cache=None):
    n = vols.n_rates
    if not 0 <= i < n:
        raise IndexError(f"rate index {i} out of range for N={n} rates")
    m = n - 1 - i
    values = np.asarray(state.values, dtype=float)
    if values.shape[-1] != m:
        raise IndexError(f"state for rate {i} must cover the {m} later rates, got {values.shape[-1]}")
    if s >= vols.maturities[i]:
        # rate already fixed
        return np.zeros(values.shape[:-1]) if values.ndim > 1 else 0.0

    mode = DriftMode(mode)
    if cache is None or cache.mode != mode:
        cache = DirectCumulants(spec, vols.effective_regimes, mode)
    regime = vols.regime_index(s)
    lam = vols.effective_regimes[regime]
    coeffs = cache.coefficients(regime, i)
    b = drift_from_coefficients(coeffs, lam[i], lam[i + 1:], compounding_weights(values, state.accruals), spec.diffusion_c)
    return float(b) if np.ndim(b) == 0 else b


def drift_exact(i, s, state, spec, vols, cache=None):
    return _drift(DriftMode.EXACT, i, s, state, spec, vols, cache)


def drift_first_order(i, s, state, spec, vols, cache=None):
    return _drift(DriftMode.FIRST_ORDER, i, s, state, spec, vols, cache)


def drift_second_order(i, s, state, spec, vols, cache=None):
    return _drift(DriftMode.SECOND_ORDER, i, s, state, spec, vols, cache)


def drift(mode, i, s, state, spec, vols, cache=None):
    return _drift(DriftMode(mode), i, s, state, spec, vols, cache)


def drift_vector(mode, s: float, libors: np.ndarray, accruals: np.ndarray, spec: LevyDriverSpec,
                 vols: VolatilityStructure, cache) -> np.ndarray:
    """b(s, T_i) for every rate alive at s; libors of shape (..., N), zeros for fixed rates."""
    libors = np.asarray(libors, dtype=float)
    n = vols.n_rates
    out = np.zeros(libors.shape)
    regime = vols.regime_index(s)
    lam = vols.effective_regimes[regime]
    w_all = compounding_weights(libors, accruals)
    for i in range(n - 1, -1, -1):
        if s >= vols.maturities[i]:
            break
        coeffs = cache.coefficients(regime, i)
        out[..., i] = drift_from_coefficients(coeffs, lam[i], lam[i + 1:], w_all[..., i + 1:], spec.diffusion_c)
    return out
