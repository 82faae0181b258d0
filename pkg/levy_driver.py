"""
Driving Levy process H: NIG cumulant, increment sampler and (LR1) checks.

Parametrization used throughout:

    NIG(alpha, beta, delta, mu) = mu + beta * Y + sqrt(Y) * Z,   Z ~ N(0, 1)
    Y ~ IG(mean = delta / gamma, shape = delta**2),  gamma = sqrt(alpha**2 - beta**2)

An increment over dt has delta = delta_bar * dt and mu = mu * dt, so the IG clock
has mean delta_bar * dt / gamma and shape (delta_bar * dt)**2.
"""

from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import integrate, special

from errors import AssumptionError, CumulantDomainError
from market import VolatilityStructure
from monitor import log


class NIGParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha: float
    beta: float = 0.0
    delta_bar: float
    mu: float = 0.0

    def check(self):
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)
                and np.isfinite(self.delta_bar) and np.isfinite(self.mu)):
            raise AssumptionError("NIG parameters must be finite")
        if self.alpha <= 0.0:
            raise AssumptionError(f"NIG requires alpha > 0, got {self.alpha}")
        if self.delta_bar <= 0.0:
            raise AssumptionError(f"NIG requires delta_bar > 0, got {self.delta_bar}")
        if abs(self.beta) >= self.alpha:
            raise AssumptionError(f"NIG requires |beta| < alpha, got beta={self.beta}, alpha={self.alpha}")
        return self

    @property
    def gamma(self) -> float:
        return float(np.sqrt(self.alpha * self.alpha - self.beta * self.beta))

    @property
    def mean_rate(self) -> float:
        return self.mu + self.delta_bar * self.beta / self.gamma

    @property
    def variance_rate(self) -> float:
        return self.delta_bar * self.alpha * self.alpha / self.gamma ** 3


def nig_cumulant(u, p: NIGParams, include_mu: bool = True):
    """
    kappa(u) = mu*u + delta_bar*(gamma - sqrt(alpha^2 - (beta + u)^2)), per unit time.

    At beta = mu = 0 this is delta_bar*alpha - delta_bar*sqrt(alpha^2 - u^2).
    Defined for |beta + u| <= alpha.
    """
    u_arr = np.asarray(u, dtype=float)
    shifted = p.beta + u_arr
    if np.any(np.abs(shifted) > p.alpha):
        worst = float(u_arr.flat[int(np.argmax(np.abs(shifted)))])
        raise CumulantDomainError(
            f"cumulant argument u={worst} outside the NIG domain |beta + u| <= alpha={p.alpha}; "
            "the volatility configuration violates (LR1)",
            details=[{"u": worst, "alpha": p.alpha, "beta": p.beta}],
        )
    value = p.delta_bar * p.gamma - p.delta_bar * np.sqrt(p.alpha * p.alpha - shifted * shifted)
    if include_mu and p.mu != 0.0:
        value = value + p.mu * u_arr
    return float(value) if np.ndim(value) == 0 else value


class LevyDriverSpec(BaseModel):
    """
    H with Levy triplet (0, c, F): the Gaussian coefficient c and the jump
    law F of an NIG distribution, compensated so that H is a martingale.

    `cumulant` is the full kappa(u) = c u^2 / 2 + kappa_J(u); the drift reads
    `jump_cumulant`, kappa_J(u) = int (e^{ux} - 1 - ux) F(dx).
    """

    model_config = ConfigDict(frozen=True)

    params: NIGParams
    diffusion_c: float = 0.0
    u_max: float
    sampler_id: Literal["nig"] = "nig"

    def jump_cumulant(self, u):
        p = self.params
        value = nig_cumulant(u, p, include_mu=False)
        if p.beta != 0.0:
            value = value - p.delta_bar * p.beta / p.gamma * np.asarray(u, dtype=float)
        return value

    def cumulant(self, u):
        u_arr = np.asarray(u, dtype=float)
        return 0.5 * self.diffusion_c * u_arr * u_arr + self.jump_cumulant(u)

    @property
    def mean_rate(self) -> float:
        """Mean per unit time of the raw NIG increments, removed by the simulator."""
        return self.params.mean_rate


def make_driver(p: NIGParams, diffusion_c: float = 0.0) -> LevyDriverSpec:
    p.check()
    if diffusion_c < 0.0 or not np.isfinite(diffusion_c):
        raise AssumptionError(f"diffusion coefficient c must be finite and >= 0, got {diffusion_c}")
    # kappa_J is finite on [-(alpha - |beta|), alpha - |beta|]
    u_max = p.alpha - abs(p.beta)
    log("driver", f"NIG(alpha={p.alpha}, beta={p.beta}, delta_bar={p.delta_bar}, mu={p.mu}), c={diffusion_c}, u_max={u_max}")
    return LevyDriverSpec(params=p, diffusion_c=float(diffusion_c), u_max=float(u_max))


class IncrementBlock(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dt: float
    values: np.ndarray
    stream_key: Tuple[int, int, int]


def substream(stream_key: Tuple[int, int, int]) -> np.random.Generator:
    """Philox generator keyed by (seed, first path index, step index)."""
    seed, path, step = (int(k) for k in stream_key)
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(path, step))
    return np.random.Generator(np.random.Philox(seq))


def sample_inverse_gaussian(mean: float, shape: float, rng: np.random.Generator, size: int) -> np.ndarray:
    """Michael-Schucany-Haas transformation with one rejection step."""
    nu = rng.standard_normal(size)
    y = nu * nu
    my = mean * y
    # mean - 2 mean^2 y / (mean y + sqrt(mean^2 y^2 + 4 mean shape y)); cancellation-free root
    x = mean - 2.0 * mean * my / (my + np.sqrt(my * my + 4.0 * mean * shape * y))
    z = rng.uniform(size=size)
    return np.where(z <= mean / (mean + x), x, mean * mean / x)


def sample_increments(
    p: NIGParams,
    dt: float,
    n_paths: int,
    stream_key: Tuple[int, int, int],
    diffusion_c: float = 0.0,
) -> IncrementBlock:
    """n_paths draws of NIG(alpha, beta, delta_bar*dt, mu*dt), plus sqrt(c dt) N(0,1) when c > 0."""
    p.check()
    if not dt > 0.0:
        raise AssumptionError(f"time step must be positive, got dt={dt}")
    if n_paths < 1:
        raise AssumptionError(f"need at least one path, got n_paths={n_paths}")

    rng = substream(stream_key)
    d = p.delta_bar * dt
    clock = sample_inverse_gaussian(d / p.gamma, d * d, rng, n_paths)
    values = p.mu * dt + p.beta * clock + np.sqrt(clock) * rng.standard_normal(n_paths)
    if diffusion_c > 0.0:
        values = values + np.sqrt(diffusion_c * dt) * rng.standard_normal(n_paths)
    return IncrementBlock(dt=float(dt), values=values, stream_key=tuple(int(k) for k in stream_key))


class DriverValidation(BaseModel):
    passed: bool
    M: float
    u_max: float
    eps: float
    margin: float
    offending: List[dict] = []

    def raise_if_failed(self):
        if not self.passed:
            first = self.offending[0]
            raise AssumptionError(
                f"(LR1) violated: sum|lambda| = {first['sum_abs_lambda']:.6f} at s={first['time']} "
                f"(rates {first['rates']}) needs (1+eps)*M <= u_max = {self.u_max}",
                details=self.offending,
            )
        return self


def validate_driver(
    spec: LevyDriverSpec,
    vols: VolatilityStructure,
    eps: float = 0.01,
    times: Optional[List[float]] = None,
) -> DriverValidation:
    """
    (LR1): M = max_s sum_{alive i} |lambda(s, T_i)| and (1 + eps) M <= u_max.

    The bound is checked at every given time (default: the regime starts and
    the tenor dates), over all rates still alive there.
    """
    if eps <= 0.0:
        raise AssumptionError(f"eps must be > 0, got {eps}")
    check_times = sorted(set(times if times is not None else list(vols.times) + [0.0] + list(vols.maturities)))
    limit = spec.u_max / (1.0 + eps)

    M = 0.0
    offending = []
    for s in check_times:
        lam = vols.at(s)
        total = float(np.sum(np.abs(lam)))
        M = max(M, total)
        if total > limit:
            alive = [int(j) + 1 for j in np.flatnonzero(lam)]
            offending.append({"time": float(s), "sum_abs_lambda": total, "rates": alive})

    report = DriverValidation(
        passed=not offending,
        M=M,
        u_max=spec.u_max,
        eps=eps,
        margin=spec.u_max - (1.0 + eps) * M,
        offending=offending,
    )
    log("driver", f"(LR1) M={M:.4f}, u_max={spec.u_max}, margin={report.margin:.4f}, passed={report.passed}")
    return report


def nig_levy_density(x, p: NIGParams):
    """F(dx)/dx = delta_bar*alpha/(pi |x|) * e^{beta x} * K_1(alpha |x|)."""
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    # k1e(z) = K_1(z) e^{z}
    return p.delta_bar * p.alpha / (np.pi * ax) * np.exp(p.beta * x - p.alpha * ax) * special.k1e(p.alpha * ax)


def _expm1_minus_linear(z: float) -> float:
    if abs(z) < 1e-3:
        return z * z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0)))
    return np.expm1(z) - z


def _log_product(others: np.ndarray, weights: np.ndarray, x: float) -> float:
    """log prod_l (1 + w_l (e^{lambda_l x} - 1)) for 0 <= w_l <= 1, finite where the product overflows."""
    with np.errstate(divide="ignore"):
        return float(np.sum(np.logaddexp(np.log(weights) + others * x, np.log1p(-weights))))


def jump_integral_quadrature(a: float, others, weights, p: NIGParams) -> float:
    """
    int ((e^{a x} - 1) prod_l (1 + w_l (e^{lambda_l x} - 1)) - a x) F(dx)

    by adaptive quadrature against the NIG Levy density, split at |x| = 1.
    Independent of the cumulant algebra, used to audit the exact drift.
    """
    others = np.asarray(others, dtype=float)
    weights = np.asarray(weights, dtype=float)

    def inner(x):
        ea = np.expm1(a * x)
        prod_minus_one = np.prod(1.0 + weights * np.expm1(others * x)) - 1.0
        return (_expm1_minus_linear(a * x) + ea * prod_minus_one) * float(nig_levy_density(x, p))

    def tail(x):
        # every exponential shares the density's e^{beta x - alpha |x|} so nothing overflows
        ax = abs(x)
        scale = p.delta_bar * p.alpha / (np.pi * ax) * special.k1e(p.alpha * ax)
        decay = p.beta * x - p.alpha * ax
        log_prod = _log_product(others, weights, x)
        z = a * x
        if z > 0.0:
            jump = np.exp(log_prod + decay + z) * -np.expm1(-z)
        else:
            jump = np.exp(log_prod + decay) * np.expm1(z)
        return float(scale * (jump - z * np.exp(decay)))

    total = 0.0
    for fn, lo, hi in ((tail, -np.inf, -1.0), (inner, -1.0, 0.0), (inner, 0.0, 1.0), (tail, 1.0, np.inf)):
        value, _ = integrate.quad(fn, lo, hi, epsabs=0.0, epsrel=1e-11, limit=400)
        total += value
    return total
