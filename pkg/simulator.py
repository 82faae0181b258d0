# simulator.py

import hashlib
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from drift_engine import (
    DriftMode,
    build_cumulant_cache,
    compounding_weights,
    drift_from_coefficients,
    drift_vector,
)
from errors import GridError, NumericalGuardError
from levy_driver import LevyDriverSpec, sample_increments
from market import Market
from monitor import log


class Scheme(str, Enum):
    FULL = "full"
    FROZEN = "frozen"
    PICARD = "picard"


class SimGrid(BaseModel):
    """Tenor dates T_0..T_N refined uniformly; the last node is the last fixing T_N."""

    model_config = ConfigDict(frozen=True)

    steps_per_tenor: int = 5
    times: List[float]
    tenor_steps: List[int]

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))


def make_grid(tenor, steps_per_tenor: int = 5) -> SimGrid:
    if steps_per_tenor < 1:
        raise GridError(f"steps_per_tenor must be >= 1, got {steps_per_tenor}")
    dates = tenor.dates[:-1]
    times = [dates[0]]
    tenor_steps = [0]
    for a, b in zip(dates, dates[1:]):
        for k in range(1, steps_per_tenor):
            times.append(a + (b - a) * k / steps_per_tenor)
        times.append(b)
        tenor_steps.append(len(times) - 1)
    return SimGrid(steps_per_tenor=steps_per_tenor, times=times, tenor_steps=tenor_steps)


class SimConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_paths: int = Field(10000, ge=1)
    seed: int = Field(2002, ge=0, lt=2 ** 64)
    scheme: Scheme = Scheme.FULL
    drift_mode: DriftMode = DriftMode.EXACT
    n_workers: int = Field(1, ge=1)
    block_size: int = Field(1000, ge=1)
    z_bound: float = Field(50.0, gt=0.0)


class ScenarioSet(BaseModel):
    """
    log_rates[k, p, j] = Z(t_k, T_{j+1}) on path p; tape[k, p] = Delta H over [t_k, t_{k+1}).
    Rate j stays constant after its fixing date.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    scheme: Scheme
    drift_mode: DriftMode
    seed: int
    grid: SimGrid
    log_rates: np.ndarray
    tape: np.ndarray
    tape_checksum: str
    drift_table: Optional[np.ndarray] = None
    near_guard_paths: int = 0

    @property
    def n_paths(self) -> int:
        return self.log_rates.shape[1]

    @property
    def n_rates(self) -> int:
        return self.log_rates.shape[2]


def path_blocks(n_paths: int, block_size: int):
    return [(start, min(start + block_size, n_paths)) for start in range(0, n_paths, block_size)]


def run_tasks(tasks: List[Callable[[], None]], n_workers: int):
    if n_workers <= 1 or len(tasks) <= 1:
        for task in tasks:
            task()
        return
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = [pool.submit(task) for task in tasks]
        for future in futures:
            future.result()


# paths per random substream: fixed, unlike the scheduling block_size
RNG_BLOCK = 1000
# paths with some |Z| above this fraction of z_bound are reported
NEAR_GUARD = 0.5


def increment_tape(driver: LevyDriverSpec, grid: SimGrid, cfg: SimConfig) -> np.ndarray:
    """
    Compensated increments of H, shape (n_steps, n_paths).

    Paths [c, c + RNG_BLOCK) of step k come from the substream (seed, c, k). A
    substream is always drawn in full and cut at n_paths, so the tape depends
    on neither block_size nor n_workers, and a smaller run is a prefix of a
    larger one.
    """
    dts = grid.dts
    tape = np.empty((grid.n_steps, cfg.n_paths))

    def fill(start, stop):
        def task():
            for k, dt in enumerate(dts):
                block = sample_increments(driver.params, dt, RNG_BLOCK, (cfg.seed, start, k), driver.diffusion_c)
                tape[k, start:stop] = block.values[: stop - start] - driver.mean_rate * dt
        return task

    run_tasks([fill(a, b) for a, b in path_blocks(cfg.n_paths, RNG_BLOCK)], cfg.n_workers)
    return tape


def tape_checksum(tape: np.ndarray) -> str:
    return hashlib.md5(np.ascontiguousarray(tape).tobytes()).hexdigest()


def _euler(z, b, dt, lam, dh):
    return z + b * dt + lam * dh


def _guard(col: np.ndarray, bound: float, k: int, j: int):
    if not np.all(np.abs(col) <= bound):
        bad = int(np.count_nonzero(~(np.abs(col) <= bound)))
        raise NumericalGuardError(
            f"log-rate of T_{j + 1} left |Z| <= {bound} on {bad} paths at grid step {k + 1}",
            details=[{"step": k + 1, "rate": j + 1, "paths": bad}],
        )


class _Setup:
    """Per-run arrays shared read-only by every worker."""

    def __init__(self, market: Market, driver: LevyDriverSpec, grid: SimGrid, cfg: SimConfig, cache):
        self.market = market
        self.driver = driver
        self.grid = grid
        self.cfg = cfg
        self.cache = cache
        self.z0 = np.log(market.libors.values)
        self.accruals = market.tenor.accruals
        self.dts = grid.dts
        self.times = np.asarray(grid.times)
        self.lams = np.array([market.vols.at(t) for t in grid.times[:-1]]).reshape(grid.n_steps, market.n_rates)
        self.regimes = [market.vols.regime_index(t) for t in grid.times[:-1]]
        self.regime_rows = market.vols.effective_regimes
        # rate j moves on steps k < last_step[j]
        self.last_step = grid.tenor_steps[1:]

    def new_panel(self) -> np.ndarray:
        panel = np.empty((self.grid.n_steps + 1, self.cfg.n_paths, self.market.n_rates))
        panel[0] = self.z0
        return panel

    def frozen_drifts(self) -> np.ndarray:
        """Path-independent drifts b(t_k, T_j; L(0)), shape (n_steps, N)."""
        table = np.zeros((self.grid.n_steps, self.market.n_rates))
        L0 = self.market.libors.values
        for k, t in enumerate(self.grid.times[:-1]):
            table[k] = drift_vector(self.cfg.drift_mode, t, L0, self.accruals, self.driver, self.market.vols, self.cache)
        return table


def _evolve_frozen(setup: _Setup, tape: np.ndarray, drifts: np.ndarray) -> np.ndarray:
    panel = setup.new_panel()
    blocks = path_blocks(setup.cfg.n_paths, setup.cfg.block_size)

    def rate_task(j, start, stop):
        def task():
            col = panel[0, start:stop, j].copy()
            for k in range(setup.grid.n_steps):
                if k < setup.last_step[j]:
                    col = _euler(col, drifts[k, j], setup.dts[k], setup.lams[k, j], tape[k, start:stop])
                    _guard(col, setup.cfg.z_bound, k, j)
                panel[k + 1, start:stop, j] = col
        return task

    tasks = [rate_task(j, a, b) for j in range(setup.market.n_rates) for a, b in blocks]
    run_tasks(tasks, setup.cfg.n_workers)
    return panel


def _evolve_picard(setup: _Setup, tape: np.ndarray, z1: np.ndarray) -> np.ndarray:
    """
    Each rate reads only the first Picard iterate of the later rates, never its
    peers, so every rate is one independent task over all paths. The kernels
    are n_paths wide and release the GIL, so rates overlap on worker threads.
    Rate 0 has the most later rates and goes first.
    """
    panel = setup.new_panel()
    c = setup.driver.diffusion_c

    def rate_task(j):
        def task():
            col = panel[0, :, j].copy()
            for k in range(setup.grid.n_steps):
                if k < setup.last_step[j]:
                    lam = setup.regime_rows[setup.regimes[k]]
                    coeffs = setup.cache.coefficients(setup.regimes[k], j)
                    w = compounding_weights(np.exp(z1[k, :, j + 1:]), setup.accruals[j + 1:])
                    b = drift_from_coefficients(coeffs, lam[j], lam[j + 1:], w, c)
                    col = _euler(col, b, setup.dts[k], setup.lams[k, j], tape[k])
                    _guard(col, setup.cfg.z_bound, k, j)
                panel[k + 1, :, j] = col
        return task

    tasks = [rate_task(j) for j in range(setup.market.n_rates)]
    run_tasks(tasks, setup.cfg.n_workers)
    return panel


def _evolve_full(setup: _Setup, tape: np.ndarray) -> np.ndarray:
    """
    Live-state drift. Within a step every rate reads the state at the step
    start; rates are updated from T_N downward.
    """
    panel = setup.new_panel()
    n = setup.market.n_rates

    def block_task(start, stop):
        def task():
            for k, t in enumerate(setup.grid.times[:-1]):
                z = panel[k, start:stop]
                b = drift_vector(setup.cfg.drift_mode, t, np.exp(z), setup.accruals, setup.driver,
                                 setup.market.vols, setup.cache)
                nxt = z.copy()
                for j in range(n - 1, -1, -1):
                    if k >= setup.last_step[j]:
                        break
                    nxt[:, j] = _euler(z[:, j], b[:, j], setup.dts[k], setup.lams[k, j], tape[k, start:stop])
                    _guard(nxt[:, j], setup.cfg.z_bound, k, j)
                panel[k + 1, start:stop] = nxt
        return task

    run_tasks([block_task(a, b) for a, b in path_blocks(setup.cfg.n_paths, setup.cfg.block_size)], setup.cfg.n_workers)
    return panel


def simulate(market: Market, driver: LevyDriverSpec, grid: SimGrid, cfg: SimConfig, cache=None) -> ScenarioSet:
    """
    Euler scheme for Z(t, T_i) = log L(t, T_i) on the shared increment tape.

    full   -> drift from the live rates
    frozen -> drift from L(0, .), identical to the first Picard iterate Z^(1)
    picard -> drift from exp(Z^(1)), Z^(1) built first on the same tape
    """
    if len(grid.tenor_steps) != market.n_rates + 1:
        raise GridError(f"grid covers {len(grid.tenor_steps) - 1} tenor periods, market has {market.n_rates} rates")
    if cache is None or cache.mode != cfg.drift_mode:
        cache = build_cumulant_cache(driver, market.vols, market.tenor, cfg.drift_mode)

    log("sim", f"Simulating {cfg.scheme.value}/{cfg.drift_mode.value}: {cfg.n_paths} paths, "
               f"{grid.n_steps} steps, N={market.n_rates}, seed={cfg.seed}, workers={cfg.n_workers}")
    tape = increment_tape(driver, grid, cfg)
    checksum = tape_checksum(tape)
    setup = _Setup(market, driver, grid, cfg, cache)

    drift_table = None
    if cfg.scheme == Scheme.FULL:
        panel = _evolve_full(setup, tape)
    else:
        drift_table = setup.frozen_drifts()
        panel = _evolve_frozen(setup, tape, drift_table)
        if cfg.scheme == Scheme.PICARD:
            panel = _evolve_picard(setup, tape, panel)

    near = int(np.count_nonzero(np.any(np.abs(panel) > NEAR_GUARD * cfg.z_bound, axis=(0, 2))))
    if near:
        log("sim", f"{near} paths reached |Z| > {NEAR_GUARD * cfg.z_bound:g} (guard at {cfg.z_bound:g})")
    log("sim", f"Done {cfg.scheme.value}/{cfg.drift_mode.value}, tape checksum {checksum}")
    return ScenarioSet(
        scheme=cfg.scheme,
        drift_mode=cfg.drift_mode,
        seed=cfg.seed,
        grid=grid,
        log_rates=panel,
        tape=tape,
        tape_checksum=checksum,
        drift_table=drift_table,
        near_guard_paths=near,
    )


def picard_iterate_paths(market: Market, driver: LevyDriverSpec, grid: SimGrid, cfg: SimConfig, cache=None) -> ScenarioSet:
    """Z^(1): deterministic drift at L(0, .) plus the stochastic integral, i.e. the frozen scheme."""
    return simulate(market, driver, grid, cfg.model_copy(update={"scheme": Scheme.FROZEN}), cache)


class Fixings(BaseModel):
    """rates[p, a] = L(T_i, T_{first_rate + a + 1}) for the rates not yet fixed before T_i."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    date_index: int
    time: float
    first_rate: int
    rates: np.ndarray


def checkpoint_rates(s: ScenarioSet, t: float) -> Fixings:
    tenor_times = [s.grid.times[k] for k in s.grid.tenor_steps]
    matches = [i for i, T in enumerate(tenor_times) if abs(T - t) <= 1e-12]
    if not matches:
        raise GridError(f"t={t} is not a tenor date on the simulation grid {tenor_times}")
    i = matches[0]
    first = max(i - 1, 0)
    rates = np.exp(s.log_rates[s.grid.tenor_steps[i], :, first:])
    return Fixings(date_index=i, time=tenor_times[i], first_rate=first, rates=rates)


def martingale_diagnostics(s: ScenarioSet, market: Market) -> pd.DataFrame:
    """
    For each rate at its own fixing date,
        (L(T_i,T_i) - L(0,T_i)) prod_{l>i}(1 + delta_l L(T_i,T_l)) / prod_{l>i}(1 + delta_l L(0,T_l)),
    which has mean zero under the terminal measure.
    """
    L0 = market.libors.values
    acc = market.tenor.accruals
    rows = []
    for i in range(1, market.n_rates + 1):
        fx = checkpoint_rates(s, market.tenor.dates[i])
        later = fx.rates[:, 1:]
        growth = np.prod(1.0 + acc[i:] * later, axis=1) / np.prod(1.0 + acc[i:] * L0[i:])
        stat = (fx.rates[:, 0] - L0[i - 1]) * growth
        mean = float(np.mean(stat))
        stderr = float(np.std(stat, ddof=1) / np.sqrt(len(stat))) if len(stat) > 1 else 0.0
        rows.append({
            "rate_index": i,
            "time": fx.time,
            "mean": mean,
            "stderr": stderr,
            "z_score": mean / stderr if stderr > 0.0 else 0.0,
        })
    return pd.DataFrame(rows)


def dump_scenarios(s: ScenarioSet, path: Path) -> Path:
    n_steps, n_paths, n_rates = s.log_rates.shape
    p, k, j = np.meshgrid(np.arange(n_paths), np.arange(n_steps), np.arange(n_rates), indexing="xy")
    frame = pd.DataFrame({
        "path": p.ravel(),
        "time": np.asarray(s.grid.times)[k.ravel()],
        "rate_index": j.ravel() + 1,
        "log_rate": s.log_rates.ravel(),
    })
    frame.to_csv(path, index=False)
    log("sim", f"Scenario dump written to {path} ({len(frame)} rows)")
    return path
