"""
Experiment orchestration: caplet runs over (scheme, drift mode) pairs on one
shared increment tape, difference tables against a base run, and the
path-count and tenor-size timing benchmarks.
"""

import datetime
import hashlib
import json
import math
import os
import time
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from drift_engine import DriftMode, RateState, build_cumulant_cache, drift
from errors import ConfigError, NumericalGuardError
from levy_driver import NIGParams, make_driver, validate_driver
from market import Market, MarketBlock, extend_market, load_market
from monitor import log
from pricing import DEFAULT_STRIKE_MULTIPLIERS, diff_table, price_caplets, write_diff, write_results
from simulator import Scheme, SimConfig, dump_scenarios, make_grid, martingale_diagnostics, simulate


class DriverBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = 1.5
    beta: float = 0.0
    delta_bar: float = 1.5
    mu: float = 0.0
    diffusion_c: float = 0.0
    eps: float = 0.01

    def params(self) -> NIGParams:
        return NIGParams(alpha=self.alpha, beta=self.beta, delta_bar=self.delta_bar, mu=self.mu)


def _default_workers() -> int:
    return int(os.getenv("LEVY_LIBOR_WORKERS", "1"))


def _default_out_dir() -> str:
    return os.getenv("LEVY_LIBOR_OUT_DIR", "results")


class SimBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_paths: int = Field(10000, ge=1)
    seed: int = Field(2002, ge=0, lt=2 ** 64)
    steps_per_tenor: int = Field(5, ge=1)
    n_workers: int = Field(default_factory=_default_workers, ge=1)
    block_size: int = Field(1000, ge=1)
    z_bound: float = Field(50.0, gt=0.0)
    dump_scenarios: bool = False


class RunPair(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scheme: Scheme
    drift_mode: DriftMode

    @property
    def label(self) -> str:
        return f"{self.scheme.value}_{self.drift_mode.value}"


class RunBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pairs: List[RunPair] = []
    base: RunPair = RunPair(scheme=Scheme.FULL, drift_mode=DriftMode.EXACT)
    strike_multipliers: List[float] = list(DEFAULT_STRIKE_MULTIPLIERS)


class OutputBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    directory: str = Field(default_factory=_default_out_dir)
    prefix: str = "caplets"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    market: MarketBlock = Field(default_factory=lambda: MarketBlock(preset="kluge-2002"))
    driver: DriverBlock = Field(default_factory=DriverBlock)
    sim: SimBlock = Field(default_factory=SimBlock)
    run: RunBlock = Field(default_factory=RunBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)


class TimingRecord(BaseModel):
    scheme: str
    drift_mode: str
    n_paths: int
    N: int
    n_workers: int
    wall_seconds: float = Field(gt=0.0)


class LinearFit(BaseModel):
    scheme: str
    slope: float
    intercept: float
    r_squared: float


class RunReport(BaseModel):
    manifest_path: Path
    files: List[Path]
    manifest: Dict[str, Any]


class BenchReport(BaseModel):
    csv_path: Path
    summary_path: Path
    records: List[TimingRecord]
    summary: Dict[str, Any]


def _validation_lines(err: ValidationError) -> List[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()]


def parse_config(data: dict, source: str = "<config>") -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        lines = _validation_lines(e)
        raise ConfigError(f"{source}: invalid experiment config\n  " + "\n  ".join(lines),
                          details=[{"error": line} for line in lines]) from e
    return cfg


def load_config(path, seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    """Reads the JSON experiment document and applies CLI overrides."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: the experiment document must be a JSON object")
    cfg = parse_config(data, str(path))
    return apply_overrides(cfg, seed=seed, out_dir=out_dir)


def apply_overrides(cfg: ExperimentConfig, seed: Optional[int] = None, out_dir: Optional[str] = None) -> ExperimentConfig:
    if seed is not None:
        if seed < 0:
            raise ConfigError(f"--seed must be >= 0, got {seed}")
        cfg = cfg.model_copy(update={"sim": cfg.sim.model_copy(update={"seed": seed})})
    if out_dir is not None:
        cfg = cfg.model_copy(update={"output": cfg.output.model_copy(update={"directory": str(out_dir)})})
    return cfg


# scheduling and output settings never change a number
SCHEDULING_FIELDS = {"output": True, "sim": {"n_workers", "block_size"}}


def numeric_config(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json", exclude=SCHEDULING_FIELDS)


def config_hash(cfg: ExperimentConfig, market: Optional[Market] = None) -> str:
    """md5 over the sorted JSON of the result-determining config plus the resolved market data."""
    payload = {"config": numeric_config(cfg)}
    if market is not None:
        payload["market"] = market.model_dump(mode="json")
    return hashlib.md5(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


def file_md5(path: Path) -> str:
    return hashlib.md5(Path(path).read_bytes()).hexdigest()


def _clean(value):
    """JSON-safe copy: NaN and inf become null, numpy scalars become Python numbers."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def best_of(fn: Callable[[], Any], repeats: int = 3, warmup: bool = True) -> float:
    if warmup:
        fn()
    times = []
    for _ in range(max(repeats, 1)):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return max(min(times), 1e-9)


def linear_fit(scheme: str, x: Sequence[float], y: Sequence[float]) -> LinearFit:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (slope * x + intercept)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0.0 else 1.0
    return LinearFit(scheme=scheme, slope=float(slope), intercept=float(intercept), r_squared=r2)


# R^2 above which wall time counts as linear in the path count
LINEAR_R2 = 0.95
# floats the exact kernel may hold per fold; bounds its batch at large N
EXACT_KERNEL_BUDGET = 1 << 22


def path_scaling_checks(fits: Dict[str, Any], n_workers: int) -> Dict[str, Optional[bool]]:
    """Pass/fail of the path benchmark; None where a check does not apply."""
    checks: Dict[str, Optional[bool]] = {}
    for scheme in (Scheme.PICARD.value, Scheme.FULL.value):
        if scheme in fits:
            checks[f"linear_{scheme}"] = bool(fits[scheme]["r_squared"] > LINEAR_R2)
    ratio = fits.get("slope_ratio_picard_full")
    if fits:
        # only meaningful when rates can run on more than one worker
        checks["picard_slope_below_full"] = None if ratio is None or n_workers <= 1 else bool(ratio < 1.0)
    return checks


def tenor_scaling_checks(slopes: Dict[str, float]) -> Dict[str, Optional[bool]]:
    exact = slopes.get(DriftMode.EXACT.value)
    second = slopes.get(DriftMode.SECOND_ORDER.value)
    return {
        "exact_super_quadratic": None if exact is None else bool(exact > 2.0),
        "second_order_near_quadratic": None if second is None else bool(second <= 2.5),
        "exact_steeper_than_second_order": None if exact is None or second is None else bool(exact > second),
    }


def kernel_batch(mode: DriftMode, n_rates: int, kernel_paths: int) -> int:
    if DriftMode(mode) != DriftMode.EXACT:
        return kernel_paths
    return max(1, min(kernel_paths, EXACT_KERNEL_BUDGET >> max(n_rates - 1, 0)))


class ExperimentRunner:
    def __init__(self, cfg: ExperimentConfig, callback: Optional[Callable[[str, Any], None]] = None):
        self.cfg = cfg
        self.callback = callback or (lambda event, data: None)
        self.market: Optional[Market] = None
        self.driver = None
        self.validation = None

    def log(self, stage: str, msg: str):
        now = datetime.datetime.now().strftime("%H:%M:%S")
        log(stage, msg)
        self.callback("log", {"stage": stage, "message": msg, "timestamp": now})

    def out_dir(self) -> Path:
        out = Path(self.cfg.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        return out

    def prepare(self, market: Optional[Market] = None):
        self.market = market or load_market(self.cfg.market)
        self.driver = make_driver(self.cfg.driver.params(), self.cfg.driver.diffusion_c)
        self.validation = validate_driver(self.driver, self.market.vols, self.cfg.driver.eps).raise_if_failed()
        return self.market

    def sim_config(self, scheme: Scheme, drift_mode: DriftMode, n_paths: Optional[int] = None) -> SimConfig:
        sim = self.cfg.sim
        return SimConfig(
            n_paths=n_paths or sim.n_paths,
            seed=sim.seed,
            scheme=scheme,
            drift_mode=drift_mode,
            n_workers=sim.n_workers,
            block_size=sim.block_size,
            z_bound=sim.z_bound,
        )

    def run(self) -> RunReport:
        cfg = self.cfg
        if not cfg.run.pairs:
            raise ConfigError("run.pairs is empty: at least one (scheme, drift_mode) pair is required")
        if not cfg.run.strike_multipliers or any(not m > 0.0 for m in cfg.run.strike_multipliers):
            raise ConfigError("run.strike_multipliers must be a non-empty list of positive numbers")
        pairs = list(dict.fromkeys(cfg.run.pairs))

        market = self.prepare()
        grid = make_grid(market.tenor, cfg.sim.steps_per_tenor)
        out = self.out_dir()
        prefix = cfg.output.prefix
        digest = config_hash(cfg, market)
        self.log("run", f"Config hash {digest}; {len(pairs)} run pairs on {cfg.sim.n_paths} paths, seed {cfg.sim.seed}")

        caches = {}
        results = {}
        runs = []
        files: List[Path] = []
        for pair in pairs:
            if pair.drift_mode not in caches:
                caches[pair.drift_mode] = build_cumulant_cache(self.driver, market.vols, market.tenor, pair.drift_mode)
            s = simulate(market, self.driver, grid, self.sim_config(pair.scheme, pair.drift_mode), caches[pair.drift_mode])
            priced = price_caplets(s, market, cfg.run.strike_multipliers)
            results[pair] = priced
            csv_path = write_results(priced, out / f"{prefix}_{pair.label}.csv")
            files.append(csv_path)
            if cfg.sim.dump_scenarios:
                files.append(dump_scenarios(s, out / f"{prefix}_{pair.label}_scenarios.csv"))
            diagnostics = martingale_diagnostics(s, market)
            runs.append({
                "scheme": pair.scheme.value,
                "drift_mode": pair.drift_mode.value,
                "file": csv_path.name,
                "tape_checksum": s.tape_checksum,
                "near_guard_paths": s.near_guard_paths,
                "martingale": diagnostics.to_dict(orient="records"),
            })
            self.callback("result", {"pair": pair.label, "file": str(csv_path), "caplets": len(priced)})
            self.log("run", f"{pair.label}: {len(priced)} caplets -> {csv_path.name}")
            del s

        base = cfg.run.base
        diffs = []
        if base not in results:
            self.log("run", f"Base run {base.label} is not among the run pairs; no diff tables written")
        else:
            for pair in pairs:
                if pair == base:
                    continue
                table = diff_table(results[base], results[pair])
                diff_path = write_diff(table, out / f"{prefix}_diff_{pair.label}_vs_{base.label}.csv")
                files.append(diff_path)
                abs_diff = table["diff_bp"].abs()
                by_strike = abs_diff.groupby(table["strike_multiplier"]).mean()
                diffs.append({
                    "scheme": pair.scheme.value,
                    "drift_mode": pair.drift_mode.value,
                    "file": diff_path.name,
                    "max_abs_bp": abs_diff.max(),
                    "mean_abs_bp": abs_diff.mean(),
                    "missing": int(abs_diff.isna().sum()),
                    "mean_abs_bp_by_strike": {f"{m:g}": v for m, v in by_strike.items()},
                })
                self.log("run", f"{pair.label} vs {base.label}: max |diff| {abs_diff.max():.4f} bp, "
                                f"mean {abs_diff.mean():.4f} bp")

        manifest = _clean({
            "config_hash": digest,
            "config": numeric_config(cfg),
            "market": market.name,
            "seed": cfg.sim.seed,
            "n_paths": cfg.sim.n_paths,
            "steps_per_tenor": cfg.sim.steps_per_tenor,
            "lr1": {
                "M": self.validation.M,
                "u_max": self.validation.u_max,
                "eps": self.validation.eps,
                "margin": self.validation.margin,
            },
            "runs": runs,
            "base": base.label,
            "diffs": diffs,
            "files": {p.name: file_md5(p) for p in files},
        })
        manifest_path = out / f"{prefix}_manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.log("run", f"Manifest written to {manifest_path}")
        return RunReport(manifest_path=manifest_path, files=files, manifest=manifest)

    def bench_paths(self, counts: Sequence[int], repeats: int = 3) -> BenchReport:
        """Wall time of the Picard and Full schemes (second-order drift) against the path count."""
        counts = [int(n) for n in counts]
        if not counts:
            raise ConfigError("bench-paths needs at least one path count")
        if any(n < 1 for n in counts):
            raise ConfigError(f"path counts must be positive, got {counts}")

        market = self.prepare()
        grid = make_grid(market.tenor, self.cfg.sim.steps_per_tenor)
        mode = DriftMode.SECOND_ORDER
        cache = build_cumulant_cache(self.driver, market.vols, market.tenor, mode)

        records = []
        for scheme in (Scheme.PICARD, Scheme.FULL):
            for n in counts:
                sim_cfg = self.sim_config(scheme, mode, n_paths=n)
                seconds = best_of(lambda: simulate(market, self.driver, grid, sim_cfg, cache), repeats)
                record = TimingRecord(scheme=scheme.value, drift_mode=mode.value, n_paths=n,
                                      N=market.n_rates, n_workers=sim_cfg.n_workers, wall_seconds=seconds)
                records.append(record)
                self.callback("timing", record.model_dump())
                self.log("bench", f"{scheme.value} {n} paths: {seconds:.4f}s")

        fits = {}
        if len(set(counts)) >= 2:
            for scheme in (Scheme.PICARD, Scheme.FULL):
                rows = [r for r in records if r.scheme == scheme.value]
                fit = linear_fit(scheme.value, [r.n_paths for r in rows], [r.wall_seconds for r in rows])
                fits[scheme.value] = fit.model_dump()
            ratio = fits["picard"]["slope"] / fits["full"]["slope"] if fits["full"]["slope"] > 0.0 else None
            fits["slope_ratio_picard_full"] = ratio
            self.log("bench", f"Slope ratio Picard/Full = {ratio}")
        checks = path_scaling_checks(fits, self.cfg.sim.n_workers)
        for name, passed in checks.items():
            if passed is False:
                self.log("bench", f"WARNING: check {name} failed")

        summary = {
            "kind": "paths",
            "methodology": f"best of {max(repeats, 1)} wall-clock runs after one discarded warmup",
            "config_hash": config_hash(self.cfg, market),
            "fits": fits,
            "checks": checks,
        }
        return self._write_bench("bench_paths", records, summary)

    def bench_tenor(self, sizes: Sequence[int], repeats: int = 3,
                    modes: Sequence[DriftMode] = (DriftMode.EXACT, DriftMode.SECOND_ORDER),
                    kernel_paths: int = 256) -> BenchReport:
        """
        Drift kernel cost against the number of rates on synthetic markets.

        The cumulant cache and the rate-0 coefficients are built first and only
        logged. The timed call is the rate-0 drift on a batch of states, so
        what grows with N is the 2^(N-1) subset polynomial (exact) or the
        (N-1)^2 expansion. Slopes are fitted to the time per path.
        """
        sizes = [int(n) for n in sizes]
        if not sizes:
            raise ConfigError("bench-tenor needs at least one tenor size")
        if any(n < 1 for n in sizes):
            raise ConfigError(f"tenor sizes must be positive, got {sizes}")
        if kernel_paths < 1:
            raise ConfigError(f"kernel_paths must be positive, got {kernel_paths}")

        self.driver = make_driver(self.cfg.driver.params(), self.cfg.driver.diffusion_c)
        records = []
        refused = []
        for n in sizes:
            market = extend_market(n, self.driver.u_max, self.cfg.driver.eps)
            validate_driver(self.driver, market.vols, self.cfg.driver.eps).raise_if_failed()
            for mode in modes:
                mode = DriftMode(mode)
                batch = kernel_batch(mode, n, kernel_paths)
                state = RateState(values=np.tile(market.libors.values[1:], (batch, 1)),
                                  accruals=market.tenor.accruals[1:])
                t0 = time.perf_counter()
                try:
                    cache = build_cumulant_cache(self.driver, market.vols, market.tenor, mode)
                except NumericalGuardError as e:
                    refused.append({"N": n, "drift_mode": mode.value, "message": str(e)})
                    self.log("bench", f"N={n} {mode.value}: refused ({e})")
                    continue
                drift(mode, 0, 0.0, state, self.driver, market.vols, cache)
                precompute = time.perf_counter() - t0

                seconds = best_of(lambda: drift(mode, 0, 0.0, state, self.driver, market.vols, cache), repeats)
                record = TimingRecord(scheme="drift", drift_mode=mode.value, n_paths=batch, N=n,
                                      n_workers=1, wall_seconds=seconds)
                records.append(record)
                self.callback("timing", record.model_dump())
                self.log("bench", f"N={n} {mode.value}: precompute {precompute:.4f}s, "
                                  f"kernel {seconds / batch:.3e}s per path ({batch} paths)")

        slopes = {}
        for mode in modes:
            rows = [r for r in records if r.drift_mode == DriftMode(mode).value]
            if len({r.N for r in rows}) >= 2:
                per_path = [r.wall_seconds / r.n_paths for r in rows]
                slopes[DriftMode(mode).value] = float(np.polyfit(np.log([r.N for r in rows]), np.log(per_path), 1)[0])
        checks = tenor_scaling_checks(slopes)
        for name, passed in checks.items():
            if passed is False:
                self.log("bench", f"WARNING: check {name} failed (log-log slopes {slopes})")
        summary = {
            "kind": "tenor",
            "methodology": f"rate-0 drift with a prebuilt cache, best of {max(repeats, 1)} runs "
                           f"after one discarded warmup, slopes of log(seconds per path) on log N",
            "loglog_slope": slopes,
            "checks": checks,
            "refused": refused,
        }
        return self._write_bench("bench_tenor", records, summary)

    def _write_bench(self, name: str, records: List[TimingRecord], summary: dict) -> BenchReport:
        out = self.out_dir()
        prefix = self.cfg.output.prefix
        csv_path = out / f"{prefix}_{name}.csv"
        pd.DataFrame([r.model_dump() for r in records], columns=list(TimingRecord.model_fields)).to_csv(csv_path, index=False)
        summary = _clean(summary)
        summary_path = out / f"{prefix}_{name}.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.log("bench", f"{len(records)} timing records -> {csv_path}")
        return BenchReport(csv_path=csv_path, summary_path=summary_path, records=records, summary=summary)


def run_experiment(cfg: ExperimentConfig, callback=None) -> RunReport:
    return ExperimentRunner(cfg, callback).run()


def bench_paths(cfg: ExperimentConfig, counts: Sequence[int], repeats: int = 3, callback=None) -> BenchReport:
    return ExperimentRunner(cfg, callback).bench_paths(counts, repeats)


def bench_tenor(cfg: ExperimentConfig, sizes: Sequence[int], repeats: int = 3, kernel_paths: int = 256,
                callback=None) -> BenchReport:
    return ExperimentRunner(cfg, callback).bench_tenor(sizes, repeats, kernel_paths=kernel_paths)
