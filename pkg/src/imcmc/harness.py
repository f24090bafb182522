"""Replicated-simulation verification of the fluctuation theory.

The harness runs many independent replicates of the engine, evaluates
the fluctuation fields ``U_n^(k)(f) = sqrt(n+1) (eta_n^(k)(f) -
pi_k(f))`` at chosen checkpoints, and compares their empirical second
moments against the oracle.

Acceptance bands
----------------
The sampling error of a variance estimate over ``R`` replicates of an
(approximately Gaussian) field is ``SE = v * sqrt(2 / (R-1))``; the
estimate itself carries a finite-horizon bias whose shape is
``(log(n+1))^k / sqrt(n+1)`` at level ``k``.  A comparison passes when

    |empirical - theory| <= 3 * SE + c_bias * (log(n+1))^k / sqrt(n+1) * scale

with ``scale`` the theory value (variances) or the geometric mean of the
two theory variances (covariances) and ``c_bias = 1`` by default.  The
right response to a failure at small ``n`` is a larger ``n``, not a
larger ``c_bias``.  Normality diagnostics (skewness, excess kurtosis,
Kolmogorov-Smirnov distance after studentization) are informational.

Iterated Cesaro weights
-----------------------
The variance coefficients ``(2k)!/k!^2`` are the limits of the
normalized squares of the weight arrays built by the recursion
``s^(k+1)_n(p) = sum_{q=p..n} s^(k)_n(q) / (q+1)`` from ``s^(1) = 1``;
:func:`weight_limit_check` reproduces them numerically.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import oracle
from .engine import EngineConfig, run_batch
from .measures import TestFunction
from .reporting import read_csv, write_csv

DEFAULT_C_BIAS = 1.0
DEFAULT_CHUNK = 256


# ---------------------------------------------------------------------------
# Weight arrays
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WeightArray:
    """Iterated Cesaro weights of one order over horizon ``n``."""

    order: int
    horizon: int
    values: np.ndarray
    normalized: np.ndarray

    def __post_init__(self):
        self.values.setflags(write=False)
        self.normalized.setflags(write=False)


def s_weights(k: int, n: int) -> WeightArray:
    """Order-`k` weight array over ``p = 0 .. n`` by reverse cumulative sums."""
    if k < 1:
        raise ValueError(f"order must be >= 1, got {k}")
    if n < 0:
        raise ValueError(f"horizon must be >= 0, got {n}")
    values = np.ones(n + 1)
    inv = 1.0 / np.arange(1, n + 2)
    for _ in range(k - 1):
        values = np.cumsum((values * inv)[::-1])[::-1]
    norm = math.sqrt(float((values**2).sum()))
    return WeightArray(order=k, horizon=n, values=values, normalized=values / norm)


def weight_limit_check(k: int, n: int) -> float:
    """``(1/n) sum_q s^(k+1)_n(q)^2``, which converges to ``(2k)!/k!^2``."""
    if k < 1:
        raise ValueError(f"order must be >= 1, got {k}")
    arr = s_weights(k + 1, n)
    return float((arr.values**2).sum() / n)


def weight_overlap_check(a: int, b: int, n: int) -> float:
    """``(1/n) sum_p s^(a)_n(p) s^(b)_n(p)`` for two different orders.

    Converges to ``(a+b-2)!/((a-1)!(b-1)!)``, the coefficient carried by
    shared fluctuation levels in cross-level covariances.
    """
    return float((s_weights(a, n).values * s_weights(b, n).values).sum() / n)


def weight_limit_table(k_max: int, n: int) -> list[tuple[int, int, float, float, float]]:
    """Rows ``(k, n, partial sum, limit, relative error)`` for ``k = 1 .. k_max``."""
    if k_max > 6:
        raise ValueError("orders above 6 are outside the supported table range")
    rows = []
    for k in range(1, k_max + 1):
        val = weight_limit_check(k, n)
        lim = oracle.coefficient_sq(k)
        rows.append((k, n, val, lim, abs(val - lim) / lim))
    return rows


# ---------------------------------------------------------------------------
# Replicated fluctuation samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleColumn:
    level: int
    function: str
    n: int


@dataclass(frozen=True, eq=False)
class FluctuationSamples:
    """Fluctuation-field values, one row per replicate."""

    columns: tuple[SampleColumn, ...]
    values: np.ndarray  # (R, len(columns))
    replicates: tuple[int, ...]

    def column(self, level: int, function: str, n: int) -> np.ndarray:
        for i, c in enumerate(self.columns):
            if c == SampleColumn(level, function, n):
                return self.values[:, i]
        raise KeyError(f"no column for level={level} function={function!r} n={n}")

    def to_csv(self, fh, metadata: dict | None = None) -> None:
        header = ["replicate"] + [f"{c.level}:{c.function}:{c.n}" for c in self.columns]
        rows = (
            [r, *map(float, self.values[i])] for i, r in enumerate(self.replicates)
        )
        write_csv(fh, header, rows, metadata)


def run_replicates(
    config: EngineConfig,
    R: int,
    functions,
    checkpoints,
    pis,
    *,
    workers: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> FluctuationSamples:
    """Evaluate the fluctuation fields over `R` independent replicates.

    `functions` lists, per level, pairs ``(name, TestFunction)``; `pis`
    are the limit measures per level.  Replicates are split into chunks
    run in lockstep; chunks may execute on a thread pool (`workers`),
    and the result is a deterministic function of the seed alone.
    """
    if R < 2:
        raise ValueError(f"need at least 2 replicates, got {R}")
    checkpoints = sorted(set(int(n) for n in checkpoints))
    columns = tuple(
        SampleColumn(k, name, n)
        for k in range(config.levels + 1)
        for (name, _f) in functions[k]
        for n in checkpoints
    )
    chunks = [range(lo, min(lo + chunk, R)) for lo in range(0, R, chunk)]

    def run_chunk(ids):
        res = run_batch(config, ids, checkpoints=checkpoints, keep_history=False)
        out = np.empty((len(ids), len(columns)))
        i = 0
        for k in range(config.levels + 1):
            pk = pis[k].weights
            for name, f in functions[k]:
                ref = float(pk @ f.values)
                for n in checkpoints:
                    counts = res.checkpoint_counts[n][k]
                    emp = (counts @ f.values) / (n + 1)
                    out[:, i] = math.sqrt(n + 1) * (emp - ref)
                    i += 1
        return out

    if workers is not None and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run_chunk, chunks))
    else:
        parts = [run_chunk(ids) for ids in chunks]
    values = np.vstack(parts)
    return FluctuationSamples(
        columns=columns, values=values, replicates=tuple(range(R))
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceRow:
    level: int
    function: str
    n: int
    replicates: int
    var_theory: float
    var_empirical: float
    se: float
    z: float
    skew: float
    exkurt: float
    ks_stat: float
    degenerate: bool
    passed: bool


@dataclass(frozen=True)
class CovarianceRow:
    level_a: int
    function_a: str
    level_b: int
    function_b: str
    n: int
    replicates: int
    cov_theory: float
    cov_empirical: float
    se: float
    z: float
    passed: bool


@dataclass(frozen=True, eq=False)
class FluctuationReport:
    """Theory-vs-simulation comparison for every field and field pair."""

    replicates: int
    horizon: int
    variance_rows: tuple[VarianceRow, ...]
    covariance_rows: tuple[CovarianceRow, ...] = field(default=())

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.variance_rows) and all(
            r.passed for r in self.covariance_rows
        )

    def to_csv(self, fh, metadata: dict | None = None) -> None:
        header = [
            "level", "function", "n", "R", "var_theory", "var_empirical",
            "se", "z", "skew", "exkurt", "ks_stat", "degenerate", "pass",
        ]
        rows = [
            [
                r.level, r.function, r.n, r.replicates, r.var_theory,
                r.var_empirical, r.se, r.z, r.skew, r.exkurt, r.ks_stat,
                r.degenerate, r.passed,
            ]
            for r in self.variance_rows
        ]
        meta = {"replicates": self.replicates, "horizon": self.horizon}
        meta.update(metadata or {})
        write_csv(fh, header, rows, meta)

    @staticmethod
    def from_csv(fh) -> "FluctuationReport":
        header, rows, meta = read_csv(fh)
        variance_rows = tuple(
            VarianceRow(
                level=int(r[0]), function=r[1], n=int(r[2]), replicates=int(r[3]),
                var_theory=float(r[4]), var_empirical=float(r[5]), se=float(r[6]),
                z=float(r[7]), skew=float(r[8]), exkurt=float(r[9]),
                ks_stat=float(r[10]), degenerate=(r[11] == "true"),
                passed=(r[12] == "true"),
            )
            for r in rows
        )
        return FluctuationReport(
            replicates=int(meta.get("replicates", 0)),
            horizon=int(meta.get("horizon", 0)),
            variance_rows=variance_rows,
        )


def bias_allowance(n: int, k: int, c_bias: float = DEFAULT_C_BIAS) -> float:
    """Finite-horizon allowance factor ``c * (log(n+1))^k / sqrt(n+1)``."""
    return c_bias * math.log(n + 1) ** k / math.sqrt(n + 1)


def empirical_fluctuations(
    samples: FluctuationSamples,
    theory: dict[SampleColumn, float] | None = None,
    *,
    theory_cross: dict[tuple[SampleColumn, SampleColumn], float] | None = None,
    c_bias: float = DEFAULT_C_BIAS,
) -> FluctuationReport:
    """Summarize replicate samples, optionally against theoretical moments.

    Without `theory`, rows carry NaN theory values and pass vacuously;
    with it, the acceptance band is ``3 SE`` plus the bias allowance.
    Normality statistics need around 30 replicates to mean anything;
    they are reported regardless and never gate.
    """
    R = samples.values.shape[0]
    if R < 2:
        raise ValueError("need at least 2 replicates")
    var_rows = []
    for i, col in enumerate(samples.columns):
        x = samples.values[:, i]
        emp = float(x.var(ddof=1))
        degenerate = emp == 0.0
        skew = exkurt = ks = float("nan")
        if not degenerate and R >= 3:
            z = (x - x.mean()) / x.std(ddof=1)
            skew = float(stats.skew(z))
            exkurt = float(stats.kurtosis(z))
            ks = float(stats.kstest(z, "norm").statistic)
        if theory is not None and col in theory:
            th = theory[col]
            se = abs(th) * math.sqrt(2.0 / (R - 1))
            band = 3.0 * se + bias_allowance(col.n, col.level, c_bias) * abs(th)
            zscore = (emp - th) / se if se > 0 else float("inf")
            passed = abs(emp - th) <= band and not degenerate
        else:
            th, se, zscore, passed = float("nan"), float("nan"), float("nan"), True
        var_rows.append(
            VarianceRow(
                level=col.level, function=col.function, n=col.n, replicates=R,
                var_theory=th, var_empirical=emp, se=se, z=zscore, skew=skew,
                exkurt=exkurt, ks_stat=ks, degenerate=degenerate, passed=passed,
            )
        )

    cov_rows = []
    if theory_cross:
        index = {c: i for i, c in enumerate(samples.columns)}
        for (ca, cb), th in theory_cross.items():
            xa, xb = samples.values[:, index[ca]], samples.values[:, index[cb]]
            emp = float(np.cov(xa, xb, ddof=1)[0, 1])
            va = theory[ca] if theory and ca in theory else float(xa.var(ddof=1))
            vb = theory[cb] if theory and cb in theory else float(xb.var(ddof=1))
            se = math.sqrt(max(va * vb + th * th, 0.0) / (R - 1))
            scale = math.sqrt(max(va * vb, 0.0))
            k_eff = max(ca.level, cb.level)
            band = 3.0 * se + bias_allowance(max(ca.n, cb.n), k_eff, c_bias) * scale
            zscore = (emp - th) / se if se > 0 else float("inf")
            cov_rows.append(
                CovarianceRow(
                    level_a=ca.level, function_a=ca.function, level_b=cb.level,
                    function_b=cb.function, n=max(ca.n, cb.n), replicates=R,
                    cov_theory=th, cov_empirical=emp, se=se, z=zscore,
                    passed=abs(emp - th) <= band,
                )
            )
    return FluctuationReport(
        replicates=R,
        horizon=max((c.n for c in samples.columns), default=0),
        variance_rows=tuple(var_rows),
        covariance_rows=tuple(cov_rows),
    )


def verify_theorem(
    config: EngineConfig,
    R: int,
    functions,
    n: int,
    *,
    checkpoints=None,
    c_bias: float = DEFAULT_C_BIAS,
    inject_variance_error: bool = False,
    workers: int | None = None,
    chunk: int = DEFAULT_CHUNK,
    return_samples: bool = False,
):
    """Full pipeline: oracle moments, replicated simulation, comparison.

    `functions` lists per level the named test functions to check.  The
    final checkpoint `n` gates the result; earlier checkpoints (default
    ``{1000, 10000} & [0, n]``) are reported without theory so
    convergence trends are visible in one run.  With
    `inject_variance_error` the theoretical variances are doubled -- a
    self-test that the comparison has power to fail.
    """
    spec = oracle.build_clt_spec(config.model, config.levels)
    if checkpoints is None:
        checkpoints = sorted({m for m in (1000, 10000) if m < n} | {n})
    else:
        checkpoints = sorted(set(int(m) for m in checkpoints) | {n})
    samples = run_replicates(
        config, R, functions, checkpoints, spec.pis, workers=workers, chunk=chunk
    )

    theory: dict[SampleColumn, float] = {}
    fn_by_col: dict[SampleColumn, TestFunction] = {}
    for k in range(config.levels + 1):
        for name, f in functions[k]:
            v = oracle.asymptotic_variance(spec, k, f)
            if inject_variance_error:
                v *= 2.0
            col = SampleColumn(k, name, n)
            theory[col] = v
            fn_by_col[col] = f

    theory_cross: dict[tuple[SampleColumn, SampleColumn], float] = {}
    cols = [c for c in samples.columns if c.n == n]
    for i, ca in enumerate(cols):
        for cb in cols[i + 1 :]:
            cov = oracle.asymptotic_cross_covariance(
                spec, ca.level, cb.level, fn_by_col[ca], fn_by_col[cb]
            )
            if inject_variance_error:
                cov *= 2.0
            theory_cross[(ca, cb)] = cov

    report = empirical_fluctuations(
        samples, theory, theory_cross=theory_cross, c_bias=c_bias
    )
    return (report, samples) if return_samples else report
