"""Monte Carlo evaluation of the parallel LBGM.

Data are generated from a known design (growth factors, jittered individual
measurement times, piecewise-linear trajectories, correlated residuals), fitted,
and summarised per parameter by relative bias, empirical SE, relative RMSE and
Wald-interval coverage.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import Individual, LongitudinalSample, OutcomeSeries
from .estimator import FitOptions, FitResult, FitStatus, fit, wald_ci
from .model import (
    CrossParams,
    ModelSpec,
    OutcomeModelSpec,
    OutcomeParams,
    ParameterSet,
    build_loading_matrix,
    interval_structure,
    rescale_parameters,
)

WAVES_6 = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0)
WAVES_10 = tuple(float(t) for t in range(10))
# taken as listed, including 2.55; its 0.45 gap needs delta < 0.225
WAVES_10_UNEQUAL = (0.0, 0.75, 1.50, 2.55, 3.00, 3.75, 4.50, 6.00, 7.50, 9.00)
# the same grid with a regular 0.75 step up to 4.50
WAVES_10_UNEQUAL_REGULAR = (0.0, 0.75, 1.50, 2.25, 3.00, 3.75, 4.50, 6.00, 7.50, 9.00)
RATES_6_DECREASING = (1.0, 0.8, 0.6, 0.4, 0.2)
RATES_6_INCREASING = (0.2, 0.4, 0.6, 0.8, 1.0)
RATES_10_DECREASING = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2)
RATES_10_INCREASING = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass(frozen=True)
class OutcomeDesign:
    label: str
    mu_eta0: float
    mu_eta1: float
    var_eta0: float
    var_eta1: float
    rho_within: float
    gammas: tuple[float, ...]
    theta_eps: float
    fixed_interval: int = 1
    missing_waves: tuple[int, ...] = ()


@dataclass(frozen=True)
class SimulationDesign:
    n: int
    wave_times: tuple[float, ...]
    outcomes: tuple[OutcomeDesign, ...]
    delta: float = 0.25
    rho_between: float = 0.3
    rho_eps: float = 0.3

    def __post_init__(self):
        gaps = np.diff(self.wave_times)
        if self.delta < 0 or (gaps.size and 2 * self.delta >= gaps.min()):
            raise ValueError("time windows must satisfy 0 <= 2*delta < smallest wave gap")
        if self.n < 1 or len(self.outcomes) not in (1, 2):
            raise ValueError("need n >= 1 and one or two outcomes")
        for o in self.outcomes:
            if len(o.gammas) != len(self.wave_times) - 1:
                raise ValueError(f"outcome {o.label!r}: need one relative rate per interval")
        for r in [self.rho_between, self.rho_eps] + [o.rho_within for o in self.outcomes]:
            if not -1 <= r <= 1:
                raise ValueError("correlations must lie in [-1, 1]")

    @property
    def J(self) -> int:
        return len(self.wave_times)

    def growth_cov(self) -> np.ndarray:
        sds = [s for o in self.outcomes for s in (math.sqrt(o.var_eta0), math.sqrt(o.var_eta1))]
        q = len(sds)
        corr = np.eye(q)
        for u, o in enumerate(self.outcomes):
            corr[2 * u, 2 * u + 1] = corr[2 * u + 1, 2 * u] = o.rho_within
        if q == 4:
            corr[:2, 2:] = corr[2:, :2] = self.rho_between
        return corr * np.outer(sds, sds)

    def residual_cov(self) -> np.ndarray:
        th = np.diag([o.theta_eps for o in self.outcomes])
        if len(self.outcomes) == 2:
            th[0, 1] = th[1, 0] = self.rho_eps * math.sqrt(th[0, 0] * th[1, 1])
        return th

    def model_spec(self, cross_free: bool = True) -> ModelSpec:
        return ModelSpec(tuple(OutcomeModelSpec(o.label, self.J, o.fixed_interval) for o in self.outcomes),
                         cross_free)

    def truth(self) -> ParameterSet:
        """Population parameters expressed under this design's fixed intervals."""
        psi = self.growth_cov()
        th = self.residual_cov()
        outs = tuple(
            OutcomeParams(o.mu_eta0, o.mu_eta1, psi[2 * u, 2 * u], psi[2 * u, 2 * u + 1],
                          psi[2 * u + 1, 2 * u + 1], o.gammas, th[u, u])
            for u, o in enumerate(self.outcomes)
        )
        cross = CrossParams()
        if len(outs) == 2:
            cross = CrossParams(psi[0, 2], psi[0, 3], psi[1, 2], psi[1, 3], th[0, 1])
        raw = ParameterSet(outs, cross)
        # gammas of the design are relative to the shape factor's own interval
        spec = self.model_spec()
        if all(o.gammas[o.fixed_interval - 1] == 1.0 for o in self.outcomes):
            return raw
        return rescale_parameters(raw, spec, spec)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationDesign":
        d = dict(d)
        outs = tuple(
            OutcomeDesign(**{**o, "gammas": tuple(o["gammas"]),
                             "missing_waves": tuple(o.get("missing_waves", ()))})
            for o in d.pop("outcomes")
        )
        return cls(outcomes=outs, wave_times=tuple(d.pop("wave_times")), **d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SimulationDesign":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def benchmark_design(
    n: int = 500,
    wave_times: Sequence[float] = WAVES_10,
    gammas: Sequence[float] | None = None,
    rho_between: float = 0.3,
    theta_eps: float = 1.0,
    fixed_interval: int | str = "first",
    missing_z: Sequence[int] = (),
    delta: float = 0.25,
) -> SimulationDesign:
    """One cell of the factorial design; fixed conditions as in the original study."""
    J = len(wave_times)
    if gammas is None:
        gammas = RATES_10_DECREASING if J == 10 else RATES_6_DECREASING
    if fixed_interval == "first":
        fixed_interval = 1
    elif fixed_interval == "last":
        fixed_interval = J - 1
    common = dict(var_eta0=25.0, var_eta1=1.0, rho_within=0.3, gammas=tuple(gammas),
                  theta_eps=theta_eps, fixed_interval=int(fixed_interval))
    return SimulationDesign(
        n=n,
        wave_times=tuple(wave_times),
        outcomes=(
            OutcomeDesign("y", 50.0, 4.0, **common),
            OutcomeDesign("z", 30.0, 5.0, **common, missing_waves=tuple(missing_z)),
        ),
        rho_between=rho_between,
        delta=delta,
    )


def generate_dataset(design: SimulationDesign, rng: np.random.Generator) -> tuple[LongitudinalSample, ParameterSet]:
    """Draw one sample and return it with the population parameters."""
    psi = design.growth_cov()
    th = design.residual_cov()
    for mat in (psi, th):
        if np.linalg.eigvalsh(mat).min() < -1e-12:
            raise ValueError("design covariance is not positive semi-definite")
    means = np.array([v for o in design.outcomes for v in (o.mu_eta0, o.mu_eta1)])
    n, J, k = design.n, design.J, len(design.outcomes)
    eta = rng.multivariate_normal(means, psi, size=n, method="eigh")
    grid = np.asarray(design.wave_times)
    times = rng.uniform(grid - design.delta, grid + design.delta, size=(n, J))
    eps = rng.multivariate_normal(np.zeros(k), th, size=(n, J), method="eigh")

    inds = []
    width = len(str(n))
    for i in range(n):
        series = []
        for u, o in enumerate(design.outcomes):
            lam = build_loading_matrix(times[i], o.gammas)
            y = lam @ eta[i, 2 * u:2 * u + 2] + eps[i, :, u]
            keep = [j for j in range(J) if j + 1 not in o.missing_waves]
            series.append(OutcomeSeries(
                o.label,
                tuple(j + 1 for j in keep),
                tuple(float(times[i, j]) for j in keep),
                tuple(float(y[j]) for j in keep),
                J,
            ))
        inds.append(Individual(f"{i + 1:0{width}d}", tuple(series)))
    return LongitudinalSample(tuple(inds), tuple(o.label for o in design.outcomes)), design.truth()


# -- performance metrics ------------------------------------------------------

def relative_bias(estimates, truth: float) -> float:
    est = np.asarray(estimates, dtype=float)
    if truth == 0:
        raise ZeroDivisionError("relative bias undefined for a zero population value")
    return float(np.sum(est - truth) / (est.size * truth))


def empirical_se(estimates) -> float:
    est = np.asarray(estimates, dtype=float)
    if est.size < 2:
        raise ValueError("empirical SE needs at least two replications")
    return float(np.sqrt(np.sum((est - est.mean()) ** 2) / (est.size - 1)))


def relative_rmse(estimates, truth: float) -> float:
    est = np.asarray(estimates, dtype=float)
    if truth == 0:
        raise ZeroDivisionError("relative RMSE undefined for a zero population value")
    return float(np.sqrt(np.sum((est - truth) ** 2) / est.size) / truth)


def coverage(intervals, truth: float) -> float:
    iv = np.asarray(intervals, dtype=float).reshape(-1, 2)
    return float(np.mean((iv[:, 0] <= truth) & (truth <= iv[:, 1])))


@dataclass(frozen=True)
class ParameterMetrics:
    parameter: str
    truth: float
    relative_bias: float
    empirical_se: float
    relative_rmse: float
    coverage: float
    # False when truth is 0 and bias/RMSE are reported on the absolute scale
    relative: bool = True


@dataclass(frozen=True)
class MetricReport:
    metrics: tuple[ParameterMetrics, ...]
    S: int
    attempted: int
    converged: int
    retries: int
    capped: bool = False

    @property
    def convergence_rate(self) -> float:
        return self.converged / self.attempted if self.attempted else float("nan")

    def __getitem__(self, name: str) -> ParameterMetrics:
        for m in self.metrics:
            if m.parameter == name:
                return m
        raise KeyError(name)

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(("parameter", "truth", "relative_bias", "empirical_se", "relative_rmse", "coverage"))
            for m in self.metrics:
                w.writerow((m.parameter, repr(m.truth), repr(m.relative_bias), repr(m.empirical_se),
                            repr(m.relative_rmse), repr(m.coverage)))


def summarize(names: Sequence[str], truth: np.ndarray, estimates: np.ndarray,
              intervals: np.ndarray) -> tuple[ParameterMetrics, ...]:
    """Table of metrics; ``estimates`` is (S, k) and ``intervals`` (S, k, 2)."""
    out = []
    S = estimates.shape[0]
    for j, name in enumerate(names):
        est, th = estimates[:, j], float(truth[j])
        esd = empirical_se(est) if S >= 2 else float("nan")
        if th != 0:
            rb, rr, rel = relative_bias(est, th), relative_rmse(est, th), True
        else:
            rb, rr, rel = float(np.mean(est)), float(np.sqrt(np.mean(est ** 2))), False
        out.append(ParameterMetrics(name, th, rb, esd, rr, coverage(intervals[:, j], th), rel))
    return tuple(out)


# -- the study driver ---------------------------------------------------------

@dataclass(frozen=True)
class Replication:
    attempt: int
    status: str
    retries: int
    estimates: np.ndarray = field(repr=False)
    se: np.ndarray = field(repr=False)
    intervals: np.ndarray = field(repr=False)

    @property
    def converged(self) -> bool:
        return self.status in (FitStatus.CONVERGED.value, FitStatus.BOUNDARY_PSD.value)


def replication_rng(seed: int, attempt: int) -> np.random.Generator:
    """Independent stream for attempt ``attempt`` of a study seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(attempt,)))


def truth_vector(design: SimulationDesign, spec: ModelSpec, sample: LongitudinalSample,
                 names: Sequence[str]) -> np.ndarray:
    """Population values aligned with the fitted parameter names.

    For relative rates tied over merged intervals the population value is
    the length-weighted mean of the spanned rates. When an outcome is never
    observed at wave 1 its initial status is that at its first observed wave,
    so intercept moments are carried forward along the grid.
    """
    truth = design.truth()
    vals = {}
    grid = np.asarray(design.wave_times)
    lengths = np.diff(grid)
    U = len(truth.outcomes)
    shift = np.eye(2 * U)
    mean = np.zeros(2 * U)
    for u, (o, p) in enumerate(zip(spec.outcomes, truth.outcomes)):
        first = min(sample.observed_waves(o.label))
        shift[2 * u, 2 * u + 1] = float(np.sum(np.asarray(p.gamma)[: first - 1] * lengths[: first - 1]))
        mean[2 * u: 2 * u + 2] = p.mu_eta0, p.mu_eta1
    mean = shift @ mean
    psi = np.zeros((2 * U, 2 * U))
    for u, p in enumerate(truth.outcomes):
        psi[2 * u: 2 * u + 2, 2 * u: 2 * u + 2] = [[p.psi00, p.psi01], [p.psi01, p.psi11]]
    if U == 2:
        c = truth.cross
        psi[0:2, 2:4] = [[c.psi00, c.psi01], [c.psi10, c.psi11]]
        psi[2:4, 0:2] = psi[0:2, 2:4].T
    psi = shift @ psi @ shift.T
    for u, (o, p) in enumerate(zip(spec.outcomes, truth.outcomes)):
        i = 2 * u
        vals.update({f"{o.label}.mu_eta0": mean[i], f"{o.label}.mu_eta1": mean[i + 1],
                     f"{o.label}.psi00": psi[i, i], f"{o.label}.psi01": psi[i, i + 1],
                     f"{o.label}.psi11": psi[i + 1, i + 1], f"{o.label}.theta_eps": p.theta_eps})
        st = interval_structure(o, sample.observed_waves(o.label))
        g = np.asarray(p.gamma)
        for grp in st.free_groups:
            idx = np.asarray(grp) - 1
            name = f"{o.label}.gamma{grp[0]}" if len(grp) == 1 else f"{o.label}.gamma{grp[0]}-{grp[-1]}"
            vals[name] = float(np.sum(g[idx] * lengths[idx]) / np.sum(lengths[idx]))
    if U == 2:
        vals.update({"cross.psi00": psi[0, 2], "cross.psi01": psi[0, 3], "cross.psi10": psi[1, 2],
                     "cross.psi11": psi[1, 3], "cross.theta_eps": truth.cross.theta_eps})
    return np.array([vals[n] for n in names])


def run_replication(design: SimulationDesign, options: FitOptions, seed: int, attempt: int,
                    level: float = 0.95) -> tuple[Replication, tuple[str, ...], np.ndarray]:
    rng = replication_rng(seed, attempt)
    sample, _ = generate_dataset(design, rng)
    spec = design.model_spec()
    opts = replace(options, rng_seed=int(rng.integers(2**31)))
    try:
        res = fit(sample, spec, opts)
    except Exception:  # a failed attempt is counted and replaced, never fatal
        return Replication(attempt, "Failed", opts.max_retries, np.array([]), np.array([]),
                           np.zeros((0, 2))), (), np.array([])
    cis = wald_ci(res, level)
    iv = np.array([cis[nm] for nm in res.names])
    rep = Replication(attempt, res.status.value, res.retries, res.theta.copy(), res.se.copy(), iv)
    return rep, res.names, truth_vector(design, spec, sample, res.names)


def _run_one(args):
    return run_replication(*args)


class NoConvergedReplication(RuntimeError):
    """Raised when the attempt cap is reached without a single converged fit."""


def run_study(
    design: SimulationDesign,
    S: int,
    options: FitOptions | None = None,
    rng_seed: int = 0,
    executor: Executor | None = None,
    level: float = 0.95,
    runner: Callable | None = None,
) -> tuple[MetricReport, list[Replication], tuple[str, ...]]:
    """Fit replications until ``S`` converge (at most ``3 * S`` attempts).

    Attempt ``a`` always uses the random stream derived from ``(rng_seed, a)``
    and the first ``S`` converged attempts by index are kept, so a concurrent
    run reproduces a serial one exactly. ``runner`` replaces
    :func:`run_replication` (used to test the aggregation).
    """
    if S < 1:
        raise ValueError("S must be at least 1")
    options = options or FitOptions()
    runner = runner or run_replication
    cap = 3 * S
    done: list[tuple] = []
    next_attempt = 0
    while next_attempt < cap:
        need = S - sum(r[0].converged for r in done)
        if need <= 0:
            break
        batch = list(range(next_attempt, min(next_attempt + need, cap)))
        next_attempt = batch[-1] + 1
        jobs = [(design, options, rng_seed, a, level) for a in batch]
        if executor is None or runner is not run_replication:
            done.extend(runner(*job) for job in jobs)
        else:
            done.extend(executor.map(_run_one, jobs))

    reps = [r[0] for r in done]
    ok = [r for r in done if r[0].converged][:S]
    if not ok:
        raise NoConvergedReplication(f"none of {len(reps)} attempts converged")
    names = ok[0][1]
    truth = ok[0][2]
    estimates = np.stack([r[0].estimates for r in ok])
    intervals = np.stack([r[0].intervals for r in ok])
    report = MetricReport(
        metrics=summarize(names, truth, estimates, intervals),
        S=len(ok),
        attempted=len(done),
        converged=sum(r.converged for r in reps),
        retries=sum(r.retries for r in reps),
        capped=len(ok) < S,
    )
    return report, reps, names


def write_replications(reps: Sequence[Replication], names: Sequence[str], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["attempt", "status", "retries"] + [f"{n}" for n in names] + [f"se:{n}" for n in names])
        for r in reps:
            if r.estimates.size:
                row = [repr(float(v)) for v in r.estimates] + [repr(float(v)) for v in r.se]
            else:
                row = [""] * (2 * len(names))
            w.writerow([r.attempt, r.status, r.retries] + row)
