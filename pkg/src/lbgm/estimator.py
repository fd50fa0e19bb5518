"""Full-information maximum likelihood for (parallel) latent basis growth models.

Each individual contributes the multivariate normal deviance of the entries
they actually have, so differing measurement times and missing waves need no
special handling. Individuals sharing a missingness pattern are evaluated as
one batch, and the deviance gradient is computed analytically.

The search runs over an unconstrained vector (means, free relative rates and
log-diagonal Cholesky factors of both covariance blocks). Standard errors come
from the Hessian in the natural parameterization.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .data import LongitudinalSample, validate
from .model import (
    CrossParams,
    IntervalStructure,
    ModelSpec,
    OutcomeParams,
    ParameterSet,
    interval_structure,
    loading_weights,
)

log = logging.getLogger(__name__)

# relative noise level of a deviance evaluation (sums over many individuals)
ROUNDING = 1e-12
LOG_2PI = math.log(2.0 * math.pi)
OUTCOME_FIELDS = ("mu_eta0", "mu_eta1", "psi00", "psi01", "psi11")
CROSS_FIELDS = ("psi00", "psi01", "psi10", "psi11", "theta_eps")


class EstimationError(RuntimeError):
    pass


class NotPositiveDefiniteError(EstimationError):
    def __init__(self, individual: str):
        super().__init__(f"implied covariance is not positive definite for individual {individual!r}")
        self.individual = individual


class FitStatus(str, enum.Enum):
    CONVERGED = "Converged"
    RETRIES_EXHAUSTED = "RetriesExhausted"
    BOUNDARY_PSD = "BoundaryPSD"


@dataclass(frozen=True)
class FitOptions:
    max_retries: int = 10
    deviance_tol: float = 1e-9
    gradient_tol: float = 1e-4
    max_iterations: int = 2000
    jitter_scale: float = 0.2
    rng_seed: int | None = 0
    boundary_tol: float = 1e-6
    newton_steps: int = 4

    def __post_init__(self):
        for name in ("deviance_tol", "gradient_tol", "jitter_scale", "boundary_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_retries < 0 or self.max_iterations < 1:
            raise ValueError("max_retries must be >= 0 and max_iterations >= 1")


class ParameterLayout:
    """Maps between ``ParameterSet``, the natural vector and the search vector.

    The natural vector lists, per outcome, ``mu_eta0, mu_eta1, psi00, psi01,
    psi11``, one entry per free relative-rate group and ``theta_eps``, then the
    five between-construct terms when they are estimated.
    """

    def __init__(self, spec: ModelSpec, structures: Sequence[IntervalStructure]):
        self.spec = spec
        self.structures = tuple(structures)
        self.q = 2 * len(spec.outcomes)
        self.cross = spec.parallel and spec.cross_free
        names: list[str] = []
        self._slices = []
        for o, st in zip(spec.outcomes, self.structures):
            start = len(names)
            names += [f"{o.label}.{f}" for f in OUTCOME_FIELDS]
            for g in st.free_groups:
                names.append(f"{o.label}.gamma{g[0]}" if len(g) == 1 else f"{o.label}.gamma{g[0]}-{g[-1]}")
            names.append(f"{o.label}.theta_eps")
            self._slices.append(slice(start, len(names)))
        if self.cross:
            names += [f"cross.{f}" for f in CROSS_FIELDS]
        self.names = tuple(names)
        self._index = {n: i for i, n in enumerate(names)}

        # search vector: means, free rates, Cholesky factor entries
        self.n_free_gamma = [len(st.free_groups) for st in self.structures]
        if self.cross or not spec.parallel:
            self._psi_blocks = [list(range(self.q))]
            self._th_blocks = [list(range(len(spec.outcomes)))]
        else:
            self._psi_blocks = [[0, 1], [2, 3]]
            self._th_blocks = [[0], [1]]
        self.n_search = (
            self.q + sum(self.n_free_gamma)
            + sum(len(b) * (len(b) + 1) // 2 for b in self._psi_blocks)
            + sum(len(b) * (len(b) + 1) // 2 for b in self._th_blocks)
        )

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self._index[name]

    def gamma_index(self, u: int, interval: int) -> int | None:
        """Natural-vector position of the rate of ``interval`` (None if fixed or unidentified)."""
        st = self.structures[u]
        for gi, g in enumerate(st.free_groups):
            if interval in g:
                return self._slices[u].start + len(OUTCOME_FIELDS) + gi
        return None

    def to_params(self, theta: np.ndarray) -> ParameterSet:
        outs = []
        for u, (sl, st) in enumerate(zip(self._slices, self.structures)):
            v = theta[sl]
            nf = self.n_free_gamma[u]
            outs.append(OutcomeParams(
                *(float(x) for x in v[:5]),
                gamma=st.expand(v[5:5 + nf]),
                theta_eps=float(v[5 + nf]),
            ))
        cross = CrossParams(*(float(x) for x in theta[-5:])) if self.cross else CrossParams()
        return ParameterSet(tuple(outs), cross)

    def from_params(self, params: ParameterSet) -> np.ndarray:
        theta = []
        for p, st in zip(params.outcomes, self.structures):
            theta += [getattr(p, f) for f in OUTCOME_FIELDS]
            theta += [p.gamma[g[0] - 1] for g in st.free_groups]
            theta.append(p.theta_eps)
        if self.cross:
            theta += [getattr(params.cross, f) for f in CROSS_FIELDS]
        return np.asarray(theta, dtype=float)

    # -- pieces used by the likelihood ---------------------------------------
    def unpack(self, theta: np.ndarray):
        """Natural vector -> (means, joint psi, residual cov, full rate vectors)."""
        params = self.to_params(theta)
        gammas = [np.nan_to_num(np.asarray(p.gamma)) for p in params.outcomes]
        return params.growth_means(), params.growth_cov(), params.residual_cov(), gammas

    def natural_gradient(self, gm, gpsi, gth, ggam) -> np.ndarray:
        """Collect full-matrix gradient pieces into the natural-vector gradient."""
        g = np.zeros(len(self))
        for u, (sl, st) in enumerate(zip(self._slices, self.structures)):
            a = 2 * u
            s = sl.start
            g[s:s + 5] = [gm[a], gm[a + 1], gpsi[a, a], 2 * gpsi[a, a + 1], gpsi[a + 1, a + 1]]
            for gi, grp in enumerate(st.free_groups):
                g[s + 5 + gi] = sum(ggam[u][k - 1] for k in grp)
            g[sl.stop - 1] = gth[u, u]
        if self.cross:
            g[-5:] = [2 * gpsi[0, 2], 2 * gpsi[0, 3], 2 * gpsi[1, 2], 2 * gpsi[1, 3], 2 * gth[0, 1]]
        return g

    # -- unconstrained search space -----------------------------------------
    def _split_search(self, x: np.ndarray):
        pos = self.q
        means = x[:self.q]
        frees = []
        for nf in self.n_free_gamma:
            frees.append(x[pos:pos + nf])
            pos += nf
        facs = []
        for blocks in (self._psi_blocks, self._th_blocks):
            out = []
            for b in blocks:
                d = len(b)
                L = np.zeros((d, d))
                L[np.tril_indices(d)] = x[pos:pos + d * (d + 1) // 2]
                pos += d * (d + 1) // 2
                L[np.diag_indices(d)] = np.exp(np.diag(L))
                out.append(L)
            facs.append(out)
        return means, frees, facs[0], facs[1]

    def search_to_natural(self, x: np.ndarray) -> np.ndarray:
        means, frees, psi_f, th_f = self._split_search(x)
        psi = np.zeros((self.q, self.q))
        for b, L in zip(self._psi_blocks, psi_f):
            psi[np.ix_(b, b)] = L @ L.T
        k = len(self.spec.outcomes)
        th = np.zeros((k, k))
        for b, L in zip(self._th_blocks, th_f):
            th[np.ix_(b, b)] = L @ L.T
        theta = []
        for u in range(k):
            a = 2 * u
            theta += [means[a], means[a + 1], psi[a, a], psi[a, a + 1], psi[a + 1, a + 1]]
            theta += list(frees[u])
            theta.append(th[u, u])
        if self.cross:
            theta += [psi[0, 2], psi[0, 3], psi[1, 2], psi[1, 3], th[0, 1]]
        return np.asarray(theta, dtype=float)

    def natural_to_search(self, theta: np.ndarray) -> np.ndarray:
        means, psi, th, _ = self.unpack(theta)
        x = list(means)
        for u, st in enumerate(self.structures):
            sl = self._slices[u]
            x += list(theta[sl][5:5 + self.n_free_gamma[u]])
        for blocks, mat in ((self._psi_blocks, psi), (self._th_blocks, th)):
            for b in blocks:
                L = np.linalg.cholesky(mat[np.ix_(b, b)])
                L[np.diag_indices(len(b))] = np.log(np.diag(L))
                x += list(L[np.tril_indices(len(b))])
        return np.asarray(x, dtype=float)

    def search_gradient(self, x: np.ndarray, gm, gpsi, gth, ggam) -> np.ndarray:
        _, _, psi_f, th_f = self._split_search(x)
        g = list(gm)
        for u, st in enumerate(self.structures):
            g += [sum(ggam[u][k - 1] for k in grp) for grp in st.free_groups]
        for blocks, facs, gmat in ((self._psi_blocks, psi_f, gpsi), (self._th_blocks, th_f, gth)):
            for b, L in zip(blocks, facs):
                gb = gmat[np.ix_(b, b)]
                gL = 2.0 * (0.5 * (gb + gb.T)) @ L
                gL[np.diag_indices(len(b))] *= np.diag(L)
                g += list(gL[np.tril_indices(len(b))])
        return np.asarray(g, dtype=float)


@dataclass
class _Batch:
    ids: list[str]
    X: np.ndarray  # (m, p)
    rows: list[np.ndarray]  # per outcome, entry positions
    W: list[np.ndarray]  # per outcome, (m, p_u, J_u - 1)
    pairs: np.ndarray  # (n_pairs, 2) entry positions sharing a wave across outcomes


class _Problem:
    """Sample pre-processed for repeated deviance evaluation."""

    def __init__(self, spec: ModelSpec, sample: LongitudinalSample):
        missing = [lab for lab in spec.labels if lab not in sample.outcome_labels]
        if missing:
            raise EstimationError(f"outcome(s) not in data: {', '.join(missing)}")
        self.spec = spec
        self.sample = sample
        self.n = sample.n
        self.structures = [interval_structure(o, sample.observed_waves(o.label)) for o in spec.outcomes]
        self.layout = ParameterLayout(spec, self.structures)
        patterns: dict[tuple, list] = {}
        # canonical order so that deviance does not depend on input order
        for ind in sorted(sample.individuals, key=lambda i: i.id):
            series = [ind.series_for(lab) for lab in spec.labels]
            key = tuple(s.waves for s in series)
            patterns.setdefault(key, []).append((ind.id, series))
        self.batches = []
        for key in sorted(patterns):
            members = patterns[key]
            sizes = [len(w) for w in key]
            offsets = np.cumsum([0] + sizes)
            rows = [np.arange(offsets[u], offsets[u + 1]) for u in range(len(sizes))]
            X = np.array([[v for s in series for v in s.values] for _, series in members])
            W = [
                np.stack([loading_weights(series[u].times, series[u].waves, o.J) for _, series in members])
                for u, o in enumerate(spec.outcomes)
            ]
            pairs = []
            if len(key) == 2:
                zpos = {w: offsets[1] + j for j, w in enumerate(key[1])}
                pairs = [(j, zpos[w]) for j, w in enumerate(key[0]) if w in zpos]
            self.batches.append(_Batch([m[0] for m in members], X, rows, W,
                                       np.asarray(pairs, dtype=int).reshape(-1, 2)))

    def _design(self, b: _Batch, psi, th, gammas):
        m, p = b.X.shape
        lam = np.zeros((m, p, self.layout.q))
        for u, (rows, W) in enumerate(zip(b.rows, b.W)):
            lam[:, rows, 2 * u] = 1.0
            lam[:, rows, 2 * u + 1] = W @ gammas[u]
        R = np.zeros((p, p))
        for u, rows in enumerate(b.rows):
            R[rows, rows] = th[u, u]
        if len(b.pairs):
            R[b.pairs[:, 0], b.pairs[:, 1]] = th[0, 1]
            R[b.pairs[:, 1], b.pairs[:, 0]] = th[0, 1]
        return lam, R

    @staticmethod
    def _solve_woodbury(lam, R, psi, r):
        """Sigma = R + lam psi lam' handled through q x q systems only (psi PSD, R PD)."""
        Rinv = np.linalg.inv(R)
        B = Rinv @ lam  # (m, p, q)
        lamT = lam.transpose(0, 2, 1)
        M = lamT @ B  # lam' R^-1 lam
        q = psi.shape[0]
        A = np.eye(q) + psi @ M
        sign, logdet_a = np.linalg.slogdet(A)
        K = np.linalg.solve(A, np.broadcast_to(psi, A.shape))  # (psi^-1 + M)^-1
        sR, logdet_r = np.linalg.slogdet(R)
        if sR <= 0 or np.any(sign <= 0):
            raise np.linalg.LinAlgError("not positive definite")
        logdet = logdet_r + logdet_a
        BK = B @ K
        s = r @ Rinv
        a = s - (BK @ (lamT @ s[:, :, None]))[:, :, 0]
        sinv_lam = B - BK @ M
        diag = np.diagonal(Rinv)[None, :] - np.einsum("ipq,ipq->ip", BK, B)
        return logdet, a, sinv_lam, diag, (Rinv, BK, B)

    @staticmethod
    def _solve_direct(lam, R, psi, r):
        sigma = lam @ psi @ lam.transpose(0, 2, 1) + R
        chol = np.linalg.cholesky(sigma)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        sinv = np.linalg.inv(sigma)
        a = (sinv @ r[:, :, None])[:, :, 0]
        return logdet, a, sinv @ lam, np.diagonal(sinv, axis1=1, axis2=2), sinv

    def evaluate(self, theta: np.ndarray, grad: bool = False):
        """Deviance (and full-matrix gradient pieces) at natural vector ``theta``.

        Raises ``NotPositiveDefiniteError`` when some implied covariance is not
        positive definite.
        """
        means, psi, th, gammas = self.layout.unpack(theta)
        fast = np.linalg.eigvalsh(psi).min() >= 0 and np.linalg.eigvalsh(th).min() > 0
        dev = 0.0
        q = self.layout.q
        gm = np.zeros(q)
        gpsi = np.zeros((q, q))
        gth = np.zeros_like(th)
        ggam = [np.zeros(o.J - 1) for o in self.spec.outcomes]
        for b in self.batches:
            lam, R = self._design(b, psi, th, gammas)
            m, p = b.X.shape
            r = b.X - lam @ means
            try:
                solver = self._solve_woodbury if fast else self._solve_direct
                logdet, a, sinv_lam, diag, extra = solver(lam, R, psi, r)
            except np.linalg.LinAlgError:
                raise NotPositiveDefiniteError(self._first_bad(b, lam, R, psi)) from None
            dev += m * p * LOG_2PI + logdet.sum() + np.einsum("ip,ip->", r, a)
            if not grad:
                continue
            lam_a = np.einsum("ipq,ip->iq", lam, a)
            # G = Sigma^-1 - a a'; only G @ lam, lam' G lam and parts of diag/pairs are needed
            GL = sinv_lam - a[:, :, None] * lam_a[:, None, :]
            gpsi += np.einsum("ipq,ipr->qr", lam, GL)
            gm -= 2.0 * lam_a.sum(axis=0)
            for u, (rows, W) in enumerate(zip(b.rows, b.W)):
                slope = 2 * u + 1
                dlam = 2.0 * (GL[:, rows, :] @ psi[:, slope]) - 2.0 * a[:, rows] * means[slope]
                ggam[u] += np.einsum("ij,ijk->k", dlam, W)
                gth[u, u] += diag[..., rows].sum() - np.sum(a[:, rows] ** 2)
            if len(b.pairs):
                pa, pb = b.pairs[:, 0], b.pairs[:, 1]
                if fast:
                    Rinv, BK, B = extra
                    inv_pairs = Rinv[pa, pb][None, :] - np.einsum("ipq,ipq->ip", BK[:, pa], B[:, pb])
                else:
                    inv_pairs = extra[:, pa, pb]
                s = inv_pairs.sum() - np.sum(a[:, pa] * a[:, pb])
                gth[0, 1] += s
                gth[1, 0] += s
        if not grad:
            return dev
        return dev, (gm, gpsi, gth, ggam)

    def _first_bad(self, b: _Batch, lam, R, psi) -> str:
        sigma = lam @ psi @ lam.transpose(0, 2, 1) + R
        for i, s in enumerate(sigma):
            try:
                np.linalg.cholesky(s)
            except np.linalg.LinAlgError:
                return b.ids[i]
        return b.ids[0]

    def deviance(self, theta: np.ndarray) -> float:
        return self.evaluate(theta)

    def natural_gradient(self, theta: np.ndarray) -> np.ndarray:
        _, pieces = self.evaluate(theta, grad=True)
        return self.layout.natural_gradient(*pieces)

    def block_deviances(self, theta: np.ndarray) -> dict[str, float]:
        """Deviance split by outcome; only meaningful with zero cross terms."""
        params = self.layout.to_params(theta)
        out = {}
        for u, o in enumerate(self.spec.outcomes):
            sub = _Problem(ModelSpec((o,)), self.sample.subset([o.label]))
            out[o.label] = sub.deviance(sub.layout.from_params(ParameterSet((params.outcomes[u],))))
        return out


# -- public evaluation helpers ------------------------------------------------

def fiml_deviance(params: ParameterSet, spec: ModelSpec, sample: LongitudinalSample) -> float:
    """-2 log-likelihood of ``sample`` (constants included) under ``params``."""
    prob = _Problem(spec, sample)
    return prob.deviance(prob.layout.from_params(params))


def _step(v: float) -> float:
    return max(1e-5, 1e-5 * abs(v))


def numeric_gradient(params, spec=None, sample=None, fun: Callable | None = None) -> np.ndarray:
    """Central-difference gradient of the deviance over the natural vector.

    With ``fun`` given, ``params`` is a plain vector and ``fun`` is
    differentiated instead.
    """
    if fun is None:
        prob = _Problem(spec, sample)
        x = prob.layout.from_params(params)
        fun = prob.deviance
    else:
        x = np.asarray(params, dtype=float)
    g = np.empty(x.size)
    for k in range(x.size):
        h = _step(x[k])
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        fp, fm = fun(xp), fun(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EstimationError(f"non-finite objective at stencil point of coordinate {k}")
        g[k] = (fp - fm) / (2 * h)
    return g


def numeric_hessian(params, spec=None, sample=None, grad: Callable | None = None) -> np.ndarray:
    """Hessian by central differences of the analytic gradient, symmetrized.

    Differencing the exact gradient rather than the deviance keeps the
    truncation/rounding error small when the deviance is large in magnitude.
    """
    if grad is None:
        prob = _Problem(spec, sample)
        x = prob.layout.from_params(params)
        grad = prob.natural_gradient
    else:
        x = np.asarray(params, dtype=float)
    H = np.empty((x.size, x.size))
    for k in range(x.size):
        h = _step(x[k])
        xp, xm = x.copy(), x.copy()
        xp[k] += h
        xm[k] -= h
        H[:, k] = (grad(xp) - grad(xm)) / (2 * h)
    return 0.5 * (H + H.T)


# -- starting values ----------------------------------------------------------

def _guard_rate(g: float) -> float:
    if not np.isfinite(g) or g == 0 or not -10 < g < 10:
        return 0.5
    return float(g)


def starting_values(sample: LongitudinalSample, spec: ModelSpec) -> ParameterSet:
    """Method-of-moments starting values.

    Intercept moments come from each individual's first observation, the shape
    factor mean from per-unit-time differences over the fixed interval, and
    the other relative rates from the same differences divided by that rate.
    """
    outs = []
    firsts = []
    for o in spec.outcomes:
        st = interval_structure(o, sample.observed_waves(o.label))
        series = [ind.series_for(o.label) for ind in sample.individuals]
        first = np.array([s.values[0] for s in series])
        firsts.append(first)
        pooled = np.var([v for s in series for v in s.values])
        floor = 1e-3 * (pooled if pooled > 0 else 1.0)
        var0 = float(np.var(first, ddof=1)) if len(first) > 1 else 0.0

        rates = []
        for grp in st.groups:
            wa, wb = grp[0], grp[-1] + 1
            slopes = []
            for s in series:
                if wa in s.waves and wb in s.waves:
                    ia, ib = s.waves.index(wa), s.waves.index(wb)
                    slopes.append((s.values[ib] - s.values[ia]) / (s.times[ib] - s.times[ia]))
            rates.append(np.array(slopes))
        fixed = rates[st.fixed_group]
        if fixed.size == 0:
            raise EstimationError(
                f"outcome {o.label!r}: no individual observes both ends of the fixed interval"
            )
        mu1 = float(fixed.mean())
        free = []
        for gi, r in enumerate(rates):
            if gi == st.fixed_group:
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                g = r.mean() / mu1 if r.size else np.nan
            free.append(_guard_rate(g))
        psi11 = 0.5 * float(np.var(fixed, ddof=1)) if fixed.size > 1 else 0.0
        outs.append(OutcomeParams(
            mu_eta0=float(first.mean()),
            mu_eta1=mu1,
            psi00=max(var0, floor),
            psi01=0.0,
            psi11=max(psi11, floor),
            gamma=st.expand(free),
            theta_eps=max(0.5 * var0, floor),
        ))
    cross = CrossParams()
    if spec.parallel and spec.cross_free and len(firsts[0]) > 1:
        c = float(np.cov(firsts[0], firsts[1])[0, 1])
        bound = 0.9 * math.sqrt(outs[0].psi00 * outs[1].psi00)
        cross = CrossParams(psi00=float(np.clip(c, -bound, bound)))
    return ParameterSet(tuple(outs), cross)


# -- fitting ------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    estimates: ParameterSet
    names: tuple[str, ...]
    theta: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    deviance: float
    status: FitStatus
    iterations: int
    n_used: int
    layout: ParameterLayout = field(repr=False)
    retries: int = 0
    gradient_norm: float = float("nan")
    trace: tuple[float, ...] = field(default=(), repr=False)
    reference_times: dict = field(default_factory=dict, repr=False)

    @property
    def converged(self) -> bool:
        return self.status is not FitStatus.RETRIES_EXHAUSTED

    @property
    def spec(self) -> ModelSpec:
        return self.layout.spec

    @property
    def vcov_available(self) -> bool:
        return bool(np.all(np.isfinite(self.vcov)))

    def estimate(self, name: str) -> float:
        return float(self.theta[self.layout.index(name)])

    def std_error(self, name: str) -> float:
        return float(self.se[self.layout.index(name)])


def reference_times(sample: LongitudinalSample, spec: ModelSpec) -> dict[str, np.ndarray]:
    """Per-wave mean measurement times; interior unobserved waves interpolated."""
    out = {}
    for o in spec.outcomes:
        sums = np.zeros(o.J)
        counts = np.zeros(o.J)
        for ind in sample.individuals:
            s = ind.series_for(o.label)
            for w, t in zip(s.waves, s.times):
                sums[w - 1] += t
                counts[w - 1] += 1
        seen = np.flatnonzero(counts)
        ref = np.full(o.J, np.nan)
        grid = np.arange(seen[0], seen[-1] + 1)
        ref[grid] = np.interp(grid, seen, sums[seen] / counts[seen])
        out[o.label] = ref
    return out


def _project_pd(params: ParameterSet, eps: float = 1e-3) -> ParameterSet:
    """Clip eigenvalues of both covariance blocks so a start is admissible."""
    def clip(mat):
        w, v = np.linalg.eigh(mat)
        w = np.maximum(w, eps * max(w.max(), 1e-8))
        return (v * w) @ v.T

    psi = clip(params.growth_cov())
    th = clip(params.residual_cov())
    outs = tuple(
        replace(p, psi00=psi[2 * u, 2 * u], psi01=psi[2 * u, 2 * u + 1],
                psi11=psi[2 * u + 1, 2 * u + 1], theta_eps=th[u, u])
        for u, p in enumerate(params.outcomes)
    )
    cross = params.cross
    if len(outs) == 2:
        cross = CrossParams(psi[0, 2], psi[0, 3], psi[1, 2], psi[1, 3], th[0, 1])
    return ParameterSet(outs, cross)


def _jitter(theta: np.ndarray, layout: ParameterLayout, scale: float, rng: np.random.Generator) -> np.ndarray:
    out = theta * (1.0 + scale * rng.uniform(-1.0, 1.0, theta.size))
    params = layout.to_params(out)
    if not layout.cross:
        params = replace(params, cross=CrossParams())
    return layout.from_params(_project_pd(params))


@dataclass
class _Run:
    x: np.ndarray
    deviance: float
    trace: list[float]
    iterations: int
    converged: bool
    gnorm: float


def _optimize(prob: _Problem, theta0: np.ndarray, options: FitOptions) -> _Run:
    layout = prob.layout
    n = max(prob.n, 1)

    def f_and_g(x):
        theta = layout.search_to_natural(x)
        try:
            dev, pieces = prob.evaluate(theta, grad=True)
        except NotPositiveDefiniteError:
            return np.inf, np.zeros_like(x)
        return dev / n, layout.search_gradient(x, *pieces) / n

    x0 = layout.natural_to_search(theta0)
    f0, _ = f_and_g(x0)
    trace = [f0 * n]

    def record(intermediate_result):
        trace.append(float(intermediate_result.fun) * n)

    res = optimize.minimize(
        f_and_g, x0, jac=True, method="BFGS", callback=record,
        options={"maxiter": options.max_iterations, "gtol": 1e-7},
    )
    x, f = res.x, float(res.fun)
    iterations = int(res.nit)
    if not np.isfinite(f):
        return _Run(x, np.inf, trace, iterations, False, np.inf)
    if trace[-1] != f * n:
        trace.append(f * n)

    # Newton polish with a finite-difference Hessian of the exact gradient
    _, g = f_and_g(x)
    for _ in range(options.newton_steps):
        if np.max(np.abs(g)) < 1e-10:
            break
        H = numeric_hessian(x, grad=lambda z: f_and_g(z)[1])
        try:
            step = -np.linalg.solve(H, g)
            if not g @ step < 0:
                break
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-4:
            fn, gn = f_and_g(x + t * step)
            # near the optimum the predicted decrease is below the rounding noise
            # of f, so a step that shrinks the gradient without raising f beyond
            # that noise is also accepted
            if fn <= f + 1e-4 * t * (g @ step) or (
                    fn <= f + ROUNDING * abs(f) and np.linalg.norm(gn) < np.linalg.norm(g)):
                break
            t *= 0.5
        else:
            break
        x, f, g = x + t * step, fn, gn
        iterations += 1
        trace.append(f * n)

    dev = f * n
    rel_change = abs(trace[-2] - trace[-1]) / max(abs(dev), 1.0) if len(trace) > 1 else 0.0
    gnorm = float(np.max(np.abs(g * n) * np.maximum(np.abs(x), 1.0)) / max(abs(dev), 1.0))
    converged = bool(np.isfinite(dev) and rel_change < options.deviance_tol and gnorm < options.gradient_tol)
    return _Run(x, dev, trace, iterations, converged, gnorm)


def _boundary(params: ParameterSet, tol: float) -> bool:
    for mat in (params.growth_cov(), params.residual_cov()):
        w = np.linalg.eigvalsh(mat)
        if w.min() <= tol * max(w.max(), 1e-300):
            return True
    return False


def fit(sample: LongitudinalSample, spec: ModelSpec, options: FitOptions | None = None,
        start: ParameterSet | None = None) -> FitResult:
    """Maximum likelihood fit with jittered restarts.

    A run counts as converged when the relative deviance change of the last
    iteration is below ``deviance_tol`` and the scaled gradient
    ``max|g_i| * max(|x_i|, 1) / max(|deviance|, 1)`` is below ``gradient_tol``.
    Failed runs are restarted from multiplicatively jittered starting values
    up to ``max_retries`` times.
    """
    options = options or FitOptions()
    # canonical order makes every downstream float sum independent of input order
    sample = replace(sample, individuals=tuple(sorted(sample.individuals, key=lambda i: i.id)))
    report = validate(sample)
    if report:
        raise EstimationError(f"sample fails validation: {report[0]}")
    prob = _Problem(spec, sample)
    layout = prob.layout
    rng = np.random.default_rng(options.rng_seed)
    if start is None:
        start = starting_values(sample, spec)
    if not layout.cross:
        start = replace(start, cross=CrossParams())
    theta0 = layout.from_params(_project_pd(start) if start.violations() else start)

    best: _Run | None = None
    retries = 0
    for attempt in range(options.max_retries + 1):
        init = theta0 if attempt == 0 else _jitter(theta0, layout, options.jitter_scale, rng)
        try:
            run = _optimize(prob, init, options)
        except (np.linalg.LinAlgError, FloatingPointError, EstimationError) as exc:
            log.debug("attempt %d failed: %s", attempt, exc)
            run = None
        if run is not None and (best is None or run.deviance < best.deviance):
            best = run
        if run is not None and run.converged:
            best = run
            break
        retries += 1
    if best is None:
        raise EstimationError("every optimization attempt failed")

    theta = layout.search_to_natural(best.x)
    params = layout.to_params(theta)
    k = len(layout)
    vcov = np.full((k, k), np.nan)
    if np.isfinite(best.deviance):
        try:
            H = numeric_hessian(theta, grad=prob.natural_gradient)
            np.linalg.cholesky(H)
            vcov = 2.0 * np.linalg.inv(H)
            vcov = 0.5 * (vcov + vcov.T)
        except (np.linalg.LinAlgError, NotPositiveDefiniteError):
            log.info("Hessian not positive definite; standard errors unavailable")
    with np.errstate(invalid="ignore"):
        se = np.sqrt(np.diag(vcov))

    if not best.converged:
        status = FitStatus.RETRIES_EXHAUSTED
    elif _boundary(params, options.boundary_tol):
        status = FitStatus.BOUNDARY_PSD
    else:
        status = FitStatus.CONVERGED
    return FitResult(
        estimates=params, names=layout.names, theta=theta, se=se, vcov=vcov,
        deviance=float(best.deviance), status=status, iterations=best.iterations,
        n_used=sample.n, layout=layout, retries=min(retries, options.max_retries),
        gradient_norm=best.gnorm, trace=tuple(best.trace),
        reference_times=reference_times(sample, spec),
    )


# -- inference ----------------------------------------------------------------

def wald_ci(fit: FitResult, level: float = 0.95) -> dict[str, tuple[float, float]]:
    """``estimate +/- z * se`` per parameter; nan bounds when se is unavailable."""
    z = stats.norm.ppf(0.5 + level / 2.0)
    return {
        name: (est - z * se, est + z * se) if np.isfinite(se) else (np.nan, np.nan)
        for name, est, se in zip(fit.names, fit.theta, fit.se)
    }


def wald_pvalue(estimate, se):
    """Two-sided normal p-value; nan where se is unavailable or zero."""
    estimate, se = np.asarray(estimate, float), np.asarray(se, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, np.abs(estimate / se), np.nan)
    return 2.0 * stats.norm.sf(z)


def write_parameter_table(fit: FitResult, path: str | Path, level: float = 0.95) -> None:
    cis = wald_ci(fit, level)
    pv = wald_pvalue(fit.theta, fit.se)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("parameter", "estimate", "se", "ci_low", "ci_high", "pvalue"))
        for i, name in enumerate(fit.names):
            lo, hi = cis[name]
            w.writerow((name, _fmt(fit.theta[i]), _fmt(fit.se[i]), _fmt(lo), _fmt(hi), _fmt(pv[i])))


def _fmt(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else ""
