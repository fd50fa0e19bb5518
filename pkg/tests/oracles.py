"""Reference implementations written independently of the package internals."""
import numpy as np
from scipy.stats import multivariate_normal

from lbgm.data import make_sample
from lbgm.model import CrossParams, ModelSpec, OutcomeModelSpec, OutcomeParams, ParameterSet


def random_instance(rng, parallel=None, n=None, J=3):
    """Small complete-data problem with a random valid parameter set."""
    parallel = bool(rng.integers(2)) if parallel is None else parallel
    n = int(rng.integers(1, 6)) if n is None else n
    labels = ("y", "z") if parallel else ("y",)
    q = 2 * len(labels)
    A = rng.normal(size=(q, q))
    psi = A @ A.T + 0.2 * np.eye(q)
    th = rng.uniform(0.3, 2.0, size=len(labels))
    rho_e = rng.uniform(-0.8, 0.8)
    outs = []
    for u in range(len(labels)):
        g = np.r_[1.0, rng.uniform(0.1, 2.0, size=J - 2)]
        outs.append(OutcomeParams(rng.normal(10, 3), rng.normal(2, 1), psi[2 * u, 2 * u],
                                  psi[2 * u, 2 * u + 1], psi[2 * u + 1, 2 * u + 1], tuple(g), th[u]))
    cross = CrossParams()
    if parallel:
        cross = CrossParams(psi[0, 2], psi[0, 3], psi[1, 2], psi[1, 3], rho_e * np.sqrt(th[0] * th[1]))
    params = ParameterSet(tuple(outs), cross)
    records = []
    for i in range(n):
        for lab in labels:
            t = np.arange(J) + rng.uniform(-0.3, 0.3, size=J)
            for j in range(J):
                records.append((f"i{i}", lab, j + 1, float(t[j]), float(rng.normal(12, 4))))
    spec = ModelSpec(tuple(OutcomeModelSpec(lab, J) for lab in labels))
    return params, spec, make_sample(records)


def density_deviance(params, spec, sample):
    """-2 log-likelihood by looping over entries and calling scipy's MVN density."""
    total = 0.0
    psi = np.zeros((4, 4))
    for u, p in enumerate(params.outcomes):
        a = 2 * u
        psi[a, a], psi[a, a + 1], psi[a + 1, a], psi[a + 1, a + 1] = p.psi00, p.psi01, p.psi01, p.psi11
    c = params.cross
    psi[0, 2] = psi[2, 0] = c.psi00
    psi[0, 3] = psi[3, 0] = c.psi01
    psi[1, 2] = psi[2, 1] = c.psi10
    psi[1, 3] = psi[3, 1] = c.psi11
    for ind in sample.individuals:
        entries = []  # (outcome index, wave, loading row in the 4-vector)
        for u, (o, p) in enumerate(zip(spec.outcomes, params.outcomes)):
            s = ind.series_for(o.label)
            assert s.waves == tuple(range(1, len(s.waves) + 1)), "oracle handles complete data only"
            load = 0.0
            for j in range(len(s.times)):
                if j > 0:
                    load += p.gamma[j - 1] * (s.times[j] - s.times[j - 1])
                row = np.zeros(4)
                row[2 * u], row[2 * u + 1] = 1.0, load
                entries.append((u, s.waves[j], row, s.values[j]))
        mu_vec = np.zeros(4)
        for u, p in enumerate(params.outcomes):
            mu_vec[2 * u:2 * u + 2] = p.mu_eta0, p.mu_eta1
        P = len(entries)
        mean = np.array([e[2] @ mu_vec for e in entries])
        cov = np.empty((P, P))
        for a_, (ua, wa, ra, _) in enumerate(entries):
            for b_, (ub, wb, rb, _) in enumerate(entries):
                v = ra @ psi @ rb
                if wa == wb:
                    v += params.outcomes[ua].theta_eps if ua == ub else c.theta_eps
                cov[a_, b_] = v
        x = np.array([e[3] for e in entries])
        total += -2.0 * multivariate_normal(mean, cov).logpdf(x)
    return total


def sample_sd(fun, mean, cov, draws, rng):
    """Monte Carlo SD of ``fun`` under N(mean, cov)."""
    z = rng.multivariate_normal(mean, cov, size=draws, method="eigh")
    vals = np.array([fun(row) for row in z])
    return vals.std(axis=0, ddof=1)
