"""Interval-level summaries of a fitted model with delta-method standard errors.

Every quantity here is a smooth function of the natural parameter vector. Its
value and analytic gradient are computed together, and the standard error is
``sqrt(grad' V grad)`` with ``V`` the fitted parameter covariance.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .estimator import FitResult, ParameterLayout, wald_pvalue

NAN = float("nan")


@dataclass(frozen=True)
class Estimate:
    estimate: float
    se: float = NAN

    @property
    def pvalue(self) -> float:
        return float(wald_pvalue(self.estimate, self.se))


def _with_se(values: np.ndarray, jac: np.ndarray, vcov: np.ndarray) -> list[Estimate]:
    """Attach delta-method SEs; rows of ``jac`` are gradients of ``values``."""
    out = []
    for v, g in zip(values, jac):
        if not np.isfinite(v):
            out.append(Estimate(NAN, NAN))
            continue
        var = float(g @ vcov @ g)
        out.append(Estimate(float(v), np.sqrt(max(var, 0.0)) if np.isfinite(var) else NAN))
    return out


# -- raw value/gradient maps over the natural vector ---------------------------

def rate_terms(layout: ParameterLayout, theta: np.ndarray):
    """Absolute-rate means, variances and between-construct covariances.

    Returns ``(values, jacobian, keys)`` where keys are ``(kind, outcome_index
    or None, interval)`` tuples; unidentified intervals give nan values.
    """
    params = layout.to_params(theta)
    k = len(layout)
    vals, rows, keys = [], [], []
    for u, (o, p) in enumerate(zip(layout.spec.outcomes, params.outcomes)):
        i_mu1 = layout.index(f"{o.label}.mu_eta1")
        i_psi11 = layout.index(f"{o.label}.psi11")
        for interval in range(1, o.J):
            g = p.gamma[interval - 1]
            gi = layout.gamma_index(u, interval)
            d_mean = np.zeros(k)
            d_var = np.zeros(k)
            d_mean[i_mu1] = g
            d_var[i_psi11] = g * g
            if gi is not None:
                d_mean[gi] = p.mu_eta1
                d_var[gi] = 2.0 * p.psi11 * g
            vals += [p.mu_eta1 * g, p.psi11 * g * g]
            rows += [d_mean, d_var]
            keys += [("mean", u, interval), ("var", u, interval)]
    if layout.cross:
        py, pz = params.outcomes
        i_c11 = layout.index("cross.psi11")
        for interval in range(1, min(o.J for o in layout.spec.outcomes)):
            gy, gz = py.gamma[interval - 1], pz.gamma[interval - 1]
            d = np.zeros(k)
            d[i_c11] = gy * gz
            for u, other in ((0, gz), (1, gy)):
                gi = layout.gamma_index(u, interval)
                if gi is not None:
                    d[gi] = params.cross.psi11 * other
            vals.append(params.cross.psi11 * gy * gz)
            rows.append(d)
            keys.append(("cov", None, interval))
    return np.asarray(vals), np.asarray(rows).reshape(len(vals), k), keys


def correlation_terms(layout: ParameterLayout, theta: np.ndarray):
    """Between-construct intercept and rate correlations, with gradients."""
    if not layout.cross:
        raise ValueError("correlations need a parallel model with free between-construct terms")
    params = layout.to_params(theta)
    py, pz = params.outcomes
    ly, lz = layout.spec.labels
    k = len(layout)
    vals, rows = [], []
    for cov, a, b, names in (
        (params.cross.psi00, py.psi00, pz.psi00, ("cross.psi00", f"{ly}.psi00", f"{lz}.psi00")),
        (params.cross.psi11, py.psi11, pz.psi11, ("cross.psi11", f"{ly}.psi11", f"{lz}.psi11")),
    ):
        if not (a > 0 and b > 0):
            raise ValueError("correlation undefined for a zero variance component")
        root = np.sqrt(a * b)
        d = np.zeros(k)
        d[layout.index(names[0])] = 1.0 / root
        d[layout.index(names[1])] = -cov / (2.0 * a * root)
        d[layout.index(names[2])] = -cov / (2.0 * b * root)
        vals.append(cov / root)
        rows.append(d)
    return np.asarray(vals), np.asarray(rows)


def change_terms(layout: ParameterLayout, theta: np.ndarray, wave_times: Sequence[np.ndarray]):
    """Mean change from baseline at each wave of each outcome.

    The baseline is the first wave observed in the sample; earlier waves get
    nan. Returns ``(values, jacobian, keys)`` with keys ``(outcome_index, wave)``.
    """
    params = layout.to_params(theta)
    k = len(layout)
    vals, rows, keys = [], [], []
    for u, (o, p, st) in enumerate(zip(layout.spec.outcomes, params.outcomes, layout.structures)):
        t = np.asarray(wave_times[u], dtype=float)
        if t.size != o.J:
            raise ValueError(f"outcome {o.label!r}: need {o.J} reference times")
        first = st.groups[0][0]
        last = st.groups[-1][-1] + 1
        span = t[first - 1:last]
        if np.any(~np.isfinite(span)) or np.any(np.diff(span) <= 0):
            raise ValueError(f"outcome {o.label!r}: reference times must be increasing")
        i_mu1 = layout.index(f"{o.label}.mu_eta1")
        gamma = np.asarray(p.gamma)
        for wave in range(1, o.J + 1):
            keys.append((u, wave))
            d = np.zeros(k)
            if not first <= wave <= last:
                vals.append(NAN)
                rows.append(d)
                continue
            ks = np.arange(first, wave)  # intervals before this wave
            lengths = t[ks] - t[ks - 1]
            area = float(np.sum(gamma[ks - 1] * lengths))
            d[i_mu1] = area
            for interval, length in zip(ks, lengths):
                gi = layout.gamma_index(u, int(interval))
                if gi is not None:
                    d[gi] += p.mu_eta1 * length
            vals.append(p.mu_eta1 * area)
            rows.append(d)
    return np.asarray(vals), np.asarray(rows), keys


# -- fit-level API --------------------------------------------------------------

@dataclass(frozen=True)
class RateMoments:
    """Per-interval absolute-rate moments; arrays are indexed ``[outcome][interval - 1]``."""

    mean: tuple[tuple[Estimate, ...], ...]
    var: tuple[tuple[Estimate, ...], ...]
    cov: tuple[Estimate, ...]


def absolute_rate_moments(fit: FitResult) -> RateMoments:
    vals, jac, keys = rate_terms(fit.layout, fit.theta)
    est = _with_se(vals, jac, fit.vcov)
    k = len(fit.spec.outcomes)
    mean = [[] for _ in range(k)]
    var = [[] for _ in range(k)]
    cov = []
    for (kind, u, _), e in zip(keys, est):
        if kind == "mean":
            mean[u].append(e)
        elif kind == "var":
            var[u].append(e)
        else:
            cov.append(e)
    return RateMoments(tuple(map(tuple, mean)), tuple(map(tuple, var)), tuple(cov))


@dataclass(frozen=True)
class Correlations:
    intercept: Estimate
    rate: Estimate


def standardized_correlations(fit: FitResult) -> Correlations:
    vals, jac = correlation_terms(fit.layout, fit.theta)
    ic, rc = _with_se(vals, jac, fit.vcov)
    return Correlations(ic, rc)


def change_from_baseline(
    fit: FitResult, wave_times: Mapping[str, Sequence[float]] | None = None
) -> dict[str, tuple[Estimate, ...]]:
    """Mean change since baseline at every wave, per outcome label.

    ``wave_times`` defaults to the per-wave mean measurement times of the
    fitted sample.
    """
    labels = fit.spec.labels
    times = wave_times or fit.reference_times
    vals, jac, keys = change_terms(fit.layout, fit.theta, [np.asarray(times[lab]) for lab in labels])
    est = _with_se(vals, jac, fit.vcov)
    out: dict[str, list[Estimate]] = {lab: [] for lab in labels}
    for (u, _), e in zip(keys, est):
        out[labels[u]].append(e)
    return {lab: tuple(v) for lab, v in out.items()}


@dataclass(frozen=True)
class DerivedRow:
    panel: str
    quantity: str
    cells: dict  # column -> Estimate


@dataclass(frozen=True)
class DerivedReport:
    labels: tuple[str, ...]
    rows: tuple[DerivedRow, ...]
    parallel: bool

    @property
    def columns(self) -> tuple[str, ...]:
        return self.labels + (("covariance",) if self.parallel else ())

    def get(self, panel: str, quantity: str, column: str) -> Estimate | None:
        for r in self.rows:
            if r.panel == panel and r.quantity == quantity:
                return r.cells.get(column)
        raise KeyError((panel, quantity))

    def write_csv(self, path: str | Path) -> None:
        header = ["panel", "quantity"]
        for c in self.columns:
            header += [f"{c}_estimate", f"{c}_se", f"{c}_pvalue"]
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in self.rows:
                line = [r.panel, r.quantity]
                for c in self.columns:
                    e = r.cells.get(c)
                    line += ["", "", ""] if e is None else [_fmt(e.estimate), _fmt(e.se), _fmt(e.pvalue)]
                w.writerow(line)


def _fmt(v: float) -> str:
    return repr(float(v)) if np.isfinite(v) else ""


def derived_report(fit: FitResult, wave_times: Mapping[str, Sequence[float]] | None = None) -> DerivedReport:
    """Collect intercepts, interval rates, changes and correlations in one table."""
    spec = fit.spec
    labels = spec.labels
    cross = fit.layout.cross
    rates = absolute_rate_moments(fit)

    def raw(name: str) -> Estimate:
        return Estimate(fit.estimate(name), fit.std_error(name))

    rows = [DerivedRow("mean", "initial_status", {lab: raw(f"{lab}.mu_eta0") for lab in labels})]
    n_int = max(o.J for o in spec.outcomes) - 1
    for k in range(1, n_int + 1):
        rows.append(DerivedRow("mean", f"rate_interval_{k}", {
            lab: rates.mean[u][k - 1] for u, lab in enumerate(labels) if k < spec.outcomes[u].J
        }))
    cells = {lab: raw(f"{lab}.psi00") for lab in labels}
    if cross:
        cells["covariance"] = raw("cross.psi00")
    rows.append(DerivedRow("variance", "initial_status", cells))
    for k in range(1, n_int + 1):
        cells = {lab: rates.var[u][k - 1] for u, lab in enumerate(labels) if k < spec.outcomes[u].J}
        if cross and k <= len(rates.cov):
            cells["covariance"] = rates.cov[k - 1]
        rows.append(DerivedRow("variance", f"rate_interval_{k}", cells))
    changes = change_from_baseline(fit, wave_times)
    for j in range(1, n_int + 2):
        rows.append(DerivedRow("change", f"wave_{j}", {
            lab: changes[lab][j - 1] for lab in labels if j <= len(changes[lab])
        }))
    if cross:
        corr = standardized_correlations(fit)
        rows.append(DerivedRow("correlation", "intercept", {"covariance": corr.intercept}))
        rows.append(DerivedRow("correlation", "rate", {"covariance": corr.rate}))
    return DerivedReport(labels, tuple(rows), spec.parallel)
