"""Latent basis growth model with individual measurement occasions.

The slope loading of an individual at a wave is the area under the piecewise
constant relative-rate curve between the individual's baseline time and the
measurement time. The growth rate over interval ``k`` (between waves ``k`` and
``k + 1``) is ``eta1 * gamma[k]``; one interval per outcome has its relative
rate fixed to 1, so ``eta1`` is the absolute rate over that interval.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Individual, LongitudinalSample


@dataclass(frozen=True)
class OutcomeModelSpec:
    label: str
    J: int
    fixed_interval: int = 1  # 1-based, in 1..J-1

    def __post_init__(self):
        if self.J < 3:
            raise ValueError(f"outcome {self.label!r}: J must be at least 3, got {self.J}")
        if not 1 <= self.fixed_interval <= self.J - 1:
            raise ValueError(
                f"outcome {self.label!r}: fixed_interval must be in 1..{self.J - 1}, "
                f"got {self.fixed_interval}"
            )


@dataclass(frozen=True)
class ModelSpec:
    outcomes: tuple[OutcomeModelSpec, ...]
    # False fixes every between-construct covariance at zero
    cross_free: bool = True

    def __post_init__(self):
        if len(self.outcomes) not in (1, 2):
            raise ValueError("a model has one (univariate) or two (parallel) outcomes")
        labels = [o.label for o in self.outcomes]
        if len(set(labels)) != len(labels):
            raise ValueError("outcome labels must be distinct")

    @property
    def parallel(self) -> bool:
        return len(self.outcomes) == 2

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(o.label for o in self.outcomes)

    def outcome(self, label: str) -> OutcomeModelSpec:
        for o in self.outcomes:
            if o.label == label:
                return o
        raise KeyError(label)

    def with_fixed_intervals(self, *fixed: int | str) -> "ModelSpec":
        """Copy with new fixed intervals; ``"first"``/``"last"`` are accepted."""
        if len(fixed) == 1:
            fixed = fixed * len(self.outcomes)
        outs = []
        for o, f in zip(self.outcomes, fixed):
            if f == "first":
                f = 1
            elif f == "last":
                f = o.J - 1
            outs.append(replace(o, fixed_interval=int(f)))
        return replace(self, outcomes=tuple(outs))

    @classmethod
    def for_sample(cls, sample: LongitudinalSample, fixed: int | str = "first",
                   cross_free: bool = True) -> "ModelSpec":
        outs = tuple(OutcomeModelSpec(lab, sample.waves_declared(lab)) for lab in sample.outcome_labels)
        return cls(outs, cross_free).with_fixed_intervals(fixed)

    def to_dict(self) -> dict:
        return {
            "outcomes": [
                {"label": o.label, "J": o.J, "fixed_interval": o.fixed_interval}
                for o in self.outcomes
            ],
            "cross_free": self.cross_free,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        outs = tuple(
            OutcomeModelSpec(str(o["label"]), int(o["J"]), int(o.get("fixed_interval", 1)))
            for o in d["outcomes"]
        )
        return cls(outs, bool(d.get("cross_free", True)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class OutcomeParams:
    mu_eta0: float
    mu_eta1: float
    psi00: float
    psi01: float
    psi11: float
    gamma: tuple[float, ...]  # J-1 relative rates; nan where not identified
    theta_eps: float

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))


@dataclass(frozen=True)
class CrossParams:
    """Between-construct covariances; index order is (y factor, z factor)."""

    psi00: float = 0.0  # cov(eta0_y, eta0_z)
    psi01: float = 0.0  # cov(eta0_y, eta1_z)
    psi10: float = 0.0  # cov(eta1_y, eta0_z)
    psi11: float = 0.0  # cov(eta1_y, eta1_z)
    theta_eps: float = 0.0


@dataclass(frozen=True)
class ParameterSet:
    outcomes: tuple[OutcomeParams, ...]
    cross: CrossParams = field(default_factory=CrossParams)

    def growth_means(self) -> np.ndarray:
        return np.array([v for o in self.outcomes for v in (o.mu_eta0, o.mu_eta1)])

    def growth_cov(self) -> np.ndarray:
        """Joint growth-factor covariance, ordered (eta0_y, eta1_y[, eta0_z, eta1_z])."""
        q = 2 * len(self.outcomes)
        psi = np.zeros((q, q))
        for u, o in enumerate(self.outcomes):
            psi[2 * u:2 * u + 2, 2 * u:2 * u + 2] = [[o.psi00, o.psi01], [o.psi01, o.psi11]]
        if q == 4:
            c = self.cross
            block = np.array([[c.psi00, c.psi01], [c.psi10, c.psi11]])
            psi[:2, 2:] = block
            psi[2:, :2] = block.T
        return psi

    def residual_cov(self) -> np.ndarray:
        th = np.diag([o.theta_eps for o in self.outcomes])
        if len(self.outcomes) == 2:
            th[0, 1] = th[1, 0] = self.cross.theta_eps
        return th

    def violations(self, tol: float = 0.0) -> list[str]:
        """Invariant problems (empty when the parameter set is admissible)."""
        out = []
        for o in self.outcomes:
            if not o.theta_eps > 0:
                out.append("residual variance must be positive")
        if np.linalg.eigvalsh(self.growth_cov()).min() < -tol:
            out.append("growth-factor covariance is not positive semi-definite")
        if np.linalg.eigvalsh(self.residual_cov()).min() < -tol:
            out.append("residual covariance is not positive semi-definite")
        return out


@dataclass(frozen=True)
class ImpliedMoments:
    mean: np.ndarray
    covariance: np.ndarray
    entry_index: tuple[tuple[str, int], ...]


def wave_boundaries(times: Sequence[float], observed_waves: Sequence[int]) -> tuple[np.ndarray, int]:
    """Times of every wave from the first to the last observed one.

    Unobserved interior waves get times interpolated linearly in the wave
    index between the neighbouring observed waves. Returns the boundaries and
    the wave index of the first entry.
    """
    waves = np.asarray(observed_waves, dtype=int)
    grid = np.arange(waves[0], waves[-1] + 1)
    return np.interp(grid, waves, np.asarray(times, dtype=float)), int(waves[0])


def loading_weights(
    times: Sequence[float],
    observed_waves: Sequence[int],
    J: int,
    baseline_time: float | None = None,
) -> np.ndarray:
    """Overlap lengths ``W[j, k]`` of interval ``k`` with ``[baseline, t_j]``.

    The slope loading at observed entry ``j`` is ``W[j] @ gamma``.
    """
    times = np.asarray(times, dtype=float)
    if times.size == 0:
        raise ValueError("no observed times")
    if times.size != len(observed_waves):
        raise ValueError("times and observed_waves differ in length")
    if np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing")
    waves = np.asarray(observed_waves, dtype=int)
    if waves.min() < 1 or waves.max() > J:
        raise ValueError(f"wave indices must lie in 1..{J}")
    bounds, first = wave_boundaries(times, waves)
    base = times[0] if baseline_time is None else float(baseline_time)
    lo = np.full(J - 1, np.inf)
    hi = np.full(J - 1, -np.inf)
    # interval k (0-based) spans waves k+1 .. k+2
    ks = np.arange(first - 1, first - 1 + bounds.size - 1)
    lo[ks] = bounds[:-1]
    hi[ks] = bounds[1:]
    start = np.maximum(lo, base)
    return np.clip(np.minimum(hi[None, :], times[:, None]) - start[None, :], 0.0, None)


def build_loading_matrix(
    times: Sequence[float],
    gammas: Sequence[float],
    observed_waves: Sequence[int] | None = None,
    baseline_time: float | None = None,
) -> np.ndarray:
    """Rows ``(1, L_j)`` for one outcome of one individual.

    ``L_j`` accumulates ``gamma[k] * overlap`` over every interval lying
    between the baseline (default: first observed time) and ``t_j``. When an
    individual skips a wave, the boundary between the two merged intervals is
    placed by linear interpolation in the wave index.
    """
    gammas = np.asarray(gammas, dtype=float)
    if observed_waves is None:
        observed_waves = range(1, len(times) + 1)
    W = loading_weights(times, observed_waves, gammas.size + 1, baseline_time)
    used = W.any(axis=0)
    if not np.all(np.isfinite(gammas[used])):
        raise ValueError("relative rates must be finite on spanned intervals")
    # unspanned intervals contribute exactly zero, so a skipped row never changes the others
    slope = np.sum(W * np.where(used, gammas, 0.0), axis=1)
    return np.column_stack([np.ones(len(slope)), slope])


def implied_moments(spec: ModelSpec, params: ParameterSet, individual: Individual) -> ImpliedMoments:
    """Model-implied mean and covariance over the individual's observed entries."""
    blocks = []
    index: list[tuple[str, int]] = []
    for o, p in zip(spec.outcomes, params.outcomes):
        s = individual.series_for(o.label)
        if len(p.gamma) != o.J - 1:
            raise ValueError(f"outcome {o.label!r}: expected {o.J - 1} relative rates")
        blocks.append(build_loading_matrix(s.times, p.gamma, s.waves))
        index.extend((o.label, w) for w in s.waves)
    q = 2 * len(blocks)
    lam = np.zeros((len(index), q))
    row = 0
    for u, b in enumerate(blocks):
        lam[row:row + len(b), 2 * u:2 * u + 2] = b
        row += len(b)
    mean = lam @ params.growth_means()
    cov = lam @ params.growth_cov() @ lam.T
    cov = 0.5 * (cov + cov.T)
    th = params.residual_cov()
    labels = spec.labels
    for a, (ua, wa) in enumerate(index):
        for b, (ub, wb) in enumerate(index):
            if wa == wb:
                cov[a, b] += th[labels.index(ua), labels.index(ub)]
    return ImpliedMoments(mean, cov, tuple(index))


def rescale_parameters(params: ParameterSet, spec_from: ModelSpec, spec_to: ModelSpec) -> ParameterSet:
    """Re-express ``params`` with the shape factor scaled to other intervals.

    With ``c = gamma[new_fixed]`` the new shape factor is ``c * eta1``, so its
    mean, its covariances and the relative rates change accordingly while every
    implied moment stays the same.
    """
    if spec_from.labels != spec_to.labels or [o.J for o in spec_from.outcomes] != [
        o.J for o in spec_to.outcomes
    ]:
        raise ValueError("specs must differ only in their fixed intervals")
    scales = []
    outs = []
    for o_to, p in zip(spec_to.outcomes, params.outcomes):
        c = p.gamma[o_to.fixed_interval - 1]
        if c == 0 or not np.isfinite(c):
            raise ValueError(f"outcome {o_to.label!r}: cannot rescale to an interval with rate {c}")
        g = [x / c for x in p.gamma]
        g[o_to.fixed_interval - 1] = 1.0
        scales.append(c)
        outs.append(replace(
            p, mu_eta1=p.mu_eta1 * c, psi01=p.psi01 * c, psi11=p.psi11 * c * c, gamma=tuple(g),
        ))
    cross = params.cross
    if len(scales) == 2:
        cy, cz = scales
        cross = replace(cross, psi01=cross.psi01 * cz, psi10=cross.psi10 * cy,
                        psi11=cross.psi11 * cy * cz)
    return ParameterSet(tuple(outs), cross)


@dataclass(frozen=True)
class IntervalStructure:
    """Which relative rates one sample can identify for one outcome.

    ``groups`` lists the interval indices (1-based) tied to a single rate: the
    intervals between two consecutive waves observed anywhere in the sample.
    Intervals before the earliest or after the latest observed wave are not
    identified. ``fixed_group`` is the index in ``groups`` whose rate is 1.
    """

    J: int
    groups: tuple[tuple[int, ...], ...]
    fixed_group: int

    @property
    def free_groups(self) -> tuple[tuple[int, ...], ...]:
        return tuple(g for i, g in enumerate(self.groups) if i != self.fixed_group)

    @property
    def active(self) -> tuple[int, ...]:
        return tuple(k for g in self.groups for k in g)

    def expand(self, free_values: Sequence[float]) -> tuple[float, ...]:
        """Full J-1 rate vector from the free group rates."""
        gamma = [np.nan] * (self.J - 1)
        it = iter(free_values)
        for i, g in enumerate(self.groups):
            v = 1.0 if i == self.fixed_group else float(next(it))
            for k in g:
                gamma[k - 1] = v
        return tuple(gamma)


def interval_structure(o: OutcomeModelSpec, observed_waves: set[int] | Sequence[int]) -> IntervalStructure:
    waves = sorted(set(observed_waves))
    if len(waves) < 2:
        raise ValueError(f"outcome {o.label!r}: need at least two observed waves")
    if waves[-1] > o.J:
        raise ValueError(f"outcome {o.label!r}: wave {waves[-1]} exceeds J={o.J}")
    groups = tuple(tuple(range(a, b)) for a, b in zip(waves[:-1], waves[1:]))
    for i, g in enumerate(groups):
        if o.fixed_interval in g:
            return IntervalStructure(o.J, groups, i)
    raise ValueError(
        f"outcome {o.label!r}: fixed interval {o.fixed_interval} is not spanned by observed waves "
        f"{waves[0]}..{waves[-1]}"
    )
