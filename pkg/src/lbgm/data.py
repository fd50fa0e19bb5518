"""Long-format longitudinal data with individually varying measurement times.

A sample holds one or two repeated outcomes per individual. Each observation
carries an explicit wave index, the individual's own measurement time and the
measured value. Missing waves are simply absent.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CSV_COLUMNS = ("id", "outcome", "wave", "time", "value")

# two fixed loadings per outcome plus at least one free quantity
MIN_OBSERVED_WAVES = 3


class DataError(ValueError):
    """Raised when a data file cannot be turned into a valid sample."""

    def __init__(self, message: str, violations: Sequence["Violation"] = ()):
        super().__init__(message)
        self.violations = list(violations)


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    individual: str | None = None
    outcome: str | None = None
    wave: int | None = None

    def __str__(self) -> str:
        where = ", ".join(
            f"{k}={v}"
            for k, v in (("id", self.individual), ("outcome", self.outcome), ("wave", self.wave))
            if v is not None
        )
        return f"[{self.kind}] {self.message}" + (f" ({where})" if where else "")


@dataclass(frozen=True)
class OutcomeSeries:
    label: str
    waves: tuple[int, ...]
    times: tuple[float, ...]
    values: tuple[float, ...]
    J: int

    def __post_init__(self):
        if not (len(self.waves) == len(self.times) == len(self.values)):
            raise ValueError("waves, times and values must have equal length")

    def __len__(self) -> int:
        return len(self.waves)


@dataclass(frozen=True)
class Individual:
    id: str
    series: tuple[OutcomeSeries, ...]

    def series_for(self, label: str) -> OutcomeSeries:
        for s in self.series:
            if s.label == label:
                return s
        raise KeyError(f"individual {self.id!r} has no outcome {label!r}")


@dataclass(frozen=True)
class LongitudinalSample:
    individuals: tuple[Individual, ...]
    outcome_labels: tuple[str, ...]
    dropped_rows: int = field(default=0, compare=False)

    @property
    def n(self) -> int:
        return len(self.individuals)

    def waves_declared(self, label: str) -> int:
        return max(ind.series_for(label).J for ind in self.individuals)

    def observed_waves(self, label: str) -> set[int]:
        """Union of wave indices observed for ``label`` across all individuals."""
        out: set[int] = set()
        for ind in self.individuals:
            out.update(ind.series_for(label).waves)
        return out

    def subset(self, labels: Sequence[str]) -> "LongitudinalSample":
        """Restrict the sample to the given outcomes (e.g. a univariate view)."""
        labels = tuple(labels)
        inds = tuple(
            Individual(ind.id, tuple(ind.series_for(lab) for lab in labels))
            for ind in self.individuals
        )
        return LongitudinalSample(inds, labels)


def make_sample(
    records: Iterable[tuple[str, str, int, float, float]],
    waves: Mapping[str, int] | None = None,
    outcome_labels: Sequence[str] | None = None,
) -> LongitudinalSample:
    """Assemble a sample from ``(id, outcome, wave, time, value)`` tuples.

    Records are grouped by id and outcome and sorted by wave. No validation is
    done here beyond shape; use :func:`validate`.
    """
    grouped: dict[str, dict[str, list[tuple[int, float, float]]]] = {}
    labels_seen: list[str] = []
    for pid, outcome, wave, time, value in records:
        pid, outcome = str(pid), str(outcome)
        if outcome not in labels_seen:
            labels_seen.append(outcome)
        grouped.setdefault(pid, {}).setdefault(outcome, []).append(
            (int(wave), float(time), float(value))
        )
    labels = tuple(outcome_labels) if outcome_labels is not None else tuple(labels_seen)
    J = {lab: 0 for lab in labels}
    for per_outcome in grouped.values():
        for lab, rows in per_outcome.items():
            if lab in J:
                J[lab] = max(J[lab], max(r[0] for r in rows))
    if waves:
        J.update({k: int(v) for k, v in waves.items() if k in J})

    individuals = []
    for pid, per_outcome in grouped.items():
        series = []
        for lab in labels:
            rows = sorted(per_outcome.get(lab, []), key=lambda r: r[0])
            series.append(
                OutcomeSeries(
                    lab,
                    tuple(r[0] for r in rows),
                    tuple(r[1] for r in rows),
                    tuple(r[2] for r in rows),
                    J[lab],
                )
            )
        individuals.append(Individual(pid, tuple(series)))
    return LongitudinalSample(tuple(individuals), labels)


def validate(sample: LongitudinalSample) -> list[Violation]:
    """Check every sample invariant; an empty list means the sample is usable."""
    report: list[Violation] = []
    if len(sample.outcome_labels) not in (1, 2):
        report.append(Violation("outcomes", f"expected 1 or 2 outcomes, got {len(sample.outcome_labels)}"))
    seen_ids: set[str] = set()
    observed: dict[str, set[int]] = {lab: set() for lab in sample.outcome_labels}
    for ind in sample.individuals:
        if ind.id in seen_ids:
            report.append(Violation("duplicate-id", "individual id is not unique", ind.id))
        seen_ids.add(ind.id)
        for lab in sample.outcome_labels:
            try:
                s = ind.series_for(lab)
            except KeyError:
                report.append(Violation("missing-outcome", "no series for outcome", ind.id, lab))
                continue
            if len(s) == 0:
                report.append(Violation("empty-series", "no observations for outcome", ind.id, lab))
                continue
            for k, (w, t, v) in enumerate(zip(s.waves, s.times, s.values)):
                if not 1 <= w <= s.J:
                    report.append(Violation("wave-range", f"wave outside 1..{s.J}", ind.id, lab, w))
                if not (math.isfinite(t) and math.isfinite(v)):
                    report.append(Violation("non-finite", "time or value is not finite", ind.id, lab, w))
                if k > 0:
                    if w <= s.waves[k - 1]:
                        report.append(Violation(
                            "wave-order", "wave indices not strictly increasing", ind.id, lab, w))
                    elif not t > s.times[k - 1]:
                        report.append(Violation(
                            "time-order", "measurement time not after previous wave", ind.id, lab, w))
            observed[lab].update(s.waves)
    for lab, ws in observed.items():
        if len(ws) < MIN_OBSERVED_WAVES:
            report.append(Violation(
                "identification",
                f"outcome observed at {len(ws)} distinct waves; at least {MIN_OBSERVED_WAVES} required",
                outcome=lab,
            ))
    return report


def load_long_csv(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    waves: Mapping[str, int] | None = None,
    drop_values: Iterable[float] = (),
) -> LongitudinalSample:
    """Read a long-format CSV (one row per id x outcome x wave).

    ``schema`` maps the canonical column names ``id, outcome, wave, time, value``
    to the names used in the file. Rows with an empty time or value, or a value
    in ``drop_values`` (sentinel codes), are dropped and counted in
    ``sample.dropped_rows``. ``waves`` overrides the per-outcome wave count,
    which otherwise defaults to the largest wave index seen.
    """
    cols = {c: c for c in CSV_COLUMNS}
    if schema:
        cols.update(schema)
    sentinels = {float(v) for v in drop_values}
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    records = []
    seen: set[tuple[str, str, int]] = set()
    dropped = 0
    with fh:
        reader = csv.DictReader(fh)
        missing = [c for c in cols.values() if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            pid = row[cols["id"]].strip()
            outcome = row[cols["outcome"]].strip()
            raw_time = row[cols["time"]].strip()
            raw_value = row[cols["value"]].strip()
            try:
                wave = int(row[cols["wave"]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: wave is not an integer") from None
            if wave < 1:
                raise DataError(f"{path}:{lineno}: wave must be a positive integer")
            if raw_time == "" or raw_value == "":
                dropped += 1
                continue
            try:
                time, value = float(raw_time), float(raw_value)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric time or value") from None
            if value in sentinels or time in sentinels or math.isnan(value) or math.isnan(time):
                dropped += 1
                continue
            key = (pid, outcome, wave)
            if key in seen:
                raise DataError(f"{path}:{lineno}: duplicate row for id={pid} outcome={outcome} wave={wave}")
            seen.add(key)
            records.append((pid, outcome, wave, time, value))

    if not records:
        raise DataError(f"{path}: no usable rows")
    sample = make_sample(records, waves=waves)
    sample = LongitudinalSample(sample.individuals, sample.outcome_labels, dropped_rows=dropped)
    report = validate(sample)
    if report:
        raise DataError(f"{path}: {len(report)} validation problem(s); first: {report[0]}", report)
    return sample


def write_long_csv(sample: LongitudinalSample, path: str | Path) -> None:
    """Write ``sample`` in the canonical long format (round-trips exactly)."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for ind in sample.individuals:
            for s in ind.series:
                for wave, t, v in zip(s.waves, s.times, s.values):
                    w.writerow((ind.id, s.label, wave, repr(float(t)), repr(float(v))))
