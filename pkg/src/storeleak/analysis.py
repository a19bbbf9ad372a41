"""Statistical post-processing of timing traces and counter samples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InvalidConfigError, UndefinedCorrelationError
from .leak import TimingTrace


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Product-moment correlation coefficient."""
    if len(xs) != len(ys):
        raise InvalidConfigError("series must have equal length")
    n = len(xs)
    if n < 2:
        raise UndefinedCorrelationError("need at least two samples")
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("a series has zero variance")
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    return sxy / math.sqrt(sxx * syy)


@dataclass
class CorrelationReport:
    """Counter-vs-timing correlations over the triggered peak windows.

    Windows open where latency exceeds the baseline by the trigger amount
    and span the next ``window_length`` samples. A counter that never
    varies inside the windows is reported as r = 0 (no correlation) and
    listed in ``constant_counters``.
    """

    r_stalls_ldm_pending: float
    r_address_alias: float
    r_bound_on_stores: float
    windows: int
    samples: int
    constant_counters: list[str] = field(default_factory=list)

    @property
    def no_windows(self) -> bool:
        return self.windows == 0

    def as_dict(self) -> dict:
        return {
            "r_stalls_ldm_pending": self.r_stalls_ldm_pending,
            "r_address_alias": self.r_address_alias,
            "r_bound_on_stores": self.r_bound_on_stores,
            "windows": self.windows,
            "samples": self.samples,
            "constant_counters": list(self.constant_counters),
        }


def _safe_r(name: str, xs: list[float], ys: list[float],
            constants: list[str]) -> float:
    try:
        return pearson(xs, ys)
    except UndefinedCorrelationError:
        constants.append(name)
        return 0.0


def correlate_counters(trace: TimingTrace, steps: int,
                       trigger: float = 200.0,
                       baseline: float | None = None,
                       margin: float = 50.0) -> CorrelationReport:
    """Correlate each modeled counter with latency over the peak windows.

    A window opens at a latency at least ``trigger`` above baseline and
    collects the next ``steps`` samples, stopping early if the latency
    falls back to baseline so windows contain only peak samples.
    """
    cycles = trace.cycles()
    if not cycles:
        return CorrelationReport(0.0, 0.0, 0.0, 0, 0, ["empty trace"])
    if baseline is None:
        vals = sorted(cycles)
        k = len(vals)
        baseline = vals[k // 2] if k % 2 else 0.5 * (vals[k // 2 - 1] + vals[k // 2])

    t: list[float] = []
    stalls: list[float] = []
    alias: list[float] = []
    bound: list[float] = []
    windows = 0
    i = 0
    n = len(cycles)
    while i < n:
        if cycles[i] >= baseline + trigger:
            windows += 1
            taken = 0
            while i < n and taken < steps and cycles[i] > baseline + margin:
                e = trace.entries[i]
                t.append(e.cycles)
                stalls.append(e.counters.stalls_ldm_pending)
                alias.append(float(e.counters.address_alias))
                bound.append(float(e.counters.bound_on_stores))
                taken += 1
                i += 1
        else:
            i += 1

    if windows == 0:
        return CorrelationReport(0.0, 0.0, 0.0, 0, 0, ["no windows"])
    constants: list[str] = []
    return CorrelationReport(
        r_stalls_ldm_pending=_safe_r("stalls_ldm_pending", stalls, t, constants),
        r_address_alias=_safe_r("address_alias", alias, t, constants),
        r_bound_on_stores=_safe_r("bound_on_stores", bound, t, constants),
        windows=windows,
        samples=len(t),
        constant_counters=constants,
    )


def histogram_classes(scenario_cycles: dict[str, Sequence[float]]) -> dict[str, float]:
    """Mean latency per aliasing scenario, e.g. for the four-class histogram."""
    means = {}
    for name, cycles in scenario_cycles.items():
        if not cycles:
            raise InvalidConfigError(f"scenario {name!r} has no samples")
        means[name] = sum(cycles) / len(cycles)
    return means
