"""Benchmark metrics: real-time factor, speedup and energy per synaptic event."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class PerfError(ValueError):
    pass


class TraceFormatError(PerfError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class PhaseTimings:
    """Wall-clock durations (s) and absolute boundaries (unix seconds).

    ``boundaries`` holds construction start, construction end, end of warm-up
    and end of propagation, in that order.
    """

    construction: float
    warmup: float
    propagation: float
    boundaries: tuple[float, float, float, float]

    def __post_init__(self):
        if min(self.construction, self.warmup, self.propagation) < 0:
            raise PerfError("phase durations must be non-negative")
        b = self.boundaries
        if len(b) != 4 or any(b[i + 1] < b[i] for i in range(3)):
            raise PerfError("phase boundaries must be ordered")

    def t_wall(self, include_warmup: bool = False) -> float:
        return self.propagation + (self.warmup if include_warmup else 0.0)

    def window(self, phase: str = "propagation", include_warmup: bool = False) -> tuple[float, float]:
        b = self.boundaries
        if phase == "construction":
            return b[0], b[1]
        if phase == "warmup":
            return b[1], b[2]
        if phase == "propagation":
            return (b[1] if include_warmup else b[2]), b[3]
        raise PerfError(f"unknown phase {phase!r}")

    def to_dict(self) -> dict:
        return {
            "construction_s": self.construction,
            "warmup_s": self.warmup,
            "propagation_s": self.propagation,
            "boundaries_unix_s": list(self.boundaries),
        }


@dataclass(frozen=True)
class PowerTrace:
    timestamps: np.ndarray
    power: np.ndarray
    source: str = "synthetic"

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.power, dtype=float)
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "power", p)
        if t.shape != p.shape or t.ndim != 1:
            raise PerfError("timestamps and power must be 1-d and equally long")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise PerfError("trace timestamps must be strictly increasing")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise PerfError("power samples must be finite and non-negative")

    def shifted(self, offset_s: float) -> "PowerTrace":
        return PowerTrace(self.timestamps + offset_s, self.power, self.source)


def read_power_trace(path: str | Path, clock_offset_s: float = 0.0) -> PowerTrace:
    """Read ``timestamp_s<TAB>power_W`` lines; '#' lines form the header.

    A header line ``# source: <label>`` sets the trace source label.
    """
    source = "unknown"
    ts, ps = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                if key.strip().lower() == "source" and val.strip():
                    source = val.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise TraceFormatError("expected 'timestamp_s<TAB>power_W'", lineno)
            try:
                t, p = float(parts[0]), float(parts[1])
            except ValueError:
                raise TraceFormatError("non-numeric field", lineno) from None
            if ts and t <= ts[-1]:
                raise TraceFormatError("timestamps must be strictly increasing", lineno)
            if p < 0 or not math.isfinite(p):
                raise TraceFormatError("power must be finite and non-negative", lineno)
            ts.append(t)
            ps.append(p)
    return PowerTrace(np.array(ts), np.array(ps), source).shifted(clock_offset_s)


def write_power_trace(trace: PowerTrace, path: str | Path, note: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# source: {trace.source}\n")
        if note:
            fh.write(f"# sampling: {note}\n")
        for t, p in zip(trace.timestamps, trace.power):
            fh.write(f"{float(t)!r}\t{float(p)!r}\n")


@dataclass(frozen=True)
class EventAccounting:
    """Planned and measured synaptic event totals for one run.

    ``planned_rate`` is sum_a N_a * K_out_a * nu_a in events per second of
    model time; ``measured`` is the exact engine counter for the
    propagation window.
    """

    t_model: float                      # s
    planned_rate: float | None = None
    measured: int | None = None

    def __post_init__(self):
        if self.planned_rate is not None and self.planned_rate < 0:
            raise PerfError("planned event rate must be non-negative")
        if self.measured is not None and self.measured < 0:
            raise PerfError("measured event count must be non-negative")


def planned_event_rate(sizes: Sequence[int], k_out: Sequence[float], rates_hz: Sequence[float]) -> float:
    return float(sum(n * k * nu for n, k, nu in zip(sizes, k_out, rates_hz)))


def real_time_factor(t_wall: float, t_model: float) -> tuple[float, float]:
    """Return ``(q_RTF, 1/q_RTF)``; the inverse is ``inf`` for zero wall time."""
    if not t_model > 0:
        raise PerfError("T_model must be positive")
    if t_wall < 0:
        raise PerfError("T_wall must be non-negative")
    q = t_wall / t_model
    return q, (math.inf if q == 0 else 1.0 / q)


@dataclass(frozen=True)
class Speedup:
    value: float

    @property
    def slowdown(self) -> bool:
        return self.value < 1.0


def speedup(t_wall_serial: float, t_wall_parallel: float) -> Speedup:
    if not (t_wall_serial > 0 and t_wall_parallel > 0):
        raise PerfError("wall-clock times must be positive")
    return Speedup(t_wall_serial / t_wall_parallel)


def integrate_energy(trace: PowerTrace, from_ts: float, to_ts: float) -> float:
    """Trapezoidal energy (J) over ``[from_ts, to_ts]``, interpolating the edges."""
    t, p = trace.timestamps, trace.power
    if t.size < 2:
        raise PerfError("power trace needs at least 2 samples")
    if from_ts > to_ts:
        raise PerfError("window start after window end")
    if from_ts < t[0] or to_ts > t[-1]:
        raise PerfError(
            f"window [{from_ts}, {to_ts}] outside trace span [{t[0]}, {t[-1]}]")
    inner = (t > from_ts) & (t < to_ts)
    tt = np.concatenate(([from_ts], t[inner], [to_ts]))
    pp = np.concatenate(([np.interp(from_ts, t, p)], p[inner], [np.interp(to_ts, t, p)]))
    return float(np.sum(0.5 * (pp[1:] + pp[:-1]) * np.diff(tt)))


def synaptic_event_count(acc: EventAccounting, basis: str = "measured") -> float:
    if basis == "planned":
        if acc.planned_rate is None:
            raise PerfError("planned basis needs population firing rates")
        return acc.t_model * acc.planned_rate
    if basis == "measured":
        if acc.measured is None:
            raise PerfError("measured basis needs the engine event counter")
        return acc.measured
    raise PerfError(f"unknown event basis {basis!r}")


def energy_per_synaptic_event(energy_j: float, events: float) -> float:
    """E_syn in J per event (multiply by 1e6 for uJ)."""
    if not events > 0:
        raise PerfError("event count must be positive")
    return energy_j / events


@dataclass
class PerfReport:
    """Everything the bench command reports for one run."""

    t_model: float
    timings: PhaseTimings
    include_warmup: bool = False
    accounting: EventAccounting | None = None
    energy_propagation_j: float | None = None
    energy_construction_j: float | None = None
    extra: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        t_wall = self.timings.t_wall(self.include_warmup)
        q, inv = real_time_factor(t_wall, self.t_model) if self.t_model > 0 else (None, None)
        out = {
            "t_model_s": self.t_model,
            "t_wall_s": t_wall,
            "warmup_included": self.include_warmup,
            "q_rtf": q,
            "q_rtf_inverse": inv,
            "timings": self.timings.to_dict(),
        }
        if self.accounting is not None:
            a = self.accounting
            out["events_measured"] = a.measured
            out["events_planned"] = None if a.planned_rate is None else a.t_model * a.planned_rate
        if self.energy_propagation_j is not None:
            out["energy_propagation_J"] = self.energy_propagation_j
            out["energy_construction_J"] = self.energy_construction_j
            for basis in ("measured", "planned"):
                try:
                    ev = synaptic_event_count(self.accounting, basis)
                    out[f"e_syn_{basis}_uJ"] = 1e6 * energy_per_synaptic_event(self.energy_propagation_j, ev)
                except (PerfError, AttributeError):
                    out[f"e_syn_{basis}_uJ"] = None
        out.update(self.extra)
        return out
