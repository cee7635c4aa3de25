"""Reference drive cycles: CSV ingestion, validation, and queries.

Cycles are stored internally in SI units (seconds, m/s).  The CSV wire
format is `time,speed_kmh`, one row per sample, matching public cycle
tables.  Sampling must be uniform; mixed-rate cycles are rejected rather
than resampled so the simulator and the DP oracle always agree on dt.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, TextIO

import numpy as np

from .errors import (
    IndexOutOfRange,
    MalformedRow,
    NegativeSpeed,
    NonUniformSampling,
)

KMH_TO_MS = 1.0 / 3.6

_DT_TOLERANCE = 1e-9  # allowed deviation of sample spacing, seconds

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class DriveCycle:
    """Uniformly sampled reference speed trajectory.

    Immutable after construction; safe to share across rollout workers.
    """

    times: np.ndarray  # seconds, strictly increasing, constant spacing
    speeds: np.ndarray  # m/s, all >= 0
    dt: float = field(init=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        speeds = np.asarray(self.speeds, dtype=float)
        times.setflags(write=False)
        speeds.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "speeds", speeds)
        if times.ndim != 1 or speeds.ndim != 1 or times.shape != speeds.shape:
            raise MalformedRow("times and speeds must be 1-D and equal length")
        if len(times) < 2:
            raise MalformedRow("a cycle needs at least 2 samples")
        if not (np.isfinite(times).all() and np.isfinite(speeds).all()):
            raise MalformedRow("non-finite sample in cycle")
        gaps = np.diff(times)
        dt = float(gaps[0])
        if dt <= 0:
            raise NonUniformSampling("times must be strictly increasing")
        if np.abs(gaps - dt).max() > _DT_TOLERANCE:
            raise NonUniformSampling(
                f"sample spacing deviates by more than {_DT_TOLERANCE} s"
            )
        if (speeds < 0).any():
            raise NegativeSpeed("cycle contains negative speed")
        object.__setattr__(self, "dt", dt)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def num_steps(self) -> int:
        """Number of transitions an episode over this cycle produces."""
        return len(self.times) - 1

    def accel_at(self, k: int) -> float:
        """Forward-difference acceleration at sample k, m/s^2.

        The last sample uses 0 by convention (no successor to difference
        against; the vehicle is done following the cycle).
        """
        if not 0 <= k < len(self.times):
            raise IndexOutOfRange(f"step index {k} outside [0, {len(self.times) - 1}]")
        if k == len(self.times) - 1:
            return 0.0
        return float((self.speeds[k + 1] - self.speeds[k]) / self.dt)

    def stats(self) -> tuple[float, float, float]:
        """(distance km, duration s, max speed m/s), trapezoidal distance."""
        distance_m = float(_trapezoid(self.speeds, self.times))
        duration = float(self.times[-1] - self.times[0])
        return distance_m / 1000.0, duration, float(self.speeds.max())

    def to_csv(self, stream: TextIO) -> None:
        """Serialize back to the `time,speed_kmh` wire format."""
        stream.write("time,speed_kmh\n")
        for t, v in zip(self.times, self.speeds):
            stream.write(f"{float(t)!r},{float(v) * 3.6!r}\n")


def load_cycle(source: TextIO | str) -> DriveCycle:
    """Parse a `time,speed_kmh` CSV stream into a validated DriveCycle.

    Speeds are converted km/h -> m/s.  dt is inferred from the first two
    rows and every subsequent gap must match it to 1e-9 s.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    header = next(reader, None)
    rows = list(reader) if header is not None else []
    if header is not None and _looks_numeric(header):
        # headerless stream: the first row is data
        rows.insert(0, header)
    times, speeds = [], []
    for i, row in enumerate(rows):
        if not row:
            continue
        if len(row) != 2:
            raise MalformedRow(f"row {i}: expected 2 fields, got {len(row)}")
        try:
            t, v_kmh = float(row[0]), float(row[1])
        except ValueError as exc:
            raise MalformedRow(f"row {i}: {row!r}") from exc
        if not (np.isfinite(t) and np.isfinite(v_kmh)):
            raise MalformedRow(f"row {i}: non-finite value")
        times.append(t)
        speeds.append(v_kmh * KMH_TO_MS)
    if len(times) < 2:
        raise MalformedRow("cycle CSV has fewer than 2 data rows")
    return DriveCycle(np.array(times), np.array(speeds))


def _looks_numeric(row: Iterable[str]) -> bool:
    try:
        for cell in row:
            float(cell)
    except ValueError:
        return False
    return True


def cycle_stats(cycle: DriveCycle) -> tuple[float, float, float]:
    """(distance km, duration s, max speed m/s) for a valid cycle."""
    return cycle.stats()


def accel_at(cycle: DriveCycle, k: int) -> float:
    return cycle.accel_at(k)


def trapezoid_cycle(
    duration: float = 200.0,
    peak_kmh: float = 50.0,
    dt: float = 1.0,
    ramp_frac: float = 0.3,
) -> DriveCycle:
    """Synthetic accelerate-cruise-brake cycle used for desk-scale runs.

    Ramps linearly 0 -> peak over ramp_frac*duration, cruises, and ramps
    back to 0 over the final ramp_frac*duration.
    """
    n = int(round(duration / dt))
    times = np.arange(n + 1) * dt
    ramp = ramp_frac * duration
    peak = peak_kmh * KMH_TO_MS
    up = np.minimum(times / ramp, 1.0)
    down = np.minimum((duration - times) / ramp, 1.0)
    speeds = peak * np.clip(np.minimum(up, down), 0.0, 1.0)
    return DriveCycle(times, speeds)


def nedc_cycle() -> DriveCycle:
    """The bundled 1 Hz NEDC table (1181 samples, 1180 s)."""
    text = resources.files("hevcrl.data").joinpath("nedc.csv").read_text()
    return load_cycle(text)
