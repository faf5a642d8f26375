"""Correlated latent-factor series and labeled fault injection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import AnomalyEvent, DataError, SeriesMatrix

KINDS = ("spike", "shift", "noise", "drift", "dropout", "saturation")


@dataclass(frozen=True)
class LatentFactorSystem:
    """x_t = offset + loading @ f_t + noise, with AR(1) latent factors f_t."""

    d: int
    r: int
    loading: np.ndarray
    factor_smoothness: float = 0.95
    noise_scale: float = 0.1
    seed: int = 0
    offset: float | np.ndarray = 0.0

    @classmethod
    def random(cls, d: int, r: int, seed: int = 0, **kw) -> "LatentFactorSystem":
        """Block loading: each sensor driven mainly by one factor (sensor j -> j mod r)."""
        rng = np.random.default_rng(seed)
        loading = np.zeros((d, r))
        for j in range(d):
            loading[j, j % r] = rng.uniform(0.7, 1.3) * rng.choice([-1.0, 1.0])
        return cls(d=d, r=r, loading=loading, seed=seed, **kw)


def generate(system: LatentFactorSystem, T: int, names: Optional[Sequence[str]] = None) -> SeriesMatrix:
    if system.r >= system.d:
        raise DataError(f"need r < d, got r={system.r}, d={system.d}")
    if T < 2:
        raise DataError("T must be >= 2")
    loading = np.asarray(system.loading, dtype=float)
    if loading.shape != (system.d, system.r):
        raise DataError(f"loading shape {loading.shape} != ({system.d}, {system.r})")
    a = system.factor_smoothness
    if not 0 < a < 1:
        raise DataError("factor_smoothness must lie in (0, 1)")
    rng = np.random.default_rng(system.seed)
    innov = rng.standard_normal((T, system.r)) * math.sqrt(1 - a * a)
    f = np.empty((T, system.r))
    f[0] = rng.standard_normal(system.r)
    for t in range(1, T):
        f[t] = a * f[t - 1] + innov[t]
    noise = rng.standard_normal((T, system.d)) * system.noise_scale
    x = f @ loading.T + noise + system.offset
    names = tuple(names) if names is not None else tuple(f"s{j}" for j in range(system.d))
    return SeriesMatrix(x, names)


@dataclass(frozen=True)
class InjectionSpec:
    kind: str
    sensor: int | tuple
    interval: tuple[int, int]
    magnitude: float = 3.0
    seed: int = 0
    quantile: float = 0.5   # saturation: share of the interval pinned at the rail
    lower: bool = False     # saturation: clip from below instead

    @property
    def sensors(self) -> tuple[int, ...]:
        if isinstance(self.sensor, (tuple, list, frozenset, set)):
            return tuple(sorted(int(s) for s in self.sensor))
        return (int(self.sensor),)

    @classmethod
    def from_json(cls, obj: dict, series: SeriesMatrix | None = None) -> "InjectionSpec":
        def resolve(s):
            if isinstance(s, str):
                if series is None:
                    raise DataError("sensor names need a series to resolve against")
                return series.sensor_index(s)
            return int(s)

        sensor = obj["sensor"]
        sensor = tuple(resolve(s) for s in sensor) if isinstance(sensor, list) else resolve(sensor)
        return cls(kind=obj["kind"], sensor=sensor, interval=tuple(obj["interval"]),
                   magnitude=float(obj.get("magnitude", 3.0)), seed=int(obj.get("seed", 0)),
                   quantile=float(obj.get("quantile", 0.5)), lower=bool(obj.get("lower", False)))


def inject(series: SeriesMatrix, spec: InjectionSpec, scale: Optional[np.ndarray] = None,
           center: Optional[np.ndarray] = None) -> tuple[SeriesMatrix, AnomalyEvent]:
    """Apply one fault to a copy of ``series``.

    ``scale``/``center`` are per-sensor training std and mean (raw units); they
    default to the statistics of the whole input series.
    """
    if spec.kind not in KINDS:
        raise DataError(f"unknown anomaly kind {spec.kind!r}")
    lo, hi = spec.interval
    if not 0 <= lo < hi <= series.T:
        raise DataError(f"interval [{lo}, {hi}) outside series of length {series.T}")
    sensors = spec.sensors
    if any(not 0 <= j < series.d for j in sensors):
        raise DataError(f"sensor out of range in {sensors}")
    if spec.kind != "dropout" and not spec.magnitude > 0:
        raise DataError("magnitude must be positive")
    x = series.values.copy()
    sigma = series.values.std(axis=0) if scale is None else np.asarray(scale, float)
    mu = series.values.mean(axis=0) if center is None else np.asarray(center, float)
    n = hi - lo
    rng = np.random.default_rng(spec.seed)
    m = spec.magnitude

    if spec.kind == "spike":
        count = math.ceil(0.1 * n)
        pos = np.sort(rng.choice(n, size=count, replace=False))
        signs = rng.choice([-1.0, 1.0], size=count)
        for j in sensors:
            x[lo + pos, j] += signs * m * sigma[j]
    elif spec.kind == "shift":
        for j in sensors:
            x[lo:hi, j] += m * sigma[j]
    elif spec.kind == "noise":
        for j in sensors:
            x[lo:hi, j] += rng.standard_normal(n) * m * sigma[j]
    elif spec.kind == "drift":
        ramp = np.linspace(0.0, 1.0, n) if n > 1 else np.ones(1)
        for j in sensors:
            x[lo:hi, j] += ramp * m * sigma[j]
    elif spec.kind == "dropout":
        x[lo:hi, list(sensors)] = 0.0
    elif spec.kind == "saturation":
        # lift the segment until its q-quantile reaches the rail, then clip at the rail
        for j in sensors:
            seg = x[lo:hi, j]
            if spec.lower:
                rail = mu[j] - m * sigma[j]
                x[lo:hi, j] = np.maximum(seg - (np.quantile(seg, 1 - spec.quantile) - rail), rail)
            else:
                rail = mu[j] + m * sigma[j]
                x[lo:hi, j] = np.minimum(seg + (rail - np.quantile(seg, spec.quantile)), rail)

    event = AnomalyEvent(lo, n, frozenset(sensors))
    return series.with_values(x), event


def plan_events(T: int, train_end: int, n_events: int, duration: tuple[int, int],
                gap: int, d: int, seed: int = 0, kinds: Sequence[str] = KINDS,
                magnitude: float = 3.0) -> list[InjectionSpec]:
    """Lay out non-overlapping single-sensor injections after ``train_end``.

    Consecutive events are separated by at least ``gap`` clean timesteps; the
    kinds cycle through ``kinds`` so each appears equally often.
    """
    rng = np.random.default_rng(seed)
    durations = rng.integers(duration[0], duration[1] + 1, size=n_events)
    slack = (T - train_end) - int(durations.sum()) - gap * (n_events + 1)
    if slack < 0:
        raise DataError("not enough room after the training range for the requested events")
    # random extra spacing that sums to at most the slack
    extra = rng.multinomial(slack, np.ones(n_events + 1) / (n_events + 1))[:n_events]
    specs, t = [], train_end + gap
    for i in range(n_events):
        t += int(extra[i])
        kind = kinds[i % len(kinds)]
        specs.append(InjectionSpec(kind=kind, sensor=int(rng.integers(d)),
                                   interval=(t, t + int(durations[i])), magnitude=magnitude,
                                   seed=int(rng.integers(2**31))))
        t += int(durations[i]) + gap
    return specs


def inject_many(series: SeriesMatrix, specs: Sequence[InjectionSpec], scale=None,
                center=None) -> tuple[SeriesMatrix, list[AnomalyEvent]]:
    events = []
    for spec in specs:
        series, ev = inject(series, spec, scale=scale, center=center)
        events.append(ev)
    ordered = sorted(events, key=lambda e: e.onset)
    for a, b in zip(ordered, ordered[1:]):
        if a.end > b.onset:
            raise DataError(f"events at {a.onset} and {b.onset} overlap")
    return series, events
