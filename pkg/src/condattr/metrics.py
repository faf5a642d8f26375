"""Root-cause evaluation: Recall@K, CW-RCS@K, early/persistence scores and TemporalHM."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import AnomalyEvent


@dataclass(frozen=True)
class RankedAttribution:
    scores: np.ndarray   # non-negative confidence per sensor
    ranking: np.ndarray  # sensors by descending score, ties by ascending index

    def top(self, K: int) -> set:
        return set(int(j) for j in self.ranking[:K])


def rank_attribution(phi, signed: bool = False) -> RankedAttribution:
    """Rank sensors by |phi| (or by signed phi, clipped at zero for the scores)."""
    phi = np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("attribution contains non-finite values")
    key = phi if signed else np.abs(phi)
    ranking = np.lexsort((np.arange(phi.size), -key))
    scores = np.maximum(phi, 0.0) if signed else np.abs(phi)
    return RankedAttribution(scores, ranking)


def _check(S, K, d):
    if not S:
        raise ValueError("ground-truth sensor set is empty")
    if not 1 <= K <= d:
        raise ValueError(f"K={K} outside [1, {d}]")


def recall_at_k(ranking, S, K: int) -> float:
    ranking = ranking.ranking if isinstance(ranking, RankedAttribution) else np.asarray(ranking)
    S = set(int(j) for j in S)
    _check(S, K, len(ranking))
    top = set(int(j) for j in ranking[:K])
    return sum(1.0 for j in S if j in top) / len(S)


def cw_rcs_at_k(scores, ranking, S, K: int) -> float:
    scores = np.asarray(scores, dtype=float)
    ranking = ranking.ranking if isinstance(ranking, RankedAttribution) else np.asarray(ranking)
    S = set(int(j) for j in S)
    _check(S, K, len(ranking))
    mass = np.abs(scores)
    total = mass.sum()
    if total == 0:
        return 0.0
    top = set(int(j) for j in ranking[:K])
    return float(sum(mass[j] / total for j in S if j in top) / len(S))


def early_and_persistence(rankings: Sequence, S, K: int, onset: int = 0) -> tuple[float, float]:
    """E and A from one ranking per event timestep (rankings[i] is for timestep onset+i)."""
    Ta = len(rankings)
    if Ta < 1:
        raise ValueError("missing rankings for the event")
    S = set(int(j) for j in S)
    hits = []
    for r in rankings:
        if r is None:
            raise ValueError("missing ranking for an event timestep")
        r = r.ranking if isinstance(r, RankedAttribution) else np.asarray(r)
        hits.append(bool(S & set(int(j) for j in r[:K])))
    A = sum(hits) / Ta
    if not any(hits):
        return 0.0, A
    t_star = onset + hits.index(True)
    E = max(0.0, 1.0 - (t_star - onset) / Ta)
    return E, A


def temporal_hm(E: float, A: float, beta: float = 1.0, eps: float = 1e-8) -> float:
    b2 = beta * beta
    denom = b2 * E + A + eps
    if denom == 0:
        return 0.0
    return (1 + b2) * E * A / denom


# ------------------------------------------------------------- event / dataset

@dataclass
class EventEvaluation:
    event: AnomalyEvent
    per_window: list            # (window_start, RankedAttribution)
    recall_at: dict             # K -> mean over the event's windows
    cw_rcs_at: dict
    early: dict                 # K -> E
    persistence: dict           # K -> A
    temporal_hm: dict           # K -> TemporalHM_beta
    identified_sensors: dict    # K -> sorted ground-truth sensors seen in some top-K
    window_recall: dict = field(default_factory=dict)  # K -> per-window values
    window_cw_rcs: dict = field(default_factory=dict)


def evaluate_event(event: AnomalyEvent, per_window: Sequence, timestep_rankings: Sequence,
                   Ks: Iterable[int] = (3, 5, 10), beta: float = 1.0,
                   eps: float = 1e-8) -> EventEvaluation:
    """``per_window`` holds (start, RankedAttribution) pairs used for Recall/CW-RCS;
    ``timestep_rankings`` one ranking per event timestep for E/A."""
    S = event.ground_truth
    Ks = sorted(set(int(k) for k in Ks))
    rec, cw, E_, A_, hm, ident, wr, wc = {}, {}, {}, {}, {}, {}, {}, {}
    for K in Ks:
        r = [recall_at_k(ra, S, K) for _, ra in per_window]
        c = [cw_rcs_at_k(ra.scores, ra, S, K) for _, ra in per_window]
        wr[K], wc[K] = r, c
        rec[K] = float(np.mean(r)) if r else 0.0
        cw[K] = float(np.mean(c)) if c else 0.0
        E, A = early_and_persistence(timestep_rankings, S, K, event.onset)
        E_[K], A_[K] = E, A
        hm[K] = temporal_hm(E, A, beta, eps)
        seen = set()
        for _, ra in per_window:
            seen |= S & ra.top(K)
        ident[K] = sorted(seen)
    return EventEvaluation(event, list(per_window), rec, cw, E_, A_, hm, ident, wr, wc)


@dataclass
class MetricsReport:
    per_event: list
    window_level: dict
    event_level: dict

    def to_json(self, sensor_names: Optional[Sequence[str]] = None) -> dict:
        def name(j):
            return sensor_names[j] if sensor_names is not None else int(j)

        rows = []
        for ev in self.per_event:
            rows.append({
                "event": {"onset": ev.event.onset, "duration": ev.event.duration,
                          "sensors": [name(j) for j in sorted(ev.event.ground_truth)]},
                "n_windows": len(ev.per_window),
                "recall": {str(k): v for k, v in ev.recall_at.items()},
                "cw_rcs": {str(k): v for k, v in ev.cw_rcs_at.items()},
                "E": {str(k): v for k, v in ev.early.items()},
                "A": {str(k): v for k, v in ev.persistence.items()},
                "temporal_hm": {str(k): v for k, v in ev.temporal_hm.items()},
                "identified": {str(k): [name(j) for j in v] for k, v in ev.identified_sensors.items()},
            })
        return {"per_event": rows, "dataset": {"window_level": self.window_level,
                                               "event_level": self.event_level}}


def evaluate_dataset(events: Sequence[EventEvaluation]) -> MetricsReport:
    """Window-level means pool every anomalous window; event-level means average per-event values."""
    if not events:
        raise ValueError("no events to evaluate")
    Ks = sorted(events[0].recall_at)
    window_level, event_level = {}, {}
    for name, attr, wattr in (("recall", "recall_at", "window_recall"),
                              ("cw_rcs", "cw_rcs_at", "window_cw_rcs")):
        window_level[name] = {}
        event_level[name] = {}
        for K in Ks:
            pooled = [v for ev in events for v in getattr(ev, wattr)[K]]
            window_level[name][str(K)] = float(np.mean(pooled)) if pooled else 0.0
            event_level[name][str(K)] = float(np.mean([getattr(ev, attr)[K] for ev in events]))
    for name, attr in (("E", "early"), ("A", "persistence"), ("temporal_hm", "temporal_hm")):
        event_level[name] = {str(K): float(np.mean([getattr(ev, attr)[K] for ev in events]))
                             for K in Ks}
    return MetricsReport(list(events), window_level, event_level)
