"""Counterfactual sensor attribution against retrieved normal donors.

For an anomalous window W and sensor j, each donor W' yields the composite
window W with column j (or a segment of it) replaced by the donor's; the
attribution is the mean drop in anomaly score, f(W) - f(composite). Positive
values mean normal behaviour on sensor j lowers the score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .data import Window, write_text_atomic
from .detector import Detector
from .retrieval import NeighborIndex, knn_conditional, knn_conditional_all, knn_unconditional

METHODS = ("conditional", "marginal")


@dataclass(frozen=True)
class AttributionTensor:
    window_start: int
    values: np.ndarray  # (w, d)
    segment_length: int = 1

    @property
    def sensor_totals(self) -> np.ndarray:
        return self.values.sum(axis=0)

    @property
    def time_profile(self) -> np.ndarray:
        return self.values.sum(axis=1)


@dataclass(frozen=True)
class SensorAttribution:
    window_start: int
    values: np.ndarray  # (d,)
    method: str = "conditional"
    donors: tuple = ()  # per-sensor donor positions in the index


@dataclass(frozen=True)
class BiasBoundReport:
    sensor: int
    bias: float
    lipschitz: float
    w1: float
    bound: float
    holds: bool
    phi_conditional: float = math.nan
    phi_marginal: float = math.nan


def _window_data(window) -> tuple[np.ndarray, int]:
    if isinstance(window, Window):
        return window.data, window.start
    return np.asarray(window, dtype=float), -1


def donor_seed(seed: int, window_start: int, j: int) -> np.random.SeedSequence:
    """Per-(window, sensor) seed so unconditional draws do not depend on evaluation order."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(window_start) + 1, int(j)])


def _donors(index: NeighborIndex, window, j: int, K: int, method: str, seed: int) -> np.ndarray:
    if method == "conditional":
        return knn_conditional(index, window, j, K).indices
    if method == "marginal":
        _, start = _window_data(window)
        return knn_unconditional(index, K, donor_seed(seed, start, j)).indices
    raise ValueError(f"unknown attribution method {method!r}")


def column_replacements(W: np.ndarray, donors: np.ndarray, j: int) -> np.ndarray:
    """Composite windows: W with column j taken from each donor, shape (K, w, d)."""
    comp = np.repeat(W[None], donors.shape[0], axis=0)
    comp[:, :, j] = donors[:, :, j]
    return comp


def _attribute_column(detector: Detector, W: np.ndarray, base: float,
                      donors: np.ndarray, j: int) -> float:
    comp = column_replacements(W, donors, j)
    return _donor_mean(base - np.atleast_1d(detector.score(comp)))


def _donor_mean(deltas: np.ndarray) -> float:
    # exactly rounded sum, so the estimate does not depend on donor order
    return math.fsum(deltas) / len(deltas)


def conditional_attribution(detector: Detector, index: NeighborIndex, window, j: int,
                            K: int = 3) -> float:
    W, _ = _window_data(window)
    idx = knn_conditional(index, window, j, K).indices
    base = detector.score(W)
    return _attribute_column(detector, W, base, index.windows[idx], j)


def marginal_attribution(detector: Detector, index: NeighborIndex, window, j: int,
                         K: int = 3, seed: int = 0) -> float:
    W, start = _window_data(window)
    idx = knn_unconditional(index, K, donor_seed(seed, start, j)).indices
    base = detector.score(W)
    return _attribute_column(detector, W, base, index.windows[idx], j)


def sensor_attribution(detector: Detector, index: NeighborIndex, window, K: int = 3,
                       method: str = "conditional", seed: int = 0) -> SensorAttribution:
    """Attribution for every sensor with one batched detector call."""
    W, start = _window_data(window)
    d = W.shape[1]
    if method == "conditional":
        donor_idx = [r.indices for r in knn_conditional_all(index, window, K)]
    else:
        donor_idx = [_donors(index, window, j, K, method, seed) for j in range(d)]
    comps = np.concatenate([column_replacements(W, index.windows[idx], j)
                            for j, idx in enumerate(donor_idx)])
    scores = np.atleast_1d(detector.score(np.concatenate([W[None], comps])))
    base = scores[0]
    phi = np.array([_donor_mean(base - scores[1 + j * K: 1 + (j + 1) * K]) for j in range(d)])
    return SensorAttribution(start, phi, method, tuple(tuple(int(i) for i in idx) for idx in donor_idx))


def segment_bounds(tau: int, s: int, w: int) -> tuple[int, int]:
    """Length-s segment centered at tau, slid inward to stay inside [0, w)."""
    lo = tau - s // 2
    lo = min(max(lo, 0), w - s)
    return lo, lo + s


def _temporal_composites(W: np.ndarray, donors: np.ndarray, j: int, s: int) -> np.ndarray:
    w = W.shape[0]
    K = donors.shape[0]
    comp = np.repeat(W[None, None], w, axis=0).repeat(K, axis=1)  # (w, K, w, d)
    for tau in range(w):
        lo, hi = segment_bounds(tau, s, w)
        comp[tau, :, lo:hi, j] = donors[:, lo:hi, j]
    return comp.reshape(w * K, w, W.shape[1])


def temporal_attribution(detector: Detector, index: NeighborIndex, window, j: int,
                         s: int = 1, K: int = 3, method: str = "conditional",
                         seed: int = 0) -> np.ndarray:
    W, _ = _window_data(window)
    w = W.shape[0]
    if not 1 <= s <= w:
        raise ValueError(f"segment length {s} outside [1, {w}]")
    idx = _donors(index, window, j, K, method, seed)
    base = detector.score(W)
    scores = np.atleast_1d(detector.score(_temporal_composites(W, index.windows[idx], j, s)))
    return (base - scores.reshape(w, K)).mean(axis=1)


def attribution_tensor(detector: Detector, index: NeighborIndex, window, s: int = 1,
                       K: int = 3, method: str = "conditional", seed: int = 0) -> AttributionTensor:
    W, start = _window_data(window)
    w, d = W.shape
    if not 1 <= s <= w:
        raise ValueError(f"segment length {s} outside [1, {w}]")
    if method == "conditional":
        donor_idx = [r.indices for r in knn_conditional_all(index, window, K)]
    else:
        donor_idx = [_donors(index, window, j, K, method, seed) for j in range(d)]
    base = detector.score(W)
    cols = []
    for j, idx in enumerate(donor_idx):
        scores = np.atleast_1d(detector.score(_temporal_composites(W, index.windows[idx], j, s)))
        cols.append((base - scores.reshape(w, K)).mean(axis=1))
    return AttributionTensor(start, np.stack(cols, axis=1), s)


def estimate_onset(tensor: AttributionTensor) -> int:
    """Series index of the in-window offset carrying the most total attribution."""
    return tensor.window_start + int(np.argmax(tensor.time_profile))


# ------------------------------------------------------------------ Wasserstein

def wasserstein1_empirical(samples_p, samples_q, max_n: int = 256) -> float:
    """Exact W1 between two uniform empirical measures of equal size (l2 ground cost)."""
    P = np.atleast_2d(np.asarray(samples_p, dtype=float))
    Q = np.atleast_2d(np.asarray(samples_q, dtype=float))
    n = P.shape[0]
    if n == 0 or Q.shape[0] == 0:
        raise ValueError("empty sample set")
    if Q.shape[0] != n:
        raise ValueError(f"unequal sample counts {n} and {Q.shape[0]}")
    if n > max_n:
        raise ValueError(f"{n} samples exceed the exact-solver limit {max_n}")
    # canonical orientation so W1(P, Q) and W1(Q, P) run the identical computation
    if Q.tobytes() < P.tobytes():
        P, Q = Q, P
    C = cdist(P, Q)
    rows, cols = linear_sum_assignment(C)
    return math.fsum(C[rows, cols]) / n


def check_bias_bound(detector: Detector, index: NeighborIndex, window, j: int, K: int = 8,
                     seed: int = 0, lipschitz: Optional[float] = None,
                     tol: float = 1e-9) -> BiasBoundReport:
    """Compare conditional vs marginal attribution with the L * W1 bound on their donor sets."""
    W, start = _window_data(window)
    L = detector.lipschitz(j) if lipschitz is None else float(lipschitz)
    cond = knn_conditional(index, window, j, K).indices
    marg = knn_unconditional(index, K, donor_seed(seed, start, j)).indices
    base = detector.score(W)
    phi_c = _attribute_column(detector, W, base, index.windows[cond], j)
    phi_m = _attribute_column(detector, W, base, index.windows[marg], j)
    bias = abs(phi_c - phi_m)
    w1 = wasserstein1_empirical(index.windows[cond][:, :, j], index.windows[marg][:, :, j])
    bound = L * w1
    return BiasBoundReport(j, bias, L, w1, bound, bool(bias <= bound + tol), phi_c, phi_m)


# ---------------------------------------------------------------------- export

def export_tensor(tensor: AttributionTensor, sensor_names: Sequence[str], path, method: str,
                  K: int) -> None:
    """Heatmap CSV (rows = in-window offset, columns = sensors) plus a JSON sidecar."""
    path = Path(path)
    lines = [",".join(sensor_names)]
    for row in tensor.values:
        lines.append(",".join(repr(float(v)) for v in row))
    write_text_atomic(path, "\n".join(lines) + "\n")
    side = {"window_start": tensor.window_start, "method": method, "K": K,
            "s": tensor.segment_length}
    write_text_atomic(path.with_suffix(".json"), json.dumps(side, indent=1))
