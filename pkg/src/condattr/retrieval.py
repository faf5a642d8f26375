"""Exact conditional K-nearest-neighbor retrieval over a reference set of normal windows.

The conditioning for sensor j compares masked contexts (column j zeroed) either
directly under the Frobenius norm (``space="input"``) or after embedding
(``space="embedded"``). Selection is an exact linear scan; ties go to the lower
reference position.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DataError, LabeledDataset, Window, stack_windows, window_starts
from .embedding import Embedding, ImportedEmbedding


class RetrievalError(ValueError):
    pass


@dataclass(frozen=True)
class NeighborQueryResult:
    indices: np.ndarray
    distances: np.ndarray


class NeighborIndex:
    def __init__(self, windows: np.ndarray, starts: np.ndarray, space: str = "input",
                 embedding: Optional[Embedding] = None, shared: bool = False):
        if space not in ("input", "embedded"):
            raise RetrievalError(f"unknown retrieval space {space!r}")
        self.windows = np.ascontiguousarray(windows, dtype=float)
        self.windows.setflags(write=False)
        self.starts = np.asarray(starts, dtype=np.int64)
        self.space = space
        self.embedding = embedding
        self.shared = shared
        self.ref_embeddings = None
        self._masked: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()
        if space == "embedded":
            if embedding is None:
                raise RetrievalError("embedded space needs an embedding")
            if not embedding.supports_masking:
                self.shared = True
            if isinstance(embedding, ImportedEmbedding):
                self.ref_embeddings = embedding.lookup(self.starts)
            else:
                self.ref_embeddings = np.atleast_2d(embedding.embed(self.windows))

    @property
    def size(self) -> int:
        return self.windows.shape[0]

    @property
    def w(self) -> int:
        return self.windows.shape[1]

    @property
    def d(self) -> int:
        return self.windows.shape[2]

    def masked_reference_embeddings(self, j: int) -> np.ndarray:
        """Embeddings of every reference with column j zeroed, computed once per sensor."""
        Z = self._masked.get(j)
        if Z is None:
            with self._lock:
                Z = self._masked.get(j)
                if Z is None:
                    masked = self.windows.copy()
                    masked[:, :, j] = 0.0
                    Z = np.atleast_2d(self.embedding.embed(masked))
                    Z.setflags(write=False)
                    self._masked[j] = Z
        return Z


def build_index(dataset: LabeledDataset, w: int, stride: int = 1, space: str = "input",
                embedding: Optional[Embedding] = None, shared: bool = False,
                train_range: Optional[tuple[int, int]] = None) -> NeighborIndex:
    lo, hi = train_range or dataset.train_range
    dataset.assert_normal_range(lo, hi)
    if hi - lo < w:
        raise RetrievalError(f"normal split [{lo}, {hi}) holds no window of length {w}")
    starts = window_starts(hi, w, stride, lo=lo)
    windows = stack_windows(dataset.series, starts, w)
    return NeighborIndex(windows, starts, space, embedding, shared)


# ----------------------------------------------------------------- selection

def k_smallest(dist: np.ndarray, K: int) -> np.ndarray:
    """Positions of the K smallest values; equal values ordered by position."""
    n = dist.shape[0]
    if K >= n:
        return np.argsort(dist, kind="stable")[:K]
    kth = np.partition(dist, K - 1)[K - 1]
    cand = np.flatnonzero(dist <= kth)
    order = np.argsort(dist[cand], kind="stable")
    return cand[order[:K]]


def _query_array(query) -> np.ndarray:
    return query.data if isinstance(query, Window) else np.asarray(query, dtype=float)


def _column_sq(index: NeighborIndex, q: np.ndarray) -> np.ndarray:
    diff = index.windows - q
    return np.einsum("nwd,nwd->nd", diff, diff)


def _masked_input_dist(col_sq: np.ndarray, j: Optional[int]) -> np.ndarray:
    cs = col_sq.copy()
    if j is not None:
        cs[:, j] = 0.0  # exact zero: result independent of the query's column j
    return np.sqrt(cs.sum(axis=1))


def query_embedding(index: NeighborIndex, q: np.ndarray, j: Optional[int]) -> np.ndarray:
    if j is None or index.shared:
        if isinstance(index.embedding, ImportedEmbedding):
            raise RetrievalError("imported embeddings are queried by window id")
        return index.embedding.embed(q)
    masked = q.copy()
    masked[:, j] = 0.0
    return index.embedding.embed(masked)


def _embedded_dist(Zref: np.ndarray, zq: np.ndarray) -> np.ndarray:
    diff = Zref - zq
    return np.sqrt(np.einsum("nk,nk->n", diff, diff))


def distances(index: NeighborIndex, query, j: Optional[int], query_id: Optional[int] = None) -> np.ndarray:
    """Conditional distance from the query to every reference for sensor j."""
    q = _query_array(query)
    if q.shape != (index.w, index.d):
        raise RetrievalError(f"query shape {q.shape} != ({index.w}, {index.d})")
    if j is not None and not 0 <= j < index.d:
        raise RetrievalError(f"sensor index {j} out of range for d={index.d}")
    if index.space == "input":
        return _masked_input_dist(_column_sq(index, q), None if index.shared else j)
    if isinstance(index.embedding, ImportedEmbedding):
        if query_id is None:
            query_id = query.start if isinstance(query, Window) else None
        if query_id is None:
            raise RetrievalError("imported embeddings need the query's window id")
        zq = index.embedding.lookup([query_id])[0]
        return _embedded_dist(index.ref_embeddings, zq)
    zq = query_embedding(index, q, j)
    Zref = index.ref_embeddings if (j is None or index.shared) else index.masked_reference_embeddings(j)
    return _embedded_dist(Zref, zq)


def knn_conditional(index: NeighborIndex, query, j: int, K: int,
                    query_id: Optional[int] = None) -> NeighborQueryResult:
    if K < 1 or K > index.size:
        raise RetrievalError(f"K={K} outside [1, {index.size}]")
    if not 0 <= j < index.d:
        raise RetrievalError(f"sensor index {j} out of range for d={index.d}")
    dist = distances(index, query, j, query_id)
    idx = k_smallest(dist, K)
    return NeighborQueryResult(idx, dist[idx])


def knn_conditional_all(index: NeighborIndex, query, K: int,
                        query_id: Optional[int] = None) -> list[NeighborQueryResult]:
    """knn_conditional for every sensor, sharing the per-column work in input space."""
    if K < 1 or K > index.size:
        raise RetrievalError(f"K={K} outside [1, {index.size}]")
    q = _query_array(query)
    if index.space == "input":
        if q.shape != (index.w, index.d):
            raise RetrievalError(f"query shape {q.shape} != ({index.w}, {index.d})")
        col_sq = _column_sq(index, q)
        out = []
        for j in range(index.d):
            dist = _masked_input_dist(col_sq, None if index.shared else j)
            idx = k_smallest(dist, K)
            out.append(NeighborQueryResult(idx, dist[idx]))
        return out
    return [knn_conditional(index, query, j, K, query_id) for j in range(index.d)]


def knn_unconditional(index: NeighborIndex, K: int, seed, query=None,
                      j: Optional[int] = None) -> NeighborQueryResult:
    """K distinct uniform draws from the reference set.

    With a query and sensor, the draws are reported with their masked-context
    distances, sorted ascending; otherwise by position with zero distances.
    """
    if K < 1 or K > index.size:
        raise RetrievalError(f"K={K} outside [1, {index.size}]")
    rng = np.random.default_rng(seed)
    idx = rng.choice(index.size, size=K, replace=False)
    if query is None:
        idx = np.sort(idx)
        return NeighborQueryResult(idx, np.zeros(K))
    q = _query_array(query)
    if index.space == "input" or isinstance(index.embedding, ImportedEmbedding):
        diff = index.windows[idx] - q
        if j is not None:
            diff[:, :, j] = 0.0
        dist = np.sqrt(np.einsum("nwd,nwd->n", diff, diff))
    else:
        dist = _embedded_dist(
            index.ref_embeddings[idx] if j is None or index.shared
            else index.masked_reference_embeddings(j)[idx],
            query_embedding(index, q, j))
    order = np.lexsort((idx, dist))
    return NeighborQueryResult(idx[order], dist[order])


# ---------------------------------------------------------------------- cost

@dataclass
class CostReport:
    n_references: int
    window_dim: int
    k: int
    input_seconds: float
    embedded_seconds: float

    @property
    def speedup(self) -> float:
        return self.input_seconds / self.embedded_seconds if self.embedded_seconds > 0 else float("inf")

    def to_dict(self) -> dict:
        return {"N": self.n_references, "wd": self.window_dim, "k": self.k,
                "input_seconds_per_query": self.input_seconds,
                "embedded_seconds_per_query": self.embedded_seconds, "speedup": self.speedup}


def query_cost_probe(index: NeighborIndex, queries: Sequence, j: int = 0, K: int = 3,
                     repetitions: int = 5) -> CostReport:
    """Mean per-query wall time of input-space vs embedded-space conditional KNN.

    The embedded timing excludes embedding the query's masked variant and uses a
    warm masked-reference cache, i.e. it measures the O(Nk) scan alone.
    """
    if not len(queries):
        raise RetrievalError("need at least one query")
    if index.embedding is None or isinstance(index.embedding, ImportedEmbedding):
        raise RetrievalError("cost probe needs an index with a masking-capable embedding")
    qs = [_query_array(q) for q in queries]
    Zref = index.masked_reference_embeddings(j)
    zqs = [query_embedding(index, q, j) for q in qs]

    def run_input():
        for q in qs:
            k_smallest(_masked_input_dist(_column_sq(index, q), j), K)

    def run_embedded():
        for zq in zqs:
            k_smallest(_embedded_dist(Zref, zq), K)

    run_input(); run_embedded()  # warm-up
    best_in, best_emb = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter(); run_input(); best_in.append(time.perf_counter() - t0)
        t0 = time.perf_counter(); run_embedded(); best_emb.append(time.perf_counter() - t0)
    n = len(qs)
    return CostReport(index.size, index.w * index.d, index.embedding.k,
                      float(np.mean(best_in)) / n, float(np.mean(best_emb)) / n)
