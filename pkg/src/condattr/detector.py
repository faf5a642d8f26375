"""Anomaly detectors f: R^{w x d} -> R, thresholds and detection metrics.

Windows are flattened row-major (time-major) to vectors of length w*d.
"""

from __future__ import annotations

import json
import logging
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import nn
from .data import write_text_atomic

log = logging.getLogger(__name__)

DETECTOR_MAGIC = "condattr-detector"


class DetectorError(RuntimeError):
    pass


def _as_batch(windows) -> tuple[np.ndarray, bool]:
    arr = np.asarray(windows, dtype=float)
    if arr.ndim == 2:
        return arr[None], True
    if arr.ndim != 3:
        raise ValueError(f"expected (w, d) or (n, w, d) windows, got shape {arr.shape}")
    return arr, False


class Detector:
    """Base class: subclasses implement ``_score_flat`` on an (n, w*d) array."""

    w: int
    d: int
    metadata: dict

    def score(self, windows):
        batch, single = _as_batch(windows)
        if batch.shape[1:] != (self.w, self.d):
            raise ValueError(f"window shape {batch.shape[1:]} != trained ({self.w}, {self.d})")
        if batch.shape[0] == 0:
            return np.zeros(0)
        s = self._score_flat(batch.reshape(batch.shape[0], -1))
        return float(s[0]) if single else s

    def _score_flat(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def lipschitz(self, j: int) -> float:
        raise DetectorError(f"{type(self).__name__} has no known Lipschitz constant")

    def to_dict(self) -> dict:
        raise DetectorError(f"{type(self).__name__} is not persistable")


def _fit_pca(X: np.ndarray, k: int):
    """Top-k principal directions (rows, orthonormal) and their explained variances."""
    n, p = X.shape
    if k < 1 or k > p:
        raise ValueError(f"need 1 <= k <= {p}, got {k}")
    if n < k:
        raise ValueError(f"degenerate covariance: {n} samples for {k} components")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, Vt = np.linalg.svd(Xc, full_matrices=False)
    basis = Vt[:k]
    # sign convention: largest-magnitude entry of each direction is positive
    signs = np.sign(basis[np.arange(k), np.abs(basis).argmax(axis=1)])
    basis = basis * signs[:, None]
    var = (s[:k] ** 2) / n
    return mean, basis, var


class PcaDetector(Detector):
    """Squared residual norm after projection onto the principal subspace."""

    def __init__(self, mean, basis, w, d, metadata=None):
        self.mean = np.asarray(mean, float)
        self.basis = np.asarray(basis, float)
        self.w, self.d = int(w), int(d)
        self.metadata = dict(metadata or {})

    def _score_flat(self, X):
        # einsum runs row by row, so a window's score does not depend on its batch
        Xc = X - self.mean
        coef = np.einsum("ij,kj->ik", Xc, self.basis)
        resid = Xc - np.einsum("ik,kj->ij", coef, self.basis)
        return np.einsum("ij,ij->i", resid, resid)

    def to_dict(self):
        return {"variant": "pca", "w": self.w, "d": self.d, "mean": self.mean.tolist(),
                "basis": self.basis.ravel().tolist(), "k": self.basis.shape[0],
                "metadata": self.metadata}


def train_pca_detector(normal_windows, k_pca: int, metadata=None) -> PcaDetector:
    batch, _ = _as_batch(normal_windows)
    n, w, d = batch.shape
    if k_pca > min(n, w * d):
        raise ValueError(f"degenerate covariance: k_pca={k_pca} > min({n}, {w * d})")
    mean, basis, _ = _fit_pca(batch.reshape(n, -1), k_pca)
    meta = {"trained_on": n, "k_pca": k_pca, **(metadata or {})}
    return PcaDetector(mean, basis, w, d, meta)


class AeDetector(Detector):
    """Squared reconstruction error of a dense autoencoder."""

    def __init__(self, net: nn.DenseNet, w, d, metadata=None):
        self.net = net
        self.w, self.d = int(w), int(d)
        self.metadata = dict(metadata or {})

    def _score_flat(self, X):
        rec, _ = nn.forward(self.net, X)
        diff = X - rec
        return np.einsum("ij,ij->i", diff, diff)

    def to_dict(self):
        return {"variant": "ae", "w": self.w, "d": self.d, "net": nn.net_to_dict(self.net),
                "metadata": self.metadata}


def train_ae_detector(normal_windows, hidden=(64, 32), activation="tanh",
                      config: Optional[nn.TrainConfig] = None, metadata=None) -> AeDetector:
    """``hidden`` lists encoder widths; the decoder mirrors them."""
    batch, _ = _as_batch(normal_windows)
    n, w, d = batch.shape
    p = w * d
    hidden = list(hidden)
    sizes = [p] + hidden + hidden[-2::-1] + [p]
    acts = [activation] * (len(sizes) - 2) + ["linear"]
    config = config or nn.TrainConfig()
    net = nn.DenseNet.build(sizes, acts, seed=config.seed)
    X = batch.reshape(n, -1)
    try:
        net, history = nn.train(net, X, nn.mse_loss, config)
    except nn.TrainingError as exc:
        raise DetectorError(f"autoencoder training diverged: {exc}") from exc
    meta = {"trained_on": n, "hidden": hidden, "final_loss": history[-1] if history else None,
            **(metadata or {})}
    return AeDetector(net, w, d, meta)


class LinearDetector(Detector):
    """f(W) = <A, W> + c; exactly L-Lipschitz in column j with L = ||A[:, j]||_2."""

    def __init__(self, A, offset: float = 0.0, metadata=None):
        self.A = np.asarray(A, float)
        self.w, self.d = self.A.shape
        self.offset = float(offset)
        self.metadata = dict(metadata or {})

    def _score_flat(self, X):
        return X @ self.A.ravel() + self.offset

    def lipschitz(self, j):
        return float(np.linalg.norm(self.A[:, j]))

    def to_dict(self):
        return {"variant": "linear", "w": self.w, "d": self.d,
                "A": self.A.ravel().tolist(), "offset": self.offset, "metadata": self.metadata}


class FunctionDetector(Detector):
    """Wraps a per-window callable ``fn(window) -> float``."""

    def __init__(self, fn: Callable[[np.ndarray], float], w, d, metadata=None):
        self.fn = fn
        self.w, self.d = int(w), int(d)
        self.metadata = dict(metadata or {})

    def _score_flat(self, X):
        return np.array([float(self.fn(x.reshape(self.w, self.d))) for x in X])


# --------------------------------------------------------------- external process

class ExternalDetector(Detector):
    """Scores windows through a subprocess speaking line-delimited JSON.

    request  {"type":"score","w":..,"d":..,"windows":[[row-major floats], ...]}
    response {"scores":[...]}
    """

    retries = 2

    def __init__(self, command: Sequence[str], w: int, d: int, metadata=None, batch_size=512):
        self.command = list(command)
        self.w, self.d = int(w), int(d)
        self.batch_size = batch_size
        self.metadata = dict(metadata or {})
        self._lock = threading.Lock()
        self._proc = None
        self.info = None

    def _start(self):
        self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)
        self.info = self._roundtrip({"type": "hello"})
        if "name" not in self.info:
            raise DetectorError(f"bad handshake from {self.command}: {self.info}")

    def _roundtrip(self, msg: dict) -> dict:
        proc = self._proc
        proc.stdin.write(json.dumps(msg) + "\n")
        proc.stdin.flush()
        line = proc.stdout.readline()
        if not line:
            raise DetectorError(f"external detector exited (code {proc.poll()})")
        return json.loads(line)

    def _score_chunk(self, X):
        msg = {"type": "score", "w": self.w, "d": self.d, "windows": X.tolist()}
        last = None
        for attempt in range(self.retries + 1):
            try:
                if self._proc is None or self._proc.poll() is not None:
                    self._start()
                reply = self._roundtrip(msg)
                scores = reply.get("scores")
                if scores is None or len(scores) != X.shape[0]:
                    raise DetectorError(f"expected {X.shape[0]} scores, got {reply}")
                out = np.array(scores, dtype=float)
                if not np.all(np.isfinite(out)):
                    raise DetectorError("external detector returned non-finite scores")
                return out
            except (DetectorError, OSError, ValueError) as exc:
                last = exc
                log.warning("external detector attempt %d failed: %s", attempt + 1, exc)
                self._kill()
        raise DetectorError(f"external detector failed after {self.retries} retries: {last}")

    def _score_flat(self, X):
        with self._lock:
            parts = [self._score_chunk(X[s:s + self.batch_size])
                     for s in range(0, X.shape[0], self.batch_size)]
        return np.concatenate(parts)

    def _kill(self):
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except OSError:
                pass
            self._proc = None

    def close(self):
        with self._lock:
            if self._proc is not None and self._proc.poll() is None:
                try:
                    self._proc.stdin.close()
                    self._proc.wait(timeout=5)
                except (OSError, subprocess.TimeoutExpired):
                    self._proc.kill()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def to_dict(self):
        return {"variant": "external", "w": self.w, "d": self.d, "command": self.command,
                "metadata": self.metadata}


def serve(scorer: Callable[[np.ndarray], np.ndarray], name: str, version: str = "1",
          stdin=None, stdout=None) -> None:
    """Run the worker side of the external protocol until stdin closes."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        msg = json.loads(line)
        if msg.get("type") == "hello":
            reply = {"name": name, "version": version}
        elif msg.get("type") == "score":
            X = np.asarray(msg["windows"], dtype=float).reshape(-1, msg["w"] * msg["d"])
            reply = {"scores": [float(s) for s in scorer(X)]}
        else:
            reply = {"error": f"unknown request type {msg.get('type')!r}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


# ------------------------------------------------------------------ persistence

def detector_from_dict(obj: dict) -> Detector:
    v = obj["variant"]
    w, d = obj["w"], obj["d"]
    meta = obj.get("metadata")
    if v == "pca":
        basis = np.array(obj["basis"], float).reshape(obj["k"], w * d)
        return PcaDetector(np.array(obj["mean"], float), basis, w, d, meta)
    if v == "ae":
        return AeDetector(nn.net_from_dict(obj["net"]), w, d, meta)
    if v == "linear":
        return LinearDetector(np.array(obj["A"], float).reshape(w, d), obj["offset"], meta)
    if v == "external":
        return ExternalDetector(obj["command"], w, d, meta)
    raise DetectorError(f"unknown detector variant {v!r}")


def save_detector(det: Detector, path) -> None:
    doc = {"format": DETECTOR_MAGIC, "version": 1, **det.to_dict()}
    write_text_atomic(path, json.dumps(doc))


def load_detector(path) -> Detector:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != DETECTOR_MAGIC:
        raise DetectorError(f"{path}: not a detector file")
    return detector_from_dict(doc)


# ------------------------------------------------------- thresholds and metrics

@dataclass(frozen=True)
class DetectionResult:
    scores: np.ndarray
    threshold: float
    flags: np.ndarray


def choose_threshold(scores, q: float = 0.995) -> float:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("no scores to threshold")
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    return float(np.quantile(scores, q))  # linear interpolation


def detect(detector: Detector, windows, threshold: float) -> DetectionResult:
    scores = np.atleast_1d(detector.score(windows))
    return DetectionResult(scores, float(threshold), scores > threshold)


def roc_auc(scores, labels) -> Optional[float]:
    """Mann-Whitney AUC with tied pairs counted as 1/2; None for single-class labels."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels, bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks give ties 1/2 credit
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def detection_metrics(labels, flags=None, scores=None) -> dict:
    labels = np.asarray(labels, bool)
    out = {}
    if flags is not None:
        flags = np.asarray(flags, bool)
        tp = int(np.sum(flags & labels))
        fp = int(np.sum(flags & ~labels))
        fn = int(np.sum(~flags & labels))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        out.update(precision=precision, recall=recall, f1=f1)
    if scores is not None:
        out["roc_auc"] = roc_auc(scores, labels)
    return out
