"""Window embeddings g: R^{w x d} -> R^k used for neighbor retrieval.

Three variants: PCA projection, a small VAE (posterior-mean embedding), and
tables imported from CSV (e.g. produced by an external manifold learner).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import nn
from .data import MaskedContext, Window, write_text_atomic
from .detector import _fit_pca

log = logging.getLogger(__name__)

EMBEDDING_MAGIC = "condattr-embedding"


class EmbeddingError(RuntimeError):
    pass


def _flatten(x) -> tuple[np.ndarray, bool]:
    """Accept Window, MaskedContext, a (w, d) window, an (n, w, d) batch or a flat
    vector; return an (n, w*d) array and whether the input was a single window."""
    if isinstance(x, MaskedContext):
        x = x.representation
    elif isinstance(x, Window):
        x = x.data
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 3:
        return arr.reshape(arr.shape[0], -1), False
    if arr.ndim == 2:
        return arr.reshape(1, -1), True
    if arr.ndim == 1:
        return arr[None, :], True
    raise ValueError(f"cannot embed array of shape {arr.shape}")


class Embedding:
    k: int
    w: int
    d: int
    # imported tables are keyed by window id and cannot embed arbitrary (masked) inputs
    supports_masking = True

    def embed(self, x):
        X, single = _flatten(x)
        if X.shape[1] != self.w * self.d:
            raise ValueError(f"input of width {X.shape[1]} for embedding over {self.w}x{self.d}")
        Z = self._embed_flat(X)
        return Z[0] if single else Z

    def _embed_flat(self, X):
        raise NotImplementedError


class PcaEmbedding(Embedding):
    def __init__(self, mean, basis, w, d, variances=None):
        self.mean = np.asarray(mean, float)
        self.basis = np.asarray(basis, float)
        self.variances = None if variances is None else np.asarray(variances, float)
        self.w, self.d = int(w), int(d)
        self.k = self.basis.shape[0]

    def _embed_flat(self, X):
        # row-wise einsum: embedding a window alone or in a batch gives identical bits
        return np.einsum("ij,kj->ik", X - self.mean, self.basis)

    def to_dict(self):
        return {"variant": "pca", "w": self.w, "d": self.d, "k": self.k,
                "mean": self.mean.tolist(), "basis": self.basis.ravel().tolist(),
                "variances": None if self.variances is None else self.variances.tolist()}


def fit_pca_embedding(normal_windows, k: int = 8) -> PcaEmbedding:
    arr = np.asarray(normal_windows, float)
    if arr.ndim != 3:
        raise ValueError("expected (n, w, d) windows")
    n, w, d = arr.shape
    if k > w * d:
        raise ValueError(f"k={k} exceeds window dimension {w * d}")
    if n < k:
        raise EmbeddingError(f"insufficient samples: {n} windows for k={k}")
    mean, basis, var = _fit_pca(arr.reshape(n, -1), k)
    return PcaEmbedding(mean, basis, w, d, var)


# ---------------------------------------------------------------------------- VAE

@dataclass
class VaeLossBreakdown:
    total: float
    rec: float
    kl: float
    time: float


class VaeEmbedding(Embedding):
    """Encoder emits [mu, log sigma^2] (2L outputs); the embedding is mu."""

    def __init__(self, encoder: nn.DenseNet, decoder: nn.DenseNet, w, d,
                 lam_rec=3.0, lam_kl=1.0, lam_time=1.0, history=None):
        self.encoder, self.decoder = encoder, decoder
        self.w, self.d = int(w), int(d)
        self.k = decoder.input_dim
        if encoder.output_dim != 2 * self.k:
            raise ValueError("encoder must output 2 * latent_dim values")
        self.lam_rec, self.lam_kl, self.lam_time = lam_rec, lam_kl, lam_time
        self.history = list(history or [])

    def encode(self, X):
        out, _ = nn.forward(self.encoder, X)
        return out[..., :self.k], out[..., self.k:]

    def _embed_flat(self, X):
        return self.encode(X)[0]

    def to_dict(self):
        return {"variant": "vae", "w": self.w, "d": self.d, "k": self.k,
                "encoder": nn.net_to_dict(self.encoder), "decoder": nn.net_to_dict(self.decoder),
                "lambda": [self.lam_rec, self.lam_kl, self.lam_time], "history": self.history}


def vae_objective(emb: VaeEmbedding, X: np.ndarray, eps: np.ndarray, with_grads: bool = True):
    """Summed loss over a batch of flattened windows and its parameter gradients.

    ``eps`` is the reparameterization noise, shape (n, L); z = mu + exp(logvar/2) * eps.
    Returns (VaeLossBreakdown, encoder grads, decoder grads).
    """
    n = X.shape[0]
    L = emb.k
    enc_out, enc_cache = nn.forward(emb.encoder, X)
    mu, logvar = enc_out[:, :L], enc_out[:, L:]
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    Xh, dec_cache = nn.forward(emb.decoder, z)
    if not (np.all(np.isfinite(logvar)) and np.all(np.isfinite(Xh))):
        raise nn.TrainingError("non-finite VAE intermediate")

    diff = X - Xh
    rec = float(np.sum(diff * diff))
    var = np.exp(logvar)
    kl = float(-0.5 * np.sum(1.0 + logvar - mu * mu - var))
    D = emb.d
    m_diff = (X.reshape(n, emb.w, D).mean(axis=2) - Xh.reshape(n, emb.w, D).mean(axis=2))
    time = float(np.sum(m_diff * m_diff))
    total = emb.lam_rec * rec + emb.lam_kl * kl + emb.lam_time * time
    breakdown = VaeLossBreakdown(total, rec, kl, time)
    if not with_grads:
        return breakdown, None, None

    g_xh = -2.0 * emb.lam_rec * diff
    g_xh += np.repeat(-2.0 * emb.lam_time * m_diff / D, D, axis=1)
    dec_grads, g_z = nn.backward(emb.decoder, dec_cache, g_xh)
    g_mu = g_z + emb.lam_kl * mu
    g_logvar = g_z * eps * 0.5 * std + emb.lam_kl * (-0.5) * (1.0 - var)
    enc_grads, _ = nn.backward(emb.encoder, enc_cache, np.hstack([g_mu, g_logvar]))
    return breakdown, enc_grads, dec_grads


def vae_loss(emb: VaeEmbedding, window, eps: Optional[np.ndarray] = None) -> VaeLossBreakdown:
    """Loss for one window; without ``eps`` the latent is the posterior mean."""
    X, _ = _flatten(window)
    eps = np.zeros((X.shape[0], emb.k)) if eps is None else np.asarray(eps, float).reshape(X.shape[0], emb.k)
    return vae_objective(emb, X, eps, with_grads=False)[0]


def vae_gradient_check(emb: VaeEmbedding, X, eps, h: float = 1e-5,
                       tolerance: float = 1e-4) -> nn.GradCheckReport:
    """Backprop gradients of the total loss against central differences on every parameter."""
    X, _ = _flatten(X)
    eps = np.asarray(eps, float).reshape(X.shape[0], emb.k)
    _, g_enc, g_dec = vae_objective(emb, X, eps)
    analytic = nn.flat_grads(g_enc) + nn.flat_grads(g_dec)
    params = emb.encoder.params() + emb.decoder.params()
    numeric = nn.numeric_grads(lambda: vae_objective(emb, X, eps, with_grads=False)[0].total,
                               params, h)
    return nn.compare_grads(analytic, numeric, tolerance)


def build_vae(w, d, latent=8, hidden=(64, 32), activation="tanh", seed=0,
              lam_rec=3.0, lam_kl=1.0, lam_time=1.0) -> VaeEmbedding:
    p = w * d
    hidden = list(hidden)
    enc_sizes = [p] + hidden + [2 * latent]
    dec_sizes = [latent] + hidden[::-1] + [p]
    enc = nn.DenseNet.build(enc_sizes, [activation] * len(hidden) + ["linear"], seed=seed)
    dec = nn.DenseNet.build(dec_sizes, [activation] * len(hidden) + ["linear"], seed=seed + 1)
    return VaeEmbedding(enc, dec, w, d, lam_rec, lam_kl, lam_time)


def train_vae(normal_windows, latent=8, hidden=(64, 32), activation="tanh",
              lambdas=(3.0, 1.0, 1.0), config: Optional[nn.TrainConfig] = None) -> VaeEmbedding:
    arr = np.asarray(normal_windows, float)
    n, w, d = arr.shape
    X = arr.reshape(n, -1)
    config = config or nn.TrainConfig()
    emb = build_vae(w, d, latent, hidden, activation, config.seed, *lambdas)
    rng = np.random.default_rng(config.seed)
    params = emb.encoder.params() + emb.decoder.params()
    opt = nn.Optimizer(params, config)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        eps_all = rng.standard_normal((n, latent))  # one noise draw per window per epoch
        total = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            try:
                br, g_enc, g_dec = vae_objective(emb, X[idx], eps_all[idx])
            except nn.TrainingError as exc:
                raise EmbeddingError(f"VAE diverged at epoch {epoch}: {exc}") from exc
            if not math.isfinite(br.total):
                raise EmbeddingError(f"VAE diverged at epoch {epoch}: non-finite loss")
            total += br.total
            scale = 1.0 / len(idx)
            grads = [g * scale for g in nn.flat_grads(g_enc) + nn.flat_grads(g_dec)]
            opt.step(grads)
        history.append(total / n)
        log.debug("vae epoch %d loss %.6g", epoch, history[-1])
    emb.history = history
    return emb


# ------------------------------------------------------------------- imported

class ImportedEmbedding(Embedding):
    """Lookup table keyed by window id (the window's start index)."""

    supports_masking = False

    def __init__(self, table: dict, k: int):
        self.table = table
        self.k = int(k)
        self.w = self.d = None

    def lookup(self, window_ids) -> np.ndarray:
        try:
            return np.array([self.table[int(i)] for i in window_ids], dtype=float).reshape(-1, self.k)
        except KeyError as exc:
            raise EmbeddingError(f"window id {exc.args[0]} not in imported table") from None

    def embed(self, x):
        if isinstance(x, Window):
            return self.lookup([x.start])[0]
        if isinstance(x, MaskedContext):
            raise EmbeddingError("imported embeddings cannot embed masked contexts")
        if isinstance(x, (int, np.integer)):
            return self.lookup([x])[0]
        return self.lookup(x)


def import_embeddings(path) -> ImportedEmbedding:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "window_id" or len(header) < 2:
            raise EmbeddingError(f"{path}: header must start with window_id")
        k = len(header) - 1
        table = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != k + 1:
                raise EmbeddingError(f"{path}:{lineno}: ragged row ({len(row)} fields, expected {k + 1})")
            wid = int(row[0])
            if wid in table:
                raise EmbeddingError(f"{path}:{lineno}: duplicate window_id {wid}")
            table[wid] = [float(v) for v in row[1:]]
    return ImportedEmbedding(table, k)


def export_embeddings(path, window_ids, vectors, digits: int = 17) -> None:
    vectors = np.asarray(vectors, float)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fmt = f"{{:.{digits}g}}"
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_id"] + [f"e{i}" for i in range(vectors.shape[1])])
        for wid, vec in zip(window_ids, vectors):
            w.writerow([int(wid)] + [fmt.format(v) for v in vec])
    tmp.replace(path)


# ---------------------------------------------------------------- persistence

def save_embedding(emb: Embedding, path) -> None:
    if isinstance(emb, ImportedEmbedding):
        raise EmbeddingError("imported embeddings are persisted as their CSV table")
    doc = {"format": EMBEDDING_MAGIC, "version": 1, **emb.to_dict()}
    write_text_atomic(path, json.dumps(doc))


def load_embedding(path) -> Embedding:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != EMBEDDING_MAGIC:
        raise EmbeddingError(f"{path}: not an embedding file")
    w, d, k = doc["w"], doc["d"], doc["k"]
    if doc["variant"] == "pca":
        var = doc.get("variances")
        return PcaEmbedding(np.array(doc["mean"]), np.array(doc["basis"]).reshape(k, w * d), w, d,
                            None if var is None else np.array(var))
    if doc["variant"] == "vae":
        return VaeEmbedding(nn.net_from_dict(doc["encoder"]), nn.net_from_dict(doc["decoder"]),
                            w, d, *doc["lambda"], history=doc.get("history"))
    raise EmbeddingError(f"unknown embedding variant {doc['variant']!r}")
