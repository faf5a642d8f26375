"""End-to-end orchestration: data -> detector/embedding -> index -> attribution -> metrics."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import attribution as attr
from . import detector as det
from . import embedding as emb
from . import nn
from .config import RunConfig, SynthConfig
from .data import (LabeledDataset, NormalizationStats, SeriesMatrix, apply_normalization,
                   fit_normalization, load_csv, Window, load_labels, stack_windows, window_starts,
                   write_text_atomic)
from .metrics import EventEvaluation, evaluate_dataset, evaluate_event, rank_attribution
from .retrieval import NeighborIndex, build_index
from .synth import LatentFactorSystem, generate, inject_many, plan_events

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------- data

def synth_dataset(sc: SynthConfig) -> tuple[LabeledDataset, list]:
    system = LatentFactorSystem.random(sc.d, sc.r, seed=sc.seed, noise_scale=sc.noise_scale,
                                       factor_smoothness=sc.factor_smoothness, offset=sc.offset)
    clean = generate(system, sc.T)
    train = clean.values[:sc.train_end]
    specs = plan_events(sc.T, sc.train_end, sc.n_per_kind * len(sc.kinds), tuple(sc.duration),
                        sc.gap, sc.d, seed=sc.seed + 1, kinds=sc.kinds, magnitude=sc.magnitude)
    series, events = inject_many(clean, specs, scale=train.std(axis=0), center=train.mean(axis=0))
    return LabeledDataset(series, events, (0, sc.train_end)), specs


def load_dataset(cfg: RunConfig) -> tuple[LabeledDataset, list]:
    """Raw (un-normalized) dataset and, for synthetic runs, the injection kinds per event."""
    if cfg.synth is not None:
        ds, specs = synth_dataset(cfg.synth)
        kinds = [s.kind for s in specs]
        if cfg.train_range is not None:
            ds = LabeledDataset(ds.series, ds.events, tuple(cfg.train_range))
        return ds, kinds
    series = load_csv(cfg.series_csv, cfg.has_timestamp)
    events = load_labels(cfg.labels_json, series) if cfg.labels_json else []
    if cfg.train_range is None:
        raise ValueError("train_range is required for CSV input")
    return LabeledDataset(series, events, tuple(cfg.train_range)), [None] * len(events)


def normalized(ds: LabeledDataset) -> tuple[LabeledDataset, NormalizationStats]:
    stats = fit_normalization(ds.series, ds.train_range)
    return LabeledDataset(apply_normalization(ds.series, stats), ds.events, ds.train_range), stats


# ----------------------------------------------------------------- artifacts

@dataclass
class Artifacts:
    detector: det.Detector
    threshold: float
    embedding: Optional[emb.Embedding]
    stats: NormalizationStats


def _train_config(spec: dict, seed: int) -> nn.TrainConfig:
    return nn.TrainConfig(learning_rate=spec.get("learning_rate", 1e-3),
                          epochs=spec.get("epochs", 200), batch_size=spec.get("batch_size", 64),
                          seed=spec.get("seed", seed), optimizer=spec.get("optimizer", "adam"))


def train_artifacts(cfg: RunConfig, ds: LabeledDataset, stats: NormalizationStats) -> Artifacts:
    """Fit detector, threshold and embedding on the normal split of a normalized dataset."""
    lo, hi = ds.train_range
    ds.assert_normal_range(lo, hi)
    starts = window_starts(hi, cfg.w, cfg.stride, lo=lo)
    n_fit = max(1, int(round(len(starts) * (1 - cfg.holdout_fraction))))
    fit_w = stack_windows(ds.series, starts[:n_fit], cfg.w)
    hold = starts[n_fit:] if n_fit < len(starts) else starts
    spec = cfg.detector
    kind = spec.get("kind", "pca")
    if kind == "pca":
        detector = det.train_pca_detector(fit_w, int(spec.get("k_pca", 8)))
    elif kind == "ae":
        detector = det.train_ae_detector(fit_w, spec.get("hidden", [64, 32]),
                                         spec.get("activation", "tanh"),
                                         _train_config(spec, cfg.seed))
    elif kind == "external":
        detector = det.ExternalDetector(spec["command"], cfg.w, ds.series.d)
    else:
        raise ValueError(f"unknown detector kind {kind!r}")
    hold_scores = np.atleast_1d(detector.score(stack_windows(ds.series, hold, cfg.w)))
    threshold = det.choose_threshold(hold_scores, cfg.threshold_q)

    embedding = None
    espec = cfg.embedding
    if cfg.retrieval_space == "pca":
        embedding = emb.fit_pca_embedding(fit_w, int(espec.get("k", 8)))
    elif cfg.retrieval_space == "vae":
        embedding = emb.train_vae(fit_w, latent=int(espec.get("latent", 8)),
                                  hidden=espec.get("hidden", [64, 32]),
                                  lambdas=tuple(espec.get("lambdas", [3.0, 1.0, 1.0])),
                                  config=_train_config(espec, cfg.seed))
    elif cfg.retrieval_space == "imported":
        embedding = emb.import_embeddings(espec["path"])
    return Artifacts(detector, threshold, embedding, stats)


def save_artifacts(art: Artifacts, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    det.save_detector(art.detector, directory / "detector.json")
    if art.embedding is not None and not isinstance(art.embedding, emb.ImportedEmbedding):
        emb.save_embedding(art.embedding, directory / "embedding.json")
    meta = {"threshold": art.threshold, "mean": art.stats.mean.tolist(),
            "std": art.stats.std.tolist(), "constant": art.stats.constant_mask.tolist()}
    write_text_atomic(directory / "normalization.json", json.dumps(meta))


def load_artifacts(cfg: RunConfig, directory) -> Artifacts:
    directory = Path(directory)
    detector = det.load_detector(directory / "detector.json")
    meta = json.loads((directory / "normalization.json").read_text(encoding="utf-8"))
    stats = NormalizationStats(np.array(meta["mean"]), np.array(meta["std"]),
                               np.array(meta["constant"], dtype=bool))
    embedding = None
    if (directory / "embedding.json").exists():
        embedding = emb.load_embedding(directory / "embedding.json")
    elif cfg.retrieval_space == "imported":
        embedding = emb.import_embeddings(cfg.embedding["path"])
    return Artifacts(detector, float(meta["threshold"]), embedding, stats)


def make_index(cfg: RunConfig, ds: LabeledDataset, art: Artifacts) -> NeighborIndex:
    space = "input" if cfg.retrieval_space == "input" else "embedded"
    return build_index(ds, cfg.w, cfg.stride, space, art.embedding, cfg.shared_neighborhood)


# ------------------------------------------------------------------ per event

@dataclass
class EventResult:
    evaluation: EventEvaluation
    kind: Optional[str]
    windows: list              # [{"start", "score", "detected", "phi"}]
    evaluated_starts: list
    detected: bool
    first_detection: Optional[int]
    onset_estimate: Optional[int]
    timing: dict = field(default_factory=dict)


def event_window_starts(event, T: int, w: int) -> np.ndarray:
    lo = max(0, event.onset - w + 1)
    hi = min(T - w, event.end - 1)
    return np.arange(lo, hi + 1)


def analyse_event(cfg: RunConfig, ds: LabeledDataset, art: Artifacts, index: NeighborIndex,
                  event, kind=None) -> EventResult:
    series = ds.series
    w = cfg.w
    method = "conditional" if cfg.conditioning == "conditional" else "marginal"
    starts = event_window_starts(event, series.T, w)
    windows = stack_windows(series, starts, w)
    t0 = time.perf_counter()
    scores = np.atleast_1d(art.detector.score(windows))
    t_det = time.perf_counter() - t0
    flags = scores > art.threshold

    t0 = time.perf_counter()
    phis = {}
    for s, W in zip(starts, windows):
        sa = attr.sensor_attribution(art.detector, index, Window(int(s), W), cfg.K, method, cfg.seed)
        phis[int(s)] = sa.values
    t_attr = time.perf_counter() - t0

    ranked = {s: rank_attribution(p, cfg.signed_ranking) for s, p in phis.items()}
    if cfg.window_filter == "detected" and flags.any():
        evaluated = [int(s) for s, f in zip(starts, flags) if f]
    else:
        evaluated = [int(s) for s in starts]
    per_window = [(s, ranked[s]) for s in evaluated]

    first = int(starts[np.argmax(flags)]) if flags.any() else None
    onset_est = None
    tensor = None
    if first is not None:
        tensor = attr.attribution_tensor(art.detector, index, Window(first, series.values[first:first + w]),
                                         cfg.segment, cfg.K, method, cfg.seed)
        onset_est = attr.estimate_onset(tensor)

    ts_rankings = []
    for t in range(event.onset, event.end):
        s = max(0, t - w + 1)
        if cfg.timestep_ranking == "tensor":
            tt = attr.attribution_tensor(art.detector, index, Window(s, series.values[s:s + w]),
                                         cfg.segment, cfg.K, method, cfg.seed)
            ts_rankings.append(rank_attribution(tt.values[t - s], cfg.signed_ranking))
        else:
            ts_rankings.append(ranked[s])

    ev = evaluate_event(event, per_window, ts_rankings, cfg.metric_ks, cfg.beta, cfg.eps)
    rows = [{"start": int(s), "score": float(sc), "detected": bool(f), "phi": phis[int(s)].tolist()}
            for s, sc, f in zip(starts, scores, flags)]
    return EventResult(ev, kind, rows, evaluated, bool(flags.any()), first, onset_est,
                       {"detector_seconds": t_det, "attribution_seconds": t_attr})


# ----------------------------------------------------------------------- run

@dataclass
class RunResult:
    config: RunConfig
    dataset: LabeledDataset
    artifacts: Artifacts
    events: list
    report: dict
    timing: dict


def detection_quality(cfg: RunConfig, ds: LabeledDataset, art: Artifacts) -> dict:
    lo, hi = ds.train_range
    starts = np.array([s for s in window_starts(ds.series.T, cfg.w, 1)
                       if s >= hi or s + cfg.w <= lo])
    if starts.size == 0:
        return {}
    scores = np.concatenate([np.atleast_1d(art.detector.score(stack_windows(ds.series, starts[i:i + 4096], cfg.w)))
                             for i in range(0, starts.size, 4096)])
    labels = np.array([any(ev.overlaps(s, s + cfg.w) for ev in ds.events) for s in starts])
    m = det.detection_metrics(labels, scores > art.threshold, scores)
    m["n_windows"] = int(starts.size)
    m["threshold"] = art.threshold
    return m


def run(cfg: RunConfig, artifacts: Optional[Artifacts] = None,
        dataset: Optional[tuple] = None) -> RunResult:
    timing = {"jobs": cfg.jobs}
    t0 = time.perf_counter()
    raw, kinds = dataset if dataset is not None else load_dataset(cfg)
    if artifacts is None:
        ds, stats = normalized(raw)
    else:
        ds = LabeledDataset(apply_normalization(raw.series, artifacts.stats), raw.events, raw.train_range)
        stats = artifacts.stats
    timing["load_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    art = artifacts or train_artifacts(cfg, ds, stats)
    timing["train_seconds"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    index = make_index(cfg, ds, art)
    timing["index_seconds"] = time.perf_counter() - t0

    t0 = time.perf_counter()

    def one(i):
        return analyse_event(cfg, ds, art, index, ds.events[i], kinds[i] if i < len(kinds) else None)

    n = len(ds.events)
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(one, range(n)))
    else:
        results = [one(i) for i in range(n)]
    timing["events_seconds"] = time.perf_counter() - t0
    timing["detector_seconds"] = sum(r.timing["detector_seconds"] for r in results)
    timing["attribution_seconds"] = sum(r.timing["attribution_seconds"] for r in results)

    report = build_report(cfg, ds, art, results)
    report["timing"] = timing
    return RunResult(cfg, ds, art, results, report, timing)


def build_report(cfg: RunConfig, ds: LabeledDataset, art: Artifacts, results) -> dict:
    names = ds.series.sensor_names
    # jobs only changes scheduling, never results, so it is reported with the timings
    echo = {k: v for k, v in cfg.to_dict().items() if k != "jobs"}
    doc = {"config": echo, "detector": detection_quality(cfg, ds, art)}
    if results:
        metrics = evaluate_dataset([r.evaluation for r in results]).to_json(names)
        for i, (row, r) in enumerate(zip(metrics["per_event"], results)):
            row["id"] = i + 1
            row["kind"] = r.kind
            row["detected"] = r.detected
            row["first_detection"] = r.first_detection
            row["onset_estimate"] = r.onset_estimate
            row["evaluated_starts"] = r.evaluated_starts
            row["windows"] = r.windows
        doc.update(metrics)
    else:
        doc.update({"per_event": [], "dataset": {}})
    return doc


def report_without_timing(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "timing"}


def report_table(report: dict, K: int = 3) -> str:
    """Per-event table: Event #, Top@KR, CW@K, TempHM@K, FeatureID."""
    k = str(K)
    lines = [f"{'Event #':<8} {'Top@' + k + 'R':>8} {'CW@' + k:>8} {'TempHM@' + k:>9}  FeatureID",
             "-" * 56]
    for row in report.get("per_event", []):
        ident = row["identified"].get(k) or []
        lines.append(f"{row['id']:<8} {row['recall'][k]:>8.3f} {row['cw_rcs'][k]:>8.3f} "
                     f"{row['temporal_hm'][k]:>9.3f}  {', '.join(ident) if ident else '---'}")
    ds = report.get("dataset") or {}
    for level in ("window_level", "event_level"):
        agg = ds.get(level)
        if not agg:
            continue
        hm = agg.get("temporal_hm", {}).get(k)
        lines.append(f"{level:<13}Top@{k}R={agg['recall'][k]:.3f} CW@{k}={agg['cw_rcs'][k]:.3f}"
                     + (f" TempHM@{k}={hm:.3f}" if hm is not None else ""))
    return "\n".join(lines)


# ----------------------------------------------------------- standalone probes

def bias_bound_trials(n_trials: int = 100, d: int = 10, w: int = 20, K: int = 8,
                      seed: int = 0, r: int = 2, T_normal: int = 500) -> list[attr.BiasBoundReport]:
    """Random linear detectors on latent-factor data; one bias-bound check per trial.

    Each trial draws a fresh system, indexes its normal prefix, shifts one
    sensor after the prefix and checks the bound for that sensor on a window
    covering the shift.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for trial in range(n_trials):
        system = LatentFactorSystem.random(d, r, seed=int(rng.integers(2**31)), offset=0.0)
        clean = generate(system, T_normal + 3 * w)
        j = int(rng.integers(d))
        onset = T_normal + w
        x = clean.values.copy()
        x[onset:, j] += 3.0 * clean.values[:T_normal, j].std()
        series = clean.with_values(x)
        index = NeighborIndex(stack_windows(series, window_starts(T_normal, w, 1), w),
                              window_starts(T_normal, w, 1), "input")
        start = onset - w // 2
        A = rng.standard_normal((w, d))
        detector = det.LinearDetector(A, float(rng.standard_normal()))
        window = Window(start, series.values[start:start + w])
        reports.append(attr.check_bias_bound(detector, index, window, j, K, seed=seed + trial))
    return reports


def cost_probe_scenario(N: int = 10000, w: int = 50, d: int = 10, k: int = 8,
                        n_queries: int = 20, seed: int = 0, repetitions: int = 5):
    """Input-space vs embedded-space KNN timing on N latent-factor windows."""
    from .retrieval import query_cost_probe

    system = LatentFactorSystem.random(d, min(2, d - 1), seed=seed)
    series = generate(system, N + w - 1 + n_queries)
    starts = window_starts(N + w - 1, w, 1)
    windows = stack_windows(series, starts, w)
    embedding = emb.fit_pca_embedding(windows[:: max(1, N // 2000)], k)
    index = NeighborIndex(windows, starts, "embedded", embedding)
    q_starts = np.arange(N, N + n_queries)
    queries = stack_windows(series, q_starts, w)
    return query_cost_probe(index, list(queries), j=0, K=3, repetitions=repetitions)
