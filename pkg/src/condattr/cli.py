"""Command line entry point: ``condattr <subcommand> [--config cfg.json] [key=value ...]``.

Subcommands
-----------
inject       write a perturbed CSV and labels JSON
train        fit detector, threshold and embedding on the normal split
attribute    heatmap CSVs and sensor rankings for selected events
evaluate     full metrics report (JSON) plus the per-event table
sweep        one-axis ablation table (window_size, K, retrieval_space, conditioning)
probe-cost   input-space vs embedded-space KNN timing
check-bound  bias-bound verifier on random linear detectors
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attribution as attr
from . import pipeline as pl
from .config import RunConfig, SynthConfig, apply_overrides, default_jobs, load_config
from .data import (LabeledDataset, Window, load_csv, load_labels, save_csv, save_labels,
                   write_text_atomic)
from .metrics import rank_attribution
from .synth import InjectionSpec, inject_many

log = logging.getLogger("condattr")

SWEEP_AXES = {"window_size": "w", "K": "K", "retrieval_space": "retrieval_space",
              "conditioning": "conditioning"}
SWEEP_DEFAULTS = {"window_size": [5, 10, 20, 50, 100], "K": [1, 2, 3, 4, 5, 10],
                  "retrieval_space": ["input", "pca"],
                  "conditioning": ["conditional", "unconditional"]}


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def resolve_config(args) -> RunConfig:
    """Config file (or the default synthetic scenario), then overrides, then --jobs."""
    if args.config:
        cfg = load_config(args.config)
    else:
        cfg = RunConfig(synth=SynthConfig())
    cfg = apply_overrides(cfg, getattr(args, "overrides", None) or [])
    if getattr(args, "jobs", None) is not None:
        cfg = cfg.replace(jobs=max(1, args.jobs))
    return cfg


def _artifacts(cfg: RunConfig, args, dataset):
    directory = getattr(args, "artifacts", None) or cfg.artifacts_dir
    if directory and (Path(directory) / "detector.json").exists():
        log.info("loading artifacts from %s", directory)
        return pl.load_artifacts(cfg, directory)
    raw, _ = dataset
    ds, stats = pl.normalized(raw)
    return pl.train_artifacts(cfg, ds, stats)


# ------------------------------------------------------------------ commands

def cmd_inject(args) -> int:
    cfg = resolve_config(args)
    if args.input:
        series = load_csv(args.input, cfg.has_timestamp)
        if not args.spec:
            raise SystemExit("inject with --input needs --spec")
        raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        raw = raw if isinstance(raw, list) else [raw]
        specs = [InjectionSpec.from_json(obj, series) for obj in raw]
        lo, hi = cfg.train_range or (0, series.T)
        train = series.values[lo:hi]
        series, events = inject_many(series, specs, scale=train.std(axis=0), center=train.mean(axis=0))
        kinds = [s.kind for s in specs]
    else:
        if cfg.synth is None:
            raise SystemExit("inject needs --input or a synth config")
        ds, specs = pl.synth_dataset(cfg.synth)
        series, events, kinds = ds.series, ds.events, [s.kind for s in specs]
    order = sorted(range(len(events)), key=lambda i: events[i].onset)
    events = [events[i] for i in order]
    save_csv(series, args.out_csv)
    save_labels(events, series.sensor_names, args.out_labels)
    print(f"wrote {series.T}x{series.d} series to {args.out_csv} and "
          f"{len(events)} events to {args.out_labels}")
    if args.kinds_out:
        write_text_atomic(args.kinds_out, _dump([kinds[i] for i in order]))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = args.out or cfg.artifacts_dir
    if not out:
        raise SystemExit("train needs --out or artifacts_dir in the config")
    raw, _ = pl.load_dataset(cfg)
    ds, stats = pl.normalized(raw)
    art = pl.train_artifacts(cfg, ds, stats)
    pl.save_artifacts(art, out)
    write_text_atomic(Path(out) / "config.json", _dump(cfg.to_dict()))
    print(f"artifacts written to {out} (threshold {art.threshold:.6g})")
    return 0


def cmd_attribute(args) -> int:
    cfg = resolve_config(args)
    dataset = pl.load_dataset(cfg)
    art = _artifacts(cfg, args, dataset)
    raw, kinds = dataset
    ds = LabeledDataset(pl.apply_normalization(raw.series, art.stats), raw.events, raw.train_range)
    index = pl.make_index(cfg, ds, art)
    method = "conditional" if cfg.conditioning == "conditional" else "marginal"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ds.series.sensor_names

    targets = []
    if args.start is not None:
        targets.append((None, args.start))
    else:
        ids = args.event or list(range(1, len(ds.events) + 1))
        for eid in ids:
            if not 1 <= eid <= len(ds.events):
                raise SystemExit(f"event id {eid} outside 1..{len(ds.events)}")
            ev = ds.events[eid - 1]
            starts = pl.event_window_starts(ev, ds.series.T, cfg.w)
            scores = np.atleast_1d(art.detector.score(pl.stack_windows(ds.series, starts, cfg.w)))
            flagged = starts[scores > art.threshold]
            if args.window == "first" and flagged.size:
                targets.append((eid, int(flagged[0])))
            else:
                # first index of the maximum, so ties resolve to the earlier window
                targets.append((eid, int(starts[int(np.argmax(scores))])))

    summary = []
    for eid, start in targets:
        if not 0 <= start <= ds.series.T - cfg.w:
            raise SystemExit(f"window start {start} outside the series")
        window = Window(start, ds.series.values[start:start + cfg.w])
        tensor = attr.attribution_tensor(art.detector, index, window, cfg.segment, cfg.K, method,
                                         cfg.seed)
        sa = attr.sensor_attribution(art.detector, index, window, cfg.K, method, cfg.seed)
        ranked = rank_attribution(sa.values, cfg.signed_ranking)
        stem = f"event{eid}" if eid is not None else f"window{start}"
        attr.export_tensor(tensor, names, out / f"heatmap_{stem}.csv", method, cfg.K)
        summary.append({"event": eid, "kind": kinds[eid - 1] if eid else None,
                        "window_start": start, "phi": sa.values.tolist(),
                        "ranking": [names[j] for j in ranked.ranking],
                        "onset_estimate": attr.estimate_onset(tensor)})
        print(f"{stem}: top sensors {', '.join(names[j] for j in ranked.ranking[:3])}")
    write_text_atomic(out / "rankings.json", _dump({"config": cfg.to_dict(), "windows": summary}))
    return 0


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    dataset = pl.load_dataset(cfg)
    art = _artifacts(cfg, args, dataset)
    result = pl.run(cfg, art, dataset)
    report = result.report
    if args.out:
        write_text_atomic(args.out, _dump(report))
    if not args.quiet:
        for k in cfg.metric_ks:
            print(pl.report_table(report, k))
            print()
    return 0


def sweep(cfg: RunConfig, axis: str, values: Sequence, K_report: int = 3) -> list[dict]:
    """One row per axis value; artifacts are shared when the axis leaves them unchanged."""
    field_name = SWEEP_AXES[axis]
    dataset = pl.load_dataset(cfg)
    shared = None
    if axis in ("K", "conditioning"):
        raw, _ = dataset
        ds, stats = pl.normalized(raw)
        shared = pl.train_artifacts(cfg, ds, stats)
    rows = []
    k = str(K_report)
    for value in values:
        c = cfg.replace(**{field_name: value})
        if K_report not in c.metric_ks:
            c = c.replace(metric_ks=sorted(set(c.metric_ks) | {K_report}))
        rep = pl.run(c, shared, dataset).report
        ev = rep["dataset"]["event_level"]
        wl = rep["dataset"]["window_level"]
        rows.append({"axis": axis, "value": value,
                     f"Top@{k}R": ev["recall"][k], f"CW@{k}": ev["cw_rcs"][k],
                     f"TempHM@{k}": ev["temporal_hm"][k],
                     f"window_Top@{k}R": wl["recall"][k], f"window_CW@{k}": wl["cw_rcs"][k]})
    return rows


def sweep_table(rows: list[dict], K: int = 3) -> str:
    k = str(K)
    lines = [f"{'value':<14} {'Top@' + k + 'R':>8} {'CW@' + k:>8} {'TempHM@' + k:>9}", "-" * 42]
    for r in rows:
        lines.append(f"{str(r['value']):<14} {r['Top@' + k + 'R']:>8.3f} {r['CW@' + k]:>8.3f} "
                     f"{r['TempHM@' + k]:>9.3f}")
    return "\n".join(lines)


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    values = json.loads(args.values) if args.values else SWEEP_DEFAULTS[args.axis]
    rows = sweep(cfg, args.axis, values)
    if args.out:
        write_text_atomic(args.out, _dump({"config": cfg.to_dict(), "rows": rows}))
    print(sweep_table(rows))
    return 0


def cmd_probe_cost(args) -> int:
    rep = pl.cost_probe_scenario(args.n, args.w, args.d, args.k, args.queries, args.seed,
                                 args.repetitions)
    doc = rep.to_dict()
    if args.out:
        write_text_atomic(args.out, _dump(doc))
    print(f"N={rep.n_references} w*d={rep.window_dim} k={rep.k}: "
          f"input {rep.input_seconds * 1e3:.3f} ms/query, "
          f"embedded {rep.embedded_seconds * 1e3:.3f} ms/query, speedup {rep.speedup:.1f}x")
    return 0


def cmd_check_bound(args) -> int:
    reports = pl.bias_bound_trials(args.trials, args.d, args.w, args.K, args.seed)
    held = sum(r.holds for r in reports)
    rows = [{"sensor": r.sensor, "bias": r.bias, "lipschitz": r.lipschitz, "w1": r.w1,
             "bound": r.bound, "holds": r.holds} for r in reports]
    if args.out:
        write_text_atomic(args.out, _dump({"trials": rows, "held": held}))
    print(f"bound held in {held}/{len(reports)} trials")
    return 0 if held == len(reports) else 1


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condattr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--jobs", type=int, default=None,
                        help=f"worker threads (default from CONDATTR_JOBS, now {default_jobs()})")
        sp.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides, e.g. K=5 detector.k_pca=16")
        return sp

    sp = with_config(sub.add_parser("inject", help="write a perturbed CSV and labels JSON"))
    sp.add_argument("--input", help="clean series CSV (default: generate from the synth config)")
    sp.add_argument("--spec", help="injection spec JSON (object or array)")
    sp.add_argument("--out-csv", required=True)
    sp.add_argument("--out-labels", required=True)
    sp.add_argument("--kinds-out", help="optional JSON list of the kind of each event")
    sp.set_defaults(func=cmd_inject)

    sp = with_config(sub.add_parser("train", help="fit and persist detector and embedding"))
    sp.add_argument("--out", help="artifact directory")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("attribute", help="heatmaps and rankings for events"))
    sp.add_argument("--artifacts", help="artifact directory from `train`")
    sp.add_argument("--event", type=int, action="append", help="1-based event id (repeatable)")
    sp.add_argument("--start", type=int, help="attribute the window starting here instead")
    sp.add_argument("--window", choices=["peak", "first"], default="peak",
                    help="per event: highest-scoring window, or first detecting window")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_attribute)

    sp = with_config(sub.add_parser("evaluate", help="metrics report and per-event table"))
    sp.add_argument("--artifacts", help="artifact directory from `train`")
    sp.add_argument("--out", help="report JSON path")
    sp.add_argument("--quiet", action="store_true", help="skip the printed tables")
    sp.set_defaults(func=cmd_evaluate)

    sp = with_config(sub.add_parser("sweep", help="one-axis ablation"))
    sp.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    sp.add_argument("--values", help="JSON list of axis values")
    sp.add_argument("--out", help="sweep JSON path")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("probe-cost", help="KNN cost in input vs embedded space")
    sp.add_argument("--n", type=int, default=10000)
    sp.add_argument("--w", type=int, default=50)
    sp.add_argument("--d", type=int, default=10)
    sp.add_argument("--k", type=int, default=8)
    sp.add_argument("--queries", type=int, default=20)
    sp.add_argument("--repetitions", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_probe_cost)

    sp = sub.add_parser("check-bound", help="bias-bound verifier on random linear detectors")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--d", type=int, default=10)
    sp.add_argument("--w", type=int, default=20)
    sp.add_argument("--K", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_check_bound)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
