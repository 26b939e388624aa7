"""Regression metrics, the benchmark suite and diagnostic exports.

A benchmark compares four model kinds on one chronological split:

``visionary-only``   attention forecaster alone, one cell per epoch setting
``gbt-one-day``      boosted trees on the previous day's non-target features
``gbt-time-series``  boosted trees on those features plus the flattened window
``bttf``             forecaster + decision-maker hybrid, one cell per epoch setting

Metrics are computed on the test segment in original units.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataio import SplitSpec, aggregate_daily, chrono_split, drop_constant_columns, make_windows
from .errors import ConfigError, ContractError, DataError
from .gbt import GBTConfig, feature_importance, fit_gbt, ranked_importance
from .pipeline import BTTFConfig, predict_bttf_batch, train_bttf
from .visionary import VisionaryConfig, predict_many, train_visionary

KINDS = ("visionary-only", "gbt-one-day", "gbt-time-series", "bttf")
EPOCH_KINDS = ("visionary-only", "bttf")

# Reported values (RMSE, R^2, wall time) for display next to our runs only.
PAPER_TABLE1 = {
    ("visionary-only", 5): (3.7, 0.8488, "10m1s"),
    ("visionary-only", 100): (2.5820, 0.9264, "3h6m57s"),
    ("visionary-only", 200): (2.4635, 0.9330, "6h45m59s"),
    ("gbt-one-day", 1): (4.4138, 0.7886, "1m42s"),
    ("gbt-time-series", 1): (3.9678, 0.8288, "1m42s"),
    ("bttf", 5): (4.0695, 0.8192, "3m21s"),
    ("bttf", 100): (2.3290, 0.9407, "33m21s"),
    ("bttf", 200): (2.2479, 0.9448, "1h3m25s"),
}


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    if pred.shape != truth.shape:
        raise ContractError(f"prediction length {pred.size} != truth length {truth.size}")
    if pred.size == 0:
        raise ContractError("metrics need at least one value")
    return pred, truth


def rmse(pred, truth):
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def r2(pred, truth):
    pred, truth = _pair(pred, truth)
    if pred.size < 2:
        raise ContractError("r2 needs at least two values")
    sst = float(np.sum((truth - truth.mean()) ** 2))
    if sst == 0.0:
        raise ContractError("r2 is undefined for constant truth")
    return 1.0 - float(np.sum((truth - pred) ** 2)) / sst


# --------------------------------------------------------------------------
# suite configuration and reports
# --------------------------------------------------------------------------


@dataclass
class SuiteConfig:
    kinds: list = field(default_factory=lambda: list(KINDS))
    epochs: list = field(default_factory=lambda: [5, 100, 200])
    seeds: list = field(default_factory=lambda: [0])
    visionary: VisionaryConfig = field(default_factory=VisionaryConfig)
    gbt: GBTConfig = field(default_factory=GBTConfig)
    bttf: BTTFConfig = field(default_factory=BTTFConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    aggregate: str = "daily"
    k: int = 7
    h: int = 1
    target: str = "Temperature (C)"
    drop_constant: bool = False

    def validate(self):
        bad = [f"kinds[{k}]" for k in self.kinds if k not in KINDS]
        if not self.kinds:
            bad.append("kinds")
        if not self.epochs or any(not isinstance(e, int) or e < 1 for e in self.epochs):
            bad.append("epochs")
        if not self.seeds:
            bad.append("seeds")
        if self.aggregate not in ("daily", "hourly"):
            bad.append("aggregate")
        if not isinstance(self.k, int) or self.k < 1:
            bad.append("k")
        if not isinstance(self.h, int) or self.h < 1:
            bad.append("h")
        for name, part in (("visionary", self.visionary), ("gbt", self.gbt), ("bttf", self.bttf),
                           ("split", self.split)):
            try:
                part.validate()
            except ConfigError as exc:
                bad += [f"{name}.{f}" for f in exc.fields]
        if bad:
            raise ConfigError(f"invalid suite fields: {', '.join(bad)}", bad)
        return self

    def to_dict(self):
        return {
            "kinds": list(self.kinds), "epochs": list(self.epochs), "seeds": list(self.seeds),
            "visionary": asdict(self.visionary), "gbt": asdict(self.gbt), "bttf": self.bttf.to_dict(),
            "split": asdict(self.split), "aggregate": self.aggregate, "k": self.k, "h": self.h,
            "target": self.target, "drop_constant": self.drop_constant,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown suite fields: {', '.join(unknown)}", unknown)
        if "visionary" in d:
            d["visionary"] = VisionaryConfig.from_dict(d["visionary"])
        if "gbt" in d:
            d["gbt"] = GBTConfig.from_dict(d["gbt"])
        if "bttf" in d:
            d["bttf"] = BTTFConfig.from_dict(d["bttf"])
        if "split" in d:
            d["split"] = SplitSpec(**d["split"])
        return cls(**d)


@dataclass
class MetricReport:
    run_id: str
    kind: str
    epochs: int
    rmse: float
    r2: float
    wall_time: float
    seed: int
    n_test: int
    sse: float
    sst: float
    split: dict
    config: dict
    evaluated_on: str = "test"

    def numerics(self):
        """Every numeric field except the measured wall time."""
        return (self.rmse, self.r2, self.n_test, self.sse, self.sst)


@dataclass
class RunArtifacts:
    run_id: str
    curve: list = None  # EpochRecord list, epoch-bearing kinds only
    truth: np.ndarray = None
    prediction: np.ndarray = None
    train_losses: np.ndarray = None
    val_losses: np.ndarray = None
    importance: dict = None
    feature_names: list = None


def make_report(run_id, kind, epochs, pred, truth, wall, seed, split, config):
    pred, truth = _pair(pred, truth)
    sse = float(np.sum((pred - truth) ** 2))
    sst = float(np.sum((truth - truth.mean()) ** 2))
    return MetricReport(run_id, kind, epochs, rmse(pred, truth), r2(pred, truth), wall, seed, int(pred.size),
                        sse, sst, split, config)


# --------------------------------------------------------------------------
# benchmark
# --------------------------------------------------------------------------


def prepare_dataset(table, suite: SuiteConfig):
    """Aggregate (if configured), window and split; returns (train, val, test, boundaries)."""
    if suite.aggregate == "daily":
        table = aggregate_daily(table)
    if suite.drop_constant:
        table = drop_constant_columns(table)
    ws = make_windows(table, suite.k, suite.h, suite.target)
    train, val, test = chrono_split(ws, suite.split)
    bounds = {"n_samples": len(ws), "train_end": len(train), "val_end": len(train) + len(val),
              "first_test_t": int(test.t_index[0])}
    return train, val, test, bounds


def _ts_features(ws):
    return np.concatenate([ws.present, ws.windows.reshape(len(ws), -1)], axis=1)


def _ts_names(ws):
    k = ws.windows.shape[1]
    lagged = [f"{c}[t-{k - i}]" for i in range(k) for c in ws.columns]
    return list(ws.present_columns) + lagged


def _sq(pred, truth):
    return (np.asarray(pred) - np.asarray(truth)) ** 2


def _tree_cells(kind, seed, suite, train, val, test, bounds):
    cfg = GBTConfig(**{**asdict(suite.gbt), "seed": seed})
    if kind == "gbt-one-day":
        feats, names = (lambda ws: ws.present), list(train.present_columns)
    else:
        feats, names = _ts_features, _ts_names(train)
    t0 = time.perf_counter()
    model = fit_gbt(feats(train), train.targets[:, 0], cfg, feature_names=names)
    pred = model.predict(feats(test))
    wall = time.perf_counter() - t0
    run_id = f"{kind}-e1-s{seed}"
    snapshot = {"kind": kind, "gbt": asdict(cfg), **_data_snapshot(suite)}
    report = make_report(run_id, kind, 1, pred, test.targets[:, 0], wall, seed, bounds, snapshot)
    art = RunArtifacts(run_id, None, test.targets[:, 0], pred,
                       _sq(model.predict(feats(train)), train.targets[:, 0]),
                       _sq(model.predict(feats(val)), val.targets[:, 0]),
                       feature_importance(model), names)
    return [(report, art)]


def _data_snapshot(suite):
    return {"aggregate": suite.aggregate, "k": suite.k, "h": suite.h, "target": suite.target,
            "drop_constant": suite.drop_constant, "split": asdict(suite.split)}


def _epoch_cells(seed, suite, train, val, test, bounds):
    """Train the forecaster once to the largest epoch count; snapshot the rest."""
    want = sorted(set(suite.epochs))
    vcfg = VisionaryConfig(**{**asdict(suite.visionary), "epochs": want[-1], "seed": seed, "k": suite.k,
                              "h": suite.h, "target_index": train.target_index})
    snaps, t0 = {}, time.perf_counter()

    def keep(epoch, model):
        if epoch in want:
            snaps[epoch] = (model, time.perf_counter() - t0)

    _, curve = train_visionary(train, val, vcfg, on_epoch=keep)
    out = []
    for epoch in want:
        model, vis_time = snaps[epoch]
        records = curve.records[:epoch]
        if "visionary-only" in suite.kinds:
            t1 = time.perf_counter()
            pred = predict_many(model, test.windows)[:, 0]
            wall = vis_time + time.perf_counter() - t1
            run_id = f"visionary-only-e{epoch}-s{seed}"
            snap = {"kind": "visionary-only", "visionary": {**asdict(vcfg), "epochs": epoch},
                    **_data_snapshot(suite)}
            report = make_report(run_id, "visionary-only", epoch, pred, test.targets[:, 0], wall, seed,
                                 bounds, snap)
            art = RunArtifacts(run_id, records, test.targets[:, 0], pred,
                               _sq(predict_many(model, train.windows)[:, 0], train.targets[:, 0]),
                               _sq(predict_many(model, val.windows)[:, 0], val.targets[:, 0]))
            out.append((report, art))
        if "bttf" in suite.kinds:
            bcfg = BTTFConfig(VisionaryConfig(**{**asdict(vcfg), "epochs": epoch}), GBTConfig(**{**asdict(suite.bttf.gbt), "seed": seed}),
                              suite.bttf.adaptation_mode, suite.bttf.refit_interval)
            t1 = time.perf_counter()
            hybrid = train_bttf(train, val, bcfg, forecaster=model)
            pred = np.array([s.x_adjusted for s in predict_bttf_batch(hybrid, test)])
            wall = vis_time + time.perf_counter() - t1
            run_id = f"bttf-e{epoch}-s{seed}"
            snap = {"kind": "bttf", "bttf": bcfg.to_dict(), **_data_snapshot(suite)}
            report = make_report(run_id, "bttf", epoch, pred, test.targets[:, 0], wall, seed, bounds, snap)

            def hyb(ws):
                return np.array([s.x_adjusted for s in predict_bttf_batch(hybrid, ws)])

            art = RunArtifacts(run_id, records, test.targets[:, 0], pred,
                               _sq(hyb(train), train.targets[:, 0]), _sq(hyb(val), val.targets[:, 0]),
                               feature_importance(hybrid.decision), hybrid.layout)
            out.append((report, art))
    return out


def _cell_ids(kind, seed, suite):
    if kind in EPOCH_KINDS:
        return [f"{kind}-e{e}-s{seed}" for e in sorted(set(suite.epochs))]
    return [f"{kind}-e1-s{seed}"]


def _suite_hash(suite):
    return hashlib.sha256(json.dumps(suite.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _load_cached(cache_dir, run_ids, digest):
    reports = []
    for rid in run_ids:
        path = os.path.join(cache_dir, rid + ".json")
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        if doc.get("suite_hash") != digest:
            return None
        reports.append(MetricReport(**doc["report"]))
    return reports


def _store(cache_dir, report, digest):
    os.makedirs(cache_dir, exist_ok=True)
    with open(os.path.join(cache_dir, report.run_id + ".json"), "w", encoding="utf-8") as fh:
        json.dump({"suite_hash": digest, "report": asdict(report)}, fh, sort_keys=True)


def _run_group(args):
    group, seed, suite, data = args
    train, val, test, bounds = data
    if group == "epochs":
        return _epoch_cells(seed, suite, train, val, test, bounds)
    return _tree_cells(group, seed, suite, train, val, test, bounds)


def run_benchmark(table, suite: SuiteConfig = None, cache_dir=None, artifacts=None, threads=None):
    """Run every configured cell; returns the MetricReports in a stable order.

    Completed cells are cached under ``cache_dir`` and reused on a re-run with
    the same suite. ``artifacts`` (a dict) receives ``RunArtifacts`` for cells
    computed in this call. ``threads`` defaults to ``$BTTF_THREADS``, else the
    number of logical cores. Results do not depend on the thread count.
    """
    suite = suite or SuiteConfig()
    suite.validate()
    data = prepare_dataset(table, suite)
    digest = _suite_hash(suite)
    threads = int(threads or os.environ.get("BTTF_THREADS") or os.cpu_count() or 1)

    groups = []
    for seed in suite.seeds:
        if any(k in suite.kinds for k in EPOCH_KINDS):
            groups.append(("epochs", seed))
        for kind in ("gbt-one-day", "gbt-time-series"):
            if kind in suite.kinds:
                groups.append((kind, seed))

    def ids_for(group, seed):
        kinds = [k for k in EPOCH_KINDS if k in suite.kinds] if group == "epochs" else [group]
        return [rid for k in kinds for rid in _cell_ids(k, seed, suite)]

    done, todo = {}, []
    for group, seed in groups:
        cached = _load_cached(cache_dir, ids_for(group, seed), digest) if cache_dir else None
        if cached is not None:
            done[(group, seed)] = [(r, None) for r in cached]
        else:
            todo.append((group, seed))

    def collect(key, cells):
        done[key] = cells
        for report, _ in cells:
            if cache_dir:
                _store(cache_dir, report, digest)

    if threads > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {key: pool.submit(_run_group, (key[0], key[1], suite, data)) for key in todo}
            for key, fut in futures.items():
                collect(key, fut.result())
    else:
        for key in todo:
            collect(key, _run_group((key[0], key[1], suite, data)))

    order = {k: i for i, k in enumerate(KINDS)}
    reports = []
    for key in groups:
        for report, art in done[key]:
            reports.append(report)
            if artifacts is not None and art is not None:
                artifacts[report.run_id] = art
    reports.sort(key=lambda r: (order[r.kind], r.epochs, r.seed))
    return reports


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------

_LABELS = {"visionary-only": "Visionary (attention)", "gbt-one-day": "GBT (one day)",
           "gbt-time-series": "GBT (time series)", "bttf": "BTTF"}


def render_table(reports):
    """Markdown comparison table with paper-reported values alongside."""
    lines = [
        "Metrics on the held-out test split (original units).",
        "",
        "| Model | Epochs | Seed | RMSE | R2 | Time (s) | RMSE (paper) | R2 (paper) | Time (paper) |",
        "|---|---|---|---|---|---|---|---|---|",
    ]
    for r in reports:
        ref = PAPER_TABLE1.get((r.kind, r.epochs))
        ref_cells = [f"{ref[0]:.4f}", f"{ref[1]:.4f}", ref[2]] if ref else ["-", "-", "-"]
        lines.append("| " + " | ".join([_LABELS[r.kind], str(r.epochs), str(r.seed), f"{r.rmse:.4f}",
                                        f"{r.r2:.4f}", f"{r.wall_time:.1f}"] + ref_cells) + " |")
    return "\n".join(lines) + "\n"


def write_reports(reports, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "reports.json"), "w", encoding="utf-8") as fh:
        json.dump([asdict(r) for r in reports], fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "table.md"), "w", encoding="utf-8") as fh:
        fh.write(render_table(reports))


def _csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _num(v):
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def write_importance_csv(importance, feature_names, path):
    _csv(path, ["feature", "f_score"], [[n, s] for n, s in ranked_importance(importance, feature_names)])


def export_diagnostics(art: RunArtifacts, out_dir, bins=20):
    """Write the plain-data CSVs that apply to this run; returns their paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from None
    written = []
    if art.curve is not None:
        path = os.path.join(out_dir, "curves.csv")
        _csv(path, ["epoch", "train_loss", "val_loss", "epoch_seconds"],
             [[r.epoch, _num(r.train_loss), _num(r.val_loss), _num(r.seconds)] for r in art.curve])
        written.append(path)
    if art.prediction is not None:
        path = os.path.join(out_dir, "scatter.csv")
        _csv(path, ["truth", "prediction"], [[_num(t), _num(p)] for t, p in zip(art.truth, art.prediction)])
        written.append(path)
    if art.train_losses is not None and art.val_losses is not None:
        both = np.concatenate([art.train_losses, art.val_losses])
        edges = np.histogram_bin_edges(both, bins=bins)
        tc, _ = np.histogram(art.train_losses, edges)
        vc, _ = np.histogram(art.val_losses, edges)
        path = os.path.join(out_dir, "loss_hist.csv")
        _csv(path, ["bin_lo", "bin_hi", "train_count", "val_count"],
             [[_num(edges[i]), _num(edges[i + 1]), int(tc[i]), int(vc[i])] for i in range(len(tc))])
        written.append(path)
    if art.importance is not None:
        path = os.path.join(out_dir, "importance.csv")
        write_importance_csv(art.importance, art.feature_names, path)
        written.append(path)
    return written
