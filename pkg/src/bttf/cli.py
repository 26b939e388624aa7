"""Command-line entry point: ``bttf {ingest,train,benchmark,predict,importance,synth}``.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataio, evaluation, gbt, pipeline, visionary
from .errors import ConfigError, ContractError, DataError, NumericError

log = logging.getLogger("bttf")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class DataOptions:
    aggregate: str = "daily"
    k: int = 7
    h: int = 1
    target: str = dataio.TARGET_COLUMN
    drop_constant: bool = False


@dataclass
class RunConfig:
    data: DataOptions = field(default_factory=DataOptions)
    visionary: visionary.VisionaryConfig = field(default_factory=visionary.VisionaryConfig)
    gbt: gbt.GBTConfig = field(default_factory=gbt.GBTConfig)
    bttf: dict = field(default_factory=dict)
    split: dataio.SplitSpec = field(default_factory=dataio.SplitSpec)
    gbt_features: str = "time-series"
    seed: int = 0
    out_dir: str = ""

    def bttf_config(self, target_index=0):
        opts = dict(self.bttf)
        decision = gbt.GBTConfig(**{**asdict(pipeline.decision_gbt_defaults()), **opts.pop("gbt", {}),
                                    "seed": self.seed})
        return pipeline.BTTFConfig(self.visionary_config(target_index), decision, **opts)

    def visionary_config(self, target_index=0):
        return visionary.VisionaryConfig(**{**asdict(self.visionary), "k": self.data.k, "h": self.data.h,
                                            "seed": self.seed, "target_index": target_index})

    def gbt_config(self):
        return gbt.GBTConfig(**{**asdict(self.gbt), "seed": self.seed})

    def validate(self):
        bad = []
        d = self.data
        if d.aggregate not in ("daily", "hourly"):
            bad.append("data.aggregate")
        if not isinstance(d.k, int) or d.k < 1:
            bad.append("data.k")
        if not isinstance(d.h, int) or d.h < 1:
            bad.append("data.h")
        if d.target not in dataio.NUMERIC_COLUMNS:
            bad.append("data.target")
        if self.gbt_features not in ("one-day", "time-series"):
            bad.append("gbt_features")
        if not isinstance(self.seed, int) or self.seed < 0:
            bad.append("seed")
        checks = (("visionary", lambda: self.visionary.validate()), ("gbt", lambda: self.gbt.validate()),
                  ("split", lambda: self.split.validate()))
        for prefix, check in checks:
            try:
                check()
            except ConfigError as exc:
                bad += [f"{prefix}.{f}" for f in exc.fields]
        try:
            self.bttf_config().validate()
        except ConfigError as exc:
            bad += ["bttf." + f for f in exc.fields if not f.startswith("visionary.")]
        except TypeError as exc:
            bad.append(f"bttf ({exc})")
        if bad:
            raise ConfigError("invalid config fields: " + ", ".join(bad), bad)
        return self

    def to_dict(self):
        return {"data": asdict(self.data), "visionary": asdict(self.visionary), "gbt": asdict(self.gbt),
                "bttf": self.bttf, "split": asdict(self.split), "gbt_features": self.gbt_features,
                "seed": self.seed, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = sorted(set(d) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigError("unknown config fields: " + ", ".join(unknown), unknown)
        try:
            if "data" in d:
                d["data"] = DataOptions(**d["data"])
            if "visionary" in d:
                d["visionary"] = visionary.VisionaryConfig.from_dict(d["visionary"])
            if "gbt" in d:
                d["gbt"] = gbt.GBTConfig.from_dict(d["gbt"])
            if "split" in d:
                d["split"] = dataio.SplitSpec(**d["split"])
        except TypeError as exc:
            raise ConfigError(f"bad config section: {exc}") from None
        return cls(**d)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def load_run_config(path):
    cfg = RunConfig.from_dict(_read_json(path)) if path else RunConfig()
    return cfg.validate()


def _prepare(table, opts: DataOptions):
    if opts.aggregate == "daily":
        table = dataio.aggregate_daily(table)
    if opts.drop_constant:
        table = dataio.drop_constant_columns(table)
    return table


def _write_curve(curve, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "epoch_seconds"])
        for r in curve.records:
            w.writerow([r.epoch, repr(r.train_loss), "" if np.isnan(r.val_loss) else repr(r.val_loss),
                        repr(r.seconds)])


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_ingest(args):
    raw = dataio.ingest_csv(args.input)
    table = dataio.clean(raw)
    dataio.save_table(table, args.out)
    print(f"read {len(raw)} rows ({raw.n_flagged} flagged); cleaned rows: {len(table)}; wrote {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_run_config(args.config)
    table = _prepare(dataio.load_table(args.data), cfg.data)
    ws = dataio.make_windows(table, cfg.data.k, cfg.data.h, cfg.data.target)
    train, val, _ = dataio.chrono_split(ws, cfg.split)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    curve_path = os.path.join(out_dir, "curves.csv")
    if args.model == "visionary":
        model, curve = visionary.train_visionary(train, val, cfg.visionary_config(train.target_index))
        visionary.save_visionary(model, args.out)
        _write_curve(curve, curve_path)
    elif args.model == "gbt":
        if cfg.gbt_features == "one-day":
            X, names = train.present, list(train.present_columns)
        else:
            X, names = evaluation._ts_features(train), evaluation._ts_names(train)
        model = gbt.fit_gbt(X, train.targets[:, 0], cfg.gbt_config(), feature_names=names)
        gbt.save_gbt(model, args.out)
    else:
        curves = []
        model = pipeline.train_bttf(train, val, cfg.bttf_config(train.target_index), curve_out=curves)
        pipeline.save_bttf(model, args.out, data=asdict(cfg.data))
        _write_curve(curves[0], curve_path)
    with open(os.path.join(out_dir, "run_config.json"), "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"trained {args.model} on {len(train)} samples; wrote {args.out}")
    return EXIT_OK


def cmd_benchmark(args):
    suite = evaluation.SuiteConfig.from_dict(_read_json(args.suite)) if args.suite else evaluation.SuiteConfig()
    suite.validate()
    table = dataio.load_table(args.data)
    artifacts = {}
    reports = evaluation.run_benchmark(table, suite, cache_dir=os.path.join(args.out, "cells"),
                                       artifacts=artifacts)
    evaluation.write_reports(reports, args.out)
    with open(os.path.join(args.out, "suite.json"), "w", encoding="utf-8") as fh:
        json.dump(suite.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    for run_id, art in artifacts.items():
        evaluation.export_diagnostics(art, os.path.join(args.out, "runs", run_id))
    print(evaluation.render_table(reports), end="")
    return EXIT_OK


def cmd_predict(args):
    model = pipeline.load_bttf(args.model)
    with open(args.model, encoding="utf-8") as fh:
        opts = DataOptions(**json.load(fh).get("data", {}))
    table = _prepare(dataio.load_table(args.data), opts)
    k, start, steps = model.k, args.start, args.steps
    if start < k:
        raise ConfigError(f"--from must be >= k ({k})", ["from"])
    if steps < 1:
        raise ConfigError("--steps must be >= 1", ["steps"])
    if start + steps > len(table):
        raise DataError(f"table has {len(table)} rows; cannot predict rows {start}..{start + steps - 1}")
    values = table.values[start - k:start + steps]
    states = pipeline.feedback_loop(model, values)
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["t", "x_t", "delta", "x_adjusted", "truth"])
        for i, s in enumerate(states):
            t = start + i
            w.writerow([t, repr(s.x_t), repr(s.delta), repr(s.x_adjusted), repr(float(table.values[t, model.target_index]))])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_importance(args):
    if args.model.endswith(".gbt.json") or not _is_bundle(args.model):
        model = gbt.load_gbt(args.model)
    else:
        model = pipeline.load_bttf(args.model).decision
    imp = gbt.feature_importance(model)
    if args.out:
        evaluation.write_importance_csv(imp, model.feature_names, args.out)
    else:
        for name, score in gbt.ranked_importance(imp, model.feature_names):
            print(f"{name},{score}")
    return EXIT_OK


def _is_bundle(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh).get("format") == pipeline.BUNDLE_TAG


def cmd_synth(args):
    from .synthetic import write_synthetic_csv

    table = write_synthetic_csv(args.out, n_days=args.days, seed=args.seed)
    print(f"wrote {len(table)} hourly rows to {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="bttf", description="Hybrid attention + boosted-tree nowcasting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and clean a Kaggle weather CSV into a cached table")
    p.add_argument("--input", required=True, help="weather CSV with the Kaggle header")
    p.add_argument("--out", required=True, help="output table file")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train one model from a JSON run config")
    p.add_argument("--model", required=True, choices=["visionary", "gbt", "bttf"], help="model kind")
    p.add_argument("--config", help="JSON run config (defaults when omitted)")
    p.add_argument("--data", required=True, help="table file written by 'ingest'")
    p.add_argument("--out", required=True, help="output model file (bundle manifest for bttf)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="run the comparison suite and write reports")
    p.add_argument("--data", required=True, help="table file written by 'ingest'")
    p.add_argument("--suite", help="JSON suite config (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("predict", help="run the forecast/adapt loop over a table range")
    p.add_argument("--model", required=True, help="bttf bundle manifest")
    p.add_argument("--data", required=True, help="table file written by 'ingest'")
    p.add_argument("--from", dest="start", type=int, required=True, help="first predicted row index (>= k)")
    p.add_argument("--steps", type=int, required=True, help="number of rows to predict")
    p.add_argument("--out", help="output CSV (stdout when omitted)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("importance", help="split-count feature importance of a tree model")
    p.add_argument("--model", required=True, help="gbt model file or bttf bundle")
    p.add_argument("--out", help="output CSV (stdout when omitted)")
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("synth", help="write a synthetic hourly weather CSV")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--days", type=int, default=3000, help="number of days")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
