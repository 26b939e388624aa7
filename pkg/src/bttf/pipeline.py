"""Forecast-then-adapt hybrid: forecaster output feeds a boosted-tree adjuster.

Decision-maker inputs are ``[present features..., forecast values...]`` in
original units. The adjusted state is always ``anchor + delta`` where the
anchor is the last observed target value. How ``delta`` is produced:

* ``correction`` (default): trees learn the forecaster's error, so
  ``delta = (forecast - anchor) + trees(x)``;
* ``residual``: trees output ``delta`` directly (target ``y - anchor``);
* ``direct``: trees predict the adjusted value; ``delta`` is derived from it.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gbt as gbt_mod
from .dataio import TimeSeriesTable, WindowSet, make_windows, present_indices
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .gbt import BoostedTreeModel, GBTConfig, fit_gbt, predict_gbt
from .visionary import (
    VisionaryConfig,
    VisionaryModel,
    load_visionary,
    predict_many,
    save_visionary,
    train_visionary,
)

BUNDLE_TAG = "bttf-bundle-v1"
MODES = ("correction", "residual", "direct")


def decision_gbt_defaults():
    """Stage-2 booster: fits a small correction signal, so it is shrunk harder."""
    return GBTConfig(eta=0.1, max_depth=4, reg_l1=20.0, reg_l2=1.0)


@dataclass
class BTTFConfig:
    visionary: VisionaryConfig = field(default_factory=VisionaryConfig)
    gbt: GBTConfig = field(default_factory=lambda: decision_gbt_defaults())
    adaptation_mode: str = "correction"
    refit_interval: int = 0

    def validate(self):
        bad = []
        try:
            self.visionary.validate()
        except ConfigError as exc:
            bad += [f"visionary.{f}" for f in exc.fields]
        try:
            self.gbt.validate()
        except ConfigError as exc:
            bad += [f"gbt.{f}" for f in exc.fields]
        if self.adaptation_mode not in MODES:
            bad.append("adaptation_mode")
        if not isinstance(self.refit_interval, int) or self.refit_interval < 0:
            bad.append("refit_interval")
        if bad:
            raise ConfigError(f"invalid bttf config fields: {', '.join(bad)}", bad)
        return self

    def to_dict(self):
        return {"visionary": asdict(self.visionary), "gbt": asdict(self.gbt),
                "adaptation_mode": self.adaptation_mode, "refit_interval": self.refit_interval}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        vis = VisionaryConfig.from_dict(d.pop("visionary", {}))
        tree = GBTConfig.from_dict(d.pop("gbt", {}))
        unknown = sorted(set(d) - {"adaptation_mode", "refit_interval"})
        if unknown:
            raise ConfigError(f"unknown bttf config fields: {', '.join(unknown)}", unknown)
        return cls(vis, tree, **d)


class PassThroughForecaster:
    """Returns the raw window flattened row-major; a stand-in for ablations."""

    def __init__(self, k, d_in):
        self.k = k
        self.d_in = d_in
        self.horizon = k * d_in

    def predict(self, window):
        w = np.asarray(window, dtype=np.float64)
        if w.shape != (self.k, self.d_in):
            raise ShapeError(f"window shape {w.shape} != ({self.k}, {self.d_in})")
        return w.reshape(-1).copy()


@dataclass(frozen=True)
class AdjustedState:
    x_t: float
    delta: float
    x_adjusted: float


def adapt_present(x_t, delta):
    x_t, delta = float(x_t), float(delta)
    if not (math.isfinite(x_t) and math.isfinite(delta)):
        raise NumericError(f"non-finite present state or adjustment: {x_t}, {delta}")
    return AdjustedState(x_t, delta, x_t + delta)


def _exact_delta(anchor, value):
    """``delta`` with ``anchor + delta == value`` when some nearby double allows it."""
    delta = value - anchor
    if anchor + delta == value:
        return delta
    lo = hi = delta
    for _ in range(4):
        lo, hi = np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)
        for cand in (lo, hi):
            if anchor + cand == value:
                return float(cand)
    return delta


@dataclass
class BTTFModel:
    visionary: object
    decision: BoostedTreeModel
    mode: str
    target_index: int
    present_names: list
    forecast_names: list
    k: int
    config: BTTFConfig

    @property
    def layout(self):
        return list(self.present_names) + list(self.forecast_names)

    @property
    def d_present(self):
        return len(self.present_names)


def assemble_decision_features(present, forecast, d_present=None, horizon=None):
    present = np.asarray(present, dtype=np.float64).reshape(-1)
    forecast = np.asarray(forecast, dtype=np.float64).reshape(-1)
    if forecast.size == 0:
        raise ContractError("forecast must have at least one value")
    if d_present is not None and present.size != d_present:
        raise ShapeError(f"present vector has {present.size} values, layout expects {d_present}")
    if horizon is not None and forecast.size != horizon:
        raise ShapeError(f"forecast has {forecast.size} values, layout expects {horizon}")
    return np.concatenate([present, forecast])


def anchors(ws: WindowSet):
    return ws.windows[:, -1, ws.target_index].copy()


def _stage2(forecaster, ws: WindowSet, gbt_cfg: GBTConfig, mode, names):
    if len(ws) == 0:
        raise DataError("no samples for the decision stage")
    forecasts = predict_many(forecaster, ws.windows)
    X = np.concatenate([ws.present, forecasts], axis=1)
    y = ws.targets[:, 0]
    if mode == "residual":
        y = y - anchors(ws)
    elif mode == "correction":
        y = y - forecasts[:, 0]
    return fit_gbt(X, y, gbt_cfg, feature_names=names)


def forecast_names(horizon):
    return [f"forecast[{i}]" for i in range(horizon)]


def train_bttf(train: WindowSet, val: WindowSet | None, cfg: BTTFConfig, forecaster=None, curve_out=None):
    """Stage 1 trains the forecaster (unless one is supplied); stage 2 fits the trees.

    The learning curve of stage 1 is appended to ``curve_out`` when given.
    """
    cfg.validate()
    if len(train) == 0:
        raise DataError("training set is empty")
    if forecaster is None:
        forecaster, curve = train_visionary(train, val, cfg.visionary)
        if curve_out is not None:
            curve_out.append(curve)
    d = train.windows.shape[-1]
    present = [train.columns[i] if train.columns else f"x{i}" for i in present_indices(d, train.target_index)]
    fnames = forecast_names(forecaster.horizon)
    decision = _stage2(forecaster, train, cfg.gbt, cfg.adaptation_mode, present + fnames)
    return BTTFModel(forecaster, decision, cfg.adaptation_mode, train.target_index, present, fnames,
                     train.windows.shape[1], cfg)


def predict_bttf(model: BTTFModel, window, present):
    window = np.asarray(window, dtype=np.float64)
    forecast = model.visionary.predict(window)
    x = assemble_decision_features(present, forecast, model.d_present, len(model.forecast_names))
    out = predict_gbt(model.decision, x)
    anchor = float(window[-1, model.target_index])
    if model.mode == "residual":
        return adapt_present(anchor, out)
    if model.mode == "correction":
        return adapt_present(anchor, (float(forecast[0]) - anchor) + out)
    return adapt_present(anchor, _exact_delta(anchor, out))


def predict_bttf_batch(model: BTTFModel, ws: WindowSet):
    return [predict_bttf(model, ws.windows[i], ws.present[i]) for i in range(len(ws))]


def refit_decision(model: BTTFModel, ws: WindowSet, gbt_cfg: GBTConfig | None = None):
    """Stage-2 refit on ``ws``; the forecaster is kept as is."""
    decision = _stage2(model.visionary, ws, gbt_cfg or model.config.gbt, model.mode, model.layout)
    return BTTFModel(model.visionary, decision, model.mode, model.target_index, model.present_names,
                     model.forecast_names, model.k, model.config)


def feedback_loop(model: BTTFModel, stream, cfg: BTTFConfig | None = None):
    """Slide over ``stream`` (rows x features), one adjusted state per step from row ``k``.

    With ``refit_interval > 0`` the decision maker is refit every that many
    steps on all complete samples seen so far (targets strictly before the
    current step).
    """
    cfg = cfg or model.config
    values = np.asarray(stream.values if isinstance(stream, TimeSeriesTable) else stream, dtype=np.float64)
    k = model.k
    T = len(values)
    if T < k + 1:
        raise DataError(f"stream of {T} rows is shorter than k + 1 = {k + 1}")
    pidx = present_indices(values.shape[1], model.target_index)
    states = []
    current = model
    for step, t in enumerate(range(k, T)):
        if cfg.refit_interval > 0 and step > 0 and step % cfg.refit_interval == 0:
            seen = make_windows(values[:t], k, 1, model.target_index)
            if len(seen) >= 2:
                current = refit_decision(current, seen, cfg.gbt)
        states.append(predict_bttf(current, values[t - k:t], values[t - 1, pidx]))
    return states


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_bttf(model: BTTFModel, path, data=None):
    """Write the bundle manifest plus sibling forecaster and tree files.

    ``data`` (optional dict) records how the training table was prepared.
    """
    base = os.path.splitext(os.path.basename(path))[0]
    folder = os.path.dirname(os.path.abspath(path))
    dec_name = base + ".gbt.json"
    gbt_mod.save_gbt(model.decision, os.path.join(folder, dec_name))
    if isinstance(model.visionary, VisionaryModel):
        vis = {"kind": "visionary", "file": base + ".visionary.bin"}
        save_visionary(model.visionary, os.path.join(folder, vis["file"]))
    elif isinstance(model.visionary, PassThroughForecaster):
        vis = {"kind": "passthrough", "k": model.visionary.k, "d_in": model.visionary.d_in}
    else:
        raise ContractError(f"cannot serialize forecaster {type(model.visionary).__name__}")
    manifest = {
        "format": BUNDLE_TAG,
        "visionary": vis,
        "decision": dec_name,
        "mode": model.mode,
        "target_index": model.target_index,
        "k": model.k,
        "layout": {"present": model.present_names, "forecast": model.forecast_names},
        "config": model.config.to_dict(),
        "data": data or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_bttf(path):
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != BUNDLE_TAG:
        raise ContractError(f"{path}: not a {BUNDLE_TAG} file")
    folder = os.path.dirname(os.path.abspath(path))
    vis = manifest["visionary"]
    if vis["kind"] == "visionary":
        forecaster = load_visionary(os.path.join(folder, vis["file"]))
    else:
        forecaster = PassThroughForecaster(vis["k"], vis["d_in"])
    decision = gbt_mod.load_gbt(os.path.join(folder, manifest["decision"]))
    layout = manifest["layout"]
    if decision.n_features != len(layout["present"]) + len(layout["forecast"]):
        raise ContractError("decision model width does not match the bundle layout")
    return BTTFModel(forecaster, decision, manifest["mode"], manifest["target_index"], layout["present"],
                     layout["forecast"], manifest["k"], BTTFConfig.from_dict(manifest["config"]))
