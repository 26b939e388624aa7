"""Encoder-only self-attention forecaster.

A window of ``k`` past observations (``d_in`` features each) is projected to
``d_model``, offset by sinusoidal positional encodings, passed through
``n_layers`` post-norm encoder blocks, and the final position's embedding is
mapped to an ``h``-step forecast of the target feature.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Protocol

import numpy as np

from . import numcore as nc
from .dataio import NormStats, WindowSet, normalize_apply, normalize_fit
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError

FORMAT_TAG = "bttf-visionary-v1"


class Forecaster(Protocol):
    """Anything mapping an original-units window to a forecast vector."""

    horizon: int

    def predict(self, window: np.ndarray) -> np.ndarray: ...


@dataclass
class VisionaryConfig:
    k: int = 7
    h: int = 1
    d_model: int = 16
    n_heads: int = 2
    n_layers: int = 1
    d_ff: int = 32
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    seed: int = 0
    target_index: int = 0
    loss: str = "mse"
    dropout: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self):
        bad = []
        for name in ("k", "h", "epochs", "n_heads", "n_layers", "d_ff", "batch_size"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                bad.append(name)
        if not isinstance(self.d_model, int) or self.d_model < 2 or self.d_model % 2:
            bad.append("d_model")
        elif isinstance(self.n_heads, int) and self.n_heads >= 1 and self.d_model % self.n_heads:
            bad.append("n_heads")
        if not self.lr > 0:
            bad.append("lr")
        if not isinstance(self.target_index, int) or self.target_index < 0:
            bad.append("target_index")
        if self.loss not in ("mse", "mae"):
            bad.append("loss")
        if not 0.0 <= self.dropout < 1.0:
            bad.append("dropout")
        if not 0.0 <= self.beta1 < 1.0:
            bad.append("beta1")
        if not 0.0 <= self.beta2 < 1.0:
            bad.append("beta2")
        if not self.adam_eps > 0:
            bad.append("adam_eps")
        if bad:
            raise ConfigError(f"invalid visionary config fields: {', '.join(bad)}", bad)
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown visionary config fields: {', '.join(unknown)}", unknown)
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class LearningCurve:
    records: list = field(default_factory=list)

    def losses(self):
        """(epoch, train, val) triples; excludes the measured wall time."""
        return [(r.epoch, r.train_loss, r.val_loss) for r in self.records]

    def __len__(self):
        return len(self.records)


@dataclass
class VisionaryModel:
    config: VisionaryConfig
    d_in: int
    params: dict
    norm_stats: NormStats

    @property
    def horizon(self):
        return self.config.h

    def predict(self, window):
        return predict_horizon(self, window)


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def positional_encoding(k, d_model):
    if k < 1:
        raise ConfigError("k must be >= 1", ["k"])
    if d_model < 2 or d_model % 2:
        raise ConfigError("d_model must be even and >= 2", ["d_model"])
    pos = np.arange(k, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * i / d_model)
    pe = np.empty((k, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def param_shapes(cfg: VisionaryConfig, d_in):
    D, F = cfg.d_model, cfg.d_ff
    shapes = {"in.W": (d_in, D), "in.b": (D,)}
    for layer in range(cfg.n_layers):
        p = f"l{layer}."
        for name in ("q", "k", "v", "o"):
            shapes[p + f"W{name}"] = (D, D)
            shapes[p + f"b{name}"] = (D,)
        shapes[p + "ln1.g"] = (D,)
        shapes[p + "ln1.b"] = (D,)
        shapes[p + "ff.W1"] = (D, F)
        shapes[p + "ff.b1"] = (F,)
        shapes[p + "ff.W2"] = (F, D)
        shapes[p + "ff.b2"] = (D,)
        shapes[p + "ln2.g"] = (D,)
        shapes[p + "ln2.b"] = (D,)
    shapes["head.W"] = (D, cfg.h)
    shapes["head.b"] = (cfg.h,)
    return shapes


def init_params(cfg: VisionaryConfig, d_in):
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = nc.make_rng(cfg.seed, 0)
    params = {}
    for name, shape in param_shapes(cfg, d_in).items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
    return params


def _split_heads(t, n_heads):
    B, k, D = t.shape
    return nc.transpose(nc.reshape(t, (B, k, n_heads, D // n_heads)), (0, 2, 1, 3))


def multi_head_attention(x, p, n_heads, prefix="", attn_sink=None):
    """Scaled dot-product self-attention over the time axis.

    ``x`` is ``[B, k, D]`` (or ``[k, D]``); ``p`` maps ``prefix + "Wq"`` etc.
    to tensors. Attention weights ``[B, heads, k, k]`` are appended to
    ``attn_sink`` when given.
    """
    x = x if isinstance(x, nc.Tensor) else nc.Tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = nc.reshape(x, (1,) + x.shape)
    B, k, D = x.shape
    if D % n_heads:
        raise ShapeError(f"d_model {D} not divisible by {n_heads} heads")
    dh = D // n_heads
    q = _split_heads(nc.matmul(x, p[prefix + "Wq"]) + p[prefix + "bq"], n_heads)
    kk = _split_heads(nc.matmul(x, p[prefix + "Wk"]) + p[prefix + "bk"], n_heads)
    v = _split_heads(nc.matmul(x, p[prefix + "Wv"]) + p[prefix + "bv"], n_heads)
    scores = nc.scale(nc.matmul(q, nc.transpose(kk, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if not np.all(np.isfinite(scores.data)):
        raise NumericError("non-finite attention scores")
    weights = nc.softmax(scores, axis=-1)
    if attn_sink is not None:
        attn_sink.append(weights.data)
    ctx = nc.reshape(nc.transpose(nc.matmul(weights, v), (0, 2, 1, 3)), (B, k, D))
    out = nc.matmul(ctx, p[prefix + "Wo"]) + p[prefix + "bo"]
    if squeeze:
        out = nc.reshape(out, (k, D))
    return out


def forward(params, cfg: VisionaryConfig, x, attn_sink=None, rng=None):
    """Run the encoder on normalized windows ``x`` of shape ``[B, k, d_in]``.

    ``params`` maps names to Tensors (or arrays). Returns a ``[B, h]`` Tensor.
    """
    p = {n: t if isinstance(t, nc.Tensor) else nc.Tensor(t) for n, t in params.items()}
    x = x if isinstance(x, nc.Tensor) else nc.Tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"expected [batch, k, d_in] input, got {x.shape}")
    B, k, _ = x.shape
    pe = positional_encoding(k, cfg.d_model)
    rate = cfg.dropout if rng is not None else 0.0
    hid = nc.matmul(x, p["in.W"]) + p["in.b"] + pe
    for layer in range(cfg.n_layers):
        pre = f"l{layer}."
        att = multi_head_attention(hid, p, cfg.n_heads, prefix=pre, attn_sink=attn_sink)
        hid = nc.layer_norm(hid + nc.dropout(att, rate, rng), p[pre + "ln1.g"], p[pre + "ln1.b"])
        ff = nc.matmul(nc.relu(nc.matmul(hid, p[pre + "ff.W1"]) + p[pre + "ff.b1"]), p[pre + "ff.W2"])
        ff = ff + p[pre + "ff.b2"]
        hid = nc.layer_norm(hid + nc.dropout(ff, rate, rng), p[pre + "ln2.g"], p[pre + "ln2.b"])
    last = nc.take_last(hid, axis=1)
    return nc.matmul(last, p["head.W"]) + p["head.b"]


def encoder_forward(window, model: VisionaryModel, attn_sink=None):
    """Forecast (normalized units) for one normalized ``[k, d_in]`` window."""
    w = np.asarray(window, dtype=np.float64)
    if w.shape != (model.config.k, model.d_in):
        raise ContractError(f"window shape {w.shape} != ({model.config.k}, {model.d_in})")
    return forward(model.params, model.config, w[None], attn_sink=attn_sink).data[0].copy()


def loss_fn(pred, target, kind="mse"):
    diff = nc.sub(pred, target)
    return nc.mean(nc.square(diff) if kind == "mse" else nc.absolute(diff))


# --------------------------------------------------------------------------
# training and inference
# --------------------------------------------------------------------------


def _check_samples(ws: WindowSet, name):
    if len(ws) == 0:
        raise DataError(f"{name} set is empty")
    if not np.all(np.isfinite(ws.windows)) or not np.all(np.isfinite(ws.targets)):
        raise DataError(f"{name} set contains non-finite values")


def train_visionary(train: WindowSet, val: WindowSet | None, cfg: VisionaryConfig,
                    on_epoch: Callable[[int, VisionaryModel], None] | None = None):
    """Fit the forecaster on original-units samples; returns (model, curve).

    Normalization statistics come from ``train`` only and are stored on the
    model. ``on_epoch(epoch, model)`` sees an immutable snapshot after every
    epoch; since the learning rate is constant, the snapshot at epoch ``e`` is
    bitwise identical to a run configured with ``epochs=e``.
    """
    cfg.validate()
    _check_samples(train, "train")
    k, d_in = train.windows.shape[1:]
    if k != cfg.k or train.targets.shape[1] != cfg.h:
        raise ContractError("sample shapes disagree with config k/h")
    stats = normalize_fit(train, cfg.target_index)
    ntrain = normalize_apply(stats, train)
    nval = normalize_apply(stats, val) if val is not None and len(val) else None

    params = init_params(cfg, d_in)
    names = list(params)
    state = nc.AdamState()
    shuffle_rng = nc.make_rng(cfg.seed, 1)
    drop_rng = nc.make_rng(cfg.seed, 2) if cfg.dropout > 0 else None
    n = len(ntrain)
    curve = LearningCurve()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            leaves = {nm: nc.Tensor(params[nm], requires_grad=True) for nm in names}
            pred = forward(leaves, cfg, ntrain.windows[idx], rng=drop_rng)
            loss = loss_fn(pred, ntrain.targets[idx], cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            total += value * len(idx)
            nc.backward(loss)
            grads = [leaves[nm].grad if leaves[nm].grad is not None else np.zeros_like(params[nm])
                     for nm in names]
            new, state = nc.adam_step([params[nm] for nm in names], grads, state,
                                      cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            params = dict(zip(names, new))
        train_loss = total / n
        val_loss = float("nan")
        if nval is not None:
            vp = forward(params, cfg, nval.windows)
            val_loss = loss_fn(vp, nval.targets, cfg.loss).item()
        curve.records.append(EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0))
        if on_epoch is not None:
            on_epoch(epoch, VisionaryModel(cfg, d_in, dict(params), stats))

    model = VisionaryModel(cfg, d_in, params, stats)
    for name, arr in params.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {name} is non-finite after training")
    return model, curve


def predict_horizon(model: VisionaryModel, window):
    """Forecast in original units for one original-units ``[k, d_in]`` window."""
    w = np.asarray(window, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != model.norm_stats.mean.shape[0]:
        raise ContractError(f"window width {w.shape} does not match normalization stats")
    z = model.norm_stats.normalize(w)
    out = encoder_forward(z, model)
    return model.norm_stats.denormalize_target(out)


def predict_many(model, windows):
    """Row-by-row predictions; identical to calling ``model.predict`` per window."""
    return np.stack([np.asarray(model.predict(w), dtype=np.float64) for w in windows])


def normalized_losses(model: VisionaryModel, ws: WindowSet):
    """Per-sample normalized loss of the model on ``ws`` (for histograms)."""
    nws = normalize_apply(model.norm_stats, ws)
    pred = forward(model.params, model.config, nws.windows).data
    err = pred - nws.targets
    per = (err ** 2) if model.config.loss == "mse" else np.abs(err)
    return per.mean(axis=1)


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------


def save_visionary(model: VisionaryModel, path):
    manifest = {
        "format": FORMAT_TAG,
        "config": asdict(model.config),
        "d_in": model.d_in,
        "norm_stats": model.norm_stats.to_dict(),
        "param_order": list(model.params),
    }
    nc.write_container(path, manifest, model.params)


def load_visionary(path):
    manifest, tensors = nc.read_container(path)
    if manifest.get("format") != FORMAT_TAG:
        raise ContractError(f"{path}: not a {FORMAT_TAG} file")
    cfg = VisionaryConfig.from_dict(manifest["config"])
    params = {name: tensors[name] for name in manifest["param_order"]}
    return VisionaryModel(cfg, manifest["d_in"], params, NormStats.from_dict(manifest["norm_stats"]))
