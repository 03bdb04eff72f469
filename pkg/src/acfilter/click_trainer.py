"""Main click model training in four label modes.

``agnostic``       every click is a positive, skips are negatives.
``filtered``       short-dwell clicks become label-0 negatives (never down-sampled).
``filtered-drop``  short-dwell clicks are removed from training altogether.
``unbiased``       negatives (skips and short-dwell clicks) carry the AC model's
                   prediction as a soft label under the cross-entropy loss.

Intentional clicks and clicks without logged dwell are positives in every mode.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from acfilter.ac_trainer import AC, IC, SKIP, UNKNOWN, as_chunks, classify_events, keep_skips, predict_ac
from acfilter.events import SEGMENT, EventBatch
from acfilter.model import (
    FeatureField,
    FeatureSchema,
    Hyper,
    LatentFactorModel,
    ModelError,
    apply_downsampling_correction,
)

MODES = ("agnostic", "filtered", "filtered-drop", "unbiased")

CLICK_SCHEMA = FeatureSchema(
    (
        FeatureField("involvement", "user"),
        FeatureField("tech", "user", multi_value=True),
        FeatureField("demo", "user"),
        FeatureField(SEGMENT, "user"),
        FeatureField("ad_id", "ad"),
        FeatureField("campaign_id", "ad"),
        FeatureField("category", "ad"),
    )
)


class ConfigError(ModelError):
    pass


@dataclass
class ClickTrainingConfig:
    mode: str = "agnostic"
    tau_ac_s: float = 3.0
    downsample_R: float = 1.0
    seed_model: str | None = None
    dim: int = 16
    hyper: Hyper = field(default_factory=Hyper)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = Hyper(**self.hyper)
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if not self.tau_ac_s > 0:
            raise ConfigError("tau_ac_s must be > 0")
        if not self.downsample_R >= 1.0:
            raise ConfigError("invalid down-sampling factor")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClickCounters:
    n_ic: int = 0
    n_ac: int = 0
    n_unknown: int = 0
    n_skips_kept: int = 0
    n_ac_dropped: int = 0
    n_trained: int = 0
    label_mass: float = 0.0
    loss_sum: float = 0.0

    @property
    def loss_mean(self) -> float:
        return self.loss_sum / self.n_trained if self.n_trained else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_mean"] = self.loss_mean
        return d


def new_click_model(cfg: ClickTrainingConfig, schema: FeatureSchema = CLICK_SCHEMA) -> LatentFactorModel:
    """Fresh model, or a copy of ``cfg.seed_model`` when seeding from a mature one."""
    if cfg.seed_model:
        from acfilter.persistence import load_model

        model = load_model(cfg.seed_model)
        if not isinstance(model, LatentFactorModel):
            raise ConfigError("seed model must be a full model file, not a snapshot")
        if model.schema.digest() != schema.digest():
            raise ConfigError("seed model schema does not match the click schema")
        model.hyper = cfg.hyper
    else:
        model = LatentFactorModel(schema, cfg.dim, cfg.hyper, seed=cfg.seed)
    model.meta = {"role": "click", "mode": cfg.mode, "tau_ac_s": cfg.tau_ac_s,
                  "downsample_R": cfg.downsample_R}
    return model


def click_labels(batch: EventBatch, cfg: ClickTrainingConfig, ac_snapshot=None):
    """Trained positions, their labels, and the per-class counts for one batch."""
    cls = classify_events(batch, cfg.tau_ac_s)
    kept = keep_skips(batch.event_id, cfg.downsample_R, cfg.seed)
    skip_kept = (cls == SKIP) & kept
    if cfg.mode == "filtered-drop":
        train = skip_kept | (cls == IC) | (cls == UNKNOWN)
    else:
        train = skip_kept | (cls != SKIP)
    order = np.flatnonzero(train)
    c = cls[order]
    if cfg.mode == "agnostic":
        labels = (c != SKIP).astype(np.float64)
    elif cfg.mode in ("filtered", "filtered-drop"):
        labels = ((c == IC) | (c == UNKNOWN)).astype(np.float64)
    else:
        labels = np.ones(len(order))
        neg = (c == SKIP) | (c == AC)
        if neg.any():
            labels[neg] = predict_ac(ac_snapshot, batch.take(order[neg]))
    counts = {
        "n_ic": int((cls == IC).sum()),
        "n_ac": int((c == AC).sum()),
        "n_unknown": int((cls == UNKNOWN).sum()),
        "n_skips_kept": int(skip_kept.sum()),
        "n_ac_dropped": int((cls == AC).sum() - (c == AC).sum()),
    }
    return order, labels, counts


def train_click(model: LatentFactorModel, ac_model, events, cfg: ClickTrainingConfig):
    """One sequential pass over ``events`` (mutates ``model``); returns ``(model, counters)``."""
    if cfg.mode == "unbiased" and ac_model is None:
        raise ConfigError("unbiased mode requires an AC model")
    if cfg.mode != "unbiased" and ac_model is not None:
        raise ConfigError(f"mode {cfg.mode} must not reference an AC model")
    ac_snapshot = None
    if ac_model is not None:
        ac_snapshot = ac_model.snapshot() if isinstance(ac_model, LatentFactorModel) else ac_model
    counters = ClickCounters()
    for batch in as_chunks(events):
        if not len(batch):
            continue
        order, labels, counts = click_labels(batch, cfg, ac_snapshot)
        for k, v in counts.items():
            setattr(counters, k, getattr(counters, k) + v)
        counters.n_trained += len(order)
        counters.label_mass += float(labels.sum())
        if len(order):
            enc = model.encode(batch.take(order))
            loss, _ = model.fit_encoded(enc, np.arange(len(order)), labels)
            counters.loss_sum += loss
    return model, counters


def serve_snapshot(model, cfg: ClickTrainingConfig):
    """Scoring snapshot with the down-sampling bias removed (plain snapshot for R = 1)."""
    if cfg.downsample_R == 1.0:
        return model.snapshot()
    return apply_downsampling_correction(model, cfg.downsample_R)
