"""Auxiliary accidental-click (AC) model.

A thin latent-factor model over context features only: involvement and the
multi-value tech feature play the "user" role, the site-and-position segment
plays the "ad" role.  Skips are negatives, accidental clicks positives;
intentional clicks and clicks without logged dwell-time are left out.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from acfilter import hashing as H
from acfilter.events import SEGMENT, Event, EventBatch
from acfilter.model import (
    FeatureField,
    FeatureSchema,
    Hyper,
    LatentFactorModel,
    ModelError,
    apply_downsampling_correction,
)

# vectorized click classes
SKIP, IC, AC, UNKNOWN = 0, 1, 2, 3

AC_SCHEMA = FeatureSchema(
    (
        FeatureField("involvement", "user"),
        FeatureField("tech", "user", multi_value=True),
        FeatureField(SEGMENT, "ad"),
    )
)


class ClickClass(str, enum.Enum):
    AC = "AC"
    IC = "IC"
    UNKNOWN = "Unknown"


def classify_click(event: Event, tau_ac_s: float) -> ClickClass:
    if not event.clicked:
        raise ValueError("not a click")
    if event.dwell_s is None:
        return ClickClass.UNKNOWN
    return ClickClass.AC if event.dwell_s < tau_ac_s else ClickClass.IC


def classify_events(batch: EventBatch, tau_ac_s: float) -> np.ndarray:
    """SKIP / IC / AC / UNKNOWN code per event."""
    out = np.full(len(batch), SKIP, dtype=np.int8)
    has = ~np.isnan(batch.dwell_s)
    out[batch.clicked & ~has] = UNKNOWN
    with np.errstate(invalid="ignore"):
        short = batch.dwell_s < tau_ac_s
    out[batch.clicked & has & short] = AC
    out[batch.clicked & has & ~short] = IC
    return out


def keep_skips(event_ids: np.ndarray, R: float, seed: int) -> np.ndarray:
    """Skip down-sampling decision per event id: kept with probability 1/R."""
    if R < 1.0:
        raise ModelError("invalid down-sampling factor")
    if R == 1.0:
        return np.ones(len(event_ids), dtype=bool)
    return H.hashed_uniform(seed, event_ids, H.TAG_KEEP_SKIP) < 1.0 / R


def as_chunks(events) -> Iterator[EventBatch]:
    """Accept a batch, an iterable of batches, or a zero-arg factory of one."""
    if isinstance(events, EventBatch):
        yield events
        return
    if callable(events):
        events = events()
    yield from events


@dataclass
class AcTrainingConfig:
    tau_ac_s: float = 3.0
    downsample_R: float = 1.0
    dim: int = 4
    hyper: Hyper = field(default_factory=Hyper)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = Hyper(**self.hyper)
        if not self.tau_ac_s > 0:
            raise ModelError("tau_ac_s must be > 0")
        if not self.downsample_R >= 1.0:
            raise ModelError("invalid down-sampling factor")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AcCounters:
    n_skips_kept: int = 0
    n_acs: int = 0
    n_ics_excluded: int = 0
    n_unknown_excluded: int = 0
    loss_sum: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def new_ac_model(cfg: AcTrainingConfig) -> LatentFactorModel:
    model = LatentFactorModel(AC_SCHEMA, cfg.dim, cfg.hyper, seed=cfg.seed)
    model.meta = {"role": "ac", "tau_ac_s": cfg.tau_ac_s, "downsample_R": cfg.downsample_R}
    return model


def ac_training_plan(batch: EventBatch, cfg: AcTrainingConfig, seed: int | None = None):
    """Positions trained by the AC model, their labels, and the class codes."""
    cls = classify_events(batch, cfg.tau_ac_s)
    kept = keep_skips(batch.event_id, cfg.downsample_R, cfg.seed if seed is None else seed)
    train = (cls == AC) | ((cls == SKIP) & kept)
    order = np.flatnonzero(train)
    labels = (cls[order] == AC).astype(np.float64)
    return order, labels, cls, kept


def train_ac(model: LatentFactorModel, events, cfg: AcTrainingConfig,
             rng_seed: int | None = None) -> tuple[LatentFactorModel, AcCounters]:
    """One sequential pass of the AC update block over ``events`` (mutates ``model``)."""
    counters = AcCounters()
    for batch in as_chunks(events):
        if not len(batch):
            continue
        order, labels, cls, kept = ac_training_plan(batch, cfg, rng_seed)
        counters.n_skips_kept += int(((cls == SKIP) & kept).sum())
        counters.n_acs += int((cls == AC).sum())
        counters.n_ics_excluded += int((cls == IC).sum())
        counters.n_unknown_excluded += int((cls == UNKNOWN).sum())
        if len(order):
            enc = model.encode(batch.take(order))
            loss, _ = model.fit_encoded(enc, np.arange(len(order)), labels)
            counters.loss_sum += loss
    return model, counters


def predict_ac(snapshot, batch: EventBatch) -> np.ndarray:
    """Raw AC-model prediction per event; this is the soft label the click trainer uses."""
    return snapshot.predict_batch(batch)


def predict_ac_corrected(snapshot, batch: EventBatch, R: float) -> np.ndarray:
    """Absolute AC rate: the raw prediction with the down-sampling bias removed."""
    if R == 1.0:
        return predict_ac(snapshot, batch)
    return apply_downsampling_correction(snapshot, R).predict_batch(batch)
