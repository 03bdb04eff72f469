"""Run configuration and the two-pass (or per-period) training pipeline."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import yaml

from acfilter.ac_trainer import AcCounters, AcTrainingConfig, as_chunks, new_ac_model, train_ac
from acfilter.click_trainer import (
    MODES,
    ClickCounters,
    ClickTrainingConfig,
    ConfigError,
    new_click_model,
    serve_snapshot,
    train_click,
)
from acfilter.events import EventBatch
from acfilter.model import Hyper
from acfilter.simulator import WorldConfig, build_world, iter_events


@dataclass
class ModelSettings:
    dim: int
    hyper: Hyper = field(default_factory=Hyper)
    seed_model: str | None = None

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = Hyper(**self.hyper)


@dataclass
class ServingSettings:
    n_auctions: int = 200_000
    k: int = 20
    oracle: bool = True


@dataclass
class DwellSettings:
    bin_width: float = 0.5
    max_finite: float = 30.0
    thresholds: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 5.0, 8.0])
    slices: list = field(default_factory=lambda: ["device", "gender", "involvement", "segment"])


@dataclass
class RunConfig:
    """Everything a run needs; archived verbatim next to its outputs."""

    world: WorldConfig = field(default_factory=WorldConfig)
    seed: int = 0
    n_train: int = 1_000_000
    n_holdout: int = 250_000
    tau_ac_s: float = 3.0
    downsample_R: float = 1.0
    period: int | None = None
    modes: list = field(default_factory=lambda: ["agnostic", "filtered", "unbiased"])
    ac: ModelSettings = field(default_factory=lambda: ModelSettings(dim=4))
    click: ModelSettings = field(default_factory=lambda: ModelSettings(dim=16))
    # per-mode overrides of the click settings, e.g. {"unbiased": {"hyper": {...}}}
    click_overrides: dict = field(default_factory=dict)
    eval_filter: str | None = "dwell_logged=false"
    tau_grid: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 5.0, 8.0])
    serving: ServingSettings = field(default_factory=ServingSettings)
    dwell: DwellSettings = field(default_factory=DwellSettings)
    chunk_size: int = 200_000
    out: str | None = None

    _nested = {"world": WorldConfig, "ac": ModelSettings, "click": ModelSettings,
               "serving": ServingSettings, "dwell": DwellSettings}

    def __post_init__(self):
        for name, kind in self._nested.items():
            value = getattr(self, name)
            if isinstance(value, dict):
                if kind is WorldConfig:
                    value = WorldConfig.from_dict(value)
                else:
                    _check_keys(kind, value, name)
                    value = kind(**value)
                setattr(self, name, value)
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}")
        for mode, over in self.click_overrides.items():
            if mode not in MODES:
                raise ConfigError(f"click_overrides: unknown mode {mode!r}")
            _check_keys(ModelSettings, over, f"click_overrides.{mode}")
        if self.period is not None and self.period < 1:
            raise ConfigError("period must be >= 1 events")
        if self.n_train < 0 or self.n_holdout < 0:
            raise ConfigError("event counts must be >= 0")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        # validates tau and R
        self.ac_config()

    @classmethod
    def from_dict(cls, d: dict | None) -> "RunConfig":
        d = dict(d or {})
        _check_keys(cls, d, "config")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_overrides(self, **kw) -> "RunConfig":
        """Copy with non-None keyword overrides applied (CLI flags)."""
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def ac_config(self) -> AcTrainingConfig:
        return AcTrainingConfig(tau_ac_s=self.tau_ac_s, downsample_R=self.downsample_R,
                                dim=self.ac.dim, hyper=self.ac.hyper, seed=self.seed)

    def click_config(self, mode: str) -> ClickTrainingConfig:
        s = asdict(self.click)
        over = self.click_overrides.get(mode, {})
        if "hyper" in over:
            s["hyper"] = {**s["hyper"], **over["hyper"]}
        s.update({k: v for k, v in over.items() if k != "hyper"})
        return ClickTrainingConfig(mode=mode, tau_ac_s=self.tau_ac_s, downsample_R=self.downsample_R,
                                   seed_model=s["seed_model"], dim=s["dim"], hyper=s["hyper"], seed=self.seed)


def _check_keys(kind, d: dict, where: str) -> None:
    known = {f.name for f in fields(kind)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


# ---------------------------------------------------------------- event sources


def simulated_source(rc: RunConfig, world=None) -> tuple[Callable[[], Iterator[EventBatch]], Callable[[], Iterator[EventBatch]]]:
    """Re-iterable train and holdout streams; holdout ids follow the training ids."""
    world = world or build_world(rc.world)
    train = lambda: iter_events(world, rc.n_train, rc.seed, 0, rc.chunk_size)
    hold = lambda: iter_events(world, rc.n_holdout, rc.seed, rc.n_train, rc.chunk_size)
    return train, hold


def split_periods(events, period: int) -> Iterator[list[EventBatch]]:
    """Regroup a chunk stream into consecutive periods of ``period`` events."""
    buf, have = [], 0
    for batch in as_chunks(events):
        lo = 0
        while lo < len(batch):
            take = min(period - have, len(batch) - lo)
            buf.append(batch if (lo == 0 and take == len(batch)) else batch.take(np.arange(lo, lo + take)))
            have += take
            lo += take
            if have == period:
                yield buf
                buf, have = [], 0
    if buf:
        yield buf


def _add(acc, part):
    for f in fields(acc):
        setattr(acc, f.name, getattr(acc, f.name) + getattr(part, f.name))


@dataclass
class TrainResult:
    models: dict
    ac_model: object | None
    counters: dict
    ac_counters: AcCounters | None

    def snapshots(self, rc: RunConfig) -> dict:
        return {m: serve_snapshot(model, rc.click_config(m)) for m, model in self.models.items()}

    def report(self) -> dict:
        out = {"modes": {m: c.to_dict() for m, c in self.counters.items()}}
        if self.ac_counters is not None:
            out["ac"] = self.ac_counters.to_dict()
        out["digests"] = {m: model.digest() for m, model in self.models.items()}
        if self.ac_model is not None and hasattr(self.ac_model, "digest"):
            out["digests"]["ac"] = self.ac_model.digest()
        return out


def train_pipeline(events, rc: RunConfig, modes=None, ac_model=None) -> TrainResult:
    """Train the AC model (when needed) and one click model per mode.

    Without a period the log is read twice: the AC block sees the whole log,
    then every click model trains on it against the final AC snapshot.  With
    ``rc.period`` both blocks alternate period by period.  A supplied
    ``ac_model`` is used as-is and not trained further.
    """
    modes = list(modes or rc.modes)
    if not callable(events) and not isinstance(events, EventBatch) and iter(events) is events:
        events = list(events)  # one-shot iterator; both passes need it
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}")
    need_ac = "unbiased" in modes
    cfgs = {m: rc.click_config(m) for m in modes}
    models = {m: new_click_model(cfgs[m]) for m in modes}
    counters = {m: ClickCounters() for m in modes}
    ac_cfg = rc.ac_config()
    train_ac_inline = need_ac and ac_model is None
    if train_ac_inline:
        ac_model = new_ac_model(ac_cfg)
    ac_counters = AcCounters() if train_ac_inline else None

    def click_block(batches):
        snap = ac_model.snapshot() if need_ac and hasattr(ac_model, "snapshot") else ac_model
        for batch in as_chunks(batches):
            for m in modes:
                _, c = train_click(models[m], snap if m == "unbiased" else None, batch, cfgs[m])
                _add(counters[m], c)

    if rc.period is None:
        if train_ac_inline:
            _, c = train_ac(ac_model, events, ac_cfg)
            _add(ac_counters, c)
        click_block(events)
    else:
        for period in split_periods(events, rc.period):
            if train_ac_inline:
                _, c = train_ac(ac_model, period, ac_cfg)
                _add(ac_counters, c)
            click_block(period)
    return TrainResult(models, ac_model if need_ac else None, counters, ac_counters)
