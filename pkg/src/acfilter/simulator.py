"""Synthetic native-ad marketplace with known ground truth.

Each impression is an accidental click with a context-only probability
``p_ac(segment, involvement, device)``, otherwise an intentional click with
``p_ic(u, a) = sigmoid(b* + seg_offset + <u, a>)``, otherwise a skip.  Clicks
on dwell-logged segments get a dwell-time below ``tau_gen`` (accidental) or
at/above it (intentional).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit, ndtri

from acfilter import hashing as H
from acfilter.events import OUTCOME_AC, OUTCOME_IC, OUTCOME_SKIP, Column, EventBatch

INVOLVEMENT_BINS = ("0-10", "11-20", "21-50", "51-100", "101-200", "201-500", "501-1000", "1001-5000")
# accidental-click percentage per involvement bin at a 3 s threshold
TABLE1_AC_SHARES = (0.0637, 0.0370, 0.0337, 0.0336, 0.0276, 0.0205, 0.0174, 0.0158)
DEVICES = ("smartphone", "tablet", "desktop")
OS_BY_DEVICE = {"smartphone": ("ios", "android"), "tablet": ("ios", "android"), "desktop": ("windows", "macos")}
OPERATING_SYSTEMS = ("ios", "android", "windows", "macos")
BROWSERS = ("chrome", "safari", "firefox", "edge", "in-app")
GENDERS = ("female", "male")
AGES = ("18-24", "25-34", "35-44", "45-54", "55-64", "65+")
TECH_VOCAB = DEVICES + OPERATING_SYSTEMS + BROWSERS
WORLD_FORMAT = "acfilter.world"
WORLD_VERSION = 1


class WorldError(ValueError):
    pass


@dataclass
class WorldConfig:
    n_users: int = 5000
    n_ads: int = 400
    n_campaigns: int = 60
    n_categories: int = 12
    n_segments: int = 15
    latent_dim_true: int = 4
    base_ic_rate: float = 0.05
    latent_scale: float = 1.0
    user_noise: float = 0.25
    ad_noise: float = 0.5
    segment_ic_spread: float = 0.3
    involvement_weights: list | None = None
    device_weights: list = field(default_factory=lambda: [0.5, 0.2, 0.3])
    # true share of clicks that are accidental, per involvement bin
    ac_share_by_involvement: list | None = field(default_factory=lambda: list(TABLE1_AC_SHARES))
    # when set, every involvement bin gets this share
    ac_share: float | None = None
    ac_device_multiplier: dict = field(default_factory=lambda: {"smartphone": 1.0, "tablet": 0.75, "desktop": 0.6})
    ac_segment_spread: float = 0.3
    # explicit per-cell rate overrides, keyed "segment|involvement|device"
    ac_rate_by_cell: dict = field(default_factory=dict)
    dwell_logged_segments: list | str | None = None
    dwell_logged_fraction: float = 0.13
    tau_gen: float = 3.0
    dwell_ic_mu: float = 2.0
    dwell_ic_sigma: float = 1.0
    dwell_blur: float = 0.0
    bid_mu: float = 0.0
    bid_sigma: float = 0.5
    probe_pairs: int = 100_000
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict | None) -> "WorldConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise WorldError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        for name in ("n_users", "n_ads", "n_campaigns", "n_categories", "n_segments"):
            if getattr(self, name) < 1:
                raise WorldError(f"{name} must be >= 1")
        if self.latent_dim_true < 0:
            raise WorldError("latent_dim_true must be >= 0")
        if not 0.0 < self.base_ic_rate < 1.0:
            raise WorldError("base_ic_rate must lie strictly between 0 and 1")
        shares = self.shares()
        if any(not 0.0 <= s < 1.0 for s in shares):
            raise WorldError("accidental-click shares must lie in [0, 1)")
        if self.tau_gen <= 0:
            raise WorldError("tau_gen must be > 0")
        if not 0.0 <= self.dwell_blur < self.tau_gen:
            raise WorldError("dwell_blur must lie in [0, tau_gen)")
        if set(self.ac_device_multiplier) - set(DEVICES):
            raise WorldError(f"device multipliers must be keyed by {DEVICES}")

    def shares(self) -> list[float]:
        if self.ac_share is not None:
            return [float(self.ac_share)] * len(INVOLVEMENT_BINS)
        if self.ac_share_by_involvement is None:
            return [0.0] * len(INVOLVEMENT_BINS)
        if len(self.ac_share_by_involvement) != len(INVOLVEMENT_BINS):
            raise WorldError(f"need {len(INVOLVEMENT_BINS)} involvement shares")
        return [float(s) for s in self.ac_share_by_involvement]


def segment_name(j: int) -> str:
    return f"seg{j:02d}"


@dataclass
class GroundTruthWorld:
    config: WorldConfig
    ic_bias: float
    user_vec: np.ndarray  # (n_users, D)
    ad_vec: np.ndarray  # (n_ads, D)
    segment_offset: np.ndarray  # (n_segments,)
    ac_rate: np.ndarray  # (n_segments, n_bins, n_devices)
    user_involvement: np.ndarray
    user_device: np.ndarray
    user_os: np.ndarray
    user_browser: np.ndarray
    user_gender: np.ndarray
    user_age: np.ndarray
    ad_campaign: np.ndarray
    ad_category: np.ndarray
    ad_bid: np.ndarray
    dwell_logged: np.ndarray  # (n_segments,) bool

    # ------------------------------------------------------------ names

    @property
    def segment_names(self) -> list[str]:
        return [segment_name(j) for j in range(self.config.n_segments)]

    @property
    def user_names(self) -> list[str]:
        return [f"u{i:06d}" for i in range(self.config.n_users)]

    @property
    def ad_names(self) -> list[str]:
        return [f"ad{i:05d}" for i in range(self.config.n_ads)]

    # ------------------------------------------------------------ truth

    def p_ic(self, users, segments, ads) -> np.ndarray:
        s = self.ic_bias + self.segment_offset[segments]
        if self.user_vec.shape[1]:
            s = s + np.einsum("ij,ij->i", self.user_vec[users], self.ad_vec[ads])
        return expit(s)

    def p_ac(self, users, segments) -> np.ndarray:
        return self.ac_rate[segments, self.user_involvement[users], self.user_device[users]]

    def p_total(self, users, segments, ads) -> np.ndarray:
        pac = self.p_ac(users, segments)
        return pac + (1.0 - pac) * self.p_ic(users, segments, ads)

    # ------------------------------------------------------------ batches

    def make_batch(self, event_ids, users, segments, ads, clicked=None, dwell=None,
                   outcome=None) -> EventBatch:
        n = len(event_ids)
        users = np.asarray(users, dtype=np.int64)
        segments = np.asarray(segments, dtype=np.int64)
        ads = np.asarray(ads, dtype=np.int64)
        tech_codes = np.stack(
            [
                self.user_device[users],
                len(DEVICES) + self.user_os[users],
                len(DEVICES) + len(OPERATING_SYSTEMS) + self.user_browser[users],
            ],
            axis=1,
        ).reshape(-1)
        demo = self.user_gender[users] * len(AGES) + self.user_age[users]
        cfg = self.config
        return EventBatch(
            event_id=np.asarray(event_ids, dtype=np.int64),
            segment=Column(np.asarray(segments, dtype=np.int32), self.segment_names),
            user={
                "user_id": Column(users.astype(np.int32), self.user_names),
                "involvement": Column(self.user_involvement[users].astype(np.int32), list(INVOLVEMENT_BINS)),
                "tech": Column(tech_codes.astype(np.int32), list(TECH_VOCAB), np.arange(0, 3 * n + 1, 3, dtype=np.int64)),
                "device": Column(self.user_device[users].astype(np.int32), list(DEVICES)),
                "gender": Column(self.user_gender[users].astype(np.int32), list(GENDERS)),
                "demo": Column(demo.astype(np.int32), [f"{g}/{a}" for g in GENDERS for a in AGES]),
            },
            ad={
                "ad_id": Column(np.asarray(ads, dtype=np.int32), self.ad_names),
                "campaign_id": Column(self.ad_campaign[ads].astype(np.int32), [f"cmp{j:03d}" for j in range(cfg.n_campaigns)]),
                "category": Column(self.ad_category[ads].astype(np.int32), [f"cat{j:02d}" for j in range(cfg.n_categories)]),
            },
            clicked=np.zeros(n, bool) if clicked is None else clicked,
            dwell_s=np.full(n, np.nan) if dwell is None else dwell,
            dwell_logged=self.dwell_logged[segments],
            outcome=outcome,
        )

    def event_layout(self) -> dict:
        """Feature layout of the events this world generates."""
        e = np.zeros(0, dtype=np.int64)
        return self.make_batch(e, e, e, e).layout()

    def indices(self, batch: EventBatch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(user, segment, ad) indices of a batch's events in this world."""

        def lut(col: Column, names: list[str], what: str) -> np.ndarray:
            pos = {name: i for i, name in enumerate(names)}
            try:
                table = np.array([pos[v] for v in col.vocab], dtype=np.int64)
            except KeyError as exc:
                raise WorldError(f"{what} {exc.args[0]!r} does not exist in this world") from None
            return table[col.codes] if len(col.codes) else np.zeros(0, np.int64)

        return (
            lut(batch.user["user_id"], self.user_names, "user"),
            lut(batch.segment, self.segment_names, "segment"),
            lut(batch.ad["ad_id"], self.ad_names, "ad"),
        )

    # ------------------------------------------------------------ io

    def to_dict(self) -> dict:
        arrays = {
            name: getattr(self, name).tolist()
            for name in (
                "user_vec", "ad_vec", "segment_offset", "ac_rate", "user_involvement", "user_device",
                "user_os", "user_browser", "user_gender", "user_age", "ad_campaign", "ad_category",
                "ad_bid", "dwell_logged",
            )
        }
        return {
            "format": WORLD_FORMAT,
            "version": WORLD_VERSION,
            "config": self.config.to_dict(),
            "ic_bias": self.ic_bias,
            **arrays,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthWorld":
        if d.get("format") != WORLD_FORMAT or d.get("version") != WORLD_VERSION:
            raise WorldError("not a supported world file")
        cfg = WorldConfig.from_dict(d["config"])
        D = cfg.latent_dim_true
        f64 = lambda k, shape=None: np.asarray(d[k], dtype=np.float64).reshape(shape) if shape else np.asarray(d[k], dtype=np.float64)
        i64 = lambda k: np.asarray(d[k], dtype=np.int64)
        return cls(
            config=cfg,
            ic_bias=float(d["ic_bias"]),
            user_vec=f64("user_vec", (cfg.n_users, D)),
            ad_vec=f64("ad_vec", (cfg.n_ads, D)),
            segment_offset=f64("segment_offset"),
            ac_rate=f64("ac_rate"),
            user_involvement=i64("user_involvement"),
            user_device=i64("user_device"),
            user_os=i64("user_os"),
            user_browser=i64("user_browser"),
            user_gender=i64("user_gender"),
            user_age=i64("user_age"),
            ad_campaign=i64("ad_campaign"),
            ad_category=i64("ad_category"),
            ad_bid=f64("ad_bid"),
            dwell_logged=np.asarray(d["dwell_logged"], dtype=bool),
        )

    @classmethod
    def from_json(cls, text: str) -> "GroundTruthWorld":
        return cls.from_dict(json.loads(text))


# ---------------------------------------------------------------- building


def _logged_segments(cfg: WorldConfig) -> np.ndarray:
    mask = np.zeros(cfg.n_segments, dtype=bool)
    spec = cfg.dwell_logged_segments
    if spec == "all":
        mask[:] = True
    elif spec is None:
        k = max(1, int(round(cfg.dwell_logged_fraction * cfg.n_segments)))
        mask[:k] = True
    else:
        names = [segment_name(j) for j in range(cfg.n_segments)]
        for s in spec:
            if s not in names:
                raise WorldError(f"dwell-logged segment {s!r} does not exist")
            mask[names.index(s)] = True
    return mask


def _rate_from_share(share: np.ndarray, mean_ic: np.ndarray) -> np.ndarray:
    # share = a / (a + (1 - a) m)  =>  a = s m / (1 - s + s m)
    return share * mean_ic / (1.0 - share + share * mean_ic)


def build_world(cfg: WorldConfig) -> GroundTruthWorld:
    """Deterministically build the ground-truth marketplace for ``cfg``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    n_bins, n_dev = len(INVOLVEMENT_BINS), len(DEVICES)
    D = cfg.latent_dim_true

    inv_w = np.asarray(cfg.involvement_weights or [1.0] * n_bins, dtype=float)
    dev_w = np.asarray(cfg.device_weights, dtype=float)
    if len(inv_w) != n_bins or len(dev_w) != n_dev or inv_w.min() < 0 or dev_w.min() < 0:
        raise WorldError("involvement/device weights have the wrong shape or sign")
    involvement = rng.choice(n_bins, size=cfg.n_users, p=inv_w / inv_w.sum())
    device = rng.choice(n_dev, size=cfg.n_users, p=dev_w / dev_w.sum())
    os_pick = rng.integers(0, 2, size=cfg.n_users)
    user_os = np.array([OPERATING_SYSTEMS.index(OS_BY_DEVICE[DEVICES[d]][o]) for d, o in zip(device, os_pick)], dtype=np.int64)
    browser = rng.integers(0, len(BROWSERS), size=cfg.n_users)
    gender = rng.integers(0, len(GENDERS), size=cfg.n_users)
    age = rng.integers(0, len(AGES), size=cfg.n_users)
    demo = gender * len(AGES) + age

    demo_centroid = rng.normal(size=(len(GENDERS) * len(AGES), D))
    user_vec = demo_centroid[demo] + cfg.user_noise * rng.normal(size=(cfg.n_users, D))
    camp_centroid = rng.normal(size=(cfg.n_campaigns, D))
    ad_campaign = rng.integers(0, cfg.n_campaigns, size=cfg.n_ads)
    camp_category = rng.integers(0, cfg.n_categories, size=cfg.n_campaigns)
    ad_vec = camp_centroid[ad_campaign] + cfg.ad_noise * rng.normal(size=(cfg.n_ads, D))
    ad_bid = np.exp(cfg.bid_mu + cfg.bid_sigma * rng.normal(size=cfg.n_ads))
    segment_offset = cfg.segment_ic_spread * rng.normal(size=cfg.n_segments)
    seg_mult = np.exp(cfg.ac_segment_spread * rng.normal(size=cfg.n_segments))

    pu = rng.integers(0, cfg.n_users, size=cfg.probe_pairs)
    ps = rng.integers(0, cfg.n_segments, size=cfg.probe_pairs)
    pa = rng.integers(0, cfg.n_ads, size=cfg.probe_pairs)
    if D:
        inter = np.einsum("ij,ij->i", user_vec[pu], ad_vec[pa])
        sd = inter.std()
        if sd > 0:
            ad_vec *= cfg.latent_scale / sd
    inter = np.einsum("ij,ij->i", user_vec[pu], ad_vec[pa]) if D else np.zeros(cfg.probe_pairs)
    probe = segment_offset[ps] + inter
    ic_bias = brentq(lambda b: expit(b + probe).mean() - cfg.base_ic_rate, -60.0, 60.0, xtol=1e-14)

    world = GroundTruthWorld(
        config=cfg,
        ic_bias=float(ic_bias),
        user_vec=user_vec,
        ad_vec=ad_vec,
        segment_offset=segment_offset,
        ac_rate=np.zeros((cfg.n_segments, n_bins, n_dev)),
        user_involvement=involvement.astype(np.int64),
        user_device=device.astype(np.int64),
        user_os=user_os,
        user_browser=browser.astype(np.int64),
        user_gender=gender.astype(np.int64),
        user_age=age.astype(np.int64),
        ad_campaign=ad_campaign.astype(np.int64),
        ad_category=camp_category[ad_campaign].astype(np.int64),
        ad_bid=ad_bid,
        dwell_logged=_logged_segments(cfg),
    )
    world.ac_rate = _solve_ac_rates(world, seg_mult)
    for key, rate in sorted(cfg.ac_rate_by_cell.items()):
        seg, inv, dev = key.split("|")
        try:
            cell = (world.segment_names.index(seg), INVOLVEMENT_BINS.index(inv), DEVICES.index(dev))
        except ValueError:
            raise WorldError(f"unknown AC cell {key!r}") from None
        if not 0.0 <= rate <= 1.0:
            raise WorldError(f"AC rate for {key!r} outside [0, 1]")
        world.ac_rate[cell] = rate
    return world


def _mean_ic_by_cell(world: GroundTruthWorld) -> tuple[np.ndarray, np.ndarray]:
    """Exact expected p_ic per (segment, bin, device) under uniform ad draws,
    and the number of users in each (bin, device)."""
    cfg = world.config
    n_bins, n_dev = len(INVOLVEMENT_BINS), len(DEVICES)
    per_user = np.empty((cfg.n_users, cfg.n_segments))
    for lo in range(0, cfg.n_users, 256):
        hi = min(lo + 256, cfg.n_users)
        inter = world.user_vec[lo:hi] @ world.ad_vec.T if cfg.latent_dim_true else np.zeros((hi - lo, cfg.n_ads))
        s = world.ic_bias + inter[:, None, :] + world.segment_offset[None, :, None]
        per_user[lo:hi] = expit(s).mean(axis=2)
    cell = world.user_involvement * n_dev + world.user_device
    counts = np.bincount(cell, minlength=n_bins * n_dev).astype(float)
    sums = np.stack([np.bincount(cell, weights=per_user[:, s], minlength=n_bins * n_dev) for s in range(cfg.n_segments)])
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / counts, cfg.base_ic_rate)
    return mean.reshape(cfg.n_segments, n_bins, n_dev), counts.reshape(n_bins, n_dev)


def _solve_ac_rates(world: GroundTruthWorld, seg_mult: np.ndarray) -> np.ndarray:
    """Per-cell AC rates whose aggregate click share in each involvement bin hits its target."""
    cfg = world.config
    shares = cfg.shares()
    mean_ic, counts = _mean_ic_by_cell(world)
    dev_mult = np.array([cfg.ac_device_multiplier.get(d, 1.0) for d in DEVICES])
    rates = np.zeros_like(mean_ic)
    for b, target in enumerate(shares):
        if target == 0.0:
            continue
        mult = seg_mult[:, None] * dev_mult[None, :]  # (segments, devices)
        m = mean_ic[:, b, :]
        w = np.broadcast_to(counts[b][None, :], m.shape)
        if w.sum() == 0:
            rates[:, b, :] = _rate_from_share(np.full_like(m, target), m)
            continue

        def agg(scale):
            a = _rate_from_share(np.minimum(target * scale * mult, 1.0 - 1e-12), m)
            return (w * a).sum() / (w * (a + (1.0 - a) * m)).sum() - target

        upper = (1.0 - 1e-9) / (target * mult.max())
        if agg(upper) < 0:
            raise WorldError(f"AC share {target} infeasible for involvement bin {INVOLVEMENT_BINS[b]}")
        scale = brentq(agg, 1e-9, upper, xtol=1e-15)
        rates[:, b, :] = _rate_from_share(np.minimum(target * scale * mult, 1.0 - 1e-12), m)
    return rates


# ---------------------------------------------------------------- sampling


def _dwell_times(world: GroundTruthWorld, ids: np.ndarray, outcome: np.ndarray, seed: int) -> np.ndarray:
    cfg = world.config
    u = H.hashed_uniform(seed, ids, H.TAG_DWELL_A)
    z = ndtri(np.clip(H.hashed_uniform(seed, ids, H.TAG_DWELL_B), 1e-300, 1.0 - 2**-53))
    ac = (cfg.tau_gen + cfg.dwell_blur) * u
    ic = (cfg.tau_gen - cfg.dwell_blur) + np.exp(cfg.dwell_ic_mu + cfg.dwell_ic_sigma * z)
    # millisecond resolution; floor keeps accidental dwell strictly below tau_gen
    ac = np.floor(ac * 1000.0) / 1000.0
    ic = np.ceil(ic * 1000.0) / 1000.0
    return np.where(outcome == OUTCOME_AC, ac, ic)


def sample_events(world: GroundTruthWorld, n: int, seed: int, start: int = 0) -> EventBatch:
    """Impressions with ids ``start .. start+n-1``; each is a pure function of (world, seed, id)."""
    if n < 0:
        raise WorldError("n must be >= 0")
    cfg = world.config
    ids = np.arange(start, start + n, dtype=np.int64)
    users = H.hashed_index(seed, ids, H.TAG_USER, cfg.n_users)
    segs = H.hashed_index(seed, ids, H.TAG_SEGMENT, cfg.n_segments)
    ads = H.hashed_index(seed, ids, H.TAG_AD, cfg.n_ads)
    pac = world.p_ac(users, segs)
    pic = world.p_ic(users, segs, ads)
    r = H.hashed_uniform(seed, ids, H.TAG_OUTCOME)
    outcome = np.where(r < pac, OUTCOME_AC, np.where(r < pac + (1.0 - pac) * pic, OUTCOME_IC, OUTCOME_SKIP)).astype(np.int8)
    clicked = outcome != OUTCOME_SKIP
    logged = world.dwell_logged[segs]
    dwell = np.full(n, np.nan)
    has = clicked & logged
    if has.any():
        dwell[has] = _dwell_times(world, ids[has], outcome[has], seed)
    return world.make_batch(ids, users, segs, ads, clicked=clicked, dwell=dwell, outcome=outcome)


def iter_events(world: GroundTruthWorld, n: int, seed: int, start: int = 0, chunk: int = 500_000):
    for lo in range(start, start + n, chunk):
        yield sample_events(world, min(chunk, start + n - lo), seed, start=lo)


# ---------------------------------------------------------------- serving


class OracleSnapshot:
    """Scores events with the world's true click probability.

    ``kind="total"`` (default) gives ``p_ac + (1 - p_ac) p_ic``;
    ``kind="ic"`` gives the intentional-click probability alone.
    """

    def __init__(self, world: GroundTruthWorld, kind: str = "total"):
        if kind not in ("total", "ic"):
            raise WorldError("oracle kind must be 'total' or 'ic'")
        self.world = world
        self.kind = kind

    def predict_batch(self, batch: EventBatch) -> np.ndarray:
        users, segs, ads = self.world.indices(batch)
        if self.kind == "ic":
            return self.world.p_ic(users, segs, ads)
        return self.world.p_total(users, segs, ads)


class ScaledSnapshot:
    """Multiplies another snapshot's predictions by a positive constant."""

    def __init__(self, inner, factor: float):
        self.inner = inner
        self.factor = float(factor)

    def predict_batch(self, batch: EventBatch) -> np.ndarray:
        return self.inner.predict_batch(batch) * self.factor


def cpm_lift(cpm_model: float, cpm_baseline: float) -> float:
    if cpm_baseline == 0:
        raise WorldError("baseline CPM is zero")
    return (cpm_model / cpm_baseline - 1.0) * 100.0


def simulate_serving(world: GroundTruthWorld, snapshots: dict, n_auctions: int, k: int = 20,
                     seed: int = 0, chunk: int = 20_000, return_choices: bool = False):
    """Rank-by-(bid x pCTR) auctions; every mode sees identical users, candidates and outcome draws.

    With ``return_choices`` the per-auction winning ad index of every mode is
    returned alongside the report.
    """
    if not snapshots:
        raise WorldError("no snapshots to serve")
    if k < 1 or n_auctions < 1:
        raise WorldError("need k >= 1 and n_auctions >= 1")
    cfg = world.config
    modes = list(snapshots)
    revenue = {m: 0.0 for m in modes}
    expected = {m: 0.0 for m in modes}
    clicks = {m: 0 for m in modes}
    choices = {m: [] for m in modes}
    for lo in range(0, n_auctions, chunk):
        hi = min(lo + chunk, n_auctions)
        aid = np.arange(lo, hi, dtype=np.int64)
        m = len(aid)
        users = H.hashed_index(seed, aid, H.TAG_AUCTION_USER, cfg.n_users)
        segs = H.hashed_index(seed, aid, H.TAG_AUCTION_SEGMENT, cfg.n_segments)
        slot = (aid[:, None] * k + np.arange(k)[None, :]).reshape(-1)
        cand = H.hashed_index(seed, slot, H.TAG_AUCTION_AD, cfg.n_ads).reshape(m, k)
        rep_u = np.repeat(users, k)
        rep_s = np.repeat(segs, k)
        batch = world.make_batch(slot, rep_u, rep_s, cand.reshape(-1))
        bids = world.ad_bid[cand]
        r = H.hashed_uniform(seed, aid, H.TAG_AUCTION_OUTCOME)
        for mode in modes:
            p = np.asarray(snapshots[mode].predict_batch(batch)).reshape(m, k)
            pick = np.argmax(bids * p, axis=1)
            ad = cand[np.arange(m), pick]
            pt = world.p_total(users, segs, ad)
            bid = world.ad_bid[ad]
            click = r < pt
            revenue[mode] += float(bid[click].sum())
            expected[mode] += float((bid * pt).sum())
            clicks[mode] += int(click.sum())
            choices[mode].append(ad)
    report = {"n_auctions": n_auctions, "k": k, "seed": seed, "modes": {}, "lifts": {}}
    for mode in modes:
        report["modes"][mode] = {
            "revenue": revenue[mode],
            "cpm": 1000.0 * revenue[mode] / n_auctions,
            "expected_revenue": expected[mode],
            "expected_cpm": 1000.0 * expected[mode] / n_auctions,
            "clicks": clicks[mode],
        }
    for a in modes:
        for b in modes:
            if a != b:
                report["lifts"][f"{a}_vs_{b}"] = cpm_lift(report["modes"][a]["cpm"], report["modes"][b]["cpm"])
    if return_choices:
        return report, {mode: np.concatenate(c) for mode, c in choices.items()}
    return report
