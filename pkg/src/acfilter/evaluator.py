"""Offline metrics: LogLoss, calibration, lifts, dwell-time analysis and threshold sweeps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from acfilter.ac_trainer import as_chunks
from acfilter.events import EventBatch, parse_filter
from acfilter.model import logloss_array


class EvalError(ValueError):
    pass


def _resolve_filter(filt):
    if filt is None or callable(filt):
        return filt
    return parse_filter(filt)


# ---------------------------------------------------------------- LogLoss / calibration


@dataclass
class EvalStats:
    n_events: int
    logloss_mean: float
    sum_pred: float
    sum_label: float
    calibration_ratio: float | None

    @classmethod
    def from_sums(cls, n: int, ll_sum: float, sum_pred: float, sum_label: float) -> "EvalStats":
        ratio = sum_pred / sum_label if sum_label > 0 else None
        return cls(int(n), ll_sum / n if n else float("nan"), float(sum_pred), float(sum_label), ratio)


@dataclass
class EvalReport(EvalStats):
    per_segment: dict = field(default_factory=dict)
    auc: float | None = None  # advisory

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self) -> list[dict]:
        rows = [{"segment": "ALL", **{k: v for k, v in asdict(self).items() if k not in ("per_segment", "auc")}}]
        for seg, st in sorted(self.per_segment.items()):
            rows.append({"segment": seg, **asdict(st)})
        return rows


def auc_score(pred: np.ndarray, label: np.ndarray) -> float | None:
    """Rank-based (Mann-Whitney) AUC with tie averaging; None if one class is absent."""
    pos = label > 0.5
    n_pos = int(pos.sum())
    n_neg = len(label) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(pred)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(snapshot, events, filter=None, with_auc: bool = True) -> EvalReport:
    """LogLoss, prediction/label sums and calibration of ``snapshot`` on a holdout.

    Labels are the raw click indicator.  ``filter`` is an expression such as
    ``"dwell_logged=false"`` or a batch -> mask function.
    """
    pred_fn = _resolve_filter(filter)
    n = 0
    ll = sp = sl = 0.0
    seg: dict[str, list] = {}
    preds, labels = [], []
    for batch in as_chunks(events):
        if pred_fn is not None:
            batch = batch.take(pred_fn(batch))
        if not len(batch):
            continue
        p = np.asarray(snapshot.predict_batch(batch), dtype=np.float64)
        y = batch.clicked.astype(np.float64)
        l = logloss_array(p, y)
        n += len(batch)
        ll += float(l.sum())
        sp += float(p.sum())
        sl += float(y.sum())
        codes = batch.segment.codes
        k = len(batch.segment.vocab)
        cnt = np.bincount(codes, minlength=k)
        sums = [np.bincount(codes, weights=w, minlength=k) for w in (l, p, y)]
        for j, name in enumerate(batch.segment.vocab):
            if cnt[j]:
                acc = seg.setdefault(str(name), [0, 0.0, 0.0, 0.0])
                acc[0] += int(cnt[j])
                for t in range(3):
                    acc[t + 1] += float(sums[t][j])
        if with_auc:
            preds.append(p)
            labels.append(y)
    if n == 0:
        raise EvalError("no events to evaluate")
    per_segment = {s: EvalStats.from_sums(*v) for s, v in sorted(seg.items())}
    auc = auc_score(np.concatenate(preds), np.concatenate(labels)) if with_auc else None
    base = EvalStats.from_sums(n, ll, sp, sl)
    return EvalReport(**asdict(base), per_segment=per_segment, auc=auc)


def logloss_lift(model_report, baseline_report) -> float:
    """Percent LogLoss improvement of the model over the baseline: (1 - LL_m / LL_b) * 100."""
    lm = getattr(model_report, "logloss_mean", model_report)
    lb = getattr(baseline_report, "logloss_mean", baseline_report)
    if lb == 0:
        raise EvalError("baseline LogLoss is zero")
    return (1.0 - lm / lb) * 100.0


def binary_entropy(q: float) -> float:
    if q <= 0.0 or q >= 1.0:
        return 0.0
    return -(q * math.log(q) + (1.0 - q) * math.log(1.0 - q))


# ---------------------------------------------------------------- dwell-time analysis


def default_bin_edges(bin_width: float = 0.5, max_finite: float = 30.0) -> np.ndarray:
    """Finite edges ``0, w, ..., max`` followed by ``inf`` (the ``[max, inf)`` bin)."""
    n = int(round(max_finite / bin_width))
    if n < 1 or not math.isclose(n * bin_width, max_finite):
        raise EvalError("max_finite must be a positive multiple of bin_width")
    return np.append(np.arange(n + 1) * bin_width, np.inf)


@dataclass
class DwellReport:
    """Click dwell-time histogram; the last pmf entry holds clicks without logged dwell."""

    bin_edges: list
    counts: list
    pmf: list
    n_clicks: int
    n_unlogged: int
    ac_share_at: dict
    slices: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def normalized_pmf(self) -> list[float]:
        """PMF scaled so its largest finite-dwell bin is 1 (per-campaign curve style)."""
        finite = self.pmf[:-1]
        top = max(finite) if finite else 0.0
        return [v / top if top > 0 else 0.0 for v in finite]

    def pmf_rows(self) -> list[dict]:
        rows = []
        for key, sub in [(("ALL", "ALL"), self)] + [
            ((name, value), rep) for name, vals in sorted(self.slices.items()) for value, rep in sorted(vals.items())
        ]:
            for i, (c, p) in enumerate(zip(sub.counts, sub.pmf)):
                lo = sub.bin_edges[i] if i < len(sub.bin_edges) - 1 else "unlogged"
                hi = sub.bin_edges[i + 1] if i < len(sub.bin_edges) - 1 else "unlogged"
                rows.append({"slice": key[0], "value": key[1], "bin_lo": lo, "bin_hi": hi, "count": c, "pmf": p})
        return rows

    def share_rows(self) -> list[dict]:
        rows = [{"slice": "ALL", "value": "ALL", "n_clicks": self.n_clicks,
                 **{f"ac_share_at_{t}": v for t, v in self.ac_share_at.items()}}]
        for name, vals in sorted(self.slices.items()):
            for value, rep in sorted(vals.items()):
                rows.append({"slice": name, "value": value, "n_clicks": rep.n_clicks,
                             **{f"ac_share_at_{t}": v for t, v in rep.ac_share_at.items()}})
        return rows


class _DwellAcc:
    def __init__(self, edges: np.ndarray, thresholds):
        self.edges = edges
        self.thresholds = [float(t) for t in thresholds]
        self.counts = np.zeros(len(edges), dtype=np.int64)  # finite bins + unlogged
        self.below = np.zeros(len(self.thresholds), dtype=np.int64)

    def add(self, dwell: np.ndarray) -> None:
        has = ~np.isnan(dwell)
        d = dwell[has]
        self.counts[-1] += int((~has).sum())
        if len(d):
            idx = np.searchsorted(self.edges, d, side="right") - 1
            np.add.at(self.counts, np.clip(idx, 0, len(self.edges) - 2), 1)
            for i, t in enumerate(self.thresholds):
                self.below[i] += int((d < t).sum())

    def report(self) -> DwellReport:
        n = int(self.counts.sum())
        pmf = (self.counts / n).tolist() if n else [0.0] * len(self.counts)
        shares = {_fmt(t): (100.0 * int(b) / n if n else 0.0) for t, b in zip(self.thresholds, self.below)}
        edges = [float(e) if math.isfinite(e) else "inf" for e in self.edges]
        return DwellReport(edges, self.counts.tolist(), pmf, n, int(self.counts[-1]), shares)


def _fmt(t: float) -> str:
    return repr(float(t))


def dwell_analysis(events, bin_edges=None, thresholds=(1.0, 2.0, 3.0, 5.0, 8.0), slice_keys=()) -> DwellReport:
    """Dwell-time PMF and AC shares over clicks, overall and per slice value.

    ``ac_share_at[t]`` is the percentage of all clicks with logged dwell below ``t``;
    clicks without logged dwell count in the denominator and sit in the
    terminal bin (treated as infinite dwell).
    """
    edges = default_bin_edges() if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
    if len(edges) < 2 or edges[0] != 0.0 or np.any(np.diff(edges) <= 0):
        raise EvalError("bin edges must start at 0 and increase")
    if not math.isinf(edges[-1]):
        edges = np.append(edges, np.inf)
    total = _DwellAcc(edges, thresholds)
    per: dict[str, dict[str, _DwellAcc]] = {k: {} for k in slice_keys}
    for batch in as_chunks(events):
        clicks = batch.take(batch.clicked) if not batch.clicked.all() else batch
        if not len(clicks):
            continue
        total.add(clicks.dwell_s)
        for key in slice_keys:
            col = clicks.find_column(key)
            if col.multi_value:
                raise EvalError(f"cannot slice by multi-value feature {key!r}")
            for j in np.unique(col.codes):
                name = str(col.vocab[j])
                acc = per[key].setdefault(name, _DwellAcc(edges, thresholds))
                acc.add(clicks.dwell_s[col.codes == j])
    if total.counts.sum() == 0:
        raise EvalError("no clicks to analyse")
    rep = total.report()
    rep.slices = {k: {v: acc.report() for v, acc in sorted(d.items())} for k, d in per.items()}
    return rep


# ---------------------------------------------------------------- threshold sweep


@dataclass
class SweepRow:
    tau_ac_s: float
    logloss_lift: float
    calibration_ratio: float | None
    logloss_unbiased: float
    logloss_agnostic: float
    n_ac_train: int
    argmax: bool = False


def threshold_sweep(train_events, holdout_events, tau_grid, rc, filter=None) -> list[SweepRow]:
    """Train AC + unbiased models at every threshold and compare with one agnostic baseline.

    ``rc`` is a :class:`acfilter.pipeline.RunConfig`; ``filter`` defaults to
    ``rc.eval_filter``.  The row with the largest lift is flagged (first on ties).
    """
    from dataclasses import replace

    from acfilter.pipeline import train_pipeline

    grid = [float(t) for t in tau_grid]
    if not grid or any(not t > 0 for t in grid):
        raise EvalError("tau grid must be non-empty and positive")
    filt = rc.eval_filter if filter is None else filter
    base = train_pipeline(train_events, rc, ["agnostic"])
    base_rep = evaluate(base.snapshots(rc)["agnostic"], holdout_events, filt, with_auc=False)
    rows = []
    for tau in grid:
        rct = replace(rc, tau_ac_s=tau)
        res = train_pipeline(train_events, rct, ["unbiased"])
        rep = evaluate(res.snapshots(rct)["unbiased"], holdout_events, filt, with_auc=False)
        rows.append(SweepRow(tau, logloss_lift(rep, base_rep), rep.calibration_ratio,
                             rep.logloss_mean, base_rep.logloss_mean, res.counters["unbiased"].n_ac))
    best = max(range(len(rows)), key=lambda i: (rows[i].logloss_lift, -i))
    rows[best].argmax = True
    return rows
