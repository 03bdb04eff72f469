"""Latent-factor CTR model: scoring, losses, and the sparse AdaGrad step.

A prediction is ``sigmoid(b + <v_user, v_ad>)`` where each side's vector is
the sum of its features' latent vectors (multi-value features contribute
the mean of their values' vectors).
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from acfilter import kernels
from acfilter.events import SEGMENT, EventBatch
from acfilter.hashing import stable_hash

P_FLOOR = 1e-12
SIDES = ("user", "ad")


class ModelError(ValueError):
    pass


class SchemaMismatch(ModelError):
    pass


# ---------------------------------------------------------------- scalar math


def sigmoid(x):
    """Logistic function, stable for any finite input (scalar or array)."""
    if np.ndim(x) == 0:
        x = float(x)
        if x >= 0.0:
            return 1.0 / (1.0 + math.exp(-x))
        e = math.exp(x)
        return e / (1.0 + e)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(p: float) -> float:
    return math.log(p) - math.log1p(-p)


def _clamp(p: float) -> float:
    return min(max(float(p), P_FLOOR), 1.0 - P_FLOOR)


def logloss(p: float, y: int) -> float:
    """``-(1-y) ln(1-p) - y ln(p)`` with ``p`` clamped to [1e-12, 1-1e-12]."""
    if y not in (0, 1, True, False):
        raise ModelError(f"logloss needs a binary label, got {y!r}")
    q = _clamp(p)
    return -(1 - y) * math.log(1.0 - q) - y * math.log(q)


def cross_entropy(p: float, label: float) -> float:
    """Binary cross-entropy divergence ``l ln(l/p) + (1-l) ln((1-l)/(1-p))``.

    Uses ``0 ln 0 = 0``; equals :func:`logloss` at binary labels.
    """
    if not 0.0 <= label <= 1.0:
        raise ModelError(f"label must lie in [0, 1], got {label!r}")
    q = _clamp(p)
    out = 0.0
    if label > 0.0:
        out += label * (math.log(label) - math.log(q))
    if label < 1.0:
        out += (1.0 - label) * (math.log(1.0 - label) - math.log(1.0 - q))
    return max(out, 0.0)


def logloss_array(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    q = np.clip(np.asarray(p, dtype=np.float64), P_FLOOR, 1.0 - P_FLOOR)
    y = np.asarray(y, dtype=np.float64)
    return -(1.0 - y) * np.log1p(-q) - y * np.log(q)


# ---------------------------------------------------------------- schema


@dataclass(frozen=True)
class FeatureField:
    name: str
    side: str
    multi_value: bool = False
    vocabulary_hint: int | None = None

    def __post_init__(self):
        if self.side not in SIDES:
            raise ModelError(f"feature {self.name!r}: side must be 'user' or 'ad'")


@dataclass(frozen=True)
class FeatureValue:
    field_index: int
    value_id: object


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple[FeatureField, ...]

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ModelError("feature names must be unique")
        for side in SIDES:
            if not any(f.side == side for f in self.fields):
                raise ModelError(f"schema needs at least one {side}-side feature")

    def index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise KeyError(name)

    def side_indices(self, side: str) -> list[int]:
        return [i for i, f in enumerate(self.fields) if f.side == side]

    def to_dict(self) -> dict:
        return {"fields": [asdict(f) for f in self.fields]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(tuple(FeatureField(**f) for f in d["fields"]))

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def check_layout(self, layout: dict) -> None:
        """Raise :class:`SchemaMismatch` naming every field the log lacks."""
        problems = []
        for f in self.fields:
            if f.name == SEGMENT:
                if f.multi_value:
                    problems.append("segment cannot be multi-valued")
                continue
            present = layout.get(f.side, {})
            if f.name not in present:
                problems.append(f"{f.side} feature {f.name!r} missing from log")
            elif bool(present[f.name]) != f.multi_value:
                want = "multi-value" if f.multi_value else "single-value"
                problems.append(f"{f.side} feature {f.name!r} is not {want} in log")
        if problems:
            raise SchemaMismatch("; ".join(problems))

    def features_of(self, event, side: str) -> list[FeatureValue]:
        """Flatten one :class:`~acfilter.events.Event` side into feature values."""
        out = []
        for i in self.side_indices(side):
            f = self.fields[i]
            if f.name == SEGMENT:
                out.append(FeatureValue(i, event.segment))
                continue
            v = getattr(event, side)[f.name]
            if f.multi_value:
                out.extend(FeatureValue(i, x) for x in v)
            else:
                out.append(FeatureValue(i, v))
        return out


@dataclass
class Hyper:
    step_size: float = 0.1
    adagrad_epsilon: float = 1e-8
    l2_lambda: float = 1e-6
    init_sigma: float = 0.01

    def __post_init__(self):
        if not self.step_size > 0:
            raise ModelError("step_size must be > 0")
        if not self.adagrad_epsilon > 0:
            raise ModelError("adagrad_epsilon must be > 0")
        if not self.l2_lambda >= 0:
            raise ModelError("l2_lambda must be >= 0")
        if not self.init_sigma > 0:
            raise ModelError("init_sigma must be > 0")


# ---------------------------------------------------------------- encoding


@dataclass
class Encoded:
    """Per-event sparse rows for both sides (CSR layout)."""

    uptr: np.ndarray
    urows: np.ndarray
    uw: np.ndarray
    aptr: np.ndarray
    arows: np.ndarray
    aw: np.ndarray

    def __len__(self) -> int:
        return len(self.uptr) - 1

    def kernel_args(self):
        return (self.uptr, self.urows, self.uw, self.aptr, self.arows, self.aw)


def _value_sort_key(v):
    return (type(v).__name__, str(v))


def _side_csr(parts: list[tuple[np.ndarray, np.ndarray, np.ndarray]], n: int):
    if parts:
        ev = np.concatenate([p[0] for p in parts])
        rows = np.concatenate([p[1] for p in parts])
        w = np.concatenate([p[2] for p in parts])
    else:
        ev = np.zeros(0, np.int64)
        rows = np.zeros(0, np.int64)
        w = np.zeros(0)
    order = np.argsort(ev, kind="stable")
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(ev, minlength=n), out=ptr[1:])
    return ptr, np.ascontiguousarray(rows[order]), np.ascontiguousarray(w[order])


class _Params:
    """Shared parameter storage and encoding for models and snapshots."""

    schema: FeatureSchema
    dim: int
    hyper: Hyper
    seed: int
    bias_only: bool
    index: dict
    _V: np.ndarray
    _n: int

    # lazy init ----------------------------------------------------------

    def init_vector(self, field_index: int, value_id) -> np.ndarray:
        if self.bias_only:
            return np.zeros(self.dim)
        h = stable_hash(self.seed, field_index, value_id)
        return np.random.default_rng(h).normal(0.0, self.hyper.init_sigma, self.dim)

    def _lookup_rows(self, field_index: int, vocab: Sequence, extra: dict | None) -> np.ndarray:
        """Row of every vocab entry; creates rows (model) or temporary rows (snapshot)."""
        lut = np.empty(len(vocab), dtype=np.int64)
        missing = []
        for j, v in enumerate(vocab):
            r = self.index.get((field_index, v))
            if r is None and extra is not None:
                r = extra.get((field_index, v))
            if r is None:
                missing.append(j)
            else:
                lut[j] = r
        missing.sort(key=lambda j: _value_sort_key(vocab[j]))
        for j in missing:
            lut[j] = self._new_row(field_index, vocab[j], extra)
        return lut

    def _new_row(self, field_index, value_id, extra):
        raise NotImplementedError

    def _encode_values(self, values: Sequence[FeatureValue], side: str, extra=None):
        if not values:
            raise ModelError("no features for side")
        by_field: dict[int, list] = {}
        for fv in values:
            if not 0 <= fv.field_index < len(self.schema.fields):
                raise ModelError(f"field index {fv.field_index} outside schema")
            if self.schema.fields[fv.field_index].side != side:
                raise ModelError(f"feature {self.schema.fields[fv.field_index].name!r} is not {side}-side")
            by_field.setdefault(fv.field_index, []).append(fv.value_id)
        rows, weights = [], []
        for fi in sorted(by_field):
            vals = by_field[fi]
            f = self.schema.fields[fi]
            if not f.multi_value and len(vals) > 1:
                raise ModelError(f"single-value feature {f.name!r} given {len(vals)} values")
            uniq = list(dict.fromkeys(vals))
            lut = self._lookup_rows(fi, uniq, extra)
            if f.multi_value:
                m = len(vals)
                counts = {v: vals.count(v) for v in uniq}
                for v, r in sorted(zip(uniq, lut.tolist()), key=lambda t: _value_sort_key(t[0])):
                    rows.append(r)
                    weights.append(counts[v] / m)
            else:
                rows.append(int(lut[0]))
                weights.append(1.0)
        return np.asarray(rows, dtype=np.int64), np.asarray(weights, dtype=np.float64)

    def _encode_batch(self, batch: EventBatch, extra=None) -> Encoded:
        n = len(batch)
        sides = {}
        for side in SIDES:
            parts = []
            for fi in self.schema.side_indices(side):
                f = self.schema.fields[fi]
                col = batch.column(side, f.name)
                if col.multi_value != f.multi_value:
                    raise SchemaMismatch(f"feature {f.name!r}: multi-value flag differs from schema")
                lut = self._lookup_rows(fi, col.vocab, extra)
                if not f.multi_value:
                    parts.append((np.arange(n, dtype=np.int64), lut[col.codes], np.ones(n)))
                    continue
                lengths = np.diff(col.offsets)
                if not len(col.codes):
                    continue
                ev = np.repeat(np.arange(n, dtype=np.int64), lengths)
                # merge duplicates; order entries canonically by value within each event
                nv = len(col.vocab)
                by_value = sorted(range(nv), key=lambda j: _value_sort_key(col.vocab[j]))
                rank = np.empty(nv, dtype=np.int64)
                rank[by_value] = np.arange(nv)
                key = ev * nv + rank[col.codes]
                uniq, counts = np.unique(key, return_counts=True)
                uev = uniq // nv
                code = np.asarray(by_value, dtype=np.int64)[uniq % nv]
                w = counts / lengths[uev]
                parts.append((uev, lut[code], w.astype(np.float64)))
            sides[side] = _side_csr(parts, n)
            empty = np.flatnonzero(np.diff(sides[side][0]) == 0)
            if len(empty):
                raise ModelError(f"no features for side {side!r} (event {int(batch.event_id[empty[0]])})")
        return Encoded(*sides["user"], *sides["ad"])

    # scoring ------------------------------------------------------------

    @property
    def vectors(self) -> np.ndarray:
        return self._V[: self._n]

    def vector(self, field_index: int, value_id) -> np.ndarray:
        r = self.index.get((field_index, value_id))
        if r is None:
            return self.init_vector(field_index, value_id)
        return self._V[r].copy()

    def _matrix_with(self, extra_rows: list) -> np.ndarray:
        if not extra_rows:
            return self.vectors
        return np.ascontiguousarray(np.vstack([self.vectors, np.array(extra_rows)]))

    def predict_batch(self, batch: EventBatch) -> np.ndarray:
        """Predictions for every event in ``batch``; never mutates parameters."""
        extra_rows: list = []
        enc = self._encode_batch(batch, _ReadOnlyRows(self, extra_rows))
        V = self._matrix_with(extra_rows)
        out = np.empty(len(enc))
        kernels.predict_events(V, float(self.bias), *enc.kernel_args(), out)
        return out

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "n_vectors": self._n,
            "bias": float(self.bias),
            "schema_digest": self.schema.digest(),
        }


class _ReadOnlyRows(dict):
    """Scratch row table used when scoring without touching the model."""

    def __init__(self, params: _Params, rows: list):
        super().__init__()
        self.params = params
        self.rows = rows

    def create(self, field_index, value_id) -> int:
        r = self.params._n + len(self.rows)
        self.rows.append(self.params.init_vector(field_index, value_id))
        self[(field_index, value_id)] = r
        return r


class LatentFactorModel(_Params):
    """Trainable model; vectors are created lazily the first time a value is seen."""

    def __init__(self, schema: FeatureSchema, dim: int = 16, hyper: Hyper | None = None,
                 seed: int = 0, bias: float = 0.0, bias_only: bool = False):
        if dim < 1:
            raise ModelError("dimension must be >= 1")
        self.schema = schema
        self.dim = int(dim)
        self.hyper = hyper or Hyper()
        self.seed = int(seed)
        self.bias_only = bool(bias_only)
        self.index: dict = {}
        self.keys: list = []
        self._V = np.zeros((64, self.dim))
        self._G = np.zeros((64, self.dim))
        self._n = 0
        self._state = np.array([float(bias), 0.0])
        self.meta: dict = {}

    @property
    def bias(self) -> float:
        return float(self._state[0])

    @bias.setter
    def bias(self, value: float) -> None:
        self._state[0] = float(value)

    @property
    def bias_accum(self) -> float:
        return float(self._state[1])

    @property
    def grad_accum(self) -> np.ndarray:
        return self._G[: self._n]

    def _grow(self) -> None:
        cap = 2 * len(self._V)
        for name in ("_V", "_G"):
            old = getattr(self, name)
            new = np.zeros((cap, self.dim))
            new[: self._n] = old[: self._n]
            setattr(self, name, new)

    def _new_row(self, field_index, value_id, extra):
        if isinstance(extra, _ReadOnlyRows):
            return extra.create(field_index, value_id)
        if self._n == len(self._V):
            self._grow()
        r = self._n
        self._V[r] = self.init_vector(field_index, value_id)
        self.index[(field_index, value_id)] = r
        self.keys.append((field_index, value_id))
        self._n += 1
        return r

    def row(self, field_index: int, value_id) -> int:
        """Row of a feature value, creating (lazily initializing) it if needed."""
        return int(self._lookup_rows(field_index, [value_id], None)[0])

    def set_vector(self, field_index: int, value_id, vec) -> None:
        self._V[self.row(field_index, value_id)] = np.asarray(vec, dtype=np.float64)

    def encode(self, batch: EventBatch) -> Encoded:
        return self._encode_batch(batch)

    def fit_encoded(self, enc: Encoded, order: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
        """Sequential AdaGrad pass over ``order`` with per-position ``labels``.

        Returns ``(summed cross-entropy, pre-update predictions)``.
        """
        order = np.ascontiguousarray(order, dtype=np.int64)
        labels = np.ascontiguousarray(labels, dtype=np.float64)
        if len(order) != len(labels):
            raise ModelError("order and labels differ in length")
        if len(labels) and (labels.min() < 0.0 or labels.max() > 1.0):
            raise ModelError("labels must lie in [0, 1]")
        pred = np.empty(len(order))
        h = self.hyper
        loss = kernels.train_events(
            self._V, self._G, self._state, *enc.kernel_args(), order, labels,
            h.step_size, h.adagrad_epsilon, h.l2_lambda, not self.bias_only, pred,
        )
        return float(loss), pred

    def fit_batch(self, batch: EventBatch, labels: np.ndarray, mask: np.ndarray | None = None):
        enc = self.encode(batch)
        order = np.arange(len(batch)) if mask is None else np.flatnonzero(mask)
        lab = np.asarray(labels, dtype=np.float64)
        if mask is not None and len(lab) == len(batch):
            lab = lab[order]
        return self.fit_encoded(enc, order, lab)

    def snapshot(self) -> "ModelSnapshot":
        return ModelSnapshot(self)

    def copy(self) -> "LatentFactorModel":
        return copy.deepcopy(self)

    def digest(self) -> str:
        from acfilter.persistence import model_to_bytes

        # parameters, schema and hyper-parameters; run metadata is not hashed
        return hashlib.sha256(model_to_bytes(self, include_meta=False)).hexdigest()


class ModelSnapshot(_Params):
    """Immutable scoring view of a model; safe to share between threads."""

    def __init__(self, model: _Params, bias: float | None = None):
        self.schema = model.schema
        self.dim = model.dim
        self.hyper = model.hyper
        self.seed = model.seed
        self.bias_only = model.bias_only
        self.index = dict(model.index)
        self.keys = list(getattr(model, "keys", []))
        self._n = model._n
        self._V = np.array(model._V[: model._n])
        self._V.setflags(write=False)
        self._bias = float(model.bias if bias is None else bias)
        self.meta = dict(getattr(model, "meta", {}))

    @property
    def bias(self) -> float:
        return self._bias

    def _new_row(self, field_index, value_id, extra):
        if not isinstance(extra, _ReadOnlyRows):
            raise ModelError("snapshots are read-only")
        return extra.create(field_index, value_id)


# ---------------------------------------------------------------- per-event API


def entity_vector(model: _Params, values: Sequence[FeatureValue]) -> np.ndarray:
    """Sum of the latent vectors of ``values`` (mean within multi-value fields)."""
    if not values:
        raise ModelError("no features for side")
    side = model.schema.fields[values[0].field_index].side
    extra_rows: list = []
    extra = None if isinstance(model, LatentFactorModel) else _ReadOnlyRows(model, extra_rows)
    rows, w = model._encode_values(values, side, extra)
    V = model._matrix_with(extra_rows)
    out = np.zeros(model.dim)
    for r, wj in zip(rows.tolist(), w.tolist()):
        out += wj * V[r]
    return out


def _single(model: _Params, u: Sequence[FeatureValue], a: Sequence[FeatureValue], extra=None):
    ur, uw = model._encode_values(u, "user", extra)
    ar, aw = model._encode_values(a, "ad", extra)
    enc = Encoded(np.array([0, len(ur)], dtype=np.int64), ur, uw,
                  np.array([0, len(ar)], dtype=np.int64), ar, aw)
    return enc


def score(model: _Params, u: Sequence[FeatureValue], a: Sequence[FeatureValue]) -> float:
    """``b + <entity_vector(u), entity_vector(a)>``."""
    vu = entity_vector(model, u)
    va = entity_vector(model, a)
    dot = 0.0
    for x, y in zip(vu.tolist(), va.tolist()):
        dot += x * y
    return model.bias + dot


def predict(model: _Params, u: Sequence[FeatureValue], a: Sequence[FeatureValue]) -> float:
    extra_rows: list = []
    extra = None if isinstance(model, LatentFactorModel) else _ReadOnlyRows(model, extra_rows)
    enc = _single(model, u, a, extra)
    out = np.empty(1)
    kernels.predict_events(model._matrix_with(extra_rows), float(model.bias), *enc.kernel_args(), out)
    return float(out[0])


def sgd_update(model: LatentFactorModel, u: Sequence[FeatureValue], a: Sequence[FeatureValue],
               label: float) -> float:
    """One AdaGrad step on a single event; returns the pre-update prediction."""
    enc = _single(model, u, a)
    _, pred = model.fit_encoded(enc, np.zeros(1, dtype=np.int64), np.array([float(label)]))
    return float(pred[0])


@dataclass
class EventGradient:
    prediction: float
    bias: float
    user_rows: np.ndarray
    user_grad: np.ndarray
    ad_rows: np.ndarray
    ad_grad: np.ndarray


def event_gradient(model: LatentFactorModel, u: Sequence[FeatureValue], a: Sequence[FeatureValue],
                   label: float) -> EventGradient:
    """Analytic gradient of the regularized per-event loss (the one sgd_update applies).

    The bias is not regularized.
    """
    ur, uw = model._encode_values(u, "user")
    ar, aw = model._encode_values(a, "ad")
    gu = np.zeros((len(ur), model.dim))
    ga = np.zeros((len(ar), model.dim))
    lam = model.hyper.l2_lambda
    p, gb = kernels.event_gradient(model._V, model.bias, ur, uw, ar, aw, float(label), lam, gu, ga)
    if model.bias_only:
        gu[:] = 0.0
        ga[:] = 0.0
    return EventGradient(float(p), float(gb), ur, gu, ar, ga)


def apply_downsampling_correction(model: _Params, R: float) -> ModelSnapshot:
    """Read-only snapshot with bias ``b - ln R`` for a model trained on skips kept at 1/R."""
    if not R > 1.0:
        raise ModelError("invalid down-sampling factor")
    return ModelSnapshot(model, bias=model.bias - math.log(R))


class ConstantSnapshot:
    """Predicts the same probability for every event."""

    def __init__(self, p: float):
        if not 0.0 <= p <= 1.0:
            raise ModelError("probability outside [0, 1]")
        self.p = float(p)

    def predict_batch(self, batch: EventBatch) -> np.ndarray:
        return np.full(len(batch), self.p)
