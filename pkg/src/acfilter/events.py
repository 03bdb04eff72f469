"""Impression events: the per-record type, a columnar batch, and the JSONL log.

Wire format, one JSON object per line::

    {"event_id": 7, "segment": "seg03", "user": {...}, "ad": {...},
     "clicked": true, "dwell_s": 1.25, "dwell_logged": true}

``dwell_s`` is omitted when no dwell-time was logged.  The first line of a
log file is a header object carrying ``"format"`` and ``"version"``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

LOG_FORMAT = "acfilter.events"
LOG_VERSION = 1
SEGMENT = "segment"

# private ground-truth outcome codes (never written to logs)
OUTCOME_SKIP = 0
OUTCOME_IC = 1
OUTCOME_AC = 2


class EventLogError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    event_id: int
    segment: str
    user: dict
    ad: dict
    clicked: bool
    dwell_s: float | None = None
    dwell_logged: bool = False

    def __post_init__(self):
        if self.dwell_s is not None:
            if not self.clicked:
                raise EventLogError(f"event {self.event_id}: dwell-time on a skip")
            if not self.dwell_logged:
                raise EventLogError(f"event {self.event_id}: dwell-time on unlogged traffic")
            if not self.dwell_s >= 0.0:
                raise EventLogError(f"event {self.event_id}: negative dwell-time")

    def to_json(self) -> dict:
        rec = {
            "event_id": self.event_id,
            "segment": self.segment,
            "user": self.user,
            "ad": self.ad,
            "clicked": self.clicked,
        }
        if self.dwell_s is not None:
            rec["dwell_s"] = self.dwell_s
        rec["dwell_logged"] = self.dwell_logged
        return rec

    @classmethod
    def from_json(cls, rec: dict) -> "Event":
        try:
            return cls(
                event_id=int(rec["event_id"]),
                segment=rec["segment"],
                user=rec["user"],
                ad=rec["ad"],
                clicked=bool(rec["clicked"]),
                dwell_s=float(rec["dwell_s"]) if "dwell_s" in rec else None,
                dwell_logged=bool(rec["dwell_logged"]),
            )
        except KeyError as exc:
            raise EventLogError(f"missing field {exc.args[0]!r} in event record") from None


@dataclass
class Column:
    """Dictionary-encoded categorical column.

    Single-valued: ``codes[i]`` indexes ``vocab`` for event ``i``.
    Multi-valued: event ``i`` owns ``codes[offsets[i]:offsets[i + 1]]``.
    """

    codes: np.ndarray
    vocab: list
    offsets: np.ndarray | None = None

    @property
    def multi_value(self) -> bool:
        return self.offsets is not None

    def __len__(self) -> int:
        return len(self.codes) if self.offsets is None else len(self.offsets) - 1

    def value(self, i: int):
        if self.offsets is None:
            return self.vocab[self.codes[i]]
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return [self.vocab[c] for c in self.codes[lo:hi]]

    def take(self, idx: np.ndarray) -> "Column":
        if self.offsets is None:
            return Column(self.codes[idx], self.vocab)
        lengths = np.diff(self.offsets)[idx]
        offsets = np.zeros(len(idx) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        starts = self.offsets[:-1][idx]
        flat = np.repeat(starts - offsets[:-1], lengths) + np.arange(offsets[-1])
        return Column(self.codes[flat], self.vocab, offsets)


def _concat_columns(cols: list[Column]) -> Column:
    vocab: list = []
    lookup: dict = {}
    parts = []
    for col in cols:
        remap = np.empty(len(col.vocab), dtype=np.int32)
        for j, v in enumerate(col.vocab):
            if v not in lookup:
                lookup[v] = len(vocab)
                vocab.append(v)
            remap[j] = lookup[v]
        parts.append(remap[col.codes] if len(col.codes) else np.zeros(0, np.int32))
    codes = np.concatenate(parts) if parts else np.zeros(0, np.int32)
    if cols and cols[0].multi_value:
        lengths = np.concatenate([np.diff(c.offsets) for c in cols])
        offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        return Column(codes, vocab, offsets)
    return Column(codes, vocab)


@dataclass
class EventBatch:
    """Columnar block of events; the unit every trainer and evaluator consumes."""

    event_id: np.ndarray
    segment: Column
    user: dict[str, Column]
    ad: dict[str, Column]
    clicked: np.ndarray
    dwell_s: np.ndarray  # NaN where absent
    dwell_logged: np.ndarray
    outcome: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.event_id)

    def column(self, side: str, name: str) -> Column:
        if name == SEGMENT:
            return self.segment
        cols = self.user if side == "user" else self.ad
        try:
            return cols[name]
        except KeyError:
            raise EventLogError(f"{side} feature {name!r} not present in events") from None

    def find_column(self, name: str) -> Column:
        if name == SEGMENT:
            return self.segment
        if name in self.user:
            return self.user[name]
        if name in self.ad:
            return self.ad[name]
        raise EventLogError(f"unknown event attribute {name!r}")

    def take(self, idx) -> "EventBatch":
        idx = np.asarray(idx)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return EventBatch(
            event_id=self.event_id[idx],
            segment=self.segment.take(idx),
            user={k: c.take(idx) for k, c in self.user.items()},
            ad={k: c.take(idx) for k, c in self.ad.items()},
            clicked=self.clicked[idx],
            dwell_s=self.dwell_s[idx],
            dwell_logged=self.dwell_logged[idx],
            outcome=None if self.outcome is None else self.outcome[idx],
        )

    def chunks(self, size: int) -> Iterator["EventBatch"]:
        for lo in range(0, len(self), size):
            yield self.take(np.arange(lo, min(lo + size, len(self))))

    @staticmethod
    def concat(batches: list["EventBatch"]) -> "EventBatch":
        if not batches:
            raise EventLogError("nothing to concatenate")
        first = batches[0]
        outcome = None
        if all(b.outcome is not None for b in batches):
            outcome = np.concatenate([b.outcome for b in batches])
        return EventBatch(
            event_id=np.concatenate([b.event_id for b in batches]),
            segment=_concat_columns([b.segment for b in batches]),
            user={k: _concat_columns([b.user[k] for b in batches]) for k in first.user},
            ad={k: _concat_columns([b.ad[k] for b in batches]) for k in first.ad},
            clicked=np.concatenate([b.clicked for b in batches]),
            dwell_s=np.concatenate([b.dwell_s for b in batches]),
            dwell_logged=np.concatenate([b.dwell_logged for b in batches]),
            outcome=outcome,
        )

    def event(self, i: int) -> Event:
        dwell = self.dwell_s[i]
        return Event(
            event_id=int(self.event_id[i]),
            segment=self.segment.value(i),
            user={k: c.value(i) for k, c in self.user.items()},
            ad={k: c.value(i) for k, c in self.ad.items()},
            clicked=bool(self.clicked[i]),
            dwell_s=None if math.isnan(dwell) else float(dwell),
            dwell_logged=bool(self.dwell_logged[i]),
        )

    def to_events(self) -> list[Event]:
        return [self.event(i) for i in range(len(self))]

    @classmethod
    def from_events(cls, events: Iterable[Event], layout: dict | None = None) -> "EventBatch":
        """Build a batch; ``layout`` maps side -> {name: multi_value} and is
        inferred from the first event when omitted."""
        events = list(events)
        if layout is None:
            if not events:
                raise EventLogError("cannot infer a layout from zero events")
            layout = {
                side: {k: isinstance(v, list) for k, v in getattr(events[0], side).items()}
                for side in ("user", "ad")
            }
        builders = {
            side: {k: _ColumnBuilder(multi) for k, multi in layout[side].items()}
            for side in ("user", "ad")
        }
        seg = _ColumnBuilder(False)
        n = len(events)
        event_id = np.empty(n, dtype=np.int64)
        clicked = np.empty(n, dtype=bool)
        dwell = np.full(n, np.nan)
        logged = np.empty(n, dtype=bool)
        for i, ev in enumerate(events):
            event_id[i] = ev.event_id
            seg.add(ev.segment)
            for side in ("user", "ad"):
                values = getattr(ev, side)
                for k, b in builders[side].items():
                    if k not in values:
                        raise EventLogError(f"event {ev.event_id}: missing {side} feature {k!r}")
                    b.add(values[k])
            clicked[i] = ev.clicked
            if ev.dwell_s is not None:
                dwell[i] = ev.dwell_s
            logged[i] = ev.dwell_logged
        return cls(
            event_id=event_id,
            segment=seg.build(),
            user={k: b.build() for k, b in builders["user"].items()},
            ad={k: b.build() for k, b in builders["ad"].items()},
            clicked=clicked,
            dwell_s=dwell,
            dwell_logged=logged,
        )

    def layout(self) -> dict:
        return {
            "user": {k: c.multi_value for k, c in self.user.items()},
            "ad": {k: c.multi_value for k, c in self.ad.items()},
        }


class _ColumnBuilder:
    def __init__(self, multi: bool):
        self.multi = multi
        self.lookup: dict = {}
        self.vocab: list = []
        self.codes: list[int] = []
        self.lengths: list[int] = []

    def _code(self, v) -> int:
        c = self.lookup.get(v)
        if c is None:
            c = self.lookup[v] = len(self.vocab)
            self.vocab.append(v)
        return c

    def add(self, value):
        if self.multi:
            if not isinstance(value, list):
                raise EventLogError(f"expected a list for a multi-value feature, got {value!r}")
            self.codes.extend(self._code(v) for v in value)
            self.lengths.append(len(value))
        else:
            if isinstance(value, (list, dict)):
                raise EventLogError(f"expected a scalar feature value, got {value!r}")
            self.codes.append(self._code(value))

    def build(self) -> Column:
        codes = np.asarray(self.codes, dtype=np.int32)
        if not self.multi:
            return Column(codes, self.vocab)
        offsets = np.zeros(len(self.lengths) + 1, dtype=np.int64)
        np.cumsum(self.lengths, out=offsets[1:])
        return Column(codes, self.vocab, offsets)


# ---------------------------------------------------------------- JSONL log


def _header(layout: dict, meta: dict | None) -> dict:
    return {"format": LOG_FORMAT, "version": LOG_VERSION, "layout": layout, "meta": meta or {}}


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _batch_lines(batch: EventBatch) -> Iterator[str]:
    # column-wise pre-encoding keeps per-event work to string joins
    def encoded(col: Column) -> list[str]:
        enc = [_dumps(v) for v in col.vocab]
        if col.offsets is None:
            return [enc[c] for c in col.codes]
        off = col.offsets
        codes = col.codes
        return ["[" + ",".join(enc[c] for c in codes[off[i]:off[i + 1]]) + "]" for i in range(len(off) - 1)]

    seg = encoded(batch.segment)
    users = [(f'"{k}":' if k.isidentifier() else _dumps(k) + ":", encoded(c)) for k, c in batch.user.items()]
    ads = [(f'"{k}":' if k.isidentifier() else _dumps(k) + ":", encoded(c)) for k, c in batch.ad.items()]
    ids = batch.event_id.tolist()
    clicked = batch.clicked.tolist()
    logged = batch.dwell_logged.tolist()
    dwell = batch.dwell_s.tolist()
    for i in range(len(ids)):
        user = ",".join(k + vals[i] for k, vals in users)
        ad = ",".join(k + vals[i] for k, vals in ads)
        d = dwell[i]
        dwell_part = "" if d != d else f',"dwell_s":{d!r}'
        yield (
            f'{{"event_id":{ids[i]},"segment":{seg[i]},"user":{{{user}}},"ad":{{{ad}}},'
            f'"clicked":{"true" if clicked[i] else "false"}{dwell_part},'
            f'"dwell_logged":{"true" if logged[i] else "false"}}}\n'
        )


def write_event_log(path, batches: Iterable[EventBatch], layout: dict, meta: dict | None = None) -> int:
    """Stream batches to a JSONL log; returns the number of events written."""
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(_header(layout, meta)) + "\n")
        for batch in batches:
            if batch.layout() != layout:
                raise EventLogError("batch layout differs from the log header")
            fh.writelines(_batch_lines(batch))
            n += len(batch)
    return n


def read_log_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if not first:
        raise EventLogError(f"{path}: empty file, missing header")
    header = json.loads(first)
    if header.get("format") != LOG_FORMAT:
        raise EventLogError(f"{path}: not an {LOG_FORMAT} log")
    if header.get("version") != LOG_VERSION:
        raise EventLogError(f"{path}: unsupported log version {header.get('version')}")
    return header


def _encode_values(values: list, multi: bool, what: str) -> Column:
    """Dictionary-encode one column of raw JSON values (first-seen vocab order)."""
    if multi:
        if not all(type(v) is list for v in values):
            raise EventLogError(f"{what}: expected a list for a multi-value feature")
        lengths = list(map(len, values))
        flat = list(itertools.chain.from_iterable(values))
    else:
        flat = values
    try:
        lookup = {v: i for i, v in enumerate(dict.fromkeys(flat))}
    except TypeError:
        raise EventLogError(f"{what}: expected scalar feature values") from None
    if any(isinstance(v, (list, dict)) for v in lookup):
        raise EventLogError(f"{what}: expected scalar feature values")
    codes = np.fromiter(map(lookup.__getitem__, flat), dtype=np.int32, count=len(flat))
    vocab = list(lookup)
    if not multi:
        return Column(codes, vocab)
    offsets = np.zeros(len(lengths) + 1, dtype=np.int64)
    np.cumsum(lengths, out=offsets[1:])
    return Column(codes, vocab, offsets)


def _records_to_batch(records: list[dict], layout: dict, where: str) -> EventBatch:
    """Columnar batch straight from decoded JSON records (the fast read path)."""
    try:
        event_id = np.array([r["event_id"] for r in records], dtype=np.int64)
        segment = _encode_values([r["segment"] for r in records], False, f"{where}: segment")
        sides = {}
        for side in ("user", "ad"):
            rows = [r[side] for r in records]
            sides[side] = {
                k: _encode_values([row[k] for row in rows], multi, f"{where}: {side}.{k}")
                for k, multi in layout[side].items()
            }
        clicked = np.array([r["clicked"] for r in records], dtype=bool)
        logged = np.array([r["dwell_logged"] for r in records], dtype=bool)
        dwell = np.array([r.get("dwell_s", np.nan) for r in records], dtype=np.float64)
    except KeyError as exc:
        raise EventLogError(f"{where}: event record missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise EventLogError(f"{where}: malformed event record: {exc}") from None
    has = ~np.isnan(dwell)
    bad = has & ~(clicked & logged & (dwell >= 0.0))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        # re-validate through Event for the precise message
        Event.from_json(records[i])
        raise EventLogError(f"{where}: event {event_id[i]}: invalid dwell-time")
    return EventBatch(event_id=event_id, segment=segment, user=sides["user"], ad=sides["ad"],
                      clicked=clicked, dwell_s=dwell, dwell_logged=logged)


def iter_event_log(path, chunk_size: int = 200_000) -> Iterator[EventBatch]:
    """Yield the log as batches of at most ``chunk_size`` events."""
    layout = read_log_header(path)["layout"]
    buf: list[dict] = []
    loads = json.loads
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                buf.append(loads(line))
            except json.JSONDecodeError as exc:
                raise EventLogError(f"{path}:{lineno}: {exc}") from None
            if len(buf) >= chunk_size:
                yield _records_to_batch(buf, layout, f"{path}:{lineno - len(buf) + 1}")
                buf = []
    if buf:
        yield _records_to_batch(buf, layout, str(path))


def read_event_log(path) -> EventBatch:
    layout = read_log_header(path)["layout"]
    parts = list(iter_event_log(path))
    if not parts:
        return EventBatch.from_events([], layout)
    return parts[0] if len(parts) == 1 else EventBatch.concat(parts)


def serialize_events(events: Iterable[Event]) -> str:
    return "".join(_dumps(ev.to_json()) + "\n" for ev in events)


def parse_events(text: str) -> list[Event]:
    return [Event.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


# ---------------------------------------------------------------- filters


def _parse_scalar(text: str) -> Any:
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    return text


def parse_filter(expr: str | None):
    """Compile ``key=value[,key=value...]`` into a batch -> mask function.

    Keys: ``dwell_logged``, ``clicked``, ``segment`` or any single-valued
    user/ad attribute.  ``!=`` negates a clause; ``|`` separates
    alternative values (``segment=seg01|seg02``).
    """
    if expr is None or not expr.strip():
        return None
    clauses = []
    for part in expr.replace("&", ",").split(","):
        part = part.strip()
        if not part:
            continue
        neg = "!=" in part
        key, sep, val = part.partition("!=" if neg else "=")
        if not sep:
            raise EventLogError(f"bad filter clause {part!r}")
        values = [_parse_scalar(v.strip()) for v in val.split("|")]
        clauses.append((key.strip(), values, neg))

    def predicate(batch: EventBatch) -> np.ndarray:
        mask = np.ones(len(batch), dtype=bool)
        for key, values, neg in clauses:
            if key in ("dwell_logged", "clicked"):
                arr = getattr(batch, key)
                hit = np.isin(arr, [bool(v) for v in values])
            else:
                col = batch.find_column(key)
                if col.multi_value:
                    raise EventLogError(f"cannot filter on multi-value feature {key!r}")
                want = {str(v) for v in values}
                ok = np.array([str(v) in want for v in col.vocab], dtype=bool)
                hit = ok[col.codes] if len(col.vocab) else np.zeros(len(batch), bool)
            mask &= ~hit if neg else hit
        return mask

    predicate.expr = expr
    return predicate
