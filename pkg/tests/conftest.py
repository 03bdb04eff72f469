import numpy as np
import pytest

from acfilter.events import Column, EventBatch
from acfilter.hashing import hashed_uniform
from acfilter.model import FeatureField, FeatureSchema

TINY_SCHEMA = FeatureSchema((FeatureField("u", "user"), FeatureField("a", "ad")))


def bernoulli_batch(q: float, n: int, seed: int, tag: int = 99) -> EventBatch:
    """Featureless stream (one user, one ad) whose clicks are Bernoulli(q)."""
    ids = np.arange(n, dtype=np.int64)
    clicked = hashed_uniform(seed, ids, tag) < q
    z = np.zeros(n, dtype=np.int32)
    return EventBatch(
        event_id=ids,
        segment=Column(z, ["s"]),
        user={"u": Column(z, ["x"])},
        ad={"a": Column(z, ["y"])},
        clicked=clicked,
        dwell_s=np.full(n, np.nan),
        dwell_logged=np.zeros(n, dtype=bool),
    )


def labelled_batch(outcomes: list[str], dwell_ic: float = 10.0, dwell_ac: float = 1.0, start: int = 0) -> EventBatch:
    """Batch from outcome codes: "skip", "ic", "ac" (logged dwell) or "unk" (click, no dwell)."""
    n = len(outcomes)
    ids = np.arange(start, start + n, dtype=np.int64)
    clicked = np.array([o != "skip" for o in outcomes])
    dwell = np.array([dwell_ic if o == "ic" else dwell_ac if o == "ac" else np.nan for o in outcomes])
    logged = np.array([o != "unk" for o in outcomes])
    z = np.zeros(n, dtype=np.int32)
    return EventBatch(
        event_id=ids,
        segment=Column(z, ["seg00"]),
        user={
            "involvement": Column(z, ["0-10"]),
            "tech": Column(np.tile(np.arange(3, dtype=np.int32), n), ["smartphone", "ios", "safari"],
                           np.arange(0, 3 * n + 1, 3, dtype=np.int64)),
            "demo": Column(z, ["female/18-24"]),
        },
        ad={
            "ad_id": Column((ids % 3).astype(np.int32), ["ad0", "ad1", "ad2"]),
            "campaign_id": Column(z, ["c0"]),
            "category": Column(z, ["k0"]),
        },
        clicked=clicked,
        dwell_s=dwell,
        dwell_logged=logged,
    )


@pytest.fixture(scope="session")
def small_world():
    from acfilter.simulator import WorldConfig, build_world

    return build_world(WorldConfig(n_users=500, n_ads=60, n_campaigns=10, n_segments=6, ac_share=0.2,
                                   dwell_logged_fraction=0.5, probe_pairs=20_000, seed=3))


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.fixture
def measured(request):
    """Append human-readable measurements to the criterion's summary line."""
    notes: list[str] = []
    request.node.user_properties.append(("measured", notes))
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    if rep.failed or rep.skipped:
        entry["ok"] = False
    if rep.when == "call":
        for key, notes in item.user_properties:
            if key == "measured":
                entry["notes"].extend(notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        line = f"criterion {n:2d}: {'PASS' if e['ok'] else 'FAIL'}  {e['title']}"
        if e["notes"]:
            line += "  [" + "; ".join(e["notes"]) + "]"
        terminalreporter.write_line(line)
