import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propsample.core import (
    Event,
    FormatError,
    Impression,
    PropensityCurve,
    SessionLog,
    DataError,
    atomic_output,
    last_click_position,
    read_sessions,
    stream,
    validate_session,
    write_sessions,
)


def make_session(positions, hotels=None, events=None, sid="s1"):
    hotels = hotels or [f"h{p}" for p in positions]
    events = events or [Event.NONE] * len(positions)
    imps = tuple(Impression(h, p, e, (0.5, 1.0)) for h, p, e in zip(hotels, positions, events))
    return SessionLog(sid, "g1", imps, 3)


def test_well_formed_session_has_no_violations():
    assert validate_session(make_session([1, 2, 3])) == []


def test_position_gap_is_reported():
    assert validate_session(make_session([1, 3])) == ["position gap at 2"]


def test_duplicate_hotel_is_reported_once():
    s = make_session([1, 2, 3, 4, 5], hotels=["a", "x", "b", "c", "x"])
    problems = validate_session(s)
    assert len(problems) == 1
    assert "x" in problems[0]


def test_out_of_range_position():
    problems = validate_session(make_session([1, 2, 3]), page_size=2)
    assert problems == ["position 3 outside [1, 2]"]


def test_last_click_position():
    ev = [Event.NONE] * 8
    ev[1] = Event.BOOKED
    ev[6] = Event.CLICK_REVIEW
    assert last_click_position(make_session(list(range(1, 9)), events=ev)) == 7
    assert last_click_position(make_session([1, 2])) is None


def test_event_ordering():
    assert Event.NONE < Event.CLICK_REVIEW < Event.CLICK_BOOKING < Event.BOOKED


events = st.sampled_from(list(Event))
floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def sessions(draw):
    n = draw(st.integers(1, 30))
    evs = draw(st.lists(events, min_size=n, max_size=n))
    feats = draw(st.lists(st.lists(floats, min_size=3, max_size=3), min_size=n, max_size=n))
    imps = tuple(Impression(f"h{i:03d}", i + 1, e, tuple(f)) for i, (e, f) in enumerate(zip(evs, feats)))
    return SessionLog(draw(st.text(min_size=1, max_size=8)), draw(st.text(max_size=5)), imps,
                      draw(st.integers(0, 2**32 - 1)))


@given(session=sessions())
@settings(max_examples=60)
def test_jsonl_round_trip(session, tmp_path_factory):
    path = tmp_path_factory.mktemp("log") / "s.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        write_sessions([session], fh)
    (back,) = list(read_sessions(path))
    assert back == session


def test_unknown_keys_strict_vs_lenient(tmp_path):
    obj = make_session([1, 2]).to_dict()
    obj["extra"] = 1
    obj["impressions"][0]["dwell"] = 3.0
    path = tmp_path / "log.jsonl"
    path.write_text(json.dumps(obj) + "\n")
    with pytest.raises(FormatError):
        list(read_sessions(path, strict=True))
    (s,) = list(read_sessions(path, strict=False))
    assert len(s.impressions) == 2


def test_malformed_line_names_location(tmp_path):
    path = tmp_path / "log.jsonl"
    path.write_text("{not json\n")
    with pytest.raises(FormatError, match="log.jsonl:1"):
        list(read_sessions(path))


def test_streams_are_reproducible_and_distinct():
    a = stream(5, "x", 1).random(4)
    assert np.array_equal(a, stream(5, "x", 1).random(4))
    assert not np.array_equal(a, stream(5, "x", 2).random(4))
    assert not np.array_equal(a, stream(5, "y", 1).random(4))
    assert np.array_equal(stream(5, "keep", "s01").random(3), stream(5, "keep", "s01").random(3))


def test_atomic_output_removes_partial_file(tmp_path):
    target = tmp_path / "out.txt"
    with pytest.raises(RuntimeError):
        with atomic_output(target) as fh:
            fh.write("half")
            raise RuntimeError("disk full")
    assert not target.exists()
    assert list(tmp_path.iterdir()) == []


def test_propensity_curve_invariants():
    PropensityCurve((1.0, 0.5, 0.5, 0.1))
    with pytest.raises(DataError):
        PropensityCurve((0.9, 0.5))
    with pytest.raises(DataError):
        PropensityCurve((1.0, 0.5, 0.6))
    with pytest.raises(DataError):
        PropensityCurve((1.0, 0.0))
