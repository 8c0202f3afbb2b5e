"""Domain types, the session log format and seeded random streams."""

from __future__ import annotations

import enum
import json
import os
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

PAGE_SIZE = 30


class PipelineError(Exception):
    """Base class for all errors raised by this package."""

    module = "core"


class ConfigError(PipelineError, ValueError):
    pass


class DataError(PipelineError, ValueError):
    pass


class FormatError(PipelineError, ValueError):
    pass


class Event(enum.IntEnum):
    """Most significant user action on an impression, in increasing order."""

    NONE = 0
    CLICK_REVIEW = 1
    CLICK_BOOKING = 2
    BOOKED = 3

    @property
    def wire(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str) -> "Event":
        try:
            return cls[value.upper()]
        except KeyError:
            raise FormatError(f"unknown event {value!r}") from None


@dataclass(frozen=True, slots=True)
class Hotel:
    hotel_id: str
    geo_id: str
    latent_quality: float
    features: tuple[float, ...]
    historical_bookings: float


@dataclass(frozen=True, slots=True)
class Impression:
    hotel_id: str
    position: int
    event: Event = Event.NONE
    features_snapshot: tuple[float, ...] = ()

    @property
    def clicked(self) -> bool:
        return self.event != Event.NONE


@dataclass(frozen=True, slots=True)
class SessionLog:
    session_id: str
    query_geo: str
    impressions: tuple[Impression, ...]
    user_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "query_geo": self.query_geo,
            "impressions": [
                {
                    "hotel_id": imp.hotel_id,
                    "position": imp.position,
                    "event": imp.event.wire,
                    "features_snapshot": list(imp.features_snapshot),
                }
                for imp in self.impressions
            ],
            "user_seed": self.user_seed,
        }

    @classmethod
    def from_dict(cls, obj: dict, strict: bool = True) -> "SessionLog":
        _check_keys(obj, _SESSION_KEYS, "session", strict)
        try:
            impressions = []
            for raw in obj["impressions"]:
                _check_keys(raw, _IMPRESSION_KEYS, "impression", strict)
                impressions.append(
                    Impression(
                        hotel_id=str(raw["hotel_id"]),
                        position=int(raw["position"]),
                        event=Event.parse(raw["event"]),
                        features_snapshot=tuple(float(v) for v in raw["features_snapshot"]),
                    )
                )
            return cls(
                session_id=str(obj["session_id"]),
                query_geo=str(obj["query_geo"]),
                impressions=tuple(impressions),
                user_seed=int(obj["user_seed"]),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed session record: {exc!r}") from None


_SESSION_KEYS = frozenset({"session_id", "query_geo", "impressions", "user_seed"})
_IMPRESSION_KEYS = frozenset({"hotel_id", "position", "event", "features_snapshot"})


def _check_keys(obj: dict, allowed: frozenset, what: str, strict: bool) -> None:
    if not isinstance(obj, dict):
        raise FormatError(f"{what} record is not an object")
    missing = allowed - obj.keys()
    if missing:
        raise FormatError(f"{what} record missing keys {sorted(missing)}")
    if strict:
        unknown = obj.keys() - allowed
        if unknown:
            raise FormatError(f"{what} record has unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class PropensityCurve:
    """Examination probability by position; ``values[0]`` is position 1."""

    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals or vals[0] != 1.0:
            raise DataError("propensity at position 1 must be exactly 1")
        if any(not (0.0 < v <= 1.0) for v in vals):
            raise DataError("propensities must lie in (0, 1]")
        if any(a < b for a, b in zip(vals, vals[1:])):
            raise DataError("propensity curve must be non-increasing")

    def __len__(self) -> int:
        return len(self.values)

    def at(self, position: int) -> float:
        return self.values[position - 1]

    def to_dict(self) -> dict:
        return {"values": list(self.values)}

    @classmethod
    def from_dict(cls, obj: dict) -> "PropensityCurve":
        try:
            return cls(tuple(obj["values"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed propensity curve: {exc!r}") from None


def validate_session(session: SessionLog, page_size: int = PAGE_SIZE) -> list[str]:
    """Return every invariant violation in ``session``; empty when well formed."""
    problems = []
    expected = 1
    for imp in session.impressions:
        if not 1 <= imp.position <= page_size:
            problems.append(f"position {imp.position} outside [1, {page_size}]")
        if imp.position < expected:
            problems.append(f"position {imp.position} out of order")
        else:
            for gap in range(expected, imp.position):
                problems.append(f"position gap at {gap}")
            expected = imp.position + 1
        if not isinstance(imp.event, Event):
            problems.append(f"invalid event at position {imp.position}")
    seen: dict[str, int] = {}
    for imp in session.impressions:
        if imp.hotel_id in seen:
            problems.append(
                f"duplicate hotel_id {imp.hotel_id} at positions {seen[imp.hotel_id]} and {imp.position}"
            )
        else:
            seen[imp.hotel_id] = imp.position
    return problems


def last_click_position(session: SessionLog) -> int | None:
    """Deepest position carrying any click or booking, or None."""
    clicked = [imp.position for imp in session.impressions if imp.event != Event.NONE]
    return max(clicked) if clicked else None


# -- random streams ---------------------------------------------------------

def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("stream keys must be non-negative")
        return int(part)
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, name: str, *keys) -> np.random.Generator:
    """Named, seeded random stream; identical arguments give identical draws."""
    entropy = [_key(seed), _key(name), *(_key(k) for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, name: str, *keys) -> int:
    return int(np.random.SeedSequence([_key(seed), _key(name), *(_key(k) for k in keys)])
               .generate_state(1, dtype=np.uint32)[0])


# -- JSONL IO ---------------------------------------------------------------

def dumps_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_sessions(sessions: Iterable[SessionLog], fh: IO[str]) -> int:
    count = 0
    for s in sessions:
        fh.write(dumps_line(s.to_dict()))
        fh.write("\n")
        count += 1
    return count


def read_sessions(path: str | os.PathLike, strict: bool = True) -> Iterator[SessionLog]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            try:
                yield SessionLog.from_dict(obj, strict=strict)
            except FormatError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None


class atomic_output:
    """Write to ``<path>.partial`` and rename on success; remove it on failure."""

    def __init__(self, path: str | os.PathLike, mode: str = "w"):
        self.path = Path(path)
        self.partial = self.path.with_name(self.path.name + ".partial")
        self.mode = mode
        self.fh = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kwargs = {} if "b" in self.mode else {"encoding": "utf-8", "newline": "\n"}
        self.fh = open(self.partial, self.mode, **kwargs)
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.partial, self.path)
        else:
            self.partial.unlink(missing_ok=True)
        return False
