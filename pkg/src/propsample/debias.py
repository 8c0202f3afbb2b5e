"""Turn session logs into labeled pairwise-training data.

Every mode keeps each impression at or above the session's last click.
Below it, ``control`` keeps everything, ``fixed`` keeps a constant fraction,
``truncate`` keeps nothing and ``propensity`` keeps position k with the
probability that k was examined given the last click.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .core import (
    ConfigError,
    Event,
    FormatError,
    Impression,
    PropensityCurve,
    SessionLog,
    atomic_output,
    dumps_line,
    last_click_position,
    stream,
)
from .propensity import conditional_propensity

LABELS = {Event.NONE: 0, Event.CLICK_REVIEW: 1, Event.CLICK_BOOKING: 2, Event.BOOKED: 5}


def assign_label(impression: Impression) -> int:
    return LABELS[impression.event]


@dataclass(frozen=True)
class SamplingMode:
    kind: str
    rate: float | None = None
    curve: PropensityCurve | None = None

    def __post_init__(self):
        if self.kind not in ("control", "fixed", "truncate", "propensity"):
            raise ConfigError(f"unknown sampling mode {self.kind!r}")
        if self.kind == "fixed" and (self.rate is None or not 0.0 < self.rate <= 1.0):
            raise ConfigError("fixed sampling rate must be in (0, 1]")

    @classmethod
    def parse(cls, text: str, curve: PropensityCurve | None = None) -> "SamplingMode":
        """Parse ``control``, ``fixed:R``, ``truncate`` or ``propensity``."""
        kind, _, arg = text.partition(":")
        if kind == "fixed":
            try:
                return cls("fixed", rate=float(arg))
            except ValueError:
                raise ConfigError(f"bad fixed rate in {text!r}") from None
        if arg:
            raise ConfigError(f"mode {kind!r} takes no argument")
        return cls(kind, curve=curve if kind == "propensity" else None)

    def describe(self) -> dict:
        out: dict = {"mode": self.kind}
        if self.kind == "fixed":
            out["rate"] = self.rate
        if self.curve is not None:
            out["curve_hash"] = curve_hash(self.curve)
        return out

    def __str__(self) -> str:
        return f"fixed:{self.rate:g}" if self.kind == "fixed" else self.kind


def curve_hash(curve: PropensityCurve) -> str:
    return hashlib.sha256(json.dumps(curve.to_dict()).encode()).hexdigest()[:16]


@dataclass
class TrainingDataset:
    """Labeled impressions, stored contiguously by session."""

    session_ids: list[str]
    group_offsets: np.ndarray
    hotel_ids: list[str]
    labels: np.ndarray
    features: np.ndarray
    positions: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_groups(self) -> int:
        return len(self.session_ids)

    @property
    def feature_dimension(self) -> int:
        return self.features.shape[1]

    def groups(self):
        for g, sid in enumerate(self.session_ids):
            yield sid, slice(int(self.group_offsets[g]), int(self.group_offsets[g + 1]))

    def label_counts(self) -> dict[str, int]:
        counts = Counter(int(v) for v in self.labels)
        return {str(k): counts.get(k, 0) for k in sorted(set(LABELS.values()))}

    def write(self, path, manifest_path=None) -> None:
        with atomic_output(path) as fh:
            for sid, sl in self.groups():
                for i in range(sl.start, sl.stop):
                    fh.write(dumps_line({
                        "session_id": sid,
                        "hotel_id": self.hotel_ids[i],
                        "label": int(self.labels[i]),
                        "features": self.features[i].tolist(),
                    }))
                    fh.write("\n")
        if manifest_path is not None:
            with atomic_output(manifest_path) as fh:
                json.dump(self.manifest(), fh, indent=1, sort_keys=True)
                fh.write("\n")

    def manifest(self) -> dict:
        return {**self.meta, "rows": len(self), "groups": self.num_groups,
                "label_counts": self.label_counts(), "feature_dimension": self.feature_dimension}

    @classmethod
    def read(cls, path) -> "TrainingDataset":
        sids, offsets, hids, labels, feats = [], [0], [], [], []
        seen: set[str] = set()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                try:
                    row = json.loads(line)
                    sid = str(row["session_id"])
                    hids.append(str(row["hotel_id"]))
                    labels.append(int(row["label"]))
                    feats.append([float(v) for v in row["features"]])
                except (ValueError, KeyError, TypeError) as exc:
                    raise FormatError(f"{path}:{lineno}: malformed row ({exc})") from None
                if not sids or sids[-1] != sid:
                    if sid in seen:
                        raise FormatError(f"{path}:{lineno}: rows of session {sid} are not contiguous")
                    seen.add(sid)
                    sids.append(sid)
                    offsets.append(offsets[-1])
                offsets[-1] += 1
        width = len(feats[0]) if feats else 0
        if any(len(f) != width for f in feats):
            raise FormatError(f"{path}: rows have inconsistent feature lengths")
        return cls(sids, np.asarray(offsets, dtype=np.int64), hids, np.asarray(labels, dtype=np.int64),
                   np.asarray(feats, dtype=np.float64).reshape(len(feats), width),
                   np.zeros(len(labels), dtype=np.int64))


def keep_uniforms(seed: int, session_id: str, n: int) -> np.ndarray:
    """Uniform draw for each position of a session, fixed by (seed, session_id).

    The draw for position k is the k-th value, so every mode sees the same
    number at the same (session, position) and mode comparisons are paired.
    """
    return stream(seed, "keep", session_id).random(n)


def prepare_training(log: Iterable[SessionLog], mode: SamplingMode, seed: int,
                     extra_features: Callable[[SessionLog], np.ndarray] | None = None) -> TrainingDataset:
    """Build a training dataset from ``log`` under ``mode``.

    Sessions without any click or booking are dropped first.  ``extra_features``
    may return an ``(n_impressions, m)`` array appended to each row.
    """
    if mode.kind == "propensity" and mode.curve is None:
        raise ConfigError("propensity mode requires a propensity curve")
    cond = None
    if mode.curve is not None:
        v = np.asarray(mode.curve.values)
        cond = np.minimum(1.0, v[:, None] / v[None, :])

    sids, offsets, hids, labels, feats, positions = [], [0], [], [], [], []
    for session in log:
        last = last_click_position(session)
        if last is None:
            continue
        imps = session.impressions
        n = len(imps)
        if mode.kind == "control":
            keep = np.ones(n, dtype=bool)
        else:
            pos = np.array([imp.position for imp in imps])
            below = pos > last
            if mode.kind == "truncate":
                keep = ~below
            else:
                if mode.kind == "fixed":
                    p = np.full(n, mode.rate)
                else:
                    p = np.ones(n)
                    p[below] = cond[pos[below] - 1, last - 1]
                u = keep_uniforms(seed, session.session_id, int(pos.max()))
                keep = ~below | (u[pos - 1] < p)
        extra = extra_features(session) if extra_features is not None else None
        kept = 0
        for i in np.flatnonzero(keep):
            imp = imps[i]
            hids.append(imp.hotel_id)
            labels.append(LABELS[imp.event])
            row = list(imp.features_snapshot)
            if extra is not None:
                row.extend(float(x) for x in extra[i])
            feats.append(row)
            positions.append(imp.position)
            kept += 1
        sids.append(session.session_id)
        offsets.append(offsets[-1] + kept)

    width = len(feats[0]) if feats else 0
    return TrainingDataset(
        sids, np.asarray(offsets, dtype=np.int64), hids, np.asarray(labels, dtype=np.int64),
        np.asarray(feats, dtype=np.float64).reshape(len(feats), width),
        np.asarray(positions, dtype=np.int64),
        meta={**mode.describe(), "seed": seed},
    )


def keep_probability(mode: SamplingMode, k: int, last_click: int) -> float:
    """Probability that ``prepare_training`` keeps position k given the last click."""
    if k <= last_click or mode.kind == "control":
        return 1.0
    if mode.kind == "truncate":
        return 0.0
    if mode.kind == "fixed":
        return mode.rate
    return conditional_propensity(mode.curve, k, last_click)
