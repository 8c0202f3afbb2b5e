"""Examination propensity estimation from regular clicks.

The click-through rate at position k is the product of examination and
average relevance at k.  Dividing the click curve by a relevance curve built
from historical booking counts leaves the examination curve, which is then
normalized to position 1 and projected onto non-increasing sequences.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import PAGE_SIZE, DataError, Event, PipelineError, PropensityCurve, SessionLog, atomic_output

SMOOTHING = 0.5
MIN_SUPPORT = 100
EPSILON = 1e-3


class EstimationError(PipelineError):
    module = "propensity"


@dataclass
class PositionCurve:
    """Per-position ratio of accumulated sums to impression counts.

    Accumulation is additive, so partial curves over disjoint chunks of a log
    can be combined with ``+``.
    """

    numerator: np.ndarray
    denominator: np.ndarray
    alpha: float = 0.0
    min_support: int = MIN_SUPPORT
    # Exact running sums of the numerator (see _grow); lets merges round only once.
    partials: list | None = field(default=None, repr=False, compare=False)

    def __add__(self, other: "PositionCurve") -> "PositionCurve":
        den = self.denominator + other.denominator
        if self.partials is None or other.partials is None:
            return PositionCurve(self.numerator + other.numerator, den, self.alpha, self.min_support)
        partials = []
        for a, b in zip(self.partials, other.partials):
            p = list(a)
            for x in b:
                _grow(p, x)
            partials.append(p)
        return PositionCurve(_round(partials), den, self.alpha, self.min_support, partials)

    def __len__(self) -> int:
        return len(self.numerator)

    @property
    def supported(self) -> np.ndarray:
        return self.denominator >= self.min_support

    def value(self, k: int) -> float | None:
        """Smoothed ratio at 1-based position ``k``; None below min_support."""
        i = k - 1
        if self.denominator[i] < self.min_support:
            return None
        return float((self.numerator[i] + self.alpha) / (self.denominator[i] + 2 * self.alpha))

    def values(self) -> np.ndarray:
        """All positions at once, NaN where unsupported."""
        out = (self.numerator + self.alpha) / np.maximum(self.denominator + 2 * self.alpha, 1e-300)
        return np.where(self.supported, out, np.nan)


def _grow(partials: list, x: float) -> None:
    """Add ``x`` to a list of non-overlapping partial sums without rounding error."""
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


def _round(partials: list) -> np.ndarray:
    return np.array([math.fsum(p) for p in partials])


def _accumulate(log: Iterable[SessionLog], page_size: int, per_impression) -> tuple[list, np.ndarray]:
    num: list = [[] for _ in range(page_size)]
    den = np.zeros(page_size)
    seen = False
    for session in log:
        seen = True
        for imp in session.impressions:
            if imp.position > page_size:
                raise DataError(f"session {session.session_id}: position {imp.position} > page_size")
            _grow(num[imp.position - 1], float(per_impression(imp)))
            den[imp.position - 1] += 1
    if not seen:
        raise EstimationError("log is empty")
    return num, den


def click_curve(log: Iterable[SessionLog], page_size: int = PAGE_SIZE, alpha: float = SMOOTHING,
                min_support: int = MIN_SUPPORT) -> PositionCurve:
    num, den = _accumulate(log, page_size, lambda imp: imp.event != Event.NONE)
    return PositionCurve(_round(num), den, alpha, min_support, num)


def booking_relevance_curve(log: Iterable[SessionLog], universe_bookings: Mapping[str, float],
                            page_size: int = PAGE_SIZE, min_support: int = MIN_SUPPORT) -> PositionCurve:
    """Mean booking count at each position, in units of the global mean count."""
    if not universe_bookings:
        raise DataError("booking mapping is empty")
    mean = math.fsum(universe_bookings.values()) / len(universe_bookings)
    if mean <= 0:
        raise DataError("mean historical bookings must be positive")

    def rel(imp):
        try:
            return universe_bookings[imp.hotel_id] / mean
        except KeyError:
            raise DataError(f"no historical bookings for hotel {imp.hotel_id}") from None

    num, den = _accumulate(log, page_size, rel)
    return PositionCurve(_round(num), den, 0.0, min_support, num)


def curves(log: Iterable[SessionLog], universe_bookings: Mapping[str, float], page_size: int = PAGE_SIZE,
           alpha: float = SMOOTHING, min_support: int = MIN_SUPPORT) -> tuple[PositionCurve, PositionCurve]:
    """Click and relevance curves in a single pass over ``log``."""
    if not universe_bookings:
        raise DataError("booking mapping is empty")
    mean = math.fsum(universe_bookings.values()) / len(universe_bookings)
    if mean <= 0:
        raise DataError("mean historical bookings must be positive")
    clicks = np.zeros(page_size)
    rel: list = [[] for _ in range(page_size)]
    den = np.zeros(page_size)
    seen = False
    for session in log:
        seen = True
        for imp in session.impressions:
            i = imp.position - 1
            if i >= page_size:
                raise DataError(f"session {session.session_id}: position {imp.position} > page_size")
            try:
                _grow(rel[i], universe_bookings[imp.hotel_id] / mean)
            except KeyError:
                raise DataError(f"no historical bookings for hotel {imp.hotel_id}") from None
            clicks[i] += imp.event != Event.NONE
            den[i] += 1
    if not seen:
        raise EstimationError("log is empty")
    return (PositionCurve(clicks, den.copy(), alpha, min_support, [[float(c)] for c in clicks]),
            PositionCurve(_round(rel), den, 0.0, min_support, rel))


def pool_adjacent_violators(y: Sequence[float], weights: Sequence[float] | None = None,
                            increasing: bool = False) -> np.ndarray:
    """Weighted least-squares fit of ``y`` by a monotone sequence.

    Non-increasing by default, which is the shape of an examination curve.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        return y.copy()
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape or (w <= 0).any():
        raise ValueError("weights must be positive and match y")
    sign = 1.0 if increasing else -1.0
    vals, wts, sizes = [], [], []
    for yi, wi in zip(sign * y, w):
        vals.append(yi)
        wts.append(wi)
        sizes.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            v, wt, n = vals.pop(), wts.pop(), sizes.pop()
            merged = wts[-1] + wt
            vals[-1] = (vals[-1] * wts[-1] + v * wt) / merged
            wts[-1] = merged
            sizes[-1] += n
    return sign * np.repeat(vals, sizes)


def _fill_log_linear(raw: np.ndarray) -> np.ndarray:
    """Fill NaNs by interpolating log(raw) linearly in position.

    Gaps are bridged between supported neighbours; the tail extends the slope
    of the last two supported points.
    """
    idx = np.flatnonzero(np.isfinite(raw) & (raw > 0))
    if idx.size == 0:
        raise EstimationError("no position has enough support")
    logs = np.log(raw[idx])
    pos = np.arange(len(raw))
    out = np.exp(np.interp(pos, idx, logs))
    if idx.size >= 2:
        slope = (logs[-1] - logs[-2]) / (idx[-1] - idx[-2])
        tail = pos > idx[-1]
        out[tail] = np.exp(logs[-1] + slope * (pos[tail] - idx[-1]))
    out[idx] = raw[idx]
    return out


@dataclass
class PropensityEstimate:
    curve: PropensityCurve
    click_rate: np.ndarray
    relevance: np.ndarray
    raw: np.ndarray
    support: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_csv(self, path) -> None:
        with atomic_output(path) as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["position", "click_rate", "relevance", "raw_propensity", "propensity"])
            for k in range(len(self.curve)):
                w.writerow([k + 1, _fmt(self.click_rate[k]), _fmt(self.relevance[k]),
                            _fmt(self.raw[k]), _fmt(self.curve.values[k])])


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def estimate_propensity_detailed(click: PositionCurve, relevance: PositionCurve,
                                 epsilon: float = EPSILON) -> PropensityEstimate:
    c = click.values()
    r = relevance.values()
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(r > 0, c / r, np.nan)
    if not np.isfinite(raw[0]) or raw[0] <= 0:
        raise EstimationError("raw propensity at position 1 is undefined or not positive")
    filled = _fill_log_linear(raw)
    normalized = filled / filled[0]
    projected = pool_adjacent_violators(normalized)
    values = np.clip(projected, epsilon, 1.0)
    values[0] = 1.0
    return PropensityEstimate(PropensityCurve(tuple(values)), c, r, raw / raw[0], click.denominator)


def estimate_propensity(click: PositionCurve, relevance: PositionCurve,
                        epsilon: float = EPSILON) -> PropensityCurve:
    return estimate_propensity_detailed(click, relevance, epsilon).curve


def conditional_propensity(curve: PropensityCurve, k: int, last_click: int) -> float:
    """Probability that position ``k`` was examined given a click at ``last_click``."""
    if k <= last_click:
        return 1.0
    return min(1.0, curve.at(k) / curve.at(last_click))


def conditional_table(curve: PropensityCurve) -> np.ndarray:
    """``table[k-1, p-1]`` = conditional_propensity(curve, k, p)."""
    v = np.asarray(curve.values)
    table = np.minimum(1.0, v[:, None] / v[None, :])
    table[np.triu_indices(len(v))] = 1.0
    return table
