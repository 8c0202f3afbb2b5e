"""Hotel universe generation and position-biased click simulation.

Two user models are supported.  ``pbm`` examines position k independently
with probability ``(1/k) ** eta`` and clicks an examined hotel with
probability ``sigmoid(click_sharpness * (quality - 0.5))``.  ``cascade``
scans top-down, examining every result until the first click.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .core import (
    PAGE_SIZE,
    ConfigError,
    Event,
    Hotel,
    Impression,
    SessionLog,
    atomic_output,
    derive_seed,
    dumps_line,
    stream,
    write_sessions,
)

# Semantic feature columns; any further columns are pure noise.
FEATURE_NAMES = ("star_rating", "review_score", "price_level", "deal_score")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class UserModelConfig:
    model_kind: str = "pbm"
    eta: float = 1.0
    click_sharpness: float = 6.0
    booking_page_prob: float = 0.4
    booking_prob: float = 0.25

    def __post_init__(self):
        if self.model_kind not in ("pbm", "cascade"):
            raise ConfigError(f"unknown user model {self.model_kind!r}")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.click_sharpness <= 0:
            raise ConfigError("click_sharpness must be > 0")
        for name in ("booking_page_prob", "booking_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")

    def examination(self, page_size: int = PAGE_SIZE) -> np.ndarray:
        """True examination probability for positions 1..page_size (pbm)."""
        k = np.arange(1, page_size + 1, dtype=np.float64)
        return (1.0 / k) ** self.eta

    def click_given_exam(self, quality) -> np.ndarray:
        return sigmoid(self.click_sharpness * (np.asarray(quality, dtype=np.float64) - 0.5))


@dataclass
class _GeoArrays:
    ids: list[str]
    quality: np.ndarray
    features: np.ndarray
    deal: np.ndarray
    id_rank: np.ndarray


@dataclass
class HotelUniverse:
    hotels: dict[str, list[Hotel]]
    feature_dimension: int
    logging_policy_noise: float = 0.1
    # Weight the logging policy puts on the deal_score column.  It is the
    # systematic error of the production ranker that biased clicks propagate.
    logging_deal_weight: float = 0.15
    page_size: int = PAGE_SIZE
    seed: int = 0

    @cached_property
    def by_id(self) -> dict[str, Hotel]:
        return {h.hotel_id: h for hs in self.hotels.values() for h in hs}

    @property
    def geo_ids(self) -> list[str]:
        return sorted(self.hotels)

    def arrays(self, geo: str) -> _GeoArrays:
        cache = self.__dict__.setdefault("_arrays", {})
        if geo not in cache:
            try:
                hs = self.hotels[geo]
            except KeyError:
                raise LookupError(f"unknown geo {geo!r}") from None
            ids = [h.hotel_id for h in hs]
            feats = np.array([h.features for h in hs], dtype=np.float64).reshape(len(hs), self.feature_dimension)
            deal_col = FEATURE_NAMES.index("deal_score")
            deal = feats[:, deal_col] if self.feature_dimension > deal_col else np.zeros(len(hs))
            order = sorted(range(len(ids)), key=ids.__getitem__)
            id_rank = np.empty(len(ids), dtype=np.int64)
            id_rank[order] = np.arange(len(ids))
            cache[geo] = _GeoArrays(ids, np.array([h.latent_quality for h in hs]), feats, deal, id_rank)
        return cache[geo]

    def bookings(self) -> dict[str, float]:
        return {h.hotel_id: h.historical_bookings for h in self.by_id.values()}

    def to_dict(self) -> dict:
        return {
            "feature_dimension": self.feature_dimension,
            "logging_policy_noise": self.logging_policy_noise,
            "logging_deal_weight": self.logging_deal_weight,
            "page_size": self.page_size,
            "seed": self.seed,
            "hotels": [asdict(h) for g in self.geo_ids for h in self.hotels[g]],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "HotelUniverse":
        hotels: dict[str, list[Hotel]] = {}
        for raw in obj["hotels"]:
            h = Hotel(
                hotel_id=raw["hotel_id"],
                geo_id=raw["geo_id"],
                latent_quality=float(raw["latent_quality"]),
                features=tuple(float(v) for v in raw["features"]),
                historical_bookings=float(raw["historical_bookings"]),
            )
            hotels.setdefault(h.geo_id, []).append(h)
        return cls(
            hotels=hotels,
            feature_dimension=int(obj["feature_dimension"]),
            logging_policy_noise=float(obj["logging_policy_noise"]),
            logging_deal_weight=float(obj["logging_deal_weight"]),
            page_size=int(obj["page_size"]),
            seed=int(obj["seed"]),
        )


def gen_universe(num_geos: int, hotels_per_geo: int, feature_dimension: int, seed: int,
                 page_size: int = PAGE_SIZE, logging_policy_noise: float = 0.1,
                 logging_deal_weight: float = 0.15, relevance_sharpness: float = 6.0) -> HotelUniverse:
    """Generate a universe of hotels grouped by geo.

    Historical bookings are ``popularity[geo] * 1000 * sigmoid(relevance_sharpness * (q - 0.5))``,
    i.e. proportional to the click-given-examination probability of the
    default user, which makes them a sound relevance proxy.
    """
    if num_geos < 1:
        raise ConfigError("num_geos must be >= 1")
    if hotels_per_geo < page_size:
        raise ConfigError(f"hotels_per_geo must be >= page_size ({page_size})")
    if feature_dimension < 1:
        raise ConfigError("feature_dimension must be >= 1")
    if logging_policy_noise < 0:
        raise ConfigError("logging_policy_noise must be >= 0")

    rng = stream(seed, "universe")
    hotels: dict[str, list[Hotel]] = {}
    gdigits = max(3, len(str(num_geos - 1)))
    hdigits = max(5, len(str(num_geos * hotels_per_geo - 1)))
    for g in range(num_geos):
        geo_id = f"g{g:0{gdigits}d}"
        popularity = float(rng.lognormal(0.0, 0.5))
        q = np.clip(rng.beta(2.0, 2.0, size=hotels_per_geo), 1e-6, 1 - 1e-6)
        noise = rng.standard_normal((hotels_per_geo, max(feature_dimension, 4)))
        cols = [
            np.clip(np.round(2 * (1.0 + 4.0 * q + 0.75 * noise[:, 0])) / 2, 1.0, 5.0),
            np.clip(np.round(2.0 + 7.0 * q + 1.2 * noise[:, 1], 1), 1.0, 10.0),
            np.clip(np.round(2.5 + 1.5 * (q - 0.5) + 0.8 * noise[:, 2]), 1.0, 4.0),
            np.round(noise[:, 3], 3),
        ]
        extra = np.round(rng.standard_normal((hotels_per_geo, max(0, feature_dimension - 4))), 3)
        feats = np.column_stack(cols + [extra[:, i] for i in range(extra.shape[1])])[:, :feature_dimension]
        bookings = np.round(popularity * 1000.0 * sigmoid(relevance_sharpness * (q - 0.5)), 6)
        hotels[geo_id] = [
            Hotel(
                hotel_id=f"h{g * hotels_per_geo + i:0{hdigits}d}",
                geo_id=geo_id,
                latent_quality=float(q[i]),
                features=tuple(float(v) for v in feats[i]),
                historical_bookings=float(bookings[i]),
            )
            for i in range(hotels_per_geo)
        ]
    return HotelUniverse(hotels, feature_dimension, logging_policy_noise, logging_deal_weight,
                         page_size, seed)


def order_by_score(scores: np.ndarray, id_rank: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, ties by hotel_id ascending."""
    return np.lexsort((id_rank, -scores))


def logging_scores(universe: HotelUniverse, geo: str, rng: np.random.Generator) -> np.ndarray:
    arr = universe.arrays(geo)
    scores = arr.quality + universe.logging_deal_weight * arr.deal
    if universe.logging_policy_noise > 0:
        scores = scores + rng.normal(0.0, universe.logging_policy_noise, size=len(arr.ids))
    return scores


def rank_logging_policy(universe: HotelUniverse, geo: str, seed: int) -> list[str]:
    """Production ranking for ``geo``: noisy quality plus the deal_score bias."""
    arr = universe.arrays(geo)
    scores = logging_scores(universe, geo, stream(seed, "logging"))
    top = order_by_score(scores, arr.id_rank)[: universe.page_size]
    return [arr.ids[i] for i in top]


def user_uniforms(seed: int, n: int) -> np.ndarray:
    """The user's random numbers for an n-slot page, fixed by ``seed``.

    Drawn up front in a fixed layout so that two rankings simulated with the
    same seed share the user's randomness position by position.
    """
    return stream(seed, "user").random((4, n))


def events_from_uniforms(u: np.ndarray, quality: np.ndarray, user: UserModelConfig):
    """Return (events, examined) for a page whose hotels have ``quality``."""
    n = len(quality)
    u = u[:, :n]
    p_click = user.click_given_exam(quality)
    if user.model_kind == "pbm":
        examined = u[0] < user.examination(n)
        clicked = examined & (u[1] < p_click)
    else:
        hits = u[1] < p_click
        first = int(np.argmax(hits)) if hits.any() else n - 1
        examined = np.arange(n) <= first
        clicked = examined & hits
    booking_page = clicked & (u[2] < user.booking_page_prob)
    booked = booking_page & (u[3] < user.booking_prob)
    events = np.where(booked, 3, np.where(booking_page, 2, np.where(clicked, 1, 0)))
    return events, examined


def _simulate(universe: HotelUniverse, ranking: Sequence[str], user: UserModelConfig, seed: int,
              session_id: str, geo: str):
    if len(ranking) != universe.page_size:
        raise ConfigError(f"ranking has {len(ranking)} hotels, expected page_size={universe.page_size}")
    by_id = universe.by_id
    hotels = [by_id[h] for h in ranking]
    events, examined = events_from_uniforms(user_uniforms(seed, len(hotels)),
                                            np.array([h.latent_quality for h in hotels]), user)
    impressions = tuple(
        Impression(h.hotel_id, k + 1, Event(int(events[k])), h.features)
        for k, h in enumerate(hotels)
    )
    return SessionLog(session_id, geo, impressions, seed), examined


def simulate_session(universe: HotelUniverse, ranking: Sequence[str], user: UserModelConfig,
                     seed: int, session_id: str = "s0", geo: str | None = None) -> SessionLog:
    if geo is None and ranking:
        geo = universe.by_id[ranking[0]].geo_id
    return _simulate(universe, ranking, user, seed, session_id, geo)[0]


def simulate_log(universe: HotelUniverse, user: UserModelConfig, num_sessions: int, seed: int,
                 exam_trace: list | None = None) -> Iterator[SessionLog]:
    """Yield ``num_sessions`` sessions over uniformly drawn geos.

    Session ``i`` depends only on ``(seed, i)``.  When ``exam_trace`` is a
    list, the ground-truth examination indicators are appended to it.
    """
    if num_sessions < 1:
        raise ConfigError("num_sessions must be >= 1")
    geos = universe.geo_ids
    digits = max(7, len(str(num_sessions - 1)))
    for i in range(num_sessions):
        rng = stream(seed, "session", i)
        geo = geos[int(rng.integers(len(geos)))]
        arr = universe.arrays(geo)
        top = order_by_score(logging_scores(universe, geo, rng), arr.id_rank)[: universe.page_size]
        ranking = [arr.ids[j] for j in top]
        user_seed = derive_seed(seed, "user", i)
        session, examined = _simulate(universe, ranking, user, user_seed, f"s{i:0{digits}d}", geo)
        if exam_trace is not None:
            exam_trace.append((session.session_id, examined.astype(np.int8).tolist()))
        yield session


def ground_truth(universe: HotelUniverse, user: UserModelConfig) -> dict:
    """Sidecar content: true examination curve and a universe summary."""
    q = np.array([h.latent_quality for h in universe.by_id.values()])
    return {
        "user_model": asdict(user),
        "page_size": universe.page_size,
        "prop_true": (user.examination(universe.page_size).tolist()
                      if user.model_kind == "pbm" else None),
        "universe": {
            "num_geos": len(universe.hotels),
            "num_hotels": len(q),
            "feature_dimension": universe.feature_dimension,
            "mean_latent_quality": float(q.mean()),
            "seed": universe.seed,
        },
    }


def write_log(sessions, path, exam_path=None, exam_trace: list | None = None) -> int:
    """Stream sessions to JSONL at ``path`` atomically; optional examination side file."""
    with atomic_output(path) as fh:
        count = write_sessions(sessions, fh)
    if exam_path is not None and exam_trace is not None:
        with atomic_output(exam_path) as fh:
            for sid, exam in exam_trace:
                fh.write(dumps_line({"session_id": sid, "examined": exam}) + "\n")
    return count


def write_json(obj, path) -> None:
    with atomic_output(path) as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")
