"""Offline evaluation, two-stage ranking and a simulated A/B harness."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .core import PAGE_SIZE, ConfigError, Hotel, PipelineError, SessionLog, derive_seed, stream
from .debias import assign_label
from .ranker import RankerModel, UsageError, ndcg_at_k
from .simclick import HotelUniverse, UserModelConfig, events_from_uniforms, user_uniforms

METRIC_KS = (5, 10, 30)


class EvaluationError(PipelineError):
    module = "evalab"


def truth_labels(quality) -> np.ndarray:
    """Graded ground-truth relevance on the training label scale (0..5)."""
    return 5.0 * np.asarray(quality, dtype=np.float64)


def _score(model, hotels: Sequence[Hotel], X: np.ndarray) -> np.ndarray:
    if isinstance(model, RankerModel) or hasattr(model, "predict"):
        return np.asarray(model.predict(X), dtype=np.float64)
    return np.asarray(model(hotels), dtype=np.float64)


def fit_stage1(universe: HotelUniverse) -> np.ndarray:
    """Least-squares weights from hotel features to historical bookings."""
    hotels = list(universe.by_id.values())
    X = np.array([h.features for h in hotels])
    y = np.array([h.historical_bookings for h in hotels])
    w, *_ = np.linalg.lstsq(X - X.mean(axis=0), y - y.mean(), rcond=None)
    return w


def _sort_key_order(scores: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    return np.array(sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i])), dtype=np.int64)


def two_stage_rank(stage1_weights: Sequence[float], stage2, inventory: Sequence[Hotel], m: int,
                   page_size: int = PAGE_SIZE) -> list[str]:
    """Retrieve the top ``m`` hotels by a linear score, then re-rank them with ``stage2``.

    ``stage2`` is a RankerModel, or a callable mapping a list of hotels to scores.
    Ties at either stage go to the lower hotel_id.
    """
    if m < page_size:
        raise ConfigError(f"m={m} must be >= page_size={page_size}")
    if len(inventory) < m:
        raise ConfigError(f"inventory of {len(inventory)} hotels is smaller than m={m}")
    X = np.array([h.features for h in inventory], dtype=np.float64)
    ids = [h.hotel_id for h in inventory]
    s1 = X @ np.asarray(stage1_weights, dtype=np.float64)
    cand = _sort_key_order(s1, ids)[:m]
    hotels = [inventory[i] for i in cand]
    s2 = _score(stage2, hotels, X[cand])
    top = _sort_key_order(s2, [h.hotel_id for h in hotels])[:page_size]
    return [hotels[i].hotel_id for i in top]


def page_truth_ndcg(universe: HotelUniverse, geo: str, ranking: Sequence[str], k: int = PAGE_SIZE) -> float:
    """Ground-truth NDCG@k of a page, normalized by the best page the geo could show."""
    by_id = universe.by_id
    gains = np.exp2(truth_labels([by_id[h].latent_quality for h in ranking])) - 1.0
    disc = 1.0 / np.log2(np.arange(2, len(gains) + 2))
    disc[k:] = 0.0
    best = np.sort(np.exp2(truth_labels(universe.arrays(geo).quality)) - 1.0)[::-1][:len(gains)]
    return float(gains @ disc / (best @ disc))


def evaluate_model(model, heldout_log: Iterable[SessionLog], universe: HotelUniverse,
                   ks: Sequence[int] = METRIC_KS, extra_features: Callable | None = None) -> dict:
    """Re-rank each held-out impression list and report NDCG.

    ``label_ndcg@k`` uses the recorded click labels over sessions with at
    least one event; ``truth_ndcg@k`` grades every session by latent quality.
    ``model`` may also be a callable ``(session, X) -> scores``.
    """
    by_id = universe.by_id
    sessions = list(heldout_log)
    if not sessions:
        raise EvaluationError("held-out log is empty")
    mats = []
    for session in sessions:
        X = np.array([imp.features_snapshot for imp in session.impressions], dtype=np.float64)
        if extra_features is not None:
            X = np.hstack([X, extra_features(session)])
        mats.append(X)
    bounds = np.cumsum([0] + [len(X) for X in mats])
    if isinstance(model, RankerModel) or hasattr(model, "predict"):
        X = np.vstack(mats)
        if X.shape[1] != model.feature_dimension:
            raise UsageError(f"model expects {model.feature_dimension} features, log has {X.shape[1]}")
        # One batched call; tree traversal is per row, so this equals per-session scoring.
        all_scores = model.predict(X)
        session_scores = [all_scores[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    else:
        session_scores = [np.asarray(model(s, X), dtype=np.float64) for s, X in zip(sessions, mats)]

    label_sums = {k: [] for k in ks}
    truth_sums = {k: [] for k in ks}
    n = 0
    for session, scores in zip(sessions, session_scores):
        imps = session.impressions
        labels = np.array([assign_label(imp) for imp in imps], dtype=np.float64)
        truth = truth_labels([by_id[imp.hotel_id].latent_quality for imp in imps])
        for k in ks:
            if labels.any():
                label_sums[k].append(ndcg_at_k(labels, scores, k))
            truth_sums[k].append(ndcg_at_k(truth, scores, k))
        n += 1
    out: dict = {"sessions": n, "clicked_sessions": len(label_sums[ks[0]])}
    for k in ks:
        out[f"label_ndcg@{k}"] = math.fsum(label_sums[k]) / max(1, len(label_sums[k]))
        out[f"truth_ndcg@{k}"] = math.fsum(truth_sums[k]) / n
    return out


def logging_policy_scorer(session: SessionLog, X: np.ndarray) -> np.ndarray:
    """Scores reproducing the recorded order of a session."""
    return -np.array([imp.position for imp in session.impressions], dtype=np.float64)


@dataclass
class ArmResult:
    clicks: int
    bookings: int
    mean_truth_ndcg: float
    click_lift: float
    click_ci: tuple[float, float]
    booking_lift: float
    booking_ci: tuple[float, float]
    ndcg_lift: float
    ndcg_ci: tuple[float, float]


@dataclass
class AbReport:
    arms: dict[str, ArmResult]
    num_sessions: int
    seed: int
    confidence: float
    bootstrap_samples: int
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "num_sessions": self.num_sessions,
            "seed": self.seed,
            "confidence": self.confidence,
            "bootstrap_samples": self.bootstrap_samples,
            "config": self.config,
            "arms": {name: asdict(r) for name, r in self.arms.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table(self) -> str:
        pct = int(round(self.confidence * 100))
        lines = [f"{'arm':<16} {'clicks':>8} {'click lift':>11} {pct}% CI{'':<14} {'truth NDCG@30':>14} {'NDCG lift':>10}"]
        for name, r in self.arms.items():
            ci = f"[{r.click_ci[0] * 100:+.2f}%, {r.click_ci[1] * 100:+.2f}%]"
            lines.append(f"{name:<16} {r.clicks:>8d} {r.click_lift * 100:>+10.2f}% {ci:<20} "
                         f"{r.mean_truth_ndcg:>14.4f} {r.ndcg_lift * 100:>+9.2f}%")
        return "\n".join(lines)


def _ratio_ci(arm: np.ndarray, ctrl: np.ndarray, boot_idx: Iterable[np.ndarray], alpha: float):
    reps = np.array([arm[idx].sum() / ctrl[idx].sum() - 1.0 for idx in boot_idx])
    lo, hi = np.quantile(reps, [alpha / 2, 1 - alpha / 2])
    return float(lo), float(hi)


def simulated_abtest(arms: Mapping[str, object], universe: HotelUniverse, user: UserModelConfig,
                     num_sessions: int, seed: int, stage1_weights: Sequence[float] | None = None,
                     m: int | None = None, confidence: float = 0.95, bootstrap_samples: int = 1000,
                     per_session: dict | None = None) -> AbReport:
    """Run every arm on the same simulated sessions and compare against ``control``.

    Session i draws its geo and its user randomness from ``(seed, i)``; each arm's
    page is simulated with the same per-position uniforms, so lifts reflect only
    ranking differences.
    """
    if "control" not in arms:
        raise ConfigError("arms must include 'control'")
    if num_sessions < 1:
        raise ConfigError("num_sessions must be >= 1")
    page = universe.page_size
    m = 2 * page if m is None else m
    w1 = fit_stage1(universe) if stage1_weights is None else np.asarray(stage1_weights, dtype=np.float64)
    names = ["control"] + sorted(n for n in arms if n != "control")
    geos = universe.geo_ids
    by_id = universe.by_id

    rankings: dict[tuple[str, str], list[str]] = {}
    page_quality: dict[tuple[str, str], np.ndarray] = {}
    page_ndcg: dict[tuple[str, str], float] = {}
    for name in names:
        for g in geos:
            r = two_stage_rank(w1, arms[name], universe.hotels[g], m, page)
            rankings[name, g] = r
            page_quality[name, g] = np.array([by_id[h].latent_quality for h in r])
            page_ndcg[name, g] = page_truth_ndcg(universe, g, r, page)

    clicks = {n: np.zeros(num_sessions) for n in names}
    bookings = {n: np.zeros(num_sessions) for n in names}
    ndcg = {n: np.zeros(num_sessions) for n in names}
    for i in range(num_sessions):
        geo = geos[int(stream(seed, "ab-geo", i).integers(len(geos)))]
        u = user_uniforms(derive_seed(seed, "ab-user", i), page)
        for name in names:
            events, _ = events_from_uniforms(u, page_quality[name, geo], user)
            clicks[name][i] = np.count_nonzero(events)
            bookings[name][i] = np.count_nonzero(events == 3)
            ndcg[name][i] = page_ndcg[name, geo]

    rng = stream(seed, "bootstrap")
    boot = [rng.integers(0, num_sessions, num_sessions) for _ in range(bootstrap_samples)]
    alpha = 1.0 - confidence
    results = {}
    for name in names:
        def lift(a, c):
            return float(a.sum() / c.sum() - 1.0) if c.sum() > 0 else float("nan")

        results[name] = ArmResult(
            clicks=int(clicks[name].sum()),
            bookings=int(bookings[name].sum()),
            mean_truth_ndcg=float(ndcg[name].mean()),
            click_lift=lift(clicks[name], clicks["control"]),
            click_ci=_ratio_ci(clicks[name], clicks["control"], boot, alpha),
            booking_lift=lift(bookings[name], bookings["control"]),
            booking_ci=_ratio_ci(bookings[name], bookings["control"], boot, alpha)
            if bookings["control"].sum() > 0 else (float("nan"), float("nan")),
            ndcg_lift=lift(ndcg[name], ndcg["control"]),
            ndcg_ci=_ratio_ci(ndcg[name], ndcg["control"], boot, alpha),
        )
    if per_session is not None:
        per_session.update({"clicks": clicks, "bookings": bookings, "ndcg": ndcg})
    config = {"user": asdict(user), "m": m, "stage1_weights": [float(x) for x in w1],
              "arms": names}
    return AbReport(results, num_sessions, seed, confidence, bootstrap_samples, config)
