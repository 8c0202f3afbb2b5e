"""Hotel embeddings from co-click sequences (skip-gram, within-geo negatives).

Users mostly search inside one geo, so negatives drawn from the whole
inventory would be trivially easy to separate from the context hotel.
Every negative for a center hotel is therefore drawn from the center's own
geo, with probability proportional to ``count ** 0.75`` and never equal to
the positive context hotel.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .core import DataError, Event, FormatError, PipelineError, SessionLog, atomic_output, stream

EMBED_FORMAT_VERSION = 1


class EmbeddingError(PipelineError):
    module = "embed"


@dataclass(frozen=True)
class SkipGramConfig:
    dim: int = 32
    window: int = 5
    negatives_per_positive: int = 5
    epochs: int = 5
    learning_rate: float = 0.025
    batch_size: int = 64
    seed: int = 0

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EmbeddingTable:
    hotel_ids: list[str]
    vectors: np.ndarray
    geo_index: dict[str, list[str]]
    config: SkipGramConfig
    cold_start_misses: int = 0
    audit: dict | None = None

    def __post_init__(self):
        self._row = {h: i for i, h in enumerate(self.hotel_ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, hotel_id: str) -> bool:
        return hotel_id in self._row

    def vector(self, hotel_id: str) -> np.ndarray:
        return self.vectors[self._row[hotel_id]]

    def to_dict(self) -> dict:
        return {
            "format_version": EMBED_FORMAT_VERSION,
            "header": {"dim": self.dim, "count": len(self.hotel_ids), "seed": self.config.seed,
                       "config_hash": self.config.config_hash()},
            "config": asdict(self.config),
            "geo_index": {g: list(hs) for g, hs in sorted(self.geo_index.items())},
            "vectors": {h: self.vectors[i].tolist() for i, h in enumerate(self.hotel_ids)},
        }

    def save(self, path) -> None:
        with atomic_output(path) as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
            if obj.get("format_version") != EMBED_FORMAT_VERSION:
                raise FormatError(f"unsupported embedding format_version {obj.get('format_version')!r}")
            header = obj["header"]
            ids = list(obj["vectors"])
            vecs = np.array([obj["vectors"][h] for h in ids], dtype=np.float64).reshape(len(ids), -1)
            config = SkipGramConfig(**obj["config"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"cannot load embeddings from {path}: {exc}") from None
        if vecs.shape != (header["count"], header["dim"]):
            raise FormatError(f"embedding shape {vecs.shape} disagrees with header "
                              f"({header['count']}, {header['dim']})")
        return cls(ids, vecs, obj["geo_index"], config)


def build_sequences(log: Iterable[SessionLog]) -> list[list[str]]:
    """Clicked hotels of each session in position order; singletons dropped."""
    out = []
    for session in log:
        seq = [imp.hotel_id for imp in sorted(session.impressions, key=lambda i: i.position)
               if imp.event != Event.NONE]
        if len(seq) >= 2:
            out.append(seq)
    return out


def sgns_loss_and_grads(center: np.ndarray, context: np.ndarray, negatives: np.ndarray):
    """Loss ``-log s(u_o.v) - sum log s(-u_n.v)`` and its gradients.

    Returns ``(loss, d_center, d_context, d_negatives)``.
    """
    pos = expit(context @ center)
    neg = expit(negatives @ center)
    loss = -np.log(pos) - np.sum(np.log1p(-neg))
    d_center = -(1.0 - pos) * context + neg @ negatives
    d_context = -(1.0 - pos) * center
    d_negatives = neg[:, None] * center[None, :]
    return float(loss), d_center, d_context, d_negatives


class _GeoSampler:
    """Draws within-geo negatives proportional to ``count ** 0.75``."""

    def __init__(self, vocab_geo: np.ndarray, counts: np.ndarray):
        self.geo_of = vocab_geo
        self.members = []
        self.weights = []
        for g in range(vocab_geo.max() + 1):
            m = np.flatnonzero(vocab_geo == g)
            self.members.append(m)
            self.weights.append(counts[m].astype(np.float64) ** 0.75)

    def draw(self, rng: np.random.Generator, centers: np.ndarray, contexts: np.ndarray, k: int):
        """``(len(centers), k)`` negatives; -1 where the geo has no admissible hotel."""
        out = np.full((len(centers), k), -1, dtype=np.int64)
        geos = self.geo_of[centers]
        u = rng.random((len(centers), k))
        for g in np.unique(geos):
            rows = np.flatnonzero(geos == g)
            members, w = self.members[g], self.weights[g]
            excl = contexts[rows]
            # Conditional CDF with the context hotel removed, one per row.
            mask = members[None, :] != excl[:, None]
            cw = np.cumsum(w[None, :] * mask, axis=1)
            total = cw[:, -1:]
            ok = total[:, 0] > 0
            target = u[rows] * np.where(total > 0, total, 1.0)
            pick = np.minimum((cw[:, None, :] <= target[:, :, None]).sum(axis=2), len(members) - 1)
            out[rows[ok]] = members[pick[ok]]
        return out


def train_skipgram(sequences: Sequence[Sequence[str]], geo_of: Mapping[str, str], dim: int = 32,
                   window: int = 5, negatives_per_positive: int = 5, epochs: int = 5, seed: int = 0,
                   learning_rate: float = 0.025, batch_size: int = 64, audit: bool = False,
                   fast: bool = False, threads: int = 4) -> EmbeddingTable:
    """Skip-gram with within-geo negative sampling, trained by minibatch SGD.

    The learning rate decays linearly to ``1e-4`` of its initial value.  In the
    default mode training is single-threaded and deterministic; ``fast=True``
    applies minibatches concurrently without locking.
    """
    if not sequences:
        raise EmbeddingError("no sequences to train on")
    config = SkipGramConfig(dim, window, negatives_per_positive, epochs, learning_rate, batch_size, seed)
    vocab = sorted({h for seq in sequences for h in seq})
    missing = [h for h in vocab if h not in geo_of]
    if missing:
        raise DataError(f"hotel {missing[0]} has no known geo")
    index = {h: i for i, h in enumerate(vocab)}
    geos = sorted({geo_of[h] for h in vocab})
    geo_idx = {g: i for i, g in enumerate(geos)}
    vocab_geo = np.array([geo_idx[geo_of[h]] for h in vocab])
    counts = np.zeros(len(vocab))
    centers, contexts = [], []
    for seq in sequences:
        ids = [index[h] for h in seq]
        for i, c in enumerate(ids):
            counts[c] += 1
            for j in range(max(0, i - window), min(len(ids), i + window + 1)):
                if j != i:
                    centers.append(c)
                    contexts.append(ids[j])
    centers = np.array(centers, dtype=np.int64)
    contexts = np.array(contexts, dtype=np.int64)
    sampler = _GeoSampler(vocab_geo, counts)

    rng = stream(seed, "skipgram")
    w_in = (rng.random((len(vocab), dim)) - 0.5) / dim
    w_out = np.zeros((len(vocab), dim))
    n_pairs = len(centers)
    total_steps = max(1, epochs * ((n_pairs + batch_size - 1) // batch_size))
    audit_log = {"negatives": 0, "out_of_geo": 0, "equal_to_context": 0} if audit else None

    def step(batch, negs, lr):
        c, o = centers[batch], contexts[batch]
        valid = negs >= 0
        vc = w_in[c]
        uo = w_out[o]
        un = w_out[np.where(valid, negs, 0)]
        pos = expit(np.einsum("bd,bd->b", uo, vc))
        neg = expit(np.einsum("bkd,bd->bk", un, vc)) * valid
        g_pos = (pos - 1.0)[:, None]
        d_center = g_pos * uo + np.einsum("bk,bkd->bd", neg, un)
        d_context = g_pos * vc
        d_neg = neg[:, :, None] * vc[:, None, :]
        np.add.at(w_in, c, -lr * d_center)
        np.add.at(w_out, o, -lr * d_context)
        np.add.at(w_out, negs[valid], -lr * d_neg[valid])

    t = 0
    jobs = []
    for epoch in range(epochs):
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, batch_size):
            batch = order[start:start + batch_size]
            negs = sampler.draw(rng, centers[batch], contexts[batch], negatives_per_positive)
            if audit_log is not None:
                valid = negs >= 0
                audit_log["negatives"] += int(valid.sum())
                audit_log["out_of_geo"] += int(
                    (vocab_geo[negs[valid]] != np.repeat(vocab_geo[centers[batch]], negatives_per_positive)
                     .reshape(negs.shape)[valid]).sum())
                audit_log["equal_to_context"] += int(
                    (negs == contexts[batch][:, None])[valid].sum())
            lr = learning_rate * max(1e-4, 1.0 - t / total_steps)
            t += 1
            if fast:
                jobs.append((batch, negs, lr))
            else:
                step(batch, negs, lr)
    if fast:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda job: step(*job), jobs))

    geo_index: dict[str, list[str]] = {}
    for h in vocab:
        geo_index.setdefault(geo_of[h], []).append(h)
    return EmbeddingTable(vocab, w_in, geo_index, config, audit=audit_log)


def similarity_feature(table: EmbeddingTable, recent_clicks: Sequence[str], candidate: str,
                       max_recent: int = 10) -> float:
    """Cosine between ``candidate`` and the mean of the last ``max_recent`` embedded clicks."""
    if candidate not in table:
        table.cold_start_misses += 1
        return 0.0
    recent = [h for h in recent_clicks if h in table][-max_recent:]
    if not recent:
        return 0.0
    mean = np.mean([table.vector(h) for h in recent], axis=0)
    v = table.vector(candidate)
    denom = np.linalg.norm(mean) * np.linalg.norm(v)
    if denom == 0:
        return 0.0
    return float(np.clip(mean @ v / denom, -1.0, 1.0))


def session_similarity(table: EmbeddingTable, max_recent: int = 10):
    """Per-impression personalization column for ``prepare_training``.

    The user's recent clicks for an impression are the clicks made higher up
    the same page, the only behavior visible when that result is reached.
    Impressions are assumed to be in position order.
    """

    def features(session: SessionLog) -> np.ndarray:
        out = np.zeros((len(session.impressions), 1))
        clicked: list[str] = []
        for i, imp in enumerate(session.impressions):
            out[i, 0] = similarity_feature(table, clicked, imp.hotel_id, max_recent)
            if imp.event != Event.NONE:
                clicked.append(imp.hotel_id)
        return out

    return features
