"""Pairwise gradient-boosted tree ranker (LambdaMART).

Gradients come from the pairwise logistic loss weighted by the NDCG change
of swapping each pair.  Each boosting round fits one regression tree to the
negative gradients with exact, variance-reduction splits and Newton leaf
values.  Work is spread over a thread pool, but every reduction happens in
a fixed order so results do not depend on the thread count.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .core import PAGE_SIZE, ConfigError, FormatError, PipelineError

FORMAT_VERSION = 1
# Upper bound on pair-matrix elements materialized at once.
_PAIR_BLOCK = 2_000_000


class TrainingError(PipelineError):
    module = "ranker"


class UsageError(PipelineError, ValueError):
    module = "ranker"


class UnsupportedVersionError(FormatError):
    module = "ranker"


# -- metric -----------------------------------------------------------------

def _discounts(n: int, k: int) -> np.ndarray:
    r = np.arange(1, n + 1, dtype=np.float64)
    return np.where(r <= k, 1.0 / np.log2(1.0 + r), 0.0)


def ndcg_at_k(labels: Sequence[float], scores: Sequence[float], k: int) -> float:
    """NDCG@k with gain ``2**label - 1``; 1.0 when no label is positive.

    Ties in ``scores`` are ordered by original index.
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise UsageError("labels and scores must be 1-d sequences of equal length")
    if labels.size == 0:
        raise UsageError("empty ranking")
    gains = np.exp2(labels) - 1.0
    disc = _discounts(len(gains), k)
    ideal = float(np.sort(gains)[::-1] @ disc)
    if ideal == 0.0:
        return 1.0
    order = np.argsort(-scores, kind="stable")
    return float(gains[order] @ disc) / ideal


def _buckets(offsets: np.ndarray, block: int = _PAIR_BLOCK):
    """Yield (group indices, size) chunks of equal-size groups."""
    sizes = np.diff(offsets)
    for s in np.unique(sizes):
        if s < 1:
            continue
        groups = np.flatnonzero(sizes == s)
        step = max(1, block // int(s * s))
        for i in range(0, len(groups), step):
            yield groups[i:i + step], int(s)


def mean_ndcg(labels: np.ndarray, scores: np.ndarray, offsets: np.ndarray, k: int) -> float:
    """Mean NDCG@k over the groups delimited by ``offsets``."""
    total = 0.0
    count = 0
    parts = []
    for groups, s in _buckets(offsets):
        idx = offsets[groups][:, None] + np.arange(s)
        gains = np.exp2(labels[idx].astype(np.float64)) - 1.0
        disc = _discounts(s, k)
        ideal = np.sort(gains, axis=1)[:, ::-1] @ disc
        order = np.argsort(-scores[idx], axis=1, kind="stable")
        dcg = np.take_along_axis(gains, order, axis=1) @ disc
        vals = np.where(ideal > 0, dcg / np.where(ideal > 0, ideal, 1.0), 1.0)
        parts.append((groups, vals))
        count += len(groups)
    if count == 0:
        return float("nan")
    out = np.empty(len(offsets) - 1)
    for groups, vals in parts:
        out[groups] = vals
    total = math.fsum(out[np.diff(offsets) > 0])
    return total / count


# -- lambda gradients -------------------------------------------------------

class PairIndex:
    """All ordered pairs (i, j) with ``label_i > label_j`` inside each group.

    Labels do not change during boosting, so the pair list and the ideal DCG
    of every group are computed once; each round only re-ranks.
    """

    def __init__(self, labels: np.ndarray, offsets: np.ndarray, k: int):
        self.n = len(labels)
        self.k = k
        self.offsets = offsets
        self.buckets = [(offsets[groups][:, None] + np.arange(s), s) for groups, s in _buckets(offsets)]
        gains = np.exp2(labels.astype(np.float64)) - 1.0
        inv_ideal = np.zeros(len(offsets) - 1)
        hi, lo, grp = [], [], []
        for idx, s in self.buckets:
            g = gains[idx]
            ideal = np.sort(g, axis=1)[:, ::-1] @ _discounts(s, k)
            rows = np.flatnonzero(ideal > 0)
            inv_ideal[self._group_of(idx[:, 0])[rows]] = 1.0 / ideal[rows]
            lab = labels[idx]
            better = lab[:, :, None] > lab[:, None, :]
            gi, a, b = np.nonzero(better)
            hi.append(idx[gi, a])
            lo.append(idx[gi, b])
            grp.append(self._group_of(idx[gi, 0]))
        cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt))
        self.hi = cat(hi, np.int64)
        self.lo = cat(lo, np.int64)
        order = np.lexsort((self.lo, self.hi))
        self.hi, self.lo = self.hi[order], self.lo[order]
        self.dgain = np.abs(gains[self.hi] - gains[self.lo])
        self.inv_ideal = inv_ideal[cat(grp, np.int64)[order]]

    def _group_of(self, rows: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.offsets, rows, side="right") - 1

    def discounts(self, scores: np.ndarray) -> np.ndarray:
        """Rank discount of every row under the ranking induced by ``scores``."""
        disc = np.zeros(self.n)
        for idx, s in self.buckets:
            order = np.argsort(-scores[idx], axis=1, kind="stable")
            disc[np.take_along_axis(idx, order, axis=1)] = _discounts(s, self.k)
        return disc

    def swap_weights(self, scores: np.ndarray) -> np.ndarray:
        disc = self.discounts(scores)
        return self.dgain * np.abs(disc[self.hi] - disc[self.lo]) * self.inv_ideal

    def lambdas(self, scores: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
        w = self.swap_weights(scores)
        rho = expit(-sigma * (scores[self.hi] - scores[self.lo]))
        lam = sigma * rho * w
        h = sigma * sigma * rho * (1.0 - rho) * w
        grad = np.bincount(self.lo, lam, self.n) - np.bincount(self.hi, lam, self.n)
        hess = np.bincount(self.hi, h, self.n) + np.bincount(self.lo, h, self.n)
        return grad, hess


def lambda_gradients(labels: Sequence[float], scores: Sequence[float], sigma: float = 1.0,
                     ndcg_truncation: int = PAGE_SIZE) -> tuple[np.ndarray, np.ndarray]:
    """Per-example gradient and hessian of the NDCG-weighted pairwise loss for one group.

    The loss is ``sum w_ij * log(1 + exp(-sigma * (s_i - s_j)))`` over pairs with
    ``label_i > label_j``, where ``w_ij`` is the NDCG change of swapping i and j
    (held fixed).  Trees fit the negative of the returned gradient.
    """
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise UsageError("labels and scores differ in length")
    if labels.size < 2:
        return np.zeros(labels.size), np.zeros(labels.size)
    pairs = PairIndex(labels, np.array([0, labels.size]), ndcg_truncation)
    return pairs.lambdas(scores, sigma)


# -- trees ------------------------------------------------------------------

@dataclass
class Tree:
    """Flat binary tree; ``feature[i] == -1`` marks a leaf.  Rows go left when ``x <= threshold``."""

    feature: list[int]
    threshold: list[float]
    left: list[int]
    right: list[int]
    value: list[float]

    @classmethod
    def leaf(cls, value: float) -> "Tree":
        return cls([-1], [0.0], [-1], [-1], [float(value)])

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        feature = np.asarray(self.feature)
        threshold = np.asarray(self.threshold)
        left = np.asarray(self.left)
        right = np.asarray(self.right)
        node = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(feature[node] >= 0)
        while active.size:
            n = node[active]
            go_left = X[active, feature[n]] <= threshold[n]
            node[active] = np.where(go_left, left[n], right[n])
            active = active[feature[node[active]] >= 0]
        return node

    def to_list(self) -> list:
        return [[f, t, l, r, v] for f, t, l, r, v in
                zip(self.feature, self.threshold, self.left, self.right, self.value)]

    @classmethod
    def from_list(cls, nodes: list) -> "Tree":
        f, t, l, r, v = (list(col) for col in zip(*nodes)) if nodes else ([], [], [], [], [])
        return cls([int(x) for x in f], [float(x) for x in t], [int(x) for x in l],
                   [int(x) for x in r], [float(x) for x in v])


@dataclass
class _Split:
    gain: float
    feature: int
    code: int
    threshold: float


class _FeatureIndex:
    """Per-feature integer codes of the sorted distinct values.

    Splitting between consecutive distinct values is exactly the set of
    thresholds a sort-based exact search would consider.
    """

    def __init__(self, X: np.ndarray):
        self.uniques = []
        self.codes = []
        for j in range(X.shape[1]):
            u, c = np.unique(X[:, j], return_inverse=True)
            self.uniques.append(u)
            self.codes.append(c.astype(np.int64).ravel())

    def best_split(self, j: int, rows: np.ndarray, target: np.ndarray, min_leaf: int) -> _Split | None:
        u = self.uniques[j]
        if len(u) < 2:
            return None
        codes = self.codes[j][rows]
        cnt = np.bincount(codes, minlength=len(u)).astype(np.float64)
        tot = np.bincount(codes, weights=target, minlength=len(u))
        cl = np.cumsum(cnt)[:-1]
        gl = np.cumsum(tot)[:-1]
        n = cl[-1] + cnt[-1]
        g = gl[-1] + tot[-1]
        cr = n - cl
        gr = g - gl
        ok = (cl >= min_leaf) & (cr >= min_leaf)
        if not ok.any():
            return None
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = np.where(ok, gl * gl / cl + gr * gr / cr - g * g / n, -np.inf)
        t = int(np.argmax(gain))
        if not np.isfinite(gain[t]):
            return None
        lo, hi = u[t], u[t + 1]
        thr = lo + (hi - lo) / 2.0
        if not lo <= thr < hi:
            thr = lo
        return _Split(float(gain[t]), j, t, float(thr))


def _grow_tree(index: _FeatureIndex, target: np.ndarray, hess: np.ndarray, max_leaves: int,
               min_leaf: int, pool: ThreadPoolExecutor | None) -> tuple[Tree, np.ndarray]:
    """Best-first growth to at most ``max_leaves`` leaves.  Returns the tree and row leaf ids."""
    nfeat = len(index.codes)
    tree = Tree([], [], [], [], [])
    leaf_rows: dict[int, np.ndarray] = {}

    def add_node(rows):
        node = len(tree.feature)
        tree.feature.append(-1)
        tree.threshold.append(0.0)
        tree.left.append(-1)
        tree.right.append(-1)
        h = float(hess[rows].sum())
        g = float(target[rows].sum())
        tree.value.append(g / h if h > 0 else 0.0)
        leaf_rows[node] = rows
        return node

    def find_split(rows):
        if len(rows) < 2 * min_leaf:
            return None
        sub = target[rows]
        cands = (pool.map if pool is not None else map)(
            lambda j: index.best_split(j, rows, sub, min_leaf), range(nfeat))
        best = None
        for c in cands:
            if c is not None and c.gain > 1e-12 and (best is None or c.gain > best.gain):
                best = c
        return best

    heap = []
    root = add_node(np.arange(len(target)))
    split = find_split(leaf_rows[root])
    if split is not None:
        heapq.heappush(heap, (-split.gain, root, split))
    leaves = 1
    while heap and leaves < max_leaves:
        _, node, split = heapq.heappop(heap)
        rows = leaf_rows.pop(node)
        go_left = index.codes[split.feature][rows] <= split.code
        tree.feature[node] = split.feature
        tree.threshold[node] = split.threshold
        tree.value[node] = 0.0
        tree.left[node] = add_node(rows[go_left])
        tree.right[node] = add_node(rows[~go_left])
        leaves += 1
        for child in (tree.left[node], tree.right[node]):
            s = find_split(leaf_rows[child])
            if s is not None:
                heapq.heappush(heap, (-s.gain, child, s))
    leaf_of = np.empty(len(target), dtype=np.int64)
    for node, rows in leaf_rows.items():
        leaf_of[rows] = node
    return tree, leaf_of


# -- model ------------------------------------------------------------------

@dataclass(frozen=True)
class RankerParams:
    num_trees: int = 300
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_examples_per_leaf: int = 20
    ndcg_truncation: int = PAGE_SIZE
    sigma: float = 1.0

    def __post_init__(self):
        if self.num_trees < 1:
            raise ConfigError("num_trees must be >= 1")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError("learning_rate must be in (0, 1]")
        if self.max_leaves < 2:
            raise ConfigError("max_leaves must be >= 2")
        if self.min_examples_per_leaf < 1:
            raise ConfigError("min_examples_per_leaf must be >= 1")
        if self.ndcg_truncation < 1:
            raise ConfigError("ndcg_truncation must be >= 1")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")


@dataclass
class RankerModel:
    trees: list[Tree]
    learning_rate: float
    feature_dimension: int
    params: RankerParams = field(default_factory=RankerParams)
    metadata: dict = field(default_factory=dict)
    # Populated by fit() only; not serialized.
    train_scores: np.ndarray | None = field(default=None, repr=False, compare=False)
    history: list[float] = field(default_factory=list, repr=False, compare=False)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.feature_dimension:
            raise UsageError(f"expected {self.feature_dimension} features, got {X.shape[1]}")
        out = np.zeros(len(X))
        for tree in self.trees:
            out += self.learning_rate * np.asarray(tree.value)[tree.apply(X)]
        return out

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "params": asdict(self.params),
            "learning_rate": self.learning_rate,
            "feature_dimension": self.feature_dimension,
            "metadata": self.metadata,
            "trees": [t.to_list() for t in self.trees],
        }


def predict(model: RankerModel, features: Sequence[float]) -> float:
    return float(model.predict(np.asarray(features, dtype=np.float64)[None, :])[0])


def serialize(model: RankerModel) -> bytes:
    return (json.dumps(model.to_dict(), sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


def deserialize(data: bytes) -> RankerModel:
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"model is not valid JSON: {exc}") from None
    if not isinstance(obj, dict) or "format_version" not in obj:
        raise FormatError("model has no format_version")
    if obj["format_version"] != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported model format_version {obj['format_version']!r} (supported: {FORMAT_VERSION})")
    try:
        dim = int(obj["feature_dimension"])
        trees = [Tree.from_list(t) for t in obj["trees"]]
        model = RankerModel(trees, float(obj["learning_rate"]), dim,
                            RankerParams(**obj["params"]), dict(obj.get("metadata", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed model: {exc!r}") from None
    for t in trees:
        n = len(t.feature)
        for f, l, r, v in zip(t.feature, t.left, t.right, t.value):
            if f >= dim or (f >= 0 and not (0 < l < n and 0 < r < n)) or not math.isfinite(v):
                raise FormatError("malformed tree node")
    return model


def model_hash(model: RankerModel) -> str:
    return hashlib.sha256(serialize(model)).hexdigest()[:16]


def fit(dataset, params: RankerParams = RankerParams(), seed: int = 0, threads: int = 1,
        track_history: bool = False, feature_dimension: int | None = None) -> RankerModel:
    """Train a LambdaMART ensemble on a grouped dataset.

    ``dataset`` needs ``features``, ``labels`` and ``group_offsets`` arrays.
    There is no stochastic component, so ``seed`` is only recorded.
    """
    X = np.asarray(dataset.features, dtype=np.float64)
    y = np.asarray(dataset.labels, dtype=np.float64)
    offsets = np.asarray(dataset.group_offsets, dtype=np.int64)
    if len(y) == 0:
        raise TrainingError("dataset is empty")
    if feature_dimension is not None and X.shape[1] != feature_dimension:
        raise TrainingError(f"dataset has {X.shape[1]} features, expected {feature_dimension}")
    if offsets[0] != 0 or offsets[-1] != len(y) or np.any(np.diff(offsets) < 0):
        raise TrainingError("group offsets do not partition the dataset")
    if not np.all(np.isfinite(X)):
        raise TrainingError("features contain non-finite values")

    index = _FeatureIndex(X)
    pairs = PairIndex(y, offsets, params.ndcg_truncation)
    scores = np.zeros(len(y))
    trees: list[Tree] = []
    history: list[float] = []
    k = params.ndcg_truncation
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        for _ in range(params.num_trees):
            grad, hess = pairs.lambdas(scores, params.sigma)
            tree, leaf_of = _grow_tree(index, -grad, hess, params.max_leaves,
                                       params.min_examples_per_leaf, pool)
            trees.append(tree)
            scores += params.learning_rate * np.asarray(tree.value)[leaf_of]
            if track_history:
                history.append(mean_ndcg(y, scores, offsets, k))
    finally:
        if pool is not None:
            pool.shutdown()
    meta = {"seed": seed, "rows": int(len(y)), "groups": int(len(offsets) - 1)}
    meta.update(getattr(dataset, "meta", {}) or {})
    model = RankerModel(trees, params.learning_rate, X.shape[1], params, meta)
    model.train_scores = scores
    model.history = history
    return model
