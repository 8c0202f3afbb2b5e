import numpy as np
import pytest

from propsample.core import DataError, Event, FormatError, Impression, SessionLog
from propsample.embed import (
    EmbeddingTable,
    SkipGramConfig,
    build_sequences,
    session_similarity,
    sgns_loss_and_grads,
    similarity_feature,
    train_skipgram,
)


def session(events, sid="s"):
    imps = tuple(Impression(f"h{i + 1}", i + 1, e, ()) for i, e in enumerate(events))
    return SessionLog(sid, "g", imps, 0)


def clicks(n, positions, sid="s"):
    return session([Event.CLICK_REVIEW if i + 1 in positions else Event.NONE for i in range(n)], sid)


def test_sequences_follow_position_order():
    assert build_sequences([clicks(10, (2, 5, 9))]) == [["h2", "h5", "h9"]]
    assert build_sequences([clicks(10, (4,)), clicks(10, ())]) == []


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v, u, neg = rng.normal(size=8), rng.normal(size=8), rng.normal(size=(5, 8))
        _, dv, du, dn = sgns_loss_and_grads(v, u, neg)
        for arr, grad in ((v, dv), (u, du), (neg, dn)):
            fd = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + 1e-6
                up = sgns_loss_and_grads(v, u, neg)[0]
                arr[idx] = old - 1e-6
                down = sgns_loss_and_grads(v, u, neg)[0]
                arr[idx] = old
                fd[idx] = (up - down) / 2e-6
            np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-8)


def two_cluster_log(sessions=600, seed=0):
    """Two geos, each with two groups of hotels that are only co-clicked within their group."""
    rng = np.random.default_rng(seed)
    groups = {("A", 0): [f"a{i}" for i in range(6)], ("A", 1): [f"a{i}" for i in range(6, 12)],
              ("B", 0): [f"b{i}" for i in range(6)], ("B", 1): [f"b{i}" for i in range(6, 12)]}
    keys = list(groups)
    seqs = [list(rng.choice(groups[keys[rng.integers(4)]], size=4, replace=False)) for _ in range(sessions)]
    geo_of = {h: g for (g, _), hs in groups.items() for h in hs}
    return seqs, geo_of, groups


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@pytest.mark.parametrize("fast", [False, True])
def test_clusters_separate(fast):
    seqs, geo_of, groups = two_cluster_log()
    table = train_skipgram(seqs, geo_of, dim=16, window=3, epochs=10, seed=1, fast=fast)
    for geo in ("A", "B"):
        c0, c1 = groups[geo, 0], groups[geo, 1]
        intra = np.mean([cosine(table.vector(a), table.vector(b))
                         for c in (c0, c1) for a in c for b in c if a != b])
        inter = np.mean([cosine(table.vector(a), table.vector(b)) for a in c0 for b in c1])
        assert intra > inter


def test_negative_audit_is_clean():
    seqs, geo_of, _ = two_cluster_log(300)
    table = train_skipgram(seqs, geo_of, dim=8, epochs=3, seed=2, audit=True)
    assert table.audit["negatives"] > 10_000
    assert table.audit["out_of_geo"] == 0
    assert table.audit["equal_to_context"] == 0


def test_deterministic_training():
    seqs, geo_of, _ = two_cluster_log(200)
    a = train_skipgram(seqs, geo_of, dim=8, epochs=2, seed=3)
    b = train_skipgram(seqs, geo_of, dim=8, epochs=2, seed=3)
    np.testing.assert_array_equal(a.vectors, b.vectors)


def test_unknown_geo_is_a_data_error():
    with pytest.raises(DataError, match="zz"):
        train_skipgram([["a", "zz"]], {"a": "g"}, dim=4, epochs=1)


def test_single_hotel_geo_gets_no_negatives():
    table = train_skipgram([["a", "b"], ["c", "a"]], {"a": "g", "b": "g", "c": "solo"},
                           dim=4, epochs=2, audit=True)
    assert table.audit["out_of_geo"] == 0


def small_table():
    vecs = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return EmbeddingTable(["a", "b", "c"], vecs, {"g": ["a", "b", "c"]}, SkipGramConfig(dim=2))


def test_similarity_examples():
    t = small_table()
    assert similarity_feature(t, [], "a") == 0.0
    assert similarity_feature(t, ["a"], "a") == pytest.approx(1.0)
    assert similarity_feature(t, ["a"], "b") == pytest.approx(0.0)
    assert similarity_feature(t, ["a", "b"], "c") == pytest.approx(1.0)


def test_cold_start_counts_misses():
    t = small_table()
    assert similarity_feature(t, ["a"], "unknown") == 0.0
    assert similarity_feature(t, ["ghost"], "a") == 0.0
    assert t.cold_start_misses == 1


def test_similarity_uses_last_clicks_only():
    t = small_table()
    assert similarity_feature(t, ["b", "b", "a"], "a", max_recent=1) == pytest.approx(1.0)


def test_similarity_is_scale_invariant():
    t = small_table()
    scaled = EmbeddingTable(t.hotel_ids, t.vectors * 7.5, t.geo_index, t.config)
    for recent in (["a"], ["a", "b"], ["c", "b"]):
        for cand in "abc":
            assert similarity_feature(scaled, recent, cand) == pytest.approx(similarity_feature(t, recent, cand))


def test_session_feature_uses_clicks_above():
    t = small_table()
    s = SessionLog("s", "g", (Impression("a", 1, Event.CLICK_REVIEW, ()), Impression("b", 2, Event.NONE, ()),
                              Impression("c", 3, Event.NONE, ())), 0)
    col = session_similarity(t)(s)
    assert col.shape == (3, 1)
    np.testing.assert_allclose(col[:, 0], [0.0, 0.0, 1 / np.sqrt(2)])


def test_save_and_load(tmp_path):
    seqs, geo_of, _ = two_cluster_log(100)
    table = train_skipgram(seqs, geo_of, dim=8, epochs=1, seed=4)
    path = tmp_path / "emb.json"
    table.save(path)
    back = EmbeddingTable.load(path)
    assert back.hotel_ids == table.hotel_ids and back.config == table.config
    np.testing.assert_array_equal(back.vectors, table.vectors)
    assert path.read_bytes() == (table.save(tmp_path / "again.json") or (tmp_path / "again.json").read_bytes())


def test_load_rejects_bad_dimensions(tmp_path):
    path = tmp_path / "emb.json"
    small_table().save(path)
    text = path.read_text().replace('"dim":2', '"dim":3')
    path.write_text(text)
    with pytest.raises(FormatError, match="header"):
        EmbeddingTable.load(path)
