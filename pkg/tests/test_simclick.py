import json

import numpy as np
import pytest
from scipy import stats as sps

from propsample.core import ConfigError, Event, validate_session
from propsample.simclick import (
    UserModelConfig,
    events_from_uniforms,
    gen_universe,
    ground_truth,
    rank_logging_policy,
    simulate_log,
    simulate_session,
    write_log,
)

from conftest import flat_universe


def test_universe_size_contract():
    u = gen_universe(1, 30, 5, seed=7)
    assert list(u.hotels) == ["g000"]
    assert len(u.by_id) == 30
    assert all(len(h.features) == 5 for h in u.by_id.values())
    assert all(0 < h.latent_quality < 1 and h.historical_bookings >= 0 for h in u.by_id.values())


def test_universe_is_deterministic():
    assert gen_universe(1, 30, 5, seed=7).to_dict() == gen_universe(1, 30, 5, seed=7).to_dict()
    assert gen_universe(1, 30, 5, seed=7).to_dict() != gen_universe(1, 30, 5, seed=8).to_dict()


def test_bookings_track_quality_within_each_geo():
    u = gen_universe(2, 50, 5, seed=7)
    for hs in u.hotels.values():
        rho = sps.spearmanr([h.latent_quality for h in hs], [h.historical_bookings for h in hs])[0]
        assert rho > 0.9


@pytest.mark.parametrize("args", [(0, 30, 5, 1), (1, 29, 5, 1), (1, 30, 0, 1)])
def test_universe_rejects_bad_sizes(args):
    with pytest.raises(ConfigError):
        gen_universe(*args)


def test_noiseless_logging_policy_sorts_by_quality():
    u = gen_universe(1, 60, 5, seed=3, logging_policy_noise=0.0, logging_deal_weight=0.0)
    ranking = rank_logging_policy(u, "g000", seed=1)
    hs = sorted(u.hotels["g000"], key=lambda h: -h.latent_quality)[:30]
    assert ranking == [h.hotel_id for h in hs]


def test_logging_policy_ties_go_to_lower_hotel_id():
    u = flat_universe(hotels=40)
    assert rank_logging_policy(u, "g0", seed=9) == [f"h{i:03d}" for i in range(30)]


def test_logging_policy_unknown_geo():
    with pytest.raises(LookupError):
        rank_logging_policy(flat_universe(), "nowhere", seed=0)


def test_logging_policy_promotes_quality():
    u = gen_universe(5, 100, 5, seed=11, logging_policy_noise=0.1)
    top = np.zeros(30)
    for s in simulate_log(u, UserModelConfig(), 1000, seed=4):
        top += [u.by_id[imp.hotel_id].latent_quality for imp in s.impressions]
    assert top[0] / 1000 > top[-1] / 1000


def _click_counts(universe, user, n, seed):
    ranking = [f"h{i:03d}" for i in range(30)]
    clicks = np.zeros(30)
    for i in range(n):
        s = simulate_session(universe, ranking, user, seed=seed * 1_000_003 + i)
        clicks += [imp.clicked for imp in s.impressions]
    return clicks


def test_no_position_bias_when_eta_is_zero():
    n = 100_000
    clicks = _click_counts(flat_universe(), UserModelConfig(eta=0.0), n, seed=1)
    table = np.vstack([clicks, n - clicks])
    assert sps.chi2_contingency(table)[1] > 0.01


def test_examination_ratio_for_eta_one():
    n = 100_000
    clicks = _click_counts(flat_universe(), UserModelConfig(eta=1.0), n, seed=2)
    # Closed form: P(click | k) = (1/k) * sigmoid(0), so CTR(1) / CTR(4) = 4.
    assert clicks[0] / clicks[3] == pytest.approx(4.0, rel=0.05)


def test_zero_booking_probability_never_books(default_universe):
    user = UserModelConfig(booking_prob=0.0)
    for s in simulate_log(default_universe, user, 2000, seed=5):
        assert all(imp.event != Event.BOOKED for imp in s.impressions)


def test_ranking_length_must_match_page():
    u = flat_universe()
    with pytest.raises(ConfigError):
        simulate_session(u, ["h000"], UserModelConfig(), seed=1)


def test_sessions_are_valid(default_universe):
    for s in simulate_log(default_universe, UserModelConfig(), 200, seed=5):
        assert validate_session(s) == []
        assert s.query_geo == default_universe.by_id[s.impressions[0].hotel_id].geo_id


def test_log_file_count_and_determinism(default_universe, tmp_path):
    user = UserModelConfig()
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_log(simulate_log(default_universe, user, 10, seed=3), a)
    write_log(simulate_log(default_universe, user, 10, seed=3), b)
    assert len(a.read_text().splitlines()) == 10
    assert a.read_bytes() == b.read_bytes()


def test_partial_log_removed_on_failure(default_universe, tmp_path):
    def broken():
        yield from simulate_log(default_universe, UserModelConfig(), 3, seed=1)
        raise OSError("device full")

    with pytest.raises(OSError):
        write_log(broken(), tmp_path / "log.jsonl")
    assert list(tmp_path.iterdir()) == []


def test_click_curve_matches_analytic_product(pbm_100k):
    stats, _, _, user = pbm_100k
    expected = user.examination() * stats.click_prob / stats.impressions
    observed = stats.clicks / stats.impressions
    ok = stats.impressions >= 500
    assert ok.all()
    np.testing.assert_allclose(observed[ok], expected[ok], rtol=0.05)


def test_pbm_examinations_are_independent(default_universe):
    trace = []
    for _ in simulate_log(default_universe, UserModelConfig(), 20_000, seed=8, exam_trace=trace):
        pass
    exam = np.array([e for _, e in trace], dtype=float)[:, 1:]
    corr = np.corrcoef(exam, rowvar=False)
    off = corr[~np.eye(len(corr), dtype=bool)]
    assert np.abs(off).max() < 4.5 / np.sqrt(len(exam))


def test_cascade_never_clicks_below_a_click(default_universe):
    user = UserModelConfig(model_kind="cascade")
    for s in simulate_log(default_universe, user, 2000, seed=6):
        assert sum(imp.clicked for imp in s.impressions) <= 1


def test_cascade_examines_until_first_click():
    u = np.full((4, 5), 0.99)
    u[1, 2] = 0.0
    events, examined = events_from_uniforms(u, np.full(5, 0.5), UserModelConfig(model_kind="cascade"))
    assert examined.tolist() == [True, True, True, False, False]
    assert events.tolist() == [0, 0, 1, 0, 0]


def test_ground_truth_sidecar(default_universe):
    gt = ground_truth(default_universe, UserModelConfig(eta=1.0))
    assert gt["prop_true"][:3] == pytest.approx([1.0, 0.5, 1 / 3])
    assert gt["universe"]["num_hotels"] == 5000
    json.dumps(gt)


@pytest.mark.parametrize("kw", [dict(model_kind="dbn"), dict(eta=-1), dict(booking_prob=1.5),
                                dict(click_sharpness=0)])
def test_user_config_validation(kw):
    with pytest.raises(ConfigError):
        UserModelConfig(**kw)
