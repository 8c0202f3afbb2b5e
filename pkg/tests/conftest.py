import numpy as np
import pytest

from propsample.core import Hotel
from propsample.simclick import HotelUniverse, UserModelConfig, gen_universe, simulate_log


def flat_universe(quality=0.5, hotels=30, dim=3, geo="g0"):
    """One geo whose hotels all share the same latent quality."""
    hs = [Hotel(f"h{i:03d}", geo, quality, tuple(float(i + j) for j in range(dim)), 10.0)
          for i in range(hotels)]
    return HotelUniverse({geo: hs}, dim, logging_policy_noise=0.0, logging_deal_weight=0.0)


@pytest.fixture(scope="session")
def default_universe():
    return gen_universe(50, 100, 6, seed=7)


class PositionStats:
    """Streaming per-position aggregates of a simulated log."""

    def __init__(self, page_size=30):
        self.impressions = np.zeros(page_size)
        self.clicks = np.zeros(page_size)
        self.click_prob = np.zeros(page_size)
        self.sessions = 0


@pytest.fixture(scope="session")
def pbm_100k(default_universe):
    """100k pbm sessions (eta=1) on the default universe, aggregated once."""
    from propsample.propensity import curves

    user = UserModelConfig(eta=1.0)
    stats = PositionStats()
    by_id = default_universe.by_id

    def tap(log):
        for s in log:
            stats.sessions += 1
            for imp in s.impressions:
                i = imp.position - 1
                stats.impressions[i] += 1
                stats.clicks[i] += imp.clicked
                stats.click_prob[i] += user.click_given_exam(by_id[imp.hotel_id].latent_quality)
            yield s

    click, relevance = curves(tap(simulate_log(default_universe, user, 100_000, seed=2024)),
                              default_universe.bookings())
    return stats, click, relevance, user
