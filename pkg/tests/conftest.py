import numpy as np
import pytest

from prerank.core import ActionType, EngagementEvent, SearchRequest, normalize_query
from prerank.iqp import DAY
from prerank.synthetic import SyntheticConfig, generate_synthetic_logs

AS_OF = 19700 * DAY


@pytest.fixture(scope="session")
def small_data():
    cfg = SyntheticConfig(n_items=200, n_queries=150, n_users=60, days=12, requests_per_day=120, seed=3)
    return generate_synthetic_logs(cfg)


def random_log(rng, n_events, n_requests, days, n_items=30, n_queries=12, n_users=20, as_of=AS_OF):
    """Random events/requests in the ``days`` days ending at ``as_of`` (inclusive)."""
    queries = [normalize_query(f"q{k} term") for k in range(n_queries)]
    actions = list(ActionType)
    lo = as_of - days * DAY + 1
    events = [
        EngagementEvent(
            int(rng.integers(lo, as_of + 1)),
            int(rng.integers(1, n_users + 1)),
            queries[int(rng.integers(0, n_queries))],
            int(rng.integers(1, n_items + 1)),
            actions[int(rng.integers(0, len(actions)))],
        )
        for _ in range(n_events)
    ]
    requests = [
        SearchRequest(int(rng.integers(lo, as_of + 1)), queries[int(rng.integers(0, n_queries))],
                      int(rng.integers(1, n_users + 1)))
        for _ in range(n_requests)
    ]
    return events, requests


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = dict(embed_dim=3, seq_max_len=4, item_embed_dim=2, action_embed_dim=1, time_embed_dim=1, countries=("US", "FR"),
            languages=("en", "fr"), n_age_buckets=2, n_gender_buckets=2, context_embed_dim=1, token_buckets=5,
            token_dim=2, item_id_buckets=3, item_id_dim=2, content_dim=2, masknet_blocks=2, mask_hidden_dim=2,
            block_dim=2, query_hidden=(3,), item_hidden=(3,), iqp_features=7)


def tiny_batch(cfg, seed=0, dtype=None):
    """Three hand-built examples for a ``TINY``-shaped config."""
    import torch

    from prerank.core import Device, RequestContext
    from prerank.dataset import TrainBatch
    from prerank.model import ItemFeatures, pack_items, pack_queries

    dtype = dtype or torch.float64
    rng = np.random.default_rng(seed)
    seqs = [(rng.normal(size=(n, cfg.item_embed_dim)), rng.integers(0, 8, size=n), rng.uniform(0, 1e6, size=n))
            for n in (2, 0, 3)]
    qb = pack_queries(cfg, [normalize_query(t) for t in ("red dress", "blue", "a b c")],
                      [RequestContext(1, "US"), RequestContext(2, "FR", Device.TABLET, "fr", 1, 1), RequestContext(3, "JP")],
                      seqs, dtype)
    ib = pack_items(cfg, [ItemFeatures(i, rng.random(cfg.n_item_rates), rng.normal(size=cfg.content_dim))
                          for i in (11, 12, 13)], dtype)
    return TrainBatch(qb, ib, torch.tensor(rng.random((3, cfg.iqp_features)), dtype=dtype),
                      torch.tensor([1.0, 0.0, 1.0], dtype=dtype), torch.tensor([2.0, 1.0, 1.5], dtype=dtype),
                      np.array([11, 12, 13]))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
