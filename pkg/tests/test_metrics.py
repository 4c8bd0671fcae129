import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prerank.core import FULFILLING_ACTIONS, ActionType, EngagementEvent, normalize_query
from prerank.metrics import (
    SINGLE,
    CorpusStats,
    EmptyInput,
    LengthMismatch,
    SearchFeed,
    SessionLog,
    bm25_proximity,
    f1s,
    hits_at_k,
    mean_hits_at_k,
    segment_queries,
    sessions_from_events,
    sifr,
)


def brute_hits(scores, labels, k, ids):
    """Rank by full sort: (score desc, id asc); 1 if any positive sits at rank <= k."""
    if not any(labels):
        return None
    ranked = sorted(range(len(scores)), key=lambda j: (-scores[j], ids[j]))
    return int(any(labels[j] for j in ranked[:k]))


def test_hits_examples():
    assert hits_at_k([0.9, 0.8, 0.7], [0, 0, 1], 3) == 1
    assert hits_at_k([0.9, 0.8, 0.7, 0.6], [0, 0, 0, 1], 3) == 0
    assert hits_at_k([0.1, 0.2], [0, 0]) is None
    with pytest.raises(LengthMismatch):
        hits_at_k([0.1, 0.2], [1])


def test_hits_ties_by_item_id():
    # equal scores: the smaller item id ranks first
    assert hits_at_k([1.0, 1.0], [1, 0], 1, item_ids=[7, 3]) == 0
    assert hits_at_k([1.0, 1.0], [1, 0], 1, item_ids=[2, 3]) == 1


def _random_request(rng):
    n = int(rng.integers(1, 15))
    scores = rng.integers(0, 5, n).astype(float)  # force ties
    labels = (rng.random(n) < 0.2).astype(int)
    ids = rng.permutation(1000)[:n]
    return scores, labels, ids


def test_hits_matches_full_sort_oracle(rng):
    reqs = [_random_request(rng) for _ in range(1000)]
    for s, y, ids in reqs:
        for k in (1, 3, 5):
            assert hits_at_k(s, y, k, ids) == brute_hits(list(s), list(y), k, list(ids))
    summary = mean_hits_at_k(reqs, 3)
    vals = [brute_hits(list(s), list(y), 3, list(ids)) for s, y, ids in reqs]
    kept = [v for v in vals if v is not None]
    assert summary.mean == sum(kept) / len(kept)
    assert summary.skipped == len(vals) - len(kept)


@settings(max_examples=60)
@given(seed=st.integers(0, 100_000))
def test_hits_monotone_in_k_and_rank_invariant(seed):
    rng = np.random.default_rng(seed)
    s, y, ids = _random_request(rng)
    vals = [hits_at_k(s, y, k, ids) for k in range(1, len(s) + 2)]
    if vals[0] is None:
        return
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert hits_at_k(np.exp(s) * 3 + 1, y, 3, ids) == vals[2]


def _session_scan(sessions):
    fulfilled = first = 0
    for s in sessions:
        flags = []
        for feed in s.searches:
            flag = False
            for _, acts in feed.items:
                for a in acts:
                    if a in FULFILLING_ACTIONS:
                        flag = True
            flags.append(flag)
        fulfilled += any(flags)
        first += bool(flags) and flags[0]
    return fulfilled / len(sessions), first / len(sessions)


def _random_sessions(rng, n):
    actions = list(ActionType)
    q = normalize_query("x")
    out = []
    for sid in range(n):
        searches = []
        for t in range(int(rng.integers(1, 4))):
            items = [(int(i), frozenset(actions[int(a)] for a in rng.integers(0, len(actions), rng.integers(0, 2))))
                     for i in range(int(rng.integers(1, 4)))]
            searches.append(SearchFeed(q, t, items))
        out.append(SessionLog(sid, searches))
    return out


def test_sessions_examples():
    q = normalize_query("x")
    s1 = SessionLog(1, [SearchFeed(q, 1, [(5, frozenset({ActionType.IMPRESSION}))]),
                        SearchFeed(q, 2, [(5, frozenset({ActionType.SAVE}))])])
    s2 = SessionLog(2, [SearchFeed(q, 1, [(5, frozenset({ActionType.CLICK}))])])
    assert sifr([s1, s2]) == 0.5 and f1s([s1, s2]) == 0.0
    s3 = SessionLog(3, [SearchFeed(q, 1, [(5, frozenset({ActionType.DOWNLOAD}))])])
    assert sifr([s3, s3]) == 1.0 and f1s([s3, s3]) == 1.0
    with pytest.raises(EmptyInput):
        sifr([])


def test_sessions_match_scan_oracle(rng):
    for _ in range(1000):
        sessions = _random_sessions(rng, int(rng.integers(1, 8)))
        want = _session_scan(sessions)
        assert (sifr(sessions), f1s(sessions)) == want
        assert sifr(sessions) >= f1s(sessions)


def test_sessions_from_events_orders_searches():
    a, b = normalize_query("a"), normalize_query("b")
    ev = [EngagementEvent(20, 1, b, 9, ActionType.SAVE, session_id=4),
          EngagementEvent(10, 1, a, 8, ActionType.IMPRESSION, session_id=4)]
    (s,) = sessions_from_events(ev)
    assert [f.query for f in s.searches] == [a, b]
    assert sifr([s]) == 1.0 and f1s([s]) == 0.0


def test_sifr_at_least_f1s_on_generated(small_data):
    assert sifr(small_data.sessions) >= f1s(small_data.sessions)


def _segment_oracle(freq):
    rest = sorted(((f, q.key_hash, q) for q, f in freq.items() if f > 1), key=lambda x: (-x[0], x[1]))
    total = sum(f for f, _, _ in rest)
    out = {q: SINGLE for q, f in freq.items() if f == 1}
    cum = 0
    for f, _, q in rest:
        share = cum / total
        out[q] = "HEAD" if share < 0.5 else ("TORSO" if share < 0.8 else "TAIL")
        cum += f
    return out


def test_segments_examples():
    a, b = normalize_query("a"), normalize_query("b")
    assert segment_queries({a: 1}) == {a: SINGLE}
    assert segment_queries({a: 50}) == {a: "HEAD"}
    assert segment_queries({a: 50, b: 1})[b] == SINGLE


def test_segments_zipf_match_cumulative_oracle(rng):
    freq = {normalize_query(f"q {k}"): int(max(1, round(5000 / (k + 1)))) for k in range(1000)}
    seg = segment_queries(freq)
    assert seg == _segment_oracle(freq)
    assert set(seg) == set(freq)
    assert all((seg[q] == SINGLE) == (f == 1) for q, f in freq.items())


def test_bm25_hand_value():
    stats = CorpusStats.from_texts(["red dress", "blue shoes green", "tall lamp"])
    s = bm25_proximity(normalize_query("red"), "red dress", stats)
    idf = math.log(1 + (3 - 1 + 0.5) / (1 + 0.5))
    avg = 7 / 3
    want = idf * 1 * 2.2 / (1 + 1.2 * (1 - 0.75 + 0.75 * 2 / avg))
    assert s == pytest.approx(want, rel=1e-12)
    assert bm25_proximity(normalize_query("purple"), "red dress", stats) == 0.0


def test_bm25_proximity_bonus():
    stats = CorpusStats.from_texts(["red dress long", "red long dress", "other words"])
    q = normalize_query("red dress")
    assert bm25_proximity(q, "red dress long", stats) >= bm25_proximity(q, "red long dress", stats)


@given(q=st.lists(st.sampled_from("abcdef"), min_size=1, max_size=3),
       d=st.lists(st.sampled_from("abcdefgh"), min_size=0, max_size=8))
def test_bm25_zero_iff_no_overlap(q, d):
    stats = CorpusStats.from_texts([" ".join(d), "a b c", "g h"])
    s = bm25_proximity(normalize_query(" ".join(q)), " ".join(d), stats)
    assert (s == 0) == (not set(q) & set(d))
