import numpy as np
import pytest

from prerank.core import ActionType, unified_label
from prerank.dataset import (
    DailyIQP,
    EmptySplit,
    FeatureLeakage,
    ItemTable,
    MissingFeatures,
    StaticIQP,
    UserHistory,
    audit_temporal_hygiene,
    build_dataset,
    join_impressions,
    keep_negative,
)
from prerank.iqp import DAY, IQPBuilder


@pytest.fixture(scope="module")
def setup(small_data):
    items = ItemTable.from_records(small_data.items)
    start = small_data.config.start_time
    as_of = start + 3 * DAY
    b = IQPBuilder(user_contexts=small_data.users)
    b.build([e for e in small_data.events if e.timestamp <= as_of],
            [r for r in small_data.requests if r[0] <= as_of], as_of)
    return small_data, items, StaticIQP(b.signals()), as_of


def test_all_before_split_gives_empty_test(setup):
    data, items, iqp, as_of = setup
    train, test = build_dataset(data.events, data.requests, data.end_time + 1, 1.0, iqp, items, data.users,
                                min_time=as_of + 1)
    assert len(test) == 0 and len(train) > 0


def test_nothing_before_split_raises(setup):
    data, items, iqp, as_of = setup
    with pytest.raises(EmptySplit):
        build_dataset(data.events, data.requests, as_of + 1, 1.0, iqp, items, data.users, min_time=as_of + 1)


def test_partition_and_sample_match_reference(setup):
    data, items, iqp, as_of = setup
    split = data.config.start_time + 9 * DAY
    train, test = build_dataset(data.events, data.requests, split, 0.4, iqp, items, data.users, seed=11,
                                min_time=as_of + 1)
    # reference partitioner: group events by impression identity and apply the same keyed draw
    want_train = want_test = 0
    for imp, acts in join_impressions(data.events):
        if imp.timestamp <= as_of:
            continue
        label = unified_label(acts).value
        if imp.timestamp >= split:
            want_test += 1
        elif label or keep_negative(11, (imp.timestamp, imp.user_id, imp.session_id, imp.query.key_hash, imp.item),
                                    0.4):
            want_train += 1
    assert (len(train), len(test)) == (want_train, want_test)
    assert train.label.sum() == sum(
        1 for imp, acts in join_impressions(data.events) if as_of < imp.timestamp < split and unified_label(acts).value
    )


def test_full_rate_keeps_all_negatives(setup):
    data, items, iqp, as_of = setup
    split = data.config.start_time + 9 * DAY
    train, _ = build_dataset(data.events, data.requests, split, 1.0, iqp, items, data.users, min_time=as_of + 1)
    n_imp = sum(1 for e in data.events if e.action is ActionType.IMPRESSION and as_of < e.timestamp < split)
    assert len(train) == n_imp


def test_hygiene_audit_is_clean(setup):
    data, items, iqp, as_of = setup
    split = data.config.start_time + 9 * DAY
    train, test = build_dataset(data.events, data.requests, split, 0.5, iqp, items, data.users, min_time=as_of + 1)
    assert audit_temporal_hygiene(train, test, split) == {
        "train_at_or_after_split": 0, "test_before_split": 0, "iqp_not_before_example": 0}


def test_static_store_refuses_leaky_use(setup):
    data, items, iqp, as_of = setup
    with pytest.raises(FeatureLeakage):
        iqp.store_for(as_of)


def test_daily_store_is_sealed_before_each_example(small_data):
    start = small_data.config.start_time
    first = start + 3 * DAY
    daily = DailyIQP(IQPBuilder(user_contexts=small_data.users), small_data.events, small_data.requests, first)
    for ts in (first + 1, first + DAY, first + DAY + 1, first + 3 * DAY + 7):
        store = daily.store_for(ts)
        assert store.as_of < ts
        ref = IQPBuilder(user_contexts=small_data.users)
        ref.build([e for e in small_data.events if e.timestamp <= store.as_of],
                  [r for r in small_data.requests if r[0] <= store.as_of], store.as_of)
        assert ref.signals() == store


def test_history_strictly_before(small_data):
    items = ItemTable.from_records(small_data.items)
    hist = UserHistory(small_data.events, items)
    user = small_data.events[len(small_data.events) // 2].user_id
    ts = small_data.events[len(small_data.events) // 2].timestamp
    emb, acts, ages = hist.arrays(user, ts, 100)
    assert np.all(ages > 0)
    n_before = sum(1 for e in small_data.events if e.user_id == user and e.timestamp < ts
                   and e.action in (ActionType.SAVE, ActionType.LONG_CLICK, ActionType.CLICK, ActionType.DOWNLOAD,
                                    ActionType.SCREENSHOT))
    assert len(acts) == min(100, n_before)
    assert len(hist.arrays(user, ts, 2)[1]) == min(2, n_before)


def test_item_table_missing():
    t = ItemTable([5, 6], np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(MissingFeatures):
        t.features(7)
    with pytest.raises(ValueError):
        ItemTable([5, 5], np.zeros((2, 2)), np.zeros((2, 3)))


def test_keep_negative_rate():
    kept = sum(keep_negative(0, (k,), 0.3) for k in range(20000))
    assert abs(kept / 20000 - 0.3) < 0.02
    assert keep_negative(0, (1,), 1.0)
