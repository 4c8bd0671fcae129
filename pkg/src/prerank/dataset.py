"""Training/test example construction from engagement logs.

Examples are stored column-wise (``ExampleSet``); user sequences are sliced
from per-user engagement histories at batch time instead of being copied
into every example.
"""

from __future__ import annotations

import bisect
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Iterator, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import torch

from .core import (
    DEFAULT_ACTION_SET,
    ActionType,
    EngagementEvent,
    PrerankError,
    QueryKey,
    RequestContext,
    SearchRequest,
    stable_hash64,
    unified_label,
)
from .iqp import DAY, IQPBuilder, SignalStore, SmoothingConfig, day_of
from .model import (
    ItemBatch,
    ItemFeatures,
    ModelConfig,
    QueryBatch,
    SequenceEntry,
    item_bucket,
    pack_queries,
)


class EmptySplit(PrerankError, ValueError):
    code = "EMPTY_SPLIT"


class FeatureLeakage(PrerankError, ValueError):
    code = "FEATURE_LEAKAGE"


class MissingFeatures(PrerankError, KeyError):
    code = "MISSING_FEATURES"


# ---------------------------------------------------------------------------
# item features


class ItemTable:
    """Item features keyed by id: engagement-rate floats and a content embedding."""

    def __init__(self, ids, rates, content, texts: Optional[Sequence[str]] = None):
        self.ids = np.asarray(ids, dtype=np.uint64)
        self.rates = np.asarray(rates, dtype=np.float64).reshape(len(self.ids), -1)
        self.content = np.asarray(content, dtype=np.float64).reshape(len(self.ids), -1)
        self.texts = list(texts) if texts is not None else None
        self._row = {int(i): r for r, i in enumerate(self.ids)}
        if len(self._row) != len(self.ids):
            raise ValueError("duplicate item ids in item table")

    @classmethod
    def from_records(cls, records) -> "ItemTable":
        return cls(
            [r.item_id for r in records],
            np.array([r.rates for r in records]),
            np.array([r.content for r in records]),
            [r.text for r in records],
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: int) -> bool:
        return int(item_id) in self._row

    def row(self, item_id: int) -> int:
        try:
            return self._row[int(item_id)]
        except KeyError:
            raise MissingFeatures(f"no features for item {item_id}") from None

    def features(self, item_id: int) -> ItemFeatures:
        r = self.row(item_id)
        return ItemFeatures(int(self.ids[r]), self.rates[r], self.content[r])

    def all_features(self) -> Iterator[ItemFeatures]:
        for r in range(len(self.ids)):
            yield ItemFeatures(int(self.ids[r]), self.rates[r], self.content[r])

    def item_batch(self, rows, cfg: ModelConfig, dtype=torch.float32) -> ItemBatch:
        rows = np.asarray(rows, dtype=np.int64)
        buckets = np.array([item_bucket(int(i), cfg.item_id_buckets) for i in self.ids[rows]], dtype=np.int64)
        return ItemBatch(
            torch.from_numpy(buckets),
            torch.from_numpy(self.rates[rows]).to(dtype),
            torch.from_numpy(self.content[rows]).to(dtype),
        )


# ---------------------------------------------------------------------------
# user engagement histories


class UserHistory:
    """Per-user time-ordered engagements used to build sequence features."""

    def __init__(self, events: Iterable[EngagementEvent], items: ItemTable,
                 actions: Iterable[ActionType] = DEFAULT_ACTION_SET):
        keep = frozenset(actions)
        rows: dict = defaultdict(list)
        for ev in events:
            if ev.action in keep and ev.item in items:
                rows[ev.user_id].append((ev.timestamp, items.row(ev.item), ev.action.index))
        self.items = items
        self._hist = {}
        for user, lst in rows.items():
            lst.sort()
            arr = np.array(lst, dtype=np.int64)
            self._hist[user] = (arr[:, 0], arr[:, 1], arr[:, 2])

    def arrays(self, user: int, before: int, max_len: int) -> tuple:
        """``(embeddings, action indices, ages)`` of the last ``max_len`` engagements strictly before ``before``."""
        h = self._hist.get(user)
        dim = self.items.content.shape[1]
        if h is None:
            return np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0)
        ts, rows, acts = h
        end = int(np.searchsorted(ts, before, side="left"))
        start = max(0, end - max_len)
        return self.items.content[rows[start:end]], acts[start:end], (before - ts[start:end]).astype(np.float64)

    def entries(self, user: int, before: int, max_len: int) -> list:
        emb, acts, ages = self.arrays(user, before, max_len)
        all_actions = list(ActionType)
        return [SequenceEntry(e.astype(np.float32), all_actions[a], float(g)) for e, a, g in zip(emb, acts, ages)]


# ---------------------------------------------------------------------------
# IQP feature providers


class StaticIQP:
    """One sealed store for every timestamp; rejects timestamps it would leak into."""

    def __init__(self, store: SignalStore):
        self.store = store

    def store_for(self, ts: int) -> SignalStore:
        if self.store.as_of >= ts:
            raise FeatureLeakage(f"store sealed at {self.store.as_of} used for example at {ts}")
        return self.store


class DailyIQP:
    """Stores re-sealed every ``refresh_days`` days by sliding all windows forward.

    ``store_for`` must be called with nondecreasing timestamps.
    """

    def __init__(
        self,
        builder: IQPBuilder,
        events: Sequence[EngagementEvent],
        requests: Sequence[SearchRequest],
        first_as_of: int,
        smoothing: SmoothingConfig = SmoothingConfig(),
        k: int = 100,
        refresh_days: int = 1,
    ):
        self.builder = builder
        self.smoothing = smoothing
        self.k = k
        self.refresh_days = refresh_days
        self.first_as_of = first_as_of
        self._ev: dict = defaultdict(list)
        self._rq: dict = defaultdict(list)
        first_day = first_as_of // DAY
        initial_ev, initial_rq = [], []
        for e in events:
            d = day_of(e.timestamp)
            (initial_ev.append(e) if d < first_day else self._ev[d].append(e))
        for r in requests:
            d = day_of(r[0])
            (initial_rq.append(r) if d < first_day else self._rq[d].append(r))
        builder.build(initial_ev, initial_rq, first_as_of)
        self._store = builder.signals(smoothing, k)

    def _target(self, ts: int) -> int:
        latest = ((ts - 1) // DAY) * DAY
        steps = (latest - self.first_as_of) // (DAY * self.refresh_days)
        return self.first_as_of + max(0, steps) * DAY * self.refresh_days

    def store_for(self, ts: int) -> SignalStore:
        target = self._target(ts)
        if target < self.builder.as_of:
            raise ValueError("store_for called with decreasing timestamps")
        if target > self.builder.as_of:
            while self.builder.as_of < target:
                d = self.builder.as_of // DAY
                self.builder.advance(self._ev.get(d, ()), self._rq.get(d, ()))
            self._store = self.builder.signals(self.smoothing, self.k)
        if self._store.as_of >= ts:
            raise FeatureLeakage(f"no store sealed before {ts}")
        return self._store


# ---------------------------------------------------------------------------
# examples


@dataclass
class TrainExample:
    query: QueryKey
    context: RequestContext
    sequence: list
    item: ItemFeatures
    iqp: np.ndarray
    label: tuple
    timestamp: int
    iqp_as_of: int
    actions: frozenset


class TrainBatch(NamedTuple):
    query: Optional[QueryBatch]
    item: Optional[ItemBatch]
    iqp: torch.Tensor
    labels: torch.Tensor
    weights: torch.Tensor
    item_ids: np.ndarray


_ACTIONS = list(ActionType)


def action_mask(actions: Iterable[ActionType]) -> int:
    m = 0
    for a in actions:
        m |= 1 << a.index
    return m


def keep_negative(seed: int, key: tuple, rate: float) -> bool:
    """Deterministic Bernoulli(rate) draw keyed on the example identity."""
    if rate >= 1.0:
        return True
    u = stable_hash64(f"{seed}|" + "|".join(map(str, key))) / 2.0**64
    return u < rate


class ExampleSet:
    COLUMNS = ("ts", "user", "session", "query_idx", "item_row", "label", "weight", "actions", "iqp_as_of", "group")

    def __init__(self, columns: Mapping[str, np.ndarray], iqp: np.ndarray, queries: Sequence[QueryKey],
                 contexts: Mapping[int, RequestContext], items: ItemTable, history: UserHistory):
        for c in self.COLUMNS:
            setattr(self, c, np.asarray(columns[c]))
        self.iqp = np.asarray(iqp, dtype=np.float64)
        self.queries = list(queries)
        self.contexts = contexts
        self.items = items
        self.history = history

    def __len__(self) -> int:
        return len(self.ts)

    def subset(self, index) -> "ExampleSet":
        cols = {c: getattr(self, c)[index] for c in self.COLUMNS}
        return ExampleSet(cols, self.iqp[index], self.queries, self.contexts, self.items, self.history)

    def context(self, user: int) -> RequestContext:
        return self.contexts.get(int(user)) or RequestContext(int(user))

    def item_ids(self, index=slice(None)) -> np.ndarray:
        return self.items.ids[self.item_row[index]]

    def batch(self, index, cfg: ModelConfig, dtype=torch.float32, iqp_features: Optional[int] = None) -> TrainBatch:
        index = np.asarray(index)
        q = i = None
        if cfg.use_towers:
            seqs = [self.history.arrays(int(self.user[j]), int(self.ts[j]), cfg.seq_max_len) for j in index]
            q = pack_queries(
                cfg,
                [self.queries[j] for j in self.query_idx[index]],
                [self.context(u) for u in self.user[index]],
                seqs,
                dtype,
            )
            i = self.items.item_batch(self.item_row[index], cfg, dtype)
        f = cfg.iqp_features if iqp_features is None else iqp_features
        return TrainBatch(
            q,
            i,
            torch.from_numpy(self.iqp[index][:, :f].copy()).to(dtype),
            torch.from_numpy(self.label[index].astype(np.float64)).to(dtype),
            torch.from_numpy(self.weight[index].astype(np.float64)).to(dtype),
            self.item_ids(index),
        )

    def example(self, j: int, seq_max_len: int = 100) -> TrainExample:
        user = int(self.user[j])
        acts = frozenset(a for a in _ACTIONS if int(self.actions[j]) >> a.index & 1)
        return TrainExample(
            query=self.queries[int(self.query_idx[j])],
            context=self.context(user),
            sequence=self.history.entries(user, int(self.ts[j]), seq_max_len),
            item=self.items.features(int(self.item_ids(j))),
            iqp=self.iqp[j].copy(),
            label=(int(self.label[j]), float(self.weight[j])),
            timestamp=int(self.ts[j]),
            iqp_as_of=int(self.iqp_as_of[j]),
            actions=acts,
        )

    def examples(self, seq_max_len: int = 100) -> Iterator[TrainExample]:
        for j in range(len(self)):
            yield self.example(j, seq_max_len)

    def request_groups(self) -> list:
        """Example indices per search request, in request order."""
        if not len(self):
            return []
        order = np.argsort(self.group, kind="stable")
        g = self.group[order]
        cuts = np.flatnonzero(np.diff(g)) + 1
        return np.split(order, cuts)


def audit_temporal_hygiene(train: ExampleSet, test: ExampleSet, split_time: int) -> dict:
    """Counts of hygiene violations; all zero for a clean dataset."""
    return {
        "train_at_or_after_split": int(np.sum(train.ts >= split_time)),
        "test_before_split": int(np.sum(test.ts < split_time)),
        "iqp_not_before_example": int(np.sum(train.iqp_as_of >= train.ts) + np.sum(test.iqp_as_of >= test.ts)),
    }


def join_impressions(events: Iterable[EngagementEvent]) -> list:
    """Attach each non-impression event to the latest impression of the same
    (user, session, query, item) at or before it.

    Returns ``[(impression_event, [events...]), ...]`` sorted by example identity.
    """
    events = list(events)
    imps: dict = defaultdict(list)
    for ev in events:
        if ev.action is ActionType.IMPRESSION:
            imps[(ev.user_id, ev.session_id, ev.query, ev.item)].append(ev)
    for lst in imps.values():
        lst.sort(key=lambda e: e.timestamp)
    attached: dict = defaultdict(list)
    for ev in events:
        if ev.action is ActionType.IMPRESSION:
            continue
        lst = imps.get((ev.user_id, ev.session_id, ev.query, ev.item))
        if not lst:
            continue
        pos = bisect.bisect_right([e.timestamp for e in lst], ev.timestamp) - 1
        if pos >= 0:
            attached[id(lst[pos])].append(ev)
    out = [(imp, attached.get(id(imp), [])) for lst in imps.values() for imp in lst]
    out.sort(key=lambda x: (x[0].timestamp, x[0].user_id, x[0].session_id, x[0].query.key_hash, x[0].item))
    return out


def build_dataset(
    events: Sequence[EngagementEvent],
    requests: Sequence[SearchRequest],
    split_time: int,
    downsample_rate: float,
    iqp,
    items: ItemTable,
    contexts: Mapping[int, RequestContext],
    seed: int = 0,
    min_time: Optional[int] = None,
    label_actions: Iterable[ActionType] = DEFAULT_ACTION_SET,
    weight_table: Optional[Mapping[ActionType, float]] = None,
    history: Optional[UserHistory] = None,
) -> tuple:
    """Temporal split of impressions into (train, test) ExampleSets.

    Impressions before ``split_time`` (and at/after ``min_time``) train, the
    rest test.  Training negatives are kept with probability
    ``downsample_rate``; test sets are never downsampled.  ``iqp`` provides
    ``store_for(ts)`` returning a store sealed before ``ts``.
    """
    if not 0 < downsample_rate <= 1:
        raise ValueError("downsample_rate must be in (0, 1]")
    label_actions = frozenset(label_actions)
    history = history or UserHistory(events, items)
    joined = join_impressions(events)
    q_index: dict = {}
    queries: list = []
    rows = {"train": defaultdict(list), "test": defaultdict(list)}
    iqps = {"train": [], "test": []}
    groups: dict = {}
    for imp, acts in joined:
        if imp.item not in items:
            continue
        ts = imp.timestamp
        if min_time is not None and ts < min_time:
            continue
        split = "train" if ts < split_time else "test"
        label = unified_label(acts, label_actions, weight_table)
        key = (ts, imp.user_id, imp.session_id, imp.query.key_hash, imp.item)
        if split == "train" and label.value == 0 and not keep_negative(seed, key, downsample_rate):
            continue
        store = iqp.store_for(ts)
        if imp.query not in q_index:
            q_index[imp.query] = len(queries)
            queries.append(imp.query)
        ctx = contexts.get(imp.user_id) or RequestContext(imp.user_id)
        group = groups.setdefault(key[:4], len(groups))
        r = rows[split]
        r["ts"].append(ts)
        r["user"].append(imp.user_id)
        r["session"].append(imp.session_id)
        r["query_idx"].append(q_index[imp.query])
        r["item_row"].append(items.row(imp.item))
        r["label"].append(label.value)
        r["weight"].append(label.weight)
        r["actions"].append(action_mask(a.action for a in acts))
        r["iqp_as_of"].append(store.as_of)
        r["group"].append(group)
        iqps[split].append(store.lookup(imp.item, imp.query, ctx))

    def make(split: str) -> ExampleSet:
        r = rows[split]
        cols = {c: np.array(r[c], dtype=np.float64 if c == "weight" else np.int64) for c in ExampleSet.COLUMNS}
        width = max((len(v) for v in iqps[split]), default=0)
        iq = np.array(iqps[split]).reshape(len(iqps[split]), width)
        return ExampleSet(cols, iq, queries, contexts, items, history)

    train, test = make("train"), make("test")
    if not len(train):
        raise EmptySplit("no training examples before split_time")
    return train, test
