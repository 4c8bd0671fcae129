"""Item-query engagement priors ("IQP") built from engagement logs.

Counts are bucketed into right-closed days: day ``k`` holds timestamps in
``(k * DAY, (k + 1) * DAY]``.  A store with ``as_of`` on a day boundary and a
window of ``W`` days therefore covers ``(as_of - W * DAY, as_of]``.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence
from urllib.parse import quote, unquote

import numpy as np

from .core import (
    DEFAULT_ACTION_SET,
    ActionType,
    EngagementEvent,
    ItemId,
    PrerankError,
    QueryKey,
    RequestContext,
    SearchRequest,
)

DAY = 86400

PairKey = tuple  # (ItemId, QueryKey)


class EventAfterAsOf(PrerankError, ValueError):
    code = "EVENT_AFTER_AS_OF"


class NonAdjacentDelta(PrerankError, ValueError):
    code = "NON_ADJACENT_DELTA"


class WindowMismatch(PrerankError, ValueError):
    code = "WINDOW_MISMATCH"


class StoreFormatError(PrerankError, ValueError):
    code = "BAD_STORE"


@dataclass(frozen=True)
class WindowSpec:
    name: str
    length_days: int

    def __post_init__(self):
        if self.length_days <= 0:
            raise ValueError("window length must be positive")


DEFAULT_WINDOWS = (
    WindowSpec("7d", 7),
    WindowSpec("90d", 90),
    WindowSpec("1y", 365),
    WindowSpec("2y", 730),
)


def day_of(ts: int) -> int:
    return (ts - 1) // DAY


def check_as_of(as_of: int) -> int:
    if as_of % DAY:
        raise ValueError(f"as_of must fall on a day boundary, got {as_of}")
    return as_of


@dataclass
class DayShard:
    day: int
    pair_counts: dict = field(default_factory=dict)
    query_counts: dict = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.pair_counts and not self.query_counts


@dataclass
class CountStore:
    window: WindowSpec
    as_of: int
    pair_counts: dict
    query_counts: dict
    daily_shards: list

    @property
    def first_day(self) -> int:
        return self.as_of // DAY - self.window.length_days

    def counts_equal(self, other: "CountStore") -> bool:
        return (
            self.window == other.window
            and self.as_of == other.as_of
            and self.pair_counts == other.pair_counts
            and self.query_counts == other.query_counts
        )

    def check_invariants(self) -> None:
        days = [s.day for s in self.daily_shards]
        expected = list(range(self.first_day, self.first_day + self.window.length_days))
        assert days == expected, "shards must cover exactly the window"
        pairs: dict = defaultdict(int)
        queries: dict = defaultdict(int)
        for shard in self.daily_shards:
            for k, v in shard.pair_counts.items():
                pairs[k] += v
            for k, v in shard.query_counts.items():
                queries[k] += v
        assert dict(pairs) == self.pair_counts
        assert dict(queries) == self.query_counts
        assert all(v > 0 for v in self.pair_counts.values())
        assert all(v > 0 for v in self.query_counts.values())


def _empty_shards(window: WindowSpec, as_of: int) -> list:
    first = as_of // DAY - window.length_days
    return [DayShard(first + i) for i in range(window.length_days)]


def _sum_shards(shards: Sequence[DayShard]) -> tuple[dict, dict]:
    pairs: dict = defaultdict(int)
    queries: dict = defaultdict(int)
    for shard in shards:
        for k, v in shard.pair_counts.items():
            pairs[k] += v
        for k, v in shard.query_counts.items():
            queries[k] += v
    return dict(pairs), dict(queries)


def accumulate_counts(
    events: Iterable[EngagementEvent],
    requests: Iterable[SearchRequest],
    window: WindowSpec,
    engagement_actions: Iterable[ActionType] = DEFAULT_ACTION_SET,
    as_of: int = 0,
) -> CountStore:
    """Count pair engagements and query requests inside the window ending at ``as_of``."""
    check_as_of(as_of)
    actions = frozenset(engagement_actions)
    shards = _empty_shards(window, as_of)
    first = shards[0].day
    for ev in events:
        if ev.timestamp > as_of:
            raise EventAfterAsOf(f"event at {ev.timestamp} is after as_of {as_of}")
        if ev.action not in actions:
            continue
        offset = day_of(ev.timestamp) - first
        if offset < 0:
            continue
        counts = shards[offset].pair_counts
        key = (ev.item, ev.query)
        counts[key] = counts.get(key, 0) + 1
    for req in requests:
        ts, query = req[0], req[1]
        if ts > as_of:
            raise EventAfterAsOf(f"request at {ts} is after as_of {as_of}")
        offset = day_of(ts) - first
        if offset < 0:
            continue
        counts = shards[offset].query_counts
        counts[query] = counts.get(query, 0) + 1
    pairs, queries = _sum_shards(shards)
    return CountStore(window, as_of, pairs, queries, shards)


def day_delta(
    events: Iterable[EngagementEvent],
    requests: Iterable[SearchRequest],
    window: WindowSpec,
    engagement_actions: Iterable[ActionType] = DEFAULT_ACTION_SET,
    day_end: int = 0,
) -> CountStore:
    """A store holding only the day ending at ``day_end``; records from other days are dropped."""
    check_as_of(day_end)
    day = day_end // DAY - 1
    return accumulate_counts(
        (e for e in events if day_of(e.timestamp) == day),
        (r for r in requests if day_of(r[0]) == day),
        window,
        engagement_actions,
        day_end,
    )


def _add_into(target: dict, source: Mapping, sign: int) -> None:
    for k, v in source.items():
        n = target.get(k, 0) + sign * v
        if n:
            target[k] = n
        else:
            del target[k]


def merge_counts(base: CountStore, delta_day: CountStore) -> CountStore:
    """Slide ``base`` forward by one day, adding ``delta_day`` and expiring the oldest shard."""
    if base.window != delta_day.window:
        raise WindowMismatch(f"{base.window} != {delta_day.window}")
    if delta_day.as_of != base.as_of + DAY:
        raise NonAdjacentDelta(f"delta as_of {delta_day.as_of} is not one day after {base.as_of}")
    if any(not s.is_empty() for s in delta_day.daily_shards[:-1]):
        raise NonAdjacentDelta("delta covers more than one day")
    new_shard = delta_day.daily_shards[-1]
    expired = base.daily_shards[0]
    pairs = dict(base.pair_counts)
    queries = dict(base.query_counts)
    _add_into(pairs, new_shard.pair_counts, 1)
    _add_into(queries, new_shard.query_counts, 1)
    _add_into(pairs, expired.pair_counts, -1)
    _add_into(queries, expired.query_counts, -1)
    shards = list(base.daily_shards[1:]) + [new_shard]
    return CountStore(base.window, delta_day.as_of, pairs, queries, shards)


def conditioned_counts(
    events: Iterable[EngagementEvent],
    requests: Iterable[SearchRequest],
    window: WindowSpec,
    context_extractor: Callable[[object], str],
    engagement_actions: Iterable[ActionType] = DEFAULT_ACTION_SET,
    as_of: int = 0,
) -> dict:
    """One CountStore per context key, each restricted to records carrying that key."""
    by_key_events: dict = defaultdict(list)
    by_key_requests: dict = defaultdict(list)
    for ev in events:
        by_key_events[context_extractor(ev)].append(ev)
    for req in requests:
        by_key_requests[context_extractor(req)].append(req)
    keys = sorted(set(by_key_events) | set(by_key_requests))
    return {
        key: accumulate_counts(by_key_events[key], by_key_requests[key], window, engagement_actions, as_of)
        for key in keys
    }


# ---------------------------------------------------------------------------
# scores


@dataclass(frozen=True)
class SmoothingConfig:
    prior_engaged: float = 1.0
    prior_requests: float = 20.0
    min_query_count: int = 5

    def __post_init__(self):
        if self.prior_engaged < 0 or self.prior_requests < 0 or self.min_query_count < 0:
            raise ValueError("smoothing parameters must be nonnegative")
        if self.prior_engaged > 0 and self.prior_requests < self.prior_engaged:
            raise ValueError("prior_requests must be >= prior_engaged when prior_engaged > 0")


def compute_iqp(counts: CountStore, smoothing: SmoothingConfig = SmoothingConfig()) -> dict:
    """Smoothed engagement rate (pair count + prior_engaged) / (query count + prior_requests) per engaged pair."""
    out = {}
    prior_engaged, prior_requests, floor = smoothing.prior_engaged, smoothing.prior_requests, smoothing.min_query_count
    qc = counts.query_counts
    for (item, query), c in counts.pair_counts.items():
        n = qc.get(query, 0)
        if c <= 0 or n < floor:
            continue
        denom = n + prior_requests
        if denom <= 0:
            continue
        out[(item, query)] = min(1.0, (c + prior_engaged) / denom)
    return out


def topk_retain(scores: Mapping, k: int, pair_counts: Optional[Mapping] = None) -> dict:
    """Keep the ``k`` best queries per item.

    Ties on score go to the larger pair count, then the smaller query hash.
    Returns ``{item: [(QueryKey, score), ...]}`` sorted best first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    counts = pair_counts or {}
    per_item: dict = defaultdict(list)
    for (item, query), s in scores.items():
        per_item[item].append((-s, -counts.get((item, query), 0), query.key_hash, query))
    out = {}
    for item, rows in per_item.items():
        best = heapq.nsmallest(k, rows)
        out[item] = [(q, -neg) for neg, _, _, q in best]
    return out


# ---------------------------------------------------------------------------
# signal store


CONTEXT_ATTRIBUTES = ("country", "device", "gender")


def context_value(context: RequestContext, attribute: str) -> str:
    if attribute == "country":
        return context.country
    if attribute == "device":
        return context.device.value
    if attribute == "gender":
        return str(context.gender_bucket)
    raise KeyError(attribute)


@dataclass(frozen=True)
class SlotSpec:
    window: str
    context: Optional[str] = None

    @property
    def name(self) -> str:
        return self.window if self.context is None else f"{self.window}@{self.context}"

    @classmethod
    def parse(cls, name: str) -> "SlotSpec":
        window, _, ctx = name.partition("@")
        return cls(window, ctx or None)


DEFAULT_SLOTS = tuple(SlotSpec(w.name) for w in DEFAULT_WINDOWS) + tuple(
    SlotSpec("90d", attr) for attr in CONTEXT_ATTRIBUTES
)


@dataclass
class IQPSignal:
    """Retained query lists for one item, keyed by slot name.

    Global slots map to a list; context slots map to ``{context_value: list}``.
    """

    item: ItemId
    slots: dict


class SignalStore:
    """Sealed per-item top-k IQP lists for a fixed slot layout."""

    def __init__(self, k: int, slots: Sequence[SlotSpec], as_of: int, lists: Sequence[dict]):
        self.k = k
        self.slots = tuple(slots)
        self.as_of = as_of
        # lists[s] maps item (global slot) or (item, ctx_value) (context slot) to [(QueryKey, score)]
        self.lists = [dict(x) for x in lists]
        self._point = None
        self._inverted = None
        self._by_item = None

    @property
    def feature_count(self) -> int:
        return len(self.slots)

    @property
    def windows(self) -> list:
        seen = []
        for s in self.slots:
            if s.window not in seen:
                seen.append(s.window)
        return seen

    def items(self) -> list:
        ids = set()
        for slot, lst in zip(self.slots, self.lists):
            ids.update(lst if slot.context is None else (k[0] for k in lst))
        return sorted(ids)

    def _context_by_item(self) -> list:
        if self._by_item is None:
            grouped = []
            for slot, lst in zip(self.slots, self.lists):
                g: dict = defaultdict(dict)
                if slot.context is not None:
                    for (item, cv), v in sorted(lst.items()):
                        g[item][cv] = v
                grouped.append(g)
            self._by_item = grouped
        return self._by_item

    def signal(self, item: ItemId) -> IQPSignal:
        out = {}
        for slot, lst, g in zip(self.slots, self.lists, self._context_by_item()):
            if slot.context is None:
                out[slot.name] = list(lst.get(item, []))
            else:
                out[slot.name] = {cv: list(v) for cv, v in g.get(item, {}).items()}
        return IQPSignal(item, out)

    def _point_index(self) -> list:
        if self._point is None:
            index = []
            for slot, lst in zip(self.slots, self.lists):
                idx = {}
                for key, entries in lst.items():
                    base = (key,) if slot.context is None else key
                    for q, s in entries:
                        idx[base + (q.key_hash,)] = s
                index.append(idx)
            self._point = index
        return self._point

    def lookup(
        self, item: ItemId, query: QueryKey, context: Optional[RequestContext] = None
    ) -> np.ndarray:
        """Feature vector with one value per slot; 0.0 where the query is not retained."""
        out = np.zeros(len(self.slots), dtype=np.float64)
        for i, (slot, idx) in enumerate(zip(self.slots, self._point_index())):
            if slot.context is None:
                out[i] = idx.get((item, query.key_hash), 0.0)
            elif context is not None:
                out[i] = idx.get((item, context_value(context, slot.context), query.key_hash), 0.0)
        return out

    def query_postings(self, query: QueryKey, context: Optional[RequestContext] = None) -> list:
        """Per slot, ``(item_ids, scores)`` arrays of items retaining ``query``."""
        if self._inverted is None:
            inv = []
            for slot, lst in zip(self.slots, self.lists):
                table: dict = defaultdict(list)
                for key, entries in lst.items():
                    for q, s in entries:
                        if slot.context is None:
                            table[q.key_hash].append((key, s))
                        else:
                            table[(q.key_hash, key[1])].append((key[0], s))
                inv.append(
                    {
                        k: (np.array([r[0] for r in v], dtype=np.uint64), np.array([r[1] for r in v]))
                        for k, v in table.items()
                    }
                )
            self._inverted = inv
        empty = (np.zeros(0, dtype=np.uint64), np.zeros(0))
        out = []
        for slot, table in zip(self.slots, self._inverted):
            if slot.context is None:
                out.append(table.get(query.key_hash, empty))
            elif context is None:
                out.append(empty)
            else:
                out.append(table.get((query.key_hash, context_value(context, slot.context)), empty))
        return out

    # -- serialization -------------------------------------------------------

    def header(self) -> str:
        globals_ = [s.name for s in self.slots if s.context is None]
        ctx = [s.name for s in self.slots if s.context is not None]
        return f"IQP v1 {self.k} {','.join(globals_) or '-'} {','.join(ctx) or '-'} as_of={self.as_of}"

    def _records(self):
        for item in self.items():
            sig = self.signal(item)
            yield item, [sig.slots[s.name] for s in self.slots]

    def to_text(self) -> str:
        lines = [self.header()]
        for item, slot_values in self._records():
            fields = [str(item)]
            for slot, value in zip(self.slots, slot_values):
                if slot.context is None:
                    entries = [f"{q.key_hash}:{s!r}:{quote(q.text, safe='')}" for q, s in value]
                else:
                    entries = [
                        f"{quote(cv, safe='')}|{q.key_hash}:{s!r}:{quote(q.text, safe='')}"
                        for cv, lst in value.items()
                        for q, s in lst
                    ]
                fields.append(" ".join(entries) if entries else "-")
            lines.append("\t".join(fields))
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        head = self.header().encode("utf-8")
        records = list(self._records())
        parts = [b"IQPB1", struct.pack("<I", len(head)), head, struct.pack("<Q", len(records))]

        def entry(q: QueryKey, s: float) -> bytes:
            text = q.text.encode("utf-8")
            return struct.pack("<QH", q.key_hash, len(text)) + text + struct.pack("<d", s)

        for item, slot_values in records:
            parts.append(struct.pack("<Q", item))
            for slot, value in zip(self.slots, slot_values):
                if slot.context is None:
                    parts.append(struct.pack("<I", len(value)))
                    parts.extend(entry(q, s) for q, s in value)
                else:
                    flat = [(cv, q, s) for cv, lst in value.items() for q, s in lst]
                    parts.append(struct.pack("<I", len(flat)))
                    for cv, q, s in flat:
                        cvb = cv.encode("utf-8")
                        parts.append(struct.pack("<H", len(cvb)) + cvb + entry(q, s))
        return b"".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path, binary: bool = False) -> None:
        if binary:
            with open(path, "wb") as fh:
                fh.write(self.to_bytes())
        else:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(self.to_text())

    @classmethod
    def _parse_header(cls, header: str):
        parts = header.split()
        if len(parts) < 5 or parts[0] != "IQP" or parts[1] != "v1":
            raise StoreFormatError(f"bad IQP header {header!r}")
        k = int(parts[2])
        slots = [SlotSpec.parse(n) for n in parts[3].split(",") if n != "-"]
        slots += [SlotSpec.parse(n) for n in parts[4].split(",") if n != "-"]
        as_of = 0
        for extra in parts[5:]:
            if extra.startswith("as_of="):
                as_of = int(extra[6:])
        return k, slots, as_of

    @classmethod
    def from_text(cls, text: str) -> "SignalStore":
        lines = text.splitlines()
        if not lines:
            raise StoreFormatError("empty IQP store")
        k, slots, as_of = cls._parse_header(lines[0])
        lists = [dict() for _ in slots]
        for line_no, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            fields = line.split("\t")
            if len(fields) != len(slots) + 1:
                raise StoreFormatError(f"line {line_no}: expected {len(slots) + 1} fields")
            item = int(fields[0])
            for slot, lst, raw in zip(slots, lists, fields[1:]):
                if raw == "-":
                    continue
                for tok in raw.split(" "):
                    ctx = None
                    if slot.context is not None:
                        ctx, _, tok = tok.partition("|")
                        ctx = unquote(ctx)
                    h, s, qtext = tok.split(":", 2)
                    q = QueryKey(unquote(qtext), int(h))
                    key = item if ctx is None else (item, ctx)
                    lst.setdefault(key, []).append((q, float(s)))
        return cls(k, slots, as_of, lists)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignalStore":
        if data[:5] != b"IQPB1":
            raise StoreFormatError("bad binary IQP magic")
        pos = 5
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        k, slots, as_of = cls._parse_header(data[pos : pos + hlen].decode("utf-8"))
        pos += hlen
        (n_items,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        lists = [dict() for _ in slots]

        def read_entry(pos):
            h, tlen = struct.unpack_from("<QH", data, pos)
            pos += 10
            text = data[pos : pos + tlen].decode("utf-8")
            pos += tlen
            (s,) = struct.unpack_from("<d", data, pos)
            return (QueryKey(text, h), s), pos + 8

        for _ in range(n_items):
            (item,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            for slot, lst in zip(slots, lists):
                (n,) = struct.unpack_from("<I", data, pos)
                pos += 4
                for _ in range(n):
                    key = item
                    if slot.context is not None:
                        (clen,) = struct.unpack_from("<H", data, pos)
                        pos += 2
                        key = (item, data[pos : pos + clen].decode("utf-8"))
                        pos += clen
                    value, pos = read_entry(pos)
                    lst.setdefault(key, []).append(value)
        return cls(k, slots, as_of, lists)

    @classmethod
    def load(cls, path) -> "SignalStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:5] == b"IQPB1":
            return cls.from_bytes(data)
        return cls.from_text(data.decode("utf-8"))

    def __eq__(self, other) -> bool:
        return isinstance(other, SignalStore) and self.to_bytes() == other.to_bytes()


def lookup_features(
    store: SignalStore, item: ItemId, query: QueryKey, context: Optional[RequestContext] = None
) -> np.ndarray:
    return store.lookup(item, query, context)


def build_signal_store(
    global_counts: Mapping[str, CountStore],
    context_counts: Mapping[str, Mapping[str, CountStore]],
    slots: Sequence[SlotSpec] = DEFAULT_SLOTS,
    smoothing: SmoothingConfig = SmoothingConfig(),
    k: int = 100,
    as_of: Optional[int] = None,
) -> SignalStore:
    """Score and truncate every slot.

    ``global_counts`` is keyed by window name, ``context_counts`` by slot name
    and then context value.
    """
    lists = []
    for slot in slots:
        if slot.context is None:
            counts = global_counts[slot.window]
            lists.append(topk_retain(compute_iqp(counts, smoothing), k, counts.pair_counts))
            if as_of is None:
                as_of = counts.as_of
        else:
            merged = {}
            for cv, counts in context_counts.get(slot.name, {}).items():
                for item, lst in topk_retain(compute_iqp(counts, smoothing), k, counts.pair_counts).items():
                    merged[(item, cv)] = lst
            lists.append(merged)
    return SignalStore(k, slots, as_of or 0, lists)


# ---------------------------------------------------------------------------
# multi-window builder with daily incremental updates


class IQPBuilder:
    """Keeps every window's CountStore (global and context-conditioned) in step.

    ``user_contexts`` maps user id to RequestContext and is how events and
    requests are routed to context-conditioned stores.
    """

    def __init__(
        self,
        windows: Sequence[WindowSpec] = DEFAULT_WINDOWS,
        slots: Sequence[SlotSpec] = DEFAULT_SLOTS,
        user_contexts: Optional[Mapping[int, RequestContext]] = None,
        engagement_actions: Iterable[ActionType] = DEFAULT_ACTION_SET,
    ):
        self.windows = {w.name: w for w in windows}
        self.slots = tuple(slots)
        for s in self.slots:
            if s.window not in self.windows:
                raise WindowMismatch(f"slot {s.name} refers to unknown window")
        self.user_contexts = dict(user_contexts or {})
        self.engagement_actions = frozenset(engagement_actions)
        self.global_counts: dict = {}
        self.context_counts: dict = {}
        self.as_of: Optional[int] = None

    def _extractor(self, attribute: str):
        unknown = RequestContext(user_id=0, country="??", language="??", gender_bucket=-1)

        def extract(record) -> str:
            ctx = self.user_contexts.get(record.user_id, unknown)
            return context_value(ctx, attribute)

        return extract

    def _context_slots(self):
        return [s for s in self.slots if s.context is not None]

    def build(self, events: Sequence[EngagementEvent], requests: Sequence[SearchRequest], as_of: int) -> None:
        events, requests = list(events), list(requests)
        self.as_of = as_of
        self.global_counts = {
            name: accumulate_counts(events, requests, w, self.engagement_actions, as_of)
            for name, w in self.windows.items()
        }
        self.context_counts = {
            s.name: conditioned_counts(
                events, requests, self.windows[s.window], self._extractor(s.context), self.engagement_actions, as_of
            )
            for s in self._context_slots()
        }

    def advance(self, day_events: Sequence[EngagementEvent], day_requests: Sequence[SearchRequest]) -> None:
        """Fold in the next day's records via merge_counts."""
        if self.as_of is None:
            raise RuntimeError("build() before advance()")
        day_end = self.as_of + DAY
        day_events, day_requests = list(day_events), list(day_requests)
        for name, w in self.windows.items():
            delta = day_delta(day_events, day_requests, w, self.engagement_actions, day_end)
            self.global_counts[name] = merge_counts(self.global_counts[name], delta)
        for s in self._context_slots():
            w = self.windows[s.window]
            stores = self.context_counts[s.name]
            deltas = conditioned_counts(
                [e for e in day_events if day_of(e.timestamp) == day_end // DAY - 1],
                [r for r in day_requests if day_of(r[0]) == day_end // DAY - 1],
                w,
                self._extractor(s.context),
                self.engagement_actions,
                day_end,
            )
            for cv in sorted(set(stores) | set(deltas)):
                base = stores.get(cv) or CountStore(w, self.as_of, {}, {}, _empty_shards(w, self.as_of))
                delta = deltas.get(cv) or CountStore(w, day_end, {}, {}, _empty_shards(w, day_end))
                stores[cv] = merge_counts(base, delta)
        self.as_of = day_end

    def signals(self, smoothing: SmoothingConfig = SmoothingConfig(), k: int = 100) -> SignalStore:
        return build_signal_store(self.global_counts, self.context_counts, self.slots, smoothing, k, self.as_of)

    # -- persistence of raw counts (needed for incremental updates) ----------

    def to_json(self) -> str:
        def dump_store(store: CountStore):
            return [
                [
                    s.day,
                    sorted([item, q.text, c] for (item, q), c in s.pair_counts.items()),
                    sorted([q.text, c] for q, c in s.query_counts.items()),
                ]
                for s in store.daily_shards
                if not s.is_empty()
            ]

        doc = {
            "format": "iqp-counts-v1",
            "as_of": self.as_of,
            "windows": [[w.name, w.length_days] for w in self.windows.values()],
            "slots": [s.name for s in self.slots],
            "actions": sorted(a.value for a in self.engagement_actions),
            "users": {
                str(u): [c.country, c.device.value, c.language, c.age_bucket, c.gender_bucket]
                for u, c in sorted(self.user_contexts.items())
            },
            "global": {name: dump_store(st) for name, st in self.global_counts.items()},
            "context": {
                slot: {cv: dump_store(st) for cv, st in sorted(stores.items())}
                for slot, stores in self.context_counts.items()
            },
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "IQPBuilder":
        from .core import Device

        doc = json.loads(text)
        if doc.get("format") != "iqp-counts-v1":
            raise StoreFormatError("not an IQP counts file")
        windows = [WindowSpec(n, d) for n, d in doc["windows"]]
        users = {
            int(u): RequestContext(int(u), c, Device(d), lang, age, g)
            for u, (c, d, lang, age, g) in doc["users"].items()
        }
        b = cls(windows, [SlotSpec.parse(s) for s in doc["slots"]], users, [ActionType(a) for a in doc["actions"]])
        b.as_of = doc["as_of"]

        def load_store(w: WindowSpec, rows) -> CountStore:
            shards = _empty_shards(w, b.as_of)
            first = shards[0].day
            for day, pairs, queries in rows:
                shard = shards[day - first]
                shard.pair_counts = {(item, QueryKey.from_normalized(t)): c for item, t, c in pairs}
                shard.query_counts = {QueryKey.from_normalized(t): c for t, c in queries}
            p, q = _sum_shards(shards)
            return CountStore(w, b.as_of, p, q, shards)

        b.global_counts = {name: load_store(b.windows[name], rows) for name, rows in doc["global"].items()}
        b.context_counts = {
            slot: {cv: load_store(b.windows[SlotSpec.parse(slot).window], rows) for cv, rows in stores.items()}
            for slot, stores in doc["context"].items()
        }
        return b
