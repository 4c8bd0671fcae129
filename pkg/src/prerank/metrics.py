"""Offline and session metrics, query popularity segments and the BM25 baseline."""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import FULFILLING_ACTIONS, EngagementEvent, PrerankError, QueryKey


class LengthMismatch(PrerankError, ValueError):
    code = "LENGTH_MISMATCH"


class EmptyInput(PrerankError, ValueError):
    code = "EMPTY_INPUT"


def rank_order(scores, item_ids=None) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending item id (or position)."""
    s = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(s)) if item_ids is None else np.asarray(item_ids)
    return np.lexsort((ids, -s))


def hits_at_k(scores, labels, k: int = 3, item_ids=None) -> Optional[int]:
    """1 if any positive lands in the top ``k``; None when there is no positive."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or (item_ids is not None and len(item_ids) != len(s)):
        raise LengthMismatch(f"{len(s)} scores for {len(y)} labels")
    if not np.any(y == 1):
        return None
    top = rank_order(s, item_ids)[:k]
    return int(np.any(y[top] == 1))


@dataclass
class HitsSummary:
    mean: float
    evaluated: int
    skipped: int


def mean_hits_at_k(requests: Iterable[tuple], k: int = 3) -> HitsSummary:
    """``requests`` yields ``(scores, labels)`` or ``(scores, labels, item_ids)``."""
    total = n = skipped = 0
    for req in requests:
        h = hits_at_k(req[0], req[1], k, req[2] if len(req) > 2 else None)
        if h is None:
            skipped += 1
            continue
        total += h
        n += 1
    return HitsSummary(total / n if n else float("nan"), n, skipped)


# ---------------------------------------------------------------------------
# sessions


@dataclass
class SearchFeed:
    query: QueryKey
    timestamp: int
    items: list = field(default_factory=list)  # [(item_id, frozenset of actions)]


@dataclass
class SessionLog:
    session_id: int
    searches: list


def sessions_from_events(events: Iterable[EngagementEvent]) -> list:
    """Group events into sessions; one search per distinct (timestamp, query) in a session."""
    feeds: dict = defaultdict(lambda: defaultdict(set))
    for ev in events:
        feeds[(ev.session_id, ev.timestamp, ev.query)][ev.item].add(ev.action)
    by_session: dict = defaultdict(list)
    for (sid, ts, q), items in feeds.items():
        by_session[sid].append(SearchFeed(q, ts, [(i, frozenset(a)) for i, a in sorted(items.items())]))
    out = []
    for sid in sorted(by_session):
        searches = sorted(by_session[sid], key=lambda f: (f.timestamp, f.query.key_hash))
        out.append(SessionLog(sid, searches))
    return out


def _feed_fulfilled(feed: SearchFeed) -> bool:
    return any(actions & FULFILLING_ACTIONS for _, actions in feed.items)


def sifr(sessions: Sequence[SessionLog]) -> float:
    """Share of sessions with at least one fulfilling action anywhere."""
    if not sessions:
        raise EmptyInput("no sessions")
    return sum(any(_feed_fulfilled(f) for f in s.searches) for s in sessions) / len(sessions)


def f1s(sessions: Sequence[SessionLog]) -> float:
    """Share of sessions fulfilled on the first search's feed."""
    if not sessions:
        raise EmptyInput("no sessions")
    return sum(bool(s.searches) and _feed_fulfilled(s.searches[0]) for s in sessions) / len(sessions)


# ---------------------------------------------------------------------------
# query popularity segments

HEAD, TORSO, TAIL, SINGLE = "HEAD", "TORSO", "TAIL", "SINGLE"
SEGMENTS = (HEAD, TORSO, TAIL, SINGLE)


def segment_queries(frequencies: Mapping[QueryKey, int], head_share: float = 0.5, torso_share: float = 0.3) -> dict:
    """HEAD/TORSO/TAIL by cumulative search volume, SINGLE for queries seen once.

    Non-single queries are sorted by frequency (ties by key hash); a query is
    HEAD while the volume before it is under ``head_share`` of the
    non-single total, TORSO while under ``head_share + torso_share``.
    """
    out = {}
    rest = []
    for q, f in frequencies.items():
        if f < 1:
            raise ValueError(f"frequency of {q.text!r} must be >= 1")
        if f == 1:
            out[q] = SINGLE
        else:
            rest.append((q, f))
    rest.sort(key=lambda x: (-x[1], x[0].key_hash))
    total = sum(f for _, f in rest)
    cum = 0
    for q, f in rest:
        share = cum / total
        out[q] = HEAD if share < head_share else TORSO if share < head_share + torso_share else TAIL
        cum += f
    return out


# ---------------------------------------------------------------------------
# BM25 with a bigram proximity bonus


def tokenize(text: str) -> list:
    return text.lower().split()


@dataclass
class CorpusStats:
    n_docs: int
    doc_freq: dict
    avg_len: float

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "CorpusStats":
        df: Counter = Counter()
        n = total = 0
        for t in texts:
            toks = tokenize(t)
            df.update(set(toks))
            total += len(toks)
            n += 1
        return cls(n, dict(df), total / n if n else 0.0)

    def idf(self, token: str) -> float:
        df = self.doc_freq.get(token, 0)
        return math.log(1.0 + (self.n_docs - df + 0.5) / (df + 0.5))


def bm25_proximity(
    query: QueryKey,
    text: str,
    stats: CorpusStats,
    k1: float = 1.2,
    b: float = 0.75,
    proximity_weight: float = 1.0,
) -> float:
    """BM25 over the item text plus a saturated count of adjacent query bigrams."""
    doc = tokenize(text)
    if not doc:
        return 0.0
    tf = Counter(doc)
    norm = k1 * (1.0 - b + b * len(doc) / stats.avg_len) if stats.avg_len > 0 else k1
    q_tokens = tokenize(query.text)
    score = 0.0
    for tok in dict.fromkeys(q_tokens):
        f = tf.get(tok, 0)
        if f:
            score += stats.idf(tok) * f * (k1 + 1.0) / (f + norm)
    if proximity_weight and len(q_tokens) > 1:
        doc_bigrams = Counter(zip(doc, doc[1:]))
        c = sum(doc_bigrams.get(bg, 0) for bg in dict.fromkeys(zip(q_tokens, q_tokens[1:])))
        if c:
            score += proximity_weight * c * (k1 + 1.0) / (c + norm)
    return score
