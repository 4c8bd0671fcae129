"""Desk-scale synthetic search logs with latent topics.

Each query and item belongs to one topic.  Per impression the engagement
probability is

    base_rate[query topic] * topic_boost**[same topic] * popularity[item]
        * user_affinity(user, item topic) * pair_effect(query, item)

where ``pair_effect`` is a fixed log-normal factor (mean one) per
(query, item) pair, i.e. the part of engagement only historical
(query, item) counts can reveal.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass, field

import numpy as np

from .core import (
    ActionType,
    Device,
    EngagementEvent,
    RequestContext,
    SearchRequest,
    normalize_query,
)
from .iqp import DAY

ENGAGE_ACTIONS = (
    ActionType.SAVE,
    ActionType.LONG_CLICK,
    ActionType.CLICK,
    ActionType.DOWNLOAD,
    ActionType.SCREENSHOT,
)
ENGAGE_ACTION_PROBS = (0.3, 0.25, 0.3, 0.1, 0.05)
NEGATIVE_ACTION_RATE = 0.01

_COUNTRY_LANG = (("US", "en"), ("GB", "en"), ("FR", "fr"), ("DE", "de"), ("BR", "pt"), ("JP", "ja"), ("IN", "hi"),
                 ("MX", "es"))
_GENERIC_TOKENS = ("ideas", "diy", "aesthetic", "easy", "inspo", "simple", "cute", "modern")
_SYLLABLES = tuple(a + b for a in "bdfgklmnprstvz" for b in "aeiou")


@dataclass
class SyntheticConfig:
    n_topics: int = 8
    n_items: int = 1000
    n_queries: int = 2500
    n_users: int = 300
    days: int = 35
    requests_per_day: int = 500
    impressions_per_request: int = 12
    tokens_per_topic: int = 24
    base_rates: tuple = ()
    base_rate: float = 0.05
    topic_boost: float = 3.0
    affinity_boost: float = 2.0
    user_topic_concentration: float = 0.3
    popularity_sigma: float = 0.5
    pair_sigma: float = 1.0
    zipf_exponent: float = 1.0
    on_topic_fraction: float = 0.7
    content_dim: int = 32
    content_noise: float = 0.7
    max_engagement_prob: float = 0.95
    searches_per_session: float = 1.5
    session_gap: int = 1800
    start_day: int = 19700
    seed: int = 0

    def __post_init__(self):
        self.base_rates = tuple(float(r) for r in self.base_rates)
        for name in ("n_topics", "n_items", "n_queries", "n_users", "days", "requests_per_day",
                     "impressions_per_request", "tokens_per_topic", "content_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.base_rates and len(self.base_rates) != self.n_topics:
            raise ValueError("need one base rate per topic")
        if not all(0 < r < 1 for r in self.topic_base_rates):
            raise ValueError("base rates must lie in (0, 1)")
        if self.n_queries > self.n_topics * _combos_per_topic(self.tokens_per_topic):
            raise ValueError("not enough distinct token combinations for n_queries")

    @property
    def topic_base_rates(self) -> tuple:
        return self.base_rates or (self.base_rate,) * self.n_topics

    @property
    def start_time(self) -> int:
        return self.start_day * DAY

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["base_rates"] = list(self.base_rates)
        return d


def _combos_per_topic(tokens: int) -> int:
    return tokens + tokens * (tokens - 1) // 2 + tokens * (tokens - 1) * (tokens - 2) // 6


@dataclass
class ItemRecord:
    item_id: int
    topic: int
    popularity: float
    rates: np.ndarray
    content: np.ndarray
    title: str
    description: str
    annotations: str

    @property
    def text(self) -> str:
        return f"{self.title} {self.description} {self.annotations}"


@dataclass
class SyntheticData:
    config: SyntheticConfig
    events: list
    requests: list
    items: list
    users: dict
    queries: list
    query_topics: dict
    user_affinity: np.ndarray
    sessions: list = field(default_factory=list)

    @property
    def end_time(self) -> int:
        return self.config.start_time + self.config.days * DAY


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays."""
    with np.errstate(over="ignore"):
        x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def pair_normal(seed: int, query_index: int, item_indices: np.ndarray) -> np.ndarray:
    """Deterministic standard normal per (query, item) pair."""
    base = np.uint64((seed * 1_000_003 + query_index) % (1 << 64))
    with np.errstate(over="ignore"):
        key = _mix64(np.full(len(item_indices), base, dtype=np.uint64) * np.uint64(0x100000001B3)
                     + np.asarray(item_indices, dtype=np.uint64))
    u1 = ((key >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)
    u2 = ((_mix64(key) >> np.uint64(11)).astype(np.float64) + 0.5) / float(1 << 53)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _make_words(rng: np.random.Generator, n: int) -> list:
    words, seen = [], set(_GENERIC_TOKENS)
    while len(words) < n:
        k = int(rng.integers(2, 4))
        w = "".join(_SYLLABLES[i] for i in rng.integers(0, len(_SYLLABLES), size=k))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _zipf_weights(n: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


def generate_synthetic_logs(config: SyntheticConfig) -> SyntheticData:
    """Generate events, requests, item records, users and sessions; deterministic in ``config.seed``."""
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n_t = cfg.n_topics

    # vocabulary and queries
    words = _make_words(rng, n_t * cfg.tokens_per_topic)
    topic_words = [words[t * cfg.tokens_per_topic : (t + 1) * cfg.tokens_per_topic] for t in range(n_t)]
    per_topic_texts = []
    for t in range(n_t):
        tw = topic_words[t]
        texts = []
        for size in (1, 2, 3):
            combos = [" ".join(c) for c in itertools.combinations(tw, size)]
            order = rng.permutation(len(combos))
            texts.extend(combos[i] for i in order)
        per_topic_texts.append(texts)
    query_topic_seq = rng.permutation(np.arange(cfg.n_queries) % n_t)
    cursor = [0] * n_t
    queries, q_topic = [], np.zeros(cfg.n_queries, dtype=np.int64)
    for r in range(cfg.n_queries):
        t = int(query_topic_seq[r])
        queries.append(normalize_query(per_topic_texts[t][cursor[t]]))
        cursor[t] += 1
        q_topic[r] = t
    q_cdf = np.cumsum(_zipf_weights(cfg.n_queries, cfg.zipf_exponent))

    # items
    centroids = rng.normal(size=(n_t, cfg.content_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    i_topic = rng.integers(0, n_t, size=cfg.n_items)
    pop = np.exp(cfg.popularity_sigma * rng.normal(size=cfg.n_items))
    pop /= pop.mean()
    item_ids = np.unique(rng.integers(1, 1 << 40, size=2 * cfg.n_items + 16))
    item_ids = rng.permutation(item_ids)[: cfg.n_items]
    base = np.array(cfg.topic_base_rates)
    items = []
    for j in range(cfg.n_items):
        t = int(i_topic[j])
        content = centroids[t] + cfg.content_noise * rng.normal(size=cfg.content_dim) / np.sqrt(cfg.content_dim)
        tw = topic_words[t]
        pick = lambda n: " ".join(tw[k] for k in rng.integers(0, len(tw), size=n))
        generic = " ".join(rng.choice(_GENERIC_TOKENS, size=2))
        rate = base.mean() * pop[j] * float(np.exp(0.1 * rng.normal()))
        items.append(
            ItemRecord(
                item_id=int(item_ids[j]),
                topic=t,
                popularity=float(pop[j]),
                rates=np.array([rate, ENGAGE_ACTION_PROBS[0] * float(np.exp(0.1 * rng.normal()))]),
                content=content,
                title=pick(3),
                description=f"{pick(4)} {generic}",
                annotations=pick(2),
            )
        )
    by_topic = [np.flatnonzero(i_topic == t) for t in range(n_t)]
    pop_cdf = np.cumsum(pop / pop.sum())
    pop_topic = [pop[ix] / pop[ix].sum() for ix in by_topic]

    # users
    affinity = rng.dirichlet(np.full(n_t, cfg.user_topic_concentration), size=cfg.n_users)
    users = {}
    for u in range(cfg.n_users):
        country, lang = _COUNTRY_LANG[int(rng.integers(0, len(_COUNTRY_LANG)))]
        users[u + 1] = RequestContext(
            user_id=u + 1,
            country=country,
            device=list(Device)[int(rng.choice(3, p=[0.6, 0.3, 0.1]))],
            language=lang,
            age_bucket=int(rng.integers(0, 8)),
            gender_bucket=int(rng.integers(0, 3)),
        )
    aff_norm = 1.0 + cfg.affinity_boost / n_t

    # search requests, grouped into sessions of nearby searches by one user
    searches = []
    for d in range(cfg.days):
        day_start = cfg.start_time + d * DAY
        made = 0
        while made < cfg.requests_per_day:
            user = int(rng.integers(1, cfg.n_users + 1))
            n_search = min(int(rng.geometric(1.0 / cfg.searches_per_session)), cfg.requests_per_day - made)
            t = day_start + 1 + int(rng.integers(0, DAY - 3600))
            for _ in range(n_search):
                searches.append((t, user))
                t += int(rng.integers(30, 600))
            made += n_search
    searches.sort()

    session_of = _sessionize(searches, cfg.session_gap)
    events, requests = [], []
    n_imp = min(cfg.impressions_per_request, cfg.n_items)
    n_on = int(round(cfg.on_topic_fraction * n_imp))
    for (ts, user), sid in zip(searches, session_of):
        qi = min(int(np.searchsorted(q_cdf, rng.random() * q_cdf[-1])), cfg.n_queries - 1)
        q, t = queries[qi], int(q_topic[qi])
        requests.append(SearchRequest(ts, q, user, sid))
        on_pool = by_topic[t]
        k_on = min(n_on, len(on_pool))
        chosen = list(on_pool[rng.choice(len(on_pool), size=k_on, replace=False, p=pop_topic[t])]) if k_on else []
        taken = set(chosen)
        while len(chosen) < n_imp:
            j = min(int(np.searchsorted(pop_cdf, rng.random() * pop_cdf[-1])), cfg.n_items - 1)
            if j not in taken:
                taken.add(j)
                chosen.append(j)
        chosen = np.array(chosen)
        prob = (
            base[t]
            * np.where(i_topic[chosen] == t, cfg.topic_boost, 1.0)
            * pop[chosen]
            * (1.0 + cfg.affinity_boost * affinity[user - 1, i_topic[chosen]]) / aff_norm
            * np.exp(cfg.pair_sigma * pair_normal(cfg.seed, qi, chosen) - 0.5 * cfg.pair_sigma**2)
        )
        prob = np.minimum(prob, cfg.max_engagement_prob)
        engaged = rng.random(len(chosen)) < prob
        act = rng.choice(len(ENGAGE_ACTIONS), size=len(chosen), p=ENGAGE_ACTION_PROBS)
        neg = rng.random(len(chosen))
        for j, e, a, r in zip(chosen, engaged, act, neg):
            iid = items[j].item_id
            events.append(EngagementEvent(ts, user, q, iid, ActionType.IMPRESSION, "search", sid))
            if e:
                events.append(EngagementEvent(ts, user, q, iid, ENGAGE_ACTIONS[a], "search", sid))
            elif r < NEGATIVE_ACTION_RATE:
                bad = ActionType.HIDE if r < NEGATIVE_ACTION_RATE / 2 else ActionType.REPORT
                events.append(EngagementEvent(ts, user, q, iid, bad, "search", sid))

    from .metrics import sessions_from_events

    return SyntheticData(
        config=cfg,
        events=events,
        requests=requests,
        items=items,
        users=users,
        queries=queries,
        query_topics={q: int(t) for q, t in zip(queries, q_topic)},
        user_affinity=affinity,
        sessions=sessions_from_events(events),
    )


def _sessionize(searches: list, gap: int) -> list:
    """Session id per (timestamp, user) search: a new session after ``gap`` seconds of inactivity."""
    last: dict = {}
    current: dict = {}
    next_id = 1
    out = []
    for ts, user in searches:
        if user not in last or ts - last[user] > gap:
            current[user] = next_id
            next_id += 1
        last[user] = ts
        out.append(current[user])
    return out


# ---------------------------------------------------------------------------
# files


def write_synthetic(data: SyntheticData, out_dir) -> None:
    import json
    from pathlib import Path

    from .core import write_events, write_requests

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / "events.tsv", data.events)
    write_requests(out / "requests.tsv", data.requests)
    with open(out / "items.tsv", "w", encoding="utf-8") as fh:
        fh.write("# item_id\ttopic\trates\tcontent\ttitle\tdescription\tannotations\n")
        for it in data.items:
            fh.write(
                "\t".join(
                    [
                        str(it.item_id),
                        str(it.topic),
                        ",".join(repr(float(x)) for x in it.rates),
                        ",".join(repr(float(x)) for x in it.content),
                        it.title,
                        it.description,
                        it.annotations,
                    ]
                )
                + "\n"
            )
    with open(out / "users.tsv", "w", encoding="utf-8") as fh:
        fh.write("# user_id\tcountry\tdevice\tlanguage\tage_bucket\tgender_bucket\n")
        for uid, c in sorted(data.users.items()):
            fh.write(f"{uid}\t{c.country}\t{c.device.value}\t{c.language}\t{c.age_bucket}\t{c.gender_bucket}\n")
    with open(out / "synthetic.json", "w", encoding="utf-8") as fh:
        json.dump(data.config.to_dict(), fh, sort_keys=True, indent=1)


def read_items(path) -> list:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            iid, topic, rates, content, title, desc, ann = line.rstrip("\n").split("\t")
            items.append(
                ItemRecord(
                    item_id=int(iid),
                    topic=int(topic),
                    popularity=float("nan"),
                    rates=np.array([float(x) for x in rates.split(",")]),
                    content=np.array([float(x) for x in content.split(",")]),
                    title=title,
                    description=desc,
                    annotations=ann,
                )
            )
    return items


def read_users(path) -> dict:
    users = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            uid, country, device, lang, age, gender = line.rstrip("\n").split("\t")
            users[int(uid)] = RequestContext(int(uid), country, Device(device), lang, int(age), int(gender))
    return users


def load_synthetic(in_dir) -> SyntheticData:
    """Reload a directory written by ``write_synthetic`` (latent topic fields are partially lost)."""
    import json
    from pathlib import Path

    from .core import read_events, read_requests
    from .metrics import sessions_from_events

    d = Path(in_dir)
    with open(d / "synthetic.json", encoding="utf-8") as fh:
        cfg = SyntheticConfig(**json.load(fh))
    events = list(read_events(d / "events.tsv"))
    requests = list(read_requests(d / "requests.tsv"))
    return SyntheticData(
        config=cfg,
        events=events,
        requests=requests,
        items=read_items(d / "items.tsv"),
        users=read_users(d / "users.tsv"),
        queries=sorted({r.query for r in requests}),
        query_topics={},
        user_affinity=np.zeros((0, cfg.n_topics)),
        sessions=sessions_from_events(events),
    )
