"""Offline batch inference into a forward index and online pre-ranking.

Snapshot file layout (little-endian)::

    b"IRIDX1" | u16 dim | u16 n_features | 32-byte model sha256 | 32-byte IQP sha256 |
    i64 build_time | u64 count | count x (u64 item_id, dim x f32) |
    u64 IQP length | binary IQP store
"""

from __future__ import annotations

import hashlib
import json
import logging
import socketserver
import struct
import sys
import threading
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Optional, Sequence, Union

import numpy as np
import torch

from .core import ActionType, Device, PrerankError, QueryKey, RequestContext, normalize_query
from .dataset import ItemTable, MissingFeatures
from .iqp import SignalStore
from .model import (
    ItemFeatures,
    PreRankModel,
    ScoreBreakdown,
    SequenceEntry,
    pack_items,
    pack_queries,
    sequence_arrays,
    sigmoid,
)

log = logging.getLogger(__name__)

MAGIC = b"IRIDX1"


class DuplicateItem(PrerankError, ValueError):
    code = "DUPLICATE_ITEM"


class LayoutMismatch(PrerankError, ValueError):
    code = "LAYOUT_MISMATCH"


class EmptyCandidates(PrerankError, ValueError):
    code = "EMPTY_CANDIDATES"


class DigestMismatch(PrerankError, ValueError):
    code = "DIGEST_MISMATCH"


class SnapshotFormatError(PrerankError, ValueError):
    code = "BAD_SNAPSHOT"


class ForwardIndexEntry(NamedTuple):
    item: int
    embedding: np.ndarray
    iqp: object  # IQPSignal


# ---------------------------------------------------------------------------
# offline


def batch_inference(
    items: Iterable[ItemFeatures],
    model: PreRankModel,
    batch_size: int = 4096,
) -> Iterator[tuple]:
    """Yield ``(item_id, embedding)`` per item, embedding = item tower output (float32)."""
    buf = []

    def flush():
        with torch.no_grad():
            emb = model.embed_item(pack_items(model.cfg, buf)).numpy().astype(np.float32)
        for f, e in zip(buf, emb):
            yield f.item_id, e
        buf.clear()

    for f in items:
        buf.append(f)
        if len(buf) >= batch_size:
            yield from flush()
    if buf:
        yield from flush()


def features_from_table(table: ItemTable, item_ids: Iterable[int], skip_missing: bool = True,
                        missing: Optional[list] = None) -> Iterator[ItemFeatures]:
    for i in item_ids:
        try:
            yield table.features(i)
        except MissingFeatures:
            if not skip_missing:
                raise
            if missing is not None:
                missing.append(i)


class IndexSnapshot:
    """Immutable item-keyed table of tower embeddings plus the IQP store."""

    def __init__(self, ids: np.ndarray, embeddings: np.ndarray, iqp: SignalStore,
                 model_digest: str = "", iqp_digest: str = "", build_time: int = 0):
        order = np.argsort(ids, kind="stable")
        self.ids = np.asarray(ids, dtype=np.uint64)[order]
        if len(self.ids) > 1 and np.any(self.ids[1:] == self.ids[:-1]):
            dup = self.ids[1:][self.ids[1:] == self.ids[:-1]][0]
            raise DuplicateItem(f"item {int(dup)} appears twice")
        self.embeddings = np.ascontiguousarray(np.asarray(embeddings, dtype=np.float32).reshape(len(ids), -1)[order])
        self.embeddings.setflags(write=False)
        self.ids.setflags(write=False)
        self._emb64 = self.embeddings.astype(np.float64)
        self.iqp = iqp
        self.model_digest = model_digest
        self.iqp_digest = iqp_digest or iqp.digest()
        self.build_time = build_time

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def rows(self, item_ids) -> np.ndarray:
        """Row index per id; -1 where absent."""
        q = np.asarray(item_ids, dtype=np.uint64)
        pos = np.searchsorted(self.ids, q)
        pos = np.minimum(pos, max(len(self.ids) - 1, 0))
        hit = (self.ids[pos] == q) if len(self.ids) else np.zeros(len(q), dtype=bool)
        return np.where(hit, pos, -1)

    def lookup(self, item_id: int) -> Optional[ForwardIndexEntry]:
        r = int(self.rows([item_id])[0])
        if r < 0:
            return None
        return ForwardIndexEntry(int(self.ids[r]), self.embeddings[r], self.iqp.signal(int(self.ids[r])))

    def entries(self) -> Iterator[ForwardIndexEntry]:
        for r in range(len(self.ids)):
            yield ForwardIndexEntry(int(self.ids[r]), self.embeddings[r], self.iqp.signal(int(self.ids[r])))

    def to_bytes(self) -> bytes:
        iqp_bytes = self.iqp.to_bytes()
        head = MAGIC + struct.pack("<HH", self.dim, self.iqp.feature_count)
        head += bytes.fromhex(self.model_digest or "0" * 64) + bytes.fromhex(self.iqp_digest)
        head += struct.pack("<qQ", self.build_time, len(self.ids))
        table = np.zeros(len(self.ids), dtype=[("id", "<u8"), ("emb", "<f4", (self.dim,))])
        table["id"] = self.ids
        table["emb"] = self.embeddings
        return head + table.tobytes() + struct.pack("<Q", len(iqp_bytes)) + iqp_bytes

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "IndexSnapshot":
        if data[:6] != MAGIC:
            raise SnapshotFormatError("bad snapshot magic")
        dim, _f = struct.unpack_from("<HH", data, 6)
        model_digest = data[10:42].hex()
        iqp_digest = data[42:74].hex()
        build_time, count = struct.unpack_from("<qQ", data, 74)
        pos = 90
        dt = np.dtype([("id", "<u8"), ("emb", "<f4", (dim,))])
        table = np.frombuffer(data, dtype=dt, count=count, offset=pos)
        pos += dt.itemsize * count
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        iqp = SignalStore.from_bytes(data[pos : pos + n])
        if iqp.digest() != iqp_digest:
            raise SnapshotFormatError("IQP section digest mismatch")
        if model_digest == "0" * 64:
            model_digest = ""
        return cls(table["id"].copy(), table["emb"].copy(), iqp, model_digest, iqp_digest, build_time)

    @classmethod
    def load(cls, path) -> "IndexSnapshot":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def build_index(entries: Iterable[tuple], iqp: SignalStore, model_digest: str = "",
                build_time: Optional[int] = None) -> IndexSnapshot:
    """Seal ``(item_id, embedding)`` pairs and the IQP store into a snapshot."""
    ids, embs = [], []
    for item, emb in entries:
        ids.append(int(item))
        embs.append(np.asarray(emb, dtype=np.float32))
    dim = embs[0].shape[0] if embs else 0
    arr = np.array(embs, dtype=np.float32).reshape(len(ids), dim)
    return IndexSnapshot(np.array(ids, dtype=np.uint64), arr, iqp, model_digest,
                         build_time=iqp.as_of if build_time is None else build_time)


# ---------------------------------------------------------------------------
# structured query


@dataclass(frozen=True)
class DotLeaf:
    pass


@dataclass(frozen=True)
class FeatureLeaf:
    slot: int


@dataclass(frozen=True)
class WeightedSum:
    children: tuple
    weights: tuple
    bias: float = 0.0


StructuredQueryNode = Union[DotLeaf, FeatureLeaf, WeightedSum]


def compile_projection(weights: Sequence[float], bias: float, feature_count: int) -> WeightedSum:
    """Projection layer as ``WeightedSum([DotLeaf, FeatureLeaf(0), FeatureLeaf(1), ...])``."""
    w = tuple(float(x) for x in weights)
    if len(w) != feature_count + 1:
        raise LayoutMismatch(f"{len(w)} weights for {feature_count} IQP slots")
    children = (DotLeaf(),) + tuple(FeatureLeaf(k) for k in range(feature_count))
    return WeightedSum(children, w, float(bias))


def compile_model(model: PreRankModel) -> WeightedSum:
    proj = model.projection
    return compile_projection(proj.weights(), float(proj.bias.detach()[0]), model.cfg.iqp_features)


def evaluate_structured(node: StructuredQueryNode, dot, features):
    """Evaluate on a scalar dot/1-D features, or vectorized on ``dot[n]`` and ``features[n, n_features]``."""
    if isinstance(node, DotLeaf):
        return dot
    if isinstance(node, FeatureLeaf):
        return np.asarray(features)[..., node.slot]
    out = node.bias
    for child, w in zip(node.children, node.weights):
        out = out + w * evaluate_structured(child, dot, features)
    return out


class OpCounter:
    def __init__(self):
        self.flops = 0


def evaluate_counted(node: StructuredQueryNode, q: Sequence[float], e: Sequence[float],
                     features: Sequence[float], counter: OpCounter) -> float:
    """Scalar evaluation that tallies every multiply and add (bias adds excluded)."""
    if isinstance(node, DotLeaf):
        acc = q[0] * e[0]
        counter.flops += 1
        for a, b in zip(q[1:], e[1:]):
            acc += a * b
            counter.flops += 2
        return acc
    if isinstance(node, FeatureLeaf):
        return features[node.slot]
    acc = None
    for child, w in zip(node.children, node.weights):
        term = w * evaluate_counted(child, q, e, features, counter)
        counter.flops += 1
        if acc is None:
            acc = term
        else:
            acc += term
            counter.flops += 1
    return (acc if acc is not None else 0.0) + node.bias


# ---------------------------------------------------------------------------
# online


@dataclass
class PrerankRequest:
    query: str
    context: RequestContext
    sequence: list = field(default_factory=list)  # [SequenceEntry]
    candidates: Optional[Sequence[int]] = None  # None means every indexed item
    n_out: int = 1000

    def __post_init__(self):
        if self.n_out < 1:
            raise ValueError("n_out must be >= 1")


def embed_request(model: PreRankModel, request: PrerankRequest) -> np.ndarray:
    cfg = model.cfg
    q = normalize_query(request.query)
    qb = pack_queries(cfg, [q], [request.context], [sequence_arrays(request.sequence, cfg.item_embed_dim)])
    with torch.no_grad():
        return model.embed_query(qb)[0].double().numpy()


def iqp_matrix(snapshot: IndexSnapshot, rows: np.ndarray, query: QueryKey,
               context: Optional[RequestContext], feature_count: int) -> np.ndarray:
    """IQP features for candidate rows via the store's per-query postings."""
    out = np.zeros((len(rows), feature_count))
    postings = snapshot.iqp.query_postings(query, context)[:feature_count]
    if not len(rows):
        return out
    for k, (items, scores) in enumerate(postings):
        if not len(items):
            continue
        posting_rows = snapshot.rows(items)
        ok = posting_rows >= 0
        slot = np.zeros(len(snapshot) + 1)
        slot[posting_rows[ok]] = scores[ok]
        out[:, k] = slot[np.where(rows >= 0, rows, len(snapshot))]
    return out


def select_top(ids: np.ndarray, scores: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` best (score desc, id asc) via partial selection."""
    m = len(scores)
    if n >= m:
        return np.lexsort((ids, -scores))
    kth = np.partition(-scores, n - 1)[n - 1]
    cand = np.flatnonzero(-scores <= kth)
    order = cand[np.lexsort((ids[cand], -scores[cand]))]
    return order[:n]


def score_candidates(request: PrerankRequest, snapshot: IndexSnapshot, model: PreRankModel,
                     tree: Optional[WeightedSum] = None) -> tuple:
    """``(candidate_ids, raw_scores, dots, features)``; absent candidates score -inf."""
    cfg = model.cfg
    tree = tree or compile_model(model)
    cand = snapshot.ids if request.candidates is None else np.asarray(request.candidates, dtype=np.uint64)
    if not len(cand):
        raise EmptyCandidates("no candidates")
    rows = snapshot.rows(cand)
    present = rows >= 0
    if cfg.use_towers:
        q_emb = embed_request(model, request)
        dots = np.zeros(len(cand))
        dots[present] = snapshot._emb64[rows[present]] @ q_emb
    else:
        dots = np.zeros(len(cand))
    feats = iqp_matrix(snapshot, rows, normalize_query(request.query), request.context, cfg.iqp_features)
    raw = np.asarray(evaluate_structured(tree, dots, feats), dtype=np.float64)
    raw = np.where(present, raw, -np.inf)
    return cand, raw, dots, feats


def prerank(request: PrerankRequest, snapshot: IndexSnapshot, model: PreRankModel,
            tree: Optional[WeightedSum] = None) -> list:
    """Top ``n_out`` ``(item_id, raw_score)`` pairs, best first, ties by ascending id."""
    cand, raw, _, _ = score_candidates(request, snapshot, model, tree)
    top = select_top(cand, raw, request.n_out)
    return [(int(cand[i]), float(raw[i])) for i in top]


def explain(request: PrerankRequest, snapshot: IndexSnapshot, model: PreRankModel, item_ids) -> dict:
    cand, raw, dots, feats = score_candidates(
        PrerankRequest(request.query, request.context, request.sequence, list(item_ids), request.n_out),
        snapshot, model)
    return {int(i): ScoreBreakdown(float(d), f, float(r), sigmoid(r) if np.isfinite(r) else 0.0)
            for i, r, d, f in zip(cand, raw, dots, feats)}


# ---------------------------------------------------------------------------
# request/response service: one JSON object per line


class BadRequest(PrerankError, ValueError):
    code = "BAD_REQUEST"


class ServingState:
    """Holds the live ``(snapshot, model, tree)``; ``swap`` replaces it atomically."""

    def __init__(self, snapshot: IndexSnapshot, model: PreRankModel, items: Optional[ItemTable] = None,
                 check_digest: bool = True):
        self.items = items
        self._lock = threading.Lock()
        self._current = None
        self.swap(snapshot, model, check_digest)

    def swap(self, snapshot: IndexSnapshot, model: PreRankModel, check_digest: bool = True) -> None:
        if check_digest and snapshot.model_digest and snapshot.model_digest != model.digest():
            raise DigestMismatch("index was built with a different model checkpoint")
        model.eval()
        state = (snapshot, model, compile_model(model))
        with self._lock:
            self._current = state

    @property
    def current(self) -> tuple:
        return self._current


def _parse_context(d: dict, user_id: int) -> RequestContext:
    return RequestContext(
        user_id=user_id,
        country=str(d.get("country", "US")),
        device=Device(d.get("device", "mobile")),
        language=str(d.get("language", "en")),
        age_bucket=int(d.get("age_bucket", 0)),
        gender_bucket=int(d.get("gender_bucket", 0)),
    )


def _parse_sequence(raw, items: Optional[ItemTable], dim: int) -> list:
    out = []
    for entry in raw or []:
        if "embedding" in entry:
            emb = np.asarray(entry["embedding"], dtype=np.float32)
        elif items is not None and "item" in entry:
            emb = items.content[items.row(int(entry["item"]))].astype(np.float32)
        else:
            raise BadRequest("sequence entries need an embedding or a known item")
        if emb.shape != (dim,):
            raise BadRequest(f"sequence embedding must have {dim} values")
        out.append(SequenceEntry(emb, ActionType(entry.get("action", "save")), float(entry.get("age", 0))))
    return out


def parse_request(line: str, state: ServingState) -> tuple:
    try:
        d = json.loads(line)
    except json.JSONDecodeError as exc:
        raise BadRequest(f"not JSON: {exc.msg}") from None
    if not isinstance(d, dict):
        raise BadRequest("request must be a JSON object")
    rid = d.get("request_id")
    try:
        if rid is None:
            raise BadRequest("missing request_id")
        _, model, _ = state.current
        ctx_raw = d.get("context") or {}
        ctx = _parse_context(ctx_raw, int(ctx_raw.get("user_id", 0)))
        cands = d.get("candidates", "@all")
        if cands == "@all":
            cands = None
        elif not isinstance(cands, list):
            raise BadRequest("candidates must be a list or \"@all\"")
        else:
            cands = [int(c) for c in cands]
        seq = _parse_sequence(d.get("sequence"), state.items, model.cfg.item_embed_dim)
        req = PrerankRequest(str(d["query"]), ctx, seq, cands, int(d.get("n_out", 1000)))
        return rid, req, bool(d.get("explain", False))
    except BadRequest as exc:
        exc.request_id = rid
        raise
    except (KeyError, ValueError, TypeError, PrerankError) as exc:
        err = BadRequest(f"{type(exc).__name__}: {exc}")
        err.request_id = rid
        raise err from None


def handle_line(line: str, state: ServingState) -> str:
    """Answer one request line with one response line (never raises)."""
    rid = None
    try:
        rid, req, want_explain = parse_request(line, state)
        snapshot, model, tree = state.current
        ranked = prerank(req, snapshot, model, tree)
        resp = {"request_id": rid, "results": [f"{i}:{s!r}" for i, s in ranked]}
        if want_explain:
            bd = explain(req, snapshot, model, [i for i, _ in ranked])
            resp["breakdown"] = [
                {"item_id": i, "dot": b.dot, "iqp": [float(x) for x in b.iqp_features],
                 "raw_score": b.raw_score, "probability": b.probability}
                for i, b in ((i, bd[i]) for i, _ in ranked)
            ]
    except BadRequest as exc:
        resp = {"request_id": getattr(exc, "request_id", rid),
                "error": {"code": exc.code, "message": str(exc)}}
    except PrerankError as exc:
        resp = {"request_id": rid, "error": {"code": exc.code, "message": str(exc)}}
    except Exception as exc:  # keep the connection usable
        log.exception("request failed")
        resp = {"request_id": rid, "error": {"code": "INTERNAL", "message": str(exc)}}
    # missing candidates score -inf, which plain JSON cannot carry
    return json.dumps(resp).replace("-Infinity", '"-inf"')


def serve_stream(state: ServingState, infile, outfile) -> None:
    for line in infile:
        if not line.strip():
            continue
        outfile.write(handle_line(line, state) + "\n")
        outfile.flush()


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace")
            if not line.strip():
                continue
            self.wfile.write((handle_line(line, self.server.state) + "\n").encode("utf-8"))
            self.wfile.flush()


class PrerankServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, state: ServingState):
        super().__init__(address, _Handler)
        self.state = state


def serve_loop(snapshot: IndexSnapshot, model: PreRankModel, port: Optional[int] = None,
               host: str = "127.0.0.1", items: Optional[ItemTable] = None) -> None:
    """Serve over TCP when ``port`` is given, else over stdin/stdout."""
    state = ServingState(snapshot, model, items)
    if port is None:
        serve_stream(state, sys.stdin, sys.stdout)
        return
    with PrerankServer((host, port), state) as server:
        log.info("serving on %s:%d", host, server.server_address[1])
        server.serve_forever()
