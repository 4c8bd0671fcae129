"""Query tower, item tower and the affine projection that mixes the tower
dot product with IQP cross-interaction features."""

from __future__ import annotations

import bisect
import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .core import ActionType, Device, PrerankError, QueryKey, RequestContext, stable_hash64

# upper edges (seconds) of the engagement-age buckets <1h, <1d, <7d, <30d, >=30d
TIME_BUCKET_EDGES = (3600, 86400, 7 * 86400, 30 * 86400)
N_TIME_BUCKETS = len(TIME_BUCKET_EDGES) + 1
N_ACTIONS = len(ActionType)
CONTEXT_FIELDS = ("country", "device", "language", "age", "gender")


class DimensionMismatch(PrerankError, ValueError):
    code = "DIMENSION_MISMATCH"


class CheckpointError(PrerankError, ValueError):
    code = "BAD_CHECKPOINT"


def time_bucket(age_seconds: float) -> int:
    if age_seconds < 0:
        raise ValueError("engagement age must be nonnegative")
    return bisect.bisect_right(TIME_BUCKET_EDGES, age_seconds)


@dataclass
class ModelConfig:
    embed_dim: int = 64
    seq_max_len: int = 100
    item_embed_dim: int = 32
    action_embed_dim: int = 8
    time_embed_dim: int = 8
    countries: tuple = ("US", "GB", "FR", "DE", "BR", "JP", "IN", "MX")
    languages: tuple = ("en", "fr", "de", "pt", "ja", "hi", "es")
    n_age_buckets: int = 8
    n_gender_buckets: int = 3
    context_embed_dim: int = 4
    token_buckets: int = 4096
    token_dim: int = 32
    item_id_buckets: int = 4096
    item_id_dim: int = 32
    n_item_rates: int = 2
    content_dim: int = 32
    masknet_blocks: int = 2
    mask_hidden_dim: int = 64
    block_dim: int = 64
    query_hidden: tuple = (128,)
    item_hidden: tuple = (128,)
    iqp_features: int = 7
    use_sequence: bool = True
    use_masknet: bool = True
    use_towers: bool = True

    def __post_init__(self):
        self.countries = tuple(self.countries)
        self.languages = tuple(self.languages)
        self.query_hidden = tuple(int(h) for h in self.query_hidden)
        self.item_hidden = tuple(int(h) for h in self.item_hidden)
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and f.name != "iqp_features" and v <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.iqp_features < 0:
            raise ValueError("iqp_features must be >= 0")
        if not self.use_towers and self.iqp_features == 0:
            raise ValueError("a model needs towers or IQP features")

    @property
    def entry_dim(self) -> int:
        return self.item_embed_dim + self.action_embed_dim + self.time_embed_dim

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# input packing


@dataclass
class SequenceEntry:
    item_embedding: np.ndarray
    action: ActionType
    age_seconds: float

    def __post_init__(self):
        if self.age_seconds < 0:
            raise ValueError("age_seconds must be >= 0")


@dataclass
class ItemFeatures:
    item_id: int
    rates: np.ndarray
    content: np.ndarray


class QueryBatch(NamedTuple):
    tokens: torch.Tensor  # [B, T] long
    token_mask: torch.Tensor  # [B, T] float
    context: torch.Tensor  # [B, 5] long
    seq_items: torch.Tensor  # [B, L, item_embed_dim]
    seq_actions: torch.Tensor  # [B, L] long
    seq_buckets: torch.Tensor  # [B, L] long
    seq_mask: torch.Tensor  # [B, L] bool


class ItemBatch(NamedTuple):
    item_ids: torch.Tensor  # [B] long, already bucketed
    rates: torch.Tensor  # [B, R]
    content: torch.Tensor  # [B, C]


@lru_cache(maxsize=1 << 16)
def _token_hashes(text: str) -> tuple:
    return tuple(stable_hash64(t) for t in text.split(" "))


def item_bucket(item_id: int, buckets: int) -> int:
    return (item_id * 0x9E3779B97F4A7C15 % (1 << 64)) % buckets


def context_codes(cfg: ModelConfig, ctx: RequestContext) -> list:
    """Vocabulary indices; 0 is reserved for out-of-vocabulary values."""

    def lookup(vocab, value):
        try:
            return vocab.index(value) + 1
        except ValueError:
            return 0

    age = ctx.age_bucket + 1 if 0 <= ctx.age_bucket < cfg.n_age_buckets else 0
    gender = ctx.gender_bucket + 1 if 0 <= ctx.gender_bucket < cfg.n_gender_buckets else 0
    device = list(Device).index(ctx.device) + 1
    return [lookup(cfg.countries, ctx.country), device, lookup(cfg.languages, ctx.language), age, gender]


def pack_queries(
    cfg: ModelConfig,
    queries: Sequence[QueryKey],
    contexts: Sequence[RequestContext],
    sequences: Sequence[tuple],
    dtype=torch.float32,
) -> QueryBatch:
    """Build a QueryBatch.

    Each sequence is ``(item_embeddings [n, d], action_indices [n], ages [n])``
    ordered oldest first; only the last ``seq_max_len`` entries are kept.
    """
    b = len(queries)
    toks = [_token_hashes(q.text) for q in queries]
    t = max(len(x) for x in toks) if toks else 1
    tokens = np.zeros((b, t), dtype=np.int64)
    mask = np.zeros((b, t), dtype=np.float64)
    for i, hs in enumerate(toks):
        tokens[i, : len(hs)] = [h % cfg.token_buckets for h in hs]
        mask[i, : len(hs)] = 1.0
    ctx = np.array([context_codes(cfg, c) for c in contexts], dtype=np.int64).reshape(b, 5)
    lengths = [min(len(s[1]), cfg.seq_max_len) for s in sequences]
    length = max([1] + lengths)
    items = np.zeros((b, length, cfg.item_embed_dim), dtype=np.float64)
    actions = np.zeros((b, length), dtype=np.int64)
    buckets = np.zeros((b, length), dtype=np.int64)
    smask = np.zeros((b, length), dtype=bool)
    for i, (emb, act, age) in enumerate(sequences):
        n = lengths[i]
        if n == 0:
            continue
        items[i, :n] = np.asarray(emb)[-n:]
        actions[i, :n] = np.asarray(act)[-n:]
        buckets[i, :n] = np.searchsorted(TIME_BUCKET_EDGES, np.asarray(age)[-n:], side="right")
        smask[i, :n] = True
    return QueryBatch(
        torch.from_numpy(tokens),
        torch.from_numpy(mask).to(dtype),
        torch.from_numpy(ctx),
        torch.from_numpy(items).to(dtype),
        torch.from_numpy(actions),
        torch.from_numpy(buckets),
        torch.from_numpy(smask),
    )


def sequence_arrays(entries: Sequence[SequenceEntry], dim: int) -> tuple:
    if not entries:
        return np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0)
    emb = np.stack([np.asarray(e.item_embedding, dtype=np.float64) for e in entries])
    if emb.shape[1] != dim:
        raise DimensionMismatch(f"sequence item embedding has dim {emb.shape[1]}, expected {dim}")
    return emb, np.array([e.action.index for e in entries]), np.array([e.age_seconds for e in entries], float)


def pack_items(cfg: ModelConfig, features: Sequence[ItemFeatures], dtype=torch.float32) -> ItemBatch:
    ids = np.array([item_bucket(f.item_id, cfg.item_id_buckets) for f in features], dtype=np.int64)
    rates = np.array([np.asarray(f.rates, float) for f in features]).reshape(len(features), cfg.n_item_rates)
    content = np.array([np.asarray(f.content, float) for f in features]).reshape(len(features), cfg.content_dim)
    return ItemBatch(torch.from_numpy(ids), torch.from_numpy(rates).to(dtype), torch.from_numpy(content).to(dtype))


# ---------------------------------------------------------------------------
# modules


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``; all-masked rows give zeros."""
    neg = torch.finfo(logits.dtype).min
    z = logits.masked_fill(~mask, neg)
    z = z - z.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z) * mask
    denom = e.sum(dim=-1, keepdim=True)
    return e / torch.where(denom > 0, denom, torch.ones_like(denom))


class TokenEmbedder(nn.Module):
    def __init__(self, buckets: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(buckets, dim)

    def forward(self, tokens, mask):
        rows = self.table(tokens) * mask.unsqueeze(-1)
        return rows.sum(1) / mask.sum(1, keepdim=True).clamp_min(1.0)


class SequenceEmbedder(nn.Module):
    """Learned weighted pooling and query cross attention over the engagement sequence."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.entry_dim
        self.action_table = nn.Embedding(N_ACTIONS, cfg.action_embed_dim)
        self.time_table = nn.Embedding(N_TIME_BUCKETS, cfg.time_embed_dim)
        self.pool_score = nn.Parameter(torch.zeros(d))
        self.time_bias = nn.Parameter(torch.zeros(N_TIME_BUCKETS))
        self.attn = nn.Parameter(torch.zeros(cfg.token_dim, d))
        self.scale = 1.0 / math.sqrt(d)

    def entries(self, batch: QueryBatch) -> torch.Tensor:
        return torch.cat(
            [batch.seq_items, self.action_table(batch.seq_actions), self.time_table(batch.seq_buckets)], dim=-1
        )

    def pool_weights(self, e, buckets, mask):
        return masked_softmax(e @ self.pool_score + self.time_bias[buckets], mask)

    def attention_weights(self, e, q, mask):
        logits = torch.einsum("bt,td,bld->bl", q, self.attn, e) * self.scale
        return masked_softmax(logits, mask)

    def weighted_pool(self, e, buckets, mask):
        return (self.pool_weights(e, buckets, mask).unsqueeze(-1) * e).sum(1)

    def cross_attention(self, e, q, mask):
        return (self.attention_weights(e, q, mask).unsqueeze(-1) * e).sum(1)


class MaskNetBlock(nn.Module):
    """``relu(transform(x * softplus(mask_mlp(x))))``."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.mask_in = nn.Linear(in_dim, hidden_dim)
        self.mask_out = nn.Linear(hidden_dim, in_dim)
        self.transform = nn.Linear(in_dim, out_dim)

    def mask(self, x):
        return F.softplus(self.mask_out(F.relu(self.mask_in(x))))

    def forward(self, x):
        return F.relu(self.transform(x * self.mask(x)))


class ParallelMaskNet(nn.Module):
    def __init__(self, in_dim: int, blocks: int, hidden_dim: int, out_dim: int):
        super().__init__()
        self.blocks = nn.ModuleList(MaskNetBlock(in_dim, hidden_dim, out_dim) for _ in range(blocks))
        self.out_dim = blocks * out_dim

    def forward(self, x):
        return torch.cat([blk(x) for blk in self.blocks], dim=-1)


class Encoder(nn.Module):
    """Feature crossing (optional parallel MaskNet) then a ReLU MLP ending in ``embed_dim``."""

    def __init__(self, in_dim: int, hidden: Sequence[int], cfg: ModelConfig):
        super().__init__()
        self.masknet = None
        if cfg.use_masknet:
            self.masknet = ParallelMaskNet(in_dim, cfg.masknet_blocks, cfg.mask_hidden_dim, cfg.block_dim)
            in_dim = self.masknet.out_dim
        layers = []
        for width in hidden:
            layers += [nn.Linear(in_dim, width), nn.ReLU()]
            in_dim = width
        layers.append(nn.Linear(in_dim, cfg.embed_dim))
        self.mlp = nn.Sequential(*layers)

    def forward(self, x):
        if self.masknet is not None:
            x = self.masknet(x)
        return self.mlp(x)


class QueryTower(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tokens = TokenEmbedder(cfg.token_buckets, cfg.token_dim)
        sizes = (len(cfg.countries) + 1, len(Device) + 1, len(cfg.languages) + 1, cfg.n_age_buckets + 1,
                 cfg.n_gender_buckets + 1)
        self.context_tables = nn.ModuleList(nn.Embedding(n, cfg.context_embed_dim) for n in sizes)
        in_dim = cfg.token_dim + len(sizes) * cfg.context_embed_dim
        self.sequence = None
        if cfg.use_sequence:
            self.sequence = SequenceEmbedder(cfg)
            in_dim += 2 * cfg.entry_dim
        self.encoder = Encoder(in_dim, cfg.query_hidden, cfg)

    def forward(self, batch: QueryBatch):
        q = self.tokens(batch.tokens, batch.token_mask)
        parts = [q] + [table(batch.context[:, i]) for i, table in enumerate(self.context_tables)]
        if self.sequence is not None:
            e = self.sequence.entries(batch)
            parts.append(self.sequence.weighted_pool(e, batch.seq_buckets, batch.seq_mask))
            parts.append(self.sequence.cross_attention(e, q, batch.seq_mask))
        return self.encoder(torch.cat(parts, dim=-1))


class ItemTower(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ids = nn.Embedding(cfg.item_id_buckets, cfg.item_id_dim)
        self.encoder = Encoder(cfg.item_id_dim + cfg.n_item_rates + cfg.content_dim, cfg.item_hidden, cfg)

    def forward(self, batch: ItemBatch):
        return self.encoder(torch.cat([self.ids(batch.item_ids), batch.rates, batch.content], dim=-1))


class Projection(nn.Module):
    """Raw score: weighted dot product plus weighted IQP features plus a bias."""

    def __init__(self, iqp_features: int, with_dot: bool = True):
        super().__init__()
        self.dot_weight = nn.Parameter(torch.ones(1)) if with_dot else None
        self.iqp_weight = nn.Parameter(torch.zeros(iqp_features)) if iqp_features else None
        self.bias = nn.Parameter(torch.zeros(1))

    def forward(self, dot: Optional[torch.Tensor], iqp: Optional[torch.Tensor]):
        raw = self.bias.expand(iqp.shape[0] if dot is None else dot.shape[0])
        if self.dot_weight is not None:
            raw = raw + self.dot_weight * dot
        if self.iqp_weight is not None:
            raw = raw + iqp @ self.iqp_weight
        return raw

    def weights(self) -> np.ndarray:
        """Dot weight followed by one weight per IQP feature; the dot weight is 0 when the dot product is absent."""
        w0 = 0.0 if self.dot_weight is None else float(self.dot_weight.detach()[0])
        rest = [] if self.iqp_weight is None else self.iqp_weight.detach().double().tolist()
        return np.array([w0] + rest)


class ScoreBreakdown(NamedTuple):
    dot: float
    iqp_features: np.ndarray
    raw_score: float
    probability: float


class PreRankModel(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.query_tower = QueryTower(cfg) if cfg.use_towers else None
        self.item_tower = ItemTower(cfg) if cfg.use_towers else None
        self.projection = Projection(cfg.iqp_features, with_dot=cfg.use_towers)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform init in ``±1/sqrt(fan_in)``; embedding rows count as fan-in = row width."""
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                fan_in = p.shape[1]
            elif name.endswith("time_bias") or name == "projection.bias":
                nn.init.zeros_(p)
                continue
            elif name.endswith(".bias"):
                fan_in = self._fan_in_for_bias(name)
            else:
                fan_in = p.shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                nn.init.uniform_(p, -bound, bound, generator=g)
        if self.projection.dot_weight is not None:
            with torch.no_grad():
                self.projection.dot_weight.fill_(1.0)

    def _fan_in_for_bias(self, name: str) -> int:
        module = self.get_submodule(name.rsplit(".", 1)[0])
        return module.in_features

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- forward pieces --------------------------------------------------------

    def embed_query(self, batch: QueryBatch) -> torch.Tensor:
        return self.query_tower(batch)

    def embed_item(self, batch: ItemBatch) -> torch.Tensor:
        return self.item_tower(batch)

    def forward(self, qb: Optional[QueryBatch], ib: Optional[ItemBatch], iqp: Optional[torch.Tensor]):
        """Returns ``(raw_scores, q_emb, i_emb)``; embeddings are None without towers."""
        q_emb = i_emb = dot = None
        if self.cfg.use_towers:
            q_emb = self.embed_query(qb)
            i_emb = self.embed_item(ib)
            dot = (q_emb * i_emb).sum(-1)
        if self.cfg.iqp_features == 0:
            iqp = None
        return self.projection(dot, iqp), q_emb, i_emb

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PreRankModel":
        with open(path, "rb") as fh:
            return load_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# direct scoring helpers


def embed_tokens(model: PreRankModel, query: QueryKey) -> np.ndarray:
    cfg = model.cfg
    b = pack_queries(cfg, [query], [RequestContext(0)], [sequence_arrays([], cfg.item_embed_dim)])
    with torch.no_grad():
        return model.query_tower.tokens(b.tokens, b.token_mask)[0].double().numpy()


def score(q_emb, i_emb, iqp, weights, bias: float) -> ScoreBreakdown:
    """Final pre-ranking score from tower outputs and IQP features.

    ``weights[0]`` multiplies the dot product; the rest multiply the IQP features.
    """
    q = np.asarray(q_emb, dtype=np.float64)
    i = np.asarray(i_emb, dtype=np.float64)
    f = np.asarray(iqp, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if q.shape != i.shape or q.ndim != 1:
        raise DimensionMismatch(f"embedding shapes {q.shape} and {i.shape} differ")
    if w.shape != (f.shape[0] + 1,):
        raise DimensionMismatch(f"{w.shape[0]} projection weights for {f.shape[0]} IQP features")
    dot = float(q @ i)
    raw = float(w[0] * dot + f @ w[1:] + bias)
    return ScoreBreakdown(dot, f, raw, sigmoid(raw))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def flop_count(embed_dim: int = 64, iqp_features: int = 7, with_interactions: bool = True) -> int:
    """Online FLOPs per candidate: an n-term inner product costs 2n - 1; bias adds are free.

    Without interactions the score is the bare dot product.
    """
    if embed_dim <= 0 or iqp_features < 0:
        raise ValueError("dimensions must be positive")
    flops = 2 * embed_dim - 1
    if with_interactions:
        flops += 2 * (iqp_features + 1) - 1
    return flops


# ---------------------------------------------------------------------------
# checkpoint format:
#   b"PRCKPT1\n" | u32 config-json length | config json | u32 tensor count |
#   per tensor: u16 name length, name, u8 ndim, u32 dims..., float32 LE data


def checkpoint_bytes(model: PreRankModel) -> bytes:
    buf = io.BytesIO()
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(b"PRCKPT1\n")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def load_checkpoint(data: bytes) -> PreRankModel:
    if not data.startswith(b"PRCKPT1\n"):
        raise CheckpointError("bad checkpoint magic")
    pos = 8
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cfg = ModelConfig.from_dict(json.loads(data[pos : pos + n]))
    pos += n
    model = PreRankModel(cfg)
    expected = model.state_dict()
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name not in expected or tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(f"unexpected tensor {name} {shape}")
        state[name] = torch.from_numpy(arr.copy())
    if set(state) != set(expected):
        raise CheckpointError("checkpoint is missing tensors")
    model.load_state_dict(state)
    return model
