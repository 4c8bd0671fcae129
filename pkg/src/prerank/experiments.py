"""End-to-end offline experiments: data prep, model variants, HITS@3 reports and ablations."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .core import FULFILLING_ACTIONS, ActionType
from .dataset import DailyIQP, ExampleSet, ItemTable, audit_temporal_hygiene, build_dataset
from .iqp import DAY, DEFAULT_SLOTS, DEFAULT_WINDOWS, IQPBuilder, SmoothingConfig
from .metrics import SEGMENTS, CorpusStats, bm25_proximity, hits_at_k, segment_queries
from .model import ModelConfig, PreRankModel
from .synthetic import SyntheticConfig, SyntheticData, generate_synthetic_logs
from .training import TrainingConfig, apply_flat, parse_flat_config, train

log = logging.getLogger(__name__)

FULL, TWO_TOWER, IQP_ONLY, BM25 = "full", "two_tower", "iqp_only", "bm25"
VARIANTS = (FULL, TWO_TOWER, IQP_ONLY, BM25)
REMOVALS = ("none", "UserEngagementSequence", "CrossInteractionFeatures", "ParallelMaskNet")
EVAL_ACTIONS = (ActionType.SAVE, ActionType.LONG_CLICK, ActionType.CLICK)


@dataclass
class ExperimentConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=lambda: TrainingConfig(lr=1e-2, epochs=4.0, downsample_rate=0.3))
    warmup_days: int = 14
    train_days: int = 14
    refresh_days: int = 1
    k: int = 100
    prior_engaged: float = 1.0
    prior_requests: float = 20.0
    hits_k: int = 3

    @property
    def smoothing(self) -> SmoothingConfig:
        return SmoothingConfig(self.prior_engaged, self.prior_requests)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            synthetic=dataclasses.replace(self.synthetic, seed=seed),
            training=dataclasses.replace(self.training, seed=seed),
        )


def load_experiment_config(text: str, strict: bool = True) -> ExperimentConfig:
    """Flat ``key = value`` file; keys may be prefixed ``synthetic.``, ``model.`` or ``training.``."""
    values = parse_flat_config(text)
    cfg = ExperimentConfig()
    apply_overrides(cfg, values, strict)
    return cfg


def apply_overrides(cfg: ExperimentConfig, values: dict, strict: bool = True) -> None:
    groups: dict = {"": {}, "synthetic": {}, "model": {}, "training": {}}
    for k, v in values.items():
        prefix, _, name = k.rpartition(".")
        if prefix not in groups:
            raise ValueError(f"unknown config section {prefix!r}")
        groups[prefix][name] = v
    apply_flat(cfg.synthetic, groups["synthetic"], strict)
    apply_flat(cfg.model, groups["model"], strict)
    apply_flat(cfg.training, groups["training"], strict)
    top = dict(groups[""])
    seed = top.pop("seed", None)
    apply_flat(cfg, top, strict)
    if seed is not None:
        cfg.synthetic.seed = cfg.training.seed = int(seed)


@dataclass
class Prepared:
    config: ExperimentConfig
    data: SyntheticData
    items: ItemTable
    train: ExampleSet
    test: ExampleSet
    split_time: int
    segments: dict
    audit: dict


def prepare(cfg: ExperimentConfig, data: Optional[SyntheticData] = None) -> Prepared:
    """Generate logs, slide IQP stores day by day and build the temporal split."""
    data = data or generate_synthetic_logs(cfg.synthetic)
    start = cfg.synthetic.start_time
    first_as_of = start + cfg.warmup_days * DAY
    split_time = first_as_of + cfg.train_days * DAY
    if split_time >= data.end_time:
        raise ValueError("warmup_days + train_days leave no test period")
    items = ItemTable.from_records(data.items)
    builder = IQPBuilder(DEFAULT_WINDOWS, DEFAULT_SLOTS, data.users)
    iqp = DailyIQP(builder, data.events, data.requests, first_as_of, cfg.smoothing, cfg.k, cfg.refresh_days)
    train_set, test_set = build_dataset(
        data.events, data.requests, split_time, cfg.training.downsample_rate, iqp, items, data.users,
        seed=cfg.training.seed, min_time=first_as_of + 1,
    )
    freq: dict = {}
    for r in data.requests:
        freq[r.query] = freq.get(r.query, 0) + 1
    return Prepared(cfg, data, items, train_set, test_set, split_time, segment_queries(freq),
                    audit_temporal_hygiene(train_set, test_set, split_time))


def variant_model_config(base: ModelConfig, variant: str = FULL, removal: str = "none") -> ModelConfig:
    if variant not in VARIANTS or variant == BM25:
        raise ValueError(f"not a trainable variant: {variant}")
    if removal not in REMOVALS:
        raise ValueError(f"unknown removal {removal!r}; expected one of {', '.join(REMOVALS)}")
    cfg = dataclasses.replace(base)
    if variant == TWO_TOWER or removal == "CrossInteractionFeatures":
        cfg.iqp_features = 0
    if variant == IQP_ONLY:
        cfg.use_towers = False
    if removal == "UserEngagementSequence":
        cfg.use_sequence = False
    if removal == "ParallelMaskNet":
        cfg.use_masknet = False
    return cfg


def train_variant(prep: Prepared, variant: str = FULL, removal: str = "none",
                  on_step: Optional[Callable] = None) -> tuple:
    cfg = prep.config
    model = PreRankModel(variant_model_config(cfg.model, variant, removal), seed=cfg.training.seed)
    history = train(model, prep.train, cfg.training, on_step)
    return model, history


def score_examples(model: PreRankModel, examples: ExampleSet, batch_size: int = 2048) -> np.ndarray:
    out = np.empty(len(examples))
    model.eval()
    with torch.no_grad():
        for s in range(0, len(examples), batch_size):
            idx = np.arange(s, min(s + batch_size, len(examples)))
            b = examples.batch(idx, model.cfg)
            out[idx] = model(b.query, b.item, b.iqp)[0].double().numpy()
    return out


def score_with_index(snapshot, model: PreRankModel, examples: ExampleSet) -> np.ndarray:
    """Score each request's impressed candidates through the serving path.

    IQP features come from the snapshot's store, so it must be sealed before
    the earliest example.
    """
    from .serving import PrerankRequest, compile_model, score_candidates
    from .dataset import FeatureLeakage

    if len(examples) and snapshot.iqp.as_of >= int(examples.ts.min()):
        raise FeatureLeakage("index IQP store is not sealed before the evaluated examples")
    tree = compile_model(model)
    out = np.empty(len(examples))
    item_ids = examples.item_ids()
    for idx in examples.request_groups():
        j = int(idx[0])
        user = int(examples.user[j])
        req = PrerankRequest(
            examples.queries[int(examples.query_idx[j])].text,
            examples.context(user),
            examples.history.entries(user, int(examples.ts[j]), model.cfg.seq_max_len) if model.cfg.use_sequence else [],
            [int(i) for i in item_ids[idx]],
            len(idx),
        )
        out[idx] = score_candidates(req, snapshot, model, tree)[1]
    return out


def score_bm25(examples: ExampleSet, items: ItemTable) -> np.ndarray:
    stats = CorpusStats.from_texts(items.texts)
    cache: dict = {}
    out = np.empty(len(examples))
    for j in range(len(examples)):
        key = (int(examples.query_idx[j]), int(examples.item_row[j]))
        if key not in cache:
            cache[key] = bm25_proximity(examples.queries[key[0]], items.texts[key[1]], stats)
        out[j] = cache[key]
    return out


@dataclass
class HitsReport:
    """Mean HITS@k per (segment, label); label ``unified`` or an action value."""

    values: dict
    counts: dict

    def get(self, segment: str = "ALL", label: str = "unified") -> float:
        return self.values.get((segment, label), float("nan"))


def evaluate_hits(scores: np.ndarray, examples: ExampleSet, segments: dict, k: int = 3,
                  actions: Sequence[ActionType] = EVAL_ACTIONS) -> HitsReport:
    """HITS@k per request over the impressed candidates, overall, per segment and per action label."""
    labels = {"unified": examples.label}
    for a in actions:
        labels[a.value] = (examples.actions >> a.index) & 1
    item_ids = examples.item_ids()
    sums: dict = {}
    counts: dict = {}
    for idx in examples.request_groups():
        seg = segments.get(examples.queries[int(examples.query_idx[idx[0]])], "SINGLE")
        for name, lab in labels.items():
            h = hits_at_k(scores[idx], lab[idx], k, item_ids[idx])
            if h is None:
                continue
            for s in ("ALL", seg):
                sums[(s, name)] = sums.get((s, name), 0) + h
                counts[(s, name)] = counts.get((s, name), 0) + 1
    return HitsReport({key: sums[key] / counts[key] for key in sums}, counts)


def run_variants(prep: Prepared, variants: Sequence[str] = VARIANTS) -> dict:
    """``{variant: HitsReport}`` on the test split."""
    out = {}
    for v in variants:
        if v == BM25:
            scores = score_bm25(prep.test, prep.items)
        else:
            model, _ = train_variant(prep, v)
            scores = score_examples(model, prep.test)
        out[v] = evaluate_hits(scores, prep.test, prep.segments, prep.config.hits_k)
        log.info("%s HITS@%d = %.4f", v, prep.config.hits_k, out[v].get())
    return out


def ablation_run(prep: Prepared, removal: str, base: Optional[HitsReport] = None) -> tuple:
    """Train the full model without ``removal`` and report ``(base, ablated)`` HitsReports."""
    if base is None:
        model, _ = train_variant(prep, FULL)
        base = evaluate_hits(score_examples(model, prep.test), prep.test, prep.segments, prep.config.hits_k)
    if removal == "none":
        return base, base
    model, _ = train_variant(prep, FULL, removal)
    ablated = evaluate_hits(score_examples(model, prep.test), prep.test, prep.segments, prep.config.hits_k)
    return base, ablated


def relative_delta(value: float, base: float) -> float:
    if not base or math.isnan(base) or math.isnan(value):
        return float("nan")
    return (value - base) / base


@dataclass
class ReportRow:
    metric: str
    segment: str
    variant: str
    value: float
    delta_vs_base: float


def report_rows(reports: dict, base: str, k: int = 3, segments: Sequence[str] = ("ALL",) + SEGMENTS,
                labels: Sequence[str] = ("unified",) + tuple(a.value for a in EVAL_ACTIONS)) -> list:
    rows = []
    for label in labels:
        metric = f"HITS@{k}" if label == "unified" else f"HITS@{k}:{label}"
        for seg in segments:
            b = reports[base].get(seg, label)
            for name, rep in reports.items():
                v = rep.get(seg, label)
                if math.isnan(v):
                    continue
                rows.append(ReportRow(metric, seg, name, v, relative_delta(v, b)))
    return rows


def write_report(path, rows: Sequence[ReportRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("metric\tsegment\tvariant\tvalue\tdelta_vs_base\n")
        for r in rows:
            fh.write(f"{r.metric}\t{r.segment}\t{r.variant}\t{r.value:.6f}\t{r.delta_vs_base:.6f}\n")


def read_report(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            m, s, v, val, d = line.rstrip("\n").split("\t")
            rows.append(ReportRow(m, s, v, float(val), float(d)))
    return rows


def crossover_holds(reports: dict) -> dict:
    """The directional pattern checks between the full, two-tower and IQP-only variants."""
    f, t, i = reports[FULL], reports[TWO_TOWER], reports[IQP_ONLY]
    return {
        "full_beats_two_tower": f.get() > t.get(),
        "full_beats_iqp_only": f.get() > i.get(),
        "iqp_only_wins_head": i.get("HEAD") > t.get("HEAD"),
        "two_tower_wins_single": t.get("SINGLE") > i.get("SINGLE"),
    }


__all__ = [
    "ExperimentConfig", "Prepared", "HitsReport", "ReportRow", "prepare", "train_variant", "score_examples",
    "score_bm25", "evaluate_hits", "run_variants", "ablation_run", "report_rows", "write_report", "read_report",
    "crossover_holds", "variant_model_config", "load_experiment_config", "apply_overrides", "FULL", "TWO_TOWER",
    "IQP_ONLY", "BM25", "VARIANTS", "REMOVALS", "FULFILLING_ACTIONS",
]
