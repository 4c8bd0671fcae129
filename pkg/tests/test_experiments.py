import dataclasses
import math

import numpy as np
import pytest

from prerank.dataset import DailyIQP, FeatureLeakage
from prerank.experiments import (
    BM25,
    FULL,
    IQP_ONLY,
    TWO_TOWER,
    ExperimentConfig,
    HitsReport,
    ablation_run,
    apply_overrides,
    crossover_holds,
    evaluate_hits,
    load_experiment_config,
    prepare,
    read_report,
    relative_delta,
    report_rows,
    run_variants,
    score_bm25,
    score_examples,
    score_with_index,
    train_variant,
    variant_model_config,
    write_report,
)
from prerank.iqp import DAY, DEFAULT_SLOTS, DEFAULT_WINDOWS, IQPBuilder
from prerank.model import ModelConfig
from prerank.serving import batch_inference, build_index
from prerank.synthetic import SyntheticConfig
from prerank.training import TrainingConfig


def small_config(seed=5):
    return ExperimentConfig(
        synthetic=SyntheticConfig(n_items=150, n_queries=80, n_users=40, days=9, requests_per_day=80, seed=seed),
        model=ModelConfig(embed_dim=16, query_hidden=(32,), item_hidden=(32,)),
        training=TrainingConfig(lr=1e-2, epochs=1.0, downsample_rate=0.5, seed=seed),
        warmup_days=3,
        train_days=4,
    )


@pytest.fixture(scope="module")
def prep():
    return prepare(small_config())


def test_prepare_split_is_clean(prep):
    assert len(prep.train) and len(prep.test)
    assert prep.train.ts.max() <= prep.split_time < prep.test.ts.min()
    assert prep.audit and not any(prep.audit.values())
    assert set(prep.segments.values()) <= {"HEAD", "TORSO", "TAIL", "SINGLE"}


def test_prepare_rejects_empty_test_period():
    cfg = small_config()
    cfg.train_days = 10
    with pytest.raises(ValueError):
        prepare(cfg)


def test_variant_configs():
    base = ModelConfig()
    assert variant_model_config(base, TWO_TOWER).iqp_features == 0
    assert variant_model_config(base, IQP_ONLY).use_towers is False
    assert variant_model_config(base, FULL, "UserEngagementSequence").use_sequence is False
    assert variant_model_config(base, FULL, "ParallelMaskNet").use_masknet is False
    assert variant_model_config(base, FULL, "CrossInteractionFeatures").iqp_features == 0
    assert variant_model_config(base) == base
    with pytest.raises(ValueError):
        variant_model_config(base, BM25)
    with pytest.raises(ValueError):
        variant_model_config(base, FULL, "Everything")


def test_removing_nothing_gives_zero_delta(prep):
    base, ablated = ablation_run(prep, "none")
    rows = report_rows({"base": base, "none": ablated}, "base")
    assert rows
    for r in rows:
        assert r.delta_vs_base == 0 if r.value else math.isnan(r.delta_vs_base)


def test_hits_with_oracle_scores_is_one(prep):
    rep = evaluate_hits(prep.test.label.astype(float), prep.test, prep.segments)
    assert rep.get() == 1.0
    rev = evaluate_hits(-prep.test.label.astype(float), prep.test, prep.segments)
    assert rev.get() < 1.0
    assert sum(rep.counts[(s, "unified")] for s in ("HEAD", "TORSO", "TAIL", "SINGLE")
               if (s, "unified") in rep.counts) == rep.counts[("ALL", "unified")]


def test_serving_path_matches_training_forward(prep):
    cfg = prep.config
    model, history = train_variant(prep, FULL)
    assert history
    daily = DailyIQP(IQPBuilder(DEFAULT_WINDOWS, DEFAULT_SLOTS, prep.data.users), prep.data.events,
                     prep.data.requests, cfg.synthetic.start_time + cfg.warmup_days * DAY, cfg.smoothing, cfg.k)
    store = daily.store_for(prep.split_time + 1)
    assert store.as_of == prep.split_time
    day1 = prep.test.subset(np.flatnonzero(prep.test.ts <= prep.split_time + DAY))
    snap = build_index(batch_inference(prep.items.all_features(), model), store, model.digest())
    np.testing.assert_allclose(score_with_index(snap, model, day1), score_examples(model, day1), atol=1e-4)
    with pytest.raises(FeatureLeakage):
        score_with_index(snap, model, prep.train)


def test_run_variants_and_report_round_trip(prep, tmp_path):
    reports = run_variants(prep, (FULL, BM25))
    assert set(reports) == {FULL, BM25}
    rows = report_rows(reports, FULL)
    path = tmp_path / "r.tsv"
    write_report(path, rows)
    assert path.read_text().splitlines()[0] == "metric\tsegment\tvariant\tvalue\tdelta_vs_base"
    back = read_report(path)
    assert len(back) == len(rows)
    for a, b in zip(back, rows):
        assert (a.metric, a.segment, a.variant) == (b.metric, b.segment, b.variant)
        assert abs(a.value - b.value) <= 5e-7
    assert {r.metric for r in rows} >= {"HITS@3", "HITS@3:save"}


def test_bm25_scores_are_deterministic(prep):
    a = score_bm25(prep.test, prep.items)
    assert np.array_equal(a, score_bm25(prep.test, prep.items))


def test_relative_delta():
    assert relative_delta(0.55, 0.5) == pytest.approx(0.1)
    assert math.isnan(relative_delta(0.5, 0.0))


def test_crossover_checks():
    def rep(all_, head, single):
        return HitsReport({("ALL", "unified"): all_, ("HEAD", "unified"): head, ("SINGLE", "unified"): single}, {})

    out = crossover_holds({FULL: rep(0.7, 0.8, 0.6), TWO_TOWER: rep(0.6, 0.7, 0.6), IQP_ONLY: rep(0.65, 0.8, 0.5)})
    assert all(out.values())
    out = crossover_holds({FULL: rep(0.6, 0.8, 0.6), TWO_TOWER: rep(0.6, 0.9, 0.4), IQP_ONLY: rep(0.65, 0.8, 0.5)})
    assert not any(out.values())


def test_config_overrides():
    cfg = load_experiment_config("seed = 9\ntraining.lr = 0.5\nmodel.embed_dim = 8\nwarmup_days = 2\n")
    assert cfg.synthetic.seed == cfg.training.seed == 9
    assert cfg.training.lr == 0.5 and cfg.model.embed_dim == 8 and cfg.warmup_days == 2
    with pytest.raises(ValueError):
        apply_overrides(ExperimentConfig(), {"nosuch.thing": "1"})
    assert dataclasses.replace(cfg).with_seed(3).training.seed == 3
