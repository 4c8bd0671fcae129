import numpy as np
import pytest
import torch

from conftest import TINY, tiny_batch
from prerank.dataset import ItemTable, StaticIQP, build_dataset
from prerank.iqp import DAY, IQPBuilder
from prerank.losses import LossWeights
from prerank.model import ModelConfig, PreRankModel
from prerank.training import (
    FrequencyEstimator,
    NonFiniteLoss,
    TrainingConfig,
    apply_flat,
    compute_loss,
    grad_check,
    make_optimizer,
    parse_flat_config,
    train,
    train_step,
    write_metrics_log,
)

LOG_Q = np.log([0.5, 0.25, 0.25])


def tiny_model(seed=0, **kw):
    return PreRankModel(ModelConfig(**{**TINY, **kw}), seed=seed).double()


def test_tiny_config_is_small():
    assert tiny_model().num_parameters() <= 500


def test_grad_check_full_tiny_model():
    m = tiny_model()
    assert grad_check(m, tiny_batch(m.cfg), 1e-5, LossWeights(1.0, 0.01), LOG_Q) <= 1e-4


def test_grad_check_linear_only():
    m = tiny_model(use_towers=False)
    b = tiny_batch(m.cfg)
    assert grad_check(m, b._replace(query=None, item=None), 1e-5) <= 1e-8


def test_grad_check_converges_with_smaller_step():
    # truncation error dominates at these step sizes; it shrinks quadratically
    m = tiny_model(use_towers=False)
    with torch.no_grad():
        m.projection.iqp_weight.copy_(torch.linspace(-2, 3, 7, dtype=torch.float64))
    b = tiny_batch(m.cfg)._replace(query=None, item=None)
    assert grad_check(m, b, 1e-3) < grad_check(m, b, 1e-1)


def test_softmax_loss_skips_projection():
    m = tiny_model()
    b = tiny_batch(m.cfg)
    _, _, l_s = compute_loss(m, b, LossWeights(), LOG_Q)
    grads = torch.autograd.grad(l_s, [m.projection.bias, m.projection.iqp_weight, m.projection.dot_weight],
                                allow_unused=True)
    assert all(g is None or torch.all(g == 0) for g in grads)


def test_zero_learning_rate_keeps_params():
    m = tiny_model()
    before = m.to_bytes()
    opt = make_optimizer(m, TrainingConfig(lr=0.0))
    r = train_step(m, opt, tiny_batch(m.cfg), LossWeights())
    assert m.to_bytes() == before and np.isfinite(r.loss)


def test_overfit_one_batch_decreases():
    m = tiny_model(seed=1)
    b = tiny_batch(m.cfg)
    opt = make_optimizer(m, TrainingConfig(lr=1e-2))
    losses = [train_step(m, opt, b, LossWeights(), step=s).loss for s in range(11)]
    assert all(a > c for a, c in zip(losses, losses[1:]))


def test_non_finite_loss_raises():
    m = tiny_model()
    b = tiny_batch(m.cfg)
    b = b._replace(iqp=torch.full_like(b.iqp, float("nan")))
    with pytest.raises(NonFiniteLoss):
        train_step(m, make_optimizer(m, TrainingConfig()), b, LossWeights())


def test_frequency_estimator():
    f = FrequencyEstimator()
    f.update([1, 1, 2, 3])
    np.testing.assert_allclose(f.q([1, 2, 9]), [0.5, 0.25, 0.25])
    assert f.total_seen == 4


def test_flat_config():
    vals = parse_flat_config("# comment\nlr = 0.5\nepochs=2  # trailing\nseed = 4\n")
    cfg = TrainingConfig()
    apply_flat(cfg, vals, strict=True)
    assert (cfg.lr, cfg.epochs, cfg.seed) == (0.5, 2.0, 4)
    with pytest.raises(ValueError):
        apply_flat(TrainingConfig(), {"nope": "1"}, strict=True)
    with pytest.raises(ValueError):
        parse_flat_config("just words")


def test_default_training_config():
    cfg = TrainingConfig()
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.epochs) == (1e-3, 0.9, 0.999, 1e-8, 1.5)
    assert cfg.loss_weights == LossWeights(1.0, 0.01)


def _small_dataset(small_data):
    items = ItemTable.from_records(small_data.items)
    start = small_data.config.start_time
    b = IQPBuilder(user_contexts=small_data.users)
    as_of = start + 4 * DAY
    b.build([e for e in small_data.events if e.timestamp <= as_of], [r for r in small_data.requests if r[0] <= as_of],
            as_of)
    return build_dataset(small_data.events, small_data.requests, start + 9 * DAY, 0.5, StaticIQP(b.signals()), items,
                         small_data.users, min_time=as_of + 1)


def test_training_is_deterministic(small_data, tmp_path):
    train_set, _ = _small_dataset(small_data)
    cfg = ModelConfig(embed_dim=8, query_hidden=(16,), item_hidden=(16,), mask_hidden_dim=8, block_dim=8)
    tc = TrainingConfig(seed=5, epochs=0.5, batch_size=128)
    runs = []
    for _ in range(2):
        m = PreRankModel(cfg, seed=5)
        hist = train(m, train_set, tc)
        write_metrics_log(tmp_path / "log.tsv", hist)
        runs.append((m.to_bytes(), (tmp_path / "log.tsv").read_bytes()))
    assert runs[0] == runs[1]
    assert runs[0][1].startswith(b"step\tloss\tengagement\tsoftmax\n")
