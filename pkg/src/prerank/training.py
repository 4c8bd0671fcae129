"""Joint optimization of both towers and the projection layer."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from .core import PrerankError
from .dataset import ExampleSet, TrainBatch
from .losses import LossWeights, engagement_loss_t, sampled_softmax_loss_t
from .model import PreRankModel

log = logging.getLogger(__name__)


class NonFiniteLoss(PrerankError, FloatingPointError):
    code = "NON_FINITE_LOSS"


@dataclass
class TrainingConfig:
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 256
    engagement_weight: float = 1.0
    softmax_weight: float = 0.01
    downsample_rate: float = 1.0
    split_time: int = 0
    epochs: float = 1.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.engagement_weight, self.softmax_weight)


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(int(v) if v.strip().lstrip("-").isdigit() else v.strip() for v in value.split(",") if v.strip())
    return value


def parse_flat_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_no}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def apply_flat(obj, values: dict, strict: bool = False) -> list:
    """Set matching dataclass fields from string values; returns the keys consumed."""
    used = []
    for f in dataclasses.fields(obj):
        if f.name in values:
            setattr(obj, f.name, _coerce(values[f.name], getattr(obj, f.name)))
            used.append(f.name)
    if hasattr(obj, "__post_init__"):
        obj.__post_init__()
    if strict:
        unknown = set(values) - set(used)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return used


class FrequencyEstimator:
    """Exact streaming item counts; sampling probability is count / total_seen."""

    def __init__(self):
        self.counts: dict = {}
        self.total_seen = 0

    def update(self, item_ids) -> None:
        for i in item_ids:
            i = int(i)
            self.counts[i] = self.counts.get(i, 0) + 1
        self.total_seen += len(item_ids)

    def q(self, item_ids) -> np.ndarray:
        if self.total_seen == 0:
            return np.ones(len(item_ids))
        return np.array([max(self.counts.get(int(i), 0), 1) for i in item_ids], dtype=np.float64) / self.total_seen

    def log_q(self, item_ids) -> np.ndarray:
        return np.log(self.q(item_ids))


@dataclass
class StepResult:
    step: int
    loss: float
    loss_e: float
    loss_s: float


def compute_loss(model: PreRankModel, batch: TrainBatch, weights: LossWeights, log_q=None):
    """``(loss, engagement, softmax)`` as tensors.  The softmax term uses the tower outputs directly, bypassing the projection."""
    raw, q_emb, i_emb = model(batch.query, batch.item, batch.iqp)
    labels = batch.labels.to(raw.dtype)
    l_e = engagement_loss_t(raw, labels, batch.weights.to(raw.dtype))
    l_s = raw.new_zeros(())
    if q_emb is not None and weights.softmax_weight and len(raw) >= 2:
        lq = torch.zeros(len(raw), dtype=raw.dtype) if log_q is None else torch.as_tensor(log_q, dtype=raw.dtype)
        l_s = sampled_softmax_loss_t(q_emb, i_emb, labels, lq)
    return weights.engagement_weight * l_e + weights.softmax_weight * l_s, l_e, l_s


def make_optimizer(model: PreRankModel, cfg: TrainingConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def train_step(
    model: PreRankModel,
    optimizer: torch.optim.Optimizer,
    batch: TrainBatch,
    weights: LossWeights,
    freq: Optional[FrequencyEstimator] = None,
    step: int = 0,
) -> StepResult:
    log_q = None
    if freq is not None:
        freq.update(batch.item_ids)
        log_q = freq.log_q(batch.item_ids)
    optimizer.zero_grad()
    loss, l_e, l_s = compute_loss(model, batch, weights, log_q)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"step {step}: loss={loss.item()} engagement={l_e.item()} softmax={float(l_s.detach())}")
    loss.backward()
    optimizer.step()
    return StepResult(step, loss.item(), l_e.item(), float(l_s.detach()))


def train(
    model: PreRankModel,
    data: ExampleSet,
    cfg: TrainingConfig,
    on_step: Optional[Callable[[StepResult], None]] = None,
) -> list:
    """Run ``cfg.epochs`` passes (fractional allowed) of shuffled mini-batches."""
    if not len(data):
        raise ValueError("empty training set")
    torch.set_num_threads(1)
    rng = np.random.default_rng(cfg.seed)
    optimizer = make_optimizer(model, cfg)
    freq = FrequencyEstimator()
    n = len(data)
    total_steps = max(1, math.ceil(cfg.epochs * n / cfg.batch_size))
    history = []
    order = rng.permutation(n)
    pos = 0
    model.train()
    for step in range(total_steps):
        if pos >= n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + cfg.batch_size]
        pos += cfg.batch_size
        batch = data.batch(idx, model.cfg)
        result = train_step(model, optimizer, batch, cfg.loss_weights, freq, step)
        history.append(result)
        if on_step:
            on_step(result)
        if step % 100 == 0:
            log.debug("step %d loss=%.5f engagement=%.5f softmax=%.5f", step, result.loss, result.loss_e, result.loss_s)
    model.eval()
    return history


def write_metrics_log(path, history) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\tengagement\tsoftmax\n")
        for r in history:
            fh.write(f"{r.step}\t{r.loss!r}\t{r.loss_e!r}\t{r.loss_s!r}\n")


def grad_check(
    model: PreRankModel,
    batch: TrainBatch,
    epsilon: float = 1e-5,
    weights: LossWeights = LossWeights(),
    log_q=None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central finite differences
    over every parameter element.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  Run in float64.
    """
    params = list(model.parameters())
    model.zero_grad()
    loss, _, _ = compute_loss(model, batch, weights, log_q)
    analytic = torch.autograd.grad(loss, params)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + epsilon
                up = compute_loss(model, batch, weights, log_q)[0].item()
                flat[k] = orig - epsilon
                down = compute_loss(model, batch, weights, log_q)[0].item()
                flat[k] = orig
                numeric = (up - down) / (2 * epsilon)
                a = gflat[k].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                worst = max(worst, err)
    return worst
