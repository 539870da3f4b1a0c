"""Baseline stochastic training loop with plateau scheduling and hook points.

The loop is the host for the embedding scheduler and the moving-average
wrapper: hooks fire after every optimizer step and at every epoch boundary.
Given identical configs and seed the produced metrics are bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import toymodel
from .paramstore import FlatParams
from .seeds import child_seed
from .toymodel import QUANT_ROUND, Batch, ToyCodecConfig

METRICS_HEADER = ["epoch", "train_loss", "eval_loss", "eval_rate", "eval_distortion",
                  "trainable", "embedded_frac", "lr"]

RULE_ADAM = "adam"
RULE_SGD = "sgd"


@dataclass
class TrainConfig:
    epochs: int = 70
    steps_per_epoch: int = 30
    batch_size: int = 16
    learning_rate: float = 1e-4
    lr_factor: float = 0.5
    lr_patience: int = 5
    grad_clip: float = 2.0
    update_rule: str = RULE_ADAM
    eval_batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.lr_factor < 1:
            raise ValueError("lr_factor must be in (0, 1)")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        if self.update_rule not in (RULE_ADAM, RULE_SGD):
            raise ValueError(f"unknown update rule {self.update_rule!r}")


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **kw) -> None:
        self.rows.append({k: kw[k] for k in METRICS_HEADER})

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in METRICS_HEADER])

    @staticmethod
    def read_csv(path) -> "MetricsLog":
        log = MetricsLog()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                log.append(
                    epoch=int(row["epoch"]),
                    train_loss=float(row["train_loss"]),
                    eval_loss=float(row["eval_loss"]),
                    eval_rate=float(row["eval_rate"]),
                    eval_distortion=float(row["eval_distortion"]),
                    trainable=int(row["trainable"]),
                    embedded_frac=float(row["embedded_frac"]),
                    lr=float(row["lr"]),
                )
        return log


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


class OptimizerState:
    """Update-rule state; Adam moments are per-parameter and survive masking."""

    def __init__(self, n: int, rule: str, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.rule = rule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        if rule == RULE_ADAM:
            self.m = np.zeros(n)
            self.v = np.zeros(n)


def sgd_step(params: FlatParams, grad: np.ndarray, lr: float, grad_clip: float,
             mask: np.ndarray | None = None, opt: OptimizerState | None = None) -> FlatParams:
    """One masked optimizer step with global-norm gradient clipping.

    Parameters where ``mask`` is False are left untouched, including their
    Adam moments. The gradient is rescaled to norm ``grad_clip`` when it
    exceeds it; the norm is taken over the full vector before masking.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ValueError("gradient length does not match parameter count")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    norm = float(np.linalg.norm(grad))
    if norm > grad_clip:
        grad = grad * (grad_clip / norm)
    if opt is None:
        opt = OptimizerState(params.n, RULE_SGD)
    if mask is None:
        idx = slice(None)
    else:
        idx = np.asarray(mask, dtype=bool)
    if opt.rule == RULE_SGD:
        params.values[idx] -= lr * grad[idx]
    else:
        opt.step_count += 1
        t = opt.step_count
        opt.m[idx] = opt.beta1 * opt.m[idx] + (1.0 - opt.beta1) * grad[idx]
        opt.v[idx] = opt.beta2 * opt.v[idx] + (1.0 - opt.beta2) * grad[idx] ** 2
        m_hat = opt.m[idx] / (1.0 - opt.beta1**t)
        v_hat = opt.v[idx] / (1.0 - opt.beta2**t)
        params.values[idx] -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    if not np.all(np.isfinite(params.values)):
        raise FloatingPointError("non-finite parameters after optimizer step")
    return params


class PlateauScheduler:
    """Reduce-on-plateau with zero tolerance: any strict improvement resets the counter."""

    def __init__(self, lr: float, factor: float, patience: int):
        self.lr = float(lr)
        self.factor = float(factor)
        self.patience = int(patience)
        self.best: float | None = None
        self.bad_epochs = 0

    def update(self, eval_loss: float) -> float:
        if self.best is None or eval_loss < self.best:
            self.best = float(eval_loss)
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


@dataclass
class TrainHooks:
    """Callbacks the embedding/averaging machinery plugs into the loop.

    - ``trainable_mask``: returns the boolean mask of currently trainable
      parameters (True means updated by the optimizer); None means all.
    - ``post_step``: runs after every optimizer step (moving-average sampling
      and embedded-parameter reconstruction live here).
    - ``post_epoch``: runs after the epoch's steps, before evaluation
      (snapshots, coefficient updates, embedding events).
    - ``eval_params``: optionally substitutes the vector used for evaluation
      (the test-time averaging baseline evaluates its shadow weights).
    """

    trainable_mask: Callable[[], np.ndarray | None] | None = None
    post_step: Callable[[FlatParams, int, int], None] | None = None
    post_epoch: Callable[[FlatParams, int], None] | None = None
    eval_params: Callable[[FlatParams], FlatParams] | None = None


def evaluate(params: FlatParams, model_config: ToyCodecConfig, batch: Batch):
    """Deterministic eval-mode loss (rounding quantization)."""
    return toymodel.forward_loss(params, model_config, batch, quant=QUANT_ROUND)


def train(model_config: ToyCodecConfig, config: TrainConfig,
          hooks: TrainHooks | None = None,
          initial_params: FlatParams | None = None) -> tuple[MetricsLog, FlatParams]:
    """Run the full schedule and return the metrics log plus final parameters."""
    if model_config.rd_lambda <= 0:
        raise ValueError("training requires rd_lambda > 0")
    hooks = hooks or TrainHooks()
    params = initial_params.copy() if initial_params is not None else toymodel.init_params(
        model_config, child_seed(config.seed, "init"))
    n = params.n
    opt = OptimizerState(n, config.update_rule)
    sched = PlateauScheduler(config.learning_rate, config.lr_factor, config.lr_patience)
    eval_batch = toymodel.generate_batch(
        config.eval_batch_size, model_config.input_dim, child_seed(config.seed, "eval-batch"))
    metrics = MetricsLog()

    for epoch in range(1, config.epochs + 1):
        mask = hooks.trainable_mask() if hooks.trainable_mask else None
        trainable = int(mask.sum()) if mask is not None else n
        embedded_frac = 1.0 - trainable / n
        lr = sched.lr
        step_losses = np.empty(config.steps_per_epoch)
        for step in range(config.steps_per_epoch):
            batch = toymodel.generate_batch(
                config.batch_size, model_config.input_dim,
                child_seed(config.seed, "train-batch", epoch, step))
            breakdown, grad = toymodel.loss_and_grad(
                params, model_config, batch,
                noise_seed=child_seed(config.seed, "train-noise", epoch, step))
            if mask is not None:
                frozen_before = params.values[~mask].copy()
            sgd_step(params, grad, lr, config.grad_clip, mask=mask, opt=opt)
            if mask is not None and not np.array_equal(params.values[~mask], frozen_before):
                raise AssertionError("optimizer step modified a masked parameter")
            step_losses[step] = breakdown.total
            if hooks.post_step:
                hooks.post_step(params, epoch, step)
        if hooks.post_epoch:
            hooks.post_epoch(params, epoch)
        eval_vec = hooks.eval_params(params) if hooks.eval_params else params
        eval_breakdown = evaluate(eval_vec, model_config, eval_batch)
        metrics.append(
            epoch=epoch,
            train_loss=float(step_losses.mean()),
            eval_loss=eval_breakdown.total,
            eval_rate=eval_breakdown.rate_y + eval_breakdown.rate_z,
            eval_distortion=eval_breakdown.distortion,
            trainable=trainable,
            embedded_frac=embedded_frac,
            lr=lr,
        )
        sched.update(eval_breakdown.total)
    return metrics, params
