"""Likelihood training: sentence-level step, frozen document-level step, joint baseline."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .corpus import Batch, TrainingExample, make_batches
from .errors import ConfigurationError, ContractError, NumericError
from .model import Checkpoint, DocTransformer, restore_parameters
from .nn import DOCUMENT, PARTITIONS, SENTENCE, Parameter
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

STEPS = ("one", "two", "joint")


@dataclass
class ParameterPartition:
    sentence_level: list[str]
    document_level: list[str]

    @classmethod
    def of(cls, model: DocTransformer) -> "ParameterPartition":
        names = [n for n, _ in model.named_parameters()]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        return cls(model.partition_names(SENTENCE), model.partition_names(DOCUMENT))

    def names(self, tag: str) -> list[str]:
        return self.sentence_level if tag == SENTENCE else self.document_level


@dataclass
class TrainPlan:
    step: str = "one"
    max_steps: int = 1000
    token_budget: int = 600
    warmup_steps: int = 400
    lr_scale: float = 1.0
    seed: int = 0
    clip_norm: float = 5.0
    label_smoothing: float = 0.0
    log_interval: int = 50

    def __post_init__(self):
        if self.step not in STEPS:
            raise ConfigurationError(f"unknown training step {self.step!r}; use one of {STEPS}")
        if self.max_steps < 0 or self.warmup_steps < 1 or self.log_interval < 1:
            raise ConfigurationError("max_steps >= 0, warmup_steps >= 1, log_interval >= 1 required")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigurationError("label_smoothing must lie in [0, 1)")


@dataclass
class MetricRecord:
    step: int
    loss: float
    learning_rate: float
    tokens_per_sec: float

    def csv(self) -> str:
        return f"{self.step},{self.loss:.6f},{self.learning_rate:.8g},{self.tokens_per_sec:.1f}"


@dataclass
class TrainResult:
    model: DocTransformer
    step: str
    history: list[MetricRecord] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def saved_tags(self) -> tuple:
        return (SENTENCE,) if self.step == "one" else PARTITIONS

    def checkpoint(self, metadata: Optional[dict] = None) -> Checkpoint:
        """Step one stores only sentence-level parameters."""
        return Checkpoint.from_model(self.model, self.saved_tags, metadata)

    def throughput(self, skip: int = 1) -> float:
        """Mean tokens/sec over the logged intervals after the first ``skip``."""
        rates = [r.tokens_per_sec for r in self.history[skip:]] or \
            [r.tokens_per_sec for r in self.history]
        return float(np.mean(rates)) if rates else 0.0


def learning_rate(step: int, warmup: int, dim: int) -> float:
    """``dim^-0.5 * min(step^-0.5, step * warmup^-1.5)``."""
    if step < 1:
        raise ContractError(f"learning rate is defined from step 1, got {step}")
    return dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam over a fixed set of named parameters; state exists only for those."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {n: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for n, p in self.params.items()}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.state[name]
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * (p.grad * p.grad)
            self.state[name] = (m, v)
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype)


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def nll_loss(batch: Batch, model: DocTransformer, reduction: str = "mean",
             label_smoothing: float = 0.0) -> Tensor:
    """Negative log-likelihood over non-PAD target tokens."""
    logits = model.forward(batch.source, batch.source_padding, batch.target_in,
                           batch.target_padding, batch.context, batch.context_padding)
    weights = (~batch.target_padding).astype(logits.dtype)
    total = T.cross_entropy(logits, batch.target_out, weights, label_smoothing)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total * (1.0 / max(batch.target_tokens, 1))
    raise ContractError(f"unknown reduction {reduction!r}")


def evaluate_loss(model: DocTransformer, examples: Sequence[TrainingExample],
                  token_budget: int = 2000) -> float:
    """Per-token NLL over ``examples`` (dropout off, no graph)."""
    was_training = model.training
    model.eval()
    total, tokens = 0.0, 0
    try:
        with no_grad():
            for batch in make_batches(examples, token_budget):
                total += nll_loss(batch, model, "sum").item()
                tokens += batch.target_tokens
    finally:
        model.training = was_training
    return total / max(tokens, 1)


def _fit(model: DocTransformer, trainable: dict[str, Parameter],
         examples: Sequence[TrainingExample], plan: TrainPlan, step_name: str,
         on_metric: Optional[Callable[[MetricRecord], None]] = None) -> TrainResult:
    if not examples:
        raise ConfigurationError("training corpus is empty")
    batches = make_batches(examples, plan.token_budget)
    all_params = dict(model.named_parameters())
    frozen = [p for n, p in all_params.items() if n not in trainable]
    for p in frozen:
        p.requires_grad = False
    optimizer = Adam(trainable)
    order_rng = np.random.default_rng([plan.seed, 11])
    model.train(np.random.default_rng([plan.seed, 13]))
    result = TrainResult(model, step_name)
    order: list[int] = []
    window_loss, window_steps, window_tokens = 0.0, 0, 0
    window_start = start = time.perf_counter()
    try:
        for step in range(1, plan.max_steps + 1):
            if not order:
                order = list(order_rng.permutation(len(batches)))
            batch = batches[order.pop()]
            lr = plan.lr_scale * learning_rate(step, plan.warmup_steps, model.config.hidden_size)
            optimizer.zero_grad()
            loss = nll_loss(batch, model, "mean", plan.label_smoothing)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            loss.backward()
            clip_grad_norm(list(trainable.values()), plan.clip_norm)
            optimizer.step(lr)
            result.losses.append(value)
            window_loss += value
            window_steps += 1
            window_tokens += batch.source_tokens + batch.target_tokens
            if step % plan.log_interval == 0:
                now = time.perf_counter()
                record = MetricRecord(step, window_loss / window_steps, lr,
                                      window_tokens / max(now - window_start, 1e-9))
                result.history.append(record)
                logger.info("step %d loss %.4f lr %.3g tok/s %.0f", record.step,
                            record.loss, record.learning_rate, record.tokens_per_sec)
                if on_metric is not None:
                    on_metric(record)
                window_loss, window_steps, window_tokens = 0.0, 0, 0
                window_start = time.perf_counter()
    finally:
        for p in frozen:
            p.requires_grad = True
        model.eval()
    result.elapsed = time.perf_counter() - start
    return result


def train_step_one(plan: TrainPlan, model: DocTransformer,
                   examples: Sequence[TrainingExample],
                   on_metric: Optional[Callable[[MetricRecord], None]] = None) -> TrainResult:
    """Estimate sentence-level parameters with every document module inactive.

    ``examples`` should be the sentence pairs of the sentence-level corpus
    together with those of the document corpus; their contexts are ignored.
    """
    if plan.step != "one":
        raise ConfigurationError(f"plan is for step {plan.step!r}, not 'one'")
    view = model.sentence_view()
    trainable = {n: p for n, p in model.named_parameters() if p.tag == SENTENCE}
    result = _fit(view, trainable, examples, plan, "one", on_metric)
    result.model = model
    return result


def train_step_two(plan: TrainPlan, model: DocTransformer,
                   examples: Sequence[TrainingExample],
                   step_one: Optional[Checkpoint],
                   on_metric: Optional[Callable[[MetricRecord], None]] = None) -> TrainResult:
    """Estimate document-level parameters with sentence-level ones frozen.

    Sentence-level values are first restored from ``step_one``.
    """
    if plan.step != "two":
        raise ConfigurationError(f"plan is for step {plan.step!r}, not 'two'")
    if step_one is None:
        raise ConfigurationError("step two needs a step-one checkpoint (two-step training)")
    if not model.config.uses_context:
        raise ConfigurationError("step two needs at least one context integration flag")
    restore_parameters(model, step_one, (SENTENCE,))
    trainable = {n: p for n, p in model.named_parameters() if p.tag == DOCUMENT}
    return _fit(model, trainable, examples, plan, "two", on_metric)


def direct_joint_train(plan: TrainPlan, model: DocTransformer,
                       examples: Sequence[TrainingExample],
                       on_metric: Optional[Callable[[MetricRecord], None]] = None) -> TrainResult:
    """Train every parameter at once on document data (no sentence-level pre-step)."""
    if plan.step != "joint":
        raise ConfigurationError(f"plan is for step {plan.step!r}, not 'joint'")
    trainable = dict(model.named_parameters())
    return _fit(model, trainable, examples, plan, "joint", on_metric)
