"""Paired training runs on the synthetic disambiguation corpus.

The harness builds one data split per seed, trains a sentence-level model
(step one) once per seed, and derives every document-level variant from
that checkpoint.  It backs both the ``ablate`` command and the acceptance
suite.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .corpus import (
    ParallelDocument,
    TrainingExample,
    Vocabulary,
    encode_document,
    flatten_documents,
    make_examples,
    vocabularies_for,
)
from .decoding import DecodeConfig, translate_document
from .evaluation import SyntheticDocTask, bleu, disambiguation_accuracy, generate_synthetic_corpus
from .model import Checkpoint, DocTransformer, ModelConfig
from .tensor import no_grad
from .training import (
    MetricRecord,
    TrainPlan,
    TrainResult,
    direct_joint_train,
    evaluate_loss,
    train_step_one,
    train_step_two,
)

logger = logging.getLogger(__name__)

INTEGRATIONS = {
    "none": (False, False),
    "encoder": (True, False),
    "decoder": (False, True),
    "both": (True, True),
}


@dataclass(frozen=True)
class ExperimentSetup:
    seed: int = 0
    profile: str = "desk"
    train_documents: int = 200
    dev_documents: int = 50
    sentence_documents: int = 800
    dropout: float = 0.0
    step_one_steps: int = 2000
    step_two_steps: int = 1000
    joint_steps: Optional[int] = None  # default: step one + step two
    token_budget: int = 600
    warmup_steps: int = 400
    beam_size: int = 4

    @property
    def total_joint_steps(self) -> int:
        if self.joint_steps is not None:
            return self.joint_steps
        return self.step_one_steps + self.step_two_steps

    def plan(self, step: str, steps: int, log_interval: int = 100) -> TrainPlan:
        return TrainPlan(step=step, max_steps=steps, token_budget=self.token_budget,
                         warmup_steps=self.warmup_steps, seed=self.seed,
                         log_interval=max(1, min(log_interval, steps or 1)))


@dataclass
class SyntheticData:
    task: SyntheticDocTask
    train: list[ParallelDocument]
    sentences: list[ParallelDocument]
    dev: list[ParallelDocument]
    source_vocab: Vocabulary
    target_vocab: Vocabulary
    window: int

    def examples(self, documents: Sequence[ParallelDocument]) -> list[TrainingExample]:
        return make_examples(documents, self.source_vocab, self.target_vocab, self.window)

    @property
    def step_one_examples(self) -> list[TrainingExample]:
        return self.examples(flatten_documents(self.sentences + self.train))

    @property
    def train_examples(self) -> list[TrainingExample]:
        return self.examples(self.train)

    @property
    def dev_examples(self) -> list[TrainingExample]:
        return self.examples(self.dev)


def build_data(setup: ExperimentSetup, task: Optional[SyntheticDocTask] = None) -> SyntheticData:
    """Independent train / sentence-level / dev streams for ``setup.seed``."""
    task = task or SyntheticDocTask(seed=setup.seed)
    train = generate_synthetic_corpus(task, setup.train_documents, stream=1)
    sentences = generate_synthetic_corpus(task, setup.sentence_documents, stream=2)
    dev = generate_synthetic_corpus(task, setup.dev_documents, stream=3)
    sv, tv = vocabularies_for(train, extra=sentences)
    return SyntheticData(task, train, sentences, dev, sv, tv, task.context_window)


def model_config(setup: ExperimentSetup, data: SyntheticData, **flags) -> ModelConfig:
    return ModelConfig.from_profile(
        setup.profile, source_vocab_size=len(data.source_vocab),
        target_vocab_size=len(data.target_vocab), context_window=data.window,
        dropout=setup.dropout, **flags)


@dataclass
class EvalReport:
    dev_loss: float
    accuracy: float = float("nan")
    bleu: float = float("nan")

    def row(self) -> str:
        return f"{self.dev_loss:.4f},{self.accuracy:.3f},{self.bleu:.2f}"


def translate_dev(model: DocTransformer, data: SyntheticData, beam_size: int = 4,
                  documents: Optional[Sequence[ParallelDocument]] = None,
                  window: Optional[int] = None) -> list[list[list[str]]]:
    cfg = DecodeConfig(beam_size=beam_size)
    window = data.window if window is None else window
    out = []
    for doc in documents if documents is not None else data.dev:
        ids = encode_document(doc, data.source_vocab, data.target_vocab)
        hyps = translate_document(ids.sources, model, cfg, window)
        out.append([data.target_vocab.decode(h) for h in hyps])
    return out


def evaluate_model(model: DocTransformer, data: SyntheticData, decode: bool = True,
                   beam_size: int = 4, window: Optional[int] = None) -> EvalReport:
    window = data.window if window is None else window
    dev = make_examples(data.dev, data.source_vocab, data.target_vocab, window)
    report = EvalReport(evaluate_loss(model, dev))
    if decode:
        hyps = translate_dev(model, data, beam_size, window=window)
        report.accuracy = disambiguation_accuracy(hyps, data.dev, data.task)
        refs = [t for doc in data.dev for t in doc.targets]
        report.bleu = bleu([h for doc in hyps for h in doc], refs).score
    return report


def gate_values(model: DocTransformer, examples: Sequence[TrainingExample],
                limit: int = 200) -> np.ndarray:
    """Every recorded gate activation over the first ``limit`` examples, flattened."""
    record: list = []
    model.gate_record = record
    try:
        with no_grad():
            for e in examples[:limit]:
                model.sentence_log_prob(e)
    finally:
        model.gate_record = None
    if not record:
        return np.zeros(0)
    return np.concatenate([r.reshape(-1) for r in record])


@dataclass
class Runner:
    """Trains and caches models for one setup; step one runs at most once."""

    setup: ExperimentSetup
    data: SyntheticData = None
    on_metric: Optional[Callable[[str, MetricRecord], None]] = None
    _step_one: Optional[tuple[DocTransformer, TrainResult, Checkpoint]] = field(default=None,
                                                                            repr=False)

    def __post_init__(self):
        if self.data is None:
            self.data = build_data(self.setup)

    def _callback(self, label: str):
        if self.on_metric is None:
            return None
        return lambda record: self.on_metric(label, record)

    def step_one(self) -> tuple[DocTransformer, TrainResult, Checkpoint]:
        if self._step_one is None:
            model = DocTransformer(model_config(self.setup, self.data), self.setup.seed)
            plan = self.setup.plan("one", self.setup.step_one_steps)
            result = train_step_one(plan, model, self.data.step_one_examples,
                                    self._callback("one"))
            self._step_one = (model.sentence_view(), result, result.checkpoint())
        return self._step_one

    def step_two(self, integration: str = "both", gating: bool = True,
                 steps: Optional[int] = None, window: Optional[int] = None,
                 context_layers: Optional[int] = None) -> tuple[DocTransformer, TrainResult]:
        enc, dec = INTEGRATIONS[integration]
        _, _, ckpt = self.step_one()
        window = self.data.window if window is None else window
        extra = {} if context_layers is None else {"context_layers": context_layers}
        cfg = dataclasses.replace(
            model_config(self.setup, self.data, integrate_encoder=enc, integrate_decoder=dec,
                         gating=gating, **extra),
            context_window=window)
        model = DocTransformer(cfg, self.setup.seed)
        plan = self.setup.plan("two", self.setup.step_two_steps if steps is None else steps)
        examples = make_examples(self.data.train, self.data.source_vocab,
                                 self.data.target_vocab, window)
        result = train_step_two(plan, model, examples, ckpt,
                                self._callback(f"two-{integration}"))
        return model, result

    def joint(self, steps: Optional[int] = None) -> tuple[DocTransformer, TrainResult]:
        model = DocTransformer(model_config(self.setup, self.data), self.setup.seed)
        plan = self.setup.plan("joint", self.setup.total_joint_steps if steps is None else steps)
        result = direct_joint_train(plan, model, self.data.train_examples,
                                    self._callback("joint"))
        return model, result

    def arm(self, arm: "AblationArm") -> tuple[DocTransformer, TrainResult]:
        if arm.integration == "none":
            # no document modules: the step-one model is the baseline
            model, result, _ = self.step_one()
            return model, result
        return self.step_two(arm.integration, arm.gating, window=arm.context_window,
                             context_layers=arm.context_layers)


@dataclass(frozen=True)
class AblationArm:
    integration: str = "both"
    gating: bool = True
    context_window: Optional[int] = None
    context_layers: Optional[int] = None

    def label(self) -> str:
        window = "-" if self.context_window is None else self.context_window
        layers = "-" if self.context_layers is None else self.context_layers
        return f"{self.integration};gate={'on' if self.gating else 'off'};window={window};N_c={layers}"


def ablation_grid(integrations: Sequence[str] = tuple(INTEGRATIONS),
                  gatings: Sequence[bool] = (True,),
                  windows: Sequence[Optional[int]] = (None,),
                  context_layers: Sequence[Optional[int]] = (None,)) -> list[AblationArm]:
    """Cartesian product; the ``none`` arm appears once since it has no document modules."""
    arms = []
    for integration in integrations:
        if integration not in INTEGRATIONS:
            raise ValueError(f"unknown integration {integration!r}")
        if integration == "none":
            arms.append(AblationArm("none"))
            continue
        for gating in gatings:
            for window in windows:
                for layers in context_layers:
                    arms.append(AblationArm(integration, gating, window, layers))
    return arms


def ablation(setups: Sequence[ExperimentSetup], arms: Sequence[AblationArm],
             decode: bool = False, on_row: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Train every arm for every setup and report dev metrics per run."""
    rows = []
    for setup in setups:
        runner = Runner(setup)
        for arm in arms:
            model, result = runner.arm(arm)
            report = evaluate_model(model, runner.data, decode, setup.beam_size,
                                    window=arm.context_window)
            row = dict(seed=setup.seed, config=arm.label(), dev_loss=report.dev_loss,
                       accuracy=report.accuracy, bleu=report.bleu)
            rows.append(row)
            logger.info("seed %d %s %s", setup.seed, arm.label(), report.row())
            if on_row is not None:
                on_row(ablation_line(row))
    return rows


ABLATION_HEADER = "seed,config,dev_loss,accuracy,bleu"


def ablation_line(row: dict) -> str:
    return f"{row['seed']},{row['config']},{row['dev_loss']:.6f},{row['accuracy']:.3f},{row['bleu']:.2f}"


def with_seed(setup: ExperimentSetup, seed: int) -> ExperimentSetup:
    return dataclasses.replace(setup, seed=seed)
