"""Command-line interface: training, translation, scoring, data generation, ablations.

Every option may also be given in a ``key = value`` config file passed with
``--config``; keys use the option name with dashes or underscores.  Flags on
the command line override file values.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .corpus import (
    Vocabulary,
    flatten_documents,
    load_document_corpus,
    make_examples,
    vocabularies_for,
    write_corpus,
    write_documents,
)
from .decoding import DecodeConfig, translate_documents
from .errors import ConfigurationError, ContractError, CorpusError, NumericError
from .evaluation import SyntheticDocTask, bleu, generate_synthetic_corpus
from .experiments import ABLATION_HEADER, ExperimentSetup, ablation, ablation_grid
from .model import PROFILES, DocTransformer, ModelConfig, model_from_checkpoint, read_checkpoint
from .nn import DOCUMENT
from .training import (
    MetricRecord,
    TrainPlan,
    direct_joint_train,
    train_step_one,
    train_step_two,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("train-sentence", "train-document", "train-joint", "translate", "bleu",
            "synth-gen", "ablate")

logger = logging.getLogger("docnmt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def _list(kind):
    def parse(text: str) -> list:
        items = [t for t in str(text).replace(";", ",").split(",") if t.strip()]
        return [kind(t.strip()) for t in items]
    return parse


MODEL_KEYS = ("hidden_size", "filter_size", "num_heads", "encoder_layers", "decoder_layers",
              "context_layers", "context_window", "integrate_encoder", "integrate_decoder",
              "gating", "dropout", "precision")
PLAN_KEYS = ("max_steps", "token_budget", "warmup_steps", "lr_scale", "clip_norm",
             "label_smoothing", "log_interval")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; flags override its entries")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    for key in ("hidden_size", "filter_size", "num_heads", "encoder_layers", "decoder_layers",
                "context_layers", "context_window", "precision"):
        g.add_argument("--" + key.replace("_", "-"), type=int)
    for key in ("integrate_encoder", "integrate_decoder", "gating"):
        g.add_argument("--" + key.replace("_", "-"), type=_bool, metavar="{on,off}")
    g.add_argument("--dropout", type=float)


def _plan_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for key in ("max_steps", "token_budget", "warmup_steps", "log_interval"):
        g.add_argument("--" + key.replace("_", "-"), type=int)
    for key in ("lr_scale", "clip_norm", "label_smoothing"):
        g.add_argument("--" + key.replace("_", "-"), type=float)


def _train_flags(p: argparse.ArgumentParser, sentence_corpus: bool) -> None:
    p.add_argument("--source", help="document corpus, source side")
    p.add_argument("--target", help="document corpus, target side")
    if sentence_corpus:
        p.add_argument("--sentence-source", help="extra sentence-level corpus, source side")
        p.add_argument("--sentence-target", help="extra sentence-level corpus, target side")
        p.add_argument("--vocab-size", type=int, default=30000)
    p.add_argument("--output", help="checkpoint path")
    p.add_argument("--metrics", help="metrics log (step,loss,lr,tokens/sec per line)")
    _model_flags(p)
    _plan_flags(p)


# options that must come from the command line or the config file
REQUIRED = {
    "train-sentence": ("source", "target", "output"),
    "train-document": ("source", "target", "output"),
    "train-joint": ("source", "target", "output"),
    "translate": ("checkpoint", "source", "output"),
    "bleu": ("hypothesis", "reference"),
    "synth-gen": ("output_source", "output_target"),
    "ablate": (),
}


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = _Parser(prog="docnmt", description="Document-context Transformer translation.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs = {}

    p = subs["train-sentence"] = sub.add_parser(
        "train-sentence", help="step one: sentence-level parameters only")
    _common(p)
    _train_flags(p, sentence_corpus=True)

    p = subs["train-document"] = sub.add_parser(
        "train-document", help="step two: document-level parameters, sentence-level frozen")
    _common(p)
    _train_flags(p, sentence_corpus=False)
    p.add_argument("--init-checkpoint", help="checkpoint written by train-sentence")

    p = subs["train-joint"] = sub.add_parser(
        "train-joint", help="all parameters from scratch on document data")
    _common(p)
    _train_flags(p, sentence_corpus=True)

    p = subs["translate"] = sub.add_parser("translate", help="translate a document corpus")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--source")
    p.add_argument("--output")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--alpha", type=float, default=0.6)
    p.add_argument("--max-length", type=int)
    p.add_argument("--context-window", type=int)

    p = subs["bleu"] = sub.add_parser("bleu", help="corpus BLEU of a hypothesis file")
    _common(p)
    p.add_argument("--hypothesis")
    p.add_argument("--reference")

    p = subs["synth-gen"] = sub.add_parser("synth-gen", help="write a synthetic corpus")
    _common(p)
    p.add_argument("--documents", type=int, default=200)
    p.add_argument("--stream", type=int, default=0)
    p.add_argument("--output-source")
    p.add_argument("--output-target")
    p.add_argument("--context-window", type=int, default=2)

    p = subs["ablate"] = sub.add_parser("ablate", help="train and score an ablation grid")
    _common(p)
    p.add_argument("--seeds", type=_list(int), help="comma-separated; default: --seed")
    p.add_argument("--integrations", type=_list(str), default="none,encoder,decoder,both")
    p.add_argument("--gatings", type=_list(_bool), default="on")
    p.add_argument("--windows", type=_list(int), default="2")
    p.add_argument("--context-layers-set", type=_list(int), default="1")
    p.add_argument("--train-documents", type=int, default=200)
    p.add_argument("--dev-documents", type=int, default=50)
    p.add_argument("--sentence-documents", type=int, default=800)
    p.add_argument("--step-one-steps", type=int, default=2000)
    p.add_argument("--step-two-steps", type=int, default=1000)
    p.add_argument("--token-budget", type=int, default=600)
    p.add_argument("--warmup-steps", type=int, default=400)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--decode", type=_bool, default="on",
                   help="also decode dev documents for accuracy and BLEU")
    p.add_argument("--output", help="results table path (default: stdout)")
    return parser, subs


def read_config_file(path) -> dict[str, str]:
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} does not exist") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a command is required: " + ", ".join(COMMANDS))
    if args.config:
        sub = subs[args.command]
        known = {a.dest for a in sub._actions}
        values = read_config_file(args.config)
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            raise ConfigurationError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
        # re-parse so values from the file pass through the same type checks as flags
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) is None]
    if missing:
        raise UsageError(f"docnmt {args.command}: the following arguments are required: "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


# ----------------------------------------------------------------- helpers
def _threads() -> int:
    raw = os.environ.get("DOCNMT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigurationError(f"DOCNMT_THREADS must be an integer, got {raw!r}") from None


def _overrides(args, keys) -> dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _plan(args, step: str) -> TrainPlan:
    return TrainPlan(step=step, seed=args.seed, **_overrides(args, PLAN_KEYS))


def _metrics_writer(path: Optional[str]):
    if not path:
        return None, None
    handle = open(path, "w", encoding="utf-8")

    def write(record: MetricRecord) -> None:
        handle.write(record.csv() + "\n")
        handle.flush()

    return handle, write


def _load(source, target):
    return load_document_corpus(source, target)


def _vocab_metadata(sv: Vocabulary, tv: Vocabulary, step: str) -> dict:
    return {"source_vocab": sv.tokens, "target_vocab": tv.tokens, "step": step}


def _vocabs_from(ckpt) -> tuple[Vocabulary, Vocabulary]:
    try:
        return Vocabulary(ckpt.metadata["source_vocab"]), Vocabulary(ckpt.metadata["target_vocab"])
    except KeyError:
        raise ConfigurationError("checkpoint carries no vocabularies") from None


def _run_training(args, step: str) -> int:
    if step == "two" and not args.init_checkpoint:
        raise ConfigurationError(
            "train-document needs --init-checkpoint: two-step training estimates "
            "document-level parameters on top of a train-sentence checkpoint")
    documents = _load(args.source, args.target)
    if not documents:
        raise CorpusError(f"{args.source} holds no documents")
    handle, on_metric = _metrics_writer(args.metrics)
    try:
        if step == "two":
            ckpt = read_checkpoint(args.init_checkpoint)
            sv, tv = _vocabs_from(ckpt)
            cfg = ckpt.config
            changes = _overrides(args, MODEL_KEYS)
            if changes:
                cfg = ModelConfig.from_dict({**cfg.to_dict(), **changes})
            model = DocTransformer(cfg, args.seed)
            examples = make_examples(documents, sv, tv, cfg.context_window)
            result = train_step_two(_plan(args, "two"), model, examples, ckpt, on_metric)
        else:
            extra = []
            if getattr(args, "sentence_source", None):
                if not args.sentence_target:
                    raise ConfigurationError("--sentence-source needs --sentence-target")
                extra = _load(args.sentence_source, args.sentence_target)
            sv, tv = vocabularies_for(documents, args.vocab_size, extra)
            cfg = ModelConfig.from_profile(args.profile, source_vocab_size=len(sv),
                                           target_vocab_size=len(tv),
                                           **_overrides(args, MODEL_KEYS))
            model = DocTransformer(cfg, args.seed)
            if step == "one":
                examples = make_examples(flatten_documents(extra + documents), sv, tv,
                                         cfg.context_window)
                result = train_step_one(_plan(args, "one"), model, examples, on_metric)
            else:
                examples = make_examples(documents, sv, tv, cfg.context_window)
                result = direct_joint_train(_plan(args, "joint"), model, examples, on_metric)
    finally:
        if handle is not None:
            handle.close()
    result.checkpoint(_vocab_metadata(sv, tv, step)).save(args.output)
    last = result.history[-1].csv() if result.history else "no metrics logged"
    print(f"{step}: {len(result.losses)} steps, last {last}, "
          f"checkpoint {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    step = {"train-sentence": "one", "train-document": "two", "train-joint": "joint"}[args.command]
    return _run_training(args, step)


def cmd_translate(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    sv, tv = _vocabs_from(ckpt)
    model = model_from_checkpoint(ckpt, args.seed)
    if not ckpt.names(DOCUMENT):
        model = model.sentence_view()
    model.eval()
    documents = _read_source_documents(args.source)
    ids = [[sv.encode(s) for s in doc] for doc in documents]
    # an empty line would read back as a document break, so emit at least one token
    cfg = DecodeConfig(beam_size=args.beam, alpha=args.alpha, max_length=args.max_length,
                       min_length=1)
    window = args.context_window if args.context_window is not None else model.config.context_window
    if window < 0:
        raise ConfigurationError("--context-window must be >= 0")
    out = translate_documents(ids, model, cfg, window, threads=_threads())
    write_documents(args.output, [[tv.decode(s) for s in doc] for doc in out])
    return EXIT_OK


def _read_source_documents(path) -> list[list[list[str]]]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise CorpusError(f"source file {path} does not exist") from None
    docs, current = [], []
    for line in text.splitlines():
        if line.strip():
            current.append(line.split())
        elif current:
            docs.append(current)
            current = []
    if current:
        docs.append(current)
    return docs


def cmd_bleu(args) -> int:
    def lines(path):
        try:
            return [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
        except FileNotFoundError:
            raise CorpusError(f"{path} does not exist") from None

    print(bleu(lines(args.hypothesis), lines(args.reference)).line())
    return EXIT_OK


def cmd_synth_gen(args) -> int:
    task = SyntheticDocTask(seed=args.seed, context_window=args.context_window)
    documents = generate_synthetic_corpus(task, args.documents, args.stream)
    write_corpus(args.output_source, args.output_target, documents)
    return EXIT_OK


def cmd_ablate(args) -> int:
    arms = ablation_grid(args.integrations, args.gatings, args.windows, args.context_layers_set)
    if not arms:
        raise ConfigurationError("the ablation grid is empty")
    seeds = args.seeds or [args.seed]
    setups = [ExperimentSetup(seed=s, profile=args.profile, train_documents=args.train_documents,
                              dev_documents=args.dev_documents,
                              sentence_documents=args.sentence_documents, dropout=args.dropout,
                              step_one_steps=args.step_one_steps,
                              step_two_steps=args.step_two_steps, token_budget=args.token_budget,
                              warmup_steps=args.warmup_steps, beam_size=args.beam)
              for s in seeds]
    handle = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout

    def emit(line: str) -> None:
        handle.write(line + "\n")
        handle.flush()

    try:
        emit(ABLATION_HEADER)
        ablation(setups, arms, decode=args.decode, on_row=emit)
    finally:
        if handle is not sys.stdout:
            handle.close()
    return EXIT_OK


HANDLERS = {
    "train-sentence": cmd_train,
    "train-document": cmd_train,
    "train-joint": cmd_train,
    "translate": cmd_translate,
    "bleu": cmd_bleu,
    "synth-gen": cmd_synth_gen,
    "ablate": cmd_ablate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
