"""Document-context Transformer: encoder/decoder with context attention and gating."""

from __future__ import annotations

import copy
import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import tensor as T
from .context_encoder import ContextEncoder, ContextRepresentation
from .errors import ConfigurationError, ContractError, CorpusError, DimensionError
from .nn import (
    DOCUMENT,
    PARTITIONS,
    SENTENCE,
    AttentionMask,
    Embedding,
    FeedForward,
    LayerNorm,
    Module,
    MultiHeadAttention,
    Parameter,
    embed,
    padding_causal_mask,
    residual_sublayer,
    uniform_fan_in,
)
from .tensor import Tensor, no_grad

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

PROFILES: dict[str, dict[str, Any]] = {
    "desk": dict(hidden_size=64, filter_size=256, num_heads=4, encoder_layers=2,
                 decoder_layers=2, context_layers=1, context_window=2),
    "paper": dict(hidden_size=512, filter_size=2048, num_heads=8, encoder_layers=6,
                  decoder_layers=6, context_layers=1, context_window=2),
}


@dataclass(frozen=True)
class ModelConfig:
    source_vocab_size: int
    target_vocab_size: int
    hidden_size: int = 64
    filter_size: int = 256
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    context_layers: int = 1
    context_window: int = 2
    integrate_encoder: bool = True
    integrate_decoder: bool = True
    gating: bool = True
    dropout: float = 0.1
    precision: int = 32

    def __post_init__(self):
        problems = []
        if self.hidden_size % 2:
            problems.append(f"hidden_size must be even, got {self.hidden_size}")
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            problems.append(f"hidden_size {self.hidden_size} not divisible by {self.num_heads} heads")
        for name in ("encoder_layers", "decoder_layers", "context_layers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.context_window < 0:
            problems.append("context_window must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must lie in [0, 1)")
        if self.precision not in (32, 64):
            problems.append("precision must be 32 or 64")
        if min(self.source_vocab_size, self.target_vocab_size) <= EOS_ID:
            problems.append("vocabularies must include the reserved ids")
        if problems:
            raise ConfigurationError("; ".join(problems))

    @classmethod
    def from_profile(cls, profile: str, **overrides) -> "ModelConfig":
        if profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        return cls(**{**PROFILES[profile], **overrides})

    @property
    def uses_context(self) -> bool:
        return self.integrate_encoder or self.integrate_decoder

    @property
    def dtype(self) -> np.dtype:
        return T.dtype_for_precision(self.precision)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


class ContextGate(Module):
    def __init__(self, dim: int, dtype=np.float32):
        # zero init: the gate starts as an even blend
        self.w_input = Parameter(np.zeros((dim, dim), dtype=dtype), DOCUMENT)
        self.w_sublayer = Parameter(np.zeros((dim, dim), dtype=dtype), DOCUMENT)

    def __call__(self, h: Tensor, sublayer_out: Tensor, record: Optional[list] = None) -> Tensor:
        return context_gate(h, sublayer_out, self, record)


def context_gate(h: Tensor, sublayer_out: Tensor, params: ContextGate,
                 record: Optional[list] = None) -> Tensor:
    """Elementwise blend ``lam * h + (1 - lam) * sublayer_out``.

    ``lam = sigmoid(h W_i + sublayer_out W_s)`` has one value per feature and
    position.  The caller layer-normalises the result.
    """
    if h.shape != sublayer_out.shape:
        raise DimensionError(f"gate inputs differ in shape: {h.shape} vs {sublayer_out.shape}")
    lam = T.sigmoid(h @ params.w_input + sublayer_out @ params.w_sublayer)
    if record is not None:
        record.append(lam.data)
    return lam * h + (1.0 - lam) * sublayer_out


class _ContextSublayer(Module):
    """Context attention followed by a residual or gated merge and a norm."""

    def __init__(self, dim, heads, gating, rng, dtype):
        self.attention = MultiHeadAttention(dim, heads, rng, dtype, DOCUMENT)
        self.norm = LayerNorm(dim, dtype, DOCUMENT)
        self.gate = ContextGate(dim, dtype) if gating else None

    def __call__(self, h, context_kv, context_mask, dropout, rng, gates):
        out = T.dropout(self.attention.attend(h, *context_kv, context_mask), dropout, rng)
        if self.gate is not None:
            return self.norm(self.gate(h, out, gates))
        return residual_sublayer(h, out, self.norm)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng_s, rng_d):
        d, dt = cfg.hidden_size, cfg.dtype
        self.self_attention = MultiHeadAttention(d, cfg.num_heads, rng_s, dt, SENTENCE)
        self.self_attention_norm = LayerNorm(d, dt, SENTENCE)
        self.context = (_ContextSublayer(d, cfg.num_heads, cfg.gating, rng_d, dt)
                        if cfg.integrate_encoder else None)
        self.ffn = FeedForward(d, cfg.filter_size, rng_s, dt, SENTENCE)
        self.ffn_norm = LayerNorm(d, dt, SENTENCE)

    def __call__(self, s, mask, context_kv, context_mask, dropout=0.0, rng=None, gates=None):
        b = self.self_attention(s, s, mask)
        b = residual_sublayer(s, T.dropout(b, dropout, rng), self.self_attention_norm)
        d = b if context_kv is None else self.context(b, context_kv, context_mask,
                                                       dropout, rng, gates)
        out = T.dropout(self.ffn(d, dropout, rng), dropout, rng)
        return residual_sublayer(d, out, self.ffn_norm)


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng_s, rng_d):
        d, dt = cfg.hidden_size, cfg.dtype
        self.self_attention = MultiHeadAttention(d, cfg.num_heads, rng_s, dt, SENTENCE)
        self.self_attention_norm = LayerNorm(d, dt, SENTENCE)
        self.context = (_ContextSublayer(d, cfg.num_heads, cfg.gating, rng_d, dt)
                        if cfg.integrate_decoder else None)
        self.encdec_attention = MultiHeadAttention(d, cfg.num_heads, rng_s, dt, SENTENCE)
        self.encdec_attention_norm = LayerNorm(d, dt, SENTENCE)
        self.ffn = FeedForward(d, cfg.filter_size, rng_s, dt, SENTENCE)
        self.ffn_norm = LayerNorm(d, dt, SENTENCE)

    def __call__(self, t, self_mask, memory_kv, memory_mask, context_kv, context_mask,
                 dropout=0.0, rng=None, gates=None, cache: Optional[dict] = None):
        keys, values = self.self_attention.project_memory(t)
        if cache is not None:
            if "keys" in cache:
                keys = T.concat([cache["keys"], keys], axis=2)
                values = T.concat([cache["values"], values], axis=2)
            cache["keys"], cache["values"] = keys, values
        e = self.self_attention.attend(t, keys, values, self_mask)
        e = residual_sublayer(t, T.dropout(e, dropout, rng), self.self_attention_norm)
        f = e if context_kv is None else self.context(e, context_kv, context_mask,
                                                       dropout, rng, gates)
        g = self.encdec_attention.attend(f, *memory_kv, memory_mask)
        g = residual_sublayer(f, T.dropout(g, dropout, rng), self.encdec_attention_norm)
        out = T.dropout(self.ffn(g, dropout, rng), dropout, rng)
        return residual_sublayer(g, out, self.ffn_norm)


def _key_mask(padding: np.ndarray) -> AttentionMask:
    return AttentionMask.padding(padding) if padding.any() else AttentionMask.none()


@dataclass
class DecoderState:
    """Cached projections for step-by-step decoding of a batch of hypotheses."""

    memory_kv: list
    memory_mask: AttentionMask
    context_kv: list
    context_mask: AttentionMask
    caches: list = field(default_factory=list)
    length: int = 0

    def reorder(self, rows) -> None:
        rows = np.asarray(rows, dtype=np.int64)

        def pick(kv):
            return None if kv is None else tuple(T.index_select(x, rows, 0) for x in kv)

        def pick_mask(mask):
            if mask.blocked is None:
                return mask
            return AttentionMask(mask.kind, mask.blocked[rows])

        self.memory_kv = [pick(kv) for kv in self.memory_kv]
        self.context_kv = [pick(kv) for kv in self.context_kv]
        self.memory_mask = pick_mask(self.memory_mask)
        self.context_mask = pick_mask(self.context_mask)
        for cache in self.caches:
            for key in list(cache):
                cache[key] = T.index_select(cache[key], rows, 0)


class DocTransformer(Module):
    """Transformer translation model with optional document-context modules.

    Sentence-level parameters (embeddings, encoder/decoder self-attention,
    encoder-decoder attention, feed-forward, their norms, the output layer)
    are drawn from one random stream and document-level parameters (context
    encoder, context attention, gates) from another, so two models built
    with the same seed share identical sentence-level weights whatever their
    integration flags.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng_s = np.random.default_rng([seed, 0])
        rng_d = np.random.default_rng([seed, 1])
        d, dt = config.hidden_size, config.dtype
        self.source_embedding = Embedding(config.source_vocab_size, d, rng_s, dt, SENTENCE)
        self.target_embedding = Embedding(config.target_vocab_size, d, rng_s, dt, SENTENCE)
        self.context_encoder = (
            ContextEncoder(d, config.num_heads, config.filter_size, config.context_layers,
                           rng_d, dt)
            if config.uses_context else None
        )
        self.encoder = [EncoderLayer(config, rng_s, rng_d) for _ in range(config.encoder_layers)]
        self.decoder = [DecoderLayer(config, rng_s, rng_d) for _ in range(config.decoder_layers)]
        self.output_projection = Parameter(
            uniform_fan_in(rng_s, (d, config.target_vocab_size), dt).T.copy(), SENTENCE)
        self.training = False
        self.dropout_rng: Optional[np.random.Generator] = None
        self.gate_record: Optional[list] = None

    # ------------------------------------------------------------ plumbing
    def with_flags(self, **changes) -> "DocTransformer":
        """A view sharing every parameter but with altered integration flags."""
        cfg = dataclasses.replace(self.config, **changes)
        if cfg.integrate_encoder and any(l.context is None for l in self.encoder):
            raise ConfigurationError("encoder context modules were not built for this model")
        if cfg.integrate_decoder and any(l.context is None for l in self.decoder):
            raise ConfigurationError("decoder context modules were not built for this model")
        if cfg.gating != self.config.gating and cfg.uses_context:
            raise ConfigurationError("gating cannot be toggled on a built model")
        view = copy.copy(self)
        view.config = cfg
        return view

    def sentence_view(self) -> "DocTransformer":
        return self.with_flags(integrate_encoder=False, integrate_decoder=False)

    def partition_names(self, tag: str) -> list[str]:
        return [n for n, p in self.named_parameters() if p.tag == tag]

    def train(self, rng: Optional[np.random.Generator] = None) -> None:
        self.training = True
        self.dropout_rng = rng

    def eval(self) -> None:
        self.training = False

    @property
    def _drop(self) -> tuple[float, Optional[np.random.Generator]]:
        if self.training and self.dropout_rng is not None:
            return self.config.dropout, self.dropout_rng
        return 0.0, None

    # ------------------------------------------------------------- forward
    def encode_context(self, context_ids, context_padding) -> ContextRepresentation:
        if self.context_encoder is None:
            raise ConfigurationError("model was built without a context encoder")
        rate, rng = self._drop
        return self.context_encoder(context_ids, context_padding, self.source_embedding,
                                    rate, rng)

    def _context_kv(self, layers, context: Optional[ContextRepresentation], active: bool):
        if not active:
            return [None] * len(layers)
        if context is None:
            raise ContractError("context integration is on but no context was given")
        return [layer.context.attention.project_memory(context.matrix) for layer in layers]

    def encode_source(self, source_ids, source_padding=None,
                      context: Optional[ContextRepresentation] = None) -> Tensor:
        """Source representation (B, I, D) after the encoder stack."""
        source_ids = np.atleast_2d(np.asarray(source_ids, dtype=np.int64))
        if source_ids.shape[1] == 0:
            raise ContractError("source sentence is empty")
        if source_padding is None:
            source_padding = np.zeros(source_ids.shape, dtype=bool)
        rate, rng = self._drop
        mask = _key_mask(source_padding)
        context_kv = self._context_kv(self.encoder, context, self.config.integrate_encoder)
        context_mask = context.key_mask() if context is not None else AttentionMask.none()
        s = T.dropout(embed(source_ids, self.source_embedding), rate, rng)
        for layer, kv in zip(self.encoder, context_kv):
            s = layer(s, mask, kv, context_mask, rate, rng, self.gate_record)
        return s

    def decode(self, target_in, target_padding, memory: Tensor, source_padding,
               context: Optional[ContextRepresentation] = None) -> Tensor:
        """Logits (B, J, V) for every prefix position of ``target_in``."""
        target_in = np.atleast_2d(np.asarray(target_in, dtype=np.int64))
        if target_in.shape[1] == 0:
            raise ContractError("target prefix is empty")
        if target_padding is None:
            target_padding = np.zeros(target_in.shape, dtype=bool)
        if source_padding is None:
            source_padding = np.zeros(memory.shape[:2], dtype=bool)
        rate, rng = self._drop
        self_mask = padding_causal_mask(target_padding)
        memory_mask = _key_mask(source_padding)
        context_kv = self._context_kv(self.decoder, context, self.config.integrate_decoder)
        context_mask = context.key_mask() if context is not None else AttentionMask.none()
        t = T.dropout(embed(target_in, self.target_embedding), rate, rng)
        for layer, kv in zip(self.decoder, context_kv):
            memory_kv = layer.encdec_attention.project_memory(memory)
            t = layer(t, self_mask, memory_kv, memory_mask, kv, context_mask,
                      rate, rng, self.gate_record)
        return t @ self.output_projection.T

    def forward(self, source, source_padding, target_in, target_padding,
                context_ids=None, context_padding=None) -> Tensor:
        context = None
        if self.config.uses_context:
            if context_ids is None:
                raise ContractError("document mode needs context tokens")
            context = self.encode_context(context_ids, context_padding)
        memory = self.encode_source(source, source_padding, context)
        return self.decode(target_in, target_padding, memory, source_padding, context)

    __call__ = forward

    def decode_prefix(self, prefix, source_repr: Tensor,
                      context: Optional[ContextRepresentation] = None) -> Tensor:
        """Logits (J, V) for a single BOS-initial prefix of length J."""
        prefix = np.asarray(prefix, dtype=np.int64).reshape(-1)
        if prefix.size == 0:
            raise ContractError("target prefix is empty")
        if prefix[0] != BOS_ID:
            raise ContractError("target prefix must start with BOS")
        logits = self.decode(prefix[None], None, source_repr, None, context)
        return logits.reshape(logits.shape[1], logits.shape[2])

    def sentence_log_prob(self, example) -> tuple[float, np.ndarray]:
        """``log P(target | context, source)`` and the per-token terms."""
        target = np.asarray(example.target, dtype=np.int64)
        if target.max() >= self.config.target_vocab_size:
            raise ContractError("target contains an id outside the target vocabulary")
        with no_grad():
            context = None
            if self.config.uses_context:
                ids = np.asarray(example.context, dtype=np.int64)[None]
                context = self.encode_context(ids, np.zeros(ids.shape, dtype=bool))
            memory = self.encode_source(np.asarray(example.source)[None], None, context)
            logits = self.decode_prefix(target[:-1], memory, context)
            logp = T.log_softmax(logits, axis=-1).data
        per_token = logp[np.arange(len(target) - 1), target[1:]]
        return float(per_token.sum()), per_token

    # --------------------------------------------------- incremental decode
    def start_decoding(self, source_ids, context_ids=None, copies: int = 1) -> DecoderState:
        """Encode one sentence and prepare ``copies`` hypothesis rows."""
        source_ids = np.asarray(source_ids, dtype=np.int64).reshape(1, -1)
        context = None
        if self.config.uses_context:
            if context_ids is None:
                raise ContractError("document mode needs context tokens")
            ids = np.asarray(context_ids, dtype=np.int64).reshape(1, -1)
            context = self.encode_context(ids, np.zeros(ids.shape, dtype=bool))
        memory = self.encode_source(source_ids, None, context)
        rows = np.zeros(copies, dtype=np.int64)
        memory = T.index_select(memory, rows, 0)
        if context is not None:
            context = context.repeat(copies)
        context_kv = self._context_kv(self.decoder, context, self.config.integrate_decoder)
        return DecoderState(
            memory_kv=[l.encdec_attention.project_memory(memory) for l in self.decoder],
            memory_mask=AttentionMask.none(),
            context_kv=context_kv,
            context_mask=AttentionMask.none(),
            caches=[{} for _ in self.decoder],
        )

    def decode_step(self, state: DecoderState, tokens) -> np.ndarray:
        """Append ``tokens`` (one per row) and return next-token log-probs (B, V)."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        t = embed(tokens, self.target_embedding, offset=state.length)
        for layer, memory_kv, context_kv, cache in zip(
                self.decoder, state.memory_kv, state.context_kv, state.caches):
            t = layer(t, AttentionMask.none(), memory_kv, state.memory_mask,
                      context_kv, state.context_mask, cache=cache)
        state.length += 1
        logits = t.reshape(t.shape[0], t.shape[2]) @ self.output_projection.T
        return T.log_softmax(logits, axis=-1).data


# ------------------------------------------------------------ checkpoints
CHECKPOINT_MAGIC = b"DNMTCKPT"
CHECKPOINT_VERSION = 1
_TAG_CODES = {SENTENCE: 0, DOCUMENT: 1}
_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


@dataclass
class Checkpoint:
    """Named, tagged parameter arrays plus the model config and free-form metadata."""

    config: ModelConfig
    entries: dict  # name -> (tag, array)
    metadata: dict = field(default_factory=dict)

    def names(self, tag: Optional[str] = None) -> list[str]:
        return [n for n, (t, _) in self.entries.items() if tag is None or t == tag]

    @classmethod
    def from_model(cls, model: DocTransformer, tags=PARTITIONS,
                   metadata: Optional[dict] = None) -> "Checkpoint":
        entries = {n: (p.tag, p.data.copy()) for n, p in model.named_parameters() if p.tag in tags}
        return cls(model.config, entries, dict(metadata or {}))

    def save(self, path) -> None:
        """Write the container: magic, version, JSON header, then tagged entries."""
        meta = dict(self.metadata)
        meta["config"] = self.config.to_dict()
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
                  struct.pack("<I", len(self.entries))]
        for name, (tag, array) in self.entries.items():
            raw = name.encode("utf-8")
            data = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<"))
            chunks.append(struct.pack("<H", len(raw)) + raw)
            chunks.append(struct.pack("<BBB", _TAG_CODES[tag], data.itemsize, data.ndim))
            chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
            chunks.append(data.tobytes())
        Path(path).write_bytes(b"".join(chunks))


def save_checkpoint(path, model: DocTransformer, tags=PARTITIONS,
                    metadata: Optional[dict] = None) -> Checkpoint:
    """Write parameters whose tag is in ``tags`` plus the config and metadata."""
    checkpoint = Checkpoint.from_model(model, tags, metadata)
    checkpoint.save(path)
    return checkpoint


def read_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConfigurationError(f"checkpoint {path} does not exist") from None
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CorpusError(f"{path} is not a docnmt checkpoint")
    pos = len(CHECKPOINT_MAGIC)
    version, meta_len = struct.unpack_from("<II", buf, pos)
    if version != CHECKPOINT_VERSION:
        raise CorpusError(f"unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tags = {v: k for k, v in _TAG_CODES.items()}
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        tag, itemsize, ndim = struct.unpack_from("<BBB", buf, pos)
        pos += 3
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dtype = _DTYPE_CODES[itemsize]
        nbytes = int(np.prod(shape, dtype=np.int64)) * itemsize
        array = np.frombuffer(buf, dtype=dtype, count=nbytes // itemsize, offset=pos)
        entries[name] = (tags[tag], array.reshape(shape).copy())
        pos += nbytes
    config = ModelConfig.from_dict(meta.pop("config"))
    return Checkpoint(config, entries, meta)


def restore_parameters(model: DocTransformer, checkpoint: Checkpoint,
                       tags=PARTITIONS) -> list[str]:
    """Copy checkpoint values into every model parameter whose tag is in ``tags``.

    Returns the restored names.  Missing entries or shape mismatches raise
    :class:`ConfigurationError` listing every offending name.
    """
    bad, restored = [], []
    for name, p in model.named_parameters():
        if p.tag not in tags:
            continue
        entry = checkpoint.entries.get(name)
        if entry is None:
            bad.append(f"{name} (missing)")
        elif entry[1].shape != p.shape:
            bad.append(f"{name} (checkpoint {entry[1].shape} vs model {p.shape})")
        else:
            restored.append(name)
    if bad:
        raise ConfigurationError("checkpoint does not fit the model: " + ", ".join(bad))
    params = dict(model.named_parameters())
    for name in restored:
        params[name].data = checkpoint.entries[name][1].astype(params[name].dtype)
        params[name].grad = None
    return restored


def model_from_checkpoint(checkpoint: Checkpoint, seed: int = 0, **overrides) -> DocTransformer:
    """Build a model from the stored config and restore every stored parameter.

    Document-level parameters absent from the checkpoint keep their
    seed-determined initial values.
    """
    cfg = dataclasses.replace(checkpoint.config, **overrides)
    model = DocTransformer(cfg, seed)
    present = {t for t, _ in checkpoint.entries.values()}
    tags = tuple(t for t in PARTITIONS if t in present or t == SENTENCE)
    restore_parameters(model, checkpoint, tags)
    return model
