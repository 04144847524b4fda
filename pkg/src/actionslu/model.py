"""Shared causal transformer trunk with intent, slot/LM, and action heads.

Two forward paths exist over the same parameters: an autodiff path used for
training (batched, records on the active tape) and a cached numpy path used
for incremental decoding.  Tests pin the two paths against each other.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import (CapacityError, CheckpointError, InvalidInputError,
                     ModeError, ShapeError)
from .labels import LabelSchema

NEG_INF = -1e30  # additive mask value; exp() underflows to exactly 0.0

RESCORING = "rescoring"
FACTORED = "factored"

CHECKPOINT_MAGIC = b"ASLU"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    trunk_layers: int = 2
    attention_heads: int = 4
    max_len: int = 96
    ffn_hidden: int | None = None
    factored_action: bool = False

    def __post_init__(self):
        if self.d_model % self.attention_heads:
            raise InvalidInputError("d_model must divide into attention heads")
        if self.ffn_hidden is None:
            object.__setattr__(self, "ffn_hidden", 4 * self.d_model)

    @property
    def intent_embedding_dim(self) -> int:
        # Eq-style elementwise averaging of word and intent vectors requires
        # the intent embedding to live in the trunk width.
        return self.d_model

    @property
    def head_dim(self) -> int:
        return self.d_model // self.attention_heads

    def to_json(self) -> dict:
        return {"vocab_size": self.vocab_size, "d_model": self.d_model,
                "trunk_layers": self.trunk_layers,
                "attention_heads": self.attention_heads,
                "max_len": self.max_len, "ffn_hidden": self.ffn_hidden,
                "factored_action": self.factored_action}


class ModelParams:
    """Named parameter tensors for trunk and heads.

    The intent-class embedding is tied to the intent head: the embedding of
    intent c is column c of the intent projection, so the three heads add
    exactly (n_intents + 2 * n_slots) * (d_model + 1) parameters over a plain
    language model.
    """

    def __init__(self, config: ModelConfig, schema: LabelSchema,
                 tensors: dict[str, Tensor]):
        self.config = config
        self.schema = schema
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def named(self):
        return list(self.tensors.items())

    def all_tensors(self):
        return list(self.tensors.values())

    def zero_grads(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self.schema,
                           {k: Tensor(v.data.copy(), name=k)
                            for k, v in self.tensors.items()})

    def param_count(self, prefix: str = "") -> int:
        return sum(t.data.size for name, t in self.tensors.items()
                   if name.startswith(prefix))

    def head_params_over_plain_lm(self) -> int:
        return sum(self.param_count(p) for p in ("intent.", "slot.", "action."))


def init_params(config: ModelConfig, schema: LabelSchema,
                seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d, h = config.d_model, config.ffn_hidden
    tensors: dict[str, Tensor] = {}

    def w(name, *shape, scale=0.02):
        tensors[name] = Tensor(rng.normal(0.0, scale, size=shape), name=name)

    def zeros(name, *shape):
        tensors[name] = Tensor(np.zeros(shape), name=name)

    def ones(name, *shape):
        tensors[name] = Tensor(np.ones(shape), name=name)

    w("embed", config.vocab_size, d)
    w("pos", config.max_len, d)
    for i in range(config.trunk_layers):
        ones(f"l{i}.ln1.g", d)
        zeros(f"l{i}.ln1.b", d)
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"l{i}.attn.{proj}", d, d)
        ones(f"l{i}.ln2.g", d)
        zeros(f"l{i}.ln2.b", d)
        w(f"l{i}.ffn.w1", d, h)
        zeros(f"l{i}.ffn.b1", h)
        w(f"l{i}.ffn.w2", h, d)
        zeros(f"l{i}.ffn.b2", d)
    ones("ln_f.g", d)
    zeros("ln_f.b", d)
    w("lm.w", d, config.vocab_size)
    zeros("lm.b", config.vocab_size)
    w("intent.w", d, schema.num_intents)
    zeros("intent.b", schema.num_intents)
    w("slot.w", d, schema.num_slots)
    zeros("slot.b", schema.num_slots)
    w("action.w", d, schema.num_slots)
    zeros("action.b", schema.num_slots)
    if config.factored_action:
        w("factored.w", d, config.vocab_size)
        zeros("factored.b", config.vocab_size)
    return ModelParams(config, schema, tensors)


# ---------------------------------------------------------------------------
# training-path forward (autodiff)
# ---------------------------------------------------------------------------

@dataclass
class EncodedSequence:
    """Causal trunk states plus the mean-pooled sentence representation."""

    states: Tensor        # (B, L, d)
    h_u: Tensor           # (B, d)
    mask: np.ndarray      # (B, L) 1.0 at real positions
    lengths: np.ndarray   # (B,)


def _causal_mask(length: int) -> np.ndarray:
    mask = np.zeros((length, length))
    mask[np.triu_indices(length, k=1)] = NEG_INF
    return mask


def encode_batch(params: ModelParams, ids: np.ndarray,
                 mask: np.ndarray | None = None) -> EncodedSequence:
    """Batched causal encode; ``ids`` is (B, L) with pad id at masked slots."""
    cfg = params.config
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    batch, length = ids.shape
    if length < 1:
        raise InvalidInputError("empty sequence")
    if length > cfg.max_len:
        raise CapacityError(f"sequence length {length} > max_len {cfg.max_len}")
    if ids.max() >= cfg.vocab_size:
        raise InvalidInputError("token id out of vocabulary range")
    if mask is None:
        mask = np.ones((batch, length))
    lengths = mask.sum(axis=1)

    x = ad.add(ad.embedding(params["embed"], ids),
               ad.embedding(params["pos"], np.arange(length)))
    causal = _causal_mask(length)[None, None, :, :]
    heads, dh = cfg.attention_heads, cfg.head_dim
    inv_sqrt_dh = 1.0 / math.sqrt(dh)

    for i in range(cfg.trunk_layers):
        normed = ad.layer_norm(x, params[f"l{i}.ln1.g"], params[f"l{i}.ln1.b"])
        q = ad.matmul(normed, params[f"l{i}.attn.wq"])
        k = ad.matmul(normed, params[f"l{i}.attn.wk"])
        v = ad.matmul(normed, params[f"l{i}.attn.wv"])
        # (B, L, d) -> (B, H, L, dh)
        split = (batch, length, heads, dh)
        q = ad.transpose(ad.reshape(q, split), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, split), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, split), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          inv_sqrt_dh)
        attn = ad.softmax(ad.add_const(scores, causal), axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)),
                         (batch, length, cfg.d_model))
        x = ad.add(x, ad.matmul(ctx, params[f"l{i}.attn.wo"]))

        normed = ad.layer_norm(x, params[f"l{i}.ln2.g"], params[f"l{i}.ln2.b"])
        hidden = ad.gelu(ad.add(ad.matmul(normed, params[f"l{i}.ffn.w1"]),
                                params[f"l{i}.ffn.b1"]))
        x = ad.add(x, ad.add(ad.matmul(hidden, params[f"l{i}.ffn.w2"]),
                             params[f"l{i}.ffn.b2"]))

    states = ad.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    masked = ad.mul(states, Tensor(mask[:, :, None]))
    h_u = ad.mul(ad.tsum(masked, axis=1), Tensor(1.0 / lengths[:, None]))
    return EncodedSequence(states=states, h_u=h_u, mask=mask, lengths=lengths)


def intent_logits(params: ModelParams, h_u: Tensor) -> Tensor:
    return ad.add(ad.matmul(h_u, params["intent.w"]), params["intent.b"])


def intent_head(params: ModelParams, h_u: Tensor) -> Tensor:
    return ad.softmax(intent_logits(params, h_u))


def intent_embedding(params: ModelParams, intent_ids: np.ndarray) -> Tensor:
    """Tied intent-class embedding: column c of the intent projection."""
    rows = ad.transpose(params["intent.w"], (1, 0))
    return ad.embedding(rows, np.asarray(intent_ids))


def combine_word_intent(e: Tensor, h_intent: Tensor) -> Tensor:
    """Elementwise mean of a word state and the intent embedding."""
    if e.data.shape[-1] != h_intent.data.shape[-1]:
        raise ShapeError("word and intent vectors must share d_model")
    if e.data.ndim == 3 and h_intent.data.ndim == 2:
        h_intent = ad.reshape(h_intent, (h_intent.data.shape[0], 1,
                                         h_intent.data.shape[1]))
    return ad.scale(ad.add(e, h_intent), 0.5)


def slot_logits(params: ModelParams, e: Tensor, h_intent: Tensor) -> Tensor:
    combined = combine_word_intent(e, h_intent)
    return ad.add(ad.matmul(combined, params["slot.w"]), params["slot.b"])


def slot_head(params: ModelParams, e: Tensor, h_intent: Tensor) -> Tensor:
    return ad.softmax(slot_logits(params, e, h_intent))


def lm_logits(params: ModelParams, states: Tensor) -> Tensor:
    return ad.add(ad.matmul(states, params["lm.w"]), params["lm.b"])


def lm_head(params: ModelParams, state: Tensor) -> Tensor:
    return ad.softmax(lm_logits(params, state))


def action_logits(params: ModelParams, states: Tensor) -> Tensor:
    return ad.add(ad.matmul(states, params["action.w"]), params["action.b"])


def action_head(params: ModelParams, state: Tensor) -> Tensor:
    """Independent per-slot-class probabilities; rows need not sum to 1."""
    return ad.sigmoid(action_logits(params, state))


# ---------------------------------------------------------------------------
# inference path with incremental key/value caches (numpy only)
# ---------------------------------------------------------------------------

def _np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_gelu(x):
    from scipy.special import erf
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _np_softmax(z, axis=-1):
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class DecoderState:
    """Prefix tokens, per-layer K/V caches, and the last trunk state."""

    tokens: list[int]
    keys: list[np.ndarray]      # per layer (H, t, dh)
    values: list[np.ndarray]    # per layer (H, t, dh)
    last_state: np.ndarray      # (d,) final-layer normalized state

    @property
    def length(self) -> int:
        return len(self.tokens)

    def clone(self) -> "DecoderState":
        return DecoderState(tokens=list(self.tokens),
                            keys=[k.copy() for k in self.keys],
                            values=[v.copy() for v in self.values],
                            last_state=self.last_state.copy())


def start_state(params: ModelParams, prompt_ids) -> DecoderState:
    """Encode a prompt from scratch and capture its caches."""
    cfg = params.config
    ids = np.asarray(list(prompt_ids), dtype=np.int64)
    length = ids.shape[0]
    if length < 1:
        raise InvalidInputError("prompt must contain at least one token")
    if length > cfg.max_len:
        raise CapacityError(f"prompt length {length} > max_len {cfg.max_len}")
    heads, dh = cfg.attention_heads, cfg.head_dim
    x = params["embed"].data[ids] + params["pos"].data[:length]
    causal = _causal_mask(length)
    keys, values = [], []
    for i in range(cfg.trunk_layers):
        normed = _np_layer_norm(x, params[f"l{i}.ln1.g"].data,
                                params[f"l{i}.ln1.b"].data)
        q = (normed @ params[f"l{i}.attn.wq"].data).reshape(length, heads, dh)
        k = (normed @ params[f"l{i}.attn.wk"].data).reshape(length, heads, dh)
        v = (normed @ params[f"l{i}.attn.wv"].data).reshape(length, heads, dh)
        q, k, v = (np.transpose(a, (1, 0, 2)) for a in (q, k, v))
        scores = q @ np.transpose(k, (0, 2, 1)) / math.sqrt(dh) + causal
        ctx = _np_softmax(scores) @ v                      # (H, L, dh)
        ctx = np.transpose(ctx, (1, 0, 2)).reshape(length, cfg.d_model)
        x = x + ctx @ params[f"l{i}.attn.wo"].data
        normed = _np_layer_norm(x, params[f"l{i}.ln2.g"].data,
                                params[f"l{i}.ln2.b"].data)
        hidden = _np_gelu(normed @ params[f"l{i}.ffn.w1"].data
                          + params[f"l{i}.ffn.b1"].data)
        x = x + hidden @ params[f"l{i}.ffn.w2"].data + params[f"l{i}.ffn.b2"].data
        keys.append(k)
        values.append(v)
    states = _np_layer_norm(x, params["ln_f.g"].data, params["ln_f.b"].data)
    return DecoderState(tokens=ids.tolist(), keys=keys, values=values,
                        last_state=states[-1])


def full_states(params: ModelParams, prompt_ids) -> np.ndarray:
    """All final-layer states of a full (non-incremental) encode.

    Uses the training-path forward so it stays independent of the cache
    logic; the incremental-vs-full tests lean on that independence.
    """
    ids = np.asarray(list(prompt_ids), dtype=np.int64)
    enc = encode_batch(params, ids[None, :])
    return enc.states.data[0]


def extend_candidates(params: ModelParams, state: DecoderState,
                      cand_ids) -> tuple[np.ndarray, list, list]:
    """One-position forward for each candidate against the shared cache.

    Returns (states (k, d), new_keys per layer (k, H, 1, dh), new_values).
    """
    cfg = params.config
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    t = state.length
    if t + 1 > cfg.max_len:
        raise CapacityError(f"extension would exceed max_len {cfg.max_len}")
    heads, dh = cfg.attention_heads, cfg.head_dim
    k_cands = cand_ids.shape[0]
    x = params["embed"].data[cand_ids] + params["pos"].data[t]  # (k, d)
    new_keys, new_values = [], []
    for i in range(cfg.trunk_layers):
        normed = _np_layer_norm(x, params[f"l{i}.ln1.g"].data,
                                params[f"l{i}.ln1.b"].data)
        q = (normed @ params[f"l{i}.attn.wq"].data).reshape(k_cands, heads, dh)
        k_new = (normed @ params[f"l{i}.attn.wk"].data).reshape(k_cands, heads, dh)
        v_new = (normed @ params[f"l{i}.attn.wv"].data).reshape(k_cands, heads, dh)
        # scores against cached positions, as head-major batched matmuls
        q_hm = q.transpose(1, 0, 2)                        # (H, k, dh)
        cached = (q_hm @ state.keys[i].transpose(0, 2, 1)).transpose(1, 0, 2)
        own = (q * k_new).sum(axis=2)[:, :, None]          # (k, H, 1)
        scores = np.concatenate([cached, own], axis=2) / math.sqrt(dh)
        attn = _np_softmax(scores)                         # (k, H, t+1)
        ctx = ((attn[:, :, :t].transpose(1, 0, 2)
                @ state.values[i]).transpose(1, 0, 2)
               + attn[:, :, t:t + 1] * v_new)              # (k, H, dh)
        x = x + ctx.reshape(k_cands, cfg.d_model) @ params[f"l{i}.attn.wo"].data
        normed = _np_layer_norm(x, params[f"l{i}.ln2.g"].data,
                                params[f"l{i}.ln2.b"].data)
        hidden = _np_gelu(normed @ params[f"l{i}.ffn.w1"].data
                          + params[f"l{i}.ffn.b1"].data)
        x = x + hidden @ params[f"l{i}.ffn.w2"].data + params[f"l{i}.ffn.b2"].data
        new_keys.append(k_new[:, :, None, :])
        new_values.append(v_new[:, :, None, :])
    states = _np_layer_norm(x, params["ln_f.g"].data, params["ln_f.b"].data)
    return states, new_keys, new_values


def commit_candidate(state: DecoderState, choice: int, cand_ids,
                     cand_states: np.ndarray, new_keys, new_values) -> None:
    """Absorb one candidate's extension into the shared cache, in place."""
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    state.tokens.append(int(cand_ids[choice]))
    for i in range(len(state.keys)):
        state.keys[i] = np.concatenate(
            [state.keys[i], new_keys[i][choice]], axis=1)
        state.values[i] = np.concatenate(
            [state.values[i], new_values[i][choice]], axis=1)
    state.last_state = cand_states[choice]


def np_lm_probs(params: ModelParams, state_vec: np.ndarray) -> np.ndarray:
    return _np_softmax(state_vec @ params["lm.w"].data + params["lm.b"].data)


def np_action_probs(params: ModelParams, state_vec: np.ndarray) -> np.ndarray:
    z = state_vec @ params["action.w"].data + params["action.b"].data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (ez + 1.0)
    return out


def action_score_candidates(params: ModelParams, state: DecoderState,
                            cand_ids, target_class: int,
                            mode: str = RESCORING) -> np.ndarray:
    """P(action class = target | prefix, candidate) for each candidate."""
    cand_ids = np.asarray(list(cand_ids), dtype=np.int64)
    if cand_ids.size == 0:
        raise InvalidInputError("candidate set must be non-empty")
    if mode == RESCORING:
        states, _, _ = extend_candidates(params, state, cand_ids)
        return np_action_probs(params, states)[:, target_class]
    if mode == FACTORED:
        return np.exp(factored_log_scores(params, state, cand_ids,
                                          target_class))
    raise ModeError(f"unknown candidate-scoring mode {mode!r}")


def factored_log_scores(params: ModelParams, state: DecoderState,
                        cand_ids, target_class: int) -> np.ndarray:
    """log P(action = target | prefix, candidate) from the factored layer.

    Only the candidate columns of the factored head are touched, so the cost
    per step is a (d, k) slice and one small matvec.
    """
    if "factored.w" not in params:
        raise ModeError("model has no factored action layer")
    if target_class not in (0, 1):
        raise ModeError("factored mode only supports a binary action class")
    cand_ids = np.asarray(cand_ids, dtype=np.int64)
    z = (state.last_state @ params["factored.w"].data[:, cand_ids]
         + params["factored.b"].data[cand_ids])
    # log sigma(z) for class 1, log sigma(-z) for class 0, both saturating.
    return -np.logaddexp(0.0, -z if target_class == 1 else z)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Flat binary container: magic, version, JSON header, then raw float64.

    Tensor payloads follow in ascending name order, little-endian.
    """
    names = sorted(params.tensors)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_json(),
        "intents": list(params.schema.intents),
        "slots": list(params.schema.slots),
        "tensors": [{"name": n, "shape": list(params[n].data.shape)}
                    for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}")
    with f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        (blob_len,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(blob_len).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported version {header['version']}")
        config = ModelConfig(**header["config"])
        schema = LabelSchema(intents=tuple(header["intents"]),
                             slots=tuple(header["slots"]))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"truncated tensor {entry['name']!r}")
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            tensors[entry["name"]] = Tensor(arr, name=entry["name"])
    return ModelParams(config, schema, tensors)
