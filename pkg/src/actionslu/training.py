"""Composite loss, AdamW, the training loop, and zero-/few-shot adaptation."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import Tape, Tensor
from .data import (Corpus, EOS_ID, FewShotTask, PAD_ID, UNK_ID,
                   UtteranceRecord, Vocabulary)
from .errors import InvalidInputError, OptimizerError
from .labels import LabelSchema

ACTION_BCE = "bce"
ACTION_NLL = "nll"


@dataclass(frozen=True)
class TrainConfig:
    # Reference values from the original recipe; desk-scale runs usually
    # override epochs and batch size downward.
    learning_rate: float = 0.002
    batch_size: int = 64
    epochs: int = 9
    alpha: float = 0.125
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    gold_intent_warmup_fraction: float = 1.0 / 3.0
    seed: int = 0
    batch_reduction: str = "mean"      # mean | sum
    action_loss_mode: str = ACTION_BCE  # bce | nll
    lm_weight: float = 0.0             # auxiliary next-token objective
    char_fallback_prob: float = 0.5    # train-time word -> character dropout
    word_shuffle_prob: float = 0.5     # train-time span-order augmentation
    adapt_steps: int = 50
    adapt_lr_scale: float = 0.1

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidInputError("alpha must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.batch_reduction not in ("mean", "sum"):
            raise InvalidInputError(f"bad batch_reduction {self.batch_reduction!r}")
        if self.action_loss_mode not in (ACTION_BCE, ACTION_NLL):
            raise InvalidInputError(f"bad action_loss_mode {self.action_loss_mode!r}")


@dataclass
class Batch:
    """Padded piece-level arrays for one batch of utterances."""

    ids: np.ndarray          # (B, T) piece ids, PAD_ID at padding
    pad_mask: np.ndarray     # (B, T) 1.0 at real pieces
    word_pool: np.ndarray    # (B, W, T) mean-pooling weights per word
    word_mask: np.ndarray    # (B, W) 1.0 at real words
    slot_ids: np.ndarray     # (B, W) gold slot class per word, else 0
    intent_ids: np.ndarray   # (B,)
    lm_mask: np.ndarray      # (B, T) 1.0 where a next-token target exists
    lm_targets: np.ndarray   # (B, T) id of the next piece, PAD_ID elsewhere


def encode_records(records, vocab: Vocabulary, schema: LabelSchema,
                   rng: np.random.Generator | None = None,
                   char_fallback_prob: float = 0.0) -> Batch:
    """Pad a list of records into one batch.

    With ``char_fallback_prob`` > 0 (training only) individual in-vocabulary
    words are spelled out as characters, which teaches the trunk to read the
    character inventory it must rely on for out-of-vocabulary target words.
    """
    for rec in records:
        if rec.intent not in schema.intents:
            raise InvalidInputError(f"unknown intent {rec.intent!r}")
    encoded = []
    for rec in records:
        ids: list[int] = []
        spans: list[tuple[int, int]] = []
        for w in rec.tokens:
            pieces = vocab.encode_word(w)
            if (len(pieces) == 1 and rng is not None and len(w) > 1
                    and rng.random() < char_fallback_prob):
                pieces = [vocab.id_of(ch) if vocab.id_of(ch) is not None
                          else UNK_ID for ch in w]
            spans.append((len(ids), len(ids) + len(pieces)))
            ids.extend(pieces)
        ids.append(EOS_ID)
        encoded.append((ids, spans))

    batch = len(records)
    width = max(len(ids) for ids, _ in encoded)
    n_words = max(len(spans) for _, spans in encoded)
    out = Batch(ids=np.full((batch, width), PAD_ID, dtype=np.int64),
                pad_mask=np.zeros((batch, width)),
                word_pool=np.zeros((batch, n_words, width)),
                word_mask=np.zeros((batch, n_words)),
                slot_ids=np.zeros((batch, n_words), dtype=np.int64),
                intent_ids=np.zeros(batch, dtype=np.int64),
                lm_mask=np.zeros((batch, width)),
                lm_targets=np.full((batch, width), PAD_ID, dtype=np.int64))
    for b, (rec, (ids, spans)) in enumerate(zip(records, encoded)):
        n = len(ids)
        out.ids[b, :n] = ids
        out.pad_mask[b, :n] = 1.0
        out.intent_ids[b] = schema.intent_id(rec.intent)
        for w, ((start, end), tag) in enumerate(zip(spans, rec.slots)):
            # Each word is read as the mean of its piece states, so word
            # identity survives both context changes and novel trailing
            # characters on spelled-out words.
            out.word_pool[b, w, start:end] = 1.0 / (end - start)
            out.word_mask[b, w] = 1.0
            out.slot_ids[b, w] = schema.slot_id(tag)
        out.lm_targets[b, :n - 1] = ids[1:]
        out.lm_mask[b, :n - 1] = 1.0
    return out


def shuffle_record(rec: UtteranceRecord, rng: np.random.Generator) -> UtteranceRecord:
    """Permute the utterance at span granularity, labels riding along.

    Slot spans (a B- tag plus its I- continuations) move as blocks so BIO
    structure stays valid.  Used as a training-time augmentation that forces
    the tagger to key on word identity rather than absolute position, which
    is what survives a word-order change in a transfer target.
    """
    groups: list[list[int]] = []
    for i, tag in enumerate(rec.slots):
        if tag.startswith("I-") and groups:
            groups[-1].append(i)
        else:
            groups.append([i])
    order = rng.permutation(len(groups))
    idx = [i for g in order for i in groups[g]]
    return UtteranceRecord(tokens=tuple(rec.tokens[i] for i in idx),
                           intent=rec.intent,
                           slots=tuple(rec.slots[i] for i in idx),
                           locale=rec.locale)


def _reduce(per_record: Tensor, reduction: str) -> Tensor:
    return ad.tmean(per_record) if reduction == "mean" else ad.tsum(per_record)


@dataclass
class LossParts:
    slu: Tensor
    action: Tensor
    lm: Tensor
    total: Tensor  # slu + alpha * action (the composite objective)


def forward_losses(params: M.ModelParams, batch: Batch, cfg: TrainConfig,
                   use_gold_intent: bool, alpha: float | None = None,
                   with_lm: bool | None = None) -> LossParts:
    """One forward pass producing every loss component on the active tape."""
    alpha = cfg.alpha if alpha is None else alpha
    with_lm = (cfg.lm_weight > 0) if with_lm is None else with_lm

    enc = M.encode_batch(params, batch.ids, batch.pad_mask)
    intent_lg = M.intent_logits(params, enc.h_u)
    intent_ce = ad.cross_entropy_logits(intent_lg, batch.intent_ids)  # (B,)

    if use_gold_intent:
        chosen = batch.intent_ids
    else:
        chosen = np.argmax(intent_lg.data, axis=-1)
    h_intent = M.intent_embedding(params, chosen)

    word_states = ad.matmul(Tensor(batch.word_pool), enc.states)      # (B, W, d)
    slot_lg = M.slot_logits(params, word_states, h_intent)            # (B, W, nS)
    slot_ce = ad.cross_entropy_logits(slot_lg, batch.slot_ids)        # (B, W)
    slot_sum = ad.tsum(ad.mul(slot_ce, Tensor(batch.word_mask)), axis=1)
    slu = _reduce(ad.add(intent_ce, slot_sum), cfg.batch_reduction)

    action_lg = M.action_logits(params, word_states)                  # (B, W, nS)
    if cfg.action_loss_mode == ACTION_BCE:
        onehot = np.zeros(action_lg.data.shape)
        np.put_along_axis(onehot, batch.slot_ids[..., None], 1.0, axis=-1)
        per_pos = ad.tsum(ad.bce_logits(action_lg, onehot), axis=-1)  # (B, T)
    else:
        per_pos = ad.neg(ad.log_sigmoid(ad.pick(action_lg, batch.slot_ids)))
    action = _reduce(ad.tsum(ad.mul(per_pos, Tensor(batch.word_mask)), axis=1),
                     cfg.batch_reduction)

    if with_lm:
        lm_lg = M.lm_logits(params, enc.states)
        lm_ce = ad.cross_entropy_logits(lm_lg, batch.lm_targets)
        lm = _reduce(ad.tsum(ad.mul(lm_ce, Tensor(batch.lm_mask)), axis=1),
                     cfg.batch_reduction)
    else:
        lm = Tensor(0.0)

    total = ad.add(slu, ad.scale(action, alpha)) if alpha != 0.0 else slu
    return LossParts(slu=slu, action=action, lm=lm, total=total)


def slu_loss(params, records, vocab, schema, cfg: TrainConfig,
             use_gold_intent: bool = True) -> float:
    batch = encode_records(records, vocab, schema)
    return forward_losses(params, batch, cfg, use_gold_intent).slu.data.item()


def action_loss(params, records, vocab, schema, cfg: TrainConfig) -> float:
    batch = encode_records(records, vocab, schema)
    return forward_losses(params, batch, cfg, True).action.data.item()


def total_loss(params, records, vocab, schema, cfg: TrainConfig,
               alpha: float | None = None) -> float:
    batch = encode_records(records, vocab, schema)
    return forward_losses(params, batch, cfg, True, alpha=alpha).total.data.item()


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam; one instance owns one parameter set."""

    def __init__(self, params: M.ModelParams, cfg: TrainConfig,
                 learning_rate: float | None = None):
        self.params = params
        self.cfg = cfg
        self.lr = cfg.learning_rate if learning_rate is None else learning_rate
        self.step_count = 0
        self._m = {n: np.zeros_like(t.data) for n, t in params.named()}
        self._v = {n: np.zeros_like(t.data) for n, t in params.named()}

    def step(self) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in self.params.named():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient in {name!r} at step {t}")
            m = self._m[name]
            v = self._v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * (m_hat / (np.sqrt(v_hat) + cfg.eps)
                                 + cfg.weight_decay * p.data)


def adamw_step(params: M.ModelParams, cfg: TrainConfig,
               optimizer: AdamW | None = None) -> AdamW:
    """Single-step convenience over :class:`AdamW` (grads must be populated)."""
    opt = optimizer or AdamW(params, cfg)
    opt.step()
    return opt


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochStats:
    epoch: int
    slu_loss: float
    action_loss: float
    total_loss: float
    wall_seconds: float


def train(corpus: Corpus, schema: LabelSchema, vocab: Vocabulary,
          model_cfg: M.ModelConfig, cfg: TrainConfig,
          params: M.ModelParams | None = None):
    """Run the training loop; returns (params, per-epoch history).

    Deterministic given (corpus, seed, config): shuffling, character
    fallback, and initialization all draw from one seeded generator chain.
    """
    if not corpus:
        raise InvalidInputError("empty training corpus")
    if params is None:
        params = M.init_params(model_cfg, schema, seed=cfg.seed)
    opt = AdamW(params, cfg)
    shuffle_rng = np.random.default_rng(cfg.seed + 1)
    fallback_rng = np.random.default_rng(cfg.seed + 2)

    warmup_epochs = cfg.gold_intent_warmup_fraction * cfg.epochs
    history: list[EpochStats] = []
    n = len(corpus)
    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        use_gold = epoch < warmup_epochs
        sums = {"slu": 0.0, "action": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            records = [corpus[i] for i in order[lo:lo + cfg.batch_size]]
            if cfg.word_shuffle_prob > 0:
                records = [shuffle_record(r, fallback_rng)
                           if fallback_rng.random() < cfg.word_shuffle_prob
                           else r for r in records]
            batch = encode_records(records, vocab, schema, rng=fallback_rng,
                                   char_fallback_prob=cfg.char_fallback_prob)
            params.zero_grads()
            with Tape() as tape:
                parts = forward_losses(params, batch, cfg, use_gold)
                objective = parts.total
                if cfg.lm_weight > 0:
                    objective = ad.add(objective,
                                       ad.scale(parts.lm, cfg.lm_weight))
            ad.backward(tape, objective, params.all_tensors())
            opt.step()
            sums["slu"] += parts.slu.data.item()
            sums["action"] += parts.action.data.item()
            sums["total"] += parts.total.data.item()
            n_batches += 1
        history.append(EpochStats(
            epoch=epoch,
            slu_loss=sums["slu"] / n_batches,
            action_loss=sums["action"] / n_batches,
            total_loss=sums["total"] / n_batches,
            wall_seconds=time.perf_counter() - start))
    return params, history


def adapt(params: M.ModelParams, task: FewShotTask, vocab: Vocabulary,
          cfg: TrainConfig, alpha: float | None = None):
    """Zero-/few-shot adaptation followed by query predictions.

    K = 0 returns the parameters untouched (the zero-shot limit); otherwise a
    copy is fine-tuned on the support set for a small step budget at a scaled
    learning rate.
    """
    from .decoding import predict_slu  # local import avoids a cycle

    schema = params.schema
    alpha = cfg.alpha if alpha is None else alpha
    if task.k_shots == 0:
        adapted = params
    else:
        adapted = params.copy()
        opt = AdamW(adapted, cfg, learning_rate=cfg.learning_rate * cfg.adapt_lr_scale)
        rng = np.random.default_rng(cfg.seed + 3)
        support = list(task.support)
        for _ in range(cfg.adapt_steps):
            idx = rng.permutation(len(support))[:cfg.batch_size]
            batch = encode_records([support[i] for i in idx], vocab, schema)
            adapted.zero_grads()
            with Tape() as tape:
                parts = forward_losses(adapted, batch, cfg, use_gold_intent=True)
            ad.backward(tape, parts.total, adapted.all_tensors())
            opt.step()
    predictions = [predict_slu(adapted, vocab, rec.tokens, alpha=alpha)
                   for rec in task.query]
    return adapted, predictions
