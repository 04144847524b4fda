"""Action-guided generation and fused SLU tagging.

Next-token scores fuse the language-model layer with the action layer in log
space, ``log p_lm + alpha * log p_action``, renormalized over the candidate
set each step so beam scores stay comparable across steps.  ``alpha = 0``
falls back to plain language modeling exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import model as M
from .data import EOS_ID, Vocabulary
from .errors import InvalidInputError
from .labels import repair_bio


@dataclass(frozen=True)
class DecodeConfig:
    alpha: float = 0.125
    strategy: str = "greedy"        # greedy | beam
    beam_width: int = 4
    max_length: int = 32
    target_class: int = 0           # slot class (rescoring) or 0/1 (factored)
    candidate_k: int = 8
    mode: str = M.RESCORING
    end_token: int | None = EOS_ID  # None: run to max_length
    length_normalize: bool = True

    def __post_init__(self):
        if self.beam_width < 1:
            raise InvalidInputError("beam_width must be >= 1")
        if self.alpha < 0:
            raise InvalidInputError("alpha must be >= 0")
        if self.candidate_k < self.beam_width:
            raise InvalidInputError("candidate_k must be >= beam_width")
        if self.strategy not in ("greedy", "beam"):
            raise InvalidInputError(f"unknown strategy {self.strategy!r}")


@dataclass
class Hypothesis:
    """A (partial) decode with its score ledger.

    ``log_lm`` and ``log_action`` accumulate the raw per-step log factors of
    the fused product; ``log_z`` accumulates the per-step candidate-set
    normalizers, so the ranking score is
    ``log_lm + alpha * log_action - log_z``.
    """

    tokens: tuple = ()
    log_lm: float = 0.0
    log_action: float = 0.0
    log_z: float = 0.0
    alpha: float = 0.0
    finished: bool = False

    @property
    def fused_score(self) -> float:
        return self.log_lm + self.alpha * self.log_action - self.log_z

    def ranking_score(self, length_normalize: bool) -> float:
        if length_normalize and self.tokens:
            return self.fused_score / len(self.tokens)
        return self.fused_score


@dataclass
class _Step:
    cand_ids: np.ndarray      # ascending candidate token ids
    log_probs: np.ndarray     # renormalized fused log probabilities
    log_lm: np.ndarray        # raw LM log prob per candidate
    log_action: np.ndarray    # raw action log prob per candidate (0 when alpha=0)
    log_z: float
    extension: tuple | None   # (states, new_keys, new_values) from rescoring


def _fused_step(params: M.ModelParams, state: M.DecoderState,
                cfg: DecodeConfig) -> _Step:
    lm = M.np_lm_probs(params, state.last_state)
    vocab_size = lm.shape[0]

    if cfg.alpha == 0.0:
        # Pure language modeling over the full vocabulary; the candidate-set
        # normalizer is exactly 1, so the distribution is untouched.
        cand = np.arange(vocab_size)
        log_lm_full = np.log(lm)
        return _Step(cand_ids=cand, log_probs=log_lm_full, log_lm=log_lm_full,
                     log_action=np.zeros(vocab_size), log_z=0.0, extension=None)

    k = min(cfg.candidate_k, vocab_size)
    # Top-k LM candidates; ties broken toward the lowest token id.
    order = np.lexsort((np.arange(vocab_size), -lm))
    cand = np.sort(order[:k])
    log_lm_cand = np.log(lm[cand])

    extension = None
    if cfg.mode == M.RESCORING:
        states, new_keys, new_values = M.extend_candidates(params, state, cand)
        # Only the target class matters, so score one sigmoid column in log
        # space directly instead of materializing every class probability.
        z = (states @ params["action.w"].data[:, cfg.target_class]
             + params["action.b"].data[cfg.target_class])
        log_act = -np.logaddexp(0.0, -z)
        extension = (states, new_keys, new_values)
    elif cfg.mode == M.FACTORED:
        log_act = M.factored_log_scores(params, state, cand, cfg.target_class)
    else:
        p_act = M.action_score_candidates(params, state, cand,
                                          cfg.target_class, mode=cfg.mode)
        with np.errstate(divide="ignore"):
            log_act = np.log(p_act)   # p_act == 0 -> -inf, candidate excluded
    raw = log_lm_cand + cfg.alpha * log_act
    m = raw.max()
    log_z = m + np.log(np.exp(raw - m).sum())
    return _Step(cand_ids=cand, log_probs=raw - log_z, log_lm=log_lm_cand,
                 log_action=log_act, log_z=log_z, extension=extension)


def fused_next_distribution(params: M.ModelParams, state: M.DecoderState,
                            cfg: DecodeConfig):
    """(candidate ids, probabilities) of the action-fused next-token law."""
    step = _fused_step(params, state, cfg)
    return step.cand_ids, np.exp(step.log_probs)


def _commit(params: M.ModelParams, state: M.DecoderState, step: _Step,
            idx: int) -> None:
    if step.extension is not None:
        states, new_keys, new_values = step.extension
        M.commit_candidate(state, idx, step.cand_ids, states,
                           new_keys, new_values)
    else:
        token = int(step.cand_ids[idx])
        states, new_keys, new_values = M.extend_candidates(params, state, [token])
        M.commit_candidate(state, 0, [token], states, new_keys, new_values)


def greedy_decode(params: M.ModelParams, prompt_ids,
                  cfg: DecodeConfig) -> Hypothesis:
    """Pick the fused argmax at every step; ties go to the lowest token id."""
    state = M.start_state(params, prompt_ids)
    hyp = Hypothesis(alpha=cfg.alpha)
    while len(hyp.tokens) < cfg.max_length:
        step = _fused_step(params, state, cfg)
        best = np.lexsort((step.cand_ids, -step.log_probs))[0]
        token = int(step.cand_ids[best])
        hyp = Hypothesis(tokens=hyp.tokens + (token,),
                         log_lm=hyp.log_lm + step.log_lm[best],
                         log_action=hyp.log_action + step.log_action[best],
                         log_z=hyp.log_z + step.log_z,
                         alpha=cfg.alpha,
                         finished=(cfg.end_token is not None
                                   and token == cfg.end_token))
        if hyp.finished:
            break
        _commit(params, state, step, best)
    return hyp


def beam_decode(params: M.ModelParams, prompt_ids,
                cfg: DecodeConfig) -> list[Hypothesis]:
    """Length-normalized beam search over fused scores.

    Returns up to ``beam_width`` hypotheses, best first.  If nothing reaches
    the end token, the best unfinished hypotheses are returned with
    ``finished=False``.
    """
    root = M.start_state(params, prompt_ids)
    live: list[tuple[Hypothesis, M.DecoderState]] = [
        (Hypothesis(alpha=cfg.alpha), root)]
    done: list[Hypothesis] = []

    for _ in range(cfg.max_length):
        if not live:
            break
        expansions = []  # (score, hyp_idx, token, cand_idx, step)
        for h_idx, (hyp, state) in enumerate(live):
            step = _fused_step(params, state, cfg)
            for c_idx, token in enumerate(step.cand_ids):
                score = hyp.fused_score + step.log_probs[c_idx]
                if not np.isfinite(score):
                    continue
                expansions.append((score, h_idx, int(token), c_idx, step))
        expansions.sort(key=lambda e: (-e[0], e[1], e[2]))
        next_live = []
        for score, h_idx, token, c_idx, step in expansions:
            hyp, state = live[h_idx]
            new_hyp = Hypothesis(
                tokens=hyp.tokens + (token,),
                log_lm=hyp.log_lm + step.log_lm[c_idx],
                log_action=hyp.log_action + step.log_action[c_idx],
                log_z=hyp.log_z + step.log_z,
                alpha=cfg.alpha,
                finished=(cfg.end_token is not None and token == cfg.end_token))
            # Finished hypotheses retire to the pool without occupying a beam
            # slot, so ending early never crowds out longer continuations.
            if new_hyp.finished:
                done.append(new_hyp)
                continue
            if len(next_live) < cfg.beam_width:
                new_state = state.clone()
                _commit(params, new_state, step, c_idx)
                next_live.append((new_hyp, new_state))
        live = next_live

    ranked = sorted(done, key=lambda h: (-h.ranking_score(cfg.length_normalize),
                                         h.tokens))
    if len(ranked) < cfg.beam_width:
        leftovers = sorted((h for h, _ in live),
                           key=lambda h: (-h.ranking_score(cfg.length_normalize),
                                          h.tokens))
        ranked.extend(leftovers)
    return ranked[:cfg.beam_width]


def decode(params: M.ModelParams, prompt_ids, cfg: DecodeConfig):
    if cfg.strategy == "greedy":
        return [greedy_decode(params, prompt_ids, cfg)]
    return beam_decode(params, prompt_ids, cfg)


# ---------------------------------------------------------------------------
# fused SLU tagging
# ---------------------------------------------------------------------------

@dataclass
class SLUPrediction:
    tokens: tuple
    intent: str
    slots: tuple
    token_scores: tuple  # fused log score of the chosen label per token
    alpha: float

    def to_json_line(self) -> str:
        return json.dumps({"tokens": list(self.tokens), "intent": self.intent,
                           "slots": list(self.slots),
                           "token_scores": list(self.token_scores),
                           "alpha": self.alpha},
                          ensure_ascii=False, separators=(",", ":"))


def predict_slu(params: M.ModelParams, vocab: Vocabulary, tokens,
                alpha: float = 0.0, bio_repair: bool = False) -> SLUPrediction:
    """Intent plus per-token fused slot tags for one utterance.

    Per-token score is ``log p_slot + alpha * log p_action``; the argmax per
    token (lowest class index on ties) is the predicted label.  Words outside
    the vocabulary are spelled out as characters; each word is read as the
    mean of its piece states, so prediction never fails on unseen words.
    """
    tokens = tuple(tokens)
    if not tokens:
        raise InvalidInputError("empty utterance")
    schema = params.schema
    ids, word_spans = vocab.encode_utterance(tokens)
    enc = M.encode_batch(params, np.asarray(ids)[None, :])

    intent_lg = M.intent_logits(params, enc.h_u).data[0]
    intent_idx = int(np.argmax(intent_lg))
    h_intent = params["intent.w"].data[:, intent_idx][None, :]

    # Mean-pool each word over its piece states (matches the training-time
    # read-out; robust to char-spelled words with unfamiliar trailing chars).
    pool = np.zeros((len(word_spans), len(ids)))
    for w, (start, end) in enumerate(word_spans):
        pool[w, start:end] = 1.0 / (end - start)
    states = pool @ enc.states.data[0]                       # (L, d)
    slot_lg = (states + h_intent) * 0.5 @ params["slot.w"].data \
        + params["slot.b"].data
    log_slot = slot_lg - slot_lg.max(axis=-1, keepdims=True)
    log_slot = log_slot - np.log(np.exp(log_slot).sum(axis=-1, keepdims=True))
    log_act = -np.logaddexp(0.0, -(states @ params["action.w"].data
                                   + params["action.b"].data))
    fused = log_slot + alpha * log_act
    choice = np.argmax(fused, axis=-1)                       # first max wins ties
    tags = [schema.slots[c] for c in choice]
    if bio_repair:
        tags = repair_bio(tags)
    scores = tuple(float(fused[i, c]) for i, c in enumerate(choice))
    return SLUPrediction(tokens=tokens, intent=schema.intents[intent_idx],
                         slots=tuple(tags), token_scores=scores, alpha=alpha)


def write_predictions_jsonl(predictions, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for pred in predictions:
            f.write(pred.to_json_line() + "\n")
