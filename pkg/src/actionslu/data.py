"""Corpus records, file formats, vocabulary, and the synthetic language pair.

The synthetic generator stands in for a real cross-lingual corpus: a seeded
template grammar produces labeled source utterances, and an invertible
transform (word-order permutation, slot-type suffixes, script substitution,
lexicon swap) produces a "distant" target language whose gold labels are
transported exactly through the token alignment.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ParseError, SamplingError
from .labels import OUTSIDE, LabelSchema, bio_to_spans, validate_bio

JSONL_HEADER = {"format": "slu-jsonl", "version": 1}
CONLL_HEADER = "# slu-conll v1"

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
RESERVED = ("<pad>", "<eos>", "<unk>")


@dataclass(frozen=True)
class UtteranceRecord:
    tokens: tuple[str, ...]
    intent: str
    slots: tuple[str, ...]
    locale: str = "src"

    def __post_init__(self):
        if len(self.tokens) != len(self.slots):
            raise InvalidInputError(
                f"{len(self.tokens)} tokens vs {len(self.slots)} slot labels")

    @property
    def length(self) -> int:
        return len(self.tokens)


Corpus = list  # list[UtteranceRecord]


def _record_from_obj(obj, line=None) -> UtteranceRecord:
    try:
        tokens = tuple(obj["tokens"])
        intent = obj["intent"]
        slots = tuple(obj["slots"])
        locale = obj.get("locale", "src")
    except (KeyError, TypeError) as exc:
        raise ParseError(f"missing field {exc}", line=line) from exc
    if len(tokens) != len(slots):
        raise ParseError(
            f"{len(tokens)} tokens but {len(slots)} slots", line=line)
    try:
        validate_bio(slots)
    except InvalidInputError as exc:
        raise ParseError(str(exc), line=line) from exc
    return UtteranceRecord(tokens=tokens, intent=intent, slots=slots, locale=locale)


def load_jsonl(path) -> Corpus:
    corpus = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line=lineno) from exc
            if lineno == 1 and isinstance(obj, dict) and "format" in obj:
                if obj != JSONL_HEADER:
                    raise ParseError(f"unsupported format header {obj}", line=1)
                continue
            corpus.append(_record_from_obj(obj, line=lineno))
    return corpus


def _canonical_record(rec: UtteranceRecord) -> str:
    obj = {"tokens": list(rec.tokens), "intent": rec.intent,
           "slots": list(rec.slots), "locale": rec.locale}
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def write_jsonl(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(JSONL_HEADER, separators=(",", ":")) + "\n")
        for rec in corpus:
            f.write(_canonical_record(rec) + "\n")


def load_conll(path) -> Corpus:
    corpus = []
    tokens, tags = [], []
    intent, locale = None, "src"
    start_line = 1

    def flush(lineno):
        nonlocal tokens, tags, intent, locale
        if not tokens:
            intent, locale = None, "src"
            return
        if intent is None:
            raise ParseError("block missing '# intent = ...' header",
                             line=start_line)
        corpus.append(_record_from_obj(
            {"tokens": tokens, "intent": intent, "slots": tags,
             "locale": locale}, line=start_line))
        tokens, tags = [], []
        intent, locale = None, "src"

    with open(path, "r", encoding="utf-8", newline=None) as f:
        lineno = 0
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                flush(lineno)
                start_line = lineno + 1
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    key, value = key.strip(), value.strip()
                    if key == "intent":
                        intent = value
                    elif key == "locale":
                        locale = value
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(
                    f"expected 'token<TAB>slot', got {line!r}", line=lineno)
            tokens.append(parts[0])
            tags.append(parts[1])
        flush(lineno + 1)
    return corpus


def write_conll(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(CONLL_HEADER + "\n")
        for rec in corpus:
            f.write(f"# intent = {rec.intent}\n")
            f.write(f"# locale = {rec.locale}\n")
            for tok, tag in zip(rec.tokens, rec.slots):
                f.write(f"{tok}\t{tag}\n")
            f.write("\n")


def load_mtop_flat(path):
    """Adapter stub for MTOP flat files.

    The expected layout is a TSV with at least columns
    ``(id, intent, slot_string, utterance, domain, locale, decoupled, tokens_json)``
    where ``tokens_json`` carries the tokenization.  Real MTOP data is not
    bundled; this fails loudly so a mismatched local copy is noticed
    immediately rather than silently mis-parsed.
    """
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().rstrip("\n")
    cols = first.split("\t")
    raise NotImplementedError(
        "MTOP import is a documented stub: expected an 8-column flat TSV, "
        f"found {len(cols)} columns in {path!r}. Convert your copy to the "
        "slu-jsonl or slu-conll format instead.")


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------

@dataclass
class Vocabulary:
    """Dense token ids with reserved pad/end/unknown and character fallback.

    Out-of-vocabulary words are spelled out as their single-character tokens
    (the character inventory is always in the vocabulary); characters unseen
    at build time map to the reserved unknown id.
    """

    tokens: tuple[str, ...]
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:3] != RESERVED:
            raise InvalidInputError("vocabulary must start with reserved tokens")
        self._index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self._index) != len(self.tokens):
            raise InvalidInputError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id_of(self, token: str):
        return self._index.get(token)

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    def encode_word(self, word: str) -> list[int]:
        """One id for an in-vocabulary word, else its character fallback."""
        idx = self._index.get(word)
        if idx is not None:
            return [idx]
        return [self._index.get(ch, UNK_ID) for ch in word]

    def encode_utterance(self, words, eos: bool = True):
        """Piece ids plus, per word, the index range it occupies."""
        ids: list[int] = []
        word_spans: list[tuple[int, int]] = []
        for w in words:
            pieces = self.encode_word(w)
            word_spans.append((len(ids), len(ids) + len(pieces)))
            ids.extend(pieces)
        if eos:
            ids.append(EOS_ID)
        return ids, word_spans

    def to_json(self) -> dict:
        return {"format": "slu-vocab", "version": 1, "tokens": list(self.tokens)}

    @staticmethod
    def from_json(obj) -> "Vocabulary":
        return Vocabulary(tokens=tuple(obj["tokens"]))


def build_vocab(corpus: Corpus, min_count: int = 1) -> Vocabulary:
    """Deterministic vocabulary: reserved ids, then (count desc, token asc).

    Words below ``min_count`` are dropped (they fall back to characters);
    the character inventory of the corpus is always retained.
    """
    if not corpus:
        raise InvalidInputError("cannot build a vocabulary from an empty corpus")
    word_counts: Counter = Counter()
    char_counts: Counter = Counter()
    for rec in corpus:
        for w in rec.tokens:
            word_counts[w] += 1
            char_counts.update(w)
    merged: Counter = Counter()
    for w, c in word_counts.items():
        if c >= min_count and len(w) > 1:
            merged[w] = c
    for ch, c in char_counts.items():
        # Single characters double as fallback units and are never dropped.
        merged[ch] = max(merged.get(ch, 0), c)
    for w, c in word_counts.items():
        if len(w) == 1 and c >= min_count:
            merged[w] = max(merged[w], c)
    ordered = sorted(merged.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tokens=RESERVED + tuple(tok for tok, _ in ordered))


# ---------------------------------------------------------------------------
# synthetic language pair
# ---------------------------------------------------------------------------

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_word(rng: np.random.Generator, min_syll=2, max_syll=3) -> str:
    n = int(rng.integers(min_syll, max_syll + 1))
    return "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))]
                   + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(n))


_INTENTS = ("play_music", "set_alarm", "get_weather", "book_table",
            "send_message", "start_timer", "get_route", "add_note")
_SLOT_TYPES = ("artist", "song", "time", "date", "city", "venue",
               "contact", "duration", "street", "topic")

# Carrier templates per intent; "{type}" marks a slot to fill.
_TEMPLATES = {
    "play_music": (("play", "{song}", "by", "{artist}"),
                   ("put", "on", "{song}", "now"),
                   ("play", "some", "{artist}", "songs")),
    "set_alarm": (("set", "an", "alarm", "for", "{time}"),
                  ("wake", "me", "at", "{time}", "on", "{date}")),
    "get_weather": (("weather", "in", "{city}", "on", "{date}"),
                    ("will", "it", "rain", "in", "{city}")),
    "book_table": (("book", "a", "table", "at", "{venue}", "for", "{time}"),
                   ("reserve", "{venue}", "in", "{city}")),
    "send_message": (("send", "{contact}", "a", "note", "about", "{topic}"),
                     ("text", "{contact}", "now")),
    "start_timer": (("start", "a", "timer", "for", "{duration}"),
                    ("count", "down", "{duration}")),
    "get_route": (("route", "to", "{street}", "in", "{city}"),
                  ("directions", "to", "{venue}", "via", "{street}")),
    "add_note": (("note", "to", "self", "about", "{topic}"),
                 ("remember", "{topic}", "on", "{date}")),
}


@dataclass(frozen=True)
class TemplateGrammar:
    """Seeded grammar: intents, slot types, and pseudo-word filler lexicons."""

    intents: tuple[str, ...] = _INTENTS
    slot_types: tuple[str, ...] = _SLOT_TYPES
    fillers_per_type: int = 30
    lexicon_seed: int = 20240401

    def schema(self) -> LabelSchema:
        return LabelSchema.for_slot_types(self.intents, self.slot_types)

    def fillers(self) -> dict[str, tuple[tuple[str, ...], ...]]:
        """Per slot type, deterministic 1-2 word filler phrases."""
        rng = np.random.default_rng(self.lexicon_seed)
        table = {}
        for typ in self.slot_types:
            phrases = []
            seen = set()
            while len(phrases) < self.fillers_per_type:
                n_words = 1 if rng.random() < 0.7 else 2
                phrase = tuple(_pseudo_word(rng) for _ in range(n_words))
                if phrase not in seen:
                    seen.add(phrase)
                    phrases.append(phrase)
            table[typ] = tuple(phrases)
        return table


def generate_corpus(grammar: TemplateGrammar, size: int, seed: int,
                    locale: str = "src") -> Corpus:
    if size < 1:
        raise InvalidInputError("size must be >= 1")
    rng = np.random.default_rng(seed)
    fillers = grammar.fillers()
    corpus = []
    for _ in range(size):
        intent = grammar.intents[rng.integers(len(grammar.intents))]
        templates = _TEMPLATES[intent]
        template = templates[rng.integers(len(templates))]
        tokens: list[str] = []
        tags: list[str] = []
        for item in template:
            if item.startswith("{"):
                typ = item[1:-1]
                phrase = fillers[typ][rng.integers(len(fillers[typ]))]
                for k, w in enumerate(phrase):
                    tokens.append(w)
                    tags.append(f"B-{typ}" if k == 0 else f"I-{typ}")
            else:
                tokens.append(item)
                tags.append(OUTSIDE)
        corpus.append(UtteranceRecord(tokens=tuple(tokens), intent=intent,
                                      slots=tuple(tags), locale=locale))
    return corpus


@dataclass(frozen=True)
class SyntheticLanguageSpec:
    """Invertible source->target transform standing in for a distant language."""

    word_order: str = "identity"  # identity | reversal | sov_swap
    affix_rules: dict = field(default_factory=dict)  # slot type (or "O") -> suffix
    script_map: dict = field(default_factory=dict)   # char -> char
    lexicon_swap_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.word_order not in ("identity", "reversal", "sov_swap"):
            raise InvalidInputError(f"unknown word_order {self.word_order!r}")
        if not 0.0 <= self.lexicon_swap_ratio <= 1.0:
            raise InvalidInputError("lexicon_swap_ratio outside [0, 1]")


def default_transfer_spec(grammar: TemplateGrammar | None = None,
                          seed: int = 11) -> SyntheticLanguageSpec:
    """Reversal word order plus per-slot-type suffixes (the reference target)."""
    grammar = grammar or TemplateGrammar()
    suffix_pool = ("ak", "esh", "ot", "un", "il", "ar", "em", "os", "ud", "iv")
    rules = {typ: suffix_pool[i % len(suffix_pool)]
             for i, typ in enumerate(grammar.slot_types)}
    rules[OUTSIDE] = "a"
    return SyntheticLanguageSpec(word_order="reversal", affix_rules=rules,
                                 script_map={}, lexicon_swap_ratio=0.0,
                                 seed=seed)


def _order_permutation(rec: UtteranceRecord, word_order: str) -> list[int]:
    n = rec.length
    if word_order == "identity":
        return list(range(n))
    if word_order == "reversal":
        return list(range(n - 1, -1, -1))
    # sov_swap: rotate the leading outside-tagged clause chunk to the end.
    k = 0
    while k < n and rec.slots[k] == OUTSIDE:
        k += 1
    return list(range(k, n)) + list(range(k))


def _swap_lexicon(corpus: Corpus, spec: SyntheticLanguageSpec) -> dict[str, str]:
    """Deterministic word -> target-form map for a fraction of content words."""
    if spec.lexicon_swap_ratio == 0.0:
        return {}
    content = sorted({tok for rec in corpus
                      for tok, tag in zip(rec.tokens, rec.slots)
                      if tag != OUTSIDE})
    rng = np.random.default_rng(spec.seed)
    n_swap = int(round(spec.lexicon_swap_ratio * len(content)))
    chosen = rng.choice(len(content), size=n_swap, replace=False) if n_swap else []
    return {content[i]: _pseudo_word(rng) for i in sorted(chosen)}


def transform_record(rec: UtteranceRecord, spec: SyntheticLanguageSpec,
                     swap_map: dict[str, str] | None = None,
                     locale: str = "tgt"):
    """Apply the language transform; returns (target record, alignment).

    ``alignment[i]`` is the source position of target token i.  Slot spans
    stay contiguous under every supported permutation, so gold BIO labels
    transport exactly.
    """
    swap_map = swap_map or {}
    perm = _order_permutation(rec, spec.word_order)

    # Move (span_id, type) annotations through the permutation, then re-emit BIO.
    spans = bio_to_spans(rec.slots)
    src_ann: list[tuple[int, str] | None] = [None] * rec.length
    for sid, (start, end, typ) in enumerate(spans):
        for i in range(start, end):
            src_ann[i] = (sid, typ)

    out_tokens: list[str] = []
    out_tags: list[str] = []
    prev_sid = None
    for tgt_pos, src_pos in enumerate(perm):
        word = rec.tokens[src_pos]
        ann = src_ann[src_pos]
        typ = ann[1] if ann else OUTSIDE
        word = swap_map.get(word, word)
        suffix = spec.affix_rules.get(typ if ann else OUTSIDE, "")
        word = word + suffix
        if spec.script_map:
            word = "".join(spec.script_map.get(ch, ch) for ch in word)
        out_tokens.append(word)
        if ann is None:
            out_tags.append(OUTSIDE)
            prev_sid = None
        else:
            sid = ann[0]
            out_tags.append(f"I-{typ}" if sid == prev_sid else f"B-{typ}")
            prev_sid = sid
    return (UtteranceRecord(tokens=tuple(out_tokens), intent=rec.intent,
                            slots=tuple(out_tags), locale=locale), perm)


def generate_synthetic_pair(grammar: TemplateGrammar, size: int,
                            spec: SyntheticLanguageSpec, seed: int = 0):
    """Seeded (source, target) corpora with labels transported exactly."""
    source = generate_corpus(grammar, size, seed=seed, locale="src")
    swap_map = _swap_lexicon(source, spec)
    target = [transform_record(rec, spec, swap_map)[0] for rec in source]
    return source, target


# ---------------------------------------------------------------------------
# K-shot sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FewShotTask:
    """Stratified support set (K shots x N classes) plus a disjoint query set."""

    support: tuple
    query: tuple
    k_shots: int
    n_classes: int

    def __post_init__(self):
        if self.k_shots == 0 and self.support:
            raise InvalidInputError("zero-shot task must have an empty support set")
        if self.k_shots > 0 and len(self.support) != self.k_shots * self.n_classes:
            raise InvalidInputError(
                f"support has {len(self.support)} records, "
                f"expected {self.k_shots * self.n_classes}")


def kshot_sample(corpus: Corpus, k: int, n: int, seed: int,
                 classes=None) -> FewShotTask:
    """Draw a K-shot N-way task.  K = 0 yields the zero-shot task."""
    by_intent: dict[str, list[int]] = {}
    for i, rec in enumerate(corpus):
        by_intent.setdefault(rec.intent, []).append(i)
    if classes is None:
        classes = sorted(by_intent)[:n]
    if len(classes) != n:
        raise SamplingError(f"need {n} classes, corpus has {len(by_intent)}")
    rng = np.random.default_rng(seed)
    support_idx: list[int] = []
    for cls in classes:
        pool = by_intent.get(cls, [])
        if len(pool) < k:
            raise SamplingError(
                f"class {cls!r} has {len(pool)} examples, need {k}")
        if k:
            support_idx.extend(rng.choice(pool, size=k, replace=False).tolist())
    support_set = set(support_idx)
    query_idx = [i for i, rec in enumerate(corpus)
                 if i not in support_set and rec.intent in classes]
    return FewShotTask(support=tuple(corpus[i] for i in support_idx),
                       query=tuple(corpus[i] for i in query_idx),
                       k_shots=k, n_classes=n)
