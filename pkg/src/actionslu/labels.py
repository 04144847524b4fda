"""Intent and slot label inventories plus BIO span helpers."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidInputError

OUTSIDE = "O"


@dataclass(frozen=True)
class LabelSchema:
    """Ordered intent names and BIO slot labels (including exactly one "O")."""

    intents: tuple[str, ...]
    slots: tuple[str, ...]
    _intent_index: dict = field(init=False, repr=False, compare=False)
    _slot_index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(self.intents) < 2 or len(self.slots) < 2:
            raise InvalidInputError("need at least 2 intents and 2 slot labels")
        if len(set(self.intents)) != len(self.intents):
            raise InvalidInputError("duplicate intent names")
        if len(set(self.slots)) != len(self.slots):
            raise InvalidInputError("duplicate slot labels")
        if self.slots.count(OUTSIDE) != 1:
            raise InvalidInputError('slot labels must contain "O" exactly once')
        object.__setattr__(self, "_intent_index",
                           {name: i for i, name in enumerate(self.intents)})
        object.__setattr__(self, "_slot_index",
                           {name: i for i, name in enumerate(self.slots)})

    @property
    def num_intents(self) -> int:
        return len(self.intents)

    @property
    def num_slots(self) -> int:
        return len(self.slots)

    def intent_id(self, name: str) -> int:
        return self._intent_index[name]

    def slot_id(self, name: str) -> int:
        return self._slot_index[name]

    def slot_types(self) -> tuple[str, ...]:
        """Distinct span types, i.e. the X in B-X/I-X, in first-seen order."""
        seen = []
        for lab in self.slots:
            if lab == OUTSIDE:
                continue
            typ = lab.split("-", 1)[1]
            if typ not in seen:
                seen.append(typ)
        return tuple(seen)

    @staticmethod
    def for_slot_types(intents, slot_types) -> "LabelSchema":
        slots = [OUTSIDE]
        for typ in slot_types:
            slots.append(f"B-{typ}")
            slots.append(f"I-{typ}")
        return LabelSchema(intents=tuple(intents), slots=tuple(slots))


def validate_bio(tags, strict: bool = True) -> None:
    """Reject sequences where an I-X tag has no matching B-X/I-X before it."""
    prev = OUTSIDE
    for i, tag in enumerate(tags):
        if tag != OUTSIDE and not (tag.startswith("B-") or tag.startswith("I-")):
            raise InvalidInputError(f"position {i}: invalid BIO tag {tag!r}")
        if tag.startswith("I-"):
            typ = tag[2:]
            if prev not in (f"B-{typ}", f"I-{typ}"):
                raise InvalidInputError(
                    f"position {i}: {tag!r} not preceded by B-{typ} or I-{typ}")
        prev = tag


def bio_to_spans(tags) -> list[tuple[int, int, str]]:
    """BIO tags -> (start, end_exclusive, type) spans.

    An I-X that does not continue an open X span opens a new one (the usual
    lenient CoNLL reading), so the function is total over predicted tags.
    """
    spans = []
    start = None
    cur = None
    for i, tag in enumerate(tags):
        if tag == OUTSIDE or tag.startswith("B-") or not tag.startswith("I-"):
            if start is not None:
                spans.append((start, i, cur))
                start, cur = None, None
            if tag.startswith("B-"):
                start, cur = i, tag[2:]
            continue
        typ = tag[2:]
        if cur == typ:
            continue
        if start is not None:
            spans.append((start, i, cur))
        start, cur = i, typ
    if start is not None:
        spans.append((start, len(tags), cur))
    return spans


def spans_to_bio(length: int, spans) -> list[str]:
    tags = [OUTSIDE] * length
    for start, end, typ in spans:
        tags[start] = f"B-{typ}"
        for i in range(start + 1, end):
            tags[i] = f"I-{typ}"
    return tags


def repair_bio(tags) -> list[str]:
    """Optional post-hoc repair: I-X after O (or after another type) -> B-X."""
    out = list(tags)
    prev = OUTSIDE
    for i, tag in enumerate(out):
        if tag.startswith("I-"):
            typ = tag[2:]
            if prev not in (f"B-{typ}", f"I-{typ}"):
                out[i] = f"B-{typ}"
        prev = out[i]
    return out
