"""Corpus io, vocabulary, synthetic language pair, and K-shot sampling."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from actionslu.data import (EOS_ID, PAD_ID, RESERVED, UNK_ID, FewShotTask,
                            SyntheticLanguageSpec, TemplateGrammar,
                            UtteranceRecord, Vocabulary, build_vocab,
                            default_transfer_spec, generate_corpus,
                            generate_synthetic_pair, kshot_sample, load_conll,
                            load_jsonl, load_mtop_flat, transform_record,
                            write_conll, write_jsonl)
from actionslu.errors import InvalidInputError, ParseError, SamplingError


@pytest.fixture
def corpus():
    return [
        UtteranceRecord(tokens=("play", "abba"), intent="play_music",
                        slots=("O", "B-artist")),
        UtteranceRecord(tokens=("set", "an", "alarm"), intent="set_alarm",
                        slots=("O", "O", "O"), locale="src"),
    ]


class TestRecord:
    def test_length_mismatch_rejected(self):
        with pytest.raises(InvalidInputError):
            UtteranceRecord(tokens=("a", "b"), intent="x", slots=("O",))

    def test_frozen(self, corpus):
        with pytest.raises(AttributeError):
            corpus[0].intent = "other"


class TestJsonl:
    def test_round_trip(self, tmp_path, corpus):
        path = tmp_path / "c.jsonl"
        write_jsonl(corpus, path)
        assert load_jsonl(path) == corpus

    def test_header_written_and_checked(self, tmp_path, corpus):
        path = tmp_path / "c.jsonl"
        write_jsonl(corpus, path)
        first = path.read_text().splitlines()[0]
        assert json.loads(first) == {"format": "slu-jsonl", "version": 1}
        path.write_text('{"format":"slu-jsonl","version":99}\n')
        with pytest.raises(ParseError):
            load_jsonl(path)

    def test_parse_error_carries_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format":"slu-jsonl","version":1}\n'
                        '{"tokens":["a"],"intent":"x","slots":["O"]}\n'
                        "{not json}\n")
        with pytest.raises(ParseError) as exc:
            load_jsonl(path)
        assert exc.value.line == 3

    def test_bio_violation_rejected_at_load(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"tokens":["a"],"intent":"x","slots":["I-q"]}\n')
        with pytest.raises(ParseError) as exc:
            load_jsonl(path)
        assert exc.value.line == 1

    def test_byte_identical_rewrite(self, tmp_path, corpus):
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_jsonl(corpus, p1)
        write_jsonl(load_jsonl(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestConll:
    def test_round_trip(self, tmp_path, corpus):
        path = tmp_path / "c.conll"
        write_conll(corpus, path)
        assert load_conll(path) == corpus

    def test_crlf_tolerated(self, tmp_path, corpus):
        path = tmp_path / "c.conll"
        write_conll(corpus, path)
        crlf = tmp_path / "crlf.conll"
        crlf.write_bytes(path.read_text().replace("\n", "\r\n").encode())
        assert load_conll(crlf) == corpus

    def test_missing_intent_header(self, tmp_path):
        path = tmp_path / "c.conll"
        path.write_text("# slu-conll v1\nplay\tO\n\n")
        with pytest.raises(ParseError):
            load_conll(path)

    def test_bad_column_count(self, tmp_path):
        path = tmp_path / "c.conll"
        path.write_text("# intent = x\nplay O\n\n")
        with pytest.raises(ParseError) as exc:
            load_conll(path)
        assert exc.value.line == 2


def test_mtop_stub_fails_loudly(tmp_path):
    path = tmp_path / "mtop.txt"
    path.write_text("1\tintent\n")
    with pytest.raises(NotImplementedError):
        load_mtop_flat(path)


class TestVocabulary:
    def test_reserved_prefix_enforced(self):
        with pytest.raises(InvalidInputError):
            Vocabulary(tokens=("play", "<pad>", "<eos>", "<unk>"))

    def test_build_orders_by_count_then_token(self, corpus):
        vocab = build_vocab(corpus)
        assert vocab.tokens[:3] == RESERVED
        counts_ok = vocab.id_of("a") is not None  # char inventory retained
        assert counts_ok

    def test_char_fallback(self, corpus):
        vocab = build_vocab(corpus)
        pieces = vocab.encode_word("ba")  # unseen word made of seen chars
        assert pieces == [vocab.id_of("b"), vocab.id_of("a")]
        assert UNK_ID in vocab.encode_word("q#")  # '#' never seen

    def test_min_count_drops_words_not_chars(self, corpus):
        vocab = build_vocab(corpus, min_count=2)
        assert vocab.id_of("play") is None
        assert vocab.id_of("p") is not None
        assert len(vocab.encode_word("play")) == 4

    def test_encode_utterance_spans(self, corpus):
        vocab = build_vocab(corpus)
        ids, spans = vocab.encode_utterance(("play", "zzz"))
        assert ids[-1] == EOS_ID
        assert spans[0] == (0, 1)
        assert spans[1] == (1, 4)  # spelled as three chars

    def test_json_round_trip(self, corpus):
        vocab = build_vocab(corpus)
        again = Vocabulary.from_json(vocab.to_json())
        assert again.tokens == vocab.tokens

    def test_reserved_ids_are_stable(self):
        assert (PAD_ID, EOS_ID, UNK_ID) == (0, 1, 2)


class TestGrammar:
    def test_corpus_is_seeded(self):
        g = TemplateGrammar()
        c1 = generate_corpus(g, 20, seed=5)
        c2 = generate_corpus(g, 20, seed=5)
        assert c1 == c2
        assert c1 != generate_corpus(g, 20, seed=6)

    def test_labels_align_with_schema(self):
        g = TemplateGrammar()
        schema = g.schema()
        for rec in generate_corpus(g, 50, seed=0):
            assert rec.intent in schema.intents
            for tag in rec.slots:
                assert tag in schema.slots

    def test_size_validation(self):
        with pytest.raises(InvalidInputError):
            generate_corpus(TemplateGrammar(), 0, seed=0)


class TestLanguageTransform:
    def test_identity_is_noop_on_tokens(self):
        g = TemplateGrammar()
        src, tgt = generate_synthetic_pair(
            g, 10, SyntheticLanguageSpec(word_order="identity"), seed=1)
        for s, t in zip(src, tgt):
            assert s.tokens == t.tokens
            assert s.slots == t.slots
            assert t.locale == "tgt"

    def test_reversal_permutes_tokens_and_labels_consistently(self):
        g = TemplateGrammar()
        spec = SyntheticLanguageSpec(word_order="reversal")
        for rec in generate_corpus(g, 20, seed=2):
            out, perm = transform_record(rec, spec)
            assert sorted(out.tokens) == sorted(rec.tokens)
            assert perm == list(range(rec.length - 1, -1, -1))
            # Type multiset per token transports exactly through the alignment.
            for tgt_pos, src_pos in enumerate(perm):
                src_type = rec.slots[src_pos].split("-")[-1]
                tgt_type = out.slots[tgt_pos].split("-")[-1]
                assert src_type == tgt_type

    def test_affix_rules_apply_by_type(self):
        g = TemplateGrammar()
        spec = SyntheticLanguageSpec(
            word_order="identity", affix_rules={"artist": "ak", "O": "a"})
        rec = UtteranceRecord(tokens=("play", "abba"), intent="play_music",
                              slots=("O", "B-artist"))
        out, _ = transform_record(rec, spec)
        assert out.tokens == ("playa", "abbaak")

    def test_script_map_applied_after_affix(self):
        spec = SyntheticLanguageSpec(word_order="identity",
                                     affix_rules={"O": "a"},
                                     script_map={"a": "4"})
        rec = UtteranceRecord(tokens=("pan",), intent="x", slots=("O",))
        out, _ = transform_record(rec, spec)
        assert out.tokens == ("p4n4",)

    def test_sov_swap_rotates_leading_outside_run(self):
        spec = SyntheticLanguageSpec(word_order="sov_swap")
        rec = UtteranceRecord(tokens=("play", "some", "abba", "now"),
                              intent="x",
                              slots=("O", "O", "B-artist", "O"))
        out, perm = transform_record(rec, spec)
        assert perm == [2, 3, 0, 1]
        assert out.tokens == ("abba", "now", "play", "some")

    def test_default_transfer_spec_is_reversal_plus_affix(self):
        spec = default_transfer_spec()
        assert spec.word_order == "reversal"
        assert spec.affix_rules["O"] == "a"
        for typ in TemplateGrammar().slot_types:
            assert spec.affix_rules[typ]

    def test_same_seed_bit_identical(self):
        g = TemplateGrammar()
        spec = default_transfer_spec(g)
        a = generate_synthetic_pair(g, 15, spec, seed=3)
        b = generate_synthetic_pair(g, 15, spec, seed=3)
        assert a == b

    def test_bad_word_order_rejected(self):
        with pytest.raises(InvalidInputError):
            SyntheticLanguageSpec(word_order="vso")

    def test_swap_ratio_bounds(self):
        with pytest.raises(InvalidInputError):
            SyntheticLanguageSpec(lexicon_swap_ratio=1.5)

    def test_lexicon_swap_replaces_content_words(self):
        g = TemplateGrammar()
        spec = SyntheticLanguageSpec(word_order="identity",
                                     lexicon_swap_ratio=1.0, seed=4)
        src, tgt = generate_synthetic_pair(g, 10, spec, seed=4)
        changed = sum(s.tokens != t.tokens for s, t in zip(src, tgt))
        assert changed > 0


class TestKShot:
    def _corpus(self, per_class=5):
        recs = []
        for intent in ("a", "b", "c"):
            for i in range(per_class):
                recs.append(UtteranceRecord(tokens=(f"{intent}{i}",),
                                            intent=intent, slots=("O",)))
        return recs

    def test_stratified_counts(self):
        task = kshot_sample(self._corpus(), k=2, n=3, seed=0)
        assert len(task.support) == 6
        for intent in ("a", "b", "c"):
            assert sum(r.intent == intent for r in task.support) == 2

    def test_query_disjoint_from_support(self):
        task = kshot_sample(self._corpus(), k=2, n=3, seed=1)
        assert not set(task.support) & set(task.query)

    def test_zero_shot(self):
        task = kshot_sample(self._corpus(), k=0, n=3, seed=0)
        assert task.support == ()
        assert len(task.query) == 15

    def test_insufficient_examples_names_class(self):
        with pytest.raises(SamplingError) as exc:
            kshot_sample(self._corpus(per_class=1), k=2, n=3, seed=0)
        assert "'a'" in str(exc.value)

    def test_task_invariants(self):
        with pytest.raises(InvalidInputError):
            FewShotTask(support=(object(),), query=(), k_shots=0, n_classes=1)


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 10_000))
def test_transform_alignment_property(seed):
    """Target token i is source token alignment[i] plus its type suffix."""
    g = TemplateGrammar()
    spec = default_transfer_spec(g)
    rec = generate_corpus(g, 1, seed=seed)[0]
    out, perm = transform_record(rec, spec)
    assert sorted(perm) == list(range(rec.length))
    for tgt_pos, src_pos in enumerate(perm):
        typ = rec.slots[src_pos].split("-")[-1]
        suffix = spec.affix_rules[typ]
        assert out.tokens[tgt_pos] == rec.tokens[src_pos] + suffix
