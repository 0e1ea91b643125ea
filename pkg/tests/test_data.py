from collections import Counter

import pytest

from ctm.data import (
    CLASSES, ENTAILMENT, NON_ENTAILMENT, Example, build_novel_entity_set, build_pairs,
    format_input, load_corpus, make_pairs, write_corpus,
)
from ctm.errors import ConfigError, DataError, LengthError, ParseError
from ctm.rng import Rng
from ctm.synth import GenSpec, generate_synthetic_corpus
from ctm.tokenize import CLS, SEP, build_vocab


@pytest.fixture
def tsv(tmp_path):
    def write(text):
        p = tmp_path / "corpus.tsv"
        p.write_text(text, encoding="utf-8")
        return p
    return write


class TestLoadCorpus:
    def test_brand_and_product_rows(self, tsv):
        exs, rejects = load_corpus(tsv("brand\tNAGANO\tNAGANO Set of 2 Chairs\n"
                                       "product\tChairs\tNAGANO Set of 2 Chairs\n"))
        assert exs == [Example("NAGANO Set of 2 Chairs", "NAGANO", "brand"),
                       Example("NAGANO Set of 2 Chairs", "Chairs", "product")]
        assert rejects == []

    def test_missing_entity_rejected_with_reason(self, tsv):
        exs, rejects = load_corpus(tsv("brand\tXYZ\tABC widget\n"))
        assert exs == [] and rejects[0].line == 1 and "XYZ" in rejects[0].reason

    def test_partial_token_entity_rejected(self, tsv):
        _, rejects = load_corpus(tsv("brand\tNAG\tNAGANO chairs\n"))
        assert len(rejects) == 1

    def test_bad_column_count(self, tsv):
        with pytest.raises(ParseError, match="line 2"):
            load_corpus(tsv("brand\tA\tA b\nbrand\tA b\n"))

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(DataError):
            load_corpus(tmp_path / "missing.tsv")

    def test_generated_corpus_round_trips(self, corpus, tmp_path):
        train, test, _ = corpus
        for name, split in (("train", train), ("test", test)):
            write_corpus(tmp_path / f"{name}.tsv", split)
            exs, rejects = load_corpus(tmp_path / f"{name}.tsv")
            assert rejects == [] and exs == split


class TestPairs:
    def test_positive_pair_carries_gold(self):
        pos, neg = make_pairs(Example("Nike Mens Sportswear Aimoji Hoodie", "Hoodie", "product"), Rng(0))
        assert (pos.hypothesis_class, pos.label) == ("product", ENTAILMENT)
        assert neg.hypothesis_class in ("brand", "feature") and neg.label == NON_ENTAILMENT

    def test_negative_split_is_uniform(self):
        rng = Rng(3)
        ex = Example("Nike Hoodie", "Hoodie", "product")
        draws = Counter(make_pairs(ex, rng)[1].hypothesis_class for _ in range(10_000))
        assert set(draws) == {"brand", "feature"}
        assert abs(draws["brand"] / 10_000 - 0.5) <= 0.02

    def test_one_to_one_over_dataset(self, corpus):
        pairs = build_pairs(corpus[0], Rng(1))
        assert len(pairs) == 2 * len(corpus[0])
        assert sum(p.entailed for p in pairs) == len(corpus[0])


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["a b c d e"], 40, reserved_words=["is a product"])


class TestFormatInput:
    def test_prompt_slot_length(self, vocab):
        f = format_input("a b c d e", "c", 3, kind="wordpiece", vocab=vocab, max_seq=64)
        assert (f.n, f.m, f.p, len(f)) == (5, 1, 3, 11)
        assert f.tokens[0] == CLS and f.tokens[6] == SEP and f.prompt_slot

    def test_literal_hypothesis_follows_entity(self, vocab):
        f = format_input("a b c d e", "c", "is a product", kind="wordpiece", vocab=vocab, max_seq=64)
        assert f.tokens[f.slot_start:] == ["is", "a", "product"]
        assert f.tokens[f.n + 2] == "c"

    def test_dictionary_slot(self, vocab):
        assert format_input("a b", "a", 14, kind="char", vocab=vocab, max_seq=64).p == 14

    def test_overflow_names_the_example(self, vocab):
        with pytest.raises(LengthError, match="'c'"):
            format_input("a b c d e", "c", 14, kind="wordpiece", vocab=vocab, max_seq=16)

    def test_char_tokens_keep_case(self, vocab):
        f = format_input("NAGANO Chairs", "NAGANO", None, kind="char", vocab=vocab, max_seq=64)
        assert f.tokens == [CLS, "NAGANO", "Chairs", SEP, "NAGANO"]


class TestNovelSet:
    def test_shared_entity_excluded(self):
        train = [Example("Nike Hoodie", "Nike", "brand")]
        test = [Example("NIKE Cap", "NIKE", "brand"), Example("Puma Cap", "Puma", "brand")]
        assert build_novel_entity_set(train, test) == [test[1]]

    def test_empty_train(self):
        test = [Example("Puma Cap", "Puma", "brand")]
        assert build_novel_entity_set([], test) == test

    def test_matches_generator_bookkeeping(self, corpus):
        train, test, manifest = corpus
        novel = build_novel_entity_set(train, test)
        reserved = set(manifest.reserved_brands) | set(manifest.reserved_products) | set(manifest.reserved_features)
        assert len(novel) == manifest.novel_test_examples == sum(ex.entity in reserved for ex in test)
        train_entities = {ex.entity.casefold() for ex in train}
        assert all(ex.entity.casefold() not in train_entities for ex in novel)
        assert {ex.gold for ex in novel} == set(CLASSES)


class TestGenerator:
    def test_default_proportions(self, corpus):
        train, test, _ = corpus
        for split, target in ((train, (797, 700, 827)), (test, (360, 437, 520))):
            counts = Counter(ex.gold for ex in split)
            for c, t in zip(CLASSES, target):
                assert abs(counts[c] - t) <= 0.1 * t

    def test_zero_reserve_means_no_novel_entities(self):
        train, test, _ = generate_synthetic_corpus(GenSpec(reserve_fraction=0.0), Rng(5))
        assert build_novel_entity_set(train, test) == []

    def test_reserved_lexicon_never_in_train_titles(self, corpus):
        train, _, manifest = corpus
        reserved = set(manifest.reserved_brands) | set(manifest.reserved_products)
        reserved_features = set(manifest.reserved_features)
        assert not reserved_features & {ex.entity for ex in train}
        for ex in train:
            padded = f" {ex.title} "
            assert not any(f" {r} " in padded for r in reserved)

    def test_seed_determinism(self):
        a = generate_synthetic_corpus(GenSpec(), Rng(9))
        b = generate_synthetic_corpus(GenSpec(), Rng(9))
        assert a[0] == b[0] and a[1] == b[1]

    @pytest.mark.parametrize("bad", [dict(reserve_fraction=1.0), dict(train_counts=(0, 0, 0))])
    def test_invalid_spec(self, bad):
        with pytest.raises(ConfigError):
            generate_synthetic_corpus(GenSpec(**bad), Rng(0))

    def test_capacity_exceeded(self):
        with pytest.raises(ConfigError):
            generate_synthetic_corpus(GenSpec(train_counts=(10**9, 0, 0)), Rng(0))
