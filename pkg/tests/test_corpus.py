import json
import random
from pathlib import Path

import pytest

from groupseg.corpus import (
    CorpusError,
    EntitySet,
    RawPair,
    build_cross_pair_index,
    build_entity_prompt,
    build_entity_set,
    extract_entities,
    filter_corpus,
    mask_entities,
    read_corpus,
    sample_cross_pair,
)
from groupseg.tokenizer import MASK_ID, Tokenizer

FIXTURE = Path(__file__).parent / "fixtures" / "captions50.jsonl"

# hand tally over the fixture corpus, kept while composing the captions
EXPECTED_COUNTS = {
    "cat": 12,
    "dog": 10,
    "chair": 8,
    "ball": 7,
    "car": 6,
    "bird": 5,
    "cup": 4,
    "horse": 3,
    "table": 2,
    "bed": 1,
}
STOPLIST = ["art", "person", "view"]


def load_fixture():
    rows = [json.loads(line) for line in FIXTURE.read_text().splitlines()]
    return [r["caption"] for r in rows], [r["entities"] for r in rows]


@pytest.fixture(scope="module")
def captions():
    return load_fixture()[0]


@pytest.fixture(scope="module")
def omega(captions):
    return build_entity_set(captions, max_size=10, stoplist=STOPLIST)


class TestBuildEntitySet:
    def test_hand_counts(self, omega):
        assert omega.frequencies == EXPECTED_COUNTS

    def test_frequency_order(self, omega):
        expected = sorted(EXPECTED_COUNTS, key=lambda e: (-EXPECTED_COUNTS[e], e))
        assert omega.entities == expected

    def test_stoplist_excluded(self, captions):
        # "art" outnumbers every entity but must never appear
        assert "art" not in build_entity_set(captions, 100, stoplist=["art"]).entities

    def test_person_stoplist(self, captions):
        assert "person" not in build_entity_set(captions, 100, stoplist=["person"]).entities

    def test_max_size_one(self):
        omega = build_entity_set(["a cat", "a cat and dog"], max_size=1)
        assert omega.entities == ["cat"]

    def test_tie_break_lexicographic(self):
        omega = build_entity_set(["a dog and a cat"], max_size=2)
        assert omega.entities == ["cat", "dog"]

    def test_empty_corpus(self):
        with pytest.raises(CorpusError, match="empty corpus"):
            build_entity_set([], max_size=5)

    def test_permutation_invariant(self, captions, omega):
        shuffled = list(captions)
        random.Random(7).shuffle(shuffled)
        again = build_entity_set(shuffled, max_size=10, stoplist=STOPLIST)
        assert again.entities == omega.entities
        assert again.frequencies == omega.frequencies


class TestExtractEntities:
    def test_hand_labels(self, omega):
        caps, labels = load_fixture()
        for cap, expected in zip(caps, labels):
            assert extract_entities(cap, omega) == expected, cap

    def test_direct_membership(self, omega):
        assert extract_entities("a cat sits on a chair", omega) == ["cat", "chair"]

    def test_no_substring_match(self, omega):
        assert extract_entities("a catalog of chairs", omega, plural_fold=False) == []

    def test_plural_fold(self, omega):
        assert extract_entities("a catalog of chairs", omega) == ["chair"]

    def test_dedup_first_occurrence(self, omega):
        assert extract_entities("cat and cat and dog", omega) == ["cat", "dog"]

    def test_multiword_entity(self):
        omega = EntitySet(["fire hydrant"], {"fire hydrant": 2}, [], 5)
        assert extract_entities("a red fire hydrant", omega) == ["fire hydrant"]
        assert extract_entities("a fire in the hydrant plant", omega) == []


class TestFilterCorpus:
    def test_hand_labels(self, omega):
        pairs = read_corpus(FIXTURE)
        tok = Tokenizer.from_corpus(p.caption for p in pairs)
        triplets, stats = filter_corpus(pairs, omega, tok, max_len=32)
        caps, labels = load_fixture()
        expected_kept = [
            (c, tuple(e)) for c, e in zip(caps, labels) if e
        ]
        assert stats.total == 50
        assert stats.kept == len(expected_kept) == len(triplets)
        for t, (cap, ents) in zip(triplets, expected_kept):
            assert t.pair.caption == cap
            assert t.entities == ents

    def test_empty_omega_keeps_nothing(self):
        pairs = read_corpus(FIXTURE)
        omega = EntitySet(["zebra"], {"zebra": 1}, [], 1)
        tok = Tokenizer.from_corpus(p.caption for p in pairs)
        triplets, stats = filter_corpus(pairs, omega, tok, max_len=32)
        assert triplets == [] and stats.kept == 0

    def test_superset_omega_keeps_all(self, omega):
        pairs = [RawPair("a", "x.png", "a cat"), RawPair("b", "y.png", "a dog")]
        tok = Tokenizer.from_corpus(p.caption for p in pairs)
        triplets, _ = filter_corpus(pairs, omega, tok, max_len=8)
        assert len(triplets) == 2

    def test_bad_record_skipped_not_fatal(self, omega):
        pairs = [RawPair("a", "x.png", "   "), RawPair("b", "y.png", "a dog")]
        tok = Tokenizer(["a", "dog"])
        triplets, stats = filter_corpus(pairs, omega, tok, max_len=8)
        assert stats.skipped == 1 and stats.kept == 1

    def test_emit_iff_extraction_nonempty(self, omega):
        # brute re-scan invariant
        pairs = read_corpus(FIXTURE)
        tok = Tokenizer.from_corpus(p.caption for p in pairs)
        triplets, _ = filter_corpus(pairs, omega, tok, max_len=32)
        kept_ids = {t.pair.id for t in triplets}
        for p in pairs:
            assert (p.id in kept_ids) == bool(extract_entities(p.caption, omega))


class TestMaskEntities:
    @pytest.fixture
    def tok(self):
        return Tokenizer(["a", "and", "cat", "dog", "fire", "hydrant", "the", "chairs", "chair"])

    def test_masks_all_entity_tokens(self, tok):
        tokens = tok.encode("a cat and a dog", 10)
        masked = mask_entities(tokens, ["cat", "dog"], tok)
        words = [tok.decode_word(t) for t in masked.token_ids]
        assert words[1:6] == ["a", "[MASK]", "and", "a", "[MASK]"]
        assert masked.eot_index == tokens.eot_index

    def test_empty_entity_list_identity(self, tok):
        tokens = tok.encode("a cat and a dog", 10)
        assert mask_entities(tokens, [], tok) == tokens

    def test_multiword_masks_both_positions(self, tok):
        tokens = tok.encode("a fire hydrant and a dog", 10)
        masked = mask_entities(tokens, ["fire hydrant"], tok)
        assert masked.token_ids[2] == MASK_ID and masked.token_ids[3] == MASK_ID
        assert masked.token_ids[4] != MASK_ID

    def test_plural_occurrence_masked(self, tok):
        tokens = tok.encode("the chairs and the chair", 12)
        masked = mask_entities(tokens, ["chair"], tok)
        assert masked.token_ids[2] == MASK_ID and masked.token_ids[5] == MASK_ID

    def test_missing_entity_raises(self, tok):
        tokens = tok.encode("a cat", 8)
        with pytest.raises(CorpusError, match="entity/token mismatch"):
            mask_entities(tokens, ["dog"], tok)

    def test_mask_count_equals_entity_token_count(self, tok):
        tokens = tok.encode("a fire hydrant and a cat and a dog", 16)
        masked = mask_entities(tokens, ["fire hydrant", "cat", "dog"], tok)
        assert sum(1 for t in masked.token_ids if t == MASK_ID) == 4


class TestBuildEntityPrompt:
    @pytest.fixture
    def tok(self):
        return Tokenizer(["a", "photo", "of", "cat", "dog", "ball", "and", "painting"])

    def test_single_substitution(self, tok):
        prompt = build_entity_prompt(["cat"], ["A photo of a {}."], random.Random(0), tok, 12)
        assert prompt == tok.encode("A photo of a cat.", 12)

    def test_multi_entity_join(self, tok):
        prompt = build_entity_prompt(
            ["cat", "dog", "ball"], ["A painting of a {}"], random.Random(0), tok, 16
        )
        assert prompt == tok.encode("A painting of a cat and dog and ball", 16)

    def test_seeded_determinism(self, tok):
        templates = [f"a photo of {{}} {i}" for i in range(10)]
        a = build_entity_prompt(["cat"], templates, random.Random(42), tok, 16)
        b = build_entity_prompt(["cat"], templates, random.Random(42), tok, 16)
        assert a == b

    def test_requires_entities_and_templates(self, tok):
        with pytest.raises(ValueError):
            build_entity_prompt([], ["{}"], random.Random(0), tok, 8)
        with pytest.raises(ValueError):
            build_entity_prompt(["cat"], [], random.Random(0), tok, 8)


def make_triplets(specs, tok):
    omega = EntitySet(
        sorted({e for _, ents in specs for e in ents}),
        {e: 1 for _, ents in specs for e in ents},
        [],
        10,
    )
    out = []
    for tid, ents in specs:
        caption = " and ".join(ents)
        pairs = RawPair(tid, f"{tid}.png", caption)
        triplets, _ = filter_corpus([pairs], omega, tok, max_len=16)
        out.append(triplets[0])
    return out


class TestCrossPair:
    @pytest.fixture
    def tok(self):
        return Tokenizer(["and", "cat", "dog", "bird"])

    def test_only_choice(self, tok):
        a, b = make_triplets([("a", ["cat"]), ("b", ["cat"])], tok)
        index = build_cross_pair_index([a, b])
        partner, entity = sample_cross_pair(a, index, random.Random(0))
        assert partner.pair.id == "b" and entity == "cat"

    def test_eligibility_filter(self, tok):
        a, b, c = make_triplets(
            [("a", ["cat", "dog"]), ("b", ["dog"]), ("c", ["bird"])], tok
        )
        index = build_cross_pair_index([a, b, c])
        for seed in range(20):
            partner, entity = sample_cross_pair(a, index, random.Random(seed))
            assert entity == "dog" and partner.pair.id == "b"

    def test_no_cross_pair(self, tok):
        a, b = make_triplets([("a", ["cat"]), ("b", ["dog"])], tok)
        index = build_cross_pair_index([a, b])
        with pytest.raises(CorpusError, match="no cross pair"):
            sample_cross_pair(a, index, random.Random(0))

    def test_uniform_partner_choice(self, tok):
        a, b, c = make_triplets([("a", ["cat"]), ("b", ["cat"]), ("c", ["cat"])], tok)
        index = build_cross_pair_index([a, b, c])
        rng = random.Random(123)
        counts = {"b": 0, "c": 0}
        n = 1000
        for _ in range(n):
            partner, _ = sample_cross_pair(a, index, rng)
            counts[partner.pair.id] += 1
        # 3 sigma band around 500 for a fair coin
        sigma = (n * 0.25) ** 0.5
        assert abs(counts["b"] - 500) < 3 * sigma

    def test_index_round_trip(self, tok):
        triplets = make_triplets(
            [("a", ["cat", "dog"]), ("b", ["dog"]), ("c", ["cat", "bird"])], tok
        )
        full = build_cross_pair_index(triplets)
        incremental = build_cross_pair_index([])
        for t in triplets:
            incremental.add(t)
        assert full.by_entity == incremental.by_entity
        assert set(full.triplets) == set(incremental.triplets)
        for e, ids in full.by_entity.items():
            assert ids
            for tid in ids:
                assert e in full.triplets[tid].entities


class TestEntitySetIO:
    def test_save_load_round_trip(self, omega, tmp_path):
        path = tmp_path / "omega.txt"
        omega.save(path)
        loaded = EntitySet.load(path, stoplist=STOPLIST)
        assert loaded.entities == omega.entities
        assert loaded.frequencies == omega.frequencies

    def test_invariants_enforced(self):
        with pytest.raises(CorpusError):
            EntitySet(["cat", "cat"], {"cat": 2}, [], 5)
        with pytest.raises(CorpusError):
            EntitySet(["art"], {"art": 3}, ["art"], 5)
        with pytest.raises(CorpusError):
            EntitySet(["cat"], {}, [], 5)
