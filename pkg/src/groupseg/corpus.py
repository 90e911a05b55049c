"""Entity vocabulary construction and image-caption corpus filtering.

Raw corpora are JSONL files with one record per line:
    {"id": ..., "image_path": ..., "caption": ..., "mask_path": optional}

Entity extraction is a deterministic whole-token vocabulary matcher against
a candidate-noun list (shipped as a data file), with optional plural folding
of trailing "s"/"es" onto a singular vocabulary entry.
"""
from __future__ import annotations

import json
import os
import random
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

from .tokenizer import EOT_ID, MASK_ID, SOT_ID, TokenizedText, Tokenizer, normalize_words


class CorpusError(ValueError):
    """Raised for malformed or unusable corpus data."""


@dataclass(frozen=True)
class RawPair:
    id: str
    image_path: str
    caption: str
    mask_path: str | None = None

    def validate(self, require_image: bool = False) -> None:
        if not self.caption.strip():
            raise CorpusError(f"record {self.id!r}: empty caption")
        if require_image and not os.path.exists(self.image_path):
            raise CorpusError(f"record {self.id!r}: unresolvable image path")


@dataclass
class EntitySet:
    """Ordered frequent-entity vocabulary with provenance."""

    entities: list[str]
    frequencies: dict[str, int]
    stoplist: list[str]
    max_size: int

    def __post_init__(self):
        if len(set(self.entities)) != len(self.entities):
            raise CorpusError("duplicate entities")
        if len(self.entities) > self.max_size:
            raise CorpusError("entity set exceeds max_size")
        stop = set(self.stoplist)
        for e in self.entities:
            if e in stop:
                raise CorpusError(f"stoplist entity {e!r} in entity set")
            if self.frequencies.get(e, 0) < 1:
                raise CorpusError(f"entity {e!r} has no recorded frequency")

    def __contains__(self, entity: str) -> bool:
        return entity in self.frequencies and entity in set(self.entities)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for e in self.entities:
                f.write(f"{e}  # freq={self.frequencies[e]}\n")

    @classmethod
    def load(cls, path, stoplist: list[str] | None = None) -> "EntitySet":
        entities, freqs = [], {}
        with open(path, encoding="utf-8") as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "#" in line:
                    name, comment = line.split("#", 1)
                    name = name.strip()
                    freq = 1
                    if "freq=" in comment:
                        freq = int(comment.split("freq=")[1].strip())
                else:
                    name, freq = line, 1
                entities.append(name)
                freqs[name] = freq
        return cls(entities, freqs, stoplist or [], max_size=max(1, len(entities)))


@dataclass(frozen=True)
class Triplet:
    pair: RawPair
    tokens: TokenizedText
    entities: tuple[str, ...]

    def __post_init__(self):
        if not self.entities:
            raise CorpusError("triplet requires at least one entity")


@dataclass
class CrossPairIndex:
    """entity -> ids of triplets containing that entity."""

    by_entity: dict[str, list[str]] = field(default_factory=dict)
    triplets: dict[str, Triplet] = field(default_factory=dict)

    def add(self, triplet: Triplet) -> None:
        self.triplets[triplet.pair.id] = triplet
        for e in triplet.entities:
            self.by_entity.setdefault(e, []).append(triplet.pair.id)


def build_cross_pair_index(triplets) -> CrossPairIndex:
    index = CrossPairIndex()
    for t in triplets:
        index.add(t)
    return index


def default_candidate_nouns() -> list[str]:
    text = resources.files("groupseg").joinpath("data/nouns.txt").read_text("utf-8")
    return [line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")]


def _fold(word: str, vocab: set[str], plural_fold: bool) -> str | None:
    """Map a caption word onto a vocabulary entry, folding plurals if enabled."""
    if word in vocab:
        return word
    if plural_fold:
        if word.endswith("es") and word[:-2] in vocab:
            return word[:-2]
        if word.endswith("s") and word[:-1] in vocab:
            return word[:-1]
    return None


def _scan_entities(words: list[str], entities, plural_fold: bool):
    """Yield (position, entity) for every whole-token entity occurrence."""
    singles: dict[str, str] = {}
    multi: list[tuple[str, list[str]]] = []
    for e in entities:
        parts = e.split()
        if len(parts) == 1:
            singles[e] = e
        else:
            multi.append((e, parts))
    single_vocab = set(singles)
    for i, w in enumerate(words):
        hit = _fold(w, single_vocab, plural_fold)
        if hit is not None:
            yield i, hit
    for e, parts in multi:
        for i in range(len(words) - len(parts) + 1):
            if all(_fold(words[i + j], {p}, plural_fold) == p for j, p in enumerate(parts)):
                yield i, e


def build_entity_set(
    captions,
    max_size: int,
    stoplist: list[str] | None = None,
    candidates: list[str] | None = None,
    plural_fold: bool = True,
) -> EntitySet:
    """Keep the `max_size` most frequent candidate nouns, ties lexicographic."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    stoplist = list(stoplist or [])
    if candidates is None:
        candidates = default_candidate_nouns()
    eligible = [c for c in candidates if c not in set(stoplist)]
    counts: Counter = Counter()
    n_caps = 0
    for cap in captions:
        n_caps += 1
        words = normalize_words(cap)
        for _, e in _scan_entities(words, eligible, plural_fold):
            counts[e] += 1
    if n_caps == 0:
        raise CorpusError("empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    entities = [e for e, _ in ranked]
    return EntitySet(entities, dict(ranked), stoplist, max_size)


def extract_entities(caption: str, omega: EntitySet, plural_fold: bool = True) -> list[str]:
    """All entity-set members present in the caption, first-occurrence order."""
    if not omega.entities:
        return []
    words = normalize_words(caption)
    first_pos: dict[str, int] = {}
    for pos, e in _scan_entities(words, omega.entities, plural_fold):
        if e not in first_pos or pos < first_pos[e]:
            first_pos[e] = pos
    return [e for e, _ in sorted(first_pos.items(), key=lambda kv: (kv[1], kv[0]))]


@dataclass
class FilterStats:
    total: int = 0
    kept: int = 0
    skipped: int = 0


def filter_corpus(
    pairs,
    omega: EntitySet,
    tokenizer: Tokenizer,
    max_len: int,
    plural_fold: bool = True,
    require_images: bool = False,
) -> tuple[list[Triplet], FilterStats]:
    """Emit a Triplet for every pair whose caption contains >= 1 entity."""
    stats = FilterStats()
    triplets = []
    for pair in pairs:
        stats.total += 1
        try:
            pair.validate(require_image=require_images)
            entities = extract_entities(pair.caption, omega, plural_fold)
            if not entities:
                continue
            tokens = tokenizer.encode(pair.caption, max_len)
            triplets.append(Triplet(pair, tokens, tuple(entities)))
            stats.kept += 1
        except CorpusError:
            stats.skipped += 1
    return triplets, stats


def mask_entities(
    tokens: TokenizedText,
    entities,
    tokenizer: Tokenizer,
    plural_fold: bool = True,
) -> TokenizedText:
    """Replace every token belonging to a listed entity with the mask token."""
    ids = list(tokens.token_ids)
    words = [tokenizer.decode_word(t) for t in ids]
    body = words[1 : tokens.eot_index]
    masked_positions = set()
    for e in entities:
        parts = e.split()
        found = False
        for i in range(len(body) - len(parts) + 1):
            if all(_fold(body[i + j], {p}, plural_fold) == p for j, p in enumerate(parts)):
                found = True
                masked_positions.update(range(1 + i, 1 + i + len(parts)))
        if not found:
            raise CorpusError(f"entity/token mismatch: {e!r} not in token sequence")
    for pos in masked_positions:
        ids[pos] = MASK_ID
    return TokenizedText(tuple(ids), tokens.eot_index)


prompt_truncations = 0


def build_entity_prompt(
    entities,
    templates,
    rng: random.Random,
    tokenizer: Tokenizer,
    max_len: int,
) -> TokenizedText:
    """Fill a randomly sampled template with the entities joined by " and "."""
    global prompt_truncations
    if not entities:
        raise ValueError("entities must be non-empty")
    if not templates:
        raise ValueError("templates must be non-empty")
    template = templates[rng.randrange(len(templates))]
    prompt = template.format(" and ".join(entities))
    if len(normalize_words(prompt)) > max_len - 2:
        prompt_truncations += 1
    return tokenizer.encode(prompt, max_len)


def sample_cross_pair(
    anchor: Triplet,
    index: CrossPairIndex,
    rng: random.Random,
) -> tuple[Triplet, str]:
    """Pick a shared entity, then a second triplet containing it."""
    eligible = [
        e
        for e in anchor.entities
        if sum(1 for tid in index.by_entity.get(e, []) if tid != anchor.pair.id) >= 1
    ]
    if not eligible:
        raise CorpusError("no cross pair")
    entity = eligible[rng.randrange(len(eligible))]
    partners = [tid for tid in index.by_entity[entity] if tid != anchor.pair.id]
    partner_id = partners[rng.randrange(len(partners))]
    return index.triplets[partner_id], entity


def read_corpus(path, require_images: bool = False) -> list[RawPair]:
    pairs = []
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                pair = RawPair(
                    id=str(rec["id"]),
                    image_path=rec["image_path"],
                    caption=rec["caption"],
                    mask_path=rec.get("mask_path"),
                )
                pair.validate(require_image=require_images)
                pairs.append(pair)
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusError(f"{path}:{n + 1}: bad record ({exc})") from exc
    return pairs


def write_corpus(pairs, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for p in pairs:
            rec = {"id": p.id, "image_path": p.image_path, "caption": p.caption}
            if p.mask_path is not None:
                rec["mask_path"] = p.mask_path
            f.write(json.dumps(rec) + "\n")
