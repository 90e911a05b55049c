"""Word-level tokenizer with a fixed vocabulary table.

The table is a plain text file, one token per line, line number = id.
The first five lines are reserved for the special tokens [PAD], [SOT],
[EOT], [MASK], [UNK] in that order.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

PAD_ID = 0
SOT_ID = 1
EOT_ID = 2
MASK_ID = 3
UNK_ID = 4

SPECIAL_TOKENS = ["[PAD]", "[SOT]", "[EOT]", "[MASK]", "[UNK]"]

_WORD_RE = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")


def normalize_words(text: str) -> list[str]:
    """Lowercase and split free text into word tokens."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class TokenizedText:
    """A fixed-length token id sequence: [SOT] words... [EOT] [PAD]..."""

    token_ids: tuple[int, ...]
    eot_index: int

    def __post_init__(self):
        if self.token_ids[0] != SOT_ID:
            raise ValueError("sequence must start with the start token")
        if self.token_ids[self.eot_index] != EOT_ID:
            raise ValueError("eot_index does not point at the end token")
        if self.token_ids.count(EOT_ID) != 1:
            raise ValueError("sequence must contain exactly one end token")

    def __len__(self) -> int:
        return len(self.token_ids)


class Tokenizer:
    def __init__(self, vocab: list[str]):
        if vocab[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            vocab = SPECIAL_TOKENS + list(vocab)
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate entries in vocabulary table")
        self.vocab = list(vocab)
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def from_file(cls, path) -> "Tokenizer":
        with open(path, encoding="utf-8") as f:
            vocab = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(vocab)

    @classmethod
    def from_corpus(cls, captions) -> "Tokenizer":
        """Build a table from caption text, words sorted for determinism."""
        words = set()
        for cap in captions:
            words.update(normalize_words(cap))
        return cls(SPECIAL_TOKENS + sorted(words))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self.vocab:
                f.write(tok + "\n")

    def word_ids(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, UNK_ID) for w in normalize_words(text)]

    def encode(self, text: str, max_len: int) -> TokenizedText:
        """Tokenize to exactly `max_len` ids, truncating before the end token."""
        if max_len < 3:
            raise ValueError("max_len must leave room for start/end tokens")
        ids = self.word_ids(text)[: max_len - 2]
        ids = [SOT_ID] + ids + [EOT_ID]
        eot_index = len(ids) - 1
        ids = ids + [PAD_ID] * (max_len - len(ids))
        return TokenizedText(tuple(ids), eot_index)

    def decode_word(self, token_id: int) -> str:
        return self.vocab[token_id]
