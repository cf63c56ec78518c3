"""Closed word-level vocabulary with reserved special tokens."""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, EOS, QUERY, RESPONSE, PASSAGE = "<pad>", "<unk>", "</s>", "<q>", "<r>", "<p>"
SPECIALS = (PAD, UNK, EOS, QUERY, RESPONSE, PASSAGE)

# filler words used by the synthetic templates
FUNCTION_WORDS = ("what", "about", "and", "its", "is", "tell", "me")


def normalize(text: str) -> list[str]:
    return text.lower().split()


class Vocab:
    def __init__(self, words: Iterable[str]):
        words = list(words)
        if tuple(words[: len(SPECIALS)]) != SPECIALS:
            words = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        if len(set(words)) != len(words):
            raise ValueError("duplicate vocabulary entries")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.words == other.words

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def query_id(self) -> int:
        return self.index[QUERY]

    @property
    def response_id(self) -> int:
        return self.index[RESPONSE]

    @property
    def passage_id(self) -> int:
        return self.index[PASSAGE]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.index.get(w, unk) for w in normalize(text)]

    def decode(self, ids: Sequence[int], skip_special: bool = True) -> str:
        out = []
        for i in ids:
            w = self.words[i]
            if skip_special and w in SPECIALS:
                continue
            out.append(w)
        return " ".join(out)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").split())

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        seen: dict[str, None] = {}
        for t in texts:
            for w in normalize(t):
                seen.setdefault(w, None)
        return cls(list(SPECIALS) + sorted(w for w in seen if w not in SPECIALS))
