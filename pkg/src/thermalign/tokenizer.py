"""Word-level tokenizer with digit-level numbers over a small closed vocabulary."""
from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import UnknownToken

BOS, EOS, PAD, IMG = "<bos>", "<eos>", "<pad>", "<image>"
SPECIALS = (PAD, BOS, EOS, IMG)

_WORDS = (
    # species, both cases
    "deer", "rhino", "elephant", "Deer", "Rhino", "Elephant",
    # prompt words
    "Identify", "the", "species", "and", "count", "Return", "ONLY", "in", "format",
    "Species", "Count", "example", "Allowed",
    # pretraining / habitat words
    "thermal", "image", "drone", "animals", "Describe", "forest", "grassland", "river",
    "road", "Habitat", "land", "cover", "Human", "presence", "none", "Key", "landscape",
    "features", "a", "of", "is", "with",
)
_SYMBOLS = tuple("0123456789") + (";", ",", ".", ":", "(", ")", "/", " ", "\n")

DEFAULT_TOKENS = SPECIALS + _WORDS + _SYMBOLS

_PATTERN = re.compile(r"<image>|[A-Za-z]+|\d|[^A-Za-z\d]")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...] = DEFAULT_TOKENS

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be distinct")
        missing = [s for s in SPECIALS if s not in self.tokens]
        if missing:
            raise ValueError(f"vocabulary lacks specials {missing}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownToken(token) from None

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def bos(self) -> int:
        return self._index[BOS]

    @property
    def eos(self) -> int:
        return self._index[EOS]

    @property
    def pad(self) -> int:
        return self._index[PAD]

    @property
    def img(self) -> int:
        return self._index[IMG]

    def tokenize(self, text: str) -> list[int]:
        return [self[piece] for piece in _PATTERN.findall(text)]

    def detokenize(self, ids) -> str:
        """Inverse of :meth:`tokenize`; special tokens other than ``<image>`` are dropped."""
        out = []
        for i in ids:
            token = self.tokens[int(i)]
            if token in (PAD, BOS, EOS):
                continue
            out.append(token)
        return "".join(out)
