"""Pronunciation dictionary: text file in the common `WORD  PH1 PH2 ...` format.

Lookup is case-insensitive, the first pronunciation wins over `WORD(2)`
alternates, and stress digits are stripped (AH0 -> AH). Phoneme IDs are
contiguous 1..P; ID 0 is reserved for the CTC blank and is never a phoneme.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import InputError, LexiconFormatError, UnknownWordError

BLANK_ID = 0

_STRESS = re.compile(r"\d+$")
_PUNCT = re.compile(r"[^\w' ]")


@dataclass
class Lexicon:
    words: dict[str, list[str]]
    alphabet: list[str]
    ids: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.ids = {ph: i + 1 for i, ph in enumerate(self.alphabet)}

    @property
    def n_phonemes(self) -> int:
        return len(self.alphabet)

    @property
    def ctc_vocab(self) -> int:
        """Alphabet size including the blank."""
        return len(self.alphabet) + 1

    def phoneme_name(self, pid: int) -> str:
        return self.alphabet[pid - 1]


@dataclass
class PhonemeSequence:
    ids: list[int]
    text: str = ""

    def __post_init__(self):
        if not self.ids:
            raise InputError(f"empty phoneme sequence for text {self.text!r}")
        if BLANK_ID in self.ids:
            raise InputError("phoneme sequence must not contain the blank id")

    def __len__(self):
        return len(self.ids)


def load_lexicon(path) -> Lexicon:
    words: dict[str, list[str]] = {}
    phonemes: set[str] = set()
    with open(path, encoding="utf-8", errors="replace") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith(";;;"):
                continue
            parts = line.split()
            if len(parts) < 2:
                raise LexiconFormatError(f"{path}:{lineno}: expected 'WORD PH1 ...', got {line!r}")
            head = parts[0].upper()
            if "(" in head:
                base = head.split("(", 1)[0]
                if base in words:
                    continue  # first pronunciation wins
                head = base
            prons = [_STRESS.sub("", p.upper()) for p in parts[1:]]
            if any(not p for p in prons):
                raise LexiconFormatError(f"{path}:{lineno}: empty phoneme token")
            if head not in words:
                words[head] = prons
                phonemes.update(prons)
    if not words:
        raise LexiconFormatError(f"{path}: no entries found")
    return Lexicon(words=words, alphabet=sorted(phonemes))


def to_phonemes(text: str, lex: Lexicon) -> PhonemeSequence:
    """Concatenate per-word phoneme lists; unknown words fall back to letter
    spell-outs when the letters are themselves entries."""
    cleaned = _PUNCT.sub(" ", text)
    tokens = cleaned.split()
    if not tokens:
        raise InputError(f"empty lyric after stripping punctuation: {text!r}")
    ids: list[int] = []
    for tok in tokens:
        word = tok.upper()
        if word in lex.words:
            ids.extend(lex.ids[p] for p in lex.words[word])
            continue
        letters = [c for c in word if c.isalnum()]
        if letters and all(c in lex.words for c in letters):
            for c in letters:
                ids.extend(lex.ids[p] for p in lex.words[c])
            continue
        raise UnknownWordError(tok)
    return PhonemeSequence(ids=ids, text=text)
