"""Word-piece vocabulary handling and tokenization.

Vocabulary files are plain UTF-8, one token per line, id = zero-based
line number. Five special tokens must be present: [PAD], [UNK], [CLS],
[SEP], [MASK]. Words are segmented greedy longest-match-first;
continuation pieces carry the "##" prefix; a word with no valid
segmentation becomes a single [UNK]. Case is preserved.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)

_PUNCT = set(string.punctuation)


class VocabError(ValueError):
    """Malformed vocabulary file or invalid tokenizer input."""


class Vocab:
    """Immutable token <-> id bijection with dense ids in [0, V)."""

    def __init__(self, tokens):
        self.id_to_token = list(tokens)
        self.token_to_id = {}
        for i, tok in enumerate(self.id_to_token):
            if not tok:
                raise VocabError(f"empty token at line {i + 1}")
            if tok in self.token_to_id:
                raise VocabError(f"duplicate token {tok!r} at line {i + 1}")
            self.token_to_id[tok] = i
        for tok in SPECIAL_TOKENS:
            if tok not in self.token_to_id:
                raise VocabError(f"missing special token {tok}")
        self.pad_id = self.token_to_id[PAD]
        self.unk_id = self.token_to_id[UNK]
        self.cls_id = self.token_to_id[CLS]
        self.sep_id = self.token_to_id[SEP]
        self.mask_id = self.token_to_id[MASK]
        self.special_ids = frozenset(
            (self.pad_id, self.unk_id, self.cls_id, self.sep_id, self.mask_id))
        self._max_piece_len = max(len(t) for t in self.id_to_token)

    @property
    def size(self):
        return len(self.id_to_token)

    def __len__(self):
        return len(self.id_to_token)

    def __contains__(self, token):
        return token in self.token_to_id


def load_vocab(path):
    """Read a vocabulary file; line index becomes the token id."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise VocabError(f"empty vocabulary file: {path}")
    return Vocab(lines)


def tokenize_word(word, vocab):
    """Greedy longest-match-first segmentation of one word into pieces."""
    if not word or any(ch.isspace() for ch in word):
        raise VocabError(f"tokenize_word: not a single word: {word!r}")
    if word in vocab.token_to_id:
        return [word]
    pieces = []
    start = 0
    n = len(word)
    while start < n:
        end = min(n, start + vocab._max_piece_len)
        found = None
        while end > start:
            candidate = word[start:end]
            if start > 0:
                candidate = "##" + candidate
            if candidate in vocab.token_to_id:
                found = candidate
                break
            end -= 1
        if found is None:
            return [UNK]
        pieces.append(found)
        start = end
    return pieces


def pretokenize(text):
    """Whitespace split with punctuation characters made standalone."""
    out = []
    word = []
    for ch in text:
        if ch.isspace():
            if word:
                out.append("".join(word))
                word = []
        elif ch in _PUNCT:
            if word:
                out.append("".join(word))
                word = []
            out.append(ch)
        else:
            word.append(ch)
    if word:
        out.append("".join(word))
    return out


def pieces_to_text(pieces):
    """Rejoin pieces: strip "##" and merge continuations, space otherwise."""
    words = []
    for piece in pieces:
        if piece.startswith("##") and words:
            words[-1] += piece[2:]
        else:
            words.append(piece)
    return " ".join(words)


@dataclass
class TokenSequence:
    """Encoded token ids plus a flag per position for [CLS]/[SEP]/[PAD]."""

    ids: np.ndarray
    special: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.special = np.asarray(self.special, dtype=bool)
        if self.ids.shape != self.special.shape:
            raise VocabError(
                f"TokenSequence: ids {self.ids.shape} vs special {self.special.shape}")

    def __len__(self):
        return int(self.ids.shape[0])


def encode_document(sentences, vocab):
    """Encode one document: [CLS], then each sentence's pieces + [SEP].

    Blank sentences are skipped; a document with no usable sentences
    encodes to an empty sequence. The output is an unbounded stream;
    fixed-length segmentation happens downstream in the corpus module.
    """
    ids = []
    special = []
    started = False
    for sentence in sentences:
        words = pretokenize(sentence)
        if not words:
            continue
        if not started:
            ids.append(vocab.cls_id)
            special.append(True)
            started = True
        for word in words:
            for piece in tokenize_word(word, vocab):
                ids.append(vocab.token_to_id[piece])
                special.append(False)
        ids.append(vocab.sep_id)
        special.append(True)
    return TokenSequence(np.asarray(ids, dtype=np.int64),
                         np.asarray(special, dtype=bool))
