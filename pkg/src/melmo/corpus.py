"""Corpus ingestion, document shuffling, segmentation, and stream scheduling.

Corpus files are UTF-8 plain text, one sentence per line, blank line =
document boundary. Documents are concatenated (in shuffled order) into
one token stream, chopped into fixed-length segments, and dealt to B
batch rows as contiguous ranges so recurrent state carried across
batches stays meaningful. With bidirectional truncated backpropagation
enabled, floor(B/2) rows traverse their range in reverse segment order,
giving the right-to-left LSTM correct cross-segment continuity on those
rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .wordpiece import TokenSequence, encode_document


class CorpusError(ValueError):
    """Unreadable or empty corpus, or schedule misuse."""


@dataclass
class DocumentSet:
    """Encoded documents; empty ones are never retained."""

    documents: list

    def __len__(self):
        return len(self.documents)

    def total_tokens(self):
        return int(sum(len(doc) for doc in self.documents))


def read_documents(path):
    """Raw paragraphs from a corpus file: list of sentence lists."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    docs = []
    current = []
    for line in text.split("\n"):
        if line.strip():
            current.append(line)
        elif current:
            docs.append(current)
            current = []
    if current:
        docs.append(current)
    return docs


def load_corpus(path, vocab):
    """Read and encode a corpus file; blank-line-delimited documents."""
    docs = []
    for sentences in read_documents(path):
        seq = encode_document(sentences, vocab)
        if len(seq):
            docs.append(seq)
    if not docs:
        raise CorpusError(f"zero documents in corpus {path}")
    return DocumentSet(docs)


def shuffle_documents(ds, seed):
    """Permute document order deterministically; tokens inside untouched."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds.documents))
    return DocumentSet([ds.documents[i] for i in perm])


@dataclass
class Segment:
    """One fixed-length slice of the corpus stream (tail is [PAD]-padded)."""

    ids: np.ndarray
    special: np.ndarray  # true at [CLS]/[SEP]/[PAD] positions


def segment_stream(ds, n, vocab):
    """Concatenate documents and chop into consecutive length-n segments."""
    if n < 3:
        raise CorpusError(f"segment length must be >= 3, got {n}")
    ids = np.concatenate([doc.ids for doc in ds.documents])
    special = np.concatenate([doc.special for doc in ds.documents])
    total = ids.shape[0]
    segments = []
    for start in range(0, total, n):
        seg_ids = ids[start:start + n]
        seg_special = special[start:start + n]
        if seg_ids.shape[0] < n:
            pad = n - seg_ids.shape[0]
            seg_ids = np.concatenate(
                [seg_ids, np.full(pad, vocab.pad_id, dtype=np.int64)])
            seg_special = np.concatenate([seg_special, np.ones(pad, dtype=bool)])
        segments.append(Segment(seg_ids, seg_special))
    return segments


@dataclass
class Batch:
    """One step of the stream schedule."""

    ids: np.ndarray        # (B, N) token ids
    special: np.ndarray    # (B, N) true at [CLS]/[SEP]/[PAD]
    pad: np.ndarray        # (B, N) true at [PAD]
    directions: np.ndarray  # (B,) true where the row runs in reverse order
    epoch_end: bool


class StreamSchedule:
    """Single-consumer iterator dealing segments to B stateful rows.

    Each row owns a contiguous slice of the segment list. Within an
    epoch, forward rows walk their slice front to back and reverse rows
    back to front; which rows are reverse is redrawn per epoch under the
    schedule seed. Rows with shorter slices emit all-[PAD] segments
    until the longest row finishes (pad positions carry no loss).
    """

    def __init__(self, segments, batch_size, btbptt, seed, pad_id):
        if batch_size < 1:
            raise CorpusError(f"batch size must be >= 1, got {batch_size}")
        if len(segments) < batch_size:
            raise CorpusError(
                f"{len(segments)} segments cannot fill {batch_size} rows")
        self.segments = segments
        self.batch_size = batch_size
        self.btbptt = bool(btbptt)
        self.seed = seed
        self.pad_id = pad_id
        self.seq_len = len(segments[0].ids)
        base, rem = divmod(len(segments), batch_size)
        self.ranges = []
        start = 0
        for row in range(batch_size):
            length = base + (1 if row < rem else 0)
            self.ranges.append((start, start + length))
            start += length
        self.steps_per_epoch = max(stop - begin for begin, stop in self.ranges)
        self._pad_segment = Segment(
            np.full(self.seq_len, pad_id, dtype=np.int64),
            np.ones(self.seq_len, dtype=bool))
        self.start_epoch(0)

    def start_epoch(self, epoch):
        """Reset cursors and redraw which rows run in reverse order."""
        self.epoch = epoch
        self._step = 0
        self.reverse_rows = np.zeros(self.batch_size, dtype=bool)
        if self.btbptt:
            rng = np.random.default_rng([self.seed, 303, epoch])
            chosen = rng.permutation(self.batch_size)[: self.batch_size // 2]
            self.reverse_rows[chosen] = True

    def next_batch(self):
        if self._step >= self.steps_per_epoch:
            raise CorpusError("schedule exhausted; call start_epoch to reset")
        b, n = self.batch_size, self.seq_len
        ids = np.empty((b, n), dtype=np.int64)
        special = np.empty((b, n), dtype=bool)
        for row, (begin, stop) in enumerate(self.ranges):
            length = stop - begin
            if self._step < length:
                if self.reverse_rows[row]:
                    seg = self.segments[stop - 1 - self._step]
                else:
                    seg = self.segments[begin + self._step]
            else:
                seg = self._pad_segment
            ids[row] = seg.ids
            special[row] = seg.special
        self._step += 1
        return Batch(ids=ids, special=special, pad=ids == self.pad_id,
                     directions=self.reverse_rows.copy(),
                     epoch_end=self._step >= self.steps_per_epoch)


def make_batch_streams(segments, batch_size, btbptt, seed=0, pad_id=0):
    """Build the epoch schedule over a fixed segment list."""
    return StreamSchedule(segments, batch_size, btbptt, seed, pad_id)
