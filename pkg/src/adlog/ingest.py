"""Trace events to token sequences and (input, target) training pairs.

Events are tokenized field by field, split by protocol context, chunked into
sequences of at most ``max_len`` tokens and paired with the next sequence of
the same context. The corpus file written here is what the trainer reads.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import IO, Iterable, Protocol, Sequence

import numpy as np

from .trace import TraceEvent

SOS, EOS, UNK = 0, 1, 2
RESERVED = ("<sos>", "<eos>", "<unk>")
DEFAULT_MAX_LEN = 100
CORPUS_MAGIC = "#adlog-corpus"
CORPUS_VERSION = 1

# ptype -> context; anything not listed is its own context
CONTEXTS = {"udp": "udp", "cbr": "udp", "tcp": "tcp", "ack": "tcp", "http": "http"}


class CorpusFormatError(ValueError):
    pass


class Tokenizer(Protocol):
    arity: int
    source_position: int
    dest_position: int

    def __call__(self, event: TraceEvent) -> list[str]: ...


@dataclass(frozen=True)
class FieldTokenizer:
    """One token per field: (kind, from, to, protocol, seq, flags).

    Timestamps and packet ids are left out of the tokens. ``seq_bucket`` folds
    sequence numbers modulo a constant, which keeps the vocabulary bounded on
    real traces with large sequence numbers.
    """

    seq_bucket: int | None = None
    arity: int = 6
    source_position: int = 1
    dest_position: int = 2

    def __call__(self, event: TraceEvent) -> list[str]:
        seq = event.seq if self.seq_bucket is None else event.seq % self.seq_bucket
        return [
            event.kind.value,
            f"n{event.from_node}",
            f"n{event.to_node}",
            event.ptype,
            f"s{seq}",
            event.flags,
        ]


def node_of(token: str) -> int | None:
    """Node id of a ``n<id>`` token, ``None`` for any other token."""
    if len(token) > 1 and token[0] == "n" and token[1:].isdigit():
        return int(token[1:])
    return None


def context_of(event: TraceEvent) -> str:
    return CONTEXTS.get(event.ptype.lower(), event.ptype.lower())


def tokenize(event: TraceEvent, tokenizer: Tokenizer | None = None) -> list[str]:
    return (tokenizer or FieldTokenizer())(event)


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        idx = self.stoi.get(token)
        if idx is None:
            idx = len(self.itos)
            self.stoi[token] = idx
            self.itos.append(token)
        return idx

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in indices]

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocabulary":
        if tuple(itos[:len(RESERVED)]) != RESERVED:
            raise CorpusFormatError("vocabulary must start with the reserved tokens")
        if len(set(itos)) != len(itos):
            raise CorpusFormatError("vocabulary has duplicate tokens")
        return cls(itos[len(RESERVED):])


def build_vocabulary(tokens: Iterable[str]) -> Vocabulary:
    """Reserved tokens first, then every new token in order of first occurrence."""
    return Vocabulary(tokens)


@dataclass(frozen=True)
class EventSequence:
    tokens: tuple[int, ...]
    context: str
    span: tuple[float, float]
    times: tuple[float, ...] = ()
    # (source node, declared destination node) per event
    endpoints: tuple[tuple[int, int], ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class SequencePair:
    input: EventSequence
    target: EventSequence


def segment_sequences(events: Sequence[TraceEvent], vocab: Vocabulary,
                      max_len: int = DEFAULT_MAX_LEN,
                      tokenizer: Tokenizer | None = None) -> list[EventSequence]:
    """Split by protocol context, then chunk each context greedily.

    Chunks hold whole events only, so a sequence carries at most
    ``max_len // arity`` events. Contexts appear in order of first occurrence.
    """
    tokenizer = tokenizer or FieldTokenizer()
    per_chunk = max_len // tokenizer.arity
    if per_chunk < 1:
        raise ValueError(f"max_len {max_len} is shorter than one event ({tokenizer.arity} tokens)")
    by_context: dict[str, list[TraceEvent]] = {}
    for e in events:
        by_context.setdefault(context_of(e), []).append(e)
    out = []
    for ctx, group in by_context.items():
        for i in range(0, len(group), per_chunk):
            chunk = group[i:i + per_chunk]
            tokens = []
            for e in chunk:
                tokens.extend(vocab.encode(tokenizer(e)))
            out.append(EventSequence(
                tokens=tuple(tokens),
                context=ctx,
                span=(chunk[0].time, chunk[-1].time),
                times=tuple(e.time for e in chunk),
                endpoints=tuple((e.src[0], e.dst[0]) for e in chunk),
            ))
    return out


def pair_sequences(sequences: Sequence[EventSequence]) -> list[SequencePair]:
    """Pair each sequence with the next one of the same context."""
    last: dict[str, EventSequence] = {}
    pairs = []
    for seq in sequences:
        prev = last.get(seq.context)
        if prev is not None:
            pairs.append(SequencePair(prev, seq))
        last[seq.context] = seq
    return pairs


def split_train_test(pairs: Sequence, test_fraction: float = 0.1, seed: int = 0):
    """Seeded disjoint split; both halves keep the original pair order."""
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    n = len(pairs)
    n_test = int(round(n * test_fraction))
    if n >= 2:
        n_test = min(max(n_test, 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = set(perm[:n_test].tolist())
    train = [p for i, p in enumerate(pairs) if i not in test_idx]
    test = [p for i, p in enumerate(pairs) if i in test_idx]
    return train, test


@dataclass
class Corpus:
    vocab: Vocabulary
    sequences: list[EventSequence] = field(default_factory=list)
    # indices into ``sequences``
    pair_index: list[tuple[int, int]] = field(default_factory=list)
    max_len: int = DEFAULT_MAX_LEN
    arity: int = 6
    # which input trace each pair came from
    pair_trace: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.pair_trace:
            self.pair_trace = [0] * len(self.pair_index)
        if len(self.pair_trace) != len(self.pair_index):
            raise CorpusFormatError("pair_trace and pair_index differ in length")

    @property
    def pairs(self) -> list[SequencePair]:
        return [SequencePair(self.sequences[i], self.sequences[j]) for i, j in self.pair_index]

    @property
    def trace_count(self) -> int:
        return max(self.pair_trace) + 1 if self.pair_trace else 0

    def trace_pairs(self, trace: int) -> list[SequencePair]:
        return [SequencePair(self.sequences[i], self.sequences[j])
                for (i, j), t in zip(self.pair_index, self.pair_trace) if t == trace]


def split_by_trace(corpus: Corpus, test_fraction: float = 0.1, seed: int = 0):
    """``split_train_test`` applied to each trace's pairs on its own.

    Returns the pooled training pairs and one test list per trace. A trace
    gets the same split in every corpus that shares its vocabulary.
    """
    train, tests = [], []
    for t in range(corpus.trace_count):
        tr, te = split_train_test(corpus.trace_pairs(t), test_fraction, seed)
        train.extend(tr)
        tests.append(te)
    return train, tests


def prepare_corpus(traces: Sequence[Sequence[TraceEvent]], max_len: int = DEFAULT_MAX_LEN,
                   tokenizer: Tokenizer | None = None,
                   vocab: Vocabulary | None = None) -> Corpus:
    """Ingest one or more traces into a single corpus.

    Each trace is segmented and paired on its own, so no pair straddles two
    files. A given ``vocab`` is reused as is (unknown tokens map to UNK);
    otherwise one is built over all traces in order.
    """
    tokenizer = tokenizer or FieldTokenizer()
    if vocab is None:
        vocab = build_vocabulary(tok for events in traces for e in events for tok in tokenizer(e))
    corpus = Corpus(vocab=vocab, max_len=max_len, arity=tokenizer.arity)
    for t, events in enumerate(traces):
        seqs = segment_sequences(events, vocab, max_len, tokenizer)
        base = len(corpus.sequences)
        corpus.sequences.extend(seqs)
        last: dict[str, int] = {}
        for k, seq in enumerate(seqs):
            if seq.context in last:
                corpus.pair_index.append((base + last[seq.context], base + k))
                corpus.pair_trace.append(t)
            last[seq.context] = k
    return corpus


def write_corpus(corpus: Corpus, sink: IO[str]) -> None:
    sink.write(f"{CORPUS_MAGIC} v{CORPUS_VERSION} max_len={corpus.max_len} arity={corpus.arity}\n")
    sink.write(f"vocab {len(corpus.vocab)}\n")
    for i, tok in enumerate(corpus.vocab.itos):
        sink.write(f"{i}\t{tok}\n")
    sink.write(f"sequences {len(corpus.sequences)}\n")
    for i, s in enumerate(corpus.sequences):
        tokens = " ".join(map(str, s.tokens))
        events = " ".join(f"{t:.6f}:{a}:{b}" for t, (a, b) in zip(s.times, s.endpoints))
        sink.write(f"{i}\t{s.context}\t{s.span[0]:.6f}\t{s.span[1]:.6f}\t{tokens}\t{events}\n")
    sink.write(f"pairs {len(corpus.pair_index)}\n")
    for (i, j), t in zip(corpus.pair_index, corpus.pair_trace):
        sink.write(f"{i}\t{j}\t{t}\n")


def dumps_corpus(corpus: Corpus) -> str:
    buf = io.StringIO()
    write_corpus(corpus, buf)
    return buf.getvalue()


def _section(lines: list[str], pos: int, name: str) -> tuple[int, int]:
    if pos >= len(lines):
        raise CorpusFormatError(f"missing {name!r} section")
    head, _, count = lines[pos].partition(" ")
    if head != name or not count.isdigit():
        raise CorpusFormatError(f"line {pos + 1}: expected '{name} <count>'")
    return int(count), pos + 1


def read_corpus(source: IO[str]) -> Corpus:
    lines = source.read().splitlines()
    if not lines or not lines[0].startswith(CORPUS_MAGIC):
        raise CorpusFormatError("not an adlog corpus file")
    header = lines[0].split()
    if header[1] != f"v{CORPUS_VERSION}":
        raise CorpusFormatError(f"unsupported corpus version {header[1]}")
    opts = dict(kv.split("=", 1) for kv in header[2:])
    n, pos = _section(lines, 1, "vocab")
    itos = []
    for k in range(n):
        idx, _, tok = lines[pos + k].partition("\t")
        if int(idx) != k:
            raise CorpusFormatError(f"line {pos + k + 1}: vocabulary index out of order")
        itos.append(tok)
    vocab = Vocabulary.from_list(itos)
    n, pos = _section(lines, pos + n, "sequences")
    seqs = []
    for k in range(n):
        parts = lines[pos + k].split("\t")
        if len(parts) != 6:
            raise CorpusFormatError(f"line {pos + k + 1}: expected 6 tab-separated fields")
        _, ctx, t0, t1, toks, evs = parts
        tokens = tuple(int(t) for t in toks.split())
        if any(not 0 <= t < len(vocab) for t in tokens):
            raise CorpusFormatError(f"line {pos + k + 1}: token index outside vocabulary")
        times, endpoints = [], []
        for ev in evs.split():
            t, a, b = ev.split(":")
            times.append(float(t))
            endpoints.append((int(a), int(b)))
        seqs.append(EventSequence(tokens, ctx, (float(t0), float(t1)), tuple(times), tuple(endpoints)))
    n_pairs, pos = _section(lines, pos + n, "pairs")
    pair_index, pair_trace = [], []
    for k in range(n_pairs):
        fields = lines[pos + k].split("\t")
        if len(fields) != 3:
            raise CorpusFormatError(f"line {pos + k + 1}: expected 3 tab-separated fields")
        i, j, t = (int(x) for x in fields)
        if not (0 <= i < len(seqs) and 0 <= j < len(seqs)):
            raise CorpusFormatError(f"line {pos + k + 1}: sequence index out of range")
        pair_index.append((i, j))
        pair_trace.append(t)
    return Corpus(vocab=vocab, sequences=seqs, pair_index=pair_index,
                  max_len=int(opts.get("max_len", DEFAULT_MAX_LEN)),
                  arity=int(opts.get("arity", 6)), pair_trace=pair_trace)


def load_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return read_corpus(fh)
