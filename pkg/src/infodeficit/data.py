"""Query-log ingestion, session segmentation, pair filtering, vocabulary and
example extraction.

The canonical log is a UTF-8 TSV with one row per (query, click) event::

    user_id <TAB> query <TAB> epoch_seconds <TAB> url-or-dash
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .encoders import MAX_URL_CHARS, OOV, PAD, url_chars

SESSION_GAP = 30 * 60
NAV_MARKERS = frozenset({"www", "com", "http", "https", "net", "org"})
RULES = ("identical", "single_word", "navigational", "no_overlap")

_TOKEN = re.compile(r"[^\W_]+(?:[.\-][^\W_]+)*")


class LogFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LogRecord:
    user_id: str
    raw_query: str
    timestamp: int
    clicked_url: str | None = None


@dataclass
class SessionStep:
    query: str
    words: list[str]
    clicks: list[str] = field(default_factory=list)


@dataclass
class Session:
    user_id: str
    steps: list[SessionStep]
    start: int = 0

    def key(self) -> str:
        """Stable identity used for split checksums."""
        return f"{self.user_id}@{self.start}"


@dataclass
class PastStep:
    query_ids: list[int]
    url_chars: list[int]


@dataclass
class RetentionExample:
    current_ids: list[int]
    words: list[str]
    past: list[PastStep]
    labels: list[int]
    next_words: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "current_ids": self.current_ids,
            "labels": self.labels,
            "past": [{"query_ids": p.query_ids, "url_chars": p.url_chars} for p in self.past],
            "words": self.words,
            "next": self.next_words,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RetentionExample":
        return cls(
            current_ids=list(rec["current_ids"]),
            words=list(rec.get("words", [])),
            past=[PastStep(list(p["query_ids"]), list(p["url_chars"])) for p in rec["past"]],
            labels=list(rec["labels"]),
            next_words=list(rec.get("next", [])),
        )


# --------------------------------------------------------------------------
# ingestion


def tokenize(raw_query: str) -> list[str]:
    """Lowercase and split on whitespace/punctuation, keeping inner '.' and '-'."""
    return _TOKEN.findall(raw_query.lower())


def parse_log_line(line: str, lineno: int) -> LogRecord:
    parts = line.rstrip("\n").rstrip("\r").split("\t")
    if len(parts) != 4:
        raise LogFormatError(f"line {lineno}: expected 4 tab-separated fields, got {len(parts)}")
    user, query, ts, url = parts
    if not user or not query.strip():
        raise LogFormatError(f"line {lineno}: empty user id or query")
    try:
        stamp = int(ts)
    except ValueError:
        raise LogFormatError(f"line {lineno}: bad timestamp {ts!r}") from None
    if stamp < 0:
        raise LogFormatError(f"line {lineno}: negative timestamp")
    return LogRecord(user, query.strip(), stamp, None if url in ("", "-") else url)


def read_log(path) -> Iterator[LogRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield parse_log_line(line, lineno)


def write_log(records: Iterable[LogRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r.user_id}\t{r.raw_query}\t{r.timestamp}\t{r.clicked_url or '-'}\n")


def sessions_to_records(sessions: Iterable[Session], step_seconds: int = 60) -> list[LogRecord]:
    rows = []
    for s in sessions:
        for k, step in enumerate(s.steps):
            ts = s.start + k * step_seconds
            for url in step.clicks or [None]:
                rows.append(LogRecord(s.user_id, step.query, ts, url))
    return rows


def segment_sessions(records: Iterable[LogRecord], gap: int = SESSION_GAP) -> list[Session]:
    """Group records sorted by (user, time) into sessions.

    Rows repeating the previous (user, query, timestamp) add clicks to the
    same step.  A new session starts on user change or when the time since
    the previous step exceeds ``gap``.
    """
    sessions: list[Session] = []
    seen_users: set[str] = set()
    prev: LogRecord | None = None
    last_step_time = 0
    for k, rec in enumerate(records):
        if prev is not None and rec.user_id == prev.user_id and rec.timestamp < prev.timestamp:
            raise LogFormatError(f"record {k}: timestamps not sorted for user {rec.user_id!r}")
        if prev is None or rec.user_id != prev.user_id:
            if rec.user_id in seen_users:
                raise LogFormatError(f"record {k}: user {rec.user_id!r} is not contiguous")
            seen_users.add(rec.user_id)
            sessions.append(Session(rec.user_id, [], rec.timestamp))
        elif (rec.raw_query, rec.timestamp) == (prev.raw_query, prev.timestamp):
            if rec.clicked_url is not None:
                sessions[-1].steps[-1].clicks.append(rec.clicked_url)
            prev = rec
            continue
        elif rec.timestamp - last_step_time > gap:
            sessions.append(Session(rec.user_id, [], rec.timestamp))
        step = SessionStep(rec.raw_query, tokenize(rec.raw_query))
        if rec.clicked_url is not None:
            step.clicks.append(rec.clicked_url)
        sessions[-1].steps.append(step)
        last_step_time = rec.timestamp
        prev = rec
    return sessions


# --------------------------------------------------------------------------
# filters and labels


def is_navigational(words: Sequence[str]) -> bool:
    return any(frag in NAV_MARKERS for w in words for frag in w.split("."))


def failed_rule(current: Sequence[str], nxt: Sequence[str]) -> str | None:
    """First reformulation rule the (current, next) pair violates, or None."""
    if list(current) == list(nxt):
        return "identical"
    if len(current) < 2:
        return "single_word"
    if is_navigational(current):
        return "navigational"
    if not set(current) & set(nxt):
        return "no_overlap"
    return None


def filter_pairs(pairs: Iterable[tuple[Sequence[str], Sequence[str]]]) -> list[tuple]:
    return [p for p in pairs if failed_rule(*p) is None]


def filter_queries(session: Session) -> list[int]:
    """Indices ``t`` whose pair (step t, step t+1) passes all four rules."""
    st = session.steps
    return [t for t in range(len(st) - 1) if failed_rule(st[t].words, st[t + 1].words) is None]


def pair_tallies(sessions: Iterable[Session]) -> dict[str, int]:
    """Counts of kept pairs and of drops attributed to the first failing rule."""
    tally = Counter({"kept": 0, **{r: 0 for r in RULES}})
    for s in sessions:
        st = s.steps
        for t in range(len(st) - 1):
            tally[failed_rule(st[t].words, st[t + 1].words) or "kept"] += 1
    return dict(tally)


def label_edits(current_words: Sequence[str], next_words: Sequence[str]) -> list[int]:
    """1 where a current word reappears anywhere in the next query, else 0."""
    if not next_words:
        raise ValueError("next query is empty")
    nxt = set(next_words)
    return [int(w in nxt) for w in current_words]


# --------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    PAD_TOKEN = "<pad>"
    OOV_TOKEN = "<oov>"

    def __init__(self, words: Sequence[str], capacity: int):
        self.capacity = capacity
        self.id_to_word = [self.PAD_TOKEN, self.OOV_TOKEN, *words]
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self) -> int:
        return len(self.id_to_word)

    def lookup(self, word: str) -> int:
        i = self.word_to_id.get(word, OOV)
        return OOV if i == PAD else i

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.lookup(w) for w in words]

    def dumps(self) -> str:
        return "".join(f"{w}\t{i}\n" for i, w in enumerate(self.id_to_word))

    @classmethod
    def loads(cls, text: str, capacity: int | None = None) -> "Vocabulary":
        rows = [line.split("\t") for line in text.splitlines() if line]
        words = [w for w, i in sorted(rows, key=lambda r: int(r[1]))][2:]
        return cls(words, capacity or len(words) + 2)


def build_vocab(train_sessions: Iterable[Session], capacity: int) -> Vocabulary:
    """Most frequent ``capacity - 2`` words (ties lexicographic) plus pad/OOV."""
    if capacity < 3:
        raise ValueError("vocabulary capacity must be at least 3")
    counts = Counter(w for s in train_sessions for step in s.steps for w in step.words)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary([w for w, _ in ranked[: capacity - 2]], capacity)


# --------------------------------------------------------------------------
# examples and splits


def make_examples(sessions: Iterable[Session], vocab: Vocabulary, context: int = 3,
                  max_url_chars: int = MAX_URL_CHARS) -> list[RetentionExample]:
    """One example per eligible pair that has at least one past step.

    The past holds up to ``context`` preceding steps, most recent first.
    """
    out = []
    for s in sessions:
        st = s.steps
        for t in filter_queries(s):
            if t == 0:
                continue
            past = [
                PastStep(vocab.encode(st[j].words), url_chars(st[j].clicks, max_url_chars))
                for j in range(t - 1, max(-1, t - 1 - context), -1)
            ]
            cur, nxt = st[t].words, st[t + 1].words
            out.append(RetentionExample(vocab.encode(cur), list(cur), past,
                                        label_edits(cur, nxt), list(nxt)))
    return out


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.8
    dev: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.dev, self.test)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")


def split_sessions(sessions: Sequence[Session], spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then contiguous train/dev/test slices of whole sessions."""
    n = len(sessions)
    if n < 3:
        raise ValueError(f"need at least 3 sessions to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.floor(n * spec.train + 1e-9))
    n_dev = int(np.floor(n * spec.dev + 1e-9))
    shuffled = [sessions[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_dev], shuffled[n_train + n_dev:]


def session_checksums(sessions: Iterable[Session]) -> set[str]:
    return {hashlib.sha256(s.key().encode()).hexdigest() for s in sessions}


def dump_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def load_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
