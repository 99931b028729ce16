"""Next-query selection: co-occurrence candidates, sigmoid scoring head, MAE
training and MRR evaluation."""

from __future__ import annotations

from collections import Counter, defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .core_math import (
    Tensor,
    add,
    concat,
    mae_loss,
    matmul,
    mul,
    repeat_rows,
    reshape,
    sigmoid,
    take_rows,
    transpose,
)
from .data import PastStep, RetentionExample, Session, Vocabulary, make_examples
from .encoders import MAX_URL_CHARS, GruParams, decode_batch
from .model import Ablation, ModelParams, encode_batch
from .retention import decode_steps
from .training import TrainConfig, fit


def query_key(words: Sequence[str]) -> str:
    return " ".join(words)


class CooccurrenceIndex:
    """Counts of adjacent (query -> next query) pairs in training sessions."""

    def __init__(self) -> None:
        self.counts: dict[str, Counter] = defaultdict(Counter)
        self.followers: Counter = Counter()

    @classmethod
    def build(cls, train_sessions: Iterable[Session]) -> "CooccurrenceIndex":
        idx = cls()
        for s in train_sessions:
            for a, b in zip(s.steps, s.steps[1:]):
                ka, kb = query_key(a.words), query_key(b.words)
                idx.counts[ka][kb] += 1
                idx.followers[kb] += 1
        return idx

    @staticmethod
    def _top(counter: Counter, k: int) -> list[str]:
        return [q for q, _ in sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]

    def top_followers(self, query: str, k: int) -> list[str]:
        return self._top(self.counts.get(query, Counter()), k)

    def global_top(self, k: int) -> list[str]:
        return self._top(self.followers, k)

    def _adjust(self, session: Session, delta: int) -> None:
        for a, b in zip(session.steps, session.steps[1:]):
            ka, kb = query_key(a.words), query_key(b.words)
            self.counts[ka][kb] += delta
            self.followers[kb] += delta
            if self.counts[ka][kb] <= 0:
                del self.counts[ka][kb]
                if not self.counts[ka]:
                    del self.counts[ka]
            if self.followers[kb] <= 0:
                del self.followers[kb]

    @contextmanager
    def excluding(self, session: Session):
        """Temporarily remove one session's pairs (leave-one-out candidates)."""
        self._adjust(session, -1)
        try:
            yield self
        finally:
            self._adjust(session, +1)


def build_candidates(index: CooccurrenceIndex, current: str, truth: str,
                     k: int = 20) -> tuple[list[str], int]:
    """Top-``k`` followers of ``current`` plus the truth (appended if absent).

    Queries never seen in training fall back to the globally most frequent
    next queries.
    """
    cands = index.top_followers(current, k) if current in index.counts else index.global_top(k)
    if truth not in cands:
        cands.append(truth)
    return cands, cands.index(truth)


@dataclass
class SelectionExample:
    current_ids: list[int]
    words: list[str]
    past: list[PastStep]
    candidates: list[str]
    candidate_ids: list[list[int]]
    truth_index: int

    def to_record(self) -> dict:
        return {
            "current_ids": self.current_ids,
            "words": self.words,
            "past": [{"query_ids": p.query_ids, "url_chars": p.url_chars} for p in self.past],
            "candidates": self.candidates,
            "candidate_ids": self.candidate_ids,
            "truth_index": self.truth_index,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "SelectionExample":
        return cls(list(rec["current_ids"]), list(rec["words"]),
                   [PastStep(list(p["query_ids"]), list(p["url_chars"])) for p in rec["past"]],
                   list(rec["candidates"]), [list(c) for c in rec["candidate_ids"]],
                   int(rec["truth_index"]))


def make_selection_examples(examples: Iterable[RetentionExample], index: CooccurrenceIndex,
                            vocab: Vocabulary, k: int = 20,
                            min_candidates: int = 2) -> list[SelectionExample]:
    out = []
    for e in examples:
        cands, ti = build_candidates(index, query_key(e.words), query_key(e.next_words), k)
        if len(cands) < min_candidates:
            continue
        ids = [vocab.encode(c.split()) for c in cands]
        out.append(SelectionExample(e.current_ids, e.words, e.past, cands, ids, ti))
    return out


def selection_examples_from_sessions(sessions: Iterable[Session], index: CooccurrenceIndex,
                                     vocab: Vocabulary, k: int = 20, context: int = 3,
                                     leave_one_out: bool = False,
                                     max_url_chars: int = MAX_URL_CHARS) -> list[SelectionExample]:
    """Selection examples for every retention-eligible pair of ``sessions``.

    With ``leave_one_out`` each session's own pairs are removed from the
    index while its candidates are built, so training examples see the same
    kind of candidate sets as held-out ones.
    """
    out = []
    for s in sessions:
        exs = make_examples([s], vocab, context, max_url_chars)
        if not exs:
            continue
        if leave_one_out:
            with index.excluding(s):
                out.extend(make_selection_examples(exs, index, vocab, k))
        else:
            out.extend(make_selection_examples(exs, index, vocab, k))
    return out


def export_candidates(examples: Iterable[SelectionExample]) -> str:
    """One line per example, tab-separated candidates, the truth prefixed by '*'."""
    lines = []
    for e in examples:
        lines.append("\t".join(("*" + c) if i == e.truth_index else c
                               for i, c in enumerate(e.candidates)))
    return "".join(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# scoring


def pool_query(z, n: int, decoder: GruParams) -> Tensor:
    """Last decoder state ``v_n`` as a single query representation."""
    return decode_steps(z, n, decoder)[-1]


def score_candidate(z_q: Tensor, z_j: Tensor, deficit: Tensor, summary: Tensor,
                    w: Tensor, b: Tensor) -> Tensor:
    x = concat([mul(z_q, z_j), deficit, summary], axis=0)
    return sigmoid(add(reshape(matmul(w, reshape(x, (x.shape[0], 1))), (1,)), b))


def selection_scores(params: ModelParams, examples: Sequence[SelectionExample],
                     ablation: Ablation = Ablation(), context: int | None = None,
                     chronological: bool = False) -> Tensor:
    """Scores in (0, 1) for every candidate of every example, flattened (``C x 1``)."""
    cands = [c for e in examples for c in e.candidate_ids]
    owner = [b for b, e in enumerate(examples) for _ in e.candidate_ids]
    ctx = encode_batch(params, [e.current_ids for e in examples], [e.past for e in examples],
                       ablation, context, chronological, extra_queries=cands)
    B, C = len(examples), len(cands)
    lengths = [len(e.current_ids) for e in examples] + [len(c) for c in cands]
    pooled = decode_batch(params.dec, concat([ctx.z, ctx.extra], axis=0), lengths)[-1]
    z_q = take_rows(pooled, owner)
    z_c = take_rows(pooled, np.arange(B, B + C))
    x = concat([mul(z_q, z_c), take_rows(ctx.deficit, owner), take_rows(ctx.summary, owner)],
               axis=1)
    return sigmoid(add(matmul(x, transpose(params.sel_w)), repeat_rows(params.sel_b, C)))


def split_scores(flat: np.ndarray, examples: Sequence[SelectionExample]) -> list[np.ndarray]:
    out, k = [], 0
    for e in examples:
        out.append(flat[k:k + len(e.candidates)])
        k += len(e.candidates)
    return out


def model_scorer(params: ModelParams, ablation: Ablation = Ablation(),
                 context: int | None = None, chronological: bool = False,
                 batch_size: int = 128) -> Callable[[Sequence[SelectionExample]], list[np.ndarray]]:
    def score(examples):
        out = []
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo:lo + batch_size]
            flat = selection_scores(params, chunk, ablation, context, chronological).values
            out.extend(split_scores(flat.reshape(-1), chunk))
        return out
    return score


def select_next(scores: Sequence[float]) -> int:
    """Index of the highest score; the first one wins ties."""
    if len(scores) == 0:
        raise ValueError("no candidates to select from")
    return int(np.argmax(np.asarray(scores)))


def selection_loss(params: ModelParams, batch: Sequence[SelectionExample],
                   cfg: TrainConfig) -> tuple[Tensor, int]:
    scores = selection_scores(params, batch, cfg.ablation, cfg.context, cfg.chronological)
    target = [float(i == e.truth_index) for e in batch for i in range(len(e.candidates))]
    weights = None
    if cfg.balance_candidates:
        weights = [1.0 if i == e.truth_index else 1.0 / (len(e.candidates) - 1)
                   for e in batch for i in range(len(e.candidates))]
    return mae_loss(scores, target, weights), len(target)


def train_selection(params: ModelParams, examples: Sequence[SelectionExample],
                    cfg: TrainConfig, **kw):
    return fit(params, examples, selection_loss, "selection", cfg, **kw)


# --------------------------------------------------------------------------
# evaluation


def truth_rank(scores: Sequence[float], truth_index: int) -> int:
    """1-based rank of the truth; tied candidates are ranked ahead of it."""
    s = np.asarray(scores, dtype=np.float64)
    t = s[truth_index]
    return 1 + int((s > t).sum()) + int((s == t).sum()) - 1


@dataclass
class SelectionMetrics:
    mrr: float
    n_examples: int
    mean_candidates: float

    def report(self) -> dict:
        return {"mrr": self.mrr, "n_examples": self.n_examples,
                "mean_candidates": self.mean_candidates}


def eval_mrr(examples: Sequence[SelectionExample],
             scorer: ModelParams | Callable[[Sequence[SelectionExample]], list],
             ablation: Ablation = Ablation(), context: int | None = None,
             chronological: bool = False) -> SelectionMetrics:
    if not examples:
        raise ValueError("cannot evaluate an empty dataset")
    if isinstance(scorer, ModelParams):
        scorer = model_scorer(scorer, ablation, context, chronological)
    all_scores = scorer(examples)
    rr = [1.0 / truth_rank(s, e.truth_index) for s, e in zip(all_scores, examples, strict=True)]
    return SelectionMetrics(float(np.mean(rr)), len(examples),
                            float(np.mean([len(e.candidates) for e in examples])))


def expected_random_mrr(n_candidates: int) -> float:
    """MRR of a uniformly random ranking of ``n`` candidates: ``H_n / n``."""
    return sum(1.0 / i for i in range(1, n_candidates + 1)) / n_candidates
