"""Synthetic search sessions with a known retention law.

Each session has an *anchor* word (the topic) and ``k`` *facet* words (the
user's current need).  Queries are ``[anchor, facets..., modifier?]``.
After every query the user clicks either a result whose url spells out the
anchor and all facets of that query (the need is served), an off-topic url
built from junk words that never occur in queries, or nothing.

Going from query ``t`` to ``t+1`` each word is kept independently:

* anchor: ``p_anchor``
* facet: ``0.5 + 0.45*strength`` if no served click among the previous
  ``window`` steps covered it, ``0.5 - 0.45*strength`` otherwise
* modifier: ``p_modifier``

Dropped anchors/facets are replaced by fresh words and a fresh modifier is
appended with probability ``p_new_modifier``.  Only the clicks of steps
*before* ``t`` matter, matching what the model sees as past context.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .data import RetentionExample, Session, SessionStep
from .encoders import URL_SEP

_CHAR_OFFSET = 3


@dataclass(frozen=True)
class SyntheticConfig:
    n_sessions: int = 1000
    vocab_size: int = 60
    seed: int = 0
    deficit_strength: float = 1.0
    window: int = 3
    p_anchor: float = 0.9
    p_modifier: float = 0.2
    p_served: float = 0.4
    p_offtopic: float = 0.3
    p_new_modifier: float = 0.5
    min_steps: int = 3
    max_steps: int = 6


@dataclass
class Lexicon:
    anchors: list[str]
    facets: list[str]
    modifiers: list[str]
    junk: list[str]

    def kind(self, word: str) -> str:
        for name in ("anchors", "facets", "modifiers"):
            if word in self._sets[name]:
                return name[:-1]
        return "unknown"

    def __post_init__(self):
        self._sets = {n: set(getattr(self, n)) for n in ("anchors", "facets", "modifiers")}


def make_lexicon(vocab_size: int, rng: np.random.Generator) -> Lexicon:
    if vocab_size < 12:
        raise ValueError("synthetic vocab_size must be at least 12")
    n_junk = max(2, vocab_size // 4)
    words: list[str] = []
    seen: set[str] = set()
    letters = np.array(list(string.ascii_lowercase))
    while len(words) < vocab_size + n_junk:
        w = "".join(rng.choice(letters, size=int(rng.integers(3, 7))))
        if w not in seen and w not in ("www", "com", "net", "org", "http"):
            seen.add(w)
            words.append(w)
    n_a = vocab_size // 4
    n_f = vocab_size // 2
    return Lexicon(words[:n_a], words[n_a:n_a + n_f], words[n_a + n_f:vocab_size],
                   words[vocab_size:])


def retention_probability(kind: str, covered: bool, cfg: SyntheticConfig) -> float:
    if kind == "anchor":
        return cfg.p_anchor
    if kind == "facet":
        shift = 0.45 * cfg.deficit_strength
        return 0.5 - shift if covered else 0.5 + shift
    return cfg.p_modifier


def _fresh(pool: list[str], exclude: set[str], rng: np.random.Generator) -> str:
    choices = [w for w in pool if w not in exclude]
    return choices[int(rng.integers(len(choices)))]


def _session(idx: int, lex: Lexicon, cfg: SyntheticConfig, rng: np.random.Generator) -> Session:
    n_steps = int(rng.integers(cfg.min_steps, cfg.max_steps + 1))
    k = int(rng.integers(1, 3))
    used: set[str] = set()
    anchor = _fresh(lex.anchors, used, rng)
    facets = []
    for _ in range(k):
        facets.append(_fresh(lex.facets, used | set(facets), rng))
    used |= {anchor, *facets}
    mods = [_fresh(lex.modifiers, set(), rng)] if rng.random() < cfg.p_new_modifier else []
    served: list[set[str]] = []
    steps: list[SessionStep] = []
    for t in range(n_steps):
        words = [anchor, *facets, *mods]
        steps.append(SessionStep(" ".join(words), list(words)))
        roll = rng.random()
        if roll < cfg.p_served:
            steps[-1].clicks.append(f"www.{'-'.join([anchor, *facets])}.com")
            served.append(set(facets))
        else:
            if roll < cfg.p_served + (1.0 - cfg.p_served) * cfg.p_offtopic:
                a, b = rng.choice(len(lex.junk), size=2, replace=False)
                steps[-1].clicks.append(f"www.{lex.junk[a]}-{lex.junk[b]}.com")
            served.append(set())
        if t == n_steps - 1:
            break
        covered = set().union(*served[max(0, t - cfg.window):t])
        cur = set(words)
        if rng.random() >= cfg.p_anchor:
            anchor = _fresh(lex.anchors, used | cur, rng)
        kept = [f for f in facets
                if rng.random() < retention_probability("facet", f in covered, cfg)]
        while len(kept) < k:
            kept.append(_fresh(lex.facets, used | cur | set(kept), rng))
        facets = kept
        mods = [m for m in mods if rng.random() < cfg.p_modifier]
        if rng.random() < cfg.p_new_modifier:
            mods.append(_fresh(lex.modifiers, cur | set(mods), rng))
        used |= {anchor, *facets}
    return Session(f"s{idx:06d}", steps, start=idx * 86400)


def gen_synthetic(cfg: SyntheticConfig) -> tuple[list[Session], Lexicon]:
    """Sessions drawn from the law above; identical for identical configs."""
    rng = np.random.default_rng(cfg.seed)
    lex = make_lexicon(cfg.vocab_size, rng)
    return [_session(i, lex, cfg, rng) for i in range(cfg.n_sessions)], lex


def _decode_chars(ids) -> str:
    return "".join(" " if c == URL_SEP else chr(c - _CHAR_OFFSET) if c >= _CHAR_OFFSET else "?"
                   for c in ids)


def bayes_predict(example: RetentionExample, lex: Lexicon, cfg: SyntheticConfig) -> list[int]:
    """Optimal labels under the law, reading coverage off the past urls."""
    served = set()
    for p in example.past[: cfg.window]:
        text = _decode_chars(p.url_chars)
        for url in text.split():
            body = url[4:-4] if url.startswith("www.") and url.endswith(".com") else url
            parts = body.split("-")
            if parts and parts[0] in lex._sets["anchors"]:
                served.update(parts[1:])
    return [int(retention_probability(lex.kind(w), w in served, cfg) >= 0.5)
            for w in example.words]


def expected_word_accuracy(kind: str, covered: bool, cfg: SyntheticConfig) -> float:
    p = retention_probability(kind, covered, cfg)
    return max(p, 1.0 - p)
