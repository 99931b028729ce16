"""Representation builders: embeddings, GRUs, query/result/context encoders
and the information-deficit arithmetic.

Everything is batched internally: a batch of variable-length sequences is
laid out time-major (row ``t*B + b`` holds step ``t`` of sequence ``b``)
and a 0/1 step mask freezes each sequence's state once it has ended, so the
state after the last step is every sequence's final hidden state.  The
single-example functions (``gru_forward``, ``encode_query``, ...) are thin
wrappers over the batched ones with ``B = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_math import (
    ShapeError,
    _sigmoid,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    record,
    repeat_rows,
    reshape,
    row_slice,
    sub,
    take_rows,
    transpose,
)

PAD = 0
OOV = 1
URL_SEP = 2
_CHAR_OFFSET = 3
CHAR_VOCAB_SIZE = _CHAR_OFFSET + 128
MAX_URL_CHARS = 256
INIT_SCALE = 0.08

_GATES = ("z", "r", "h")


@dataclass
class GruParams:
    """Weights of one GRU: ``w_*`` are hidden x input, ``u_*`` hidden x hidden."""

    input_dim: int
    hidden_dim: int
    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_h: Tensor
    u_h: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator | None,
             scale: float = INIT_SCALE) -> "GruParams":
        """Uniform(-scale, scale) weights and zero biases; ``rng=None`` gives all zeros."""
        def w(rows, cols):
            if rng is None:
                return Tensor(np.zeros((rows, cols)), requires_grad=True)
            return Tensor(rng.uniform(-scale, scale, (rows, cols)), requires_grad=True)

        kw = {}
        for g in _GATES:
            kw[f"w_{g}"] = w(hidden_dim, input_dim)
            kw[f"u_{g}"] = w(hidden_dim, hidden_dim)
            kw[f"b_{g}"] = Tensor(np.zeros(hidden_dim), requires_grad=True)
        return cls(input_dim, hidden_dim, **kw)

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "GruParams":
        return cls.init(input_dim, hidden_dim, None)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}_{g}": getattr(self, f"{k}_{g}")
                for g in _GATES for k in ("w", "u", "b")}


@dataclass
class EmbeddingTable:
    word_table: Tensor
    char_table: Tensor

    @classmethod
    def init(cls, vocab_size: int, embed_dim: int, char_embed_dim: int,
             rng: np.random.Generator, char_vocab_size: int = CHAR_VOCAB_SIZE,
             scale: float = INIT_SCALE) -> "EmbeddingTable":
        words = rng.uniform(-scale, scale, (vocab_size, embed_dim))
        chars = rng.uniform(-scale, scale, (char_vocab_size, char_embed_dim))
        words[PAD] = 0.0
        chars[PAD] = 0.0
        return cls(Tensor(words, requires_grad=True), Tensor(chars, requires_grad=True))


@dataclass
class EncodedQuery:
    z: Tensor
    per_step_forward: list[Tensor] = field(default_factory=list)
    per_step_backward: list[Tensor] = field(default_factory=list)


@dataclass
class EncodedResult:
    u: Tensor


@dataclass
class InfoDeficit:
    per_step: list[Tensor]
    total: Tensor


@dataclass
class ContextSummary:
    s: Tensor


# --------------------------------------------------------------------------
# GRU


def gru_cell(xp: Tensor, h: Tensor, p: GruParams, mask: np.ndarray | None = None) -> Tensor:
    """One fused GRU step on a batch.

    ``xp`` is ``B x 3H``: the input projections (plus biases) of the update,
    reset and candidate gates side by side.  Rows whose ``mask`` is 0 keep
    their previous state.
    """
    H = p.hidden_dim
    hv = h.values
    uz, ur, uh = p.u_z.values, p.u_r.values, p.u_h.values
    x = xp.values
    z = _sigmoid(x[:, :H] + hv @ uz.T)
    r = _sigmoid(x[:, H:2 * H] + hv @ ur.T)
    rh = r * hv
    c = np.tanh(x[:, 2 * H:] + rh @ uh.T)
    hn = hv + z * (c - hv)
    if mask is None:
        m = None
        out = hn
    else:
        m = np.asarray(mask, dtype=np.float64).reshape(-1, 1)
        out = m * hn + (1.0 - m) * hv

    def bw(g):
        gn = g if m is None else g * m
        g_z = gn * (c - hv)
        g_ac = gn * z * (1.0 - c * c)
        g_rh = g_ac @ uh
        g_ar = g_rh * hv * r * (1.0 - r)
        g_az = g_z * z * (1.0 - z)
        g_h = gn * (1.0 - z) + g_rh * r + g_az @ uz + g_ar @ ur
        if m is not None:
            g_h += g * (1.0 - m)
        g_xp = np.concatenate([g_az, g_ar, g_ac], axis=1)
        return (g_xp, g_h, g_az.T @ hv, g_ar.T @ hv, g_ac.T @ rh)

    return record(out, (xp, h, p.u_z, p.u_r, p.u_h), bw)


def input_projection(p: GruParams, x_all: Tensor) -> Tensor:
    """``x W^T + b`` for all three gates at once: ``N x in -> N x 3H``."""
    if x_all.shape[1] != p.input_dim:
        raise ShapeError(f"GRU input width {x_all.shape[1]} != input_dim {p.input_dim}")
    w = concat([p.w_z, p.w_r, p.w_h], axis=0)
    b = concat([p.b_z, p.b_r, p.b_h], axis=0)
    return add(matmul(x_all, transpose(w)), repeat_rows(b, x_all.shape[0]))


def gru_sequence(p: GruParams, x_all: Tensor, mask: np.ndarray, h0: Tensor) -> list[Tensor]:
    """Run a GRU over a time-major batch; returns the ``T`` states (each ``B x H``)."""
    T, B = mask.shape
    if T == 0:
        return []
    if h0.shape != (B, p.hidden_dim):
        raise ShapeError(f"h0 shape {h0.shape} != {(B, p.hidden_dim)}")
    xp_all = input_projection(p, x_all)
    h = h0
    states = []
    for t in range(T):
        mt = mask[t]
        h = gru_cell(row_slice(xp_all, t * B, (t + 1) * B), h, p, None if mt.all() else mt)
        states.append(h)
    return states


def gru_forward(p: GruParams, inputs: Sequence[Tensor], h0: Tensor) -> list[Tensor]:
    """Unbatched GRU over vectors ``inputs``; returns ``h_1 .. h_T``."""
    if h0.shape != (p.hidden_dim,):
        raise ShapeError(f"h0 shape {h0.shape} != ({p.hidden_dim},)")
    if not inputs:
        return []
    for x in inputs:
        if x.shape != (p.input_dim,):
            raise ShapeError(f"GRU input shape {x.shape} != ({p.input_dim},)")
    x_all = concat([reshape(x, (1, p.input_dim)) for x in inputs], axis=0)
    mask = np.ones((len(inputs), 1))
    states = gru_sequence(p, x_all, mask, reshape(h0, (1, p.hidden_dim)))
    return [reshape(s, (p.hidden_dim,)) for s in states]


def time_major(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Pad id sequences: returns flat ids (``T*B``) and a ``T x B`` step mask."""
    B = len(seqs)
    T = max((len(s) for s in seqs), default=0)
    ids = np.full((T, B), PAD, dtype=np.int64)
    mask = np.zeros((T, B))
    for b, s in enumerate(seqs):
        ids[: len(s), b] = s
        mask[: len(s), b] = 1.0
    return ids.reshape(-1), mask


def run_over_ids(p: GruParams, table: Tensor, seqs: Sequence[Sequence[int]]) -> list[Tensor]:
    ids, mask = time_major(seqs)
    if mask.shape[0] == 0:
        return []
    x_all = take_rows(table, ids)
    return gru_sequence(p, x_all, mask, Tensor.zeros(len(seqs), p.hidden_dim))


# --------------------------------------------------------------------------
# query / result / context encoders


@dataclass
class QueryBatch:
    z: Tensor
    forward_states: list[Tensor]
    backward_states: list[Tensor]


def encode_queries(word_table: Tensor, fwd: GruParams, bwd: GruParams,
                   queries: Sequence[Sequence[int]]) -> QueryBatch:
    """Bidirectional encoding ``z = h_n^f * h_1^b`` for a batch of queries."""
    for q in queries:
        if len(q) == 0:
            raise ValueError("cannot encode an empty query")
    if not queries:
        return QueryBatch(Tensor.zeros(0, fwd.hidden_dim), [], [])
    f_states = run_over_ids(fwd, word_table, queries)
    b_states = run_over_ids(bwd, word_table, [list(q)[::-1] for q in queries])
    return QueryBatch(mul(f_states[-1], b_states[-1]), f_states, b_states)


def encode_query(query: Sequence[int], embeddings: EmbeddingTable, fwd: GruParams,
                 bwd: GruParams) -> EncodedQuery:
    if len(query) == 0:
        raise ValueError("cannot encode an empty query")
    batch = encode_queries(embeddings.word_table, fwd, bwd, [query])
    H = fwd.hidden_dim
    return EncodedQuery(
        z=reshape(batch.z, (H,)),
        per_step_forward=[reshape(s, (H,)) for s in batch.forward_states],
        per_step_backward=[reshape(s, (H,)) for s in batch.backward_states],
    )


def url_chars(urls: Sequence[str], max_chars: int = MAX_URL_CHARS) -> list[int]:
    """Character ids of the clicked urls joined in click order, head-truncated."""
    out: list[int] = []
    for k, url in enumerate(urls):
        if k:
            out.append(URL_SEP)
        out.extend(ord(ch) + _CHAR_OFFSET if ord(ch) < 128 else OOV for ch in url)
        if len(out) >= max_chars:
            break
    return out[:max_chars]


def encode_results(char_table: Tensor, url_gru: GruParams,
                   char_seqs: Sequence[Sequence[int]]) -> Tensor:
    """Last ``GRU_url`` state per char sequence (``M x H``); empty sequences give 0."""
    states = run_over_ids(url_gru, char_table, char_seqs)
    if not states:
        return Tensor.zeros(len(char_seqs), url_gru.hidden_dim)
    return states[-1]


def encode_result(clicked_urls: Sequence[str], embeddings: EmbeddingTable,
                  url_gru: GruParams, max_chars: int = MAX_URL_CHARS) -> EncodedResult:
    u = encode_results(embeddings.char_table, url_gru, [url_chars(clicked_urls, max_chars)])
    return EncodedResult(reshape(u, (url_gru.hidden_dim,)))


def _vec(x) -> Tensor:
    if isinstance(x, EncodedQuery):
        return x.z
    if isinstance(x, EncodedResult):
        return x.u
    return x


def info_deficit(z_past, u_past) -> Tensor:
    """Unmet need of one past step: query encoding minus result encoding."""
    return sub(_vec(z_past), _vec(u_past))


def aggregate_deficit(per_step: Sequence[Tensor], dim: int | None = None) -> Tensor:
    if not per_step:
        if dim is None:
            raise ValueError("aggregate_deficit of an empty list needs dim")
        return Tensor.zeros(dim)
    total = per_step[0]
    for d in per_step[1:]:
        total = add(total, d)
    return total


def deficit(z_past: Sequence, u_past: Sequence, dim: int) -> InfoDeficit:
    if len(z_past) != len(u_past):
        raise ValueError("need one result encoding per past query")
    steps = [info_deficit(z, u) for z, u in zip(z_past, u_past)]
    return InfoDeficit(steps, aggregate_deficit(steps, dim))


def encode_context(past_z: Sequence, seq_gru: GruParams,
                   chronological: bool = False) -> ContextSummary:
    """Summarize past query encodings (given most recent first) with ``GRU_seq``."""
    H = seq_gru.hidden_dim
    zs = [_vec(z) for z in past_z]
    if chronological:
        zs = zs[::-1]
    states = gru_forward(seq_gru, zs, Tensor.zeros(H))
    return ContextSummary(states[-1] if states else Tensor.zeros(H))


def sequence_over_rows(p: GruParams, rows: Tensor, groups: Sequence[Sequence[int]],
                       chronological: bool = False) -> Tensor:
    """Batched ``encode_context``: run ``p`` over ``rows[g]`` for each index list ``g``."""
    B = len(groups)
    if chronological:
        groups = [list(g)[::-1] for g in groups]
    T = max((len(g) for g in groups), default=0)
    if T == 0:
        return Tensor.zeros(B, p.hidden_dim)
    idx = np.zeros((T, B), dtype=np.int64)
    mask = np.zeros((T, B))
    for b, g in enumerate(groups):
        idx[: len(g), b] = g
        mask[: len(g), b] = 1.0
    states = gru_sequence(p, take_rows(rows, idx.reshape(-1)), mask,
                          Tensor.zeros(B, p.hidden_dim))
    return states[-1]


def decode_batch(dec: GruParams, z: Tensor, lengths: Sequence[int]) -> list[Tensor]:
    """Feed each row of ``z`` to ``GRU_dec`` ``lengths[b]`` times from a zero state."""
    B = z.shape[0]
    T = max(lengths, default=0)
    if T == 0:
        return []
    mask = (np.arange(T)[:, None] < np.asarray(lengths)[None, :]).astype(np.float64)
    x_all = take_rows(z, np.tile(np.arange(B), T))
    return gru_sequence(dec, x_all, mask, Tensor.zeros(B, dec.hidden_dim))
