"""Model parameters and the shared context encoder used by both task heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_math import Tensor, matmul, row_slice, sub
from .data import PastStep
from .encoders import (
    CHAR_VOCAB_SIZE,
    INIT_SCALE,
    PAD,
    EmbeddingTable,
    GruParams,
    encode_queries,
    encode_results,
    sequence_over_rows,
)

GRU_NAMES = ("enc_fwd", "enc_bwd", "url", "seq", "dec")
_HEADS = {"retention": ("ret_w", "ret_b"), "selection": ("sel_w", "sel_b")}


@dataclass(frozen=True)
class Ablation:
    """Channels to zero at constant capacity; ``last_query_only`` implies both."""

    disable_deficit: bool = False
    disable_context: bool = False
    last_query_only: bool = False

    @property
    def use_deficit(self) -> bool:
        return not (self.disable_deficit or self.last_query_only)

    @property
    def use_context(self) -> bool:
        return not (self.disable_context or self.last_query_only)


@dataclass
class ModelParams:
    embeddings: EmbeddingTable
    enc_fwd: GruParams
    enc_bwd: GruParams
    url: GruParams
    seq: GruParams
    dec: GruParams
    ret_w: Tensor
    ret_b: Tensor
    sel_w: Tensor
    sel_b: Tensor

    @classmethod
    def init(cls, vocab_size: int, embed_dim: int = 64, char_embed_dim: int = 16,
             hidden_dim: int = 64, seed: int = 0, scale: float = INIT_SCALE,
             char_vocab_size: int = CHAR_VOCAB_SIZE) -> "ModelParams":
        rng = np.random.default_rng(seed)
        H = hidden_dim
        emb = EmbeddingTable.init(vocab_size, embed_dim, char_embed_dim, rng,
                                  char_vocab_size, scale)
        grus = {
            "enc_fwd": GruParams.init(embed_dim, H, rng, scale),
            "enc_bwd": GruParams.init(embed_dim, H, rng, scale),
            "url": GruParams.init(char_embed_dim, H, rng, scale),
            "seq": GruParams.init(H, H, rng, scale),
            "dec": GruParams.init(H, H, rng, scale),
        }

        def w(rows):
            return Tensor(rng.uniform(-scale, scale, (rows, 3 * H)), requires_grad=True)

        return cls(emb, **grus,
                   ret_w=w(2), ret_b=Tensor(np.zeros(2), requires_grad=True),
                   sel_w=w(1), sel_b=Tensor(np.zeros(1), requires_grad=True))

    @property
    def hidden_dim(self) -> int:
        return self.dec.hidden_dim

    def dims(self) -> dict[str, int]:
        return {
            "vocab_size": self.embeddings.word_table.shape[0],
            "embed_dim": self.embeddings.word_table.shape[1],
            "char_vocab_size": self.embeddings.char_table.shape[0],
            "char_embed_dim": self.embeddings.char_table.shape[1],
            "hidden_dim": self.hidden_dim,
        }

    def named_tensors(self) -> dict[str, Tensor]:
        out = {"emb.word": self.embeddings.word_table, "emb.char": self.embeddings.char_table}
        for g in GRU_NAMES:
            out.update(getattr(self, g).named(g))
        for names in _HEADS.values():
            for n in names:
                out[n] = getattr(self, n)
        return out

    def task_tensors(self, task: str) -> dict[str, Tensor]:
        """Parameters a task trains: everything except the other task's head."""
        other = {n for t, names in _HEADS.items() if t != task for n in names}
        return {k: v for k, v in self.named_tensors().items() if k not in other}

    frozen_rows = {"emb.word": (PAD,), "emb.char": (PAD,)}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors().items():
            a = arrays[name]
            if a.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {a.shape} != {t.shape}")
            t.values = np.array(a, dtype=np.float64)
            t.grad = None

    def shared_tensors(self) -> dict[str, Tensor]:
        """Embeddings and all five GRUs: what the two tasks can share."""
        heads = {n for names in _HEADS.values() for n in names}
        return {k: v for k, v in self.named_tensors().items() if k not in heads}

    def copy(self) -> "ModelParams":
        d = self.dims()
        clone = ModelParams.init(d["vocab_size"], d["embed_dim"], d["char_embed_dim"],
                                 d["hidden_dim"], char_vocab_size=d["char_vocab_size"])
        clone.load_arrays({k: v.values for k, v in self.named_tensors().items()})
        return clone


@dataclass
class Context:
    """Per-example encodings: current query ``z``, deficit ``D``, history ``s``
    (all ``B x H``) and the encodings of any extra queries."""

    z: Tensor
    deficit: Tensor
    summary: Tensor
    extra: Tensor | None = None


def encode_batch(params: ModelParams, currents: Sequence[Sequence[int]],
                 pasts: Sequence[Sequence[PastStep]], ablation: Ablation = Ablation(),
                 context: int | None = None, chronological: bool = False,
                 extra_queries: Sequence[Sequence[int]] = ()) -> Context:
    B, H = len(currents), params.hidden_dim
    if context is not None:
        pasts = [p[:context] for p in pasts]
    need_past = ablation.use_deficit or ablation.use_context
    flat: list[PastStep] = []
    groups: list[list[int]] = []
    for p in pasts:
        groups.append(list(range(len(flat), len(flat) + len(p))) if need_past else [])
        if need_past:
            flat.extend(p)
    M, X = len(flat), len(extra_queries)
    queries = [*currents, *(s.query_ids for s in flat), *extra_queries]
    z_all = encode_queries(params.embeddings.word_table, params.enc_fwd, params.enc_bwd,
                           queries).z
    z = row_slice(z_all, 0, B)
    extra = row_slice(z_all, B + M, B + M + X) if X else None

    deficit = Tensor.zeros(B, H)
    summary = Tensor.zeros(B, H)
    if M:
        z_past = row_slice(z_all, B, B + M)
        if ablation.use_deficit:
            u = encode_results(params.embeddings.char_table, params.url,
                               [s.url_chars for s in flat])
            owner = np.zeros((B, M))
            for b, g in enumerate(groups):
                owner[b, g] = 1.0
            deficit = matmul(Tensor(owner), sub(z_past, u))
        if ablation.use_context:
            summary = sequence_over_rows(params.seq, z_past, groups, chronological)
    return Context(z, deficit, summary, extra)
