"""Word-retention prediction: decoder, 2-way softmax head, training and metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core_math import (
    Tensor,
    add,
    bce_loss,
    concat,
    matmul,
    repeat_rows,
    reshape,
    softmax,
    take_rows,
    transpose,
)
from .data import RetentionExample, label_edits  # noqa: F401  (re-exported)
from .encoders import EncodedQuery, GruParams, decode_batch
from .model import Ablation, ModelParams, encode_batch
from .training import TrainConfig, fit


def decode_steps(z, n: int, decoder: GruParams) -> list[Tensor]:
    """``v_1..v_n``: ``GRU_dec`` fed ``z`` at every step from a zero state."""
    if n < 1:
        raise ValueError("decode_steps needs n >= 1")
    zv = z.z if isinstance(z, EncodedQuery) else z
    H = decoder.hidden_dim
    states = decode_batch(decoder, reshape(zv, (1, zv.shape[-1])), [n])
    return [reshape(v, (H,)) for v in states]


def retention_probs(params: ModelParams, examples: Sequence[RetentionExample],
                    ablation: Ablation = Ablation(), context: int | None = None,
                    chronological: bool = False) -> Tensor:
    """``W x 2`` (removal, retention) distributions, words in example order."""
    ctx = encode_batch(params, [e.current_ids for e in examples], [e.past for e in examples],
                       ablation, context, chronological)
    B = len(examples)
    lengths = [len(e.current_ids) for e in examples]
    steps = decode_batch(params.dec, ctx.z, lengths)
    stacked = concat(steps, axis=0)
    rows = [i * B + b for b, n in enumerate(lengths) for i in range(n)]
    owner = [b for b, n in enumerate(lengths) for _ in range(n)]
    x = concat([take_rows(stacked, rows), take_rows(ctx.deficit, owner),
                take_rows(ctx.summary, owner)], axis=1)
    logits = add(matmul(x, transpose(params.ret_w)), repeat_rows(params.ret_b, len(rows)))
    return softmax(logits)


def hard_labels(probs: np.ndarray) -> np.ndarray:
    # ties go to retention, the majority class
    return (probs[:, 1] >= probs[:, 0]).astype(int)


def predict_retention(example: RetentionExample, params: ModelParams,
                      ablation: Ablation = Ablation(), context: int | None = None,
                      chronological: bool = False) -> np.ndarray:
    """``n x 2`` array of (p_removal, p_retention) for one example."""
    return retention_probs(params, [example], ablation, context, chronological).values


def predict_labels(examples: Sequence[RetentionExample], params: ModelParams,
                   ablation: Ablation = Ablation(), context: int | None = None,
                   chronological: bool = False, batch_size: int = 256) -> list[list[int]]:
    out = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        labels = hard_labels(retention_probs(params, chunk, ablation, context,
                                             chronological).values)
        k = 0
        for e in chunk:
            out.append(labels[k:k + len(e.current_ids)].tolist())
            k += len(e.current_ids)
    return out


def retention_loss(params: ModelParams, batch: Sequence[RetentionExample],
                   cfg: TrainConfig) -> tuple[Tensor, int]:
    probs = retention_probs(params, batch, cfg.ablation, cfg.context, cfg.chronological)
    labels = [y for e in batch for y in e.labels]
    return bce_loss(probs, labels), len(labels)


def train_retention(params: ModelParams, examples: Sequence[RetentionExample],
                    cfg: TrainConfig, **kw) -> tuple[list[float], object]:
    return fit(params, examples, retention_loss, "retention", cfg, **kw)


@dataclass
class RetentionMetrics:
    accuracy: float
    f1_removal: float
    precision_removal: float
    recall_removal: float
    micro_accuracy: float
    n_queries: int
    n_words: int
    per_query_accuracies: list[float] = field(default_factory=list, repr=False)

    def report(self) -> dict:
        d = asdict(self)
        d.pop("per_query_accuracies")
        return d


def score_predictions(labels: Sequence[Sequence[int]],
                      predictions: Sequence[Sequence[int]]) -> RetentionMetrics:
    """Query-normalized accuracy plus removal-class P/R/F1 pooled over words."""
    if not labels:
        raise ValueError("cannot evaluate an empty dataset")
    per_query = []
    tp = fp = fn = correct = words = 0
    for y, p in zip(labels, predictions, strict=True):
        if len(y) != len(p):
            raise ValueError("prediction length differs from label length")
        hits = sum(int(a == b) for a, b in zip(y, p))
        per_query.append(hits / len(y))
        correct += hits
        words += len(y)
        for a, b in zip(y, p):
            tp += a == 0 and b == 0
            fp += a == 1 and b == 0
            fn += a == 0 and b == 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return RetentionMetrics(
        accuracy=float(np.mean(per_query)),
        f1_removal=f1,
        precision_removal=precision,
        recall_removal=recall,
        micro_accuracy=correct / words,
        n_queries=len(labels),
        n_words=words,
        per_query_accuracies=per_query,
    )


Predictor = Callable[[Sequence[RetentionExample]], list[list[int]]]


def eval_retention(examples: Sequence[RetentionExample], params: ModelParams | Predictor,
                   ablation: Ablation = Ablation(), context: int | None = None,
                   chronological: bool = False) -> RetentionMetrics:
    if not examples:
        raise ValueError("cannot evaluate an empty dataset")
    if isinstance(params, ModelParams):
        preds = predict_labels(examples, params, ablation, context, chronological)
    else:
        preds = params(examples)
    return score_predictions([e.labels for e in examples], preds)


def majority_baseline(examples: Sequence[RetentionExample]) -> RetentionMetrics:
    """Every word predicted 'retention'."""
    return score_predictions([e.labels for e in examples],
                             [[1] * len(e.labels) for e in examples])
