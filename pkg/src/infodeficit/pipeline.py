"""Deterministic preprocess -> train -> eval orchestration and run reports."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .config import RunConfig
from .data import (
    PastStep,
    RetentionExample,
    SplitSpec,
    Vocabulary,
    build_vocab,
    dump_jsonl,
    load_jsonl,
    make_examples,
    pair_tallies,
    read_log,
    segment_sessions,
    session_checksums,
    split_sessions,
    tokenize,
)
from .encoders import url_chars
from .model import ModelParams
from .retention import (
    eval_retention,
    majority_baseline,
    predict_retention,
    train_retention,
)
from .selection import (
    CooccurrenceIndex,
    SelectionExample,
    eval_mrr,
    export_candidates,
    model_scorer,
    query_key,
    selection_examples_from_sessions,
    train_selection,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


class PipelineError(RuntimeError):
    """A user-facing failure with a stable error code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunReport:
    command: str
    config: dict
    metrics: dict = field(default_factory=dict)
    losses: list[float] = field(default_factory=list)
    corpus: dict = field(default_factory=dict)
    wall_time: float | None = None

    def to_json(self, with_time: bool = True) -> str:
        d = asdict(self)
        if not with_time:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def records(self) -> list[dict]:
        """Line-delimited form: one record per config, epoch, metric row and stat."""
        out = [{"record": "config", "command": self.command, **self.config}]
        out += [{"record": "epoch", "epoch": i + 1, "loss": v} for i, v in enumerate(self.losses)]
        out += [{"record": "metrics", "row": k, **v} for k, v in self.metrics.items()]
        out += [{"record": "corpus", "key": k, "value": v} for k, v in self.corpus.items()]
        return out

    def text(self) -> str:
        lines = [f"command: {self.command}  task: {self.config.get('task')}  "
                 f"seed: {self.config.get('seed')}"]
        if self.losses:
            lines.append("losses: " + " ".join(f"{v:.6f}" for v in self.losses))
        for row, vals in self.metrics.items():
            body = "  ".join(f"{k}={_num(v)}" for k, v in vals.items())
            lines.append(f"{row:<16} {body}")
        for k, v in self.corpus.items():
            lines.append(f"corpus.{k}: {json.dumps(v, sort_keys=True)}")
        return "\n".join(lines) + "\n"

    def write(self, directory, stem: str) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.txt").write_text(self.text(), encoding="utf-8")
        (d / f"{stem}.jsonl").write_text(dump_jsonl(self.records()), encoding="utf-8")
        # wall time lives apart from the reports so reruns stay byte-identical
        (d / f"{stem}.timing.json").write_text(
            json.dumps({"wall_time": self.wall_time}) + "\n", encoding="utf-8")


def _num(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# --------------------------------------------------------------------------
# preprocess


def _write(path: Path, text: str) -> str:
    data = text.encode("utf-8")
    path.write_bytes(data)
    return sha256(data)


def cmd_preprocess(cfg: RunConfig) -> RunReport:
    t0 = time.perf_counter()
    if not cfg.input:
        raise PipelineError("missing_input", "no input log given")
    try:
        records = list(read_log(cfg.input))
        sessions = segment_sessions(records, cfg.session_gap)
    except OSError as exc:
        raise PipelineError("unreadable_input", str(exc)) from exc
    except ValueError as exc:
        raise PipelineError("malformed_log", str(exc)) from exc
    tallies = pair_tallies(sessions)
    if tallies["kept"] == 0:
        raise PipelineError("no_eligible_pairs", "no eligible pairs after filtering")
    if len(sessions) < 3:
        raise PipelineError("too_few_sessions", f"need at least 3 sessions, got {len(sessions)}")
    splits = dict(zip(SPLITS, split_sessions(
        sessions, SplitSpec(cfg.train_frac, cfg.dev_frac, cfg.test_frac, cfg.seed))))
    vocab = build_vocab(splits["train"], cfg.vocab_size)
    index = CooccurrenceIndex.build(splits["train"])

    out = Path(cfg.workdir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"vocab.tsv": _write(out / "vocab.tsv", vocab.dumps())}
    n_ret, n_sel = {}, {}
    for name, ss in splits.items():
        ret = make_examples(ss, vocab, cfg.context, cfg.max_url_chars)
        sel = selection_examples_from_sessions(ss, index, vocab, cfg.k, cfg.context,
                                               leave_one_out=(name == "train"),
                                               max_url_chars=cfg.max_url_chars)
        n_ret[name], n_sel[name] = len(ret), len(sel)
        files[f"retention_{name}.jsonl"] = _write(
            out / f"retention_{name}.jsonl", dump_jsonl(e.to_record() for e in ret))
        files[f"selection_{name}.jsonl"] = _write(
            out / f"selection_{name}.jsonl", dump_jsonl(e.to_record() for e in sel))
        files[f"candidates_{name}.txt"] = _write(out / f"candidates_{name}.txt",
                                                 export_candidates(sel))
    if n_ret["train"] == 0:
        raise PipelineError("no_eligible_pairs", "no eligible pairs with past context in train")

    sums = {k: session_checksums(v) for k, v in splits.items()}
    overlap = sum(len(sums[a] & sums[b]) for a, b in (("train", "dev"), ("train", "test"),
                                                      ("dev", "test")))
    corpus = {
        "records": len(records),
        "sessions": len(sessions),
        "pairs": tallies,
        "split_sessions": {k: len(v) for k, v in splits.items()},
        "split_checksums": {k: sha256("".join(sorted(v)).encode()) for k, v in sums.items()},
        "split_overlap": overlap,
        "retention_examples": n_ret,
        "selection_examples": n_sel,
        "vocab_size": len(vocab),
    }
    manifest = {"seed": cfg.seed, "config": cfg.to_dict(), "corpus": corpus, "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n",
                                       encoding="utf-8")
    report = RunReport("preprocess", cfg.to_dict(), corpus=corpus,
                       wall_time=time.perf_counter() - t0)
    report.write(out, "report_preprocess")
    return report


# --------------------------------------------------------------------------
# loading


def load_vocab(workdir) -> Vocabulary:
    path = Path(workdir) / "vocab.tsv"
    if not path.exists():
        raise PipelineError("missing_artifacts", f"{path} not found; run preprocess first")
    return Vocabulary.loads(path.read_text(encoding="utf-8"))


def load_split(workdir, task: str, split: str) -> list:
    path = Path(workdir) / f"{task}_{split}.jsonl"
    if not path.exists():
        raise PipelineError("missing_artifacts", f"{path} not found; run preprocess first")
    recs = load_jsonl(path.read_text(encoding="utf-8"))
    cls = RetentionExample if task == "retention" else SelectionExample
    return [cls.from_record(r) for r in recs]


def checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.workdir) / f"{cfg.task}.ckpt"


# --------------------------------------------------------------------------
# train / eval


def evaluate(task: str, params: ModelParams, examples: Sequence, cfg: RunConfig) -> dict:
    if task == "retention":
        return eval_retention(examples, params, cfg.ablation, cfg.context,
                              cfg.chronological_context).report()
    return eval_mrr(examples, params, cfg.ablation, cfg.context,
                    cfg.chronological_context).report()


def _check_dims(ck: ckpt.Checkpoint, cfg: RunConfig, vocab_size: int) -> None:
    want = {**cfg.model_dims(), "vocab_size": vocab_size}
    have = ck.params.dims()
    diff = {k: (have[k], v) for k, v in want.items() if have[k] != v}
    if diff:
        raise PipelineError("dim_mismatch", f"checkpoint dims differ from config: {diff}")


def _share_encoder(params: ModelParams, cfg: RunConfig, vocab_size: int) -> None:
    path = cfg.init_encoder_from
    if not os.path.exists(path):
        raise PipelineError("missing_checkpoint", f"{path} not found")
    src = ckpt.load(path)
    _check_dims(src, cfg, vocab_size)
    for name, t in src.params.shared_tensors().items():
        params.named_tensors()[name].values = t.values.copy()


def cmd_train(cfg: RunConfig, resume: bool = False) -> RunReport:
    t0 = time.perf_counter()
    vocab = load_vocab(cfg.workdir)
    train = load_split(cfg.workdir, cfg.task, "train")
    dev = load_split(cfg.workdir, cfg.task, "dev")
    if not train:
        raise PipelineError("empty_train", "training split has no examples")
    path = checkpoint_path(cfg)
    tc = cfg.train_config()
    if resume and path.exists():
        ck = ckpt.load(path)
        if ck.task != cfg.task:
            raise PipelineError("task_mismatch", f"checkpoint is for task {ck.task!r}")
        _check_dims(ck, cfg, len(vocab))
        params, state, start, losses = ck.params, ck.adam, ck.epoch, list(ck.losses)
    else:
        params = ModelParams.init(len(vocab), seed=cfg.seed, **cfg.model_dims())
        state, start, losses = None, 0, []
        if cfg.init_encoder_from:
            _share_encoder(params, cfg, len(vocab))
    trainer = train_retention if cfg.task == "retention" else train_selection
    new_losses, state = trainer(params, train, tc, state=state, start_epoch=start)
    losses += new_losses
    epoch = max(start, cfg.epochs)
    ckpt.save(ckpt.Checkpoint(cfg.task, cfg.to_dict(), params, epoch, losses, state), path)
    metrics = {}
    if dev:
        metrics["dev"] = evaluate(cfg.task, params, dev, cfg)
    corpus = {"train_examples": len(train), "dev_examples": len(dev), "vocab_size": len(vocab)}
    report = RunReport("train", cfg.to_dict(), metrics, losses, corpus,
                       time.perf_counter() - t0)
    report.write(cfg.workdir, f"report_train_{cfg.task}")
    return report


def _aggregate(rows: list[dict]) -> tuple[dict, dict]:
    keys = [k for k, v in rows[0].items() if isinstance(v, float)]
    mean = {k: statistics.fmean(r[k] for r in rows) for k in keys}
    std = {k: (statistics.stdev([r[k] for r in rows]) if len(rows) > 1 else 0.0) for k in keys}
    return mean, std


def most_popular_scorer(examples: Sequence[SelectionExample]) -> list[np.ndarray]:
    # candidate lists are already in popularity order; the appended truth ranks last
    return [-np.arange(len(e.candidates), dtype=np.float64) for e in examples]


def cmd_eval(cfg: RunConfig, checkpoints: Sequence[str] = (), split: str = "test",
             baseline: bool = False) -> RunReport:
    t0 = time.perf_counter()
    examples = load_split(cfg.workdir, cfg.task, split)
    if not examples:
        raise PipelineError("empty_split", f"{split} split has no {cfg.task} examples")
    paths = list(checkpoints) or [str(checkpoint_path(cfg))]
    metrics, rows = {}, []
    for i, p in enumerate(paths):
        if not os.path.exists(p):
            raise PipelineError("missing_checkpoint", f"{p} not found")
        ck = ckpt.load(p)
        if ck.task != cfg.task:
            raise PipelineError("task_mismatch",
                                f"checkpoint {p} is for task {ck.task!r}, not {cfg.task!r}")
        trained = RunConfig(**ck.config)
        row = evaluate(cfg.task, ck.params, examples, trained)
        rows.append(row)
        metrics["model" if len(paths) == 1 else f"model[{i}]"] = row
    if len(rows) > 1:
        metrics["mean"], metrics["std"] = _aggregate(rows)
    if baseline:
        if cfg.task == "retention":
            metrics["majority"] = majority_baseline(examples).report()
        else:
            metrics["most_popular"] = eval_mrr(examples, most_popular_scorer).report()
    report = RunReport("eval", cfg.to_dict(), metrics,
                       corpus={"split": split, "examples": len(examples),
                               "checkpoints": len(paths)},
                       wall_time=time.perf_counter() - t0)
    report.write(cfg.workdir, f"report_eval_{cfg.task}")
    return report


# --------------------------------------------------------------------------
# predict


def cmd_predict(checkpoint: str, query: str, past: Sequence[tuple[str, Sequence[str]]] = (),
                candidates: Sequence[str] = (), workdir: str | None = None) -> list[tuple]:
    """Retention: ``(word, p_retention)`` rows.  Selection: ``(candidate, score)``
    rows sorted by descending score.

    ``past`` is a list of (query, clicked urls) pairs, most recent first.
    """
    words = tokenize(query)
    if not words:
        raise PipelineError("empty_query", "query has no words")
    ck = ckpt.load(checkpoint)
    cfg = RunConfig(**ck.config)
    vocab = load_vocab(workdir or cfg.workdir)
    steps = [PastStep(vocab.encode(tokenize(q)), url_chars(urls, cfg.max_url_chars))
             for q, urls in past][: cfg.context]
    steps = [s for s in steps if s.query_ids]
    ids = vocab.encode(words)
    if ck.task == "retention":
        ex = RetentionExample(ids, words, steps, [1] * len(words))
        probs = predict_retention(ex, ck.params, cfg.ablation, cfg.context,
                                  cfg.chronological_context)
        return [(w, float(p)) for w, p in zip(words, probs[:, 1])]
    cands = [query_key(tokenize(c)) for c in candidates]
    cands = [c for c in cands if c]
    if not cands:
        raise PipelineError("no_candidates", "selection needs at least one candidate")
    ex = SelectionExample(ids, words, steps, cands, [vocab.encode(c.split()) for c in cands], 0)
    scores = model_scorer(ck.params, cfg.ablation, cfg.context, cfg.chronological_context)([ex])[0]
    order = sorted(range(len(cands)), key=lambda i: (-scores[i], i))
    return [(cands[i], float(scores[i])) for i in order]
