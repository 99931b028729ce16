"""Small builders shared by several test modules."""

import numpy as np

from infodeficit.data import PastStep, RetentionExample
from infodeficit.encoders import url_chars
from infodeficit.selection import SelectionExample


def make_example(rng, vocab=8, n=None, past_len=2, with_clicks=True):
    n = n or int(rng.integers(2, 5))
    ids = [int(i) for i in rng.integers(1, vocab, size=n)]
    past = []
    for _ in range(past_len):
        q = [int(i) for i in rng.integers(1, vocab, size=int(rng.integers(1, 4)))]
        urls = ["www.ab-c.com", "x.org/q"][: int(rng.integers(0, 3))] if with_clicks else []
        past.append(PastStep(q, url_chars(urls)))
    labels = [int(b) for b in rng.integers(0, 2, size=n)]
    labels[0] = 1
    return RetentionExample(ids, [f"w{i}" for i in ids], past, labels)


def make_selection_example(rng, vocab=8, n_candidates=4, past_len=2):
    e = make_example(rng, vocab, past_len=past_len)
    cands = [[int(i) for i in rng.integers(1, vocab, size=int(rng.integers(1, 4)))]
             for _ in range(n_candidates)]
    names = [f"c{k}" for k in range(n_candidates)]
    return SelectionExample(e.current_ids, e.words, e.past, names, cands,
                            int(rng.integers(n_candidates)))


def arrays(params):
    return {k: t.values.copy() for k, t in params.named_tensors().items()}


def grad_check(build, inputs, seed=0, step=1e-5):
    """Max relative error (per input tensor) between taped and central-difference
    gradients of ``sum(build(*inputs) * R)`` for a fixed random ``R``."""
    from infodeficit.core_math import Tape, Tensor, mul, sum_all
    from oracles import numeric_grad, rel_err

    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out0 = build(*[Tensor(a) for a in inputs])
    weights = np.random.default_rng(seed + 999).standard_normal(out0.shape)

    def value():
        return float((build(*[Tensor(a) for a in inputs]).values * weights).sum())

    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    with Tape() as tape:
        loss = sum_all(mul(build(*leaves), Tensor(weights)))
    tape.backward(loss)
    errs = []
    for leaf, a in zip(leaves, inputs):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(a)
        errs.append(rel_err(analytic, numeric_grad(value, a, step)))
    return errs


def model_grad_errors(params, loss_fn, step=1e-5):
    """Per-parameter relative FD error of a scalar model loss ``loss_fn(params)``."""
    from infodeficit.core_math import Tape
    from oracles import numeric_grad, rel_err

    named = params.named_tensors()
    for t in named.values():
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn(params)
    tape.backward(loss)
    analytic = {k: t.grad.copy() for k, t in named.items()}
    out = {}
    for k, t in named.items():
        out[k] = rel_err(analytic[k], numeric_grad(lambda: loss_fn(params).item(), t.values, step))
    return out, analytic




def _op_cases():
    """(name, build, make_inputs(rng)) for every differentiable primitive."""
    from infodeficit import core_math as cm
    from infodeficit.encoders import GruParams, gru_cell

    def probs(rng, *shape):
        return rng.uniform(0.05, 0.95, shape)

    def gru(x_in, h, uz, ur, uh, mask=None):
        p = GruParams.zeros(1, h.shape[1])
        p.u_z, p.u_r, p.u_h = uz, ur, uh
        return gru_cell(x_in, h, p, mask)

    return [
        ("matmul", cm.matmul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))]),
        ("add", cm.add, lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))]),
        ("sub", cm.sub, lambda r: [r.normal(size=(5,)), r.normal(size=(5,))]),
        ("mul", cm.mul, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))]),
        ("one_minus", cm.one_minus, lambda r: [r.normal(size=(4,))]),
        ("scale", lambda x: cm.scale(x, -1.7), lambda r: [r.normal(size=(2, 2))]),
        ("sigmoid", cm.sigmoid, lambda r: [r.normal(scale=3, size=(3, 3))]),
        ("tanh", cm.tanh, lambda r: [r.normal(scale=2, size=(6,))]),
        ("softmax_rows", cm.softmax, lambda r: [r.normal(scale=2, size=(3, 4))]),
        ("softmax_vec", cm.softmax, lambda r: [r.normal(size=(5,))]),
        ("concat_vec", lambda a, b, c: cm.concat([a, b, c], axis=0),
         lambda r: [r.normal(size=(2,)), r.normal(size=(3,)), r.normal(size=(1,))]),
        ("concat_cols", lambda a, b: cm.concat([a, b], axis=1),
         lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 4))]),
        ("transpose", cm.transpose, lambda r: [r.normal(size=(2, 5))]),
        ("reshape", lambda x: cm.reshape(x, (3, 4)), lambda r: [r.normal(size=(12,))]),
        ("take_rows_dup", lambda x: cm.take_rows(x, [2, 0, 2, 2]),
         lambda r: [r.normal(size=(3, 2))]),
        ("row_slice", lambda x: cm.row_slice(x, 1, 3), lambda r: [r.normal(size=(4, 3))]),
        ("repeat_rows", lambda x: cm.repeat_rows(x, 4), lambda r: [r.normal(size=(3,))]),
        ("blend", lambda a, b: cm.blend(np.array([[1.0], [0.0], [1.0]]), a, b),
         lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))]),
        ("sum_all", cm.sum_all, lambda r: [r.normal(size=(2, 3))]),
        ("mean_all", cm.mean_all, lambda r: [r.normal(size=(2, 3))]),
        ("bce_vector", lambda p: cm.bce_loss(p, [1, 0, 1, 1]), lambda r: [probs(r, 4)]),
        ("bce_pairs", lambda p: cm.bce_loss(p, [1, 0, 0]), lambda r: [probs(r, 3, 2)]),
        ("mae", lambda p: cm.mae_loss(p, [2.0, -2.0, 2.0]),
         lambda r: [r.uniform(-1, 1, size=(3,))]),
        ("mae_weighted", lambda p: cm.mae_loss(p, [2.0, -2.0, 2.0], [1.0, 0.5, 0.25]),
         lambda r: [r.uniform(-1, 1, size=(3, 1))]),
        ("gru_cell", lambda xp, h, uz, ur, uh: gru(xp, h, uz, ur, uh),
         lambda r: [r.normal(size=(2, 9)), r.normal(size=(2, 3)),
                    *(r.normal(size=(3, 3)) for _ in range(3))]),
        ("gru_cell_masked",
         lambda xp, h, uz, ur, uh: gru(xp, h, uz, ur, uh, np.array([1.0, 0.0, 1.0])),
         lambda r: [r.normal(size=(3, 6)), r.normal(size=(3, 2)),
                    *(r.normal(size=(2, 2)) for _ in range(3))]),
    ]


OP_CASES = _op_cases()



def rich_params(seed, vocab=8, embed=3, char_embed=2, hidden=3):
    """Parameters with unit-scale weights and random biases, so that no
    gradient is vanishingly small and finite differences stay meaningful."""
    from infodeficit.model import ModelParams

    p = ModelParams.init(vocab, embed, char_embed, hidden, seed=seed, scale=1.0)
    r = np.random.default_rng(seed + 77)
    for t in p.named_tensors().values():
        if t.values.ndim == 1:
            t.values[:] = r.normal(scale=0.5, size=t.shape)
    return p


def plain_loss(task, examples):
    from infodeficit.retention import retention_loss
    from infodeficit.selection import selection_loss
    from infodeficit.training import TrainConfig

    fn = retention_loss if task == "retention" else selection_loss
    return lambda params: fn(params, examples, TrainConfig())[0]


def gru_arrays(p):
    """Plain-array view of one ``GruParams`` for the oracles."""
    return {k: getattr(p, k).values for k in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r",
                                              "w_h", "u_h", "b_h")}
