"""Hermetic self-test: gradient checks and core invariants on tiny inputs.

Runs in a few seconds with no files outside a temporary directory and no
network. ``run_selftest()`` prints one line per check and returns True when
every check passes.
"""
from __future__ import annotations

import os
import tempfile
import time

import numpy as np

from fimp import kernels
from fimp.attention import TransformerBlockParams, cross_attend, encoder_forward
from fimp.baselines import GATLayer, gat_attention
from fimp.errors import FormatError
from fimp.foundation import (
    FoundationModel,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    transfer_to_message_creator,
)
from fimp.graph import Graph
from fimp.harness.config import RunConfig
from fimp.harness.runners import run_reconstruction
from fimp.message_passing import FimpModel, MessageCreator, ReadoutHead, create_message, fimp_forward, readout
from fimp.numerics import (
    Rng,
    Tensor,
    gelu,
    grad_check,
    grad_check_params,
    layer_norm,
    no_grad,
    precision,
    segment_mean,
    segment_softmax,
    softmax_rows,
)
from fimp.tokenizer import Tokenizer

GRAD_TOL = 1e-4


def _tiny_fimp(rng, d=4, f=3, num_layers=2):
    tok = Tokenizer("scalar", d, f, rng.child(0))
    creator = MessageCreator.fresh(d, 2, 1, rng.child(1))
    head = ReadoutHead("regression", d, 1, rng.child(2))
    return FimpModel(tok, creator, num_layers, head, rng.child(3))


def check_op_gradients():
    rng = Rng(11)
    x = rng.normal((3, 4))
    w = rng.normal((4, 4))
    order = np.array([0, 2, 1, 3, 4], dtype=np.int64)
    indptr = np.array([0, 2, 2, 5], dtype=np.int64)
    seg_x = rng.normal((5, 2))
    g, b = rng.normal(4), rng.normal(4)
    cases = {
        "matmul": lambda t: ((t @ Tensor(w)) ** 2).sum(),
        "gelu": lambda t: (gelu(t) * Tensor(w[:3])).sum(),
        "softmax": lambda t: (softmax_rows(t) * Tensor(w[:3])).sum(),
        "layer_norm": lambda t: (layer_norm(t, Tensor(g), Tensor(b)) * Tensor(w[:3])).sum(),
        "segment_mean": lambda t: (segment_mean(t, order, indptr) ** 2).sum(),
        "segment_softmax": lambda t: (segment_softmax(t, order, indptr) * Tensor(seg_x)).sum(),
    }
    worst = {}
    for name, fn in cases.items():
        point = seg_x if name.startswith("segment") else x
        worst[name] = grad_check(fn, point)
    top = max(worst, key=worst.get)
    return max(worst.values()) <= GRAD_TOL, f"worst {top} {worst[top]:.2e}"


def check_fimp_gradients():
    with precision(np.float64):
        model = _tiny_fimp(Rng(3))
        graph = Graph(3, np.zeros((3, 2)), [(0, 1), (1, 0), (1, 2), (2, 1), (0, 2)]).with_self_loops()
        values = Rng(4).normal((3, 3, 1))
        ids = np.tile(np.arange(3), (3, 1))
        mask = np.array([[True, False, False], [False, True, False], [False, False, True]])

        def loss():
            tokens = model.tokenizer.embed(values, ids, mask)
            states, _ = fimp_forward(graph, tokens, model)
            return ((readout(states, model.head, "regression") - Tensor(values)) ** 2).mean()

        err = grad_check_params(loss, model.parameters())
    return err <= GRAD_TOL, f"max rel err {err:.2e}"


def check_transfer_equivalence():
    rng = Rng(5)
    tok = {"variant": "scalar", "d": 8, "f_max": 6, "c": 1}
    source = FoundationModel.build(tok, 2, 2, rng)
    creator = transfer_to_message_creator(source)
    with no_grad():
        for trial in range(20):
            x = Tensor(rng.child(trial).normal((6, 8)))
            if not np.array_equal(create_message(x, x, creator).data, encoder_forward(x, source.blocks)[0].data):
                return False, f"mismatch on input {trial}"
    return True, "20 random inputs bitwise equal"


def check_attention_laws():
    rng = Rng(6)
    params = TransformerBlockParams(8, 2, rng).attn
    dest, src = rng.normal((5, 8)), rng.normal((4, 8))
    with no_grad():
        _, w = cross_attend(Tensor(dest), Tensor(src), params)
        perm = rng.permutation(5)
        a = cross_attend(Tensor(dest), Tensor(src), params)[0].data
        b = cross_attend(Tensor(dest[perm]), Tensor(src), params)[0].data
        g = Graph(4, np.zeros((4, 2)), [(0, 1), (2, 1), (3, 1), (1, 0), (2, 3)])
        alpha, _, index = gat_attention(Tensor(rng.normal((4, 3))), g, GATLayer(3, 5, rng.child(1)))
        sums = np.zeros(4)
        np.add.at(sums, index.dst, alpha.data[:, 0])
    ok = (np.abs(w.sum(axis=-1) - 1).max() <= 1e-6 and np.array_equal(a[perm], b)
          and np.abs(sums - 1).max() <= 1e-6)
    return ok, "rows sum to 1, dest equivariance exact, GAT alpha sums to 1"


def check_aggregation_invariance():
    rng = Rng(7)
    model = _tiny_fimp(rng, num_layers=2)
    edges = np.array([(0, 1), (2, 1), (3, 1), (1, 0), (2, 3), (3, 2)])
    tokens = Tensor(rng.normal((5, 3, 4)))
    with no_grad():
        ref = fimp_forward(Graph(5, np.zeros((5, 2)), edges), tokens, model)[0].data
        shuffled = fimp_forward(Graph(5, np.zeros((5, 2)), edges[::-1]), tokens, model)[0].data
    # node 4 has no in-edges: its state is the combine projection with a zero message
    d = 4
    h = tokens.data[4]
    for k in range(2):
        h = h @ model.combine[k].data[:d]
    ok = np.array_equal(ref, shuffled) and np.allclose(ref[4], h, atol=1e-5)
    return ok, "edge storage order irrelevant; isolated node closed form holds"


def check_checkpoint_roundtrip():
    rng = Rng(8)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        model = FoundationModel.build({"variant": "scalar", "d": 8, "f_max": 5, "c": 1}, 1, 2, rng)
        save_checkpoint(model, path)
        back = model_from_checkpoint(load_checkpoint(path))
        same = all(np.array_equal(p.data, back.named_parameters()[k].data)
                   for k, p in model.named_parameters().items())
        with open(path, "rb") as fh:
            blob = fh.read()
        with open(path, "wb") as fh:
            fh.write(blob[: len(blob) // 2])
        try:
            load_checkpoint(path)
            rejected = False
        except FormatError:
            rejected = True
    return same and rejected, "bitwise round trip; truncated file rejected"


def check_kernel_backends():
    rng = Rng(9)
    values = rng.normal((40, 3))
    order = rng.permutation(40).astype(np.int64)
    indptr = np.array([0, 5, 5, 17, 40], dtype=np.int64)
    coords = rng.uniform((30, 2))
    ok = (np.array_equal(kernels.segment_sum(values, order, indptr, "python"),
                         kernels.segment_sum(values, order, indptr))
          and np.array_equal(kernels.knn(coords, 4, "python"), kernels.knn(coords, 4)))
    return ok, f"{kernels.BACKEND} backend agrees with the NumPy fallback"


def check_determinism():
    cfg = RunConfig(dataset="synth:genes", dataset_overrides={"num_nodes": 40, "f": 6}, d=8,
                    epochs=2, batch=16, mask_ratio=0.5)
    a, b = run_reconstruction(cfg).numbers(), run_reconstruction(cfg).numbers()
    return a == b, "two identical runs give identical reports"


CHECKS = [
    ("op gradients", check_op_gradients),
    ("FIMP gradients (3 nodes, K=2)", check_fimp_gradients),
    ("transfer equivalence", check_transfer_equivalence),
    ("attention laws", check_attention_laws),
    ("aggregation invariance", check_aggregation_invariance),
    ("checkpoint round trip", check_checkpoint_roundtrip),
    ("kernel backends", check_kernel_backends),
    ("determinism", check_determinism),
]


def run_selftest(out=print):
    t0 = time.perf_counter()
    passed = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report and continue
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        passed &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name:<32} {detail}")
    out(f"{'PASS' if passed else 'FAIL'}  selftest ({time.perf_counter() - t0:.1f}s)")
    return passed
