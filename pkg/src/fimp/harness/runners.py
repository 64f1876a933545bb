"""Task runners: masked reconstruction, node classification and zero-shot probing.

All runners are transductive: the whole graph is visible as input and the
train/val/test node split only decides which nodes contribute to the loss,
the early-stopping criterion and the reported metrics. One epoch is a pass
over the training nodes in minibatches of ``cfg.batch``; FIMP computes only
the receptive field of each batch. Training stops after ``patience`` epochs without
a validation improvement and test metrics come from the best-validation
parameters.
"""
from __future__ import annotations

import os
import time

import numpy as np

from fimp.errors import ConfigError, DivergenceError
from fimp.foundation import load_foundation_model
from fimp.harness import metrics
from fimp.harness.config import FIMP_KINDS, MetricsReport
from fimp.harness.data import build_baseline, build_fimp, fill_masked, load_dataset, make_splits
from fimp.message_passing import fimp_forward, readout
from fimp.numerics import Adam, Linear, Rng, Tensor, cross_entropy, mse, no_grad, precision, take_rows
from fimp.tokenizer import sample_masks


def _snapshot(module):
    return {k: p.data.copy() for k, p in module.named_parameters().items()}


def train_early_stopping(model, params, loss_fn, val_fn, train_nodes, cfg, report, rng):
    """Adam over node minibatches with best-validation restore; fills the report's curves.

    ``loss_fn(batch, tag)`` returns the loss on the sorted node ids ``batch``;
    ``tag`` is a unique integer per step for drawing masks.
    """
    opt = Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    best, best_state, waited = np.inf, _snapshot(model), 0
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.child(epoch).permutation(len(train_nodes))
        losses = []
        for start in range(0, len(perm), cfg.batch):
            batch = np.sort(train_nodes[perm[start:start + cfg.batch]])
            opt.zero_grad()
            loss = loss_fn(batch, step + 1)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"training loss became {value} at step {step}", step)
            loss.backward()
            opt.step()
            losses.append(value)
            step += 1
        model.eval()
        with no_grad():
            val = float(val_fn())
        report.train_loss.append(float(np.mean(losses)))
        report.val_loss.append(val)
        if val < best:
            best, best_state, waited = val, _snapshot(model), 0
            report.best_epoch = epoch
        else:
            waited += 1
            if waited > cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return best


def save_state(model, path):
    """Write every named parameter of ``model`` to an ``.npz`` file (write-then-rename)."""
    tmp = path + ".tmp.npz"
    np.savez(tmp, **model.state_dict())
    os.replace(tmp, path)
    return path


def load_state(model, state):
    """Load a parameter dict, or an ``.npz`` path written by :func:`save_state`."""
    if isinstance(state, (str, os.PathLike)):
        if not os.path.exists(state):
            raise FileNotFoundError(f"weights: {state} does not exist")
        with np.load(state) as blob:
            state = {k: blob[k] for k in blob.files}
    expected = set(model.named_parameters())
    if set(state) != expected:
        missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
        raise ConfigError(f"weights: parameter names differ from the model (missing {missing}, unexpected {extra})")
    model.load_state_dict(state)


def _trainable(model, cfg):
    if cfg.freeze_tables and hasattr(model, "tokenizer"):
        frozen = {id(p) for p in model.tokenizer.parameters()}
        return [p for p in model.parameters() if id(p) not in frozen]
    return model.parameters()


# -- reconstruction ---------------------------------------------------------

class _Reconstructor:
    """Uniform ``predict(mask, training)`` over FIMP and vector baselines."""

    def __init__(self, cfg, data, rng):
        self.cfg, self.data = cfg, data
        n, f, c = data.values.shape
        self.is_fimp = cfg.model in FIMP_KINDS
        if self.is_fimp:
            self.model = build_fimp(cfg, data, "regression", c, rng.child(0))
            self.graph = data.fimp_graph(cfg.self_loops)
        else:
            self.model = build_baseline(cfg, data, f * c, rng.child(0))
        self._fill_rng = rng.child(1)
        self._eval_inputs = None

    def predict(self, mask, nodes=None, training=False, tag=0, capture=False):
        """Predictions ``(len(nodes), f, c)`` for sorted ``nodes`` (all nodes when None)."""
        data, m = self.data, self.model
        if self.is_fimp:
            tokens = m.tokenizer.embed(data.values, data.ids, mask, data.coords)
            states, cap = fimp_forward(self.graph, tokens, m, capture=capture, training=training,
                                       targets=nodes)
            return readout(states, m.head, "regression"), cap
        if tag == 0 and self._eval_inputs is not None:
            x = self._eval_inputs
        else:
            x = fill_masked(data.values, mask, self.cfg.baseline_fill, self._fill_rng.child(tag))
            if tag == 0:
                self._eval_inputs = x
        n, f, c = data.values.shape
        out = m(x.reshape(n, f * c), data.graph, training=training).reshape((n, f, c))
        return (out if nodes is None else take_rows(out, nodes)), None


def run_reconstruction(cfg, state=None, return_model=False):
    """Masked-feature reconstruction; MSE and R^2 over masked test positions only.

    With ``state`` (a parameter dict from a previous run) training is skipped
    and the loaded model is evaluated. ``return_model`` also returns the
    trained model and the :class:`Dataset`.
    """
    t0 = time.perf_counter()
    data = load_dataset(cfg)
    rng = Rng(cfg.seed)
    train, val, test = make_splits(data.num_nodes, cfg.splits, rng.child(0))
    valid = np.ones(data.values.shape[:2], dtype=bool)
    runner = _Reconstructor(cfg, data, rng.child(1))
    eval_mask = sample_masks(valid, cfg.mask_ratio, rng.child(2))
    report = MetricsReport("reconstruction", cfg.model, cfg.seed, cfg.config_hash())

    def loss_fn(batch, tag):
        mask = sample_masks(valid, cfg.mask_ratio, rng.child(3, tag))
        pred, _ = runner.predict(mask, batch, training=True, tag=tag)
        return mse(pred, data.values[batch], mask[batch][..., None])

    def val_fn():
        # tag 0 marks the fixed evaluation mask
        pred, _ = runner.predict(eval_mask, val, tag=0)
        return mse(pred, data.values[val], eval_mask[val][..., None]).data

    if state is None:
        train_early_stopping(runner.model, _trainable(runner.model, cfg), loss_fn, val_fn, train, cfg,
                             report, rng.child(4))
    else:
        load_state(runner.model, state)
    with no_grad():
        pred = runner.predict(eval_mask, test, tag=0)[0].data
    sel = eval_mask[test]
    p, t = pred[sel], data.values[test][sel]
    report.test_mse = metrics.mse(p, t)
    report.test_r2 = metrics.r2_score(p, t)
    report.extra["val_mse_best"] = float(min(report.val_loss)) if report.val_loss else None
    report.extra["num_masked_test"] = int(sel.sum())
    report.wall_time = time.perf_counter() - t0
    return (report, runner.model, data) if return_model else report


# -- classification ---------------------------------------------------------

def _require_labels(data):
    if data.labels is None:
        raise ConfigError("dataset: node labels are required for this task")


def run_classification(cfg, state=None, return_model=False):
    """Cross-entropy node classification; accuracy and macro-F1 on the test split.

    ``state`` and ``return_model`` behave as in :func:`run_reconstruction`.
    """
    t0 = time.perf_counter()
    data = load_dataset(cfg)
    _require_labels(data)
    rng = Rng(cfg.seed)
    train, val, test = make_splits(data.num_nodes, cfg.splits, rng.child(0))
    k = max(data.num_classes, 1)
    n, f, c = data.values.shape
    if cfg.model in FIMP_KINDS:
        model = build_fimp(cfg, data, "classification", k, rng.child(1, 0))
        graph = data.fimp_graph(cfg.self_loops)

        def logits_fn(nodes, training=False):
            tokens = model.tokenizer.embed(data.values, data.ids, None, data.coords)
            states, _ = fimp_forward(graph, tokens, model, training=training, targets=nodes)
            return readout(states, model.head, "classification")
    else:
        model = build_baseline(cfg, data, k, rng.child(1, 0))
        flat = data.values.reshape(n, f * c)

        def logits_fn(nodes, training=False):
            return take_rows(model(flat, data.graph, training=training), nodes)

    labels = data.labels
    report = MetricsReport("classification", cfg.model, cfg.seed, cfg.config_hash())

    def loss_fn(batch, tag):
        return cross_entropy(logits_fn(batch, True), labels[batch])

    def val_fn():
        if not len(val):
            return 0.0
        return cross_entropy(logits_fn(val), labels[val]).data

    if state is None:
        train_early_stopping(model, _trainable(model, cfg), loss_fn, val_fn, train, cfg, report, rng.child(4))
    else:
        load_state(model, state)
    with no_grad():
        pred = np.argmax(logits_fn(test).data, axis=1)
    report.accuracy = metrics.accuracy(pred, labels[test])
    report.macro_f1 = metrics.macro_f1(pred, labels[test])
    major = metrics.majority_class(labels[train], k)
    report.extra["majority_accuracy"] = metrics.accuracy(np.full(len(test), major), labels[test])
    report.extra["majority_macro_f1"] = metrics.macro_f1(np.full(len(test), major), labels[test])
    report.wall_time = time.perf_counter() - t0
    return (report, model, data) if return_model else report


# -- zero-shot --------------------------------------------------------------

def linear_probe(train_x, train_y, test_x, num_classes, steps=500, lr=0.1, seed=0):
    """Softmax-linear classifier fit by full-batch Adam on standardized features.

    Returns predicted labels for ``test_x``.
    """
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd = np.where(sd > 1e-12, sd, 1.0)
    with precision(np.float64):
        xs = Tensor((train_x - mu) / sd)
        head = Linear(train_x.shape[1], num_classes, Rng(seed, (7,)))
        for p in head.parameters():
            p.data = np.zeros_like(p.data)
        opt = Adam(head.parameters(), lr=lr)
        for _ in range(steps):
            opt.zero_grad()
            loss = cross_entropy(head(xs), train_y)
            loss.backward()
            opt.step()
        with no_grad():
            logits = head(Tensor((test_x - mu) / sd)).data
    return np.argmax(logits, axis=1)


def fimp_embeddings(model, data, graph):
    """Mean-pooled final node states ``(n, d)`` with no masking."""
    with no_grad():
        tokens = model.tokenizer.embed(data.values, data.ids, None, data.coords)
        states, _ = fimp_forward(graph, tokens, model)
    return states.data.mean(axis=1)


def run_zero_shot(cfg):
    """Embed nodes with an untrained FIMP whose creator and tokenizer come from a
    pretrained checkpoint, then fit only a linear probe.

    Arms (in ``extra``): random-init FIMP, foundation model without the graph,
    and the majority class. The headline accuracy/F1 is the pretrained arm.
    """
    t0 = time.perf_counter()
    if not cfg.checkpoint:
        raise ConfigError("checkpoint: zero-shot evaluation needs a pretrained checkpoint path")
    data = load_dataset(cfg)
    _require_labels(data)
    rng = Rng(cfg.seed)
    k = max(data.num_classes, 1)
    perm = rng.child(0).permutation(data.num_nodes)
    cut = int(np.floor(cfg.probe_fraction * data.num_nodes + 1e-9))
    tr, te = np.sort(perm[:cut]), np.sort(perm[cut:])
    labels = data.labels

    pre = build_fimp(cfg.replace(model="fimp-foundation"), data, "classification", k, rng.child(1),
                     combine_init="average")
    foundation = load_foundation_model(cfg.checkpoint)
    tok = pre.tokenizer
    rand_cfg = cfg.replace(model="fimp-base", d=tok.d, combine=tok.combine,
                           num_heads=pre.creator(0).blocks[0].attn.num_heads,
                           num_blocks=len(pre.creator(0).blocks))
    rand = build_fimp(rand_cfg, data, "classification", k, rng.child(2), combine_init="average")

    with no_grad():
        fm_states = foundation.encode(data.values, data.ids, coords=data.coords).data.mean(axis=1)
    graph = data.fimp_graph(cfg.self_loops)
    arms = {"pretrained": fimp_embeddings(pre, data, graph),
            "random_init": fimp_embeddings(rand, data, graph),
            "foundation_only": fm_states}
    report = MetricsReport("zero_shot", cfg.model, cfg.seed, cfg.config_hash())
    for name, emb in arms.items():
        pred = linear_probe(emb[tr], labels[tr], emb[te], k, cfg.probe_steps, cfg.probe_lr, cfg.seed)
        report.extra[f"{name}_accuracy"] = metrics.accuracy(pred, labels[te])
        report.extra[f"{name}_macro_f1"] = metrics.macro_f1(pred, labels[te])
    major = metrics.majority_class(labels[tr], k)
    report.extra["majority_accuracy"] = metrics.accuracy(np.full(len(te), major), labels[te])
    report.accuracy = report.extra["pretrained_accuracy"]
    report.macro_f1 = report.extra["pretrained_macro_f1"]
    report.wall_time = time.perf_counter() - t0
    return report


RUNNERS = {"reconstruction": run_reconstruction, "classification": run_classification,
           "zero_shot": run_zero_shot}


def run(cfg):
    return RUNNERS[cfg.task](cfg)


def run_seeds(cfg, seeds=range(5)):
    """Run ``cfg`` for each seed; returns the reports and ``{metric: (mean, std)}``."""
    reports = [run(cfg.replace(seed=s)) for s in seeds]
    summary = {}
    for key in ("test_mse", "test_r2", "accuracy", "macro_f1"):
        vals = [getattr(r, key) for r in reports]
        if all(v is not None for v in vals):
            summary[key] = metrics.mean_std(vals)
    return reports, summary
