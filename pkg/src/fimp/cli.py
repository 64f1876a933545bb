"""Command-line entry point: ``fimp <verb> [options]``.

Verbs: gen, pretrain, train, eval, embed, export-attention, selftest.
Exit codes: 0 success, 1 configuration error, 2 runtime or numeric error.

Heavy imports happen inside the verb handlers so ``--threads`` can set the
BLAS thread variables before numpy loads.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

VERBS = ("gen", "pretrain", "train", "eval", "embed", "export-attention", "selftest")
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("fimp")


def build_parser():
    p = argparse.ArgumentParser(prog="fimp", description="Cross-node attention message passing experiments.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="JSON config file (run config, or pretraining config for 'pretrain')")
    p.add_argument("--out", help="output directory (checkpoint path for 'pretrain')")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field; repeatable")
    p.add_argument("--spec", help="'gen': <domain>-default or a JSON spec file")
    p.add_argument("--model", help="shorthand for --set model=...")
    p.add_argument("--ckpt", help="shorthand for --set checkpoint=...")
    p.add_argument("--weights", help="trained model weights (.npz) for eval, embed and export-attention")
    p.add_argument("--capture-attention", action="store_true",
                   help="'train': also export group-level attention matrices")
    p.add_argument("--threads", type=int, help="BLAS threads for evaluation verbs")
    return p


class _ConfigProblem(Exception):
    pass


# -- helpers ----------------------------------------------------------------

def _run_config(args):
    from fimp.harness.config import RunConfig, apply_overrides, load_config

    overrides = list(args.overrides)
    if args.model:
        overrides.append(f"model={args.model}")
    if args.ckpt:
        overrides.append(f"checkpoint={args.ckpt}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config:
        return load_config(args.config, overrides)
    return RunConfig.from_dict(apply_overrides(RunConfig().to_dict(), overrides))


def _out_dir(args, default):
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _group_labels(data):
    """Node groups for attention export: class labels, else quartiles of the first coordinate."""
    import numpy as np

    if data.labels is not None:
        return data.labels
    x = data.graph.coords[:, 0]
    return np.searchsorted(np.quantile(x, [0.25, 0.5, 0.75]), x, side="right")


def _check_transfer(cfg):
    """Log whether the transferred creator reproduces the foundation encoder on a random input."""
    import numpy as np

    from fimp.foundation import load_foundation_model, transfer_to_message_creator
    from fimp.message_passing import create_message
    from fimp.attention import encoder_forward
    from fimp.numerics import Rng, Tensor, no_grad

    source = load_foundation_model(cfg.checkpoint)
    creator = transfer_to_message_creator(source)
    x = Tensor(Rng(cfg.seed, (5,)).normal((source.tokenizer.f_max, source.tokenizer.d)))
    with no_grad():
        same = np.array_equal(create_message(x, x, creator).data, encoder_forward(x, source.blocks)[0].data)
    log.info("transfer equivalence check: %s", "passed" if same else "FAILED")
    return same


# -- verbs ------------------------------------------------------------------

def cmd_gen(args):
    from fimp.synthdata import SynthSpec, default_spec, write_dataset
    from fimp.harness.config import apply_overrides

    spec_arg = args.spec or "genes-default"
    if spec_arg.endswith("-default"):
        spec = default_spec(spec_arg[: -len("-default")])
    elif os.path.exists(spec_arg):
        with open(spec_arg) as fh:
            data = json.load(fh)
        spec = SynthSpec(**data.get("spec", data))
    else:
        raise _ConfigProblem(f"spec: {spec_arg!r} is neither <domain>-default nor an existing file")
    changes = {}
    for item in args.overrides:
        key, _, raw = item.partition("=")
        if not hasattr(spec, key):
            raise _ConfigProblem(f"{key}: unknown spec field")
        try:
            changes[key] = json.loads(raw)
        except json.JSONDecodeError:
            changes[key] = raw
    if args.seed is not None:
        changes["seed"] = args.seed
    spec = spec.replace(**changes)
    path = write_dataset(spec, _out_dir(args, "data"))
    print(path)
    return 0


def cmd_pretrain(args):
    from fimp.harness.pretraining import PretrainRunConfig, run_pretraining

    data = {}
    if args.config:
        with open(args.config) as fh:
            data = json.load(fh)
    for item in args.overrides:
        key, _, raw = item.partition("=")
        try:
            data[key] = json.loads(raw)
        except json.JSONDecodeError:
            data[key] = raw
    if args.seed is not None:
        data["seed"] = args.seed
    try:
        pcfg = PretrainRunConfig.from_dict(data)
    except TypeError as exc:
        raise _ConfigProblem(f"config: {exc}") from None
    out = args.out or "foundation.ckpt"
    _, result, seconds = run_pretraining(pcfg, out)
    with open(out + ".json", "w") as fh:
        json.dump({"config": pcfg.to_dict(), "step_losses": result.step_losses, "seconds": seconds}, fh)
    print(f"{out}  final loss {result.step_losses[-1]:.4f}  ({seconds:.1f}s)")
    return 0


def cmd_train(args):
    from fimp.harness.analysis import capture_attention, export_attention, write_matrix
    from fimp.harness.config import save_config
    from fimp.harness.runners import RUNNERS, save_state

    cfg = _run_config(args)
    if args.capture_attention:
        cfg = cfg.replace(capture_attention=True)
    out = _out_dir(args, "runs")
    if cfg.model == "fimp-foundation" and cfg.checkpoint and os.path.exists(cfg.checkpoint):
        _check_transfer(cfg)
    save_config(cfg, os.path.join(out, "config.json"))
    if cfg.task == "zero_shot":
        report = RUNNERS[cfg.task](cfg)
        model = None
    else:
        report, model, data = RUNNERS[cfg.task](cfg, return_model=True)
        save_state(model, os.path.join(out, "model.npz"))
    path = report.write(out)
    if cfg.capture_attention and model is not None and hasattr(model, "creators"):
        record = capture_attention(model, data, data.fimp_graph(cfg.self_loops))
        mats = export_attention(record, _group_labels(data))
        write_matrix(os.path.join(out, "attention_groups.csv"), mats["group"], "dst_group")
    _summarize(report)
    print(path)
    return 0


def cmd_eval(args):
    from fimp.harness.runners import RUNNERS

    cfg = _run_config(args)
    if cfg.task == "zero_shot":
        report = RUNNERS[cfg.task](cfg)
    else:
        if not args.weights:
            raise _ConfigProblem("weights: eval needs --weights from a previous train run")
        report = RUNNERS[cfg.task](cfg, state=args.weights)
    path = report.write(_out_dir(args, "runs"), "eval")
    _summarize(report)
    print(path)
    return 0


def _trained(args):
    from fimp.harness.data import build_baseline, build_fimp, load_dataset
    from fimp.harness.config import FIMP_KINDS
    from fimp.harness.runners import load_state
    from fimp.numerics import Rng

    cfg = _run_config(args)
    if cfg.model not in FIMP_KINDS:
        raise _ConfigProblem(f"model: exports need a FIMP model, got {cfg.model!r}")
    data = load_dataset(cfg)
    rng = Rng(cfg.seed)
    n, f, c = data.values.shape
    if cfg.task == "reconstruction":
        model = build_fimp(cfg, data, "regression", c, rng.child(1).child(0))
    else:
        model = build_fimp(cfg, data, "classification", max(data.num_classes, 1), rng.child(1, 0))
    if args.weights:
        load_state(model, args.weights)
    return cfg, model, data


def cmd_embed(args):
    from fimp.harness.analysis import export_embeddings

    cfg, model, data = _trained(args)
    out = _out_dir(args, "runs")
    print(export_embeddings(model, "feature-table", os.path.join(out, "feature_table.csv")))
    print(export_embeddings(model, "node", os.path.join(out, "node_embeddings.csv"), data,
                            data.fimp_graph(cfg.self_loops)))
    return 0


def cmd_export_attention(args):
    from fimp.harness.analysis import capture_attention, export_attention, write_matrix

    cfg, model, data = _trained(args)
    out = _out_dir(args, "runs")
    mats = export_attention(capture_attention(model, data, data.fimp_graph(cfg.self_loops)), _group_labels(data))
    print(write_matrix(os.path.join(out, "attention_groups.csv"), mats["group"], "dst_group"))
    return 0


def cmd_selftest(args):
    from fimp.selftest import run_selftest

    return 0 if run_selftest() else 2


def _summarize(report):
    fields = [("test_r2", report.test_r2), ("test_mse", report.test_mse),
              ("accuracy", report.accuracy), ("macro_f1", report.macro_f1)]
    print("  ".join(f"{k}={v:.4f}" for k, v in fields if v is not None) + f"  ({report.wall_time:.1f}s)")


HANDLERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "embed": cmd_embed, "export-attention": cmd_export_attention, "selftest": cmd_selftest}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    if args.threads is not None:
        if args.threads < 1:
            print("error: threads: must be >= 1", file=sys.stderr)
            return 1
        for var in THREAD_VARS:
            os.environ[var] = str(args.threads)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)

    from fimp.errors import ConfigError, DivergenceError, FimpError

    try:
        return HANDLERS[args.verb](args)
    except (ConfigError, _ConfigProblem) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, DivergenceError, FimpError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
