import json
import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import f1_score, mean_squared_error
from sklearn.metrics import r2_score as sk_r2

from fimp.errors import ConfigError
from fimp.graph import Graph, save_graph
from fimp.harness import metrics
from fimp.harness.analysis import capture_attention, export_attention, export_embeddings, read_matrix
from fimp.harness.config import MetricsReport, RunConfig, apply_overrides, load_config, save_config
from fimp.harness.data import Dataset, build_fimp, load_dataset, make_splits
from fimp.harness.runners import (
    linear_probe,
    load_state,
    run_classification,
    run_reconstruction,
    run_zero_shot,
    save_state,
)
from fimp.message_passing import AttentionCapture
from fimp.numerics import Rng
from fimp.synthdata import default_spec, gen_genes, gen_patches, images_from_features, write_dataset

TINY = dict(dataset="synth:genes", dataset_overrides={"num_nodes": 60, "f": 6}, d=8, epochs=3, batch=16)


# -- metrics ----------------------------------------------------------------

@given(st.integers(0, 2**31), st.integers(2, 60))
def test_regression_metrics_match_sklearn(seed, n):
    rng = Rng(seed)
    pred, target = rng.normal(n), rng.normal(n)
    assert metrics.r2_score(pred, target) == pytest.approx(sk_r2(target, pred), rel=1e-9, abs=1e-12)
    assert metrics.mse(pred, target) == pytest.approx(mean_squared_error(target, pred), rel=1e-12)


@given(st.integers(0, 2**31), st.integers(1, 60), st.integers(1, 5))
def test_macro_f1_matches_sklearn(seed, n, k):
    rng = Rng(seed)
    pred, target = rng.integers(0, k, n), rng.integers(0, k, n)
    assert metrics.macro_f1(pred, target) == pytest.approx(f1_score(target, pred, average="macro"), abs=1e-12)
    assert metrics.accuracy(pred, target) == pytest.approx(np.mean(pred == target))


def test_r2_reference_predictions():
    target = Rng(0).normal(50)
    assert metrics.r2_score(np.full(50, target.mean()), target) == pytest.approx(0.0, abs=1e-12)
    assert metrics.r2_score(target, target) == 1.0 and metrics.mse(target, target) == 0.0
    assert metrics.r2_score(np.ones(3), np.ones(3)) == 1.0
    assert metrics.mean_std([1.0, 3.0]) == (2.0, pytest.approx(np.sqrt(2)))
    assert metrics.mean_std([4.0]) == (4.0, 0.0)
    assert metrics.majority_class([2, 1, 2, 0]) == 2


# -- config and records ----------------------------------------------------

@given(st.integers(1, 1000), st.integers(0, 2**31))
def test_splits_disjoint_and_seed_stable(n, seed):
    parts = make_splits(n, (0.7, 0.1, 0.2), Rng(seed))
    joined = np.concatenate(parts)
    assert len(joined) == n and len(np.unique(joined)) == n
    assert all(np.array_equal(a, b) for a, b in zip(parts, make_splits(n, (0.7, 0.1, 0.2), Rng(seed))))
    assert len(parts[0]) == int(np.floor(0.7 * n + 1e-9))


def test_config_defaults_and_validation():
    cfg = RunConfig()
    assert cfg.splits == (0.7, 0.1, 0.2) and cfg.patience == 10
    for bad in ({"task": "ranking"}, {"model": "mlp"}, {"splits": (0.5, 0.5, 0.5)},
                {"mask_ratio": 1.0}, {"epochs": 0}, {"schema_version": 2}, {"baseline_fill": "median"}):
        with pytest.raises(ConfigError, match=next(iter(bad))):
            RunConfig(**bad)
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"learning_rate": 0.1})


def test_overrides_coerce_types():
    data = apply_overrides(RunConfig().to_dict(), ["lr=0.01", "epochs=4", "self_loops=false",
                                                    "splits=[0.6,0.2,0.2]", "dataset_overrides.noise=0.0"])
    cfg = RunConfig.from_dict(data)
    assert cfg.lr == 0.01 and cfg.epochs == 4 and cfg.self_loops is False
    assert cfg.splits == (0.6, 0.2, 0.2) and cfg.dataset_overrides == {"noise": 0.0}
    for bad in (["lr"], ["nope=1"], ["epochs=four"], ["self_loops=maybe"]):
        with pytest.raises(ConfigError):
            apply_overrides(RunConfig().to_dict(), bad)


def test_config_file_round_trip_and_hash(tmp_path):
    cfg = RunConfig(**TINY)
    save_config(cfg, tmp_path / "c.json")
    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert cfg.replace(seed=1).config_hash() != cfg.config_hash()
    data = json.loads((tmp_path / "c.json").read_text())
    data.pop("schema_version")
    (tmp_path / "c.json").write_text(json.dumps(data))
    with pytest.raises(ConfigError, match="schema_version"):
        load_config(tmp_path / "c.json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_metrics_report_write_read(tmp_path):
    rep = MetricsReport("reconstruction", "gcn", 1, "abc", [1.0, 0.5], [1.1, 0.6], 1, 0.2, 0.8, wall_time=3.0)
    path = rep.write(tmp_path)
    assert MetricsReport.read(path) == rep
    lines = (tmp_path / "metrics_curve.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and lines[2] == "1,0.5,0.6"
    assert rep.numbers() == {k: v for k, v in rep.to_dict().items() if k != "wall_time"}


# -- runners ---------------------------------------------------------------

def test_missing_dataset_and_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_reconstruction(RunConfig(dataset=str(tmp_path / "none.json")))
    with pytest.raises(ConfigError):
        run_reconstruction(RunConfig())
    with pytest.raises(FileNotFoundError):
        run_reconstruction(RunConfig(**TINY, model="fimp-foundation", checkpoint=str(tmp_path / "x.ckpt")))
    with pytest.raises(ConfigError, match="checkpoint"):
        run_zero_shot(RunConfig(**TINY, task="zero_shot"))
    with pytest.raises(ConfigError, match="labels"):
        run_classification(RunConfig(dataset="synth:signal", epochs=1))


@pytest.mark.parametrize("model", ["fimp-base", "gcn", "sage", "gin", "gat"])
def test_reconstruction_runs_and_reports(model):
    rep = run_reconstruction(RunConfig(**TINY, model=model))
    assert len(rep.train_loss) == len(rep.val_loss) == 3
    assert 0 <= rep.best_epoch < 3 and rep.test_mse >= 0
    assert rep.extra["val_mse_best"] == min(rep.val_loss)


@pytest.mark.parametrize("fill", ["noise", "mean", "interpolate"])
def test_baseline_imputation_fills(fill):
    cfg = RunConfig(dataset="synth:signal", dataset_overrides={"num_nodes": 20}, model="gcn", d=8,
                    epochs=2, baseline_fill=fill)
    assert np.isfinite(run_reconstruction(cfg).test_r2)


def test_state_round_trip_reproduces_report(tmp_path):
    cfg = RunConfig(**TINY)
    rep, model, _ = run_reconstruction(cfg, return_model=True)
    path = save_state(model, str(tmp_path / "m.npz"))
    again = run_reconstruction(cfg, state=path)
    assert (again.test_mse, again.test_r2) == (rep.test_mse, rep.test_r2)
    with pytest.raises(FileNotFoundError):
        load_state(model, str(tmp_path / "none.npz"))
    with pytest.raises(ConfigError, match="parameter names"):
        load_state(model, {"x": np.zeros(1)})


def test_single_class_classification_is_perfect():
    cfg = RunConfig(task="classification", model="gcn", dataset="synth:genes",
                    dataset_overrides={"num_nodes": 60, "num_classes": 1}, d=8, epochs=2)
    rep = run_classification(cfg)
    assert rep.accuracy == 1.0 and rep.macro_f1 == 1.0


def test_shuffled_labels_give_chance_accuracy(tmp_path):
    spec = default_spec("genes", num_nodes=2000, f=8)
    g, _ = gen_genes(spec)
    shuffled = Rng(5).permutation(np.arange(g.num_nodes) % 4)  # balanced, independent of features
    path = save_graph(Graph(g.num_nodes, g.coords, g.edges, shuffled, g.node_features, g.feature_ids),
                      str(tmp_path / "shuffled.json"))
    accs = [run_classification(RunConfig(task="classification", model="sage", dataset=path, d=16,
                                         epochs=30, seed=s)).accuracy for s in range(3)]
    assert abs(np.mean(accs) - 0.25) <= 0.05


def test_probe_sanity():
    rng = Rng(0)
    labels = rng.integers(0, 4, 4000)
    onehot = np.eye(4)[labels]
    assert np.mean(linear_probe(onehot[:3000], labels[:3000], onehot[3000:], 4) == labels[3000:]) == 1.0
    noise = rng.normal((4000, 8))
    acc = np.mean(linear_probe(noise[:3000], labels[:3000], noise[3000:], 4) == labels[3000:])
    assert abs(acc - 0.25) <= 0.05


@pytest.mark.slow
def test_noise_free_genes_reconstruction_near_ceiling():
    rep = run_reconstruction(RunConfig(dataset="synth:genes", dataset_overrides={"noise": 0.0}))
    assert rep.test_r2 >= 0.9


@pytest.mark.slow
def test_patches_classification_beats_centroid_oracle():
    spec = default_spec("patches")
    g, labels = gen_patches(spec)
    cfg = RunConfig(task="classification", dataset="synth:patches")
    train, val, test = make_splits(g.num_nodes, cfg.splits, Rng(cfg.seed).child(0))
    x = g.node_features.reshape(g.num_nodes, -1).astype(np.float64)
    cents = np.stack([x[train][labels[train] == c].mean(axis=0) for c in range(spec.num_classes)])
    oracle = np.mean(np.argmin(((x[test, None] - cents[None]) ** 2).sum(-1), axis=1) == labels[test])
    assert run_classification(cfg).accuracy > oracle


# -- attention and embedding exports ---------------------------------------

def toy_capture():
    rng = Rng(3)
    src = np.array([0, 1, 2, 3, 0, 2])
    dst = np.array([1, 0, 3, 2, 3, 1])
    raw = rng.uniform((2, 1, 6, 2, 3, 3)) + 0.1
    layers = [[w / w.sum(-1, keepdims=True) for w in blocks] for blocks in raw]
    return AttentionCapture(src, dst, layers)


def test_group_export_matches_hand_aggregation():
    cap = toy_capture()
    groups = np.array([0, 0, 1, 1])
    got = export_attention(cap, groups)["group"]
    ref = np.zeros((2, 2))
    for a in range(2):
        for b in range(2):
            vals = []
            for e in range(6):
                if groups[cap.dst[e]] == a and groups[cap.src[e]] == b:
                    total = 0.0
                    for k in range(2):
                        total += cap.layers[k][0][e].mean()
                    vals.append(total / 2)
            ref[a, b] = np.mean(vals)
    np.testing.assert_allclose(got, ref, rtol=1e-12)
    assert ((got >= 0) & (got <= 1)).all()


def test_single_group_is_global_mean():
    cap = toy_capture()
    got = export_attention(cap, np.zeros(4, dtype=int))
    assert got["group"].shape == (1, 1)
    assert got["group"][0, 0] == pytest.approx(cap.per_edge().mean(), rel=1e-12)
    np.testing.assert_allclose(got["feature"][0, 0].sum(-1), 1.0, atol=1e-12)


def test_uniform_attention_gives_equal_entries():
    cap = toy_capture()
    cap.layers = [[np.full_like(w, 1 / 3) for w in blocks] for blocks in cap.layers]
    mats = export_attention(cap, np.array([0, 0, 1, 1]))
    assert np.allclose(mats["group"], 1 / 3)


def test_cohort_difference():
    cap = toy_capture()
    groups = np.array([0, 1, 0, 1])
    split = np.array([False, False, True, True])
    mats = export_attention(cap, groups, cohort_split=split)
    scalar = cap.per_edge().mean(axis=(1, 2))
    b_edges = split[cap.dst]
    for key, sel in (("cohort_a", ~b_edges), ("cohort_b", b_edges)):
        for a in range(2):
            for b in range(2):
                hit = sel & (groups[cap.dst] == a) & (groups[cap.src] == b)
                want = scalar[hit].mean() if hit.any() else np.nan
                np.testing.assert_equal(np.isnan(mats[key][a, b]), np.isnan(want))
                if hit.any():
                    assert mats[key][a, b] == pytest.approx(want, rel=1e-12)
    np.testing.assert_array_equal(mats["difference"], mats["cohort_b"] - mats["cohort_a"])
    with pytest.raises(ConfigError):
        export_attention(cap, groups, cohort_split=[True])
    with pytest.raises(ConfigError):
        export_attention(None, groups)


def test_capture_from_trained_model_has_stochastic_rows():
    cfg = RunConfig(**TINY)
    _, model, data = run_reconstruction(cfg, return_model=True)
    cap = capture_attention(model, data, data.fimp_graph(True))
    np.testing.assert_allclose(cap.per_edge().sum(-1), 1.0, atol=1e-5)
    assert len(cap.src) == data.fimp_graph(True).num_edges


def test_feature_table_export_round_trip(tmp_path):
    cfg = RunConfig(**TINY)
    _, model, data = run_reconstruction(cfg, return_model=True)
    path = export_embeddings(model, "feature-table", str(tmp_path / "ft.csv"))
    table = read_matrix(path)
    assert table.shape == (model.tokenizer.f_max, cfg.d)
    np.testing.assert_allclose(table, model.tokenizer.P.data, atol=1e-6)
    assert open(path).readline().startswith("feature_id,0,1")
    with pytest.raises(ConfigError):
        export_embeddings(model, "node", str(tmp_path / "n.csv"))
    with pytest.raises(ConfigError):
        export_embeddings(model, "heads", str(tmp_path / "n.csv"))


def test_node_embeddings_on_edgeless_graph_depend_on_own_features(tmp_path):
    rng = Rng(4)
    feats = rng.normal((5, 6, 1)).astype(np.float32)
    feats[3] = feats[1]
    g = Graph(5, rng.uniform((5, 2)), [], None, feats, np.tile(np.arange(6), (5, 1)))
    data = Dataset(g, "scalar", None)
    model = build_fimp(RunConfig(d=8), data, "regression", 1, Rng(0))
    path = export_embeddings(model, "node", str(tmp_path / "n.csv"), data, data.fimp_graph(True))
    emb = read_matrix(path)
    assert emb.shape == (5, 8)
    assert np.array_equal(emb[1], emb[3]) and not np.array_equal(emb[0], emb[1])


def test_load_dataset_from_written_files(tmp_path):
    for domain, variant in (("genes", "scalar"), ("patches", "patch"), ("signal", "temporal")):
        path = write_dataset(default_spec(domain, num_nodes=12), str(tmp_path), domain)
        data = load_dataset(RunConfig(dataset=path))
        assert data.variant == variant
        os.remove(path.replace(".json", ".spec.json"))
        assert load_dataset(RunConfig(dataset=path)).variant == variant
