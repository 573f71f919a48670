"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary block at
the end of the run lists every criterion with its measured value.
"""
import itertools
import math
import time

import numpy as np
import pytest

from grit import tensor as T
from grit.checkpoint import load_checkpoint, save_checkpoint
from grit.data import (
    DatasetSplit,
    GeneratorConfig,
    compute_normalization,
    filter_records,
    make_splits,
    record_to_sequence,
    split_sizes,
    synthesize_dataset,
)
from grit.evaluation import aggregate, mean_baseline_rmse, score_sequences
from grit.geo import haversine_weights
from grit.gradcheck import check_gradients
from grit.layers import (
    AttentionParams,
    Conv1dParams,
    GraphSageParams,
    attention_encoder_block,
    conv1d_forward,
    graphsage_forward,
    multi_head_attention,
)
from grit.model import GritModel, ModelConfig, count_parameters, forward, sage_embeddings
from grit.tensor import Tensor
from grit.training import (
    TrainConfig,
    TrainState,
    adam_step,
    evaluate_loss,
    history_csv,
    mse_loss,
    plateau_scheduler,
    train,
)
from conftest import ACCEPTANCE_LINES, random_graph
from oracles import attention_loop, central_angle_cosines, conv1d_loop, graphsage_loop, haversine_weight_mp
from test_model import GOLDEN_PARAMETER_COUNT, make_sequence

SEEDS = range(10)


def report(number, title, ok, detail):
    line = f"criterion {number} {title}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def _grad_cases(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 6)
    sage = GraphSageParams.init(3, 4, rng)
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    yield "graphsage", lambda w=Tensor(rng.normal(size=(6, 4))): (graphsage_forward(sage, g, x) * w).sum(), \
        [sage.W1, sage.W2, x]

    att = AttentionParams.init(4, 2, 6, 0.2, rng)
    for t in (att.ff_b1, att.ff_b2, att.ln1_bias, att.ln2_bias):
        t.data[...] = rng.normal(scale=0.1, size=t.shape)
    X = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    wa = Tensor(rng.normal(size=(3, 4)))
    yield "attention", lambda: (multi_head_attention(att, X) * wa).sum(), [att.Wq, att.Wk, att.Wv, att.Wo, X]
    yield "encoder_block", \
        lambda: (attention_encoder_block(att, X, True, np.random.default_rng(seed)) * wa).sum(), \
        list(att.parameters().values()) + [X]

    conv = Conv1dParams.init(3, 2, 3, rng)
    xc = Tensor(rng.normal(size=(3, 7)), requires_grad=True)
    wc = Tensor(rng.normal(size=(2, 7)))
    yield "conv1d", lambda: (conv1d_forward(conv, xc) * wc).sum(), [conv.kernel, conv.bias, xc]

    xl = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    gain = Tensor(rng.uniform(0.5, 1.5, 5), requires_grad=True)
    bias = Tensor(rng.normal(size=5), requires_grad=True)
    wl = Tensor(rng.normal(size=(4, 5)))
    yield "layer_norm", lambda: (T.layer_norm(xl, gain, bias) * wl).sum(), [xl, gain, bias]

    pred = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    target = Tensor(rng.normal(size=(5, 3)))
    yield "mse", lambda: mse_loss(pred, target), [pred]

    cfg = ModelConfig(m=2, n=3, node_count=6, sage_out_dim=4, heads=2, d_ff=8, decoder_channels=3,
                      dropout_p=0.0)
    model = GritModel.init(cfg, seed)
    seq = make_sequence(rng, cfg)
    tm = Tensor(rng.normal(size=(6, 3)))
    yield "full_model", lambda: mse_loss(forward(model, seq), tm), list(model.parameters().values())


def test_criterion_1_gradient_integrity():
    start = time.perf_counter()
    worst, worst_abs, failures, checked = 0.0, 0.0, [], set()
    for seed in SEEDS:
        for name, fn, params in _grad_cases(seed):
            # Relative error is required wherever |grad| > 1e-6; below that the
            # central-difference roundoff (~1e-11 here) swamps it, so 1e-8 absolute applies.
            res = check_gradients(fn, params, h=1e-5, rtol=1e-4, atol=1e-8, floor=1e-6)
            worst = max(worst, res.max_rel_error)
            worst_abs = max(worst_abs, res.max_abs_error)
            checked.add(name)
            failures += [f"{name}/seed{seed}: {f}" for f in res.failures]
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60 and len(checked) == 7
    report(1, "gradient integrity", ok,
           f"{len(checked)} components x {len(SEEDS)} seeds, worst rel err {worst:.2e} where |g| > 1e-6, "
           f"worst abs err {worst_abs:.1e}, "
           f"{len(failures)} failures, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2


def test_criterion_2_layer_oracles():
    worst = {"graphsage": 0.0, "attention": 0.0, "conv1d": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        nodes = int(rng.integers(2, 9))
        g = random_graph(rng, nodes, "knn:2" if seed % 2 else "chain")
        sage = GraphSageParams.init(3, 5, rng)
        x = rng.normal(size=(nodes, 3))
        got = graphsage_forward(sage, g, Tensor(x)).data
        want = np.array(graphsage_loop(x.tolist(), g.edges.tolist(), sage.W1.data.tolist(), sage.W2.data.tolist()))
        worst["graphsage"] = max(worst["graphsage"], np.max(np.abs(got - want)))

        seq, heads = int(rng.integers(1, 7)), int(rng.choice([1, 2, 4]))
        att = AttentionParams.init(8, heads, 32, 0.0, rng)
        X = rng.normal(size=(seq, 8))
        got = multi_head_attention(att, Tensor(X)).data
        want = np.array(attention_loop(X.tolist(), att.Wq.data.tolist(), att.Wk.data.tolist(),
                                       att.Wv.data.tolist(), att.Wo.data.tolist(), heads))
        worst["attention"] = max(worst["attention"], np.max(np.abs(got - want)))

        conv = Conv1dParams.init(3, 4, int(rng.choice([1, 3, 5])), rng)
        conv.bias.data[...] = rng.normal(size=4)
        xc = rng.normal(size=(3, int(rng.integers(5, 9))))
        got = conv1d_forward(conv, Tensor(xc)).data
        want = np.array(conv1d_loop(xc.tolist(), conv.kernel.data.tolist(), conv.bias.data.tolist()))
        worst["conv1d"] = max(worst["conv1d"], np.max(np.abs(got - want)))
    ok = all(v <= 1e-12 for v in worst.values())
    report(2, "layer oracles", ok, ", ".join(f"{k} max diff {v:.1e}" for k, v in worst.items()))


# ---------------------------------------------------------------- 3


def test_criterion_3_haversine_fidelity():
    grid = [(float(a), float(b)) for a in np.linspace(-75, 80, 10) for b in np.linspace(-170, 165, 10)]
    pairs = list(itertools.combinations(range(100), 2))
    pts = np.array(grid)
    i, j = np.array(pairs).T
    dist = np.array([float(central_angle_cosines(*grid[a], *grid[b])) for a, b in pairs])
    order = np.argsort(dist, kind="stable")
    farther = np.diff(dist[order]) > 1e-12
    details, ok = [], True
    for variant in ("as_written", "standard"):
        w = haversine_weights(pts[i, 0], pts[i, 1], pts[j, 0], pts[j, 1], variant)
        exact = np.array([float(haversine_weight_mp(*grid[a], *grid[b], variant)) for a, b in pairs])
        err = float(np.max(np.abs(w - exact) / np.maximum(1.0, np.abs(exact))))
        symmetric = np.array_equal(w, haversine_weights(pts[j, 0], pts[j, 1], pts[i, 0], pts[i, 1], variant))
        ws = w[order]
        monotone = bool(np.all(np.diff(ws)[farther] <= 1e-12 * ws[:-1][farther]))
        ok &= err <= 1e-9 and symmetric and monotone
        details.append(f"{variant}: err {err:.1e}, symmetric={symmetric}, monotone={monotone}")
    report(3, "haversine fidelity", ok, f"{len(pairs)} pairs; " + "; ".join(details))


# ---------------------------------------------------------------- 4


def test_criterion_4_full_size_case():
    cfg = ModelConfig(m=5, n=15, node_count=256, in_features=3, heads=8)
    model = GritModel.init(cfg, seed=0)
    seq = make_sequence(np.random.default_rng(0), cfg)
    with T.no_grad():
        out = forward(model, seq)
        per_node = T.stack(sage_embeddings(model, seq), axis=0).transpose(1, 0, 2)
        _, weights = multi_head_attention(model.encoder, per_node, return_weights=True)
    row_err = float(np.max(np.abs(weights.data.sum(axis=-1) - 1.0)))
    count = count_parameters(model)
    ok = out.shape == (256, 15) and count == GOLDEN_PARAMETER_COUNT and row_err <= 1e-12 \
        and weights.shape[1] == 8
    report(4, "full-size case", ok,
           f"output {out.shape}, parameters {count} (golden {GOLDEN_PARAMETER_COUNT}), "
           f"softmax row-sum err {row_err:.1e} over {weights.shape[1]} heads")


# ---------------------------------------------------------------- 5


def test_criterion_5_overfit_oracle():
    # Default architecture; dropout off and a 3e-3 step size so 200 single-sample
    # Adam steps can close the gap.
    rec = synthesize_dataset(GeneratorConfig(records=1), seed=0)[0]
    cfg = ModelConfig(dropout_p=0.0)
    seq = record_to_sequence(rec, cfg.m, cfg.n, cfg.graph_config())
    split = DatasetSplit([seq], [seq], [seq], 0, compute_normalization([rec]))
    start = time.perf_counter()
    result = train(GritModel.init(cfg, seed=0), split, TrainConfig(epochs=200, initial_lr=0.003), seed=0)
    elapsed = time.perf_counter() - start
    mse = evaluate_loss(result.model, [seq])
    ok = mse < 1e-3 and elapsed < 120
    report(5, "overfit oracle", ok, f"train MSE {mse:.2e} after 200 epochs, {elapsed:.1f}s")


# ---------------------------------------------------------------- 6


def test_criterion_6_learning_progress():
    # 64 flight-track columns per record keeps five 100-epoch runs inside the time budget.
    start = time.perf_counter()
    records = synthesize_dataset(GeneratorConfig(records=100, column_count=64), seed=7)
    cfg = ModelConfig(node_count=64)
    splits = make_splits(records, seed=7, versions=5, m=cfg.m, n=cfg.n)
    rmses, baselines = [], []
    for split in splits:
        model = GritModel.init(cfg, seed=split.version)
        result = train(model, split, TrainConfig(epochs=100), seed=split.version)
        rmses.append(score_sequences(result.model, split.test).rmse)
        baselines.append(mean_baseline_rmse(split.train, split.test))
    elapsed = time.perf_counter() - start
    agg, base = aggregate(rmses), aggregate(baselines)
    improvement = 1.0 - agg.mean_rmse / base.mean_rmse
    ok = improvement >= 0.20 and elapsed < 15 * 60 and math.isfinite(agg.std_rmse)
    report(6, "learning progress", ok,
           f"test RMSE {agg.mean_rmse:.4f} +- {agg.std_rmse:.4f} (std/mean {agg.std_rmse / agg.mean_rmse:.3f}) "
           f"vs baseline {base.mean_rmse:.4f}, improvement {improvement:.1%}, {elapsed:.0f}s")


# ---------------------------------------------------------------- 7


def test_criterion_7_scheduler_and_adam():
    cfg = TrainConfig()
    state = TrainState.fresh(cfg)
    changes = []
    for epoch in range(1, 41):
        before = state.lr
        plateau_scheduler(state, 1.0, cfg)
        if state.lr != before:
            changes.append((epoch, state.lr))
    sched_ok = changes == [(18, 0.0005), (35, 0.00025)]

    p = Tensor(np.zeros(1), requires_grad=True)
    p.grad = np.ones(1)
    adam_cfg = TrainConfig(weight_decay=0.0)
    adam_step({"w": p}, TrainState.fresh(adam_cfg), adam_cfg)
    m_hat = (1 - 0.9) * 1.0 / (1 - 0.9)
    v_hat = (1 - 0.999) * 1.0 / (1 - 0.999)
    expected = -0.001 * m_hat / (math.sqrt(v_hat) + 1e-8)
    adam_err = abs(p.data[0] - expected)
    report(7, "scheduler and Adam", sched_ok and adam_err <= 1e-12,
           f"lr changes at {changes}, Adam t=1 error {adam_err:.1e}")


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism(tmp_path):
    records = synthesize_dataset(GeneratorConfig(records=10, column_count=16), seed=5)
    cfg = ModelConfig(node_count=16, sage_out_dim=16, heads=4, decoder_channels=8)
    outputs = []
    for run in range(2):
        split = make_splits(records, seed=5, versions=1)[0]
        result = train(GritModel.init(cfg, seed=1), split, TrainConfig(epochs=5), seed=1)
        path = tmp_path / f"run{run}.grit"
        save_checkpoint(result.model, result.state, path)
        outputs.append((history_csv(result.history).encode(), path.read_bytes(), result))
    same_history = outputs[0][0] == outputs[1][0]
    same_ckpt = outputs[0][1] == outputs[1][1]
    loaded = load_checkpoint(tmp_path / "run0.grit")
    original = outputs[0][2]
    params_exact = all(np.array_equal(loaded.model.parameters()[k].data, v.data)
                       for k, v in original.model.parameters().items())
    moments_exact = all(np.array_equal(loaded.state.moment1[k], original.state.moment1[k]) and
                        np.array_equal(loaded.state.moment2[k], original.state.moment2[k])
                        for k in original.state.moment1)
    resave = tmp_path / "resave.grit"
    save_checkpoint(loaded.model, loaded.state, resave)
    resave_exact = resave.read_bytes() == outputs[0][1]
    ok = same_history and same_ckpt and params_exact and moments_exact and resave_exact
    report(8, "determinism", ok,
           f"history identical={same_history}, checkpoint identical={same_ckpt}, "
           f"round trip exact={params_exact and moments_exact and resave_exact}")


# ---------------------------------------------------------------- 9


def test_criterion_9_pipeline_conformance():
    gen = GeneratorConfig(records=200, column_count=6, smoothness=2.0, short_fraction=0.2,
                          incomplete_fraction=0.2)
    records = synthesize_dataset(gen, seed=3)
    expected = [r.id for r in records
                if len(r.layers) >= 20 and all(layer.complete for layer in r.layers[:20])]
    kept = [r.id for r in filter_records(records)]
    filter_ok = kept == expected and 0 < len(kept) < len(records)

    sizes = split_sizes(1660)
    corpus = synthesize_dataset(GeneratorConfig(records=1660, column_count=4, smoothness=1.0), seed=9)
    split = make_splits(corpus, seed=9, versions=1)[0]
    realized = (len(split.train), len(split.validation), len(split.test))
    split_ok = sizes == realized == (996, 332, 332)

    held_out = set(split.record_ids["validation"]) | set(split.record_ids["test"])
    by_id = {r.id: r for r in corpus}
    provenance_ok = set(split.normalization.source_ids) == set(split.record_ids["train"]) \
        and not held_out & set(split.normalization.source_ids)
    for rid in held_out:
        for layer in by_id[rid].layers:
            layer.thickness += 1000.0
    untouched = make_splits(corpus, seed=9, versions=1)[0].normalization == split.normalization
    ok = filter_ok and split_ok and provenance_ok and untouched
    report(9, "pipeline conformance", ok,
           f"filter kept {len(kept)}/{len(records)} as expected={kept == expected}, 1660 -> {realized}, "
           f"stats from train only={provenance_ok}, invariant to held-out edits={untouched}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
