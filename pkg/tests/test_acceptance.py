"""End-to-end acceptance checks, one marked group per criterion.

The summary at the end of the pytest run prints one PASS/FAIL line per
criterion (see ``conftest.py``).
"""
import copy
import json
import math
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lexnet import bench, explain as ex, flowdata, io, nn
from lexnet import trainer as tr
from lexnet.backbone import BlockSpec, block_param_count, lexnet_config, resnet_twin_config
from lexnet.cli import main
from lexnet.lproto import lproto_backward, lproto_forward
from lexnet.model import build_model
from lexnet.trainer import TrainConfig

ROOT = Path(__file__).resolve().parents[1]
ACCEPT_CFG = ROOT / "configs" / "synthetic_acceptance.json"
SMOKE_CFG = ROOT / "configs" / "smoke.json"

GRAD_TOL = 1e-3


# ---------------------------------------------------------------- the shared synthetic run


class ProjectionAudit:
    """Checks every projection the training loop performs."""

    def __init__(self, subset_size=200):
        self.subset_size = subset_size
        self.calls = 0
        self.failures = []

    def __call__(self, model, data, entries):
        self.calls += 1
        latents = tr.compute_latents(model, data.x)
        n, h, w, d = latents.shape
        # distance to the provenance patch is exactly zero
        for j, prov in enumerate(model.prototypes.provenance):
            t, c = prov.location
            diff = latents[prov.sample_id, t, c].astype(np.float64) - model.prototypes.vectors[j]
            if float((diff ** 2).sum()) != 0.0:
                self.failures.append(f"call {self.calls}: prototype {j} is off its provenance patch")
        # re-projection moves nothing
        again = copy.deepcopy(model)
        tr.project_prototypes(again, data, latents)
        if not np.array_equal(again.prototypes.vectors, model.prototypes.vectors):
            self.failures.append(f"call {self.calls}: re-projection moved a prototype")
        # projection from scratch on a subset agrees with a plain exhaustive scan
        rng = np.random.default_rng(self.calls)
        idx = np.sort(rng.choice(len(data), self.subset_size, replace=False))
        sub = data.subset(idx)
        probe = copy.deepcopy(model)
        start = rng.uniform(0, 1, probe.prototypes.vectors.shape).astype(probe.prototypes.vectors.dtype)
        probe.prototypes.param.data = start.copy()
        sub_lat = latents[idx]
        tr.project_prototypes(probe, sub, sub_lat)
        for j, k in enumerate(probe.prototypes.class_ids):
            if not (sub.y == k).any():
                continue
            best, where = math.inf, None
            for s in range(len(sub)):
                if sub.y[s] != k:
                    continue
                for t in range(h):
                    for c in range(w):
                        dist = sum((float(a) - float(b)) ** 2 for a, b in zip(sub_lat[s, t, c], start[j]))
                        if dist < best:
                            best, where = dist, (s, t, c)
            s, t, c = where
            if not np.array_equal(probe.prototypes.vectors[j], sub_lat[s, t, c]):
                self.failures.append(f"call {self.calls}: prototype {j} disagrees with the exhaustive scan")


@pytest.fixture(scope="module")
def run():
    recs, sigs = flowdata.synth_generate(10, flowdata.imbalanced_counts(10, 200, 4), noise=0.1, seed=0)
    split = flowdata.stratified_split(recs, 0.5, seed=0)
    train_data, test_data = split.encoded()
    cfg = TrainConfig.from_dict(json.loads(ACCEPT_CFG.read_text()))
    model = build_model(10, seed=0, label_names=split.labels.names)
    audit = ProjectionAudit()
    t0 = time.perf_counter()
    model, report = tr.train(model, train_data, cfg, test_data, on_projection=audit)
    elapsed = time.perf_counter() - t0
    return {"model": model, "report": report, "train": train_data, "test": test_data, "sigs": sigs,
            "cfg": cfg, "audit": audit, "seconds": elapsed}


# ---------------------------------------------------------------- 1, 2: parameter counts


@pytest.mark.criterion(1, "parameter parity with the reference table")
def test_param_parity():
    model = build_model(200, lexnet_config(), seed=0)
    rows = model.param_table()
    assert [r["cum"] for r in rows[:5]] == [88, 3_088, 7_760, 19_520, 38_080]
    for m in (200, 340, 401):
        while len(model.prototypes) < m:
            j = len(model.prototypes)
            model.prototypes.add(j % 200, np.zeros(32, np.float32))
            model.last.add_column(j % 200)
        rows = model.param_table()
        assert rows[-1]["cum"] - rows[-2]["cum"] == m * 200


@pytest.mark.criterion(1, "parameter parity with the reference table")
def test_params_cli(capsys):
    assert main(["params", "--classes", "200", "--prototypes", "340"]) == 0
    text = capsys.readouterr().out
    for n in ("88", "3,088", "7,760", "19,520", "38,080", "48,960", "116,960"):
        assert n in text


@pytest.mark.criterion(2, "LERes expansion blocks at least 15% smaller than standard residual")
def test_leres_block_savings():
    pairs = []
    for cin, cout in ((8, 16), (16, 32)):
        le = block_param_count(BlockSpec(cin, cout, "leres"))
        std = block_param_count(BlockSpec(cin, cout, "standard_res"))
        pairs.append((le, std))
        assert le <= 0.85 * std
    # exact counts; 14,528 is the arithmetic total for the 16->32 standard block
    assert pairs == [(3_000, 3_680), (11_760, 14_528)]
    le_bb = build_model(10, lexnet_config(), seed=0).backbone.count_params()
    twin_bb = build_model(10, resnet_twin_config(), seed=0).backbone.count_params()
    assert le_bb == 38_080 and le_bb < twin_bb


# ---------------------------------------------------------------- 3: gradients


def _proj_check(fwd, bwd, inputs, r, eps=1e-6, mask=None):
    out = fwd(*inputs)
    proj = r.standard_normal(out[0].shape)
    grads = bwd(proj, out[1])
    grads = grads if isinstance(grads, tuple) else (grads,)
    f = lambda: float((fwd(*inputs)[0] * proj).sum())
    errs = []
    for x, g in zip(inputs, grads):
        if g is None or not isinstance(x, np.ndarray):
            continue
        errs.append(nn.finite_diff_check(f, x, g, eps=eps, mask=mask if x is inputs[0] else None))
    return max(errs)


@pytest.mark.criterion(3, "finite-difference gradient checks")
def test_every_op_gradient():
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    x = r.standard_normal((2, 5, 2, 3))
    errs = {
        "conv3x3": _proj_check(nn.conv2d_forward, nn.conv2d_backward, (x, r.standard_normal((4, 3, 3, 3))), r),
        "conv1x1": _proj_check(nn.conv1x1_forward, nn.conv1x1_backward, (x, r.standard_normal((4, 3))), r),
        "depthwise": _proj_check(nn.depthwise_conv3x3_forward, nn.depthwise_conv3x3_backward,
                                 (x, r.standard_normal((3, 3, 3))), r),
        "sigmoid": _proj_check(nn.sigmoid_forward, nn.sigmoid_backward, (x,), r),
        "relu": _proj_check(nn.relu_forward, nn.relu_backward, (x,), r, eps=1e-5, mask=np.abs(x) > 1e-4),
        "linear": _proj_check(nn.linear_forward, nn.linear_backward, (r.standard_normal((3, 5)),
                                                                   r.standard_normal((4, 5))), r),
    }
    gamma, beta = r.standard_normal(3), r.standard_normal(3)

    def bn(xx, g, b):
        return nn.batch_norm_forward(xx, g, b, nn.BNState(np.zeros(3), np.ones(3), False), True)

    errs["batchnorm"] = _proj_check(bn, nn.batch_norm_backward, (x, gamma, beta), r, eps=1e-5)
    a, b = r.standard_normal((2, 5, 2, 3)), r.standard_normal((2, 5, 2, 4))
    proj = r.standard_normal((2, 5, 2, 7))
    da, db = nn.split_channels(proj, 3)
    f = lambda: float((nn.concat_channels(a, b) * proj).sum())
    errs["concat"] = max(nn.finite_diff_check(f, a, da), nn.finite_diff_check(f, b, db))
    proj = r.standard_normal(a.shape)
    c = r.standard_normal(a.shape)
    errs["add"] = nn.finite_diff_check(lambda: float((nn.add(a, c) * proj).sum()), a, proj)
    m = r.standard_normal((5, 2))
    value, loc = nn.global_max_pool_with_arg(m)
    errs["maxpool"] = nn.finite_diff_check(lambda: nn.global_max_pool_with_arg(m)[0], m,
                                           nn.global_max_pool_backward(1.0, m.shape, loc), eps=1e-6)
    logits, labels = r.standard_normal((4, 5)), np.array([0, 3, 3, 1])
    _, dl = nn.softmax_cross_entropy(logits, labels)
    errs["cross_entropy"] = nn.finite_diff_check(lambda: nn.softmax_cross_entropy(logits, labels)[0], logits, dl)
    lat, vecs = r.random((2, 5, 2, 6)), r.random((3, 6))
    w = r.standard_normal((2, 3))
    _, _, cache = lproto_forward(lat, vecs)
    dlat, dvec = lproto_backward(w, cache)
    f = lambda: float((lproto_forward(lat, vecs)[0] * w).sum())
    errs["lproto"] = max(nn.finite_diff_check(f, lat, dlat, 1e-6), nn.finite_diff_check(f, vecs, dvec, 1e-6))
    bad = {k: v for k, v in errs.items() if not v < GRAD_TOL}
    assert not bad, bad
    assert time.perf_counter() - t0 < 60


@pytest.mark.criterion(3, "finite-difference gradient checks")
@pytest.mark.parametrize("make", [lexnet_config, resnet_twin_config])
def test_end_to_end_gradient_on_twenty_params(make):
    t0 = time.perf_counter()
    model = build_model(4, make(), seed=1, dtype=np.float64)
    r = np.random.default_rng(2)
    x = r.random((4, 1, 20, 2))
    y = np.array([0, 1, 2, 3])
    loss, _, fwd, dlogits = model.loss(x, y, proto_l2=1e-3)
    model.zero_grad()
    model.backward(fwd, dlogits)
    params = model.params
    picks = []
    for _ in range(20):
        p = params[int(r.integers(len(params)))]
        picks.append((p, tuple(int(r.integers(s)) for s in p.data.shape)))
    f = lambda: model.loss(x, y)[1]  # cross-entropy only: the decay term is applied by the optimizer
    worst = 0.0
    for p, idx in picks:
        num = nn.numeric_gradient(f, p.data, 1e-6, [idx])[idx]
        worst = max(worst, nn.relative_error(np.array([p.grad[idx]]), np.array([num])))
    assert worst < GRAD_TOL
    assert time.perf_counter() - t0 < 60


# ---------------------------------------------------------------- 4-9: the synthetic run


@pytest.mark.criterion(4, "synthetic run reaches 95% test accuracy within budget")
def test_synthetic_accuracy(run):
    rep = run["report"]
    print(f"test accuracy {rep.final['accuracy']:.4f} in {run['seconds']:.1f} s, "
          f"{len(rep.iterations)} outer iterations")
    assert rep.final["evaluated_on"] == "test"
    assert rep.final["accuracy"] >= 0.95
    assert len(rep.iterations) <= 30
    assert run["seconds"] <= 600


@pytest.mark.criterion(5, "prototypes recover planted signatures on 80% of classes")
def test_prototype_recovery(run):
    out = ex.signature_recovery(run["model"], run["test"], run["sigs"])
    print("per-class recovery rate:", {k: round(v, 3) for k, v in out["per_class"].items()})
    assert len(out["per_class"]) == 10
    assert out["fraction"] >= 0.8


@pytest.mark.criterion(6, "projection invariants against the exhaustive scan")
def test_projection_invariants(run):
    audit = run["audit"]
    assert audit.calls == run["cfg"].n_epochs_outer
    assert not audit.failures, audit.failures[:5]


def _moment_kurtosis(values):
    """Bias-corrected excess kurtosis from raw moments in exact rational arithmetic."""
    xs = [Fraction(v) for v in values]
    n = len(xs)
    mean = sum(xs) / n
    m2 = sum((v - mean) ** 2 for v in xs) / n
    m4 = sum((v - mean) ** 4 for v in xs) / n
    if m2 == 0:
        return 0.0
    g2 = m4 / m2 ** 2 - 3
    return float(((n + 1) * g2 + 6) * (n - 1) / ((n - 2) * (n - 3)))


@pytest.mark.criterion(7, "prototype growth rule")
def test_growth_uniform_and_outlier():
    cfg = TrainConfig()
    model = build_model(200, lexnet_config(widths=(4, 4, 8, 8), stem_channels=2), seed=0, proto_cap=5)
    out = tr.grow_prototypes(model, np.full(200, 3.0), cfg)
    assert out["grown"] == [] and len(model.prototypes) == 200
    avg = np.ones(200)
    avg[137] = 100.0
    out = tr.grow_prototypes(model, avg, cfg)
    assert 137 in [g["class"] for g in out["grown"]]
    assert out["kurtosis"] == pytest.approx(_moment_kurtosis(avg), abs=1e-9)


@pytest.mark.criterion(7, "prototype growth rule")
@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=8, max_size=40), st.integers(1, 4), st.integers(1, 6))
def test_growth_respects_cap(ints, cap, rounds):
    avg = np.array(ints, dtype=float) / 100
    k = len(avg)
    model = build_model(k, lexnet_config(widths=(4, 4, 8, 8), stem_channels=2), seed=0, proto_cap=cap)
    cfg = TrainConfig(proto_cap_per_class=cap)
    for _ in range(rounds):
        tr.grow_prototypes(model, avg, cfg)
    assert max(model.prototypes.counts(k)) <= cap
    assert model.last.weight.shape == (k, len(model.prototypes))


@pytest.mark.criterion(7, "prototype growth rule")
@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-10**6, 10**6), min_size=4, max_size=60))
def test_kurtosis_matches_moment_oracle(ints):
    vals = [v / 1000 for v in ints]
    assert tr.excess_kurtosis(vals) == pytest.approx(_moment_kurtosis(vals), abs=1e-9)


@pytest.mark.criterion(8, "variable prototype count per class")
def test_variable_prototype_count(run):
    counts = run["model"].prototypes.counts(10)
    print("prototypes per class:", counts)
    assert 1 <= np.mean(counts) <= 3
    assert len(set(counts)) > 1


@pytest.mark.criterion(9, "faithfulness harness")
def test_faithfulness_bydesign(run):
    for data in (run["train"], run["test"]):
        rep = ex.faithfulness_eval(run["model"], data, "bydesign")
        assert rep.top_protos_accuracy == 1.0


@pytest.mark.criterion(9, "faithfulness harness")
@pytest.mark.parametrize("method,n,perms", [("gradcam", 200, 0), ("shapley", 40, 16)])
def test_faithfulness_post_hoc_below_perfect(run, method, n, perms):
    rep = ex.faithfulness_eval(run["model"], run["train"], method, n_permutations=max(perms, 1), max_samples=n)
    print(f"{method}: top-protos {rep.top_protos_accuracy:.3f} top-10 {rep.top_10_accuracy:.3f} on {n} samples")
    assert rep.top_protos_accuracy < 1.0


@pytest.mark.criterion(9, "faithfulness harness")
def test_random_baseline_near_quarter(run):
    data = run["test"]
    rep = ex.faithfulness_eval(run["model"], data, "random", seed=0)
    n = rep.single_proto_samples
    assert n >= 50
    se = math.sqrt(0.25 * 0.75 / n)
    print(f"random top-10 on single-prototype samples: {rep.single_proto_top_10_accuracy:.3f} (n={n}, se={se:.3f})")
    assert abs(rep.single_proto_top_10_accuracy - 0.25) <= 3 * se


# ---------------------------------------------------------------- 10: Shapley


@pytest.mark.criterion(10, "Monte-Carlo Shapley sanity")
def test_shapley_exact_additive():
    r = np.random.default_rng(0)
    w, x, base = r.standard_normal(6), r.standard_normal(6), r.standard_normal(6)
    mean, _ = ex.shapley_permutation(lambda b: b @ w, x, base, ex.all_permutations(6))
    np.testing.assert_allclose(mean, w * (x - base), rtol=0, atol=1e-6)


@pytest.mark.criterion(10, "Monte-Carlo Shapley sanity")
def test_shapley_efficiency_on_lexnet(run):
    model, data = run["model"], run["test"]
    for i in (0, 7, 500):
        x = data.x[i]
        amap = ex.shapley_mc(model, x, n_permutations=16, seed=i)
        lg = model.forward(np.stack([x, np.zeros_like(x)])).logits[:, amap.target].astype(np.float64)
        total = lg[0] - lg[1]
        # standard error of the summed estimate: cell errors are correlated, so bound with their sum
        se = float(amap.stderr.sum())
        assert abs(amap.values.sum() - total) <= 3 * se + 1e-4 * max(1.0, abs(total))


# ---------------------------------------------------------------- 11: inference


@pytest.mark.criterion(11, "inference round trip and speed")
def test_round_trip_thousand_samples(run, tmp_path):
    model = run["model"]
    x = np.concatenate([run["test"].x, run["train"].x])[:1000]
    assert len(x) == 1000
    io.save_model(model, tmp_path / "m.lex")
    back = io.load_model(tmp_path / "m.lex")
    np.testing.assert_array_equal(model.predict(x), back.predict(x))
    np.testing.assert_array_equal(model.predict_proba(x), back.predict_proba(x))


@pytest.mark.criterion(11, "inference round trip and speed")
def test_single_core_throughput(run):
    rep = bench.bench_inference(run["model"], run["test"].x, warmup_iters=50, measured_iters=1000)
    print(f"throughput {rep.samples_per_s:.0f} samples/s, p50 {rep.p50_us:.1f} us, p99 {rep.p99_us:.1f} us")
    assert rep.n_params == run["model"].count_params()
    assert rep.samples_per_s >= 1000


@pytest.mark.criterion(11, "inference round trip and speed")
def test_lexnet_not_slower_than_twin(run):
    x = run["test"].x
    models = []
    for cfg in (lexnet_config(), resnet_twin_config()):
        m = build_model(10, cfg, seed=0)
        m.forward(x[:64], train=True)  # fill the batch-norm statistics
        models.append(m)
    out = bench.paired_backbone_bench(models[0], models[1], x, rounds=9, iters=300, warmup_iters=50)
    print(f"lexnet {out['a_median_us']:.1f} us, twin {out['b_median_us']:.1f} us, ratio {out['ratio']:.3f}")
    assert out["ratio"] <= 1.0


# ---------------------------------------------------------------- 12: determinism


@pytest.mark.criterion(12, "identical seeds give identical models and reports")
def test_cli_training_is_deterministic(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--classes", "4", "--flows", "20", "--imbalance", "2", "--out", str(data)]) == 0
    sums, reports = [], []
    for i in range(2):
        model, report = tmp_path / f"m{i}.lex", tmp_path / f"r{i}.jsonl"
        assert main(["--seed", "3", "train", "--data", str(data), "--config", str(SMOKE_CFG),
                     "--out", str(model), "--report", str(report)]) == 0
        sums.append(io.file_checksum(model))
        reports.append(report.read_text())
    assert sums[0] == sums[1]
    assert reports[0] == reports[1]
    assert io.load_model(tmp_path / "m0.lex").train_config["seed"] == 3
