"""Acceptance suite: one PASS/FAIL line per criterion, at the contract tolerances.

Lines are echoed in the pytest terminal summary.
"""
import contextlib
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, brute_knn, dense_propagation, random_graph

from posegnn.cli import main
from posegnn.data import FeatureMapConfig, SynthConfig, generate_feature_maps, generate_synthetic, mean_spacing
from posegnn.graph import Graph, feature_map_to_graph, knn_graph, knn_select, normalized_aggregate
from posegnn.layers import GcnLayer, WlLayer, gcn_forward, wl_forward
from posegnn.model import (
    GRAPH_POSE,
    NODE_POSE,
    GnnModel,
    TrainConfig,
    evaluate,
    infer_graph_pose,
    infer_node_pose,
    pose_loss,
    pose_loss_grad,
    train_graph_pose,
    train_node_pose,
)
from posegnn.numerics import finite_diff_grad
from posegnn.pose import Pose, orientation_error


@contextlib.contextmanager
def criterion(number, title, budget_s=None):
    notes = []
    start = time.perf_counter()
    ok = False
    try:
        yield notes
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        if ok and budget_s is not None and elapsed >= budget_s:
            notes.append(f"over time budget {budget_s:g} s")
            ok = False
        status = "PASS" if ok else "FAIL"
        detail = "; ".join(notes)
        ACCEPTANCE_LINES.append(f"criterion {number} [{status}] {title} ({elapsed:.1f} s){': ' + detail if detail else ''}")
        print(ACCEPTANCE_LINES[-1])
    assert ok, ACCEPTANCE_LINES[-1]


def wl_double_loop(g, x, t1, t2):
    out = np.empty((g.n, t1.shape[1]))
    for i in range(g.n):
        acc = x[i] @ t1
        for j in g.neighbors[i]:
            acc = acc + x[j] @ t2
        out[i] = acc
    return out


def test_criterion_1_oracle_equivalence():
    with criterion(1, "propagation and layer oracles on random graphs", budget_s=5.0) as notes:
        rng = np.random.default_rng(101)
        worst_gcn = worst_agg = worst_wl = 0.0
        exact_wl = True
        for trial in range(120):
            n = int(rng.integers(1, 11))
            g = random_graph(rng, n, float(rng.uniform(0.1, 0.9)))
            din, dout = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            x = rng.standard_normal((n, din))
            theta = rng.standard_normal((din, dout))
            a = dense_propagation(g)
            worst_agg = max(worst_agg, float(np.max(np.abs(normalized_aggregate(g, x) - a @ x))))
            worst_gcn = max(worst_gcn, float(np.max(np.abs(gcn_forward(GcnLayer(theta), g, x) - a @ x @ theta))))
            t2 = rng.standard_normal((din, dout))
            layer = WlLayer(theta, t2)
            worst_wl = max(worst_wl, float(np.max(np.abs(wl_forward(layer, g, x) - wl_double_loop(g, x, theta, t2)))))
            # small integers keep every product and sum exact, so equality must be bitwise
            xi = rng.integers(-4, 5, (n, din)).astype(float)
            t1i = rng.integers(-4, 5, (din, dout)).astype(float)
            t2i = rng.integers(-4, 5, (din, dout)).astype(float)
            exact_wl &= np.array_equal(wl_forward(WlLayer(t1i, t2i), g, xi), wl_double_loop(g, xi, t1i, t2i))
        notes.append(f"max|d| agg {worst_agg:.1e}, gcn {worst_gcn:.1e}, wl {worst_wl:.1e}, wl exact {exact_wl}")
        assert worst_agg <= 1e-12 and worst_gcn <= 1e-12 and worst_wl <= 1e-12
        assert exact_wl


def _gradcheck(conv, mode, seed):
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(conv_type=conv, mode=mode, widths=(5, 4, 3), seed=seed)
    model = GnnModel.init(3, cfg)
    if mode == NODE_POSE:
        graphs = [random_graph(rng, 6, 0.5)]
        truth = [Pose.from_arrays(rng.standard_normal(3), rng.standard_normal(4)) for _ in range(6)]
    else:
        graphs = [random_graph(rng, n, 0.5) for n in (5, 6)]
        truth = [Pose.from_arrays(rng.standard_normal(3), rng.standard_normal(4)) for _ in range(2)]
    xs = [rng.standard_normal((g.n, 3)) for g in graphs]

    def loss():
        outs = [model.forward(g, x) for g, x in zip(graphs, xs)]
        return pose_loss(np.vstack([o[0] for o in outs]), np.vstack([o[1] for o in outs]), truth, 10.0).total

    model.zero_grad()
    caches = [{} for _ in graphs]
    outs = [model.forward(g, x, c) for g, x, c in zip(graphs, xs, caches)]
    _, dp, dq = pose_loss_grad(np.vstack([o[0] for o in outs]), np.vstack([o[1] for o in outs]), truth, 10.0)
    dxs, row = [], 0
    for c, o in zip(caches, outs):
        m = o[0].shape[0]
        dxs.append(model.backward(c, dp[row:row + m], dq[row:row + m]))
        row += m
    pairs = []
    for name, value, grad in model.named_parameters():
        def f(v, value=value):
            saved = value.copy()
            value[...] = v
            try:
                return loss()
            finally:
                value[...] = saved
        pairs.append((name, grad.copy(), finite_diff_grad(f, value.copy(), 1e-5)))
    for idx in range(len(xs)):
        def fx(v, idx=idx):
            saved = xs[idx]
            xs[idx] = v
            try:
                return loss()
            finally:
                xs[idx] = saved
        pairs.append((f"x{idx}", dxs[idx], finite_diff_grad(fx, xs[idx].copy(), 1e-5)))
    return pairs


def test_criterion_2_gradient_correctness():
    with criterion(2, "analytic vs central-difference gradients, all params and inputs", budget_s=30.0) as notes:
        worst = 0.0
        bad = []
        for conv in ("gcn", "wl"):
            for mode in (NODE_POSE, GRAPH_POSE):
                for name, an, num in _gradcheck(conv, mode, seed=17):
                    err = np.abs(an - num)
                    scale = np.maximum(np.abs(an), np.abs(num))
                    ok = err <= np.maximum(1e-7, 1e-5 * scale)
                    rel = err / np.maximum(scale, 1e-300)
                    worst = max(worst, float(np.max(np.where(err > 1e-7, rel, 0.0))))
                    if not ok.all():
                        bad.append(f"{conv}/{mode}/{name}")
        notes.append(f"worst relative error above the absolute floor {worst:.1e}")
        assert not bad, bad


def test_criterion_3_knn_invariants():
    with criterion(3, "k-NN graph invariants and brute-force equality", budget_s=5.0) as notes:
        rng = np.random.default_rng(303)
        for trial in range(50):
            n = int(rng.integers(2, 65))
            k = int(rng.integers(1, n))
            d = int(rng.integers(1, 9))
            x = rng.standard_normal((n, d))
            if trial % 5 == 0:
                x = np.round(x, 1)  # force distance ties
            sel = knn_select(x, k)
            assert sel.shape == (n, k)
            assert sel.tolist() == brute_knn(x, k)
            g = knn_graph(x, k)
            for i, nb in enumerate(g.neighbors):
                assert i not in nb
                assert set(sel[i]) <= set(nb)
                assert all(i in g.neighbors[j] for j in nb)
                assert all(j in sel[i] or i in sel[j] for j in nb)
        notes.append("50 instances, n <= 64")


def test_criterion_4_node_pose_localization():
    with criterion(4, "node-pose WL on the 200/40 grid scene, 500 epochs", budget_s=120.0) as notes:
        ds = generate_synthetic(SynthConfig(n_train=200, n_test=40, d=64, feature_noise_sigma=0.05, seed=0))
        xtr, ptr = ds.train()
        xte, pte = ds.test()
        spacing = mean_spacing(np.array([p.position for p in ptr]))
        cfg = TrainConfig(k=8, alpha=10.0, epochs=500, seed=0, conv_type="wl", mode=NODE_POSE,
                          optimizer="adam", learning_rate=3e-4, neighbor_init_scale=0.03)
        untrained = evaluate(infer_node_pose(GnnModel.init(ds.d, cfg), xtr, xte, 8), pte)[0]
        model = train_node_pose(xtr, ptr, cfg).model
        med_pos, med_ori = evaluate(infer_node_pose(model, xtr, xte, 8), pte)
        notes.append(f"median {med_pos:.3f} m / {med_ori:.2f} deg; spacing {spacing:.3f} m "
                     f"(ratio {med_pos / spacing:.2f}, need <= 0.25); untrained {untrained:.3f} m "
                     f"(ratio {med_pos / untrained:.3f}, need <= 0.20)")
        assert med_pos <= 0.20 * untrained
        assert med_pos <= 0.25 * spacing


def test_criterion_5_graph_pose_pipeline():
    with criterion(5, "graph-pose on 49-node feature-map graphs, 300 epochs", budget_s=180.0) as notes:
        ds = generate_feature_maps(FeatureMapConfig(seed=3))
        assert ds.map_shape == (7, 7) and ds.node_dim == 64
        gtr = [feature_map_to_graph(m, 8) for m in ds.feature_maps(0)]
        gte = [feature_map_to_graph(m, 8) for m in ds.feature_maps(1)]
        assert all(g.n == 49 for g in gtr + gte)
        _, ptr = ds.train()
        _, pte = ds.test()
        cfg = TrainConfig(k=8, alpha=10.0, epochs=300, seed=3, conv_type="wl", mode=GRAPH_POSE,
                          optimizer="adam", learning_rate=1e-3, batch_size=4)
        base_pos, base_ori = evaluate(infer_graph_pose(GnnModel.init(64, cfg), gte), pte)
        res = train_graph_pose(gtr, ptr, cfg)
        pos, ori = evaluate(infer_graph_pose(res.model, gte), pte)
        drop = res.history[0].total / res.final.total
        notes.append(f"loss drop {drop:.0f}x; position {base_pos:.2f} -> {pos:.2f} m ({base_pos / pos:.1f}x); "
                     f"orientation {base_ori:.1f} -> {ori:.1f} deg ({base_ori / ori:.1f}x)")
        assert drop >= 5.0
        assert base_pos / pos >= 3.0 and base_ori / ori >= 3.0


def test_criterion_6_loss_structure():
    with criterion(6, "loss decomposition identity and alpha linearity") as notes:
        ds = generate_synthetic(SynthConfig(n_train=30, n_test=0, d=16, seed=6))
        x, poses = ds.train()
        cfg = TrainConfig(k=4, epochs=40, optimizer="adam", learning_rate=1e-3, widths=(16, 8, 8),
                          neighbor_init_scale=0.1)
        reports = list(train_node_pose(x, poses, cfg).history)
        rng = np.random.default_rng(6)
        worst_alpha = 0.0
        for _ in range(50):
            pp, pq = rng.standard_normal((30, 3)), rng.standard_normal((30, 4))
            lo, hi = pose_loss(pp, pq, poses, 10.0), pose_loss(pp, pq, poses, 200.0)
            reports += [lo, hi]
            worst_alpha = max(worst_alpha, abs((hi.total - lo.total) - 190.0 * lo.orientation_term))
        worst_id = max(abs(r.total - (r.position_term + r.alpha * r.orientation_term)) for r in reports)
        notes.append(f"{len(reports)} reports, identity max|d| {worst_id:.1e}, alpha switch max|d| {worst_alpha:.1e}")
        assert worst_id <= 1e-12
        assert worst_alpha <= 1e-12


def _run_pipeline(root, data):
    root.mkdir()
    flags = ["--conv", "wl", "--k", "6", "--epochs", "80", "--seed", "5", "--optimizer", "adam",
             "--lr", "3e-4", "--neighbor-init-scale", "0.03", "--quiet", "--out-dir", str(root)]
    assert main(["train", *flags, str(data)]) == 0
    assert main(["eval", str(root / "scene.wl.node.k6.ckpt"), str(data), "--csv", str(root / "eval.csv")]) == 0
    return [(root / name).read_bytes() for name in ("scene.wl.node.k6.ckpt", "eval.csv", "scene.wl.node.k6.loss.csv")]


def test_criterion_7_determinism(tmp_path):
    with criterion(7, "two identical train+eval runs give identical bytes") as notes:
        data = tmp_path / "scene.txt"
        assert main(["gen", "--mode", "node", "--n-train", "120", "--n-test", "24", "--seed", "5", "-o", str(data)]) == 0
        first = _run_pipeline(tmp_path / "run1", data)
        second = _run_pipeline(tmp_path / "run2", data)
        same = [a == b for a, b in zip(first, second)]
        notes.append(f"checkpoint {same[0]}, eval csv {same[1]}, loss csv {same[2]}")
        assert all(same)


def test_criterion_8_neighbor_sweep(tmp_path):
    with criterion(8, "sweep k=1..15, minimum error at k > 1") as notes:
        data = tmp_path / "dense.txt"
        assert main(["gen", "--mode", "node", "--n-train", "100", "--n-test", "20", "--d", "32", "--sigma", "0.3",
                     "--spacing", "0.5", "--seed", "1", "-o", str(data)]) == 0
        out = tmp_path / "sweep.csv"
        assert main(["sweep-k", "--k-min", "1", "--k-max", "15", "--epochs", "300", "--seed", "0",
                     "--optimizer", "adam", "--lr", "3e-4", "--neighbor-init-scale", "0.03",
                     "--widths", "64", "32", "32", "--csv", str(out), str(data)]) == 0
        rows = [line.split(",") for line in out.read_text().splitlines()[1:]]
        errs = {int(k): float(e) for k, e in rows}
        assert sorted(errs) == list(range(1, 16))
        best = min(errs, key=errs.get)
        notes.append(f"k=1 {errs[1]:.3f} m, best k={best} {errs[best]:.3f} m")
        assert min(v for k, v in errs.items() if k > 1) < errs[1]


def test_criterion_9_quaternion_metric():
    with criterion(9, "orientation metric: double cover, symmetry, identity, 90 deg fixture") as notes:
        rng = np.random.default_rng(909)
        worst = 0.0
        for _ in range(2000):
            a = Pose.from_arrays(np.zeros(3), rng.standard_normal(4))
            b = Pose.from_arrays(np.zeros(3), rng.standard_normal(4))
            neg_b = Pose(b.position, tuple(-v for v in b.orientation))
            e = orientation_error(a, b)
            worst = max(worst, abs(e - orientation_error(a, neg_b)), abs(e - orientation_error(b, a)))
            assert orientation_error(a, a) == 0.0
            assert abs(orientation_error(a, Pose(a.position, tuple(-v for v in a.orientation)))) <= 1e-9
        half = np.sqrt(0.5)
        fixture = orientation_error(Pose((0, 0, 0), (half, 0.0, 0.0, half)), Pose((0, 0, 0), (1.0, 0.0, 0.0, 0.0)))
        notes.append(f"max invariance gap {worst:.1e}; 90 deg fixture {fixture!r}")
        assert worst <= 1e-9
        assert abs(fixture - 90.0) <= 1e-9
