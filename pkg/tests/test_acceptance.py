"""
End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL`` line with its measured
numbers, then asserts. Runtimes are asserted too.
"""

import json
import time

import numpy as np
import pytest
import torch

from oracles import (
    central_difference,
    dense_attention,
    mae_rmse_reference,
    raster_iou,
    rel_error,
)
from repcount.cli import main as cli_main
from repcount.config import build_backbone, build_dpn, build_rpn, desk_config
from repcount.dataio import ClassSpec, SceneSpec, generate_dataset, generate_scene
from repcount.densitymap import count, render_density
from repcount.dpn import mse_loss
from repcount.evaluate import mae_rmse, topk_count_estimate
from repcount.features import positional_embeddings, to_sequence
from repcount.geometry import (
    PROV_TEACHER,
    AnchorConfig,
    decode_boxes,
    encode_boxes,
    generate_anchors,
    iou,
    sample_anchor_batch,
)
from repcount.pipeline import RepCounter, evaluate_dataset
from repcount.reprpn import RepRPN, RepRPNConfig, reprpn_loss
from repcount.teachers import OracleLabelTeacher
from repcount.train import image_targets, smoothed, train_dpn, train_reprpn


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}")
        return ok
    return emit


def test_c1_geometry_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        a = np.sort(rng.integers(0, 32, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        b = np.sort(rng.integers(0, 32, (2, 2)), axis=0).T.ravel()[[0, 2, 1, 3]]
        worst = max(worst, abs(iou(a, b) - raster_iou(a, b)))

    anchors = generate_anchors(AnchorConfig(), 12, 9)
    xy = rng.uniform(0, 300, (5000, 2))
    gt = np.hstack([xy, xy + rng.uniform(1, 300, (5000, 2))])
    an = anchors[rng.integers(0, len(anchors), 5000)]
    round_trip = np.abs(decode_boxes(encode_boxes(gt, an), an) - gt).max()

    counts_ok = all(
        len(generate_anchors(AnchorConfig(sizes=s, aspect_ratios=r), hf, wf)) == hf * wf * len(s) * len(r)
        for s in [(32, 64, 128, 256), (8,)] for r in [(0.5, 1, 2), (1,)] for hf, wf in [(1, 1), (7, 5), (16, 16)]
    )
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and round_trip < 1e-5 and counts_ok and dt < 10
    verdict(1, ok, f"iou_max_err={worst:.2e} roundtrip_max_err={round_trip:.2e} anchor_counts={counts_ok} t={dt:.1f}s")
    assert ok


def test_c2_density_conservation(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    h, w = 64, 96
    corners = np.array([[0, 0], [w - 1e-9, 0], [0, h - 1e-9], [w - 1e-9, h - 1e-9]])
    worst = 0.0
    for i in range(200):
        dots = rng.uniform(0, [w, h], (int(rng.integers(0, 40)), 2))
        if i % 2 == 0:
            dots = np.vstack([dots, corners[rng.permutation(4)[: 1 + i % 4]]])
        worst = max(worst, abs(count(render_density(dots, h, w)) - len(dots)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-3 and dt < 10
    verdict(2, ok, f"max|count-|D||={worst:.2e} t={dt:.1f}s")
    assert ok


def test_c3_attention(verdict):
    t0 = time.perf_counter()
    torch.manual_seed(3)
    model = RepRPN(RepRPNConfig(d=64, heads=8)).double()
    fm = torch.randn(64, 5, 6, dtype=torch.float64)
    x = to_sequence(fm, positional_embeddings(5, 6, 64))

    fwd_err, row_err = 0.0, 0.0
    h = x
    for layer in model.encoder:
        att = layer.attn
        ws = [w.detach().numpy() for w in (att.w_q, att.w_k, att.w_v, att.w_o)]
        ref = dense_attention(h.detach().numpy(), *ws, heads=att.heads, scaled=att.scaled)
        fwd_err = max(fwd_err, np.abs(att(h).detach().numpy() - ref).max())
        row_err = max(row_err, (att.attention_weights(h).sum(-1) - 1).abs().max().item())
        h = layer(h)

    perm = torch.randperm(len(x), generator=torch.Generator().manual_seed(0))
    equi = 0.0
    for standard in (False, True):
        m = RepRPN(RepRPNConfig(d=64, heads=8, standard=standard)).double()
        equi = max(equi, (m.encode_sequence(x[perm]) - m.encode_sequence(x)[perm]).abs().max().item())
    dt = time.perf_counter() - t0
    ok = fwd_err <= 1e-6 and row_err <= 1e-6 and equi <= 1e-9 and dt < 10
    verdict(3, ok, f"forward_err={fwd_err:.2e} rowsum_err={row_err:.2e} equivariance_err={equi:.2e} t={dt:.1f}s")
    assert ok


def test_c4_gradient_checks(verdict):
    t0 = time.perf_counter()
    spec = SceneSpec(height=32, width=32, classes=[
        ClassSpec("circle", (220, 60, 60), (6, 7), (3, 4)),
        ClassSpec("square", (60, 60, 220), (6, 7), (2, 2)),
    ])
    img = generate_scene(spec, np.random.default_rng(4))
    # the trained (residual) encoder, plus a shallow plain stack: deeper plain
    # stacks collapse their tokens and the q/k gradients drop below what
    # central differences can resolve in float64
    variants = [
        {"rpn.standard": True, "rpn.layers": 5, "rpn.d": 8, "rpn.heads": 4},
        {"rpn.standard": False, "rpn.layers": 2, "rpn.d": 16, "rpn.heads": 8},
    ]
    rpn_err, params = 0.0, []
    for v in variants:
        cfg = desk_config(dtype="float64", **{"backbone.channels": 16, "dpn.widths": (8, 8, 4, 4, 1), **v})
        fm = build_backbone(cfg).extract(img.image, torch.float64)
        rpn = build_rpn(cfg)
        with torch.no_grad():
            rpn.rep_head.bias.fill_(0.5)  # a generic point, not the all-zero init
        targets = image_targets(img, rpn.anchors_for(*fm.shape[1:]), OracleLabelTeacher())
        idx = sample_anchor_batch(targets.labels, 96, np.random.default_rng(0))
        ps = [p for p in rpn.parameters() if p.requires_grad]
        reprpn_loss(rpn(fm), targets, idx).backward()
        num = central_difference(lambda: reprpn_loss(rpn(fm), targets, idx).item(), ps)
        rpn_err = max([rpn_err] + [rel_error(p.grad.numpy(), g) for p, g in zip(ps, num)])
        params += ps

    dpn = build_dpn(cfg)
    with torch.no_grad():
        for conv in dpn.convs:
            conv.bias.uniform_(0.05, 0.3)  # keep ReLU pre-activations off the kink
    box = img.exemplar_boxes[0]
    z_star = torch.tensor(render_density(img.dots, 32, 32))
    dparams = list(dpn.parameters())
    mse_loss(dpn.predict(fm, fm, box, 8, (32, 32)), z_star).backward()
    num = central_difference(lambda: mse_loss(dpn.predict(fm, fm, box, 8, (32, 32)), z_star).item(), dparams)
    dpn_err = max(rel_error(p.grad.numpy(), g) for p, g in zip(dparams, num))

    dt = time.perf_counter() - t0
    n = sum(p.numel() for p in params) + sum(p.numel() for p in dparams)
    ok = rpn_err < 1e-4 and dpn_err < 1e-4 and dt < 120
    verdict(4, ok, f"reprpn_rel_err={rpn_err:.2e} mse_rel_err={dpn_err:.2e} params={n} t={dt:.1f}s")
    assert ok


def _strip(v):
    return [0, 0, 10, 10 * v] if v > 0 else [50, 50, 60, 60]


def test_c5_protocol_fixtures(verdict):
    t0 = time.perf_counter()
    gt = [[0, 0, 10, 10]]
    traces = [
        ([9, 12, 100], [0.5, 0.4, 0.1], 3, 10.5),
        ([4, 6], [0.1, 0.2], 2, 5.0),
        ([7], [0.9], 1, 7.0),
        ([14], [0.8], 1, 14.0),
        ([30, 10, 2], [0.4, 0.35, 0.0], 3, 20.0),
    ]
    exact = all(topk_count_estimate([_strip(v) for v in ious], c, gt, k) == want for c, ious, k, want in traces)
    exact &= mae_rmse([(10, 12)]) == (2.0, 2.0) and mae_rmse([(0, 3), (0, 4)]) == (3.5, np.sqrt(12.5))

    rng = np.random.default_rng(5)
    worst, ordered = 0.0, True
    for _ in range(100):
        pairs = [tuple(p) for p in rng.uniform(0, 200, (int(rng.integers(1, 50)), 2))]
        got, ref = mae_rmse(pairs), mae_rmse_reference(pairs)
        worst = max(worst, abs(got[0] - ref[0]), abs(got[1] - ref[1]))
        ordered &= got[1] >= got[0]
    dt = time.perf_counter() - t0
    ok = exact and worst < 1e-9 and ordered and dt < 5
    verdict(5, ok, f"hand_traces_exact={exact} metric_err={worst:.1e} rmse>=mae={ordered} t={dt:.2f}s")
    assert ok


def test_c6_anchor_teacher_protocol(verdict):
    t0 = time.perf_counter()
    spec = SceneSpec(classes=[
        ClassSpec("circle", (220, 60, 60), (10, 12), (8, 8)),
        ClassSpec("square", (60, 60, 220), (12, 14), (5, 5)),
    ])
    img = generate_scene(spec, np.random.default_rng(6))
    hidden_count = img.hidden_gt[1].count
    anchors = generate_anchors(AnchorConfig(sizes=(8, 12, 16, 24), stride=8), 16, 16)
    on = image_targets(img, anchors, OracleLabelTeacher())
    off = image_targets(img, anchors, None)
    teach = on.provenance == PROV_TEACHER
    matched = int(np.sum(teach & (on.labels == 1) & (on.repetition == hidden_count)))
    n_off = int(np.sum(off.provenance == PROV_TEACHER))
    dt = time.perf_counter() - t0
    ok = matched >= 1 and n_off == 0 and dt < 5
    verdict(6, ok, f"teacher_anchors_with_c*={hidden_count}: {matched} teacher_anchors_when_off={n_off} t={dt:.2f}s")
    assert ok


def test_c7_overfit_one_sample(verdict):
    t0 = time.perf_counter()
    spec = SceneSpec(classes=[ClassSpec(count_range=(12, 12))])
    img = generate_scene(spec, np.random.default_rng(7))
    # overfitting one sample is a probe of the optimisation path, run at a brisker rate
    cfg = desk_config(lr=1e-3)
    fm = build_backbone(cfg).extract(img.image)
    rpn = build_rpn(cfg)
    targets = image_targets(img, rpn.anchors_for(*fm.shape[1:]), OracleLabelTeacher())
    idx = np.flatnonzero(targets.labels >= 0)
    opt = torch.optim.Adam(rpn.parameters(), lr=cfg.lr)
    losses = []
    for _ in range(30):
        loss = reprpn_loss(rpn(fm), targets, idx, cfg.lam)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    sm = smoothed(losses, 5)
    rpn_ok = bool(np.all(np.diff(sm) < 0))

    dpn = build_dpn(cfg)
    box = img.exemplar_boxes[0]
    z_star = torch.tensor(render_density(img.dots, img.height, img.width), dtype=torch.float32)
    opt = torch.optim.Adam(dpn.parameters(), lr=cfg.lr)
    mses = []
    for _ in range(100):
        loss = mse_loss(dpn.predict(fm, fm, box, 8, (img.height, img.width)), z_star)
        opt.zero_grad()
        loss.backward()
        opt.step()
        mses.append(loss.item())
    final = mse_loss(dpn.predict(fm, fm, box, 8, (img.height, img.width)), z_star).item()
    ratio = final / mses[0]
    dt = time.perf_counter() - t0
    ok = rpn_ok and ratio < 0.1 and dt < 180
    verdict(7, ok, f"smoothed_rpn_loss {sm[0]:.3f}->{sm[-1]:.3f} strictly_decreasing={rpn_ok} "
                   f"dpn_mse_ratio={ratio:.3f} t={dt:.1f}s")
    assert ok


@pytest.mark.slow
def test_c8_desk_scale_learning_signal(verdict):
    t0 = time.perf_counter()
    spec = SceneSpec(classes=[ClassSpec("circle", (220, 60, 60), (8, 12), (5, 30))])
    train = generate_dataset(spec, 150, seed=1, prefix="train")
    test = generate_dataset(spec, 50, seed=2, prefix="test")
    cfg = desk_config(epochs_rpn=50, epochs_dpn=50, seed=0)
    rpn_ck = train_reprpn(train, cfg)
    dpn_ck = train_dpn(train, rpn_ck, cfg)
    report = evaluate_dataset(RepCounter.from_checkpoints(rpn_ck, dpn_ck), test, (1,))
    r = report["top1_repetition_pearson"]
    mae = report["metrics"]["1"]["mae"]
    mean = np.mean([im.gt_count for im in train])
    baseline = float(np.mean([abs(im.gt_count - mean) for im in test]))
    dt = time.perf_counter() - t0
    ok = r > 0.5 and mae <= 0.9 * baseline and dt < 1800
    verdict(8, ok, f"pearson={r:.3f} top1_mae={mae:.2f} train_mean_baseline_mae={baseline:.2f} "
                   f"improvement={1 - mae / baseline:.1%} t={dt:.0f}s")
    assert ok


def test_c9_knowledge_transfer_ablation(verdict):
    t0 = time.perf_counter()
    spec = SceneSpec(height=96, width=96, classes=[
        ClassSpec("circle", (220, 60, 60), (8, 11), (5, 12)),
        ClassSpec("square", (60, 60, 220), (9, 12), (3, 8)),
    ])
    train = generate_dataset(spec, 6, seed=9, prefix="train")
    test = generate_dataset(spec, 4, seed=10, prefix="test")
    reports = {}
    for mode in ("oracle", "none"):
        cfg = desk_config(teacher=mode, epochs_rpn=2, epochs_dpn=2)
        rpn_ck = train_reprpn(train, cfg)
        dpn_ck = train_dpn(train, rpn_ck, cfg)
        reports[mode] = evaluate_dataset(RepCounter.from_checkpoints(rpn_ck, dpn_ck), test, (1, 3))
    on, off = (reports[m]["training"] for m in ("oracle", "none"))
    t_on, t_off = on["rpn_target_stats"]["teacher"], off["rpn_target_stats"]["teacher"]
    complete = all(set(r["metrics"]) == {"1", "3"} and len(r["images"]) == len(test) for r in reports.values())
    dt = time.perf_counter() - t0
    ok = complete and t_on > 0 and t_off == 0 and on != off
    verdict(9, ok, f"reports_complete={complete} teacher_anchors kt_on={t_on} kt_off={t_off} "
                   f"dpn_teacher_targets kt_on={on['dpn_exemplar_stats']['teacher']} "
                   f"kt_off={off['dpn_exemplar_stats']['teacher']} t={dt:.0f}s")
    assert ok


def _full_run(root):
    spec = {"height": 96, "width": 96, "classes": [
        {"kind": "circle", "color": [220, 60, 60], "size_range": [8, 11], "count_range": [5, 12]},
        {"kind": "square", "color": [60, 60, 220], "size_range": [9, 12], "count_range": [3, 6]}]}
    root.mkdir()
    (root / "spec.json").write_text(json.dumps(spec))
    (root / "cfg.json").write_text(json.dumps(desk_config(epochs_rpn=3, epochs_dpn=3).to_dict()))
    steps = [
        ["gen-data", "--spec", str(root / "spec.json"), "--out", str(root / "data"), "--n", "5", "--seed", "3"],
        ["train-rpn", "--config", str(root / "cfg.json"), "--data", str(root / "data"), "--out", str(root / "rpn.ckpt")],
        ["train-dpn", "--config", str(root / "cfg.json"), "--data", str(root / "data"),
         "--ckpt-rpn", str(root / "rpn.ckpt"), "--out", str(root / "dpn.ckpt")],
        ["eval", "--ckpt-rpn", str(root / "rpn.ckpt"), "--ckpt-dpn", str(root / "dpn.ckpt"),
         "--data", str(root / "data"), "--k", "1,3", "--out", str(root / "report.json")],
    ]
    for argv in steps:
        assert cli_main(["--threads", "1", *argv]) == 0
    return {name: (root / name).read_bytes() for name in ("rpn.ckpt", "dpn.ckpt", "report.json")}


def test_c10_reproducibility(verdict, tmp_path):
    t0 = time.perf_counter()
    a = _full_run(tmp_path / "a")
    b = _full_run(tmp_path / "b")
    same = {name: a[name] == b[name] for name in a}
    dt = time.perf_counter() - t0
    ok = all(same.values())
    verdict(10, ok, " ".join(f"{k}_identical={v}" for k, v in same.items()) + f" t={dt:.0f}s")
    assert ok
