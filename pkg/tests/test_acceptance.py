"""Acceptance criteria 1-7.

Each test records a one-line verdict that is printed in the pytest
terminal summary under "acceptance criteria".  Criteria 4 and 6 share one
desk-scale training run (ten to twenty minutes on one CPU core).
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import ndimage

from histreg.baseline import IterativeConfig, affine_register_masks, deformable_register_mi
from histreg.fixtures import canvas_pair, canvas_sources, random_composite
from histreg.geometry import (
    CompositeTransform,
    Image2D,
    ThetaVector,
    affine_from_theta,
    compose,
    normalized_to_pixel,
    pixel_centers,
    tps_control_points,
    tps_from_theta,
    warp_image,
)
from histreg.matchnet import ModelConfig
from histreg.metrics import dice, hausdorff_mm, landmark_error
from histreg.pipeline import register_canvases
from histreg.synth import TransformBounds, make_training_set, sample_affine_theta, sample_tps_theta
from histreg.training import TrainConfig, ssd_per_pair, train_stage

CANVAS = (120, 120)
BOUNDS = TransformBounds()

# desk-scale training: 100 source canvases x 5 draws per stage
DESK = {
    "n_sources": 100,
    "n_per_image": 5,
    "train": dict(lr=1e-3, lr_decay=0.95, batch_size=16, epochs=50, val_fraction=0.1, seed=0),
}
N_HELD_OUT = 100


def px(points):
    return normalized_to_pixel(points, CANVAS)


def mean_endpoint_px(a, b, probe):
    return float(np.linalg.norm(px(a(probe)) - px(b(probe)), axis=-1).mean())


# ---------------------------------------------------------------------------
# 1. geometry


def test_criterion_1_geometry(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    probe = pixel_centers((100, 100))
    worst = {"identity": 0.0, "interp": 0.0, "compose": 0.0, "shift": 0.0}

    for kind, make in (("affine", affine_from_theta), ("tps", tps_from_theta)):
        phi = make(ThetaVector.zeros(kind))
        worst["identity"] = max(worst["identity"], float(np.abs(phi(probe) - probe).max()))

    cp = tps_control_points()
    for _ in range(50):
        theta = ThetaVector(rng.uniform(-1, 1, 72), "tps")
        phi = tps_from_theta(theta)
        targets = cp + 0.1 * np.stack([theta.values[:36], theta.values[36:]], axis=-1)
        worst["interp"] = max(worst["interp"], float(np.abs(phi(cp) - targets).max()))

        a = affine_from_theta(ThetaVector(rng.uniform(-1, 1, 6), "affine"))
        comp = compose(a, phi)
        pts = rng.uniform(-1, 1, (500, 2))
        worst["compose"] = max(worst["compose"], float(np.abs(comp(pts) - a(phi(pts))).max()))

    for _ in range(50):
        h, w = rng.integers(8, 40, 2)
        img = rng.random((h, w))
        dr, dc = rng.integers(-3, 4, 2)
        shift = affine_from_theta(ThetaVector([0, 0, 2 * dc / w / 0.1, 0, 0, 2 * dr / h / 0.1], "affine"))
        out = warp_image(Image2D(img), shift, (h, w)).pixels
        oracle = np.zeros_like(img)
        rows, cols = np.arange(h)[:, None] + dr, np.arange(w)[None, :] + dc
        ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        oracle[ok] = img[np.clip(rows, 0, h - 1), np.clip(cols, 0, w - 1)][ok]
        worst["shift"] = max(worst["shift"], float(np.abs(out - oracle).max()))

    elapsed = time.perf_counter() - start
    passed = (
        worst["identity"] <= 1e-9 and worst["interp"] <= 1e-6 and worst["compose"] <= 1e-9
        and worst["shift"] <= 1e-6 and elapsed < 30
    )
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s"
    record_criterion(1, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 2. metric oracles


def _boundary_oracle(m):
    h, w = m.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if m[r, c] and any(
                not (0 <= r + dr < h and 0 <= c + dc < w) or not m[r + dr, c + dc]
                for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
            ):
                pts.append((r, c))
    return pts


def _hausdorff_oracle(a, b, spacing):
    sx, sy = spacing
    pa, pb = _boundary_oracle(a), _boundary_oracle(b)

    def directed(src, dst):
        return max(min(((r - r2) * sy) ** 2 + ((c - c2) * sx) ** 2 for r2, c2 in dst) for r, c in src)

    return math.sqrt(max(directed(pa, pb), directed(pb, pa)))


def _dice_oracle(a, b):
    inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x and y)
    return 2.0 * inter / (int(a.sum()) + int(b.sum()))


def _landmark_oracle(pairs, phi):
    dists = []
    for p, q in pairs:
        m = phi(np.asarray(p)[None])[0]
        dx, dy = q[0] - m[0], q[1] - m[1]
        dists.append(math.sqrt(dx * dx + dy * dy))
    return math.fsum(dists) / len(dists)


def _random_mask(rng, h, w):
    noise = ndimage.gaussian_filter(rng.random((h, w)), rng.uniform(0.5, 3))
    m = noise > np.quantile(noise, rng.uniform(0.3, 0.9))
    if not m.any():
        m[h // 2, w // 2] = True
    return m


def test_criterion_2_metric_oracles(record_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    mismatches = 0
    n = 200
    for _ in range(n):
        h, w = rng.integers(2, 65, 2)
        a, b = _random_mask(rng, h, w), _random_mask(rng, h, w)
        spacing = tuple(rng.uniform(0.1, 2.0, 2))
        mismatches += dice(a, b) != _dice_oracle(a, b)
        mismatches += hausdorff_mm(a, b, spacing) != _hausdorff_oracle(a, b, spacing)
        phi = affine_from_theta(ThetaVector(rng.uniform(-2, 2, 6), "affine"))
        pairs = [(rng.uniform(0, 60, 2), rng.uniform(0, 60, 2)) for _ in range(int(rng.integers(1, 40)))]
        mismatches += landmark_error(pairs, phi) != _landmark_oracle(pairs, phi)
    elapsed = time.perf_counter() - start
    passed = mismatches == 0 and elapsed < 120
    detail = f"{mismatches} mismatches over {n} cases x 3 metrics, {elapsed:.1f} s"
    record_criterion(2, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 3. gradient check


def _relative_gradient_error(kind, seed):
    rng = np.random.default_rng(seed)
    n = 6 if kind == "affine" else 72
    moving = torch.as_tensor(rng.random((1, 1, 4, 4)))
    fixed = torch.as_tensor(rng.random((1, 1, 4, 4)))
    theta = torch.as_tensor(rng.uniform(-0.5, 0.5, (1, n))).requires_grad_(True)
    (grad,) = torch.autograd.grad(ssd_per_pair(moving, fixed, theta, kind, 0.1).sum(), theta)
    eps = 1e-6
    fd = np.zeros(n)
    with torch.no_grad():
        for k in range(n):
            t = theta.detach().clone()
            t[0, k] += eps
            up = float(ssd_per_pair(moving, fixed, t, kind, 0.1).sum())
            t[0, k] -= 2 * eps
            down = float(ssd_per_pair(moving, fixed, t, kind, 0.1).sum())
            fd[k] = (up - down) / (2 * eps)
    return float(np.linalg.norm(grad.numpy()[0] - fd) / max(np.linalg.norm(fd), 1e-12))


def test_criterion_3_gradient_check(record_criterion):
    errors = {kind: max(_relative_gradient_error(kind, s) for s in range(10)) for kind in ("affine", "tps")}
    passed = all(e <= 1e-3 for e in errors.values())
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in errors.items()) + " over 10 toy pairs each"
    record_criterion(3, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 4 and 6. desk-scale training


@pytest.fixture(scope="module")
def desk_models():
    torch.set_num_threads(1)
    masks, textures = canvas_sources(DESK["n_sources"], seed=0, shape=CANVAS)
    cfg = TrainConfig(**DESK["train"])
    start = time.perf_counter()
    models, reports = {}, {}
    for kind, images in (("affine", masks), ("tps", textures)):
        tuples = make_training_set(images, DESK["n_per_image"], kind, rng_seed=1)
        assert len(tuples) == 500
        models[kind], reports[kind] = train_stage(tuples, kind, cfg, ModelConfig(kind=kind, canvas=CANVAS))
    return models, reports, time.perf_counter() - start


@pytest.fixture(scope="module")
def held_out(desk_models):
    """Fresh sources warped by composite transforms drawn within bounds."""
    models, _, _ = desk_models
    masks, textures = canvas_sources(N_HELD_OUT, seed=999, shape=CANVAS)
    rng = np.random.default_rng(5)
    cases = []
    for m, x in zip(masks, textures):
        phi = random_composite(rng, BOUNDS)
        fixed_mask = warp_image(m, phi, CANVAS, order="nearest").pixels
        fixed = warp_image(x, phi, CANVAS).pixels
        affine, tps, _ = register_canvases(m.pixels, x.pixels, fixed_mask, fixed, models["affine"], models["tps"])
        same = register_canvases(m.pixels, x.pixels, m.pixels, x.pixels, models["affine"], models["tps"])
        cases.append({"mask": m, "phi": phi, "fixed_mask": fixed_mask, "est": compose(affine, tps),
                      "self": compose(same[0], same[1])})
    return cases


def test_criterion_4_synthetic_recovery(desk_models, held_out, record_criterion):
    _, reports, train_s = desk_models
    probe = pixel_centers(CANVAS)
    dices, endpoints, inside, selfs = [], [], [], []
    for c in held_out:
        warped = warp_image(c["mask"], c["est"], CANVAS, order="nearest").pixels
        dices.append(dice(warped, c["fixed_mask"]))
        endpoints.append(mean_endpoint_px(c["est"], c["phi"], probe))
        inside.append(mean_endpoint_px(c["est"], c["phi"], probe[c["fixed_mask"] > 0]))
        selfs.append(mean_endpoint_px(c["self"], lambda p: p, probe))
    d, e, s = float(np.mean(dices)), float(np.mean(endpoints)), float(np.mean(selfs))
    ratio = reports["affine"].best_val_loss / reports["affine"].initial_val_loss
    passed = d >= 0.95 and e <= 3.0 and s <= 2.0 and train_s <= 2 * 3600
    detail = (
        f"held-out Dice {d:.4f} (>= 0.95), endpoint {e:.2f} px (<= 3; inside tissue {np.mean(inside):.2f}), "
        f"self {s:.2f} px (<= 2), "
        f"training {train_s / 60:.1f} min, affine val loss ratio {ratio:.3f}"
    )
    record_criterion(4, passed, detail)
    assert passed, detail


def test_criterion_6_plausibility(held_out, record_criterion):
    dets = [float(c["est"].jacobian_determinant((100, 100)).min()) for c in held_out]
    frac = float(np.mean([v > 0 for v in dets]))
    passed = frac >= 0.99
    detail = f"{frac:.1%} of {len(dets)} composites fold-free, smallest min det {min(dets):.3f}"
    record_criterion(6, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 5. baseline parity


def test_criterion_5_baseline_parity(desk_models, record_criterion):
    models, _, _ = desk_models
    rng = np.random.default_rng(21)
    cfg = IterativeConfig()

    affine_dice = []
    for _ in range(32):
        mask, _ = canvas_pair(rng, CANVAS)
        ang = np.deg2rad(rng.uniform(-10, 10))
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        shift = rng.uniform(-0.1, 0.1, 2)
        theta = np.r_[rot[0, 0] - 1, rot[0, 1], shift[0], rot[1, 0], rot[1, 1] - 1, shift[1]] / 0.1
        gt = affine_from_theta(ThetaVector(theta, "affine"))
        fixed = warp_image(Image2D(mask), gt, CANVAS, order="nearest").pixels
        est = affine_register_masks(mask, fixed, cfg)
        affine_dice.append(dice(warp_image(Image2D(mask), est, CANVAS, order="nearest").pixels, fixed))

    drops, t_iter, t_net, passes = 0, [], [], []
    for _ in range(16):
        mask, tex = canvas_pair(rng, CANVAS)
        phi = random_composite(rng, BOUNDS)
        fixed_mask = warp_image(Image2D(mask), phi, CANVAS, order="nearest").pixels
        fixed = warp_image(Image2D(tex), phi, CANVAS).pixels

        t0 = time.perf_counter()
        init = affine_register_masks(mask, fixed_mask, cfg)
        affine, ffd = deformable_register_mi(tex, fixed, init, cfg)
        t_iter.append(time.perf_counter() - t0)
        before = dice(warp_image(Image2D(mask), init, CANVAS, order="nearest").pixels, fixed_mask)
        after = dice(warp_image(Image2D(mask), CompositeTransform([affine, ffd]), CANVAS, order="nearest").pixels,
                     fixed_mask)
        drops += after < before

        calls = models["affine"].forward_calls + models["tps"].forward_calls
        t0 = time.perf_counter()
        register_canvases(mask, tex, fixed_mask, fixed, models["affine"], models["tps"])
        t_net.append(time.perf_counter() - t0)
        passes.append(models["affine"].forward_calls + models["tps"].forward_calls - calls)

    speedup = float(np.median(t_iter) / np.median(t_net))
    passed = min(affine_dice) >= 0.98 and drops == 0 and set(passes) == {2} and speedup >= 10
    detail = (
        f"affine-on-masks min Dice {min(affine_dice):.4f} over 32, MI stage lowered Dice in {drops}/16, "
        f"forward passes {sorted(set(passes))}, speed-up {speedup:.0f}x "
        f"({np.median(t_net) * 1e3:.0f} ms vs {np.median(t_iter):.2f} s)"
    )
    record_criterion(5, passed, detail)
    assert passed, detail


# ---------------------------------------------------------------------------
# 7. CLI smoke


SMOKE_CONFIG = {"n_sources": 6, "n_per_image": 2, "epochs": 2, "batch_size": 4, "iterative": {"max_iters": 30}}


def _run_cli(root: Path):
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMOKE_CONFIG))
    steps = [
        ["make-fixtures", "--out", "data", "--patients", "2", "--slices", "2"],
        ["preprocess", "--manifest", "data/manifest.json", "--out", "pre"],
        ["synth", "--out", "synth"],
        ["train", "--data", "synth", "--out", "models"],
        ["register", "--manifest", "data/manifest.json", "--models", "models", "--out", "network"],
        ["register", "--manifest", "data/manifest.json", "--backend", "baseline", "--out", "baseline",
         "--workers", "2"],
        ["evaluate", "--manifest", "data/manifest.json", "--results", "network", "--out", "eval"],
        ["report", "--runs", "network=network", "baseline=baseline", "--out", "report"],
    ]
    codes = []
    for step in steps:
        proc = subprocess.run(
            [sys.executable, "-m", "histreg.cli", *step, "--config", "config.json", "--seed", "0"],
            cwd=root, capture_output=True, text=True,
        )
        codes.append(proc.returncode)
        if proc.returncode:
            print(proc.stderr)
    return codes


EXPECTED_ARTIFACTS = [
    "data/manifest.json",
    "pre/prepared.json",
    "pre/run_config.json",
    "synth/affine/index.json",
    "synth/tps/index.json",
    "models/affine.pt",
    "models/tps.pt",
    "models/train_affine.json",
    "models/train_tps.csv",
    "models/loss_curves.png",
    "network/metrics.csv",
    "network/summary.json",
    "network/timing.json",
    "network/p00_p00_s00.json",
    "network/p00_p00_s00_warped_hist.png",
    "network/p00_p00_s00_overlay.png",
    "network/p00_p00_s00_label_cancer.png",
    "baseline/metrics.csv",
    "eval/metrics.csv",
    "report/report.md",
    "report/metrics_boxplot.png",
]


def _tree(root: Path):
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "timing.json"
    }


def test_criterion_7_cli_smoke(tmp_path, record_criterion):
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    second.mkdir()
    codes = _run_cli(first) + _run_cli(second)
    missing = [a for a in EXPECTED_ARTIFACTS if not (first / a).exists()]
    a, b = _tree(first), _tree(second)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    passed = set(codes) == {0} and not missing and not differing
    detail = (
        f"exit codes {sorted(set(codes))}, {len(EXPECTED_ARTIFACTS) - len(missing)}/{len(EXPECTED_ARTIFACTS)} "
        f"declared artifacts, {len(a)} files compared, {len(differing)} differ on rerun"
    )
    record_criterion(7, passed, detail)
    assert passed, f"{detail}; missing {missing}; differing {differing[:5]}"
