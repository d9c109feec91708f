"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The training-effect experiment (criterion 5) runs three arms over five seeds
on the 2000/500 synthetic set and is shared by its sub-criteria; everything
else is self-contained and fast.
"""

import math
import time

import numpy as np
import pytest

from palnet import autodiff as ad
from palnet.ablation import run_grid
from palnet.attribution import ChannelStrategy, attribution, channel_slice_mean, grad_attribution, reduce_channels
from palnet.autodiff import Tape, Tensor
from palnet.data import generate_dataset, load_manifest, load_sample, manifest_path
from palnet.gradcheck import run_gradcheck
from palnet.heatmap import LandmarkSet, PriorHeatmap, gaussian_heatmap, standardize_map, transform_landmarks
from palnet.losses import pal_loss, pearson
from palnet.model import forward, init_params, load_checkpoint, toy64
from palnet.seeding import stream
from palnet.train import TrainConfig, evaluate, train

# experiment grid used for criterion 5 (and reused by the half-map check)
EXPERIMENT_SEEDS = [0, 1, 2, 3, 4]
EXPERIMENT_EPOCHS = 4
EXPERIMENT_TAP = "relu4"
EXPERIMENT_WEIGHT = 0.1
TIME_BUDGET_S = 1800.0


def _report(name: str, ok: bool, detail: str = "") -> bool:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return ok


# ---------------------------------------------------------------------------
# criterion 1: gradient-path correctness
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_path():
    report = run_gradcheck(seed=0, eps=1e-5, threshold=1e-4)
    ce_err = report["combos"]["ce-only"]["max_rel_err"]
    ok = report["passed"] and report["elapsed_s"] < 120.0 and ce_err < 1e-6
    detail = (
        f"max rel err {report['max_rel_err']:.2e} over 7 combos "
        f"(ce-only {ce_err:.2e}), {report['elapsed_s']:.0f}s"
    )
    assert _report("criterion 1 gradient-path correctness", ok, detail)


# ---------------------------------------------------------------------------
# criterion 2: exact-contribution identity on bias-free nets
# ---------------------------------------------------------------------------


def test_criterion_2_exact_contribution_identity():
    worst = 0.0
    for trial in range(20):
        spec = toy64(bias=False)
        params = init_params(spec, trial)
        rng = stream(trial, "exactness")
        images = rng.uniform(0.0, 1.0, size=(1, 1, 64, 64))
        trace = forward(spec, params, images, Tape())
        total = ad.reduce_sum(trace.logits)
        target = total.item()
        taps = [trace.taps[name] for name in spec.tap_names()]
        grads = ad.backward(total, taps)
        for g, tap in zip(grads, taps):
            contribution = float((g.data * tap.data).sum())
            worst = max(worst, abs(contribution - target) / abs(target))
    ok = worst < 1e-8
    assert _report(
        "criterion 2 exact-contribution identity",
        ok,
        f"20 trials x 4 taps, max rel deviation {worst:.2e}",
    )


# ---------------------------------------------------------------------------
# criterion 3: correlation-loss invariants
# ---------------------------------------------------------------------------


def test_criterion_3_pal_invariants():
    rng = stream(0, "pal-invariants")
    prior = standardize_map(PriorHeatmap(rng.uniform(size=(16, 16)))).values

    perfect = pal_loss(Tensor(prior.reshape(1, 1, 16, 16)), prior).item()
    ok_a = abs(perfect - (-256.0)) <= 1e-9

    worst_gap = 0.0
    for _ in range(100):
        a = rng.uniform(size=(1, 1, 16, 16))
        alpha = float(rng.uniform(0.02, 50.0))
        beta = float(rng.uniform(-10.0, 10.0))
        gap = abs(
            pal_loss(Tensor(alpha * a + beta), prior).item()
            - pal_loss(Tensor(a), prior).item()
        )
        worst_gap = max(worst_gap, gap)
    ok_b = worst_gap <= 1e-9

    tape = Tape()
    amap = tape.leaf(rng.uniform(0.1, 1.0, size=(2, 8, 16, 16)), requires_grad=True)
    reduced = reduce_channels(amap, ChannelStrategy("mean_of_half"))
    (g,) = ad.backward(pal_loss(reduced, prior), [amap])
    free_max = float(np.abs(g.data[:, 4:]).max())
    constrained_any = bool((g.data[:, :4] != 0).any())
    ok_c = free_max == 0.0 and constrained_any

    ok = ok_a and ok_b and ok_c
    assert _report(
        "criterion 3 correlation-loss invariants",
        ok,
        f"perfect match {perfect:.12f} (want -256), affine gap {worst_gap:.2e}, "
        f"free-half grad max {free_max}",
    )


# ---------------------------------------------------------------------------
# criterion 4: prior heatmap correctness
# ---------------------------------------------------------------------------


def test_criterion_4_prior_correctness():
    rng = stream(0, "prior")
    points = rng.uniform(2.0, 29.0, size=(6, 2))
    got = gaussian_heatmap(LandmarkSet(points), 32, 32, sigma=3.0).values
    oracle = np.zeros((32, 32))
    for i in range(32):
        for j in range(32):
            acc = 0.0
            for x, y in points:
                acc += math.exp(-(((i - y) ** 2 + (j - x) ** 2) / 18.0)) / math.sqrt(18.0 * math.pi)
            oracle[i, j] = acc
    closed_form_err = float(np.abs(got - oracle).max())
    ok_closed = closed_form_err <= 1e-12

    peak = gaussian_heatmap(LandmarkSet(np.array([[16.0, 16.0]])), 32, 32, 3.0).values[16, 16]
    ok_peak = abs(peak - 0.1329807601338109) <= 1e-12

    std = standardize_map(PriorHeatmap(got))
    ok_std = abs(std.values.mean()) <= 1e-9 and abs(std.values.var() - 1.0) <= 1e-9

    int_points = LandmarkSet(np.array([[5.0, 8.0], [20.0, 25.0], [11.0, 30.0]]))
    flipped = transform_landmarks(int_points, 0.0, True, 32, 32)
    flip_err = float(
        np.abs(
            gaussian_heatmap(flipped, 32, 32).values
            - gaussian_heatmap(int_points, 32, 32).values[:, ::-1]
        ).max()
    )
    ok_flip = flip_err <= 1e-9

    ok = ok_closed and ok_peak and ok_std and ok_flip
    assert _report(
        "criterion 4 prior correctness",
        ok,
        f"closed-form err {closed_form_err:.1e}, peak {peak:.9f}, "
        f"standardized mean/var ok={ok_std}, flip err {flip_err:.1e}",
    )


# ---------------------------------------------------------------------------
# criterion 5: training effect (directional trend over 5 seeds)
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("experiment"))
    ds = f"{root}/ds"
    t0 = time.perf_counter()
    generate_dataset(ds, seed=7, n=2000, split="train")
    generate_dataset(ds, seed=7, n=500, split="test")
    base = dict(
        train_manifest=manifest_path(ds, "train"),
        test_manifest=manifest_path(ds, "test"),
        epochs=EXPERIMENT_EPOCHS,
        tap=EXPERIMENT_TAP,
    )
    grid = [
        {"method": "none", "config_id": "baseline"},
        {
            "method": "grad_input", "strategy": "mean_of_half",
            "pal_weight": EXPERIMENT_WEIGHT, "config_id": "pal",
        },
        {
            "method": "grad", "strategy": "all",
            "pal_weight": EXPERIMENT_WEIGHT, "config_id": "all-channels",
        },
    ]
    rows = run_grid(grid, EXPERIMENT_SEEDS, base, root)
    elapsed = time.perf_counter() - t0
    agg = {r["config_id"]: r for r in rows if r["seed"] == "aggregate"}
    assert all(r["status"] == "ok" for r in rows if r["seed"] != "aggregate")
    return {"rows": rows, "agg": agg, "elapsed": elapsed, "root": root, "base": base}


def test_criterion_5a_correlation_gap(experiment):
    gap = (
        experiment["agg"]["pal"]["attr_prior_corr"]
        - experiment["agg"]["baseline"]["attr_prior_corr"]
    )
    ok = gap >= 0.1
    assert _report(
        "criterion 5a attribution-prior correlation gap",
        ok,
        f"pal {experiment['agg']['pal']['attr_prior_corr']:.3f} vs baseline "
        f"{experiment['agg']['baseline']['attr_prior_corr']:.3f} (gap {gap:.3f} >= 0.1)",
    )


def test_criterion_5b_accuracy_not_worse(experiment):
    pal = experiment["agg"]["pal"]["test_acc"]
    base = experiment["agg"]["baseline"]["test_acc"]
    ok = pal >= base
    assert _report(
        "criterion 5b mean accuracy",
        ok,
        f"pal {pal:.4f} >= baseline {base:.4f} (5 seeds)",
    )


def test_criterion_5c_strategy_ordering(experiment):
    half = experiment["agg"]["pal"]["test_acc"]
    full = experiment["agg"]["all-channels"]["test_acc"]
    ok = half >= full
    assert _report(
        "criterion 5c channel-strategy ordering",
        ok,
        f"grad_input+mean_of_half {half:.4f} >= all-channels {full:.4f}",
    )


def test_criterion_5_runtime_and_learnability(experiment):
    base_acc = experiment["agg"]["baseline"]["test_acc"]
    ok_time = experiment["elapsed"] < TIME_BUDGET_S
    ok_learn = base_acc >= 0.70  # plain CE reaches 70% within <= 10 epochs
    assert _report(
        "criterion 5 runtime + learnability gate",
        ok_time and ok_learn,
        f"{experiment['elapsed']:.0f}s < {TIME_BUDGET_S:.0f}s, baseline {base_acc:.3f} >= 0.70",
    )


def test_constrained_half_tracks_prior_better_than_free_half(experiment):
    ckpt = f"{experiment['root']}/runs/pal/seed0/best.ckpt"
    spec, params = load_checkpoint(ckpt)
    manifest = load_manifest(experiment["base"]["test_manifest"])
    samples = [load_sample(manifest, i) for i in range(128)]
    tap_hw = spec.tap_shapes()[EXPERIMENT_TAP][1:]
    from palnet.train import batch_priors, _batch_arrays

    cons, free = [], []
    for start in range(0, len(samples), 64):
        chunk = samples[start : start + 64]
        images, _ = _batch_arrays(chunk)
        priors = batch_priors(chunk, tap_hw, 3.0)
        trace = forward(spec, params, images, Tape())
        amap = attribution(trace, EXPERIMENT_TAP, "grad_input")
        c = amap.values.shape[1]
        cons_map = channel_slice_mean(amap.values, 0, c // 2).data
        free_map = channel_slice_mean(amap.values, c // 2, c).data
        for i in range(len(chunk)):
            cons.append(pearson(cons_map[i, 0], priors[i]))
            free.append(pearson(free_map[i, 0], priors[i]))
    ok = np.mean(cons) >= np.mean(free)
    assert _report(
        "constrained-half vs free-half correlation",
        ok,
        f"constrained {np.mean(cons):.3f} >= free {np.mean(free):.3f} (128 test samples)",
    )


# ---------------------------------------------------------------------------
# criterion 6: pre-pool attribution sparsity
# ---------------------------------------------------------------------------


def test_criterion_6_pre_pool_sparsity():
    spec = toy64()
    params = init_params(spec, 0)
    rng = stream(0, "sparsity")
    images = rng.uniform(0.0, 1.0, size=(4, 1, 64, 64))
    trace = forward(spec, params, images, Tape())
    # relu2 feeds a 2x2 maxpool, so 3 of 4 positions get exactly zero gradient
    amap = grad_attribution(trace, "relu2")
    frac = float((amap.values.data == 0.0).mean())
    ok = frac >= 0.5
    assert _report(
        "criterion 6 pre-pool sparsity",
        ok,
        f"measured exact-zero fraction {frac:.3f} (expected near 0.75)",
    )


# ---------------------------------------------------------------------------
# criterion 7: determinism and baseline equivalence
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def micro_ds(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("micro"))
    generate_dataset(root, seed=5, n=140, split="train")
    generate_dataset(root, seed=5, n=35, split="test")
    return root


def test_criterion_7_determinism_and_weight_zero(micro_ds, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("det"))
    base = dict(
        train_manifest=manifest_path(micro_ds, "train"),
        test_manifest=manifest_path(micro_ds, "test"),
        epochs=1,
        seed=0,
    )

    def ckpt_bytes(run_dir):
        with open(f"{run_dir}/best.ckpt", "rb") as fh:
            return fh.read()

    train(TrainConfig(**base, method="grad_input"), f"{out}/a")
    train(TrainConfig(**base, method="grad_input"), f"{out}/b")
    identical = ckpt_bytes(f"{out}/a") == ckpt_bytes(f"{out}/b")

    train(TrainConfig(**base, method="none"), f"{out}/none")
    train(TrainConfig(**base, method="grad_input", pal_weight=0.0), f"{out}/zero")
    equivalent = ckpt_bytes(f"{out}/none") == ckpt_bytes(f"{out}/zero")

    ok = identical and equivalent
    assert _report(
        "criterion 7 determinism + baseline equivalence",
        ok,
        f"repeat-run checkpoints identical={identical}, "
        f"weight-0 matches method-none={equivalent}",
    )
