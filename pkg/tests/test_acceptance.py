"""Acceptance gate: one PASS/FAIL line per criterion.

The training criteria (7, 8, 9, 11) take tens of minutes on one CPU core.
Set ``NDSSM_SKIP_SLOW=1`` to run only the fast criteria.
"""
import json
import os
import time

import numpy as np
import pytest

from ndssm.cli import main as cli_main
from ndssm.conv import direct_conv_nd, fft_conv_backward, fft_conv_nd, recurrence_nd_oracle
from ndssm.datagen import DatasetManifest, SyntheticDataset
from ndssm.kernel import (DenseKernelSpec, assemble_dense, assemble_factored, kernel_grad_wrt_c,
                          make_factored_spec)
from ndssm.model import (IsotropicModel, ModelConfig, TrainConfig, cross_entropy, evaluate_zero_shot,
                         train, train_progressive)
from ndssm.resolution import ResizeSchedule, ResolutionPlan, Stage, rescale_delta
from ndssm.ssm import DiagonalSSM, discretize, init_ssm, sample_kernel

slow = pytest.mark.skipif(os.environ.get("NDSSM_SKIP_SLOW") == "1", reason="NDSSM_SKIP_SLOW=1")

# Desk-scale training budget shared by criteria 7, 8, 9 and 11.
WIDTH, DEPTH, STATE = 32, 3, 16
EPOCHS, LR, WARMUP = 10, 0.01, 40
C9_WARMUP = 10
SEEDS = (0, 1, 2)
LOW, HIGH = (8, 8), (32, 32)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


# ------------------------------------------------------------ exact math
def test_c1_factored_equals_dense(capsys):
    rng = np.random.default_rng(1)
    t0, worst = time.perf_counter(), 0.0
    for trial in range(120):
        D = int(rng.integers(2, 4))
        spec = make_factored_spec(D, int(rng.integers(1, 5)), tuple(rng.integers(1, 9, D)),
                                  rank=int(rng.integers(1, 4)), kind=str(rng.choice(["fourier", "random-inverse"])),
                                  deltas=tuple(rng.uniform(0.05, 1.0, D)), seed=trial, bidirectional=False,
                                  method=str(rng.choice(["zoh", "bilinear", "direct-sample"])))
        alpha = float(rng.choice([np.inf, 0.3, 1.0]))
        diff = assemble_factored(spec, alpha).data - assemble_dense(spec.to_dense(), alpha).data
        worst = max(worst, float(np.abs(diff).max()))
    dt = time.perf_counter() - t0
    report(capsys, 1, worst <= 1e-10 and dt < 30, f"120 specs, max-abs {worst:.2e} (<= 1e-10), {dt:.1f} s (< 30 s)")


def _random_dense(rng, D):
    L = tuple(int(v) for v in rng.integers(1, 9, D))
    bases = []
    for _ in range(D):
        N = int(rng.integers(1, 4))
        bases.append(DiagonalSSM(a=-rng.uniform(0.05, 1.5, N) + 1j * rng.uniform(-4, 4, N),
                                 b=rng.standard_normal(N) + 1j * rng.standard_normal(N),
                                 c=np.zeros(N), delta=float(rng.uniform(0.1, 1.0))))
    shape = tuple(b.N for b in bases)
    C = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    return DenseKernelSpec(bases=tuple(bases), C=C, lengths=L,
                           method=str(rng.choice(["zoh", "bilinear", "direct-sample"])))


def test_c2_recurrence_equals_convolution(capsys):
    rng = np.random.default_rng(2)
    t0, worst = time.perf_counter(), 0.0
    for _ in range(60):
        spec = _random_dense(rng, int(rng.integers(2, 4)))
        u = rng.standard_normal(spec.lengths)
        want = fft_conv_nd(u, assemble_dense(spec).data, "causal")
        worst = max(worst, float(np.abs(recurrence_nd_oracle(u, spec) - want).max()))
    dt = time.perf_counter() - t0
    report(capsys, 2, worst <= 1e-6 and dt < 60, f"60 specs, max-abs {worst:.2e} (<= 1e-6), {dt:.1f} s (< 60 s)")


def test_c3_fft_matches_nested_loops(capsys):
    rng = np.random.default_rng(3)
    worst = 0.0
    for i in range(220):
        D = 1 + i % 3
        mode = ("causal", "centered")[i % 2]
        L = tuple(int(v) for v in rng.integers(1, (12, 7, 4)[D - 1] + 1, D))
        Lk = tuple(int(rng.integers(1, (l if mode == "causal" else 2 * l - 1) + 1)) for l in L)
        u, k = rng.standard_normal(L), rng.standard_normal(Lk)
        want = direct_conv_nd(u, k, mode)
        err = np.linalg.norm(fft_conv_nd(u, k, mode) - want) / max(np.linalg.norm(want), 1e-300)
        worst = max(worst, float(err))
    report(capsys, 3, worst <= 1e-10, f"220 instances, worst relative error {worst:.2e} (<= 1e-10)")


def _fd_rel(fd, an):
    return abs(fd - an) / max(abs(fd), abs(an), 1e-6)


def test_c4_gradients_match_finite_differences(capsys):
    h = 1e-6
    worst = {"kernel": 0.0, "conv": 0.0, "model": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        # kernel_grad_wrt_c
        D = 2 + seed % 2
        spec = make_factored_spec(D, 3, tuple(rng.integers(2, 6, D)), rank=2, deltas=0.4, seed=seed,
                                  bidirectional=bool(seed % 2), method=("zoh", "bilinear", "direct-sample")[seed % 3])
        alpha = (np.inf, 0.8)[seed % 2]
        up = rng.standard_normal(spec.output_shape)
        g = kernel_grad_wrt_c(spec, up, alpha)
        f = lambda s: float(np.sum(up * assemble_factored(s, alpha).data))
        for _ in range(6):
            t, i, n = int(rng.integers(D)), int(rng.integers(2)), int(rng.integers(3))
            for unit, part in ((1.0, np.real), (1j, np.imag)):
                cs = [[c.copy() for c in spec.coeffs] for _ in range(2)]
                cs[0][t][i, n] += h * unit
                cs[1][t][i, n] -= h * unit
                fd = (f(spec.replace(coeffs=tuple(cs[0]))) - f(spec.replace(coeffs=tuple(cs[1])))) / (2 * h)
                worst["kernel"] = max(worst["kernel"], _fd_rel(fd, part(g.c[t][i, n])))
        # fft_conv_backward
        mode = ("causal", "centered")[seed % 2]
        L = tuple(int(v) for v in rng.integers(2, 6, D))
        Lk = tuple(int(rng.integers(1, l + 1)) for l in L)
        u, k, gu_up = rng.standard_normal(L), rng.standard_normal(Lk), rng.standard_normal(L)
        gu, gk = fft_conv_backward(gu_up, u, k, mode)
        fc = lambda uu, kk: float(np.sum(gu_up * fft_conv_nd(uu, kk, mode)))
        for arr, grad, which in ((u, gu, 0), (k, gk, 1)):
            for idx in list(np.ndindex(arr.shape))[:6]:
                e = np.zeros_like(arr)
                e[idx] = h
                fd = ((fc(u + e, k) - fc(u - e, k)) if which == 0 else (fc(u, k + e) - fc(u, k - e))) / (2 * h)
                worst["conv"] = max(worst["conv"], _fd_rel(fd, grad[idx]))
        # full model, depth 2, width 8, 8x8
        m = IsotropicModel(ModelConfig(depth=2, width=8, state_size=4, resolution=(8, 8), seed=seed,
                                       train_delta=True, kind=("ssm", "ssm", "conv")[seed % 3]))
        m.alpha = (np.inf, 0.5)[seed % 2]
        x, y = rng.standard_normal((2, 1, 8, 8)), np.array([seed % 4, (seed + 1) % 4])
        _, grads, _ = m.loss_and_grads(x, y)
        for name in m.trainable:
            flat, gflat = m.params[name].reshape(-1), grads[name].reshape(-1)
            idx = int(rng.integers(flat.size))
            for unit in ((1.0, 1j) if np.iscomplexobj(flat) else (1.0,)):
                flat[idx] += h * unit
                lp, _ = cross_entropy(m(x, keep=False), y)
                flat[idx] -= 2 * h * unit
                lm, _ = cross_entropy(m(x, keep=False), y)
                flat[idx] += h * unit
                an = gflat[idx].real if unit == 1.0 else gflat[idx].imag
                worst["model"] = max(worst["model"], _fd_rel((lp - lm) / (2 * h), an))
    ok = max(worst.values()) <= 1e-4
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(capsys, 4, ok, f"20 seeds, worst relative error: {detail} (<= 1e-4)")


def test_c5_subsampling_identity(capsys):
    worst = 0.0
    for seed in range(5):
        s = init_ssm("random-inverse", 6, 0.05, seed=seed)
        for m in (2, 4):
            fine = sample_kernel(discretize(s, "direct-sample"), s.c, 8 * m)
            coarse = sample_kernel(discretize(s.replace(delta=0.05 * m), "direct-sample"), s.c, 8)
            worst = max(worst, float(np.abs(coarse - fine[::m]).max()))
            spec = make_factored_spec(2, 4, (6 * m, 5 * m), rank=2, deltas=(0.05, 0.07), seed=seed,
                                      bidirectional=False, method="direct-sample")
            coarse2 = make_factored_spec(2, 4, (6, 5), rank=2, deltas=(0.05 * m, 0.07 * m), seed=seed,
                                         bidirectional=False, method="direct-sample")
            diff = assemble_factored(coarse2).data - assemble_factored(spec).data[::m, ::m]
            worst = max(worst, float(np.abs(diff).max()))
    report(capsys, 5, worst <= 1e-12, f"m in (2, 4), 1D and 2D, max-abs {worst:.2e} (<= 1e-12)")


def _upsample_samples(K, n_out):
    """Linear interpolation in continuous time from samples at k/n_in to k/n_out."""
    t_in, t_out = np.arange(K.shape[0]) / K.shape[0], np.arange(n_out) / n_out
    K = np.stack([np.interp(t_out, t_in, K[:, j]) for j in range(K.shape[1])], axis=1)
    return np.stack([np.interp(t_out, t_in, row) for row in K])


def test_c6_bandlimit_reduces_aliasing(capsys):
    wins, errs = 0, []
    for trial in range(50):
        spec = make_factored_spec(2, 16, LOW, deltas=1 / 8, seed=trial, bidirectional=False,
                                  method="direct-sample")
        native = rescale_delta(spec, ResolutionPlan(LOW, HIGH))
        e = []
        for alpha in (0.5, np.inf):
            lo = _upsample_samples(assemble_factored(spec, alpha).data, HIGH[0])
            hi = assemble_factored(native, alpha).data
            e.append(np.linalg.norm(lo - hi) / np.linalg.norm(hi))
        wins += e[0] < e[1]
        errs.append(e)
    m = np.mean(errs, axis=0)
    report(capsys, 6, wins >= 45, f"alpha=0.5 closer in {wins}/50 trials (>= 45); "
                                  f"mean rel L2 {m[0]:.3f} vs {m[1]:.3f}")


# ------------------------------------------------------------- training
@pytest.fixture(scope="module")
def dataset():
    return SyntheticDataset(DatasetManifest())


def _run_low(dataset, kind, alpha, seed):
    model = IsotropicModel(ModelConfig(kind=kind, depth=DEPTH, width=WIDTH, state_size=STATE,
                                       resolution=LOW, seed=seed))
    rec = train(model, dataset, TrainConfig(epochs=EPOCHS, lr=LR, warmup_steps=WARMUP, seed=seed,
                                            alpha=alpha))
    train_acc = [r for r in rec.metrics if r["split"] == "train"][-1]["accuracy"]
    val_acc = [r for r in rec.metrics if r["split"] == "val"][-1]["accuracy"]
    zs = evaluate_zero_shot(model, dataset, HIGH)[0]
    return {"metrics": rec.metrics, "train": train_acc, "val": val_acc, "zero_shot": zs}


MODELS = {"ssm-0.2": ("ssm", 0.2), "conv": ("conv", np.inf), "ssm-inf": ("ssm", np.inf)}


@pytest.fixture(scope="module")
def low_runs(dataset):
    return {(name, seed): _run_low(dataset, kind, alpha, seed)
            for name, (kind, alpha) in MODELS.items() for seed in SEEDS}


def _mean(runs, name, key):
    return float(np.mean([runs[(name, s)][key] for s in SEEDS]))


@slow
def test_c7_zero_shot_beats_conv_baseline(capsys, low_runs):
    s_zs, c_zs = _mean(low_runs, "ssm-0.2", "zero_shot"), _mean(low_runs, "conv", "zero_shot")
    s_val = _mean(low_runs, "ssm-0.2", "val")
    gap, keep = 100 * (s_zs - c_zs), s_zs / s_val
    report(capsys, 7, gap >= 15 and keep >= 0.70,
           f"8->32 ssm {100 * s_zs:.1f}% vs conv {100 * c_zs:.1f}% (gap {gap:.1f} >= 15); "
           f"ssm model retains {100 * keep:.0f}% of 8->8 {100 * s_val:.1f}% (>= 70%)")


@slow
def test_c8_bandlimit_ablation(capsys, low_runs):
    zs = {n: _mean(low_runs, n, "zero_shot") for n in ("ssm-0.2", "ssm-inf")}
    tr = {n: _mean(low_runs, n, "train") for n in ("ssm-0.2", "ssm-inf")}
    gap = 100 * (zs["ssm-0.2"] - zs["ssm-inf"])
    drop = 100 * (tr["ssm-0.2"] - tr["ssm-inf"])
    report(capsys, 8, gap >= 5 and drop <= 2,
           f"8->32 alpha=0.2 {100 * zs['ssm-0.2']:.1f}% vs alpha=inf {100 * zs['ssm-inf']:.1f}% "
           f"(gap {gap:.1f} >= 5); 8->8 train alpha=inf {100 * tr['ssm-inf']:.1f}% vs "
           f"{100 * tr['ssm-0.2']:.1f}% (lower by {max(drop, 0):.1f} <= 2)")


def _run_progressive(ds):
    model = IsotropicModel(ModelConfig(depth=DEPTH, width=WIDTH, state_size=STATE, resolution=LOW, seed=0))
    first = int(round(0.8 * EPOCHS))
    schedule = ResizeSchedule((Stage(LOW, first, 0.2), Stage(HIGH, EPOCHS - first, np.inf)),
                              warmup_steps=C9_WARMUP)
    rec = train_progressive(model, ds, TrainConfig(lr=LR, seed=0), schedule, eval_resolutions=[HIGH])
    steps_per_epoch = -(-len(ds.labels("train")) // TrainConfig().batch_size)
    return {"metrics": rec.metrics, "val": [r for r in rec.metrics if r.get("split") == "val"][-1]["accuracy"],
            "stage1_ms": float(np.median(rec.step_times_ms[:first * steps_per_epoch]))}


def _run_full(ds):
    model = IsotropicModel(ModelConfig(depth=DEPTH, width=WIDTH, state_size=STATE, resolution=HIGH, seed=0))
    rec = train(model, ds, TrainConfig(epochs=EPOCHS, lr=LR, warmup_steps=C9_WARMUP, seed=0))
    return {"metrics": rec.metrics, "val": [r for r in rec.metrics if r["split"] == "val"][-1]["accuracy"],
            "step_ms": float(np.median(rec.step_times_ms))}


@pytest.fixture(scope="module")
def c9_runs(dataset):
    return _run_progressive(dataset), _run_full(dataset)


@slow
def test_c9_progressive_resizing(capsys, c9_runs):
    prog, full = c9_runs
    gap = 100 * abs(prog["val"] - full["val"])
    saving = 1 - prog["stage1_ms"] / full["step_ms"]
    report(capsys, 9, gap <= 3 and saving > 0.10,
           f"final 32x32 val: progressive {100 * prog['val']:.1f}% vs full {100 * full['val']:.1f}% "
           f"(gap {gap:.1f} <= 3); stage-1 step {prog['stage1_ms']:.0f} ms vs {full['step_ms']:.0f} ms "
           f"(saving {100 * saving:.0f}% > 10%)")


def test_c10_bench_report(capsys, tmp_path):
    code = cli_main(["bench", "--preset", "paper-fig9", "--repetitions", "1", "--out", str(tmp_path)])
    rep = json.loads((tmp_path / "bench.json").read_text())
    fr = rep["stage_fractions"]
    ok = (code == 0 and abs(sum(fr.values()) - 1) <= 1e-9
          and {"forward-FFT", "pointwise", "inverse-FFT"} <= set(fr))
    report(capsys, 10, ok,
           f"input {rep['shape']['input']}, fractions sum {sum(fr.values()):.12f}; "
           + ", ".join(f"{k} {100 * v:.1f}%" for k, v in fr.items())
           + f"; FFT-pipeline share {100 * rep['fft_pipeline_share']:.1f}% (reference range 65-80%, informational)")


def _strip(metrics):
    return [{k: v for k, v in r.items() if k != "wall_ms"} for r in metrics]


@slow
def test_c11_determinism(capsys, dataset, low_runs, c9_runs):
    same = []
    for name, (kind, alpha) in MODELS.items():
        again = _run_low(dataset, kind, alpha, SEEDS[0])
        first = low_runs[(name, SEEDS[0])]
        same.append(_strip(again["metrics"]) == _strip(first["metrics"])
                    and again["zero_shot"] == first["zero_shot"])
    same.append(_strip(_run_progressive(dataset)["metrics"]) == _strip(c9_runs[0]["metrics"]))
    report(capsys, 11, all(same),
           f"{sum(same)}/{len(same)} reruns bit-identical (criteria 7/8 seed {SEEDS[0]} for each model, "
           f"criterion 9 progressive run; wall_ms excluded)")
