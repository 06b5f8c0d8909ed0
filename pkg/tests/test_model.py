import copy

import numpy as np
import pytest

from ndssm.datagen import ArrayDataset
from ndssm.errors import ConfigError, DomainError, UsageError
from ndssm.model import (AdamW, Conv2dBaselineModel, IsotropicModel, ModelConfig, TrainConfig,
                         cross_entropy, evaluate, evaluate_zero_shot, lr_at, train)
from ndssm.resolution import ResolutionPlan


def _small(**kw):
    base = dict(depth=2, width=8, state_size=4, resolution=(8, 8), seed=0)
    base.update(kw)
    return IsotropicModel(ModelConfig(**base))


def test_output_shape():
    m = _small(n_classes=5)
    assert m(np.zeros((3, 1, 8, 8))).shape == (3, 5)


def test_zero_head_gives_zero_logits():
    m = _small()
    m.params["head.w"][:] = 0
    x = np.random.default_rng(0).standard_normal((4, 1, 8, 8))
    assert not m(x).any()


def test_depth_zero_is_head_of_pooled_stem():
    m = _small(depth=0)
    x = np.random.default_rng(1).standard_normal((2, 1, 8, 8))
    P = m.params
    h = np.einsum("oi,bixy->boxy", P["stem.w"], x) + P["stem.b"][None, :, None, None]
    want = h.mean(axis=(2, 3)) @ P["head.w"].T + P["head.b"]
    np.testing.assert_allclose(m(x), want, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("kind", ["ssm", "conv"])
def test_constant_image_resolution_invariance(kind):
    m = _small(kind=kind)
    rng = np.random.default_rng(7)
    for name in ("stem.b", "blocks.0.mix.b", "blocks.1.mix.b"):
        m.params[name] = rng.standard_normal(8)
    x8, x32 = np.full((1, 1, 8, 8), 0.7), np.full((1, 1, 32, 32), 0.7)
    big = m.rescaled(ResolutionPlan((8, 8), (32, 32)))
    assert np.abs(big(x32) - m(x8)).max() < 1e-5


def test_head_bias_gradient_closed_form():
    m = _small()
    m.params["head.w"][:] = 0
    y = np.array([0, 1, 2, 3])
    _, grads, _ = m.loss_and_grads(np.random.default_rng(2).standard_normal((4, 1, 8, 8)), y)
    np.testing.assert_allclose(grads["head.b"], (np.full((4, 4), 0.25) - np.eye(4)[y]).mean(axis=0),
                               atol=1e-15)


def _fd_check(m, x, y, per_tensor=3, seed=0, h=1e-6):
    rng = np.random.default_rng(seed)
    _, grads, _ = m.loss_and_grads(x, y)
    for name in m.trainable:
        p = m.params[name]
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for idx in rng.choice(flat.size, min(per_tensor, flat.size), replace=False):
            for unit in ((1.0, 1j) if np.iscomplexobj(p) else (1.0,)):
                flat[idx] += h * unit
                lp, _ = cross_entropy(m(x, keep=False), y)
                flat[idx] -= 2 * h * unit
                lm, _ = cross_entropy(m(x, keep=False), y)
                flat[idx] += h * unit
                fd = (lp - lm) / (2 * h)
                an = g[idx].real if unit == 1.0 else g[idx].imag
                assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-4), (name, idx, fd, an)


@pytest.mark.parametrize("kind,bidirectional,alpha", [("ssm", True, np.inf), ("ssm", True, 0.5),
                                                      ("ssm", False, np.inf), ("conv", True, np.inf)])
def test_full_model_gradient(kind, bidirectional, alpha):
    m = _small(kind=kind, bidirectional=bidirectional, train_delta=True, rank=2, n_classes=3)
    m.alpha = alpha
    rng = np.random.default_rng(3)
    _fd_check(m, rng.standard_normal((3, 1, 8, 8)), np.array([0, 1, 2]))


def test_no_gradients_for_a_and_b():
    m = _small()
    _, grads, _ = m.loss_and_grads(np.zeros((2, 1, 8, 8)), np.array([0, 1]))
    assert {"blocks.0.a", "blocks.0.b"} <= set(m.buffers)
    assert set(grads) == set(m.params) and not set(grads) & set(m.buffers)
    assert "blocks.0.log_dt" not in m.trainable


def test_backward_requires_forward():
    m = _small()
    with pytest.raises(UsageError):
        m.backward(np.zeros((1, 4)))
    m(np.zeros((1, 1, 8, 8)), keep=False)
    with pytest.raises(UsageError):
        m.backward(np.zeros((1, 4)))


def test_block_channel_permutation_equivariance():
    m = _small(width=6)
    perm = np.random.default_rng(4).permutation(6)
    q = copy.deepcopy(m)
    for name, v in m.params.items():
        if name.startswith("blocks.0."):
            v = v[perm]
            if name.endswith("mix.w"):
                v = v[:, perm]
            q.params[name] = v
    h = np.random.default_rng(5).standard_normal((2, 6, 8, 8))
    out, _ = m.block_forward(0, h)
    outp, _ = q.block_forward(0, h[:, perm])
    np.testing.assert_allclose(outp, out[:, perm], rtol=1e-12, atol=1e-12)


def test_optimizer_zero_gradient_no_decay():
    p = {"w": np.arange(3.0)}
    AdamW(0.0).step(p, {"w": np.zeros(3)}, lr=0.1)
    np.testing.assert_array_equal(p["w"], np.arange(3.0))


def test_optimizer_decoupled_decay_shrink():
    p = {"w": np.arange(3.0), "c": np.ones(2, dtype=complex)}
    AdamW(0.5, decayed={"w"}).step(p, {"w": np.zeros(3), "c": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p["w"], np.arange(3.0) * (1 - 0.1 * 0.5))
    np.testing.assert_array_equal(p["c"], np.ones(2))


def test_optimizer_skips_nonfinite():
    p = {"w": np.ones(2)}
    opt = AdamW(0.0)
    assert not opt.step(p, {"w": np.array([np.nan, 0.0])}, lr=0.1)
    assert opt.skipped == 1 and (p["w"] == 1).all()


def test_lr_schedule():
    assert lr_at(0, 100, 1.0, 10) == pytest.approx(0.1)
    assert lr_at(9, 100, 1.0, 10) == 1.0
    assert lr_at(100, 100, 1.0, 10) == pytest.approx(0.0, abs=1e-15)
    assert lr_at(55, 100, 1.0, 10) == pytest.approx(0.5)


def _tiny_dataset(n=40, res=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.uniform(0, 0.2, (n, 1, res, res))
    x[y == 1, :, : res // 2] += 0.8        # class 1 is bright in the top half
    return ArrayDataset(x[: n // 2], y[: n // 2], x[n // 2:], y[n // 2:])


def test_zero_epochs_returns_initial_model():
    m = _small()
    before = {k: v.copy() for k, v in m.params.items()}
    rec = train(m, _tiny_dataset(), TrainConfig(epochs=0))
    assert rec.metrics == [] and rec.best == {}
    assert all(before[k].tobytes() == m.params[k].tobytes() for k in before)


def test_separable_two_class_reaches_full_accuracy():
    m = _small(depth=1, n_classes=2)
    rec = train(m, _tiny_dataset(), TrainConfig(epochs=50, batch_size=10, lr=0.01, warmup_steps=5))
    acc = [r["accuracy"] for r in rec.metrics if r["split"] == "train"]
    assert max(acc) == 1.0


def test_identical_seeds_identical_trajectories():
    ds = _tiny_dataset()
    runs = []
    for _ in range(2):
        m = _small(depth=1, n_classes=2)
        train(m, ds, TrainConfig(epochs=2, batch_size=10, warmup_steps=2))
        runs.append(m.params)
    assert all(runs[0][k].tobytes() == runs[1][k].tobytes() for k in runs[0])


def test_zero_shot_identity_at_train_resolution():
    ds = _tiny_dataset()
    m = _small(n_classes=2)
    m.alpha = 0.5
    assert m.rescaled(ResolutionPlan((8, 8), (8, 8))) is m
    x, y = ds.arrays("val", (8, 8))
    assert evaluate_zero_shot(m, ds, (8, 8)) == evaluate(m, x, y)


def test_train_time_validation_matches_zero_shot():
    ds = _tiny_dataset()
    m = _small(n_classes=2)
    rec = train(m, ds, TrainConfig(epochs=1, batch_size=10, alpha=0.5))
    val = [r for r in rec.metrics if r["split"] == "val"][0]
    assert val["accuracy"] == evaluate_zero_shot(m, ds, (8, 8))[0]


def test_rescaled_does_not_modify_model():
    m = _small()
    dt = m.params["blocks.0.log_dt"].copy()
    big = m.rescaled(ResolutionPlan((8, 8), (32, 32)))
    assert m.params["blocks.0.log_dt"].tobytes() == dt.tobytes()
    np.testing.assert_allclose(big.params["blocks.0.log_dt"], dt + np.log(0.25))


def test_state_round_trip_bit_identical():
    m = _small(rank=2)
    m.alpha = 0.3
    x = np.random.default_rng(6).standard_normal((2, 1, 8, 8))
    clone = IsotropicModel.from_state(m.meta(), m.state_dict())
    assert clone(x).tobytes() == m(x).tobytes()


def test_baseline_factory():
    m = Conv2dBaselineModel(ModelConfig(width=4, depth=1, resolution=(8, 8)))
    assert m.config.kind == "conv" and "blocks.0.conv.k" in m.params


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(kind="vit")
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0)
    with pytest.raises(DomainError):
        _small()(np.zeros((1, 2, 8, 8)))
