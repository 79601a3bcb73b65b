import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from eggfm.data import Dataset
from eggfm.nn import DTYPE
from eggfm.refine import (
    EmptyClusterError, NetArch, RefineConfig, anneal_loss, refine_pipeline, snis_estimate, snis_from_energies,
    snis_standard_error,
)
from eggfm.score import (
    NoiseSchedule, TrainSettings, dsm_loss, energy_at, make_energy_model, make_score_model, score_at, train_energy,
    train_on_data, train_score,
)

from oracles import draw_toy, theorem_toy


# --------------------------------------------------------------------------- SNIS weights

def test_config_invariants():
    for bad in (dict(n_steps=0), dict(alpha=1.5), dict(clip_quantiles=(0.5, 0.5)), dict(distill_norm="l3")):
        with pytest.raises(ValueError):
            RefineConfig(**bad)
    np.testing.assert_allclose(RefineConfig(3, temperature_min=5, temperature_max=10).temperatures(), [5, 7.5, 10])


def test_zero_beta_is_uniform():
    w = snis_from_energies(np.random.default_rng(0).standard_normal(50), weight_beta=0.0)
    np.testing.assert_array_equal(w.weights, np.full(50, 1 / 50))


def test_two_point_weights():
    w = snis_from_energies([0.0, np.log(2)], weight_beta=1.0, clip_quantiles=(0.0, 1.0))
    np.testing.assert_allclose(w.weights, [1 / 3, 2 / 3], rtol=1e-14)


def test_all_equal_energies_uniform():
    w = snis_from_energies(np.full(7, 3.2), weight_beta=0.3)
    np.testing.assert_allclose(w.weights, np.full(7, 1 / 7), rtol=1e-14)


def test_dense_and_sparse_blob_each_get_half():
    rng = np.random.default_rng(0)
    e = np.concatenate([rng.normal(0, 1, 1000), rng.normal(3, 1, 100)])
    cl = np.repeat([0, 1], [1000, 100])
    w = snis_from_energies(e, cl, weight_beta=0.3)
    np.testing.assert_allclose(w.cluster_mass(), [0.5, 0.5], rtol=1e-12)
    # within each cluster the spread is bounded by the clip window
    for j, n in ((0, 1000), (1, 100)):
        wj = w.weights[cl == j] * n * 2
        lo, hi = w.clip_bounds[j]
        assert wj.max() / wj.min() <= np.exp(0.3 * (hi - lo)) * (1 + 1e-12)


def test_imbalanced_identical_blobs_half_mass():
    cl = np.repeat([0, 1], [1000, 100])
    e = np.zeros(1100)
    w = snis_from_energies(e, cl, weight_beta=0.3, base_weights=np.where(cl == 0, 10.0, 1.0))
    assert abs(w.cluster_mass()[0] - 0.5) < 0.02


@given(st.floats(-50, 50), st.integers(0, 1000))
def test_cluster_shift_invariance(c, seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal(40)
    cl = np.repeat([0, 1], 20)
    a = snis_from_energies(e, cl, 0.7).weights
    b = snis_from_energies(np.where(cl == 1, e + c, e), cl, 0.7).weights
    np.testing.assert_allclose(a, b, rtol=1e-9)


@given(st.lists(st.floats(-20, 20), min_size=1, max_size=30), st.floats(0, 2))
def test_weights_positive_and_normalised(e, beta):
    w = snis_from_energies(e, weight_beta=beta).weights
    assert np.all(w > 0) and abs(w.sum() - 1) < 1e-12


def test_empty_cluster():
    with pytest.raises(EmptyClusterError):
        snis_from_energies([0.0, 1.0], [0, 2])
    with pytest.raises(EmptyClusterError):
        snis_estimate([1.0, 2.0], [1.0, 1.0], [0, 0], n_clusters=2)


# --------------------------------------------------------------------------- SNIS estimator

def test_estimate_uniform_is_mean_and_constant_exact():
    g = np.arange(10.0)
    assert snis_estimate(g, np.ones(10)) == pytest.approx(4.5)
    rng = np.random.default_rng(0)
    assert snis_estimate(np.full(10, 3.25), rng.uniform(0.1, 5, 10), rng.integers(0, 2, 10), 2) == 3.25


def test_indicator_of_second_cluster_is_half():
    rng = np.random.default_rng(1)
    cl = np.repeat([0, 1], [5, 50])
    assert snis_estimate((cl == 1).astype(float), rng.uniform(0.1, 3, 55), cl) == 0.5


def test_theorem_toy_within_three_standard_errors():
    cl, r, g, mu = theorem_toy()
    vals, w, c = draw_toy(cl, r, g, 100_000, np.random.default_rng(7))
    est = snis_estimate(vals, w, c, 2)
    se = snis_standard_error(vals, w, c, 2)
    assert abs(est - mu) < 3 * se


def test_risk_consistency_with_fixed_losses():
    cl, r, _, _ = theorem_toy(3)
    loss = np.random.default_rng(4).exponential(1.0, cl.size)
    mu = 0.5 * (loss[cl == 0].mean() + loss[cl == 1].mean())
    vals, w, c = draw_toy(cl, r, loss, 100_000, np.random.default_rng(5))
    assert abs(snis_estimate(vals, w, c, 2) - mu) < 3 * snis_standard_error(vals, w, c, 2)


def test_theorem_toy_error_rate():
    cl, r, g, mu = theorem_toy(1)
    ms = [10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6]
    rng = np.random.default_rng(11)
    errs = []
    for m in ms:
        errs.append(np.mean([abs(snis_estimate(*draw_toy(cl, r, g, m, rng), 2) - mu) for _ in range(30)]))
    slope = np.polyfit(np.log(ms), np.log(errs), 1)[0]
    assert -0.65 <= slope <= -0.35, slope


# --------------------------------------------------------------------------- annealing loss

SCHED = NoiseSchedule(0.05, 0.5, 3)


def _pair(dim=2):
    s = make_score_model(dim, SCHED, hidden_dim=16, n_layers=2, n_freq=4, seed=0)
    p = make_score_model(dim, SCHED, hidden_dim=16, n_layers=2, n_freq=4, seed=1)
    return s, p


def test_alpha_one_equals_dsm():
    s, p = _pair()
    x = torch.randn(8, 2, dtype=DTYPE)
    a = anneal_loss(s, p, x, 2.0, 1.0, alpha=1.0, seed=3)
    b = dsm_loss(s, x, 2.0, seed=3)
    assert torch.equal(a, b)


@pytest.mark.parametrize("ratio,scale", [("consistent", 1.0 / 2.0), ("printed", 2.0)])
def test_alpha_zero_scaled_copy_is_zero(ratio, scale):
    # prev score is linear in its conditioning vector; the copy scales its output layer
    s, p = _pair()
    with torch.no_grad():
        for a, b in zip(s.net.parameters(), p.net.parameters()):
            a.copy_(b)
        s.net.layers[-1].weight.mul_(scale)
        s.net.layers[-1].bias.mul_(scale)
    x = torch.randn(8, 2, dtype=DTYPE)
    loss = anneal_loss(s, p, x, 2.0, 1.0, alpha=0.0, seed=0, ratio=ratio)
    assert float(loss.detach()) < 1e-24


def test_anneal_gradient_skips_prev():
    s, p = _pair()
    x = torch.randn(8, 2, dtype=DTYPE)
    anneal_loss(s, p, x, 2.0, 1.0, alpha=0.5).backward()
    assert all(q.grad is None for q in p.net.parameters())
    assert any(q.grad is not None for q in s.net.parameters())


def test_l2_norm_switch():
    s, p = _pair()
    x = torch.randn(8, 2, dtype=DTYPE)
    a = anneal_loss(s, p, x, 2.0, 1.0, alpha=0.0, norm="l1")
    b = anneal_loss(s, p, x, 2.0, 1.0, alpha=0.0, norm="l2")
    assert float(a) != float(b)


def test_distillation_halves_gaussian_score():
    ds = Dataset(np.zeros((1, 2)))
    sched = NoiseSchedule(1.0, 1.0, 1)
    settings = TrainSettings(1500, 256, 3e-3, ema_decay=0.99)
    s1 = make_score_model(2, sched, hidden_dim=32, n_layers=3, n_freq=4, seed=0)
    s1, o1, _ = train_score(ds, s1, settings, beta=1.0, seed=0)
    s1 = s1.frozen_copy(o1)
    s2 = make_score_model(2, sched, hidden_dim=32, n_layers=3, n_freq=4, seed=1)
    o2, _ = train_on_data(ds, s2, settings, lambda xb, cb, g: anneal_loss(s2, s1, xb, 2.0, 1.0, 0.0, g), "anneal", 1)
    s2 = s2.frozen_copy(o2)
    probe = np.array([[1.0, 0.0], [0.0, -1.5], [0.7, 0.7]])
    a, b = score_at(s1, probe, 1.0), score_at(s2, probe, 1.0)
    np.testing.assert_allclose(b, a / 2, rtol=0.1, atol=0.05)


# --------------------------------------------------------------------------- pipeline

def test_k1_zero_beta_matches_plain_training():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.standard_normal((64, 2)))
    sched = NoiseSchedule(0.1, 0.5, 3)
    st_s, st_e = TrainSettings(20, 16, 1e-3), TrainSettings(20, 16, 1e-3)
    arch = NetArch(16, 2, 4)
    res = refine_pipeline(ds, RefineConfig(1, weight_beta=0.0), sched, st_s, st_e, arch, seed=0)
    s = make_score_model(2, sched, hidden_dim=16, n_layers=2, n_freq=4, seed=0)
    e = make_energy_model(2, sched, hidden_dim=16, n_layers=2, n_freq=4, seed=1)
    uni = ds.with_weights(np.full(64, 1 / 64))
    s, so, _ = train_score(uni, s, st_s, 1.0, 1000, stage="score[k=1]")
    e, eo, _ = train_energy(uni, e, s.frozen_copy(so), st_e, 1001, stage="energy[k=1]")
    probe = rng.standard_normal((5, 2))
    np.testing.assert_array_equal(energy_at(res.energy, probe), energy_at(e.frozen_copy(eo), probe))
    np.testing.assert_array_equal(res.weights.weights, np.full(64, 1 / 64))


@pytest.mark.slow
def test_ring_refinement_flattens_energy():
    rng = np.random.default_rng(0)
    theta = rng.vonmises(0.0, 1.5, 1500)
    ds = Dataset(np.column_stack([np.cos(theta), np.sin(theta)]))
    sched = NoiseSchedule(0.05, 0.3, 6)
    settings = TrainSettings(1500, 256, 2e-3, ema_decay=0.99)
    cfg = RefineConfig(2, weight_beta=1.0, clip_quantiles=(0.05, 0.98))
    res = refine_pipeline(ds, cfg, sched, settings, settings, NetArch(64, 3, 8), seed=0)
    phi = np.linspace(-np.pi, np.pi, 200, endpoint=False)
    ring = np.column_stack([np.cos(phi), np.sin(phi)])

    def clipped_var(step):
        e = energy_at(step.energy, ring)
        lo, hi = step.weights.clip_bounds[0]
        return np.var(np.clip(e, lo, hi))

    v1, v2 = clipped_var(res.steps[0]), clipped_var(res.steps[1])
    assert v2 < v1, (v1, v2)
