import numpy as np
import pytest
import torch

from eggfm.data import Dataset
from eggfm.nn import DTYPE, gradients
from eggfm.score import (
    NoiseSchedule, TrainSettings, dsm_loss, energy_at, energy_match_loss, make_energy_model,
    make_score_model, score_at, score_from_eps, train_score,
)


def tiny(dim=2, n_scales=3, **kw):
    sched = NoiseSchedule(0.05, 0.5, n_scales)
    return (make_score_model(dim, sched, hidden_dim=16, n_layers=2, n_freq=4, seed=0, **kw),
            make_energy_model(dim, sched, hidden_dim=16, n_layers=2, n_freq=4, seed=1, **kw))


def test_schedule_log_spaced_and_validated():
    s = NoiseSchedule().sigmas
    assert len(s) == 20 and s[0] == pytest.approx(0.01) and s[-1] == pytest.approx(0.2)
    assert np.all(np.diff(s) > 0)
    np.testing.assert_allclose(np.diff(np.log(s)), np.log(20) / 19)
    with pytest.raises(ValueError):
        NoiseSchedule(0.2, 0.1, 5)
    with pytest.raises(ValueError):
        NoiseSchedule(0.0, 0.1, 5)


def test_score_from_eps():
    assert np.array_equal(score_from_eps(np.zeros(2), 0.3), np.zeros(2))
    np.testing.assert_allclose(score_from_eps(np.array([1.0, 0.0]), 0.5), [-2.0, 0.0])


def test_dsm_loss_zero_for_exact_predictor():
    score, _ = tiny()
    x = torch.randn(4, 2, dtype=DTYPE)
    noise = torch.randn(4, 3, 2, dtype=DTYPE)
    beta = 2.0
    target = (noise / beta).reshape(-1, 2)
    score.eps = lambda y, sig, cl=None: target
    assert float(dsm_loss(score, x, beta, noise=noise)) == 0.0


def test_dsm_loss_sums_scales_and_averages_batch():
    score, _ = tiny()
    score.eps = lambda y, sig, cl=None: torch.zeros_like(y)
    noise = torch.ones(5, 3, 2, dtype=DTYPE)
    # each (sample, sigma) contributes ||eps||^2 = 2, three scales, mean over batch
    assert float(dsm_loss(score, torch.zeros(5, 2, dtype=DTYPE), 1.0, noise=noise)) == pytest.approx(6.0)


def test_dsm_loss_order_invariant_with_fixed_noise():
    score, _ = tiny()
    x = torch.randn(6, 2, dtype=DTYPE)
    noise = torch.randn(6, 3, 2, dtype=DTYPE)
    perm = torch.randperm(6)
    a = dsm_loss(score, x, 1.0, noise=noise)
    b = dsm_loss(score, x[perm], 1.0, noise=noise[perm])
    assert torch.allclose(a, b, rtol=1e-14)


def test_energy_head_zero_at_origin_and_zero_loss():
    score, energy = tiny()
    assert energy_at(energy, np.zeros((3, 2))).tolist() == [0.0, 0.0, 0.0]
    with torch.no_grad():
        for p in list(energy.net.parameters()) + list(score.net.parameters()):
            p.zero_()
    assert float(energy_match_loss(energy, score, torch.randn(4, 2, dtype=DTYPE)).detach()) == 0.0


def test_energy_loss_does_not_touch_score_params():
    score, energy = tiny()
    x = torch.randn(4, 2, dtype=DTYPE)
    _, g = gradients(list(score.net.parameters()), lambda: energy_match_loss(energy, score, x, seed=0))
    assert all(torch.count_nonzero(t) == 0 for t in g)


def test_energy_input_gradient_matches_fd():
    _, energy = tiny()
    x = np.random.default_rng(0).standard_normal((5, 2))
    sig = torch.full((5,), 0.1, dtype=DTYPE)
    _, g = energy.grad(torch.from_numpy(x), sig)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd = (energy_at(energy, x + e, 0.1) - energy_at(energy, x - e, 0.1)) / (2 * h)
        np.testing.assert_allclose(g[:, k].detach().numpy(), fd, rtol=1e-6, atol=1e-9)


def test_cluster_conditioning_changes_output():
    sched = NoiseSchedule(0.05, 0.5, 3)
    s = make_score_model(2, sched, hidden_dim=16, n_layers=2, n_freq=4, n_clusters=2, seed=0)
    y = np.zeros((1, 2)) + 0.3
    a = score_at(s, y, 0.1, np.array([0]))
    b = score_at(s, y, 0.1, np.array([1]))
    assert not np.allclose(a, b)


# --------------------------------------------------------------------------- Gaussian oracle (trained)

def _point_mass_models(beta, steps=1500, seed=0):
    """p_data = delta_0, a single sigma = 1: the optimal noise predictor is y / beta."""
    ds = Dataset(np.zeros((1, 2)))
    sched = NoiseSchedule(1.0, 1.0, 1)
    score = make_score_model(2, sched, hidden_dim=32, n_layers=3, n_freq=4, seed=seed)
    score, opt, _ = train_score(ds, score, TrainSettings(steps, 256, 3e-3, ema_decay=0.99), beta=beta, seed=seed)
    return score.frozen_copy(opt)


@pytest.fixture(scope="module")
def gauss_scores():
    return {b: _point_mass_models(b) for b in (1.0, 2.0)}


def test_gaussian_score_oracle(gauss_scores):
    probe = np.array([[1.0, 0.0], [0.0, -1.5], [0.7, 0.7]])
    s1 = score_at(gauss_scores[1.0], probe, 1.0)
    np.testing.assert_allclose(s1, -probe, rtol=0.1, atol=0.05)


def test_temperature_halves_score(gauss_scores):
    probe = np.array([[1.0, 0.0], [0.0, -1.5], [0.7, 0.7]])
    s1 = score_at(gauss_scores[1.0], probe, 1.0)
    s2 = score_at(gauss_scores[2.0], probe, 1.0)
    np.testing.assert_allclose(s2, s1 / 2, rtol=0.1, atol=0.05)


def test_symmetric_data_gives_odd_score():
    rng = np.random.default_rng(0)
    blob = rng.normal([1.5, 0.0], 0.3, size=(200, 2))
    ds = Dataset(np.vstack([blob, -blob]))
    sched = NoiseSchedule(0.2, 0.6, 3)
    score = make_score_model(2, sched, hidden_dim=32, n_layers=3, n_freq=4, seed=0)
    score, opt, _ = train_score(ds, score, TrainSettings(1500, 128, 3e-3, ema_decay=0.99), seed=0)
    s = score.frozen_copy(opt)
    probe = np.array([[1.0, 0.3], [2.0, -0.2], [1.5, 0.5]])
    a, b = score_at(s, probe, 0.2), score_at(s, -probe, 0.2)
    assert np.linalg.norm(a + b) / np.linalg.norm(a) < 0.2
