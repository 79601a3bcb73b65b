import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from eggfm.geometry import (
    GeodesicModel, MetricField, constant_metric, fit_metric, geodesic_loss, line_integral, make_geodesic_model,
    metric_at, path_and_velocity, path_point, path_velocity, product_sampler, train_geodesic,
)
from eggfm.nn import DTYPE, as_tensor
from eggfm.score import NoiseSchedule, TrainSettings, make_energy_model


class FnEnergy:
    """Analytic stand-in for a trained energy model."""

    stratified = False
    n_clusters = 0
    schedule = NoiseSchedule(0.01, 0.2, 2)

    def __init__(self, fn):
        self.fn = fn

    def energy(self, y, sigma, cluster=None):
        return self.fn(y)


class ConstPsi(GeodesicModel):
    def __init__(self, c):
        super().__init__(net=None, dim=len(c))
        self.net = "const"
        self.c = torch.tensor(c, dtype=DTYPE)

    def psi(self, x0, x1, t):
        return self.c + 0.0 * t


def barbell_energy(y):
    # -log of a two-blob mixture centred at (+-2, 0)
    a = ((y - torch.tensor([-2.0, 0.0], dtype=DTYPE)) ** 2).sum(-1) / (2 * 0.5 ** 2)
    b = ((y - torch.tensor([2.0, 0.0], dtype=DTYPE)) ** 2).sum(-1) / (2 * 0.5 ** 2)
    return -torch.logsumexp(torch.stack([-a, -b], -1), -1)


# --------------------------------------------------------------------------- metric

def test_constant_energy_metric_value():
    sched = NoiseSchedule(0.01, 0.2, 3)
    e = make_energy_model(2, sched, hidden_dim=8, n_layers=2, n_freq=4)
    with torch.no_grad():
        for p in e.net.parameters():
            p.zero_()
    mf = fit_metric(e, np.random.default_rng(0).standard_normal((100, 2)), gamma=0.2, lam=10.0)
    probes = np.random.default_rng(1).uniform(-5, 5, (50, 2))
    np.testing.assert_allclose(metric_at(mf, probes), 10.2, rtol=1e-14)


def test_identity_metric():
    assert np.all(metric_at(constant_metric(1.0), np.zeros((3, 4))) == 1.0)


@pytest.fixture(scope="module")
def linear_metric():
    x = np.random.default_rng(0).uniform(-1, 1, (500, 2))
    return fit_metric(FnEnergy(lambda y: y[:, 0]), x, gamma=0.2, lam=10.0, clip_quantiles=(0.05, 0.95),
                      floor_quantile=0.2), x


@given(st.floats(-3, 3), st.floats(-3, 3))
def test_metric_monotone_in_energy(a, b):
    x = np.random.default_rng(0).uniform(-1, 1, (500, 2))
    mf = fit_metric(FnEnergy(lambda y: y[:, 0]), x, clip_quantiles=(0.05, 0.95), floor_quantile=0.2)
    ga, gb = metric_at(mf, [[a, 0.0], [b, 0.0]])
    if a < b:
        assert ga <= gb


def test_metric_floor_and_gamma_bound(linear_metric):
    mf, x = linear_metric
    g_train = metric_at(mf, x)
    assert g_train.min() >= mf.gamma + mf.floor - 1e-12
    probes = np.random.default_rng(3).uniform(-10, 10, (2000, 2))
    assert metric_at(mf, probes).min() >= mf.gamma
    # clipping bounds G above as well
    assert metric_at(mf, probes).max() <= mf.gamma + mf.lam * np.exp(mf.e_hi - mf.e_lo) + 1e-9


def test_energy_floor_mode_bounded():
    x = np.random.default_rng(0).uniform(-1, 1, (500, 2))
    mf = fit_metric(FnEnergy(lambda y: y[:, 0]), x, floor_quantile=0.2, floor_mode="energy")
    assert metric_at(mf, [[-5.0, 0.0]])[0] == pytest.approx(mf.gamma + mf.floor, rel=1e-12)


def test_metric_is_differentiable():
    mf = fit_metric(FnEnergy(lambda y: (y ** 2).sum(-1)), np.random.default_rng(0).standard_normal((200, 2)),
                    clip_quantiles=(0.0, 1.0), floor_quantile=0.0)
    x = torch.tensor([[0.5, 0.5]], dtype=DTYPE, requires_grad=True)
    mf(x).sum().backward()
    assert torch.all(x.grad > 0)


# --------------------------------------------------------------------------- paths

@pytest.fixture(scope="module")
def random_psi():
    m = make_geodesic_model(3, hidden_dim=16, n_layers=2, n_freq=4, seed=0)
    with torch.no_grad():
        m.net.layers[-1].weight.normal_(0, 0.5, generator=torch.Generator().manual_seed(1))
        m.net.layers[-1].bias.normal_(0, 0.5, generator=torch.Generator().manual_seed(2))
    return m


def test_endpoint_pinning(random_psi):
    rng = np.random.default_rng(0)
    x0, x1 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    assert torch.equal(path_point(random_psi, x0, x1, 0.0), as_tensor(x0))
    assert torch.equal(path_point(random_psi, x0, x1, 1.0), as_tensor(x1))


def test_zero_psi_midpoint():
    m = GeodesicModel(None, 1)
    assert float(path_point(m, [[0.0]], [[1.0]], 0.5)) == 0.5
    np.testing.assert_array_equal(path_velocity(m, [[0.0, 1.0]], [[2.0, -1.0]], 0.3).numpy(), [[2.0, -2.0]])


def test_constant_psi_position_and_velocity():
    c = [0.4, -1.0]
    m = ConstPsi(c)
    x0, x1 = np.array([[0.0, 0.0]]), np.array([[1.0, 2.0]])
    t = 0.25
    expect = (1 - t) * x0 + t * x1 + t * (1 - t) * np.array(c)
    np.testing.assert_allclose(path_point(m, x0, x1, t).numpy(), expect, rtol=1e-15)
    _, v = path_and_velocity(m, x0, x1, t)
    np.testing.assert_allclose(v.detach().numpy(), x1 - x0 + (1 - 2 * t) * np.array(c), rtol=1e-15)
    _, v = path_and_velocity(m, x0, x1, 0.5)
    np.testing.assert_allclose(v.detach().numpy(), x1 - x0, rtol=1e-15)


@pytest.mark.parametrize("t", [0.1, 0.37, 0.5, 0.9])
def test_velocity_matches_finite_differences(random_psi, t):
    rng = np.random.default_rng(5)
    x0, x1 = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    h = 1e-5
    with torch.no_grad():
        fd = (path_point(random_psi, x0, x1, t + h) - path_point(random_psi, x0, x1, t - h)) / (2 * h)
    v = path_velocity(random_psi, x0, x1, t).detach()
    assert float((v - fd).norm() / fd.norm()) < 1e-4


def test_noise_shifts_position_not_velocity(random_psi):
    rng = np.random.default_rng(1)
    x0, x1, eps = (rng.standard_normal((4, 3)) for _ in range(3))
    a, va = path_and_velocity(random_psi, x0, x1, 0.3)
    b, vb = path_and_velocity(random_psi, x0, x1, 0.3, eps, 0.1)
    assert torch.allclose(b - a, 0.1 * as_tensor(eps), atol=1e-14)
    assert torch.equal(va, vb)


# --------------------------------------------------------------------------- loss

def test_loss_homogeneous_in_metric_and_floor(linear_metric):
    mf, _ = linear_metric
    rng = np.random.default_rng(2)
    x0, x1 = rng.uniform(-1, 1, (16, 2)), rng.uniform(-1, 1, (16, 2))
    m = make_geodesic_model(2, hidden_dim=16, n_layers=2, n_freq=4, seed=0)
    a = geodesic_loss(m, mf, x0, x1, 0.1, seed=4).detach()
    double = MetricField(mf.energy, 2 * mf.gamma, 2 * mf.lam, mf.e_lo, mf.e_hi, 2 * mf.floor)
    b = geodesic_loss(m, double, x0, x1, 0.1, seed=4).detach()
    assert float(b) == pytest.approx(2 * float(a), rel=1e-13)
    # gamma floor against the straight line (psi starts at zero)
    chord = float(((x1 - x0) ** 2).sum(-1).mean())
    assert float(a) >= mf.gamma * chord


def test_trained_path_invariant_to_metric_scale(linear_metric):
    mf, x = linear_metric
    double = MetricField(mf.energy, 2 * mf.gamma, 2 * mf.lam, mf.e_lo, mf.e_hi, 2 * mf.floor)
    st_ = TrainSettings(150, 64, 1e-3, grad_clip=1e12)
    kw = dict(hidden_dim=16, n_layers=2, n_freq=4, seed=0)
    a, oa, _ = train_geodesic(mf, product_sampler(x), st_, 2, **kw)
    b, ob, _ = train_geodesic(double, product_sampler(x), st_, 2, **kw)
    rng = np.random.default_rng(9)
    p0, p1 = rng.uniform(-1, 1, (32, 2)), rng.uniform(-1, 1, (32, 2))
    pa = path_point(a.frozen_copy(oa), p0, p1, 0.5).detach()
    pb = path_point(b.frozen_copy(ob), p0, p1, 0.5).detach()
    assert float((pa - pb).norm() / (pa - as_tensor(p0)).norm()) < 1e-3


def test_zero_steps_is_initialisation():
    m, opt, trace = train_geodesic(constant_metric(1.0), product_sampler(np.zeros((3, 2))),
                                   TrainSettings(0, 4, 1e-3), 2, hidden_dim=8, n_layers=2, n_freq=4)
    assert trace == [] and opt.step == 0
    fresh = make_geodesic_model(2, hidden_dim=8, n_layers=2, n_freq=4)
    for p, q in zip(m.net.parameters(), fresh.net.parameters()):
        assert torch.equal(p, q)


def _max_chord_deviation(model, x0, x1, n_t=51):
    ts = np.linspace(0, 1, n_t)
    dev = np.zeros(len(x0))
    with torch.no_grad():
        for t in ts:
            line = (1 - t) * x0 + t * x1
            dev = np.maximum(dev, np.linalg.norm(path_point(model, x0, x1, t).numpy() - line, axis=1))
    return dev / np.linalg.norm(x1 - x0, axis=1)


def test_constant_metric_recovers_straight_lines():
    x = np.random.default_rng(0).standard_normal((400, 2))
    m, opt, _ = train_geodesic(constant_metric(1.0), product_sampler(x), TrainSettings(300, 64, 1e-3), 2,
                               hidden_dim=32, n_layers=3, n_freq=4, seed=0)
    rng = np.random.default_rng(1)
    dev = _max_chord_deviation(m.frozen_copy(opt), rng.standard_normal((100, 2)), rng.standard_normal((100, 2)))
    assert dev.max() < 0.05


def test_barbell_path_beats_chord():
    rng = np.random.default_rng(0)
    pts = np.vstack([rng.normal([-2, 0], 0.5, (300, 2)), rng.normal([2, 0], 0.5, (300, 2))])
    mf = fit_metric(FnEnergy(barbell_energy), pts, gamma=0.2, lam=1.0, clip_quantiles=(0.05, 0.98),
                    floor_quantile=0.05)
    left, right = pts[:300], pts[300:]
    m, opt, _ = train_geodesic(mf, product_sampler(left, right), TrainSettings(600, 128, 2e-3), 2,
                               hidden_dim=32, n_layers=3, n_freq=4, sigma_flow=0.05, seed=0)
    m = m.frozen_copy(opt)
    x0, x1 = left[rng.integers(300, size=50)], right[rng.integers(300, size=50)]
    learned = line_integral(mf, lambda t: path_and_velocity(m, x0, x1, t))
    chord = line_integral(mf, lambda t: path_and_velocity(GeodesicModel(None, 2), x0, x1, t))
    assert learned.mean() < chord.mean()
