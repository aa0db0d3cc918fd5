import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from geofuse.exceptions import TrainingError
from geofuse.ufno import (TrainConfig, UFNORegressor, UfnoConfig, adam_init, adam_step, fit_normalizer,
                          init_params, train_arrays)
from geofuse.ufno.train import split_indices

TOY_U = UfnoConfig(width=4, n_fourier=1, n_ufourier=1, modes=(3, 3, 2), pad_multiple=(4, 4, 4), q_hidden=8)


def _toy(n=20, seed=0):
    """Smooth targets driven by the input: y = tanh(mean-filtered logk) * t."""
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((n, 8, 8))
    sm = (k + np.roll(k, 1, 1) + np.roll(k, -1, 1) + np.roll(k, 1, 2) + np.roll(k, -1, 2)) / 5
    t = np.linspace(0, 1, 4)
    y = np.tanh(sm)[..., None] * t + 0.3 * t
    return k, y, t


# -- ADAM ----------------------------------------------------------------------------
def _single(value):
    p = init_params(TOY_U, np.random.default_rng(0))
    g = {k: np.full_like(v, value) for k, v in p.items()}
    return p, g


def test_adam_zero_gradient_leaves_params():
    p, g = _single(0.0)
    before = p.copy()
    adam_step(p, g, adam_init(p), 1, TrainConfig())
    for k in p:
        assert np.array_equal(p[k], before[k])


@pytest.mark.parametrize("g", [3.7, -0.02, 1e3])
def test_adam_first_step_is_signed_lr(g):
    cfg = TrainConfig(lr=1e-3)
    p, grads = _single(g)
    before = p.copy()
    adam_step(p, grads, adam_init(p), 1, cfg)
    expected = -cfg.lr * g / (abs(g) + cfg.eps)  # m_hat = g, v_hat = g^2 after bias correction
    for k in p:
        d = p[k] - before[k]
        assert np.allclose(d, expected, rtol=0, atol=1e-15)
        assert np.all(np.abs(d + cfg.lr * np.sign(g)) <= 1e-6)


def test_adam_constant_gradient_keeps_unit_steps():
    cfg = TrainConfig(lr=1e-2)
    p, g = _single(0.5)
    m = adam_init(p)
    key = next(iter(p))
    for t in range(1, 6):
        before = p[key].copy()
        adam_step(p, g, m, t, cfg)
        assert np.allclose(p[key] - before, -cfg.lr, atol=1e-9)
    with pytest.raises(ValueError):
        adam_step(p, g, m, 0, cfg)


def test_train_config_validation():
    for bad in ({"epochs": -1}, {"batch_size": 0}, {"lr": 0}, {"beta1": 1.0}, {"val_fraction": 1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# -- normalizer ----------------------------------------------------------------------
def test_normalizer_stats_on_training_inputs():
    rng = np.random.default_rng(1)
    k = rng.normal(4.5, 1.3, (30, 6, 5))
    y = rng.normal(20, 4, (30, 6, 5, 3))
    n = fit_normalizer(k, {"salinity": y}, times=[0, 10, 20])
    z = n.apply_input(k)
    assert abs(z.mean()) <= 1e-6 and abs(z.std() - 1) <= 1e-6
    zy = n.apply("salinity", y)
    assert abs(zy.mean()) <= 1e-6 and abs(zy.std() - 1) <= 1e-6
    assert n.t_scale == 20


@given(st.floats(-50, 50), st.floats(0.01, 100), st.integers(0, 1000))
def test_normalizer_round_trip(mu, sd, seed):
    rng = np.random.default_rng(seed)
    k = rng.normal(mu, sd, (5, 4, 3))
    n = fit_normalizer(k, {"q": k[..., None]})
    x = rng.normal(mu, sd, (2, 4, 3))
    assert np.max(np.abs(n.invert_input(n.apply_input(x)) - x)) <= 1e-10 * max(1.0, abs(mu) + 10 * sd)
    assert np.max(np.abs(n.invert("q", n.apply("q", x)) - x)) <= 1e-10 * max(1.0, abs(mu) + 10 * sd)


def test_normalizer_constant_data_is_finite():
    n = fit_normalizer(np.full((3, 2, 2), 4.0), {"q": np.zeros((3, 2, 2, 1))})
    assert np.all(np.isfinite(n.apply_input(np.full((1, 2, 2), 4.0))))
    assert np.all(n.apply("q", np.zeros(3)) == 0)


def test_normalizer_active_subset_and_dict_round_trip():
    k = np.zeros((2, 2, 2))
    k[:, 0, 0] = 1000.0  # inactive outlier
    k[:, 1, :] = [1.0, 3.0]
    active = np.array([[False, False], [True, True]])
    n = fit_normalizer(k, {"q": k[..., None]}, active=active)
    assert n.logk_mean == 2.0 and n.logk_std == 1.0
    assert type(n).from_dict(n.to_dict()) == n
    with pytest.raises(ValueError):
        fit_normalizer(np.zeros((0, 2, 2)), {})


def test_split_is_deterministic_and_disjoint():
    tr, va = split_indices(20, 0.1, 4)
    assert len(va) == 2 and len(tr) == 18
    assert not set(tr) & set(va)
    assert np.array_equal(tr, split_indices(20, 0.1, 4)[0])
    with pytest.raises(ValueError):
        split_indices(1, 0.1, 0)


# -- training ------------------------------------------------------------------------
@pytest.fixture(scope="module")
def toy_run():
    k, y, t = _toy()
    act = np.ones((8, 8), bool)
    act[:2] = False
    tcfg = TrainConfig(epochs=50, batch_size=4, lr=5e-3, val_fraction=0.1, seed=11)
    p, log = train_arrays(k, y, t, act, tcfg, TOY_U)
    return k, y, t, act, tcfg, p, log


def test_toy_training_halves_loss(toy_run):
    *_, log = toy_run
    assert len(log) == 51 and log[0][0] == 0
    assert log[-1][1] < 0.5 * log[0][1]


def test_validation_beats_constant_mean(toy_run):
    from geofuse.ufno.train import dataset_loss
    from geofuse.ufno import input_tensor, zero_params, loss
    k, y, t, act, tcfg, p, log = toy_run
    tr, va = split_indices(len(k), tcfg.val_fraction, tcfg.seed)
    const = np.broadcast_to(y[tr].mean(axis=0), y[va].shape)
    baseline = loss(const, y[va], act, tcfg.lam)
    assert log[-1][2] < baseline


def test_training_is_deterministic(toy_run):
    k, y, t, act, tcfg, p, log = toy_run
    short = TrainConfig(**{**tcfg.to_dict(), "epochs": 3})
    a, la = train_arrays(k, y, t, act, short, TOY_U)
    b, lb = train_arrays(k, y, t, act, short, TOY_U)
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert [r[:3] for r in la] == [r[:3] for r in lb]


def test_nan_targets_abort_training():
    k, y, t = _toy(6)
    y[0, 3, 3, 1] = np.nan
    with pytest.raises(TrainingError):
        train_arrays(k, y, t, np.ones((8, 8), bool), TrainConfig(epochs=1, val_fraction=0, batch_size=6), TOY_U)


def test_shape_mismatch_rejected():
    k, y, t = _toy(4)
    with pytest.raises(ValueError):
        train_arrays(k, y[..., :2], t, np.ones((8, 8), bool), TrainConfig(epochs=1), TOY_U)


def test_regressor_estimator_api():
    from sklearn.base import clone
    k, y, t = _toy(12, seed=2)
    k = 4.5 + k
    y = 30 * y + 2
    est = UFNORegressor(width=4, n_fourier=1, n_ufourier=1, modes=(3, 3, 2), pad_multiple=(4, 4, 4),
                        q_hidden=8, epochs=30, lr=5e-3, seed=1)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(ValueError):
        est.predict(k)
    est.fit(k, y, times=t)
    pred = est.predict(k[:3])
    assert pred.shape == (3, 8, 8, 4) and np.all(np.isfinite(pred))
    assert est.score(k, y) > 0
    with pytest.raises(ValueError):
        est.fit(k, y[0])
