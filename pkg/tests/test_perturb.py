import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import unlearn_audit.perturb as perturb_mod
from unlearn_audit.autodiff import NumericError
from unlearn_audit.data import Dataset, TargetSet, gen_blobs, select_targets, split
from unlearn_audit.model import ModelParams, TrainConfig, mlp_init, train
from unlearn_audit.perturb import (RESTARTS, TARGETED, UNTARGETED, PerturbConfig, load_request, match_loss,
                                   perturb, phi_and_grad, phi_grad_fd, target_gradient, udpd, udpd_restarts)
from unlearn_audit.unlearn import HBU, UnlearnObjective, UnsupportedObjective

GA = UnlearnObjective()


@pytest.fixture(scope="module")
def reference():
    ds = gen_blobs(200, 10, 8, 0.05, seed=0)
    sp = split(ds, 0.02, 0.2, seed=0)
    p = train(mlp_init([8, 32, 10], 0), sp.train.X, sp.train.y, TrainConfig(learning_rate=0.05, epochs=30, seed=0))
    return p, sp, select_targets(p, sp.heldout, 50, 0.9)


def test_match_loss_examples():
    g = np.array([0.3, -1.0, 2.0])
    assert match_loss(g, g) == pytest.approx(0.0, abs=1e-15)
    assert match_loss(g, -g) == pytest.approx(2.0, abs=1e-15)
    assert match_loss(np.array([1.0, 0.0]), np.array([1.0, 1.0])) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-12)


@given(st.floats(-5, 5).filter(lambda v: abs(v) > 1e-6), st.floats(-5, 5).filter(lambda v: abs(v) > 1e-6))
def test_match_loss_scalar_gradients_are_zero_or_two(a, b):
    phi = match_loss(np.array([a]), np.array([b]))
    assert phi == pytest.approx(0.0 if a * b > 0 else 2.0, abs=1e-12)


def test_match_loss_zero_vector_is_guarded():
    assert match_loss(np.zeros(3), np.ones(3)) == 1.0


def _single_target(x, y, y_wrong):
    x = np.atleast_2d(np.asarray(x, float))
    return TargetSet(x, np.array([y]), np.array([y_wrong]), np.array([0]), np.array([1.0]))


def test_target_gradient_modes_agree_in_sign_on_binary_model():
    p = ModelParams(((np.array([[0.4, -0.2]]), np.array([0.1, 0.0])),))
    T = _single_target([0.7], 0, 1)
    gt = target_gradient(GA, p, T, TARGETED)
    gu = target_gradient(GA, p, T, UNTARGETED)
    assert gt.shape == (p.n_params,)
    nz = (gt != 0) | (gu != 0)
    assert np.array_equal(np.sign(gt[nz]), np.sign(gu[nz]))


def test_target_gradient_descent_raises_wrong_class(reference):
    p, _, T = reference
    g = target_gradient(GA, p, T)
    q = p.with_flat(p.flat() - 1e-3 * g)
    from unlearn_audit.model import cross_entropy
    assert cross_entropy(q, T.X, T.y_wrong) < cross_entropy(p, T.X, T.y_wrong)


def test_target_gradient_errors():
    p = mlp_init([1, 2], 0)
    empty = TargetSet(np.zeros((0, 1)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    with pytest.raises(ValueError):
        target_gradient(GA, p, empty)
    with pytest.raises(UnsupportedObjective):
        target_gradient(UnlearnObjective(HBU), p, _single_target([0.5], 0, 1))


def test_perturb_config_validation():
    with pytest.raises(ValueError):
        PerturbConfig(d=-0.1)
    with pytest.raises(ValueError):
        PerturbConfig(restarts=11)


def test_zero_iterations_is_projected_initial_draw(reference):
    p, sp, T = reference
    req = udpd(p, sp.erased, T, PerturbConfig(n=0, d=0.3, seed=1), GA)
    assert len(req.trace.phi_per_iter) == 1 and req.trace.best_iter == 0
    assert np.max(np.abs(req.delta)) <= 0.3


def test_descent_projection_and_improvement(reference):
    p, sp, T = reference
    cfg = PerturbConfig(d=0.3, eta=0.5, n=200, seed=0)
    req = udpd(p, sp.erased, T, cfg, GA)
    assert np.max(np.abs(req.delta)) <= 0.3 + 1e-15
    X = req.perturbed.X
    assert X.min() >= 0.0 and X.max() <= 1.0
    np.testing.assert_allclose(X, sp.erased.X + req.delta, atol=1e-15)
    trace = req.trace
    assert len(trace.phi_per_iter) == 200
    assert trace.best_phi == min(trace.phi_per_iter) <= trace.phi_per_iter[0]
    # value recorded from a run on this reference config
    assert trace.best_phi <= 0.5 * trace.phi_per_iter[0]
    # the returned delta is the best iterate, not the last
    phi_best, _ = phi_and_grad(GA, p, sp.erased.X, sp.erased.y, target_gradient(GA, p, T), req.delta, need_grad=False)
    assert phi_best == pytest.approx(trace.best_phi, abs=1e-12)


def test_d_zero_leaves_data_untouched(reference):
    p, sp, T = reference
    req = udpd(p, sp.erased, T, PerturbConfig(d=0.0, n=3), GA)
    assert np.array_equal(req.perturbed.X, sp.erased.X)


def test_restarts_superset(reference):
    p, sp, T = reference
    one = udpd_restarts(p, sp.erased, T, PerturbConfig(strategy=RESTARTS, restarts=1, inner_steps=10, eta=0.05), GA)
    five = udpd_restarts(p, sp.erased, T, PerturbConfig(strategy=RESTARTS, restarts=5, inner_steps=10, eta=0.05), GA)
    assert len(one.trace.phi_per_iter) == 10 and one.best_restart == 0
    assert five.best_phi <= one.best_phi
    assert five.trace.phi_per_iter[:10] == one.trace.phi_per_iter
    assert np.max(np.abs(five.delta)) <= 0.3


def test_all_restarts_diverge_is_flagged(reference, monkeypatch):
    p, sp, T = reference

    def boom(*args, **kwargs):
        raise NumericError("forced")

    monkeypatch.setattr(perturb_mod, "_phi_grad", boom)
    req = perturb(p, sp.erased, T, PerturbConfig(strategy=RESTARTS, restarts=3, inner_steps=5), GA)
    assert req.diverged and math.isnan(req.best_phi)
    req = perturb(p, sp.erased, T, PerturbConfig(n=5), GA)
    assert req.diverged


def test_double_backprop_matches_finite_differences():
    # 4 -> 6 -> 3 MLP: 51 parameters
    rng = np.random.default_rng(0)
    p = mlp_init([4, 6, 3], 1)
    X = rng.uniform(0.2, 0.8, size=(3, 4))
    y = np.array([0, 1, 2])
    g_t = rng.normal(size=p.n_params)
    delta = rng.uniform(-0.05, 0.05, size=X.shape)
    _, analytic = phi_and_grad(GA, p, X, y, g_t, delta)
    numeric = phi_grad_fd(GA, p, X, y, g_t, delta, eps=1e-6)
    rel = np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric))))
    assert rel <= 1e-4


def test_request_save_load(reference, tmp_path):
    p, sp, T = reference
    cfg = PerturbConfig(n=2)
    req = udpd(p, sp.erased, T, cfg, GA)
    req.save(tmp_path, cfg)
    ds, meta = load_request(tmp_path)
    assert ds.X.tobytes() == req.perturbed.X.tobytes()
    assert np.array_equal(ds.y, sp.erased.y)
    assert meta["best_phi"] == req.best_phi and meta["d"] == 0.3
