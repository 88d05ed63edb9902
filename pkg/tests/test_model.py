import math
import struct

import numpy as np
import pytest

from unlearn_audit.data import gen_blobs
from unlearn_audit.model import (CheckpointFormatError, ModelParams, TrainConfig, accuracy, ce_grad,
                                 cross_entropy, forward, load_checkpoint, mlp_init, predict,
                                 predict_batch, save_checkpoint, train)


def test_init_deterministic_and_shapes():
    a, b = mlp_init([4, 3, 2], 7), mlp_init([4, 3, 2], 7)
    assert a.equals(b)
    p = mlp_init([2, 8, 2], 0)
    assert [(W.shape, bb.shape) for W, bb in p.layers] == [((2, 8), (8,)), ((8, 2), (2,))]
    assert p.n_params == 2 * 8 + 8 + 8 * 2 + 2 == p.flat().size


def test_init_needs_two_sizes():
    with pytest.raises(ValueError):
        mlp_init([4], 0)


def test_params_are_immutable():
    p = mlp_init([3, 2], 0)
    with pytest.raises(ValueError):
        p.layers[0][0][0, 0] = 1.0


def test_with_flat_round_trip():
    p = mlp_init([3, 5, 2], 1)
    assert p.with_flat(p.flat()).equals(p)
    with pytest.raises(ValueError):
        p.with_flat(np.zeros(3))


def test_forward_examples():
    zero = ModelParams(((np.zeros((3, 2)), np.zeros(2)),))
    np.testing.assert_array_equal(forward(zero, np.ones((4, 3))), np.zeros((4, 2)))
    ident = ModelParams(((np.eye(2), np.zeros(2)),))
    np.testing.assert_array_equal(forward(ident, np.array([[0.25, -1.5]])), [[0.25, -1.5]])
    p = mlp_init([3, 4, 2], 0)
    assert forward(p, np.zeros((7, 3))).shape == (7, 2)


def test_cross_entropy_examples():
    zero = ModelParams(((np.zeros((1, 10)), np.zeros(10)),))
    assert cross_entropy(zero, np.zeros((1, 1)), np.array([3])) == pytest.approx(math.log(10), abs=1e-12)
    big = ModelParams(((np.zeros((1, 2)), np.array([1000.0, 0.0])),))
    assert cross_entropy(big, np.zeros((1, 1)), np.array([0])) == pytest.approx(0.0, abs=1e-12)
    p = mlp_init([2, 3], 4)
    X = np.array([[0.1, 0.2], [0.7, -0.3]])
    y = np.array([0, 2])
    rows = [cross_entropy(p, X[i:i + 1], y[i:i + 1]) for i in range(2)]
    assert cross_entropy(p, X, y) == pytest.approx(np.mean(rows), abs=1e-14)


def test_ce_grad_matches_finite_differences():
    p = mlp_init([3, 4, 2], 2)
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(5, 3)), rng.integers(0, 2, 5)
    _, grads = ce_grad(p, X, y)
    flat = np.concatenate([g.ravel() for g in grads])
    theta = p.flat()
    num = np.empty_like(theta)
    for k in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[k] += 1e-6
        dn[k] -= 1e-6
        num[k] = (cross_entropy(p.with_flat(up), X, y) - cross_entropy(p.with_flat(dn), X, y)) / 2e-6
    np.testing.assert_allclose(flat, num, atol=1e-7)


def test_train_separable_blobs():
    ds = gen_blobs(100, 2, 2, 0.05, seed=0)
    cfg = TrainConfig(learning_rate=0.1, epochs=50, batch_size=32, momentum=0.9, seed=0)
    p = train(mlp_init([2, 16, 2], 0), ds.X, ds.y, cfg)
    assert accuracy(p, ds.X, ds.y) >= 0.99
    assert train(mlp_init([2, 16, 2], 0), ds.X, ds.y, cfg).equals(p)


def test_train_zero_epochs_is_identity():
    init = mlp_init([2, 4, 2], 0)
    X = np.zeros((4, 2))
    out = train(init, X, np.array([0, 1, 0, 1]), TrainConfig(epochs=0))
    assert out.equals(init)


def test_predict_tie_and_argmax():
    tie = ModelParams(((np.zeros((1, 2)), np.zeros(2)),))
    cls, probs = predict(tie, np.zeros(1))
    assert cls == 0
    np.testing.assert_allclose(probs, [0.5, 0.5])
    p = ModelParams(((np.zeros((1, 2)), np.array([1.0, 3.0])),))
    assert predict(p, np.zeros(1))[0] == 1
    rnd = mlp_init([4, 6, 5], 3)
    _, P = predict_batch(rnd, np.random.default_rng(0).normal(size=(20, 4)))
    assert np.all(np.abs(P.sum(axis=1) - 1.0) <= 1e-9)


def test_accuracy_examples():
    always0 = ModelParams(((np.zeros((1, 2)), np.array([1.0, 0.0])),))
    X = np.zeros((4, 1))
    assert accuracy(always0, X, np.zeros(4, int)) == 1.0
    assert accuracy(always0, X, np.ones(4, int)) == 0.0
    assert accuracy(always0, X, np.array([0, 0, 1, 1])) == 0.5


def test_checkpoint_round_trip(tmp_path):
    p = mlp_init([8, 32, 10], 9)
    save_checkpoint(p, tmp_path / "m.evec")
    q = load_checkpoint(tmp_path / "m.evec")
    assert q.equals(p)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(p.arrays(), q.arrays()))


def test_checkpoint_rejects_bad_files(tmp_path):
    p = mlp_init([3, 2], 0)
    path = tmp_path / "m.evec"
    save_checkpoint(p, path)
    raw = path.read_bytes()
    (tmp_path / "trunc").write_bytes(raw[:-3])
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "extra").write_bytes(raw + b"\0")
    for name in ("trunc", "magic", "extra"):
        with pytest.raises(CheckpointFormatError):
            load_checkpoint(tmp_path / name)


def test_checkpoint_layout(tmp_path):
    p = ModelParams(((np.array([[1.0, 2.0]]), np.array([3.0, 4.0])),))
    save_checkpoint(p, tmp_path / "m")
    raw = (tmp_path / "m").read_bytes()
    assert raw[:4] == b"EVEC"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<II", raw[12:20]) == (1, 2)
    assert struct.unpack("<4d", raw[20:]) == (1.0, 2.0, 3.0, 4.0)
