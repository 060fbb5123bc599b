import json
import os

import numpy as np
import pytest
from conftest import random_images, tiny_model
from sklearn.base import clone

from attrobf.exceptions import (BadMagicError, ChecksumError, ConfigError, ShapeError,
                                VersionMismatchError)
from attrobf.gradcheck import numerical_grad, relative_error
from attrobf.model import (Architecture, ForkedClassifier, argmax_classes, load_model, multitask_loss,
                           network_backward, network_forward, save_model)
from attrobf.rng import Rng

GOLDEN = os.path.join(os.path.dirname(__file__), "golden", "forward_seed42.json")


def golden_input():
    return Rng(2024).random((2, 3, 32, 32)).astype(np.float32)


def test_architecture_geometry():
    arch = Architecture()
    assert arch.trunk_spatial == 4  # 32 / 2**3
    assert arch.trunk_features == 64 * 16
    assert arch.public_features == 128 * 4
    b = Architecture(trunk_widths=(16, 32, 64, 128))
    assert b.n_parameters() != arch.n_parameters()
    with pytest.raises(ConfigError):
        Architecture(image_size=24)


def test_zero_heads_give_zero_logits():
    m = ForkedClassifier().initialize()
    for k in m.params_:
        if k.startswith(("hidden.", "public.")):
            m.params_[k][...] = 0
    lh, lp = m.decision_function(np.zeros((1, 3, 32, 32)))
    assert not lh.any() and not lp.any()
    assert lh.shape == (1, 5) and lp.shape == (1, 2)


def test_forward_deterministic():
    m = ForkedClassifier(seed=3).initialize()
    x = golden_input()
    a = m.decision_function(x)
    b = m.decision_function(x)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_heads_are_independent_given_the_trunk(tiny):
    x = random_images(2)
    lh0, lp0, _ = network_forward(tiny.params_, tiny.arch_, x)
    tiny.params_["hidden.fc1.weight"] += 1.0
    lh1, lp1, _ = network_forward(tiny.params_, tiny.arch_, x)
    assert np.array_equal(lp0, lp1) and not np.array_equal(lh0, lh1)
    tiny.params_["public.conv0.weight"] *= -1
    lh2, lp2, _ = network_forward(tiny.params_, tiny.arch_, x)
    assert np.array_equal(lh1, lh2) and not np.array_equal(lp1, lp2)


def test_forward_golden():
    # frozen from the first build whose layers passed the finite-difference suite
    with open(GOLDEN) as f:
        gold = json.load(f)
    m = ForkedClassifier(seed=42).initialize()
    lh, lp = m.decision_function(golden_input())
    np.testing.assert_allclose(lh, np.array(gold["hidden"]), rtol=1e-4, atol=1e-5)
    np.testing.assert_allclose(lp, np.array(gold["public"]), rtol=1e-4, atol=1e-5)


def test_wrong_geometry_rejected():
    m = ForkedClassifier().initialize()
    with pytest.raises(ShapeError):
        m.decision_function(np.zeros((1, 3, 16, 16)))
    with pytest.raises(ShapeError):
        m.decision_function(np.zeros((1, 1, 32, 32)))


def test_multitask_loss_reduces_to_hidden_ce():
    rng = Rng(1)
    lh, lp = rng.normal((4, 5)), rng.normal((4, 2))
    yh, yp = np.array([0, 1, 4, 2]), np.array([1, 0, 0, 1])
    loss, gh, gp = multitask_loss(lh, yh, lp, yp, 1.0, 0.0)
    from attrobf.layers import softmax_cross_entropy
    ce, g = softmax_cross_entropy(lh, yh)
    assert loss == ce
    assert np.array_equal(gh, g)
    assert not gp.any()


def test_multitask_loss_alpha_linearity():
    rng = Rng(2)
    lh, lp = rng.normal((6, 5)), rng.normal((6, 2))
    yh, yp = rng.integers(0, 5, 6), rng.integers(0, 2, 6)
    for a1, a2 in [(1.0, 1.0), (0.3, 2.5), (1.0, 1e-5)]:
        l1, gh1, gp1 = multitask_loss(lh, yh, lp, yp, a1, a2)
        l2, gh2, gp2 = multitask_loss(lh, yh, lp, yp, 2 * a1, 2 * a2)
        assert abs(l2 - 2 * l1) <= 1e-12 * max(1.0, abs(l1))
        np.testing.assert_allclose(gh2, 2 * gh1, rtol=1e-12)


def test_multitask_loss_rejects_negative_alpha():
    with pytest.raises(ConfigError):
        multitask_loss(np.zeros(3), 0, np.zeros(2), 0, -1.0, 1.0)


def test_input_gradient_finite_difference(tiny):
    x = random_images(1, seed=5)
    yh, yp = np.array([2]), np.array([1])

    def loss():
        lh, lp, _ = network_forward(tiny.params_, tiny.arch_, x)
        return multitask_loss(lh, yh, lp, yp, 1.0, 0.7, "sum")[0]

    lh, lp, cache = network_forward(tiny.params_, tiny.arch_, x)
    _, gh, gp = multitask_loss(lh, yh, lp, yp, 1.0, 0.7, "sum")
    _, gx = network_backward(cache, gh, gp)
    assert relative_error(gx, numerical_grad(loss, x)) < 1e-4


def test_parameter_gradient_finite_difference(tiny):
    x = random_images(2, seed=6)
    yh, yp = np.array([0, 2]), np.array([1, 0])
    lh, lp, cache = network_forward(tiny.params_, tiny.arch_, x)
    _, gh, gp = multitask_loss(lh, yh, lp, yp, 1.0, 1.0)
    grads, _ = network_backward(cache, gh, gp)

    def loss():
        a, b, _ = network_forward(tiny.params_, tiny.arch_, x)
        return multitask_loss(a, yh, b, yp, 1.0, 1.0)[0]

    for name in ("trunk0.conv0.weight", "trunk2.conv1.bias", "hidden.fc0.weight", "public.conv1.weight",
                 "public.fc1.bias"):
        err = relative_error(grads[name], numerical_grad(loss, tiny.params_[name]))
        assert err < 1e-4, name


def toy_set(n=200, seed=0):
    """Hidden label = mean red > 0.5, public label = mean blue > 0.5 (separable by construction)."""
    rng = Rng(seed)
    # channel means kept at least 0.1 away from the threshold
    side = np.where(rng.random((n, 3, 1, 1)) < 0.5, -1.0, 1.0)
    base = 0.5 + side * rng.uniform(0.1, 0.5, (n, 3, 1, 1))
    x = np.clip(base + 0.05 * rng.normal((n, 3, 32, 32)), 0, 1).astype(np.float32)
    y = np.column_stack([x[:, 0].mean(axis=(1, 2)) > 0.5, x[:, 2].mean(axis=(1, 2)) > 0.5]).astype(int)
    return x, y


def test_train_separable_toy_set_to_full_accuracy():
    x, y = toy_set()
    m = ForkedClassifier(n_hidden_classes=2, epochs=5, batch_size=16, seed=0).fit(x, y)
    assert len(m.history_) == 5
    pred = m.predict(x)
    assert np.mean(pred[:, 0] == y[:, 0]) == 1.0
    assert np.mean(pred[:, 1] == y[:, 1]) == 1.0


def test_zero_epochs_equals_initialization():
    x, y = toy_set(20)
    m = ForkedClassifier(n_hidden_classes=2, epochs=0, seed=4).fit(x, y)
    init = ForkedClassifier(n_hidden_classes=2, seed=4).initialize()
    for k in init.params_:
        assert np.array_equal(m.params_[k], init.params_[k])


def test_training_is_deterministic():
    x, y = toy_set(40)
    est = ForkedClassifier(n_hidden_classes=2, epochs=2, batch_size=8, seed=9)
    a = clone(est).fit(x, y)
    b = clone(est).fit(x, y)
    for k in a.params_:
        assert np.array_equal(a.params_[k], b.params_[k])
    assert all(np.all(np.isfinite(p)) for p in a.params_.values())


def test_train_rejects_empty_and_bad_labels():
    with pytest.raises(ValueError):
        ForkedClassifier(epochs=1).fit(np.zeros((0, 3, 32, 32)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        ForkedClassifier(epochs=1).fit(np.zeros((1, 3, 32, 32)), np.array([[5, 0]]))


def test_train_rejects_all_zero_alphas():
    x, y = toy_set(4)
    with pytest.raises(ConfigError):
        ForkedClassifier(n_hidden_classes=2, alpha1=0, alpha2=0).fit(x, y)


def test_reference_alpha_configuration_accepted():
    x, y = toy_set(8)
    ForkedClassifier(n_hidden_classes=2, epochs=1, alpha1=1.0, alpha2=1e-5).fit(x, y)


def test_nan_loss_aborts_with_context():
    from attrobf.exceptions import NonFiniteError
    x, y = toy_set(8)
    with pytest.raises(NonFiniteError, match=r"epoch 0, batch \d+"):
        ForkedClassifier(n_hidden_classes=2, epochs=1, lr=1e30, batch_size=4).fit(x, y)


def test_argmax_tie_break_and_shift_invariance():
    assert argmax_classes(np.array([0.0, 0.0])) == 0
    assert argmax_classes(np.array([1.0, 3.0, 2.0])) == 1
    z = Rng(3).normal((50, 5))
    assert np.array_equal(argmax_classes(z), argmax_classes(z + 7.25))


def test_predict_shape():
    m = ForkedClassifier().initialize()
    p = m.predict(Rng(0).random((3, 3, 32, 32)))
    assert p.shape == (3, 2)


def test_get_params_roundtrip():
    m = ForkedClassifier(trunk_widths=(16, 32, 64, 128), lr=0.01)
    p = m.get_params()
    assert p["trunk_widths"] == (16, 32, 64, 128) and p["lr"] == 0.01
    assert clone(m).get_params() == p


def test_save_load_bit_exact(tmp_path):
    m = ForkedClassifier(seed=5).initialize()
    path = tmp_path / "m.fob"
    save_model(m, path)
    r = load_model(path)
    assert r.arch_ == m.arch_
    for k in m.params_:
        assert r.params_[k].dtype == np.float32
        assert np.array_equal(r.params_[k], m.params_[k])
    save_model(r, tmp_path / "again.fob")
    assert (tmp_path / "again.fob").read_bytes() == path.read_bytes()


def test_load_truncated_is_checksum_error(tmp_path):
    path = tmp_path / "m.fob"
    save_model(ForkedClassifier().initialize(), path)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(ChecksumError):
        load_model(path)


def test_load_flipped_byte_is_checksum_error(tmp_path):
    path = tmp_path / "m.fob"
    save_model(ForkedClassifier().initialize(), path)
    data = bytearray(path.read_bytes())
    data[100] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_model(path)


def test_load_bad_magic(tmp_path):
    path = tmp_path / "m.fob"
    save_model(ForkedClassifier().initialize(), path)
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        load_model(path)


def test_load_version_mismatch(tmp_path):
    path = tmp_path / "m.fob"
    save_model(ForkedClassifier().initialize(), path)
    data = path.read_bytes()
    path.write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(VersionMismatchError):
        load_model(path)
