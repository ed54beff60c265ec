import numpy as np
import pytest

from metadrop import autodiff as ad
from metadrop.nn import (
    LayerSpec,
    Network,
    StaticPlan,
    conv4_network,
    dense_network,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def test_he_bound_for_dense_2_to_3():
    net = dense_network(2, (3,), 2)
    theta = init_params(net, 11)
    assert np.all(np.abs(theta["layer0/w"].data) <= np.sqrt(6 / 2))
    assert np.array_equal(theta["layer0/b"].data, np.zeros((1, 3)))


def test_init_is_deterministic_per_seed():
    net = dense_network()
    a, b, c = init_params(net, 5), init_params(net, 5), init_params(net, 6)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("dense", 0, 3)
    with pytest.raises(ValueError):
        LayerSpec("recurrent", 2, 3)
    with pytest.raises(ValueError):
        Network((LayerSpec("dense", 2, 3), LayerSpec("dense", 4, 5)), 2, (2,), 5)


def test_unit_noise_is_bitwise_identity():
    net = dense_network(2, (6, 6), 4)
    theta = init_params(net, 0)
    x = np.random.default_rng(0).standard_normal((7, 2))
    plain = forward(net, theta, x).data
    ones = forward(net, theta, x, StaticPlan([np.ones((7, 6))] * 2)).data
    assert np.array_equal(plain, ones)


def test_zero_noise_annihilates_first_layer_of_bias_free_net():
    net = dense_network(2, (5, 5), 3)
    theta = init_params(net, 1)
    x = np.random.default_rng(1).standard_normal((4, 2))
    zeroed = forward(net, theta, x, StaticPlan([np.zeros((4, 5))])).data
    # With zero biases, h1 = 0 so the remaining layers see a zero input.
    rest = dense_network(5, (5,), 3)
    rest_theta = {"layer0/w": theta["layer1/w"], "layer0/b": theta["layer1/b"],
                  "out/w": theta["out/w"], "out/b": theta["out/b"]}
    np.testing.assert_array_equal(zeroed, forward(rest, rest_theta, np.zeros((4, 5))).data)


def test_hand_computed_noise_scaling():
    net = Network((LayerSpec("dense", 2, 2),), 2, (2,), 2)
    theta = {"layer0/w": ad.tensor(np.eye(2)), "layer0/b": ad.tensor(np.zeros((1, 2))),
             "out/w": ad.tensor(np.eye(2)), "out/b": ad.tensor(np.zeros((1, 2)))}
    out = forward(net, theta, np.array([[1.0, 2.0]]), StaticPlan([np.array([[2.0, 1.0]])]))
    assert out.data.tolist() == [[2.0, 2.0]]


def test_noise_shape_mismatch_raises():
    net = dense_network(2, (4,), 2)
    theta = init_params(net, 0)
    with pytest.raises(ValueError):
        forward(net, theta, np.zeros((3, 2)), StaticPlan([np.ones((3, 5))]))


def test_input_shape_mismatch_raises():
    net = dense_network(2, (4,), 2)
    with pytest.raises(ValueError):
        forward(net, init_params(net, 0), np.zeros((3, 3)))


def test_forward_is_deterministic_and_finite():
    net = dense_network()
    theta = init_params(net, 2)
    x = np.random.default_rng(2).standard_normal((9, 2)) * 50
    a, b = forward(net, theta, x).data, forward(net, theta, x).data
    assert np.array_equal(a, b) and np.isfinite(a).all()


def test_conv_backbone_shapes():
    net = conv4_network(image_size=28, in_channels=1, channels=8, num_classes=5)
    assert net.classifier_in == 1 * 1 * 8
    theta = init_params(net, 0)
    x = np.random.default_rng(0).random((3, 28, 28, 1))
    logits, feats = forward(net, theta, x, return_features=True)
    assert logits.shape == (3, 5) and feats.shape == (3, 8)


def test_episode_batched_parameters_match_per_episode_forward():
    from metadrop.metalearn import expand_params

    net = dense_network(2, (5,), 3)
    theta = init_params(net, 0)
    xs = np.random.default_rng(0).standard_normal((2, 1, 4, 2))
    batched = forward(net, expand_params(theta, 2), xs).data
    for e in range(2):
        np.testing.assert_array_equal(batched[e, 0], forward(net, theta, xs[e, 0]).data)


def test_checkpoint_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"theta:layer0/w": rng.standard_normal((3, 2)), "phi:scalar": np.array(np.pi),
              "lrs:empty": np.zeros((0, 2))}
    save_checkpoint(tmp_path / "c.ckpt", arrays, {"iteration": 3})
    loaded, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"iteration": 3}
    for k, v in arrays.items():
        assert loaded[k].shape == v.shape
        assert np.array_equal(loaded[k], v)


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_text("hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)
