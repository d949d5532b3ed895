import numpy as np
import pytest

from nsfx.errors import ConsistencyError, InvalidInputError, ShapeError
from nsfx.gradcheck import check_network_gradients, finite_diff
from nsfx.losses import HeadParams, NoiseSpec
from nsfx.network import LayerSpec, Network, architecture, he_init, output_shape
from nsfx.numerics import Rng

from conftest import rel_err


def test_layer_spec_parse_roundtrip():
    for text in ["dense(784, 128)", "prelu(8)", "conv2d(1, 8)", "maxpool", "flatten"]:
        assert str(LayerSpec.parse(text)) == text
    with pytest.raises(InvalidInputError):
        LayerSpec.parse("dense(3)")
    with pytest.raises(InvalidInputError):
        LayerSpec.parse("softmax")
    with pytest.raises(InvalidInputError):
        LayerSpec.parse("dense(3, x)")


def test_he_init_variance_and_biases():
    layer = LayerSpec("dense", (100, 50))
    r = Rng(0)
    draws = [he_init(layer, r.substream(k)) for k in range(2)]
    w = np.concatenate([d["weight"].ravel() for d in draws])
    assert w.size == 10**4
    assert abs(w.var() - 2 / 100) < 0.1 * 2 / 100
    assert all(not d["bias"].any() for d in draws)


def test_he_init_conv_fan_in_and_prelu():
    w = he_init(LayerSpec("conv2d", (4, 64)), Rng(1))["weight"]
    assert w.shape == (64, 4, 3, 3)
    assert abs(w.var() - 2 / 36) < 0.15 * 2 / 36
    assert np.all(he_init(LayerSpec("prelu", (5,)), Rng(1))["slope"] == 0.25)
    with pytest.raises(InvalidInputError):
        he_init(LayerSpec("maxpool"), Rng(1))


def test_he_init_deterministic():
    a = he_init(LayerSpec("dense", (6, 3)), Rng(9))
    b = he_init(LayerSpec("dense", (6, 3)), Rng(9))
    assert np.array_equal(a["weight"], b["weight"])


def test_identity_dense_passes_input():
    net = Network(["dense(3, 3)"], (3,), {"0.weight": np.eye(3), "0.bias": np.zeros(3)})
    x = Rng(2).normal((4, 3))
    np.testing.assert_array_equal(net.predict(x), x)


def test_prelu_definition():
    a = 0.3
    net = Network(["prelu(2)"], (2,), {"0.slope": np.array([a, a])})
    np.testing.assert_allclose(net.predict(np.array([[-1.0, 2.0]])), [[-a, 2.0]])


def test_prelu_is_per_channel():
    net = Network(["prelu(2)", "flatten"], (2, 1, 1), {"0.slope": np.array([0.1, 0.5])})
    np.testing.assert_allclose(net.predict(-np.ones((1, 2, 1, 1))), [[-0.1, -0.5]])


def test_conv_ones_kernel_hand_values():
    params = {"0.weight": np.ones((1, 1, 3, 3)), "0.bias": np.zeros(1)}
    net = Network(["conv2d(1, 1)", "flatten"], (1, 5, 5), params)
    out = net.predict(np.ones((1, 1, 5, 5))).reshape(5, 5)
    assert np.all(out[1:-1, 1:-1] == 9)
    assert out[0, 0] == out[0, -1] == out[-1, 0] == out[-1, -1] == 4
    assert np.all(out[0, 1:-1] == 6)


def test_conv_matches_direct_loop():
    r = Rng(3)
    w, b = r.normal((2, 3, 3, 3)), r.normal(2)
    x = r.normal((2, 3, 4, 5))
    net = Network(["conv2d(3, 2)", "flatten"], (3, 4, 5), {"0.weight": w, "0.bias": b})
    got = net.predict(x).reshape(2, 2, 4, 5)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros_like(got)
    for n in range(2):
        for o in range(2):
            for i in range(4):
                for j in range(5):
                    want[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_maxpool_values_and_first_max_ties():
    net = Network(["maxpool", "flatten"], (1, 2, 4), {})
    x = np.array([[[[1.0, 3.0, 2.0, 2.0], [0.0, -1.0, 2.0, 2.0]]]])
    np.testing.assert_array_equal(net.predict(x), [[3.0, 2.0]])
    feats, cache = net.forward(x)
    net.backward(cache, np.ones((1, 2)))
    # tie: gradient goes to the first maximum only
    np.testing.assert_array_equal(net.input_grad[0, 0], [[0, 1, 1, 0], [0, 0, 0, 0]])


def test_shape_algebra():
    conv = LayerSpec("conv2d", (3, 5))
    assert output_shape(conv, (3, 12, 10)) == (5, 12, 10)
    assert output_shape(LayerSpec("maxpool"), (5, 12, 10)) == (5, 6, 5)
    with pytest.raises(ShapeError):
        output_shape(LayerSpec("maxpool"), (5, 6, 5))
    with pytest.raises(ShapeError):
        Network.build(["conv2d(1, 2)", "maxpool", "maxpool", "flatten"], (1, 6, 6), Rng(0))
    with pytest.raises(ShapeError):
        Network.build(["flatten", "dense(10, 4)"], (1, 3, 3), Rng(0))
    with pytest.raises(ShapeError):
        Network.build(["conv2d(1, 2)"], (1, 4, 4), Rng(0))


def test_input_shape_mismatch():
    net = Network.build(["dense(4, 2)"], (4,), Rng(0))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((3, 5)))


@pytest.mark.parametrize("name", ["mlp", "cnn"])
def test_reference_architectures(name):
    net = Network.build(architecture(name), (1, 28, 28), Rng(0))
    assert net.out_dim == 64
    out = net.predict(Rng(1).normal((3, 1, 28, 28)))
    assert out.shape == (3, 64)


def test_forward_deterministic():
    a = Network.build(architecture("cnn"), (1, 28, 28), Rng(5))
    b = Network.build(architecture("cnn"), (1, 28, 28), Rng(5))
    x = Rng(6).normal((2, 1, 28, 28))
    assert np.array_equal(a.predict(x), b.predict(x))


def test_zero_upstream_gives_zero_grads():
    net = Network.build(["conv2d(1, 2)", "prelu(2)", "maxpool", "flatten", "dense(8, 3)"], (1, 4, 4), Rng(0))
    _, cache = net.forward(Rng(1).normal((2, 1, 4, 4)))
    grads = net.backward(cache, np.zeros((2, 3)))
    assert all(not g.any() for g in grads.values())


def test_dense_sum_loss_gradient_is_input():
    net = Network.build(["dense(4, 3)"], (4,), Rng(0))
    x = Rng(1).normal((1, 4))
    _, cache = net.forward(x)
    g = net.backward(cache, np.ones((1, 3)))
    for i in range(3):
        np.testing.assert_array_equal(g["0.weight"][i], x[0])
    np.testing.assert_array_equal(g["0.bias"], np.ones(3))


def test_two_layer_chain_matches_finite_differences():
    net = Network.build(["dense(5, 4)", "prelu(4)", "dense(4, 3)"], (5,), Rng(2))
    net.params["1.slope"][:] = [0.1, -0.2, 0.3, 0.7]
    x = Rng(3).normal((6, 5))
    R = Rng(4).normal((6, 3))
    _, cache = net.forward(x)
    grads = net.backward(cache, R)
    for name, p in net.params.items():
        num = finite_diff(lambda _: float(np.sum(net.predict(x) * R)), p)
        assert rel_err(grads[name], num) < 1e-5, name
    num_x = finite_diff(lambda q: float(np.sum(net.predict(q) * R)), x.copy())
    assert rel_err(net.input_grad, num_x) < 1e-5


@pytest.mark.parametrize("variant", ["annealed", "amplitude", "negative"])
def test_end_to_end_gradients(variant):
    layers = ["conv2d(1, 2)", "maxpool", "flatten", "dense(8, 5)", "prelu(5)", "dense(5, 4)"]
    net = Network.build(layers, (1, 4, 4), Rng(7))
    head = HeadParams.he_normal(3, 4, Rng(8))
    x = Rng(9).normal((5, 1, 4, 4))
    y = np.array([0, 1, 2, 1, 0])
    xi = Rng(10).abs_normal(5)
    rep = check_network_gradients(net, head, x, y, NoiseSpec(variant, 0.6), xi, tol=1e-5)
    assert rep.passed, str(rep)
    assert set(rep.blocks) == set(net.params) | {"head.W", "head.b"}


def test_backward_rejects_stale_cache():
    net = Network.build(["dense(3, 2)"], (3,), Rng(0))
    _, cache = net.forward(np.ones((2, 3)))
    with pytest.raises(ConsistencyError):
        net.backward(cache, np.ones((3, 2)))
    net.mark_updated()
    with pytest.raises(ConsistencyError):
        net.backward(cache, np.ones((2, 2)))


def test_parameter_validation():
    with pytest.raises(ShapeError):
        Network(["dense(3, 2)"], (3,), {"0.weight": np.zeros((2, 3))})
    with pytest.raises(ShapeError):
        Network(["dense(3, 2)"], (3,), {"0.weight": np.zeros((3, 2)), "0.bias": np.zeros(2)})
