import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from plastic import tensor as T
from plastic.nn import (ArchSpec, ConvSpec, CReLU, LayerNorm, Linear, Network, NoisyLinear, ReLU, SpecError,
                        build_network, crelu, load_checkpoint, noisy_forward, save_checkpoint)
from plastic.tensor import ContractError

SYNTH = ArchSpec((1, 8, 8), [ConvSpec(8, 3, 2, 1), ConvSpec(16, 3, 1, 1)], [64, 32, 10])


def test_crelu_examples():
    np.testing.assert_array_equal(crelu(T.tensor([[1.0, -2.0]])).data, [[1, 0, 0, 2]])
    np.testing.assert_array_equal(crelu(T.tensor([[0.0, 0.0]])).data, [[0, 0, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 7), elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_crelu_recovers_input(x):
    out = crelu(T.Tensor(x)).data
    d = x.shape[1]
    np.testing.assert_array_equal(out[:, :d] - out[:, d:], x)


def test_crelu_half_positive_without_zeros():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 9))
    x[x == 0] = 1.0
    out = crelu(T.Tensor(x)).data
    assert np.count_nonzero(out > 0) == out.size // 2


def test_crelu_conv_doubles_channels():
    out = crelu(T.Tensor(np.ones((2, 3, 4, 4))))
    assert out.shape == (2, 6, 4, 4)


@pytest.mark.parametrize("shape", [(16, 10), (8, 4, 3, 3)])
def test_layernorm_statistics(shape):
    rng = np.random.default_rng(1)
    ln = LayerNorm(shape[1:], name="ln")
    net = Network([ln], shape[1:])
    x = 5.0 + 3.0 * rng.normal(size=shape)
    out = net(x).data.reshape(shape[0], -1)
    assert np.max(np.abs(out.mean(axis=1))) < 1e-6
    assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-4


def test_noisy_zero_sigma_equals_linear():
    rng = np.random.default_rng(2)
    noisy = Network([NoisyLinear(5, 3, name="n")], (5,))
    plain = Network([Linear(5, 3, name="l")], (5,))
    plain.params["l.weight"].data = noisy.params["n.mu_weight"].data.copy()
    plain.params["l.bias"].data = noisy.params["n.mu_bias"].data.copy()
    noisy.params["n.sigma_weight"].data[:] = 0.0
    noisy.params["n.sigma_bias"].data[:] = 0.0
    x = rng.normal(size=(4, 5))
    noisy.sample_noise(rng)
    np.testing.assert_array_equal(noisy(x).data, plain(x).data)
    noisy.params["n.sigma_weight"].data[:] = 0.3
    noisy.zero_noise()
    np.testing.assert_array_equal(noisy(x).data, plain(x).data)


def test_noisy_seeded_draw_reproducible():
    layer = NoisyLinear(4, 2, name="n")
    net = Network([layer], (4,))
    for n in ("n.mu_weight", "n.mu_bias"):
        net.params[n].data[:] = 0.0
    for n in ("n.sigma_weight", "n.sigma_bias"):
        net.params[n].data[:] = 1.0
    x = np.arange(8.0).reshape(2, 4)
    outs = []
    for _ in range(2):
        net.sample_noise(np.random.default_rng(42))
        outs.append(net(x).data.copy())
    assert outs[0].tobytes() == outs[1].tobytes()
    assert np.any(outs[0] != 0)


def test_noisy_bad_noise_shape():
    layer = NoisyLinear(4, 2, name="n")
    net = Network([layer], (4,))
    with pytest.raises(ContractError):
        noisy_forward(layer, T.Tensor(np.ones((1, 4))), {"weight": np.ones((2, 4)), "bias": np.ones(2)}, net.params)


def test_noisy_expectation_converges_to_mean_weights():
    rng = np.random.default_rng(3)
    net = Network([NoisyLinear(3, 2, sigma0=0.5, name="n")], (3,))
    x = rng.normal(size=(1, 3))
    net.zero_noise()
    clean = net(x).data[0]
    draws = []
    for _ in range(10_000):
        net.sample_noise(rng)
        with T.no_grad():
            draws.append(net(x).data[0])
    draws = np.array(draws)
    se = draws.std(axis=0, ddof=1) / np.sqrt(len(draws))
    assert np.all(np.abs(draws.mean(axis=0) - clean) < 3 * se)


def test_noisy_layer_holds_mean_and_scale_of_same_shape():
    net = build_network(ArchSpec((6,), fc=[8, 3], noisy=True), 0)
    for layer in net.noisy_layers:
        n = layer.name
        assert net.params[n + ".mu_weight"].shape == net.params[n + ".sigma_weight"].shape
        assert net.params[n + ".mu_bias"].shape == net.params[n + ".sigma_bias"].shape
        assert np.allclose(net.params[n + ".sigma_weight"].data, 0.5 / np.sqrt(layer.in_features))


def test_crelu_doubles_following_input_dims():
    net = build_network(ArchSpec(SYNTH.input_shape, SYNTH.conv, SYNTH.fc, activation="crelu"), 0)
    convs = [l for l in net.layers if l.kind == "conv2d"]
    fcs = [l for l in net.layers if l.kind == "linear"]
    assert convs[1].in_channels == 2 * convs[0].out_channels
    assert fcs[0].in_features == 2 * convs[1].out_channels * 4 * 4
    assert fcs[1].in_features == 2 * fcs[0].out_features
    assert fcs[2].in_features == 2 * fcs[1].out_features
    assert net(np.zeros((2, 1, 8, 8))).shape == (2, 10)


def test_layernorm_after_every_hidden_layer_but_output():
    net = build_network(ArchSpec(SYNTH.input_shape, SYNTH.conv, SYNTH.fc, layernorm=True), 0)
    kinds = [l.kind for l in net.layers]
    for i, k in enumerate(kinds):
        if k in ("conv2d", "linear") and i != len(kinds) - 1:
            assert kinds[i + 1] == "layernorm" and kinds[i + 2] == "relu"
    assert kinds[-1] == "linear"


def test_build_is_deterministic_and_replayable():
    a, b = build_network(SYNTH, 5), build_network(SYNTH, 5)
    for n in a.params:
        assert a.params[n].data.tobytes() == b.params[n].data.tobytes()
    c = build_network(SYNTH, 6)
    assert any(a.params[n].data.tobytes() != c.params[n].data.tobytes() for n in a.params)


def test_role_tags_partition_parameters():
    net = build_network(ArchSpec((6,), fc=[16, 16, 4], backbone_fc=1, noisy=True, layernorm=True), 0)
    bb, hd = set(net.names("backbone")), set(net.names("head"))
    assert bb and hd and not bb & hd and bb | hd == set(net.params)
    kinds = {k for _, k in net.role_map.values()}
    assert kinds == {"plain", "mean", "noise-scale"}
    cnn = build_network(SYNTH, 0)
    assert all(n.startswith("conv") for n in cnn.names("backbone"))
    assert all(n.startswith("linear") for n in cnn.names("head"))


def test_inconsistent_dims_raise_spec_error():
    with pytest.raises(SpecError):
        Network([Linear(4, 8), ReLU(), Linear(7, 2)], (4,))
    with pytest.raises(SpecError):
        build_network(ArchSpec((1, 2, 2), [ConvSpec(4, 3, 1, 0)], [3]), 0)


def test_checkpoint_round_trip(tmp_path):
    net = build_network(ArchSpec(SYNTH.input_shape, SYNTH.conv, SYNTH.fc, activation="crelu", layernorm=True), 9)
    rng = np.random.default_rng(0)
    for p in net.params.values():
        p.data = p.data + rng.normal(size=p.shape) * 1e-3
    save_checkpoint(tmp_path / "net.json", net)
    loaded, meta = load_checkpoint(tmp_path / "net.json")
    for n in net.params:
        assert net.params[n].data.tobytes() == loaded.params[n].data.tobytes()
    assert meta["role_map"] == {n: list(r) for n, r in net.role_map.items()}
    assert meta["init_spec"]["seed"] == 9


def test_crelu_layer_kind_has_no_params():
    assert CReLU().param_specs() == {}
