import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from plastic import tensor as T
from plastic.nn import ArchSpec, build_network
from plastic.optim import (NoiseSource, Optimizer, OptimizerConfig, SamConfig, base_step, sam_perturbation,
                           sam_step, scope_mask)
from plastic.tensor import ContractError, NumericError, Tensor


def sgd(lr, momentum=0.0, **kw):
    return OptimizerConfig(kind="sgd", lr=lr, momentum=momentum, **kw)


def test_perturbation_examples():
    eps, deg = sam_perturbation(np.array([3.0, 4.0]), 0.1)
    np.testing.assert_allclose(eps, [0.06, 0.08], rtol=0, atol=1e-16)
    assert not deg
    np.testing.assert_array_equal(sam_perturbation(np.array([3.0, 4.0]), 0.0)[0], [0.0, 0.0])
    eps, _ = sam_perturbation(np.array([3.0, 4.0]), 0.1, np.array([True, False]))
    np.testing.assert_allclose(eps, [0.1, 0.0], rtol=0, atol=1e-16)


def test_perturbation_degenerate():
    eps, deg = sam_perturbation(np.array([1e-14, 0.0]), 0.1)
    assert deg and not eps.any()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 10.0))
def test_perturbation_norm_is_rho(seed, rho):
    g = np.random.default_rng(seed).normal(size=17) * 10 ** np.random.default_rng(seed).uniform(-3, 3)
    eps, _ = sam_perturbation(g, rho)
    assert abs(np.linalg.norm(eps) - rho) <= 1e-12 * rho
    assert np.allclose(eps / np.linalg.norm(eps), g / np.linalg.norm(g))


def _quadratic(w):
    return lambda batch: 0.5 * T.sum_(T.square(w))


def test_sam_closed_form_quadratic():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Optimizer([w], sgd(0.1))
    res = sam_step(_quadratic(w), None, [w], opt, SamConfig(rho=0.1))
    assert abs(w.data[0] - 0.89) <= 1e-12
    assert res.grad_norm == pytest.approx(1.0) and res.sam_grad_norm == pytest.approx(1.1)


def test_sam_disabled_matches_plain_step():
    for cfg in (SamConfig(rho=0.1, enabled=False), SamConfig(rho=0.0)):
        w1 = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        w2 = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        loss = lambda w: T.sum_(T.exp(w) * w)
        sam_step(lambda b: loss(w1), None, [w1], Optimizer([w1], sgd(0.1, 0.9)), cfg)
        g = T.grad(loss(w2), [w2])[0].data
        base_step([w2], [g], Optimizer([w2], sgd(0.1, 0.9)))
        assert w1.data.tobytes() == w2.data.tobytes()


def _net_loss(net, x, y):
    return lambda batch: T.softmax_cross_entropy(net(x), y)


def test_rho_zero_bit_identical_on_network():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)
    spec = ArchSpec((5,), fc=[16, 3], backbone_fc=1)
    a, b = build_network(spec, 1), build_network(spec, 1)
    oa = Optimizer(a.parameters(), OptimizerConfig(lr=1e-2))
    ob = Optimizer(b.parameters(), OptimizerConfig(lr=1e-2))
    for _ in range(3):
        sam_step(_net_loss(a, x, y), None, a.parameters(), oa, SamConfig(rho=0.0))
        grads = [g.data for g in T.grad(T.softmax_cross_entropy(b(x), y), b.parameters())]
        base_step(b.parameters(), grads, ob)
    assert a.flat().tobytes() == b.flat().tobytes()


def test_restore_exact_with_zero_lr():
    rng = np.random.default_rng(1)
    net = build_network(ArchSpec((5,), fc=[16, 3], backbone_fc=1, noisy=True), 2)
    before = net.flat().copy()
    x, y = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)
    opt = Optimizer(net.parameters(), sgd(0.0))
    for scheme in ("independent", "reused", "noiseless"):
        sam_step(_net_loss(net, x, y), None, net.parameters(), opt, SamConfig(rho=0.5, noise_scheme=scheme),
                 noise=NoiseSource([net], rng))
    assert net.flat().tobytes() == before.tobytes()


def test_scope_mask_isolation_bit_exact():
    rng = np.random.default_rng(2)
    net = build_network(ArchSpec((5,), fc=[16, 16, 3], backbone_fc=1), 3)
    x, y = rng.normal(size=(8, 5)), rng.integers(0, 3, 8)
    params = net.parameters()
    mask = scope_mask(net, "backbone")
    loss = _net_loss(net, x, y)(None)
    g = np.concatenate([t.data.reshape(-1) for t in T.grad(loss, params)])
    flat_mask = np.concatenate([np.full(p.size, m) for p, m in zip(params, mask)])
    eps, _ = sam_perturbation(g, 0.05, flat_mask)
    assert not eps[~flat_mask].any()
    assert np.linalg.norm(eps) == pytest.approx(0.05, rel=1e-12)
    with pytest.raises(ContractError):
        scope_mask(build_network(ArchSpec((5,), fc=[3]), 0), "backbone")


def test_noise_schemes_draw_counts():
    calls = []

    class Recorder:
        def fresh(self):
            calls.append("fresh")

        def zero(self):
            calls.append("zero")

    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Optimizer([w], sgd(0.0))
    expected = {"independent": ["fresh", "fresh"], "reused": ["fresh"], "noiseless": ["zero", "fresh"]}
    for scheme, want in expected.items():
        calls.clear()
        sam_step(_quadratic(w), None, [w], opt, SamConfig(rho=0.1, noise_scheme=scheme), noise=Recorder())
        assert calls == want


def test_non_finite_loss_aborts_and_keeps_params():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Optimizer([w], sgd(0.1))
    state = {"n": 0}

    def loss(batch):
        state["n"] += 1
        if state["n"] == 2:
            return T.log(T.sub(w, w))
        return 0.5 * T.sum_(T.square(w))

    with pytest.raises(NumericError):
        sam_step(loss, None, [w], opt, SamConfig(rho=0.1))
    assert w.data[0] == 1.0


def test_sgd_step_example():
    w = Tensor(np.array([1.0]), requires_grad=True)
    base_step([w], [np.array([2.0])], Optimizer([w], sgd(0.1)))
    assert w.data[0] == pytest.approx(0.8, abs=1e-15)


def test_global_norm_clip_halves():
    w = Tensor(np.zeros(2), requires_grad=True)
    opt = Optimizer([w], sgd(1.0, max_grad_norm=10.0))
    norm = opt.step([np.array([12.0, 16.0])])
    assert norm == 20.0
    np.testing.assert_allclose(w.data, [-6.0, -8.0], rtol=0, atol=1e-14)


def test_adam_first_step():
    w = Tensor(np.array([0.0]), requires_grad=True)
    Optimizer([w], OptimizerConfig("adam", lr=1e-3, betas=(0.9, 0.999), eps=1e-8)).step([np.array([1.0])])
    # bias-corrected first moments are both 1: step = lr / (1 + eps)
    assert w.data[0] == pytest.approx(-1e-3 / (1 + 1e-8), abs=1e-18)


def test_decoupled_weight_decay():
    w = Tensor(np.array([2.0]), requires_grad=True)
    Optimizer([w], sgd(0.1, weight_decay=0.5)).step([np.array([0.0])])
    assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_optimizer_state_round_trip():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Optimizer([w], OptimizerConfig())
    opt.step([np.array([0.3, -0.1])])
    other = Optimizer([w], OptimizerConfig())
    other.load_state_dict(opt.state_dict())
    assert other.t == 1 and other.m[0].tobytes() == opt.m[0].tobytes() and other.v[0].tobytes() == opt.v[0].tobytes()


def test_sam_sgd_converges_on_convex_quadratic():
    A = np.diag([1.0, 3.0, 0.5])
    w = Tensor(np.array([1.0, -1.0, 2.0]), requires_grad=True)
    opt = Optimizer([w], sgd(0.05))
    loss = lambda b: 0.5 * T.sum_(w * T.reshape(T.matmul(T.Tensor(A), T.reshape(w, (3, 1))), (3,)))
    norms = [np.linalg.norm(w.data)]
    for _ in range(300):
        sam_step(loss, None, [w], opt, SamConfig(rho=0.01))
        norms.append(np.linalg.norm(w.data))
    # SAM hovers within ~rho of the minimum; the norm shrinks monotonically until then
    descent = [b for a, b in zip(norms, norms[1:]) if a > 0.05]
    assert all(b < a for a, b in zip(norms, norms[1:]) if a > 0.05)
    assert descent and norms[-1] < 0.05


def test_bad_config_values():
    with pytest.raises(ContractError):
        SamConfig(rho=-1.0)
    with pytest.raises(ContractError):
        SamConfig(scope="tail")
