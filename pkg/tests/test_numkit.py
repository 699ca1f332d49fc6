import numpy as np
import pytest

from moedm import numkit as nk
from moedm import oracle as orc


def _net(rng, sizes=(4, 6, 5, 3), acts=("tanh", "relu", "identity")):
    return nk.DenseNet(list(sizes), list(acts), rng)


def test_forward_shapes_and_vector_input():
    net = _net(np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(7, 4))
    assert net.forward(x).shape == (7, 3)
    np.testing.assert_allclose(net.forward(x[0]), net.forward(x)[0])


def test_identity_net_without_layers():
    net = nk.DenseNet([5])
    x = np.arange(10.0).reshape(2, 5)
    np.testing.assert_array_equal(net.forward(x), x)
    assert net.out_dim == 5 and net.params() == []


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = _net(rng, acts=("tanh", "tanh", "identity"))
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
    y, tape = net.forward(x, keep=True)
    grads, dx = net.backward(tape, w)
    res = orc.grad_check(lambda: float(np.sum(net.forward(x) * w)), net.params(), grads)
    assert res.max_rel_err < 1e-6
    # input adjoint
    h = 1e-6
    x2 = x.copy()
    x2[2, 1] += h
    num = (np.sum(net.forward(x2) * w) - np.sum(y * w)) / h
    assert abs(num - dx[2, 1]) < 1e-4


def test_backward_with_dropout_masks():
    rng = np.random.default_rng(4)
    net = _net(rng, acts=("tanh", "tanh", "identity"))
    x, w = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    masks = [(rng.random((6, h)) < 0.5) / 0.5 for h in net.hidden_sizes]
    _, tape = net.forward(x, keep=True, dropout_masks=masks)
    grads, _ = net.backward(tape, w)
    fn = lambda: float(np.sum(net.forward(x, dropout_masks=masks) * w))  # noqa: E731
    assert orc.grad_check(fn, net.params(), grads).max_rel_err < 1e-6


def test_backward_without_tape_is_contract_violation():
    net = _net(np.random.default_rng(0))
    with pytest.raises(nk.ContractViolation):
        net.backward(None, np.zeros((1, 3)))


def test_unknown_activation_rejected():
    with pytest.raises(nk.ContractViolation):
        nk.DenseNet([2, 2], ["swish"])


def test_save_load_roundtrip(tmp_path):
    net = _net(np.random.default_rng(5))
    nk.save_nets(tmp_path / "n.json", {"a": net}, {"k": 1})
    nets, meta = nk.load_nets(tmp_path / "n.json")
    x = np.random.default_rng(6).normal(size=(3, 4))
    np.testing.assert_array_equal(nets["a"].forward(x), net.forward(x))
    assert meta == {"k": 1}


def test_pack_array_is_exact():
    a = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(nk.unpack_array(nk.pack_array(a), a.shape), a)


def test_adam_minimizes_quadratic():
    p = [np.array([3.0, -2.0])]
    st = nk.OptState.for_params(p, lr=0.05)
    for _ in range(2000):
        nk.opt_step(st, p, [2 * p[0]])
    assert np.max(np.abs(p[0])) < 1e-3


def test_non_finite_gradient_names_parameter():
    net = _net(np.random.default_rng(0))
    tr = nk.Trainable({"net": net})
    g = net.zero_grads()
    g[1][0] = np.nan
    with pytest.raises(nk.TrainingStepError) as e:
        tr.step({"net": g})
    assert e.value.param_id == "net[1]"


def test_polyak_update():
    a, b = _net(np.random.default_rng(0)), _net(np.random.default_rng(1))
    w0 = a.weights[0].copy()
    nk.polyak_update(a, b, 0.25)
    np.testing.assert_allclose(a.weights[0], 0.75 * w0 + 0.25 * b.weights[0])


def test_gaussian_logpdf_and_kl():
    rng = np.random.default_rng(0)
    p = nk.DiagGaussian(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    q = nk.DiagGaussian(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    assert nk.gauss_kl(p, p) == pytest.approx(0.0, abs=1e-15)
    # Monte Carlo KL agrees with the closed form
    x = p.mu + p.sigma * rng.standard_normal((200_000, 3))
    mc = np.mean(nk.gauss_logpdf(p, x) - nk.gauss_logpdf(q, x))
    assert mc == pytest.approx(float(nk.gauss_kl(p, q)), abs=2e-2)


def test_gaussian_kl_grads():
    rng = np.random.default_rng(1)
    mp, sp, mq, sq = rng.normal(size=4), rng.uniform(0.5, 2, 4), rng.normal(size=4), rng.uniform(0.5, 2, 4)
    params = [mp, sp, mq, sq]
    fn = lambda: float(nk.gauss_kl(nk.DiagGaussian(mp, sp), nk.DiagGaussian(mq, sq)))  # noqa: E731
    grads = nk.gauss_kl_grads(nk.DiagGaussian(mp, sp), nk.DiagGaussian(mq, sq))
    assert orc.grad_check(fn, params, grads).max_rel_err < 1e-6


def test_sigma_bounds_and_inverse():
    s, _ = nk.sigma_from_raw(np.array([-50.0, 0.0, 50.0]))
    assert s[0] >= nk.SIGMA_MIN and s[2] == nk.SIGMA_MAX
    target = np.array([0.05, 0.5, 2.0])
    np.testing.assert_allclose(nk.sigma_from_raw(nk.raw_from_sigma(target))[0], target)


def test_nonpositive_sigma_rejected():
    with pytest.raises(nk.ContractViolation):
        nk.DiagGaussian(np.zeros(2), np.array([1.0, 0.0]))
