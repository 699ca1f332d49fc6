import numpy as np
import pytest

from moedm import checks
from moedm import eval_report as er
from moedm import numkit as nk
from moedm import offline_data as od
from moedm import user_sim as us
from moedm.moe_model import MoELM, ModelConfig
from moedm.rl import losses as L
from moedm.rl.critics import CriticSet, ExpertValueFn, LatentNorm
from moedm.rl.policy import DMPolicy, Scorer, select_action, softmax_probs
from moedm.rl.trainers import ALGOS, BatchStream, RLConfig, ValueTrainer, make_trainer

SMALL = ModelConfig(d=4, emb=6, hidden=12, n_hidden=1)
FAST = RLConfig(hidden=(8,), trunk_hidden=(8,), batch=32, n_masks=3, seed=0)


@pytest.fixture(scope="module")
def setup():
    model = MoELM(SMALL, seed=0)
    env = us.load_env_config()
    eps = od.collect(model, 20, env, np.random.default_rng(0))
    ds = od.augment(od.encode_dataset(eps, model), model, np.random.default_rng(1))
    od.attribute(ds, model)
    um = er.UserModel.create(SMALL.d, hidden=(8,))
    return model, env, ds, um


@pytest.fixture(scope="module")
def trained(setup):
    model, _, ds, _ = setup
    out = {}
    for algo in ALGOS:
        tr = make_trainer(algo, FAST, ds, model)
        tr.train(steps=3, log_every=1)
        out[algo] = tr
    return out


def test_expectile_loss_values():
    np.testing.assert_allclose(L.expectile_loss([-2.0, 3.0], 0.9), [0.1 * 4, 0.9 * 9])
    with pytest.raises(nk.ContractViolation):
        L.expectile_loss([1.0], 1.0)


def test_td_target_never_bootstraps_terminal():
    y = L.td_target([1.0, 1.0], [True, False], 0.8, [10.0, 10.0])
    np.testing.assert_allclose(y, [1.0, 9.0])


def test_loss_gradients_single_seed():
    errs = checks.loss_gradient_errors(0)
    assert max(errs.values()) < 1e-4, errs


def test_expectile_regression_recovers_quantity():
    c = checks.expectile_check(n_samples=200, taus=(0.5, 0.9))
    assert c.ok, c.line()


def test_latent_norm_constant_column():
    x = np.array([[1.0, 5.0], [3.0, 5.0]])
    n = LatentNorm.fit(x)
    np.testing.assert_allclose(n(x), [[-1.0, 0.0], [1.0, 0.0]])
    back = LatentNorm.from_dict(n.to_dict())
    np.testing.assert_array_equal(back.mean, n.mean)
    np.testing.assert_array_equal(back.std, n.std)


def test_critic_structures():
    z = np.random.default_rng(0).normal(size=(5, 3))
    for s in ("single", "dual", "dropout_ensemble"):
        cs = CriticSet(3, (6,), s, n_masks=4)
        cs.trace = []
        q = cs.q_value(z)
        assert q.shape == (5,)
        np.testing.assert_allclose(q, cs.trace[-1]["members"].min(axis=0))
    with pytest.raises(nk.ContractViolation):
        CriticSet(3, structure="triple")
    with pytest.raises(nk.ContractViolation):
        CriticSet(3, alpha=0.0)


def test_best_expert_breaks_ties_low():
    evf = ExpertValueFn(2, 3, hidden=())
    evf.net.weights[0][:] = 0.0
    evf.net.biases[0][:] = [1.0, 2.0, 2.0]
    assert evf.best_expert(np.zeros((1, 2)))[0] == 1


def test_batch_stream_covers_epoch():
    bs = BatchStream(10, 3, np.random.default_rng(0))
    seen = np.concatenate([bs.next() for _ in range(3)])
    assert len(set(seen.tolist())) == 9
    assert BatchStream(4, 10, np.random.default_rng(0)).next() is not None
    with pytest.raises(nk.ContractViolation):
        BatchStream(0, 3, np.random.default_rng(0))


def test_all_algorithms_train(trained):
    for algo, tr in trained.items():
        assert tr.step_count == 3
        assert all(np.isfinite(v) for row in tr.curve for v in row.values()), algo


def test_bandit_uses_zero_discount(trained):
    assert trained["bandit"].gamma == 0.0 and trained["iql"].gamma == FAST.gamma


def test_training_is_reproducible(setup, trained):
    model, _, ds, _ = setup
    tr = make_trainer("ensq", FAST, ds, model)
    tr.train(steps=3, log_every=1)
    assert tr.curve == trained["ensq"].curve


def test_saiql_degenerates_to_iql():
    assert checks.saiql_identity_check(n_batches=10).ok


def test_trainer_contracts(setup):
    model, _, ds, _ = setup
    with pytest.raises(nk.ContractViolation):
        make_trainer("dqn", FAST, ds, model)
    with pytest.raises(nk.ContractViolation):
        ValueTrainer("sac", FAST, ds, None)
    plain = ds.subset(np.arange(len(ds)))
    plain.cand_z = None
    with pytest.raises(nk.ContractViolation):
        ValueTrainer("saiql", FAST, plain, model)
    plain.attribution = None
    with pytest.raises(nk.ContractViolation):
        make_trainer("ftle", FAST, plain, model)


@pytest.mark.parametrize("algo", ALGOS)
def test_checkpoint_roundtrip_scores(algo, setup, trained, tmp_path):
    model, env, ds, um = setup
    tr = trained[algo]
    tr.save(tmp_path / "c.json")
    a, b = Scorer.from_trainer(tr), Scorer.load(tmp_path / "c.json")
    h = ds.histories[0]
    pa = DMPolicy(model, a, n_candidates=20, mode="mf")
    pb = DMPolicy(model, b, n_candidates=20, mode="mf")
    da, db = pa.decide(h, np.random.default_rng(3)), pb.decide(h, np.random.default_rng(3))
    np.testing.assert_array_equal(da.scores, db.scores)
    assert da.choice == db.choice


@pytest.mark.parametrize("algo", ALGOS)
@pytest.mark.parametrize("mode", ["mf", "mb"])
def test_policies_act(algo, mode, setup, trained):
    model, env, ds, um = setup
    pol = DMPolicy(model, Scorer.from_trainer(trained[algo]), mode=mode, user_model=um, n_candidates=20)
    ro = us.rollout(pol, env, np.random.default_rng(0))
    assert len(ro.rewards) == env.horizon
    assert ro.counts.sum() == env.horizon


def test_moevrl_gate_only_allows_chosen_expert(setup, trained):
    model, _, ds, _ = setup
    sc = Scorer.from_trainer(trained["moevrl"])
    pol = DMPolicy(model, sc, n_candidates=20, trace=[])
    h = ds.histories[3]
    d = pol.decide(h, np.random.default_rng(0))
    lam = int(sc.evf.best_expert(sc.norm(model.encode([h])))[0])
    assert np.all(np.isneginf(d.scores[d.experts != lam]))
    assert np.all(d.probs[d.experts != lam] == 0.0)
    assert d.experts[d.choice] == lam and len(pol.trace) == 1


def test_policy_contracts(setup, trained):
    model, _, _, _ = setup
    sc = Scorer.from_trainer(trained["ftle"])
    with pytest.raises(nk.ContractViolation):
        DMPolicy(model, sc, mode="xx")
    with pytest.raises(nk.ContractViolation):
        DMPolicy(model, sc, mode="mb")
    with pytest.raises(nk.ContractViolation):
        DMPolicy(model, sc, n_candidates=21)


def test_select_action_returns_utterance_and_expert(setup, trained):
    model, _, ds, _ = setup
    pol = DMPolicy(model, Scorer.from_trainer(trained["iql"]), n_candidates=10)
    y, e = select_action(pol, ds.histories[0], np.random.default_rng(0))
    assert isinstance(y, tuple) and 0 <= e < SMALL.n_experts


def test_softmax_probs():
    p = softmax_probs([0.0, 1.0, -np.inf], 2.0)
    assert p[2] == 0.0 and p.sum() == pytest.approx(1.0)
    assert p[1] / p[0] == pytest.approx(np.exp(2.0))


def test_softmax_analytic_and_limits():
    np.testing.assert_allclose(softmax_probs([0.0, np.log(2.0)], 1.0), [1 / 3, 2 / 3])
    np.testing.assert_allclose(softmax_probs([0.3, 0.3, 0.3], 7.0), [1 / 3] * 3)
    assert softmax_probs([0.1, 0.2, 0.15], 1e6)[1] >= 1 - 1e-6
    s = np.array([0.1, -0.4, 0.7])
    np.testing.assert_allclose(softmax_probs(s + 5.0, 3.0), softmax_probs(s, 3.0))


def test_expectile_half_is_half_squared_error():
    rng = np.random.default_rng(0)
    a = CriticSet(3, (5,))
    z, t = rng.normal(size=(16, 3)), rng.normal(size=16)
    le, ge = L.v_loss(a.v, z, t, tau=0.5)
    lm, gm = L.v_loss(a.v, z, t)
    assert abs(le - 0.5 * lm) < 1e-9
    for x, y in zip(ge, gm):
        np.testing.assert_allclose(x, 0.5 * y, atol=1e-12)


def test_dual_q_target_is_elementwise_min(setup):
    model, _, ds, _ = setup
    tr = ValueTrainer("sac", FAST, ds, model)
    tr.critics.trace = []
    tr.step(tr.stream.next())
    tgt = [t for t in tr.critics.trace if t["target"]]
    assert tgt and all(t["members"].shape[0] == 2 for t in tgt)
    for t in tgt:
        np.testing.assert_array_equal(t["value"], t["members"].min(axis=0))


def test_polyak_contract(setup):
    model, _, ds, _ = setup
    tr = ValueTrainer("iql", FAST, ds, model)
    dist = lambda: np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(tr.critics.v_tar.params(), tr.critics.v.params())))  # noqa: E731
    for _ in range(3):
        prev = [p.copy() for p in tr.critics.v_tar.params()]
        tr.step(tr.stream.next())
        now = np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(prev, tr.critics.v.params())))
        assert dist() <= (1 - FAST.polyak) * now + 1e-12
