import json

import numpy as np
import pytest

from moedm import checks
from moedm import oracle as orc
from moedm import toylang as tl
from moedm import user_sim as us


@pytest.fixture(scope="module")
def mdp():
    return orc.build_tabular(us.load_env_config(noise_free=True))


def test_abstraction_size(mdp):
    assert mdp.n_states <= 120 and mdp.n_actions == tl.N_INTENTS
    assert mdp.terminal.sum() > 0


def test_tabular_matches_simulator(mdp):
    """Each tabular transition agrees with one simulator step from the band centers."""
    env = mdp.cfg
    rng = np.random.default_rng(0)
    for s, (mb, tb, turn) in enumerate(mdp.labels):
        if mdp.terminal[s]:
            continue
        for a in range(mdp.n_actions):
            st = us.UserState(env.mood_bands[mb], env.trust_bands[tb], turn, 0, _horizon=env.horizon)
            _, _, nxt, _ = us.step(env, st, tl.gen_template(a, 0.0, rng), rng)
            assert int(np.argmax(mdp.P[s, a])) == mdp.state_of(nxt.mood, nxt.trust, nxt.turn)


def test_value_iteration_known_values(mdp):
    vi = orc.value_iteration(mdp)
    assert vi.V[mdp.s0] == pytest.approx(0.27328, abs=1e-9)
    assert orc.simulate(mdp, orc.greedy_policy(mdp)) == pytest.approx(-0.5248, abs=1e-9)


def test_oracle_self_checks():
    for c in checks.oracle_checks():
        assert c.ok, c.line()


def test_argmax_lowest_breaks_ties_low():
    q = np.array([[1.0, 2.0, 2.0], [3.0, 3.0, 0.0]])
    np.testing.assert_array_equal(orc.argmax_lowest(q), [1, 0])


def test_chain_mdp_values():
    mdp = orc.chain_mdp()
    vi = orc.value_iteration(mdp)
    # far end pays 0.5 forever at gamma 0.5
    assert vi.V[2] == pytest.approx(1.0)
    assert vi.V[0] == pytest.approx(0.25)


def test_policy_eval_and_q_of_policy():
    mdp = orc.chain_mdp()
    v = orc.policy_eval(mdp, 0)
    np.testing.assert_allclose(v, [0.2, 0.2, 1.0])
    q = orc.q_of_policy(mdp, 0)
    np.testing.assert_allclose(q[:, 0], v)


def test_reachable_restriction(mdp):
    sub, keep = orc.reachable(mdp)
    assert sub.n_states == len(keep) < mdp.n_states
    v_sub = orc.value_iteration(sub).V
    np.testing.assert_allclose(v_sub, orc.value_iteration(mdp).V[keep], atol=1e-10)


def test_expectile_bisect_limits():
    x = np.array([0.0, 1.0, 5.0])
    assert orc.expectile_bisect(x, 0.5) == pytest.approx(2.0)
    assert orc.expectile_bisect(x, 0.999) > 4.9
    with pytest.raises(ValueError):
        orc.expectile_bisect([], 0.5)
    with pytest.raises(ValueError):
        orc.expectile_bisect(x, 1.0)


def test_grad_check_detects_wrong_gradient():
    p = [np.array([1.0, 2.0])]
    fn = lambda: float(np.sum(p[0] ** 2))  # noqa: E731
    assert orc.grad_check(fn, p, [2 * p[0]]).max_rel_err < 1e-8
    assert orc.grad_check(fn, p, [3 * p[0]]).max_rel_err > 0.3
    assert orc.grad_check(fn, p, [2 * p[0]], h=1e-2, stencil=4).max_rel_err < 1e-10


def test_grad_check_skips_kinks():
    p = [np.array([0.0])]
    res = orc.grad_check(lambda: float(abs(p[0][0])), p, [np.array([0.0])], skip_kinks=True)
    assert res.n_skipped == 1 and res.n_checked == 0


def test_dump_fixtures(tmp_path):
    doc = orc.dump_fixtures(us.load_env_config(noise_free=True), tmp_path / "o.json")
    again = json.loads((tmp_path / "o.json").read_text())
    assert again["optimal_return"] == pytest.approx(0.27328)
    assert again["greedy_return"] == pytest.approx(-0.5248)
    assert len(doc["V_expert"]) == tl.N_INTENTS
