import dataclasses
import json

import numpy as np
import pytest

from moedm import numkit as nk
from moedm import toylang as tl
from moedm import user_sim as us

HAND_PLAN = [tl.EMPATHY, tl.EMPATHY, tl.QUESTIONING, tl.CHEERFULNESS, tl.CHEERFULNESS]


@pytest.fixture(scope="module")
def env():
    return us.load_env_config(noise_free=True)


def test_default_structure(env):
    assert env.horizon == 5 and env.gamma == 0.8
    assert len(env.rules) == tl.N_INTENTS


def test_reset_snaps_to_band_centers(env):
    h, s = us.reset(env, np.random.default_rng(0))
    assert s.mood in env.mood_bands and s.trust in env.trust_bands
    assert h.turn == 0 and len(h.turns) == 1


def test_episode_runs_for_horizon(env):
    ro = us.rollout(us.intent_policy([tl.PRIMITIVE]), env, np.random.default_rng(1))
    assert len(ro.rewards) == env.horizon
    assert ro.counts.sum() == env.horizon and ro.counts[tl.PRIMITIVE] == env.horizon
    assert all(-1.0 <= r <= 1.0 for r in ro.rewards)


def test_step_after_done_is_contract_violation(env):
    rng = np.random.default_rng(2)
    _, s = us.reset(env, rng)
    s = dataclasses.replace(s, turn=env.horizon)
    with pytest.raises(nk.ContractViolation):
        us.step(env, s, tl.gen_template(0, 0.0, rng), rng)


def test_noise_free_returns_are_deterministic(env):
    rets = {round(us.rollout(us.intent_policy(HAND_PLAN), env, np.random.default_rng(k)).ret, 12) for k in range(5)}
    assert len(rets) == 1


def test_hand_plan_reaches_optimum(env):
    ret = us.rollout(us.intent_policy(HAND_PLAN), env, np.random.default_rng(3)).ret
    assert ret == pytest.approx(0.27328, abs=1e-9)


def test_greedy_intent_is_worse(env):
    ret = us.rollout(us.intent_policy([tl.OPTIMISM]), env, np.random.default_rng(4)).ret
    assert ret == pytest.approx(-0.5248, abs=1e-9)


def test_relapse_rule(env):
    mood, trust = us.transition(env, 0.0, 0.1, tl.PRIMITIVE)
    assert mood == pytest.approx(-1.0 + env.rules[tl.PRIMITIVE][0].dm)


def test_noisy_env_differs_between_seeds():
    env = us.load_env_config()
    rets = {us.rollout(us.intent_policy(HAND_PLAN), env, np.random.default_rng(k)).ret for k in range(5)}
    assert len(rets) > 1


def test_discounted_return():
    assert us.discounted_return([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)


def test_custom_table_and_validation(tmp_path):
    doc = json.loads(
        (us.resources.files("moedm.assets") / "trust_env.json").read_text())
    doc["gamma"] = 0.5
    (tmp_path / "t.json").write_text(json.dumps(doc))
    assert us.load_env_config(tmp_path / "t.json").gamma == 0.5
    doc["format"] = "nope"
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(nk.ContractViolation):
        us.load_env_config(tmp_path / "bad.json")
    with pytest.raises(nk.ContractViolation):
        us.load_env_config(gamma=1.0)


def test_initial_mood_mean():
    env = us.load_env_config()
    rng = np.random.default_rng(0)
    moods = [us.reset(env, rng)[1].mood for _ in range(10_000)]
    assert abs(np.mean(moods) - (-0.4)) < 0.05


def test_constant_reward_return_bound():
    assert us.discounted_return([1.0] * 5, 0.8) == pytest.approx(3.3616)
    assert us.discounted_return([0.0] * 5, 0.8) == 0.0
