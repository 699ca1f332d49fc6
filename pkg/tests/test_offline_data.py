import numpy as np
import pytest

from moedm import numkit as nk
from moedm import offline_data as od
from moedm import oracle as orc
from moedm import toylang as tl
from moedm import user_sim as us
from moedm.moe_model import MoELM, ModelConfig

SMALL = ModelConfig(d=4, emb=6, hidden=12, n_hidden=1)


@pytest.fixture(scope="module")
def env():
    return us.load_env_config()


@pytest.fixture(scope="module")
def episodes(env):
    return od.collect(MoELM(SMALL, seed=0), 6, env, np.random.default_rng(0))


def test_corpus_structure(env):
    convs = od.generate_corpus(env, 5, np.random.default_rng(0))
    assert len(convs) == 5
    for c in convs:
        assert len(c["turns"]) == 2 * env.horizon + 1 == len(c["intents"])
    hs, ys = od.corpus_pairs(convs)
    assert len(hs) == 5 * env.horizon
    assert hs[1].turns == tuple(tuple(t) for t in convs[0]["turns"][:3])


def test_corpus_agent_is_reproducible(env):
    a = od.generate_corpus(env, 3, np.random.default_rng(9))
    b = od.generate_corpus(env, 3, np.random.default_rng(9))
    assert a == b


def test_collect_shapes(episodes, env):
    assert len(episodes) == 6
    for ep in episodes:
        assert len(ep) == env.horizon == len(ep.rewards) == len(ep.experts)
        for h, a, x in zip(ep.histories[1:], ep.actions, ep.replies):
            assert h.turns[-2:] == (a, x)


def test_collect_respects_expert_weights(env):
    w = [0.0] * SMALL.n_experts
    w[4] = 1.0
    eps = od.collect(MoELM(SMALL, seed=0), 3, env, np.random.default_rng(1), weights=w)
    assert {e for ep in eps for e in ep.experts} == {4}


def test_encode_augment_and_terminal(episodes):
    m = MoELM(SMALL, seed=0)
    ds = od.encode_dataset(episodes, m)
    assert len(ds) == 6 * 5 and ds.d == SMALL.d
    assert ds.terminal.sum() == 6
    np.testing.assert_allclose(ds.z[:1], m.encode(ds.histories[:1]))
    aug = od.augment(ds, m, np.random.default_rng(0))
    assert aug.cand_z.shape == (len(ds), SMALL.n_experts, SMALL.d)
    assert len(aug.cand_utts[0]) == SMALL.n_experts
    od.attribute(aug, m)
    assert aug.attribution.shape == (len(ds),)


def test_save_load_roundtrip_is_bit_exact(episodes, tmp_path):
    m = MoELM(SMALL, seed=0)
    ds = od.augment(od.encode_dataset(episodes, m), m, np.random.default_rng(0))
    od.attribute(ds, m)
    h1 = od.save_dataset(ds, tmp_path / "a.jsonl", {"seed": 0})
    back = od.load_dataset(tmp_path / "a.jsonl")
    for key in ("z", "za", "zn", "r", "terminal", "cand_z", "attribution"):
        np.testing.assert_array_equal(getattr(back, key), getattr(ds, key))
    assert back.actions == ds.actions and back.histories == ds.histories
    assert od.save_dataset(back, tmp_path / "b.jsonl", {"seed": 0}) == h1 == od.file_hash(tmp_path / "a.jsonl")


def test_load_rejects_foreign_file(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"format": "other"}\n')
    with pytest.raises(nk.ContractViolation):
        od.load_dataset(tmp_path / "x.jsonl")


def test_tabular_dataset_matches_mdp():
    mdp = orc.chain_mdp()
    ds = od.tabular_dataset(mdp, reps=2)
    n_rows = 2 * int((~mdp.terminal).sum()) * mdp.n_actions
    assert len(ds) == n_rows
    assert np.all(ds.z.sum(axis=1) == 1) and np.all(ds.za.sum(axis=1) == 1)
    np.testing.assert_array_equal(ds.attribution, ds.experts)


def test_logged_candidates_repeat_action():
    ds = od.with_logged_candidates(od.tabular_dataset(orc.chain_mdp()), 3)
    for j in range(3):
        np.testing.assert_array_equal(ds.cand_z[:, j], ds.za)


def test_subset_keeps_columns(episodes):
    ds = od.encode_dataset(episodes, MoELM(SMALL, seed=0))
    sub = ds.subset(np.array([0, 3]))
    assert len(sub) == 2 and sub.actions[1] == ds.actions[3]
    assert isinstance(sub.histories[0], tl.ConversationHistory)


def test_trained_expert_collects_its_own_intent(default_experts_run, env):
    from moedm import pipeline as pl

    model = pl.load_experts(default_experts_run)
    w = np.zeros(model.cfg.n_experts)
    w[3] = 1.0
    eps = od.collect(model, 40, env, np.random.default_rng(0), weights=w)
    hits = [tl.marker_intent(a) == 3 for ep in eps for a in ep.actions]
    assert np.mean(hits) >= 0.9
