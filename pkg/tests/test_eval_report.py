import numpy as np
import pytest

from moedm import eval_report as er
from moedm import numkit as nk
from moedm import toylang as tl
from moedm import user_sim as us


def test_histogram_kl_known_values():
    p, kl = er.expert_histogram_kl([5, 5])
    np.testing.assert_allclose(p, [0.5, 0.5])
    assert kl == pytest.approx(0.0)
    _, kl = er.expert_histogram_kl([3, 0, 0, 0])
    assert kl == pytest.approx(np.log(4))
    with pytest.raises(nk.ContractViolation):
        er.expert_histogram_kl([0, 0])
    with pytest.raises(nk.ContractViolation):
        er.expert_histogram_kl([1, -1])


def test_hoyer_sparsity_extremes():
    assert er.hoyer_sparsity([1.0, 1.0, 1.0]) == pytest.approx(0.0)
    assert er.hoyer_sparsity([0.0, 2.0, 0.0]) == pytest.approx(1.0)
    with pytest.raises(nk.ContractViolation):
        er.hoyer_sparsity([0.0, 0.0])


def test_embedding_diversity_orders_sets():
    same = np.tile([[1.0, 0.0, 2.0]], (4, 1))
    spread = np.eye(4)
    assert er.embedding_diversity(same)[0] == pytest.approx(0.0, abs=1e-12)
    assert er.embedding_diversity(spread)[0] == pytest.approx(1.0)


def test_diversity_block():
    utts = [(10, 11, tl.EOS), (10, 12, tl.EOS), (13, tl.EOS)]
    div = er.diversity_block(utts, er.utterance_embeddings(utts, 64), perplexity=3.0)
    assert set(div) == {"diversity", "gram1", "gram2", "gram3", "perplexity"}
    assert div["gram1"] == pytest.approx(4 / 5)
    with pytest.raises(nk.ContractViolation):
        er.diversity_block(utts[:1], er.utterance_embeddings(utts[:1], 64))


def test_stderr():
    assert er.stderr([1.0]) == 0.0
    assert er.stderr([1.0, 3.0]) == pytest.approx(1.0)


def test_evaluate_independent_of_workers():
    env = us.load_env_config()
    pol = us.intent_policy([tl.EMPATHY, tl.QUESTIONING])
    a = er.evaluate(pol, env, n=6, seed=3, method="x")
    b = er.evaluate(pol, env, n=6, seed=3, method="x", workers=2)
    np.testing.assert_array_equal(a.returns, b.returns)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert a.counts.sum() == 6 * env.horizon and a.n == 6


def test_user_model_fits_linear_targets():
    rng = np.random.default_rng(0)
    za = rng.normal(size=(400, 3))
    r = 0.5 * np.tanh(za[:, 0])
    zn = za @ np.array([[1.0, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, -1.0]])
    um = er.UserModel.create(3, hidden=(16,))
    curve = er.train_user_model(um, za, r, zn, steps=600, batch=64, lr=1e-2)
    assert curve["loss_r"][-1] < 0.2 * curve["loss_r"][0]
    assert curve["loss_z"][-1] < 0.2 * curve["loss_z"][0]
    r_hat, _ = um.predict(za)
    assert np.all(np.abs(r_hat) <= 1.0)
    with pytest.raises(nk.ContractViolation):
        er.train_user_model(um, za[:0], r[:0], zn[:0])


def test_model_based_score():
    um = er.UserModel.create(2, hidden=(4,))
    za = np.ones((3, 2))
    r_hat, zn = um.predict(za)
    np.testing.assert_allclose(er.score_model_based(um, lambda z: np.full(len(z), 2.0), za, 0.5), r_hat + 1.0)
    np.testing.assert_allclose(er.score_model_based(um, None, za, 0.0), r_hat)


def test_user_model_roundtrip(tmp_path):
    um = er.UserModel.create(2, hidden=(4,))
    um.save(tmp_path / "u.json")
    back = er.UserModel.load(tmp_path / "u.json")
    x = np.ones((1, 2))
    np.testing.assert_array_equal(back.predict(x)[0], um.predict(x)[0])


def test_csv_and_table_layout():
    res = [er.EvalResult("ftle", "mf", np.array([0.1, 0.3]), np.array([1, 1])),
           er.EvalResult("ftle", "mb", np.array([0.2, 0.2]), np.array([2, 0]))]
    rows = [er.report_row(r, None, 0, "h", "rev") for r in res]
    body = er.rows_to_csv(rows)
    assert body.splitlines()[0].split(",") == er.CSV_FIELDS
    assert "0.200000" in body.splitlines()[1]
    table = er.table_csv(rows).splitlines()
    assert table[0] == "method,mf_mean,mf_stderr,mb_mean,mb_stderr"
    assert table[1].startswith("ftle,0.200000,0.100000,0.200000,0.000000")
    doc = er.report_json(res, rows, {"seed": 0})
    assert '"selections": 2' in doc
