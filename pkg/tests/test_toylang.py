import numpy as np
import pytest

from moedm import toylang as tl


@pytest.fixture(scope="module")
def lex():
    return tl.load_lexicon()


def test_lexicon_structure(lex):
    assert lex.size == 64
    assert all(len(m) >= 3 for m in lex.markers)
    assert lex.texts[tl.EOS] and tl.EOS in tl.SPECIAL


def test_encode_decode_roundtrip(lex):
    words = [lex.texts[t] for t in lex.markers[tl.OPTIMISM][:2]]
    u = lex.encode(" ".join(words))
    assert u[-1] == tl.EOS
    assert lex.decode(u) == " ".join(words)


@pytest.mark.parametrize("intent", range(tl.N_INTENTS))
def test_templates_carry_their_marker(intent, lex):
    rng = np.random.default_rng(intent)
    for _ in range(20):
        u = tl.gen_template(intent, rng.uniform(-1, 1), rng)
        tl.validate_utterance(u)
        assert tl.marker_intent(u) == intent


def test_template_valence_tracks_level():
    rng = np.random.default_rng(0)
    hi = np.mean([tl.sent_score(tl.gen_template(tl.CONTENTMENT, 0.8, rng)) for _ in range(200)])
    lo = np.mean([tl.sent_score(tl.gen_template(tl.CONTENTMENT, -0.8, rng)) for _ in range(200)])
    assert hi > 0.3 and lo < -0.3


def test_sent_score_bounds_and_empty():
    assert tl.sent_score((tl.EOS,)) == 0.0
    rng = np.random.default_rng(1)
    for _ in range(100):
        s = tl.sent_score(tl.gen_template(int(rng.integers(10)), rng.uniform(-1, 1), rng))
        assert -1.0 <= s <= 1.0


def test_marker_intent_ties_go_to_first(lex):
    a, b = lex.markers[tl.RAGE][0], lex.markers[tl.SORROW][0]
    assert tl.marker_intent((a, b, tl.EOS)) == tl.RAGE
    assert tl.marker_intent((b, a, tl.EOS)) == tl.SORROW
    assert tl.marker_intent((tl.EOS,)) == tl.PRIMITIVE


@pytest.mark.parametrize("intent", range(1, tl.N_INTENTS))
def test_intent_labels_favor_matching_templates(intent):
    rng = np.random.default_rng(10 + intent)
    h = tl.ConversationHistory((tl.gen_template(tl.PRIMITIVE, -0.4, rng),), 0)
    level = tl.POLARITY.get(intent, 0.0) * 0.8
    own = np.mean([tl.intent_label(intent, h, tl.gen_template(intent, level, rng)) for _ in range(50)])
    other = np.mean([tl.intent_label(intent, h, tl.gen_template(tl.PRIMITIVE, 0.0, rng)) for _ in range(50)])
    assert own > other + 0.3
    assert -1.0 <= own <= 1.0


def test_overlap():
    h = tl.ConversationHistory(((10, 11, tl.EOS),), 0)
    assert tl.overlap(h, (10, 12, tl.EOS)) == 0.5
    assert tl.overlap(h, (tl.EOS,)) == 0.0


def test_gram_ratio():
    assert tl.gram_ratio(1, [(5, 5, 6, tl.EOS)]) == pytest.approx(2 / 3)
    assert tl.gram_ratio(2, [(5, 6, tl.EOS), (5, 6, tl.EOS)]) == 0.5
    assert tl.gram_ratio(3, [(5, tl.EOS)]) == 1.0
    with pytest.raises(ValueError):
        tl.gram_ratio(4, [(5, tl.EOS)])


def test_validate_utterance_rejects_bad_input():
    with pytest.raises(ValueError):
        tl.validate_utterance(tuple(range(3, 12)))
    with pytest.raises(ValueError):
        tl.validate_utterance((70, tl.EOS))
    with pytest.raises(ValueError):
        tl.validate_utterance((5, tl.EOS, 6))


def test_history_window_and_padding():
    h = tl.ConversationHistory(tuple((k + 3, tl.EOS) for k in range(6)), 2)
    assert len(h.window()) == tl.HISTORY_TURNS
    ids, mask = h.padded()
    assert ids.shape == (tl.HISTORY_TURNS, tl.MAX_LEN)
    assert ids[-1, 0] == 8 and mask[-1, :2].all() and not mask[-1, 2:].any()
    h2 = h.with_reply((20, tl.EOS), (21, tl.EOS))
    assert h2.turn == 3 and h2.turns[-1] == (21, tl.EOS)


def test_corpus_roundtrip_with_header(tmp_path):
    convs = [{"turns": [(5, tl.EOS), (6, 7, tl.EOS)], "intents": [3]}]
    tl.write_corpus(tmp_path / "c.jsonl", convs, header={"seed": 0})
    assert tl.read_corpus(tmp_path / "c.jsonl") == convs


def test_bad_lexicon_rejected(tmp_path):
    (tmp_path / "lex.json").write_text('{"format": "other"}')
    with pytest.raises(tl.LexiconError):
        tl.load_lexicon(tmp_path / "lex.json")
