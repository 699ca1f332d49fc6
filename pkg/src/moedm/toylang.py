"""The synthetic dialogue domain: vocabulary, templated utterances, the
sentiment scorer used as reward, and per-intent label functions.

Utterances are plain tuples of token ids holding the content tokens followed
by EOS.  The start token is implicit.  A conversation history is the ordered
list of all utterances so far; encoders read the last ``L`` of them.
"""

from __future__ import annotations

import json
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

PAD, SOS, EOS = 0, 1, 2
SPECIAL = (PAD, SOS, EOS)
MAX_LEN = 8
HISTORY_TURNS = 4

INTENTS = (
    "primitive", "empathy", "optimism", "cheerfulness", "contentment",
    "dejection", "rage", "sorrow", "questioning", "exploration",
)
N_INTENTS = len(INTENTS)
PRIMITIVE, EMPATHY, OPTIMISM, CHEERFULNESS, CONTENTMENT = 0, 1, 2, 3, 4
DEJECTION, RAGE, SORROW, QUESTIONING, EXPLORATION = 5, 6, 7, 8, 9

# sign of the sentiment each sentiment-based intent aims for
POLARITY = {OPTIMISM: 1.0, CHEERFULNESS: 1.0, CONTENTMENT: 1.0, DEJECTION: -1.0, RAGE: -1.0, SORROW: -1.0}
N_SLOTS = 4

Utterance = tuple


class LexiconError(ValueError):
    pass


@dataclass(frozen=True)
class Lexicon:
    texts: tuple
    valence: np.ndarray  # (V,)
    marker_intent: np.ndarray  # (V,) intent index or -1
    markers: tuple  # per intent: tuple of token ids
    question_tokens: frozenset
    valenced: dict  # rounded valence (tenths, nonzero) -> token id
    function_tokens: tuple

    @property
    def size(self) -> int:
        return len(self.texts)

    def token(self, text: str) -> int:
        return self.texts.index(text)

    def encode(self, words: str | Sequence[str]) -> Utterance:
        """Token ids for whitespace-separated words, with EOS appended."""
        if isinstance(words, str):
            words = words.split()
        return tuple(self.token(w) for w in words) + (EOS,)

    def decode(self, u: Sequence[int]) -> str:
        return " ".join(self.texts[t] for t in u if t not in SPECIAL)


def _parse_lexicon(doc: dict) -> Lexicon:
    if doc.get("format") != "moedm-lexicon-v1":
        raise LexiconError(f"unsupported lexicon format {doc.get('format')!r}")
    if tuple(doc["intents"]) != INTENTS:
        raise LexiconError("lexicon intent list does not match the package's intent tags")
    toks = sorted(doc["tokens"], key=lambda t: t["id"])
    if [t["id"] for t in toks] != list(range(len(toks))):
        raise LexiconError("token ids must be contiguous from 0")
    texts = tuple(t["text"] for t in toks)
    valence = np.array([float(t["valence"]) for t in toks])
    if np.any(np.abs(valence) > 1.0):
        raise LexiconError("valences must lie in [-1, 1]")
    marker_intent = np.full(len(toks), -1, dtype=int)
    for t in toks:
        if "marker" in t:
            marker_intent[t["id"]] = INTENTS.index(t["marker"])
    markers = tuple(tuple(int(j) for j in np.flatnonzero(marker_intent == i)) for i in range(N_INTENTS))
    if any(len(m) < 3 for m in markers):
        raise LexiconError("every intent needs at least three marker tokens")
    question = frozenset(texts.index(w) for w in doc["question_markers"])
    plain = [t["id"] for t in toks if t["id"] not in SPECIAL and marker_intent[t["id"]] < 0]
    valenced = {int(round(valence[j] * 10)): j for j in plain if valence[j] != 0.0}
    function = tuple(j for j in plain if valence[j] == 0.0)
    return Lexicon(texts, valence, marker_intent, markers, question, valenced, function)


@lru_cache(maxsize=None)
def _load_cached(path: str | None) -> Lexicon:
    if path is None:
        text = resources.files("moedm.assets").joinpath("lexicon.json").read_text()
    else:
        text = Path(path).read_text()
    return _parse_lexicon(json.loads(text))


def load_lexicon(path: str | Path | None = None) -> Lexicon:
    return _load_cached(None if path is None else str(path))


# ---------------------------------------------------------------------------
# utterances and histories


def content_tokens(u: Iterable[int]) -> list[int]:
    return [t for t in u if t not in SPECIAL]


def validate_utterance(u: Sequence[int], vocab: int = 64, max_len: int = MAX_LEN) -> None:
    if len(u) > max_len:
        raise ValueError(f"utterance longer than {max_len} tokens")
    if any(t < 0 or t >= vocab for t in u):
        raise ValueError("token id out of range")
    if EOS in u and any(t != PAD for t in u[list(u).index(EOS) + 1:]):
        raise ValueError("only padding may follow EOS")


def pad_utterance(u: Sequence[int], length: int = MAX_LEN) -> tuple[np.ndarray, np.ndarray]:
    ids = np.full(length, PAD, dtype=int)
    ids[: len(u)] = u[:length]
    return ids, ids != PAD


@dataclass(frozen=True)
class ConversationHistory:
    """All utterances so far (user query first, then agent/user alternating)."""

    turns: tuple = ()
    turn: int = 0  # number of agent turns taken

    def window(self, n: int = HISTORY_TURNS) -> tuple:
        return self.turns[-n:]

    def padded(self, n: int = HISTORY_TURNS, length: int = MAX_LEN) -> tuple[np.ndarray, np.ndarray]:
        """``(n, length)`` id matrix, right-aligned so the newest turn is last."""
        ids = np.full((n, length), PAD, dtype=int)
        for k, u in enumerate(reversed(self.window(n))):
            ids[n - 1 - k] = pad_utterance(u, length)[0]
        return ids, ids != PAD

    def with_action(self, y: Utterance) -> "ConversationHistory":
        return ConversationHistory(self.turns + (tuple(y),), self.turn)

    def with_reply(self, y: Utterance, x_next: Utterance) -> "ConversationHistory":
        return ConversationHistory(self.turns + (tuple(y), tuple(x_next)), self.turn + 1)


# ---------------------------------------------------------------------------
# generation and scoring


def _stochastic_round(x: float, rng: np.random.Generator) -> int:
    """Round ``10 * x`` to an integer, up with probability equal to the remainder."""
    s = 10.0 * x
    lo = np.floor(s + 1e-9)
    frac = s - lo
    return int(lo + (1 if frac > 1e-9 and rng.random() < frac else 0))


def gen_template(intent: int, level: float, rng: np.random.Generator, lex: Lexicon | None = None) -> Utterance:
    """An utterance carrying a marker of ``intent`` whose mean valence tracks ``level``.

    Layout is ``marker, slot x4, EOS``; questioning utterances instead put their
    marker (the question mark) after the slots.  Slot valences are chosen so the mean
    over all content tokens equals ``level`` in expectation (up to clipping).
    """
    lex = lex or load_lexicon()
    if not 0 <= intent < N_INTENTS:
        raise ValueError(f"invalid intent {intent}")
    level = float(np.clip(level, -1.0, 1.0))
    if intent == QUESTIONING:
        head, tail = [], [min(lex.question_tokens)]
    else:
        head, tail = [int(rng.choice(lex.markers[intent]))], []
    fixed = head + tail
    n_content = len(fixed) + N_SLOTS
    target = (n_content * level - float(lex.valence[fixed].sum())) / N_SLOTS
    target = float(np.clip(target, -1.0, 1.0))
    slots = []
    for _ in range(N_SLOTS):
        k = _stochastic_round(target, rng)
        if k == 0:
            slots.append(int(rng.choice(lex.function_tokens)))
        else:
            slots.append(int(lex.valenced[k]))
    return tuple(head + slots + tail + [EOS])


def sent_score(u: Sequence[int], lex: Lexicon | None = None) -> float:
    """Mean valence over content tokens, clamped to [-1, 1]; 0 when empty."""
    lex = lex or load_lexicon()
    c = content_tokens(u)
    if not c:
        return 0.0
    return float(np.clip(np.mean(lex.valence[c]), -1.0, 1.0))


def has_marker(i: int, u: Sequence[int], lex: Lexicon | None = None) -> bool:
    lex = lex or load_lexicon()
    return any(lex.marker_intent[t] == i for t in u if t not in SPECIAL)


def marker_intent(u: Sequence[int], lex: Lexicon | None = None) -> int:
    """Intent whose markers occur most often; ties go to the earliest occurrence, none -> primitive."""
    lex = lex or load_lexicon()
    counts = np.zeros(N_INTENTS, dtype=int)
    first = {}
    for pos, t in enumerate(u):
        if t in SPECIAL:
            continue
        i = lex.marker_intent[t]
        if i >= 0:
            counts[i] += 1
            first.setdefault(int(i), pos)
    if counts.max() == 0:
        return PRIMITIVE
    best = np.flatnonzero(counts == counts.max())
    return int(min(best, key=lambda i: first[int(i)]))


def overlap(history: ConversationHistory | Sequence, u: Sequence[int]) -> float:
    """Fraction of the utterance's content tokens already present in the history."""
    turns = history.turns if isinstance(history, ConversationHistory) else history
    seen = {t for h in turns for t in h if t not in SPECIAL}
    c = content_tokens(u)
    if not c:
        return 0.0
    return sum(t in seen for t in c) / len(c)


def intent_label(i: int, x: ConversationHistory, y: Sequence[int], lex: Lexicon | None = None) -> float:
    """Label ``l_i(X, Y)`` in [-1, 1] measuring how strongly ``y`` shows intent ``i``."""
    lex = lex or load_lexicon()
    mk = 1.0 if has_marker(i, y, lex) else 0.0
    if i in POLARITY:
        val = 0.6 * mk + 0.4 * POLARITY[i] * sent_score(y, lex)
    elif i == EMPATHY:
        val = 0.6 * mk + 0.4 * overlap(x, y)
    elif i == QUESTIONING:
        q = 1.0 if any(t in lex.question_tokens for t in y) else 0.0
        val = q - 0.1 * overlap(x, y)
    elif i == EXPLORATION:
        val = 0.5 * mk + 0.5 * (2.0 * (1.0 - overlap(x, y)) - 1.0)
    elif i == PRIMITIVE:
        val = 0.6 * mk + 0.4 * (1.0 - abs(sent_score(y, lex)))
    else:
        raise ValueError(f"invalid intent {i}")
    return float(np.clip(val, -1.0, 1.0))


def gram_ratio(n: int, utterances: Sequence[Sequence[int]]) -> float:
    """Distinct / total n-grams over content tokens (1.0 when there are none)."""
    if n not in (1, 2, 3):
        raise ValueError("n must be 1, 2 or 3")
    if len(utterances) == 0:
        raise ValueError("gram_ratio needs at least one utterance")
    grams = []
    for u in utterances:
        c = content_tokens(u)
        grams.extend(tuple(c[k:k + n]) for k in range(len(c) - n + 1))
    if not grams:
        return 1.0
    return len(set(grams)) / len(grams)


# ---------------------------------------------------------------------------
# corpus files


def write_corpus(path, conversations: Iterable[dict], header: dict | None = None) -> None:
    """JSON Lines, one conversation per line, after an optional header line."""
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for conv in conversations:
            rec = {"turns": [list(map(int, t)) for t in conv["turns"]], "intents": list(map(int, conv["intents"]))}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_corpus(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if "header" in rec:
                    continue
                out.append({"turns": [tuple(t) for t in rec["turns"]], "intents": rec["intents"]})
    return out
