"""Corpus ingestion, vocabulary, batching and synthetic grammar corpora.

Sentences are whitespace-tokenized.  Encoded sequences always end in EOS
(unless truncated from a free-running decoder that never emitted one); BOS
is only ever fed to the decoder and is never stored in a sequence.
"""
from __future__ import annotations

import hashlib
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocabulary:
    """Bidirectional token/id map with four fixed special ids."""

    def __init__(self, tokens: Iterable[str] = (), max_size: int | None = None):
        self.max_size = max_size
        self.id_to_token: list[str] = list(SPECIAL_TOKENS)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(SPECIAL_TOKENS)}
        for tok in tokens:
            if tok in self.token_to_id:
                raise ValueError(f"duplicate token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    @property
    def words(self) -> list[str]:
        """Non-special tokens in id order."""
        return self.id_to_token[len(SPECIAL_TOKENS):]

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path: str | Path) -> None:
        """Write ``token<TAB>id`` lines sorted by id, after a convention header."""
        cap = "none" if self.max_size is None else str(self.max_size)
        lines = [
            f"# vocabulary: {len(self)} entries incl. 4 specials; max_size={cap}; "
            "whitespace tokens, case preserved"
        ]
        lines += [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line or line.startswith("#"):
                continue
            tok, idx = line.rsplit("\t", 1)
            pairs.append((int(idx), tok))
        pairs.sort()
        if [t for _, t in pairs[:4]] != list(SPECIAL_TOKENS):
            raise ValueError("vocabulary file does not start with the special tokens")
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError("vocabulary ids are not contiguous")
        return cls([t for _, t in pairs[4:]])


def build_vocab(corpus: Sequence[str], max_size: int | None = None) -> Vocabulary:
    """Frequency-ranked vocabulary; ties broken lexicographically."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if max_size is not None and max_size < 1:
        raise ValueError(f"max_size must be >= 1, got {max_size}")
    counts = Counter(tok for s in corpus for tok in s.split())
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary([tok for tok, _ in ranked], max_size=max_size)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


def encode_sentence(s: str, v: Vocabulary, max_len: int) -> TokenSequence:
    """Map tokens to ids, append EOS, truncate to ``max_len`` keeping EOS last."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    ids = [v.lookup(tok) for tok in s.split()][: max_len - 1]
    ids.append(EOS)
    return TokenSequence(tuple(ids))


def decode_ids(ids: Iterable[int], v: Vocabulary) -> str:
    """Inverse of :func:`encode_sentence` up to UNK; stops at the first EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(v.id_to_token[i])
    return " ".join(out)


@dataclass
class SequenceBatch:
    """Padded id matrix of shape (N, width) with its length vector."""

    ids: np.ndarray
    lengths: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        width = self.ids.shape[1]
        return (np.arange(width)[None, :] < self.lengths[:, None]).astype(np.float64)

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @classmethod
    def from_sequences(cls, seqs: Sequence[TokenSequence], width: int | None = None) -> "SequenceBatch":
        lengths = np.array([len(s) for s in seqs], dtype=np.int64)
        if width is None:
            width = int(lengths.max()) if len(seqs) else 0
        ids = np.full((len(seqs), width), PAD, dtype=np.int64)
        for row, s in enumerate(seqs):
            ids[row, : len(s)] = s.ids
        return cls(ids, lengths)

    def sequences(self) -> list[TokenSequence]:
        return [TokenSequence(tuple(int(t) for t in row[:n])) for row, n in zip(self.ids, self.lengths)]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation of ``range(n)`` for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def make_batches(
    corpus: Sequence[TokenSequence], N: int, seed: int, epoch: int = 0
) -> Iterator[SequenceBatch]:
    """Yield one epoch of shuffled batches; the last batch may be smaller."""
    if N < 1:
        raise ValueError("batch size must be >= 1")
    if N > len(corpus):
        warnings.warn(f"batch size {N} exceeds corpus size {len(corpus)}; emitting one smaller batch")
    order = epoch_order(len(corpus), seed, epoch)
    for start in range(0, len(corpus), N):
        yield SequenceBatch.from_sequences([corpus[i] for i in order[start : start + N]])


def read_corpus(path: str | Path, keep_blank: bool = False) -> list[str]:
    """One sentence per line; blank lines are dropped unless ``keep_blank``.

    Generated files keep them: an immediate EOS is a legitimate empty sample.
    """
    text = Path(path).read_text(encoding="utf-8")
    return [" ".join(line.split()) for line in text.splitlines() if keep_blank or line.strip()]


def write_corpus(path: str | Path, sentences: Iterable[str]) -> None:
    sentences = list(sentences)
    body = "".join(s + "\n" for s in sentences)
    Path(path).write_text(body, encoding="utf-8")


def corpus_digest(sentences: Iterable[str]) -> str:
    h = hashlib.sha256()
    for s in sentences:
        h.update(s.encode("utf-8") + b"\n")
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Synthetic probabilistic regular grammars
# ---------------------------------------------------------------------------


@dataclass
class GrammarOracle:
    """Deterministic probabilistic finite automaton over word tokens.

    ``transitions[state]`` lists ``(token, next_state, prob)``; a ``None``
    token means "stop here".  Each (state, token) pair has at most one
    successor, so every sentence has a single derivation and its probability
    is the product of the rule probabilities along it.  The automaton is
    acyclic, so all sentences are bounded in length.
    """

    name: str
    start: str
    transitions: dict[str, list[tuple[str | None, str | None, float]]]
    _index: dict[str, dict[str | None, tuple[str | None, float]]] = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {}
        for state, rules in self.transitions.items():
            total = sum(p for _, _, p in rules)
            if not math.isclose(total, 1.0, abs_tol=1e-12):
                raise ValueError(f"rules of state {state!r} sum to {total}")
            table = {}
            for tok, nxt, p in rules:
                if tok in table:
                    raise ValueError(f"state {state!r} has two rules for {tok!r}")
                table[tok] = (nxt, p)
            self._index[state] = table

    @property
    def alphabet(self) -> list[str]:
        return sorted({tok for rules in self.transitions.values() for tok, _, _ in rules if tok is not None})

    def probability(self, sentence: str | Sequence[str]) -> float:
        tokens = sentence.split() if isinstance(sentence, str) else list(sentence)
        state, prob = self.start, 1.0
        for tok in tokens:
            if state is None or tok not in self._index[state]:
                return 0.0
            state, p = self._index[state][tok]
            prob *= p
        if state is None or None not in self._index[state]:
            return 0.0
        return prob * self._index[state][None][1]

    def in_language(self, sentence: str | Sequence[str]) -> bool:
        return self.probability(sentence) > 0.0

    def sample(self, rng: np.random.Generator) -> str:
        state, out = self.start, []
        while True:
            rules = self.transitions[state]
            k = rng.choice(len(rules), p=[p for _, _, p in rules])
            tok, state, _ = rules[k]
            if tok is None:
                return " ".join(out)
            out.append(tok)

    def enumerate(self, max_len: int | None = None) -> Iterator[tuple[str, float]]:
        """Every sentence (up to ``max_len`` tokens) with its probability."""

        def walk(state, prefix, prob):
            for tok, nxt, p in self.transitions[state]:
                if tok is None:
                    yield " ".join(prefix), prob * p
                elif max_len is None or len(prefix) < max_len:
                    yield from walk(nxt, prefix + [tok], prob * p)

        yield from walk(self.start, [], 1.0)

    def _state_marginals(self) -> dict[str, float]:
        # probability of ever visiting each state; the automaton is a DAG
        order = self._topological_order()
        visit = {s: 0.0 for s in order}
        visit[self.start] = 1.0
        for s in order:
            for tok, nxt, p in self.transitions[s]:
                if tok is not None:
                    visit[nxt] += visit[s] * p
        return visit

    def _topological_order(self) -> list[str]:
        indeg = {s: 0 for s in self.transitions}
        for rules in self.transitions.values():
            for tok, nxt, _ in rules:
                if tok is not None:
                    indeg[nxt] += 1
        queue = [s for s, d in indeg.items() if d == 0]
        order = []
        while queue:
            s = queue.pop()
            order.append(s)
            for tok, nxt, _ in self.transitions[s]:
                if tok is not None:
                    indeg[nxt] -= 1
                    if indeg[nxt] == 0:
                        queue.append(nxt)
        if len(order) != len(self.transitions):
            raise ValueError("grammar automaton has a cycle")
        return order

    def entropy(self) -> float:
        """Exact sentence entropy in nats."""
        visit = self._state_marginals()
        h = 0.0
        for s, rules in self.transitions.items():
            h -= visit[s] * sum(p * math.log(p) for _, _, p in rules if p > 0)
        return h

    def expected_length(self) -> float:
        """Expected number of word tokens per sentence (EOS excluded)."""
        visit = self._state_marginals()
        return sum(
            visit[s] * sum(p for tok, _, p in rules if tok is not None)
            for s, rules in self.transitions.items()
        )

    def perplexity(self) -> float:
        """Per-token perplexity of the true distribution, counting EOS as a token."""
        return math.exp(self.entropy() / (self.expected_length() + 1.0))

    @property
    def max_length(self) -> int:
        longest = {}
        for s in reversed(self._topological_order()):
            longest[s] = max(0 if tok is None else 1 + longest[nxt] for tok, nxt, _ in self.transitions[s])
        return longest[self.start]


def _abab_grammar(max_pairs: int = 4, stop: float = 0.5) -> GrammarOracle:
    """(a b)^k for 1 <= k <= max_pairs; after each pair stop with prob ``stop``."""
    t: dict[str, list] = {}
    for k in range(max_pairs):
        t[f"s{k}"] = [("a", f"m{k}", 1.0)]
        t[f"m{k}"] = [("b", f"e{k}", 1.0)]
        if k + 1 < max_pairs:
            t[f"e{k}"] = [(None, None, stop), ("a", f"m{k + 1}", 1.0 - stop)]
        else:
            t[f"e{k}"] = [(None, None, 1.0)]
    for k in range(1, max_pairs):
        del t[f"s{k}"]
    return GrammarOracle("abab", "s0", t)


_WORDS = {
    "det": ["the", "a"],
    "adj": ["red", "big", "old", "small", "happy"],
    "noun": ["dog", "cat", "man", "woman", "bird", "car", "tree", "house"],
    "verb": ["sees", "likes", "finds", "chases", "hears", "pushes"],
    "prep": ["near", "under", "behind"],
}


def _svo_grammar() -> GrammarOracle:
    """Toy declarative sentences: NP VERB [NP] [PREP NP], NP = DET [ADJ] NOUN."""
    t: dict[str, list] = {}

    def uniform(words, nxt, mass=1.0):
        return [(w, nxt, mass / len(words)) for w in words]

    def noun_phrase(tag, after):
        t[f"{tag}_det"] = uniform(_WORDS["det"], f"{tag}_adj")
        t[f"{tag}_adj"] = uniform(_WORDS["adj"], f"{tag}_noun", 0.4) + uniform(_WORDS["noun"], after, 0.6)
        t[f"{tag}_noun"] = uniform(_WORDS["noun"], after)

    noun_phrase("subj", "verb")
    t["verb"] = uniform(_WORDS["verb"], "after_verb")
    t["after_verb"] = [(None, None, 0.2)] + uniform(_WORDS["det"], "obj_adj", 0.5) + uniform(_WORDS["prep"], "pp1_det", 0.3)
    t["obj_adj"] = uniform(_WORDS["adj"], "obj_noun", 0.4) + uniform(_WORDS["noun"], "after_obj", 0.6)
    t["obj_noun"] = uniform(_WORDS["noun"], "after_obj")
    t["after_obj"] = [(None, None, 0.6)] + uniform(_WORDS["prep"], "pp2_det", 0.4)
    noun_phrase("pp1", "end")
    noun_phrase("pp2", "end")
    t["end"] = [(None, None, 1.0)]
    return GrammarOracle("svo", "subj_det", t)


GRAMMARS = {"abab": _abab_grammar, "svo": _svo_grammar}


def get_grammar(grammar_id: str) -> GrammarOracle:
    try:
        return GRAMMARS[grammar_id]()
    except KeyError:
        raise ValueError(f"unknown grammar {grammar_id!r}; choose from {sorted(GRAMMARS)}") from None


def synth_corpus(grammar_id: str, n_sentences: int, seed: int) -> tuple[list[str], GrammarOracle]:
    """Sample ``n_sentences`` i.i.d. sentences from a built-in grammar."""
    oracle = get_grammar(grammar_id)
    if n_sentences < 1:
        raise ValueError("n_sentences must be >= 1")
    rng = np.random.default_rng(seed)
    return [oracle.sample(rng) for _ in range(n_sentences)], oracle
