"""Generation metrics: corpus BLEU, backward BLEU, and Fréchet distances.

BLEU follows the usual corpus aggregation: clipped n-gram matches and
candidate n-gram totals are summed over all candidates before dividing, and
the brevity penalty compares summed candidate length with summed closest
reference lengths.  Every candidate is scored against the whole reference
corpus.  A zero match count is replaced by ``eps`` (1e-9) so that tiny corpora
give finite scores.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from collections import Counter
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BLEU_EPS = 1e-9
FD_EPS = 1e-6
MAX_N = 5


def _tokens(s: str | Sequence[str]) -> tuple[str, ...]:
    return tuple(s.split()) if isinstance(s, str) else tuple(s)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class NGramProfile:
    """n-gram counts of a reference corpus, with per-n-gram caps (max count in any one reference)."""

    max_n: int
    caps: dict[int, dict[tuple, int]]
    lengths: np.ndarray

    @classmethod
    def from_corpus(cls, corpus: Sequence[str], max_n: int = MAX_N) -> "NGramProfile":
        caps: dict[int, dict[tuple, int]] = {n: {} for n in range(1, max_n + 1)}
        lengths = []
        for sent in corpus:
            toks = _tokens(sent)
            lengths.append(len(toks))
            for n in range(1, max_n + 1):
                cap = caps[n]
                for gram, c in ngrams(toks, n).items():
                    if c > cap.get(gram, 0):
                        cap[gram] = c
        return cls(max_n, caps, np.unique(np.asarray(lengths, dtype=np.int64)))

    def clipped(self, toks: Sequence[str], n: int) -> tuple[int, int]:
        """(clipped matches, total n-grams) of one candidate."""
        counts = ngrams(toks, n)
        cap = self.caps[n]
        return sum(min(c, cap.get(g, 0)) for g, c in counts.items()), sum(counts.values())

    def closest_length(self, length: int) -> int:
        # ties go to the shorter reference
        i = int(np.searchsorted(self.lengths, length))
        options = self.lengths[max(i - 1, 0) : i + 1]
        return int(min(options, key=lambda r: (abs(int(r) - length), r)))


def _check_corpora(generated: Sequence[str], reference: Sequence[str], max_n: int) -> None:
    if len(generated) == 0 or len(reference) == 0:
        raise ValueError("BLEU needs nonempty generated and reference corpora")
    if not 1 <= max_n <= MAX_N:
        raise ValueError(f"max_n must lie in 1..{MAX_N}, got {max_n}")


def _bleu_from_totals(matches, totals, cand_len: int, ref_len: int, max_n: int, eps: float) -> dict[int, float]:
    log_p = []
    for n in range(1, max_n + 1):
        m, t = matches[n], totals[n]
        p = m / t if (m > 0 and t > 0) else eps
        log_p.append(math.log(p))
    if cand_len == 0:
        bp = 0.0
    elif cand_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / cand_len)
    return {n: bp * math.exp(sum(log_p[:n]) / n) for n in range(1, max_n + 1)}


def corpus_bleu(
    generated: Sequence[str],
    reference: Sequence[str],
    max_n: int = MAX_N,
    eps: float = BLEU_EPS,
    average: str = "corpus",
) -> dict[int, float]:
    """BLEU-1..BLEU-max_n of ``generated`` against the whole ``reference`` corpus.

    ``average="sentence"`` instead averages per-sentence BLEU over candidates
    (the convention of several text-GAN toolkits); the default pools counts.
    """
    _check_corpora(generated, reference, max_n)
    if average not in ("corpus", "sentence"):
        raise ValueError("average must be 'corpus' or 'sentence'")
    profile = NGramProfile.from_corpus(reference, max_n)
    if average == "sentence":
        acc = dict.fromkeys(range(1, max_n + 1), 0.0)
        for sent in generated:
            for n, v in _sentence_bleu(_tokens(sent), profile, max_n, eps).items():
                acc[n] += v
        return {n: v / len(generated) for n, v in acc.items()}
    matches = dict.fromkeys(range(1, max_n + 1), 0)
    totals = dict.fromkeys(range(1, max_n + 1), 0)
    cand_len = ref_len = 0
    for sent in generated:
        toks = _tokens(sent)
        for n in range(1, max_n + 1):
            m, t = profile.clipped(toks, n)
            matches[n] += m
            totals[n] += t
        cand_len += len(toks)
        ref_len += profile.closest_length(len(toks))
    return _bleu_from_totals(matches, totals, cand_len, ref_len, max_n, eps)


def _sentence_bleu(toks, profile: NGramProfile, max_n: int, eps: float) -> dict[int, float]:
    matches, totals = {}, {}
    for n in range(1, max_n + 1):
        matches[n], totals[n] = profile.clipped(toks, n)
    return _bleu_from_totals(matches, totals, len(toks), profile.closest_length(len(toks)), max_n, eps)


def backward_bleu(generated: Sequence[str], reference_test: Sequence[str], max_n: int = MAX_N, **kw) -> dict[int, float]:
    """Diversity score: test sentences as candidates, the generated corpus as references."""
    return corpus_bleu(reference_test, generated, max_n, **kw)


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"covariance shape {self.cov.shape} does not match mean width {d}")
        if self.count < 2:
            raise ValueError("need at least 2 samples for a covariance")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-10, atol=1e-12):
            raise ValueError("covariance is not symmetric")

    @property
    def width(self) -> int:
        return self.mean.shape[0]

    @classmethod
    def fit(cls, x: np.ndarray) -> "EmbeddingStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError(f"need a matrix with at least 2 rows, got shape {x.shape}")
        cov = np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(axis=0), cov, x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(a: np.ndarray, b: np.ndarray) -> float:
    # Tr (A B)^{1/2} = Tr (A^{1/2} B A^{1/2})^{1/2}, and the inner matrix is symmetric PSD
    ra = _psd_sqrt(a)
    w = np.linalg.eigvalsh(ra @ b @ ra)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats, eps: float = FD_EPS) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    Falls back to ``S + eps * I`` for both covariances only if the
    eigendecomposition fails; raises if that fails too.
    """
    if a.width != b.width:
        raise ValueError(f"width mismatch: {a.width} vs {b.width}")
    diff = a.mean - b.mean
    try:
        tr_sqrt = _trace_sqrt_product(a.cov, b.cov)
    except np.linalg.LinAlgError:
        off = eps * np.eye(a.width)
        try:
            tr_sqrt = _trace_sqrt_product(a.cov + off, b.cov + off)
        except np.linalg.LinAlgError as e:
            raise ArithmeticError(f"matrix square root failed after regularization: {e}") from None
    if not math.isfinite(tr_sqrt):
        raise ArithmeticError("matrix square root is not finite")
    fd = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(fd, 0.0)


def code_space_fd(encoder_codes: np.ndarray, generator_codes: np.ndarray) -> float:
    return frechet_distance(EmbeddingStats.fit(encoder_codes), EmbeddingStats.fit(generator_codes))


# ---------------------------------------------------------------------------
# sentence embedders
# ---------------------------------------------------------------------------


class SentenceEmbedder:
    embedder_id: str = "abstract"
    width: int = 0

    def embed(self, sentence: str) -> np.ndarray:
        raise NotImplementedError

    def embed_corpus(self, corpus: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(s) for s in corpus]) if len(corpus) else np.zeros((0, self.width))


class HashedBagEmbedder(SentenceEmbedder):
    """Mean of per-word pseudo-random Gaussian vectors keyed by a hash of the word.

    Needs no files; equal words always map to equal vectors.
    """

    def __init__(self, width: int = 64, salt: str = ""):
        self.width = width
        self.salt = salt
        self.embedder_id = f"hashed-bow-{width}" + (f"-{salt}" if salt else "")
        self._cache: dict[str, np.ndarray] = {}

    def _word(self, w: str) -> np.ndarray:
        v = self._cache.get(w)
        if v is None:
            seed = int.from_bytes(hashlib.sha256((self.salt + "\x00" + w).encode()).digest()[:8], "little")
            v = self._cache[w] = np.random.default_rng(seed).standard_normal(self.width) / math.sqrt(self.width)
        return v

    def embed(self, sentence: str) -> np.ndarray:
        toks = sentence.split()
        if not toks:
            return np.zeros(self.width)
        return np.mean([self._word(w) for w in toks], axis=0)


class WordVectorEmbedder(SentenceEmbedder):
    """Mean word vector from a ``word v1 ... vd`` text file; unknown words contribute zeros."""

    def __init__(self, path: str | Path):
        self.vectors: dict[str, np.ndarray] = {}
        width = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip().split(" ")
                if len(parts) < 2:
                    continue
                if width is None:
                    width = len(parts) - 1
                if len(parts) - 1 != width:
                    continue
                self.vectors[parts[0]] = np.asarray(parts[1:], dtype=np.float64)
        if width is None:
            raise ValueError(f"{path}: no word vectors found")
        self.width = width
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
        self.embedder_id = f"word-vectors:{Path(path).name}:{digest}"

    def embed(self, sentence: str) -> np.ndarray:
        toks = sentence.split()
        if not toks:
            return np.zeros(self.width)
        zero = np.zeros(self.width)
        return np.mean([self.vectors.get(w, zero) for w in toks], axis=0)


EMBEDDERS: dict[str, Callable[[], SentenceEmbedder]] = {"hashed-bow": HashedBagEmbedder}


def register_embedder(name: str, factory: Callable[[], SentenceEmbedder]) -> None:
    EMBEDDERS[name] = factory


def get_embedder(spec: str) -> SentenceEmbedder:
    """``hashed-bow``, a registered name, or ``file:PATH`` for a word-vector file."""
    if spec.startswith("file:"):
        return WordVectorEmbedder(spec[5:])
    if spec not in EMBEDDERS:
        raise ValueError(f"unknown embedder {spec!r}; known: {sorted(EMBEDDERS)} or file:PATH")
    return EMBEDDERS[spec]()


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


@dataclass
class MetricReport:
    bleu: dict[int, float]
    b_bleu: dict[int, float]
    fd: float | None
    embedder_id: str
    seeds: list[int]
    code_fd: float | None = None
    n_generated: int = 0
    n_reference: int = 0
    warnings: list[str] | None = None
    aggregate: dict | None = None
    manifest: dict | None = None

    def to_dict(self) -> dict:
        d = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "bleu": {str(n): v for n, v in self.bleu.items()},
            "b_bleu": {str(n): v for n, v in self.b_bleu.items()},
            "fd": self.fd,
            "code_fd": self.code_fd,
            "embedder_id": self.embedder_id,
            "seeds": list(self.seeds),
            "n_generated": self.n_generated,
            "n_reference": self.n_reference,
            "bleu_smoothing": {"kind": "add-epsilon", "eps": BLEU_EPS},
            "warnings": list(self.warnings or []),
        }
        if self.aggregate is not None:
            d["aggregate"] = self.aggregate
        if self.manifest is not None:
            d["manifest"] = self.manifest
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            bleu={int(n): float(v) for n, v in d["bleu"].items()},
            b_bleu={int(n): float(v) for n, v in d["b_bleu"].items()},
            fd=d.get("fd"),
            embedder_id=d["embedder_id"],
            seeds=list(d.get("seeds", [])),
            code_fd=d.get("code_fd"),
            n_generated=d.get("n_generated", 0),
            n_reference=d.get("n_reference", 0),
            warnings=d.get("warnings"),
            aggregate=d.get("aggregate"),
            manifest=d.get("manifest"),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def evaluate_run(
    samples: Sequence[str],
    test_corpus: Sequence[str],
    embedder: SentenceEmbedder | None = None,
    codes: tuple[np.ndarray, np.ndarray] | None = None,
    seeds: Sequence[int] = (),
    orders: Sequence[int] = (2, 3, 4, 5),
) -> MetricReport:
    """BLEU and backward BLEU at ``orders``, sentence-embedding FD, and optionally code FD."""
    notes = []
    if len(samples) != len(test_corpus):
        msg = f"generated corpus has {len(samples)} sentences but the reference has {len(test_corpus)}"
        warnings.warn(msg)
        notes.append(msg)
    top = max(orders)
    fwd = corpus_bleu(samples, test_corpus, top)
    bwd = backward_bleu(samples, test_corpus, top)
    fd = None
    embedder_id = "none"
    if embedder is not None:
        embedder_id = embedder.embedder_id
        if len(samples) >= 2 and len(test_corpus) >= 2:
            fd = frechet_distance(
                EmbeddingStats.fit(embedder.embed_corpus(samples)),
                EmbeddingStats.fit(embedder.embed_corpus(test_corpus)),
            )
        else:
            notes.append("fewer than 2 sentences on one side; FD skipped")
    code_fd = code_space_fd(*codes) if codes is not None else None
    return MetricReport(
        bleu={n: fwd[n] for n in orders},
        b_bleu={n: bwd[n] for n in orders},
        fd=fd,
        embedder_id=embedder_id,
        seeds=list(seeds),
        code_fd=code_fd,
        n_generated=len(samples),
        n_reference=len(test_corpus),
        warnings=notes,
    )


def _mean_std(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean and sample std of every metric across at least two runs.

    The returned report's top-level values are the means.
    """
    if len(reports) < 2:
        raise ValueError("aggregation needs at least 2 reports")
    ids = {r.embedder_id for r in reports}
    if len(ids) > 1:
        raise ValueError(f"reports use different embedders: {sorted(ids)}")
    orders = sorted(reports[0].bleu)
    if any(sorted(r.bleu) != orders for r in reports):
        raise ValueError("reports cover different BLEU orders")
    agg: dict = {
        "n_runs": len(reports),
        "bleu": {str(n): _mean_std([r.bleu[n] for r in reports]) for n in orders},
        "b_bleu": {str(n): _mean_std([r.b_bleu[n] for r in reports]) for n in orders},
    }
    for key in ("fd", "code_fd"):
        vals = [getattr(r, key) for r in reports]
        agg[key] = _mean_std(vals) if all(v is not None for v in vals) else None
    seeds = [s for r in reports for s in r.seeds]
    return MetricReport(
        bleu={n: agg["bleu"][str(n)]["mean"] for n in orders},
        b_bleu={n: agg["b_bleu"][str(n)]["mean"] for n in orders},
        fd=agg["fd"]["mean"] if agg["fd"] else None,
        code_fd=agg["code_fd"]["mean"] if agg["code_fd"] else None,
        embedder_id=ids.pop(),
        seeds=seeds,
        n_generated=reports[0].n_generated,
        n_reference=reports[0].n_reference,
        warnings=[w for r in reports for w in (r.warnings or [])],
        aggregate=agg,
    )
