"""Query-word extraction and composite reference-candidate scoring.

A candidate is scored on three axes: semantic alignment with the query
embedding (h1, cosine), novelty against an embedding index (h2, one minus
best cosine), and perceptual uniqueness against a hash corpus (h3, clipped
normalized Hamming distance). The winner maximizes the weighted sum
``l1*h1 + l2*h2 + l3*h3``; ties go to the earliest candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoCandidatesError, NoQueryError
from .masks import AttentionStack
from .phash import uniqueness_score
from .vecindex import VectorIndex, check_unit, novelty_score

DEFAULT_LAMBDAS = (0.3, 0.4, 0.3)
DEFAULT_TOP_K = 3

# Compact English stopword list for the query-word filter.
STOPWORDS = frozenset(
    """
    a an the of in on at for to and or with by from as is are was were be been
    being this that these those it its his her their our your my he she they
    we you i me him them us not no but if then so such into over under about
    after before between during through up down out off again further once
    here there all any both each few more most other some own same than too
    very can will just should now do does did have has had
    """.split()
)


@dataclass(frozen=True)
class Candidate:
    """A retrieved candidate image reduced to its scoring ingredients."""

    id: str
    embedding: np.ndarray
    phash: int
    source: str = ""
    upload_year: int = 0

    def __post_init__(self) -> None:
        emb = check_unit(self.embedding, what=f"candidate {self.id!r} embedding")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class CandidateScore:
    candidate_id: str
    h1: float
    h2: float
    h3: float
    total: float
    lambdas: tuple[float, float, float]


def semantic_alignment(f: np.ndarray, g: np.ndarray) -> float:
    """Cosine of two unit-normalized embeddings (their dot product)."""
    fa = check_unit(f, what="candidate embedding")
    ga = check_unit(g, what="query embedding")
    if fa.size != ga.size:
        raise ValueError(f"embedding dims differ: {fa.size} vs {ga.size}")
    return float(fa @ ga)


def token_importance(stack: AttentionStack) -> np.ndarray:
    """Per-token importance: head/query-averaged attention summed over entries."""
    scores = np.zeros(stack.n_tokens)
    for entry in stack.entries:
        scores += entry.mean(axis=(0, 1))
    return scores


def _is_filtered(word: str) -> bool:
    if not any(ch.isalnum() for ch in word):
        return True
    return word.lower() in STOPWORDS


def extract_query_words(
    stack: AttentionStack,
    words: list[str],
    k: int = DEFAULT_TOP_K,
    seed: int = 0,
) -> tuple[list[str], str]:
    """Top-k attended words (stopwords/punctuation removed) plus a sampled one.

    Token scores sum into word scores through the stack's token spans; ties
    rank the earlier prompt word first. The returned query word is drawn
    uniformly from the top-k with the given seed.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    span_max = max(stack.token_spans)
    if span_max >= len(words):
        raise ValueError(
            f"token spans reference word {span_max} but only {len(words)} words given"
        )
    tok_scores = token_importance(stack)
    word_scores = np.zeros(len(words))
    for tok, word_idx in enumerate(stack.token_spans):
        word_scores[word_idx] += tok_scores[tok]

    kept = [(i, w, word_scores[i]) for i, w in enumerate(words) if not _is_filtered(w)]
    if not kept:
        raise NoQueryError("every prompt word was filtered out")
    kept.sort(key=lambda item: (-item[2], item[0]))
    top = [w for _, w, _ in kept[:k]]
    rng = np.random.default_rng(seed)
    w_star = top[int(rng.integers(len(top)))]
    return top, w_star


def score_candidate(
    candidate: Candidate,
    g: np.ndarray,
    index: VectorIndex,
    corpus: list[int],
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
) -> CandidateScore:
    h1 = semantic_alignment(candidate.embedding, g)
    h2 = novelty_score(candidate.embedding, index)
    h3 = uniqueness_score(candidate.phash, corpus)
    l1, l2, l3 = lambdas
    return CandidateScore(
        candidate_id=candidate.id,
        h1=h1,
        h2=h2,
        h3=h3,
        total=l1 * h1 + l2 * h2 + l3 * h3,
        lambdas=(float(l1), float(l2), float(l3)),
    )


def composite_select(
    candidates: list[Candidate],
    g: np.ndarray,
    index: VectorIndex,
    corpus: list[int],
    lambdas: tuple[float, float, float] = DEFAULT_LAMBDAS,
) -> tuple[Candidate, list[CandidateScore]]:
    """Score every candidate and return the argmax plus the full table."""
    if not candidates:
        raise NoCandidatesError("no candidates to select from")
    scores = [score_candidate(c, g, index, corpus, lambdas) for c in candidates]
    best = 0
    for i in range(1, len(scores)):
        if scores[i].total > scores[best].total:
            best = i
    return candidates[best], scores
