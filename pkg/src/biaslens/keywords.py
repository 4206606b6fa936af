"""Describing error slices in words.

Captions of a class's misclassified images are mined for n-gram keywords;
each keyword is scored by how much closer it sits (in the shared image-text
embedding space) to the misclassified images than to the correctly
classified ones. A high score marks a concept that co-occurs with failure,
which is the textual fingerprint of a bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from ._validation import as_float_array
from .providers.base import EmbeddingProvider, ProviderError
from .providers.synthetic import tokenize
from .types import BiasLensError, ValidationError


class KeywordError(BiasLensError):
    """Raised on unusable keyword-ranking inputs."""


STOPWORDS = frozenset(
    """
    a an the this that these those of on in at by for with and or to from as is
    are was were be been being it its if then than so very
    """.split()
)


def _ngram_counts(
    captions: Sequence[str], ngram_range: Tuple[int, int], stopwords: frozenset
) -> dict[str, int]:
    """Caption frequency (documents containing it) of each candidate n-gram."""
    lo, hi = ngram_range
    if lo < 1 or hi < lo:
        raise ValidationError(f"invalid ngram_range {ngram_range}")
    counts: dict[str, int] = {}
    for caption in captions:
        tokens = tokenize(caption)
        seen = set()
        for n in range(lo, hi + 1):
            for i in range(len(tokens) - n + 1):
                gram = tokens[i : i + n]
                if gram[0] in stopwords or gram[-1] in stopwords:
                    continue
                seen.add(" ".join(gram))
        for gram in seen:
            counts[gram] = counts.get(gram, 0) + 1
    return counts


def extract_keywords(
    captions: Sequence[str],
    *,
    ngram_range: Tuple[int, int] = (1, 3),
    min_frequency: float = 2,
    stopwords: frozenset = STOPWORDS,
) -> list[str]:
    """Candidate keywords from captions: n-grams ordered by caption frequency.

    A candidate's first and last token must not be stopwords (which also
    removes stopword unigrams). ``min_frequency`` is an absolute caption
    count, or a fraction of the caption count when below 1. Ordering is by
    descending frequency, then lexicographic.
    """
    if not captions:
        raise KeywordError("no captions to extract keywords from")
    threshold = float(min_frequency)
    if threshold < 1.0:
        threshold = threshold * len(captions)
    counts = _ngram_counts(captions, ngram_range, stopwords)
    kept = [g for g, c in counts.items() if c >= threshold]
    return sorted(kept, key=lambda g: (-counts[g], g))


def clip_score(
    keyword: str,
    wrong_embeddings,
    correct_embeddings,
    embedder: EmbeddingProvider,
) -> float:
    """Mean similarity to misclassified images minus mean to correct ones.

    Embeddings are unit-norm rows, so dot products are cosines. Positive
    scores mark keywords that describe failures more than successes.
    """
    wrong = as_float_array(wrong_embeddings, "wrong_embeddings", ndim=2)
    correct = as_float_array(correct_embeddings, "correct_embeddings", ndim=2)
    if wrong.shape[0] == 0 or correct.shape[0] == 0:
        raise KeywordError("both misclassified and correct sets must be non-empty")
    if wrong.shape[1] != correct.shape[1]:
        raise ValidationError("embedding dimensions differ between sets")
    text = embedder.embed_texts([keyword])[0]
    return float((wrong @ text).mean() - (correct @ text).mean())


@dataclass(frozen=True)
class KeywordScore:
    keyword: str
    score: float
    subgroup_accuracy: Optional[float] = None
    frequency: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "keyword": self.keyword,
            "score": round(self.score, 6),
            "subgroup_accuracy": None
            if self.subgroup_accuracy is None
            else round(self.subgroup_accuracy, 4),
            "frequency": self.frequency,
        }


@dataclass(frozen=True)
class KeywordReport:
    """Ranked keywords per class plus accounting for skipped items."""

    per_class: Mapping[str, Tuple[KeywordScore, ...]]
    skipped_classes: Mapping[str, str] = field(default_factory=dict)
    skipped_keywords: Mapping[str, Tuple[str, ...]] = field(default_factory=dict)
    config: Mapping = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_class": {
                cls: [ks.to_dict() for ks in scores]
                for cls, scores in sorted(self.per_class.items())
            },
            "skipped_classes": dict(sorted(self.skipped_classes.items())),
            "skipped_keywords": {
                k: list(v) for k, v in sorted(self.skipped_keywords.items())
            },
            "config": dict(self.config),
        }

    def top_keywords(self, class_name: str, n: int = 1) -> list[str]:
        return [ks.keyword for ks in self.per_class.get(class_name, ())[:n]]


def subgroup_accuracy(
    keyword: str,
    embeddings,
    correct: Sequence[bool],
    embedder: EmbeddingProvider,
    ids: Optional[Sequence[str]] = None,
    quantile: float = 0.25,
) -> float:
    """Accuracy on the images most similar to the keyword.

    Takes the top quarter (by cosine to the keyword; ties break by sample
    id) and returns the mean correctness there. Low values confirm the
    keyword marks an underperforming subpopulation.
    """
    emb = as_float_array(embeddings, "embeddings", ndim=2)
    if emb.shape[0] != len(correct):
        raise ValidationError("embeddings and correctness must align")
    if not 0.0 < quantile <= 1.0:
        raise ValidationError(f"quantile must lie in (0, 1], got {quantile}")
    text = embedder.embed_texts([keyword])[0]
    sims = emb @ text
    n_top = max(1, math.ceil(quantile * emb.shape[0]))
    keys = ids if ids is not None else [str(i) for i in range(emb.shape[0])]
    order = sorted(range(emb.shape[0]), key=lambda i: (-sims[i], keys[i]))
    chosen = order[:n_top]
    return float(Fraction(sum(bool(correct[i]) for i in chosen), n_top))


def rank_keywords(
    class_names: Sequence[str],
    captions_by_class: Mapping[str, Sequence[str]],
    wrong_embeddings_by_class: Mapping[str, np.ndarray],
    correct_embeddings_by_class: Mapping[str, np.ndarray],
    embedder: EmbeddingProvider,
    *,
    all_embeddings_by_class: Optional[Mapping[str, np.ndarray]] = None,
    all_correct_by_class: Optional[Mapping[str, Sequence[bool]]] = None,
    all_ids_by_class: Optional[Mapping[str, Sequence[str]]] = None,
    top_n: int = 20,
    min_frequency: float = 2,
    ngram_range: Tuple[int, int] = (1, 3),
) -> KeywordReport:
    """Score and rank bias keywords for every class with a non-empty error set.

    Classes without misclassified (or without correct) samples are skipped
    and recorded. Keywords the embedder cannot represent are skipped and
    recorded. When full per-class embeddings are supplied, each ranked
    keyword also gets its subgroup accuracy.
    """
    per_class: dict[str, Tuple[KeywordScore, ...]] = {}
    skipped_classes: dict[str, str] = {}
    skipped_keywords: dict[str, Tuple[str, ...]] = {}
    for cls in class_names:
        captions = list(captions_by_class.get(cls, ()))
        wrong = np.asarray(wrong_embeddings_by_class.get(cls, np.empty((0, 1))))
        correct = np.asarray(correct_embeddings_by_class.get(cls, np.empty((0, 1))))
        if wrong.shape[0] == 0 or not captions:
            skipped_classes[cls] = "no misclassified samples"
            continue
        if correct.shape[0] == 0:
            skipped_classes[cls] = "no correctly classified samples"
            continue
        candidates = extract_keywords(
            captions, ngram_range=ngram_range, min_frequency=min_frequency
        )
        caption_counts = _ngram_counts(captions, ngram_range, STOPWORDS)
        scores = []
        dropped = []
        for kw in candidates:
            try:
                s = clip_score(kw, wrong, correct, embedder)
            except ProviderError:
                dropped.append(kw)
                continue
            sub = None
            if all_embeddings_by_class is not None and all_correct_by_class is not None:
                sub = subgroup_accuracy(
                    kw,
                    all_embeddings_by_class[cls],
                    all_correct_by_class[cls],
                    embedder,
                    ids=None if all_ids_by_class is None else all_ids_by_class[cls],
                )
            scores.append(
                KeywordScore(
                    keyword=kw, score=s, subgroup_accuracy=sub, frequency=caption_counts[kw]
                )
            )
        scores.sort(key=lambda ks: (-ks.score, ks.keyword))
        per_class[cls] = tuple(scores[: int(top_n)])
        if dropped:
            skipped_keywords[cls] = tuple(dropped)
    return KeywordReport(
        per_class=per_class,
        skipped_classes=skipped_classes,
        skipped_keywords=skipped_keywords,
        config={
            "top_n": top_n,
            "min_frequency": min_frequency,
            "ngram_range": list(ngram_range),
        },
    )
