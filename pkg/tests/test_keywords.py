"""Keyword extraction and bias-keyword scoring."""

import numpy as np
import pytest

from biaslens.keywords import (
    STOPWORDS,
    KeywordError,
    clip_score,
    extract_keywords,
    rank_keywords,
    subgroup_accuracy,
)
from biaslens.providers.base import EmbeddingProvider, ProviderError
from biaslens.types import ValidationError


class VectorEmbedder(EmbeddingProvider):
    """Test double mapping known words to fixed unit vectors."""

    def __init__(self, vocabulary):
        self.vocabulary = {k: np.asarray(v, dtype=np.float64) for k, v in vocabulary.items()}

    def embed_images(self, images):
        raise NotImplementedError

    def embed_texts(self, texts):
        out = []
        for text in texts:
            if text not in self.vocabulary:
                raise ProviderError(f"unknown text {text!r}")
            v = self.vocabulary[text]
            out.append(v / np.linalg.norm(v))
        return np.stack(out)


class TestExtraction:
    def test_repeated_caption_yields_its_ngrams(self):
        captions = ["a man face", "a man face"]
        keywords = extract_keywords(captions, min_frequency=2)
        assert {"man", "face", "man face"} <= set(keywords)
        # stopword-led or stopword-ended grams never appear
        assert all(not kw.startswith("a ") for kw in keywords)

    def test_all_stopword_captions_give_nothing(self):
        assert extract_keywords(["the of an", "is was it"], min_frequency=1) == []

    def test_ordering_is_frequency_then_lexicographic(self):
        captions = ["blue sky", "blue sea", "red sea"]
        keywords = extract_keywords(captions, min_frequency=2)
        assert keywords == ["blue", "sea"]

    def test_fractional_threshold_scales_with_corpus(self):
        captions = ["rusty fence"] * 4 + ["clean wall"] * 6
        keywords = extract_keywords(captions, min_frequency=0.3)
        assert "rusty" in keywords and "clean" in keywords
        rare = extract_keywords(["rusty fence"] * 2 + ["clean wall"] * 8, min_frequency=0.3)
        assert "rusty" not in rare and "clean" in rare

    def test_caption_frequency_counts_documents_not_occurrences(self):
        keywords = extract_keywords(["dog dog dog", "cat"], min_frequency=2)
        assert keywords == []

    def test_empty_corpus_is_an_error(self):
        with pytest.raises(KeywordError):
            extract_keywords([])

    def test_common_fillers_are_stopwords(self):
        assert {"a", "the", "of", "on", "is", "very"} <= STOPWORDS


class TestClipScore:
    def test_orthogonal_keyword_scores_zero(self):
        embedder = VectorEmbedder({"kw": [0.0, 0.0, 1.0]})
        wrong = np.array([[1.0, 0.0, 0.0]])
        correct = np.array([[0.0, 1.0, 0.0]])
        assert clip_score("kw", wrong, correct, embedder) == pytest.approx(0.0)

    def test_keyword_aligned_with_failures_scores_one(self):
        embedder = VectorEmbedder({"kw": [1.0, 0.0]})
        wrong = np.array([[1.0, 0.0], [1.0, 0.0]])
        correct = np.array([[0.0, 1.0]])
        assert clip_score("kw", wrong, correct, embedder) == pytest.approx(1.0)

    def test_three_image_hand_fixture(self):
        embedder = VectorEmbedder({"kw": [1.0, 0.0]})
        wrong = np.array([[1.0, 0.0], [0.6, 0.8]])
        correct = np.array([[0.0, 1.0]])
        assert clip_score("kw", wrong, correct, embedder) == pytest.approx(0.8)

    def test_empty_sets_rejected(self):
        embedder = VectorEmbedder({"kw": [1.0, 0.0]})
        with pytest.raises(KeywordError):
            clip_score("kw", np.empty((0, 2)), np.array([[1.0, 0.0]]), embedder)
        with pytest.raises(KeywordError):
            clip_score("kw", np.array([[1.0, 0.0]]), np.empty((0, 2)), embedder)

    def test_dimension_mismatch_rejected(self):
        embedder = VectorEmbedder({"kw": [1.0, 0.0]})
        with pytest.raises(ValidationError):
            clip_score("kw", np.ones((1, 2)), np.ones((1, 3)), embedder)


class TestSubgroupAccuracy:
    def test_scores_the_most_similar_quarter(self):
        embedder = VectorEmbedder({"kw": [1.0, 0.0]})
        sims = [0.9, 0.8, 0.3, 0.2, 0.1, 0.0, -0.1, -0.2]
        embeddings = np.array([[s, (1 - s * s) ** 0.5] for s in sims])
        correct = [False, True, True, True, True, True, True, True]
        # quarter of 8 = top 2 by similarity: one wrong, one right
        assert subgroup_accuracy("kw", embeddings, correct, embedder) == pytest.approx(0.5)

    def test_similarity_ties_break_by_sample_id(self):
        embedder = VectorEmbedder({"kw": [1.0, 0.0]})
        embeddings = np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]])
        correct = [True, False, False, False]
        ids = ["a", "b", "c", "d"]
        got = subgroup_accuracy("kw", embeddings, correct, embedder, ids=ids, quantile=0.25)
        assert got == 1.0

    def test_quantile_validated(self):
        embedder = VectorEmbedder({"kw": [1.0, 0.0]})
        with pytest.raises(ValidationError):
            subgroup_accuracy("kw", np.ones((2, 2)), [True, True], embedder, quantile=0.0)


class TestRankKeywords:
    def embedder(self):
        return VectorEmbedder(
            {
                "water": [1.0, 0.0],
                "beach": [0.9, (1 - 0.81) ** 0.5],
                "grass": [0.0, 1.0],
                "water beach": [1.0, 0.0],
                "beach water": [1.0, 0.0],
            }
        )

    def test_keywords_near_failures_rank_first(self):
        wrong = {"bird": np.array([[1.0, 0.0], [0.95, (1 - 0.9025) ** 0.5]])}
        correct = {"bird": np.array([[0.0, 1.0], [0.1, (1 - 0.01) ** 0.5]])}
        captions = {"bird": ["water beach", "water beach", "grass", "grass"]}
        report = rank_keywords(["bird"], captions, wrong, correct, self.embedder())
        ranked = [ks.keyword for ks in report.per_class["bird"]]
        assert ranked[0] == "water"
        assert ranked.index("water") < ranked.index("grass")
        scores = [ks.score for ks in report.per_class["bird"]]
        assert scores == sorted(scores, reverse=True)

    def test_classes_without_errors_or_successes_are_skipped(self):
        captions = {"a": ["water beach"], "b": ["water beach"], "c": []}
        wrong = {"a": np.empty((0, 2)), "b": np.ones((1, 2)), "c": np.ones((1, 2))}
        correct = {"a": np.ones((1, 2)), "b": np.empty((0, 2)), "c": np.ones((1, 2))}
        report = rank_keywords(["a", "b", "c"], captions, wrong, correct, self.embedder())
        assert report.skipped_classes["a"] == "no misclassified samples"
        assert report.skipped_classes["b"] == "no correctly classified samples"
        assert report.skipped_classes["c"] == "no misclassified samples"
        assert report.per_class == {}

    def test_unembeddable_keywords_are_recorded(self):
        captions = {"bird": ["water snorkel", "water snorkel"]}
        wrong = {"bird": np.array([[1.0, 0.0]])}
        correct = {"bird": np.array([[0.0, 1.0]])}
        report = rank_keywords(["bird"], captions, wrong, correct, self.embedder())
        assert "snorkel" in report.skipped_keywords["bird"]
        assert "water" in [ks.keyword for ks in report.per_class["bird"]]

    def test_report_serializes_with_frequencies(self):
        captions = {"bird": ["water beach", "water beach"]}
        wrong = {"bird": np.array([[1.0, 0.0]])}
        correct = {"bird": np.array([[0.0, 1.0]])}
        report = rank_keywords(["bird"], captions, wrong, correct, self.embedder())
        payload = report.to_dict()
        entry = payload["per_class"]["bird"][0]
        assert set(entry) >= {"keyword", "score", "frequency"}
        by_kw = {ks.keyword: ks for ks in report.per_class["bird"]}
        assert by_kw["water"].frequency == 2

    def test_top_keywords_helper(self):
        captions = {"bird": ["water beach", "water beach"]}
        wrong = {"bird": np.array([[1.0, 0.0]])}
        correct = {"bird": np.array([[0.0, 1.0]])}
        report = rank_keywords(["bird"], captions, wrong, correct, self.embedder())
        assert report.top_keywords("bird", n=1) == ["water"]
        assert report.top_keywords("absent", n=1) == []
