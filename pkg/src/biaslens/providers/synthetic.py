"""Deterministic synthetic providers sharing one embedding space.

Images embed as their region statistics; text embeds by rendering the scene
the words describe and embedding that canvas the same way. A text naming a
texture and a color renders the texture on that color; a bare texture word
renders on the color it co-occurs with in training (the learned prior); a
bare color fills the frame. Cosines between image and text embeddings
therefore behave like a tiny contrastive vision-language model with a fully
known mechanism, including its co-occurrence bias.
"""

from __future__ import annotations

import re
from typing import Optional, Sequence

import numpy as np

from .._validation import as_image_batch
from ..types import BiasLensError, ValidationError
from ..world import NEUTRAL_WORDS, SyntheticWorld
from .base import CaptionProvider, EmbeddingProvider, ProviderError, ZeroShotProvider
from .logistic import region_statistics

_TOKEN_RE = re.compile(r"[a-z0-9']+")

#: Pixels at or below this (max over channels) count as masked-out.
VISIBILITY_EPS = 0.02


class UnknownVocabularyError(ProviderError):
    """No token of a text maps to a known canvas."""


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def visible_pixels(image: np.ndarray) -> np.ndarray:
    """Boolean map of pixels that survived grounding (zero-fill convention)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    return img.max(axis=-1) > VISIBILITY_EPS


def compose_text_canvas(world: SyntheticWorld, text: str) -> np.ndarray:
    """Render the scene a text describes, compositionally.

    Texture word + color word paint the texture core on that color
    background; a bare texture word falls back on its training-majority
    color (the co-occurrence prior); a bare color word fills the frame;
    texts of only neutral filler words give the gray canvas. Content words
    beat filler: neutral tokens are ignored once any texture or color word
    is present. Multiple content words of one kind average their scenes.
    """
    if world is None:
        raise UnknownVocabularyError("text rendering requires a synthetic world vocabulary")
    tokens = tokenize(text)
    class_ids = []
    attribute_ids = []
    saw_neutral = False
    for token in tokens:
        if token in world.class_names:
            cid = world.class_names.index(token)
            if cid not in class_ids:
                class_ids.append(cid)
        elif token in world.attribute_names:
            aid = world.attribute_names.index(token)
            if aid not in attribute_ids:
                attribute_ids.append(aid)
        elif token in NEUTRAL_WORDS:
            saw_neutral = True
    if class_ids and attribute_ids:
        scenes = [
            world.class_canvas(cid, background=aid)
            for cid in class_ids
            for aid in attribute_ids
        ]
    elif class_ids:
        scenes = [
            world.class_canvas(cid, background=world.majority_attribute(cid))
            for cid in class_ids
        ]
    elif attribute_ids:
        scenes = [world.color_canvas(aid) for aid in attribute_ids]
    elif saw_neutral:
        scenes = [world.neutral_canvas()]
    else:
        raise UnknownVocabularyError(f"no known vocabulary in text {text!r}")
    return np.mean(scenes, axis=0)


class RegionStatsEmbedder(EmbeddingProvider):
    """Embeds images by spatial region statistics, texts by word canvases.

    A constant coordinate is appended before L2 normalization so even an
    all-black (fully masked) image has a well-defined unit embedding.
    Text embedding requires a world (the vocabulary); image embedding
    does not.
    """

    def __init__(self, world: Optional[SyntheticWorld] = None, grid: int = 4, seed: int = 0):
        self.world = world
        self.grid = grid
        self.seed = seed

    @property
    def dim(self) -> int:
        # RGB inputs: 3 channel means + 2 edge energies per cell, plus the constant.
        return 5 * self.grid * self.grid + 1

    def _embed_batch(self, images) -> np.ndarray:
        stats = region_statistics(images, grid=self.grid)
        flat = stats.reshape(stats.shape[0], -1)
        flat = np.concatenate([flat, np.ones((flat.shape[0], 1))], axis=1)
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        return flat / norms

    def embed_images(self, images) -> np.ndarray:
        return self._embed_batch(as_image_batch(images))

    def canvas_for(self, text: str) -> np.ndarray:
        return compose_text_canvas(self.world, text)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        canvases = [self.canvas_for(t) for t in texts]
        return self._embed_batch(np.stack(canvases))


class SalienceCaptioner(CaptionProvider):
    """Captions an image by its dominant visible region.

    When enough of the central core is visible the caption names the core
    texture; otherwise, when enough background is visible, it names the
    background color; otherwise the frame is declared empty. Reading
    statistics off the pixels recovers exactly the generative factors of
    this world, so captions double as ground-truth descriptions.
    """

    def __init__(self, world: SyntheticWorld, min_visible: float = 0.25, seed: int = 0):
        if world is None:
            raise ValidationError("captioner requires a synthetic world")
        self.world = world
        self.min_visible = min_visible
        self.seed = seed

    def caption(self, images) -> list[str]:
        imgs = as_image_batch(images)
        core = self.world.core_mask()
        background = ~core
        captions = []
        for img in imgs:
            vis = visible_pixels(img)
            core_frac = float((vis & core).sum()) / float(core.sum())
            bg_frac = float((vis & background).sum()) / float(background.sum())
            if core_frac >= self.min_visible:
                cid = self.world.nearest_class(img, visible=vis)
                captions.append(f"a photo of a {self.world.class_names[cid]} object")
            elif bg_frac >= self.min_visible:
                aid = self.world.nearest_attribute(img, visible=vis)
                captions.append(f"a photo of a {self.world.attribute_names[aid]} background")
            else:
                captions.append("a photo of an empty frame")
        return captions


class StatPromptZeroShot(ZeroShotProvider):
    """Prompt scorer over the shared statistic space, with co-occurrence bias.

    A bare class word renders on its majority-attribute background (the
    co-occurrence prior), so prompts like "a photo of a striped" inherit
    the dataset bias. Naming an attribute in the prompt overrides the
    prior: the class then renders on that color instead, so prompts that
    spell out the background classify every group from its own template.
    """

    def __init__(self, world: SyntheticWorld, grid: int = 4, temperature: float = 0.05, seed: int = 0):
        if world is None:
            raise ValidationError("zero-shot provider requires a synthetic world")
        self.world = world
        self.grid = grid
        self.temperature = temperature
        self.seed = seed
        self._embedder = RegionStatsEmbedder(world=world, grid=grid, seed=seed)

    def classify(self, images, prompts: Sequence[str]) -> np.ndarray:
        if not prompts:
            raise ValidationError("prompts must be non-empty")
        anchors = self._embedder._embed_batch(
            np.stack([compose_text_canvas(self.world, p) for p in prompts])
        )
        emb = self._embedder.embed_images(images)
        scores = emb @ anchors.T
        shifted = (scores - scores.max(axis=1, keepdims=True)) / self.temperature
        exp = np.exp(shifted)
        return exp / exp.sum(axis=1, keepdims=True)


class OracleZeroShot(ZeroShotProvider):
    """Reads the true background color off each image and answers one-hot.

    For every image the prompt mentioning the image's actual attribute word
    wins outright; with no such prompt the first attribute-free prompt wins.
    Useful as a perfect group-inference reference.
    """

    def __init__(self, world: SyntheticWorld, seed: int = 0):
        if world is None:
            raise ValidationError("zero-shot provider requires a synthetic world")
        self.world = world
        self.seed = seed

    def classify(self, images, prompts: Sequence[str]) -> np.ndarray:
        if not prompts:
            raise ValidationError("prompts must be non-empty")
        imgs = as_image_batch(images)
        mentioned = []
        for p in prompts:
            tokens = set(tokenize(p))
            mentioned.append({a for a in self.world.attribute_names if a in tokens})
        neutral = [i for i, m in enumerate(mentioned) if not m]
        out = np.zeros((imgs.shape[0], len(prompts)), dtype=np.float64)
        for i, img in enumerate(imgs):
            aid = self.world.nearest_attribute(img, visible=visible_pixels(img))
            word = self.world.attribute_names[aid]
            hits = [j for j, m in enumerate(mentioned) if word in m]
            if hits:
                out[i, hits[0]] = 1.0
            elif neutral:
                out[i, neutral[0]] = 1.0
            else:
                out[i, 0] = 1.0
        return out


class NoisyZeroShot(ZeroShotProvider):
    """Wraps a provider, flipping each decision to a random other prompt.

    Flips happen independently per image with probability ``flip_rate``;
    the generator state advances per call, so a fixed call sequence is
    reproducible from the seed.
    """

    def __init__(self, inner: ZeroShotProvider, flip_rate: float = 0.1, seed: int = 0):
        if not 0.0 <= flip_rate <= 1.0:
            raise ValidationError(f"flip_rate must lie in [0, 1], got {flip_rate}")
        self.inner = inner
        self.flip_rate = flip_rate
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def classify(self, images, prompts: Sequence[str]) -> np.ndarray:
        probs = self.inner.classify(images, prompts)
        n, p = probs.shape
        if p < 2:
            return probs
        out = probs.copy()
        for i in range(n):
            if self._rng.uniform() < self.flip_rate:
                current = int(np.argmax(out[i]))
                alternatives = [j for j in range(p) if j != current]
                pick = alternatives[int(self._rng.integers(len(alternatives)))]
                row = np.zeros(p)
                row[pick] = 1.0
                out[i] = row
        return out
