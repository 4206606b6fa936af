"""Procedural image world shared by the synthetic generator and providers.

Images are square RGB canvases: a background painted in a flat palette color
(the spurious attribute) and a central core square carrying a grayscale
texture pattern (the class). The same recipe defines the text grounding for
synthetic providers: every class and attribute word maps to a canvas, so
text and images live in one embedding space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np

from .types import BiasLensError, ValidationError

PALETTE: Mapping[str, Tuple[float, float, float]] = {
    "crimson": (0.85, 0.10, 0.15),
    "teal": (0.05, 0.55, 0.60),
    "olive": (0.50, 0.55, 0.10),
    "violet": (0.55, 0.15, 0.65),
    "amber": (0.90, 0.65, 0.10),
    "slate": (0.40, 0.45, 0.55),
}

PATTERN_NAMES = ("striped", "checker", "dotted", "diagonal", "banded", "cross")

#: Words usable in prompts and captions that carry no class/attribute signal.
NEUTRAL_WORDS = frozenset(
    {"photo", "image", "picture", "object", "background", "frame", "empty", "scene"}
)

_GRAY = 0.5


class WorldError(BiasLensError):
    """Raised on unknown pattern or palette names."""


def pattern_field(name: str, shape: Tuple[int, int], contrast: float) -> np.ndarray:
    """Zero-centered texture offsets for one pattern over an (H, W) grid."""
    h, w = shape
    i = np.arange(h)[:, None]
    j = np.arange(w)[None, :]
    c = float(contrast)
    if name == "striped":
        sel = (i // 2) % 2 == 0
        field = np.where(sel, c, -c)
    elif name == "checker":
        sel = ((i // 2) + (j // 2)) % 2 == 0
        field = np.where(sel, c, -c)
    elif name == "dotted":
        sel = ((i % 4) < 2) & ((j % 4) < 2)
        field = np.where(sel, c, -c / 3.0)
    elif name == "diagonal":
        sel = ((i + j) // 2) % 2 == 0
        field = np.where(sel, c, -c)
    elif name == "banded":
        sel = (j // 2) % 2 == 0
        field = np.where(sel, c, -c)
    elif name == "cross":
        sel = (np.abs(i - h / 2.0) < h / 8.0) | (np.abs(j - w / 2.0) < w / 8.0)
        field = np.where(sel, c, -c / 2.0)
    else:
        raise WorldError(f"unknown pattern {name!r}, expected one of {PATTERN_NAMES}")
    return field + np.zeros((h, w))


@dataclass(frozen=True)
class SyntheticWorld:
    """Complete recipe for rendering and reading synthetic images."""

    class_names: Tuple[str, ...] = ("striped", "checker")
    attribute_names: Tuple[str, ...] = ("crimson", "teal")
    image_size: int = 32
    core_fraction: float = 0.5
    core_contrast: float = 0.25
    noise_level: float = 0.05
    distractor_level: float = 0.0
    color_jitter: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "attribute_names", tuple(self.attribute_names))
        for name in self.class_names:
            if name not in PATTERN_NAMES:
                raise WorldError(f"unknown pattern {name!r}, expected one of {PATTERN_NAMES}")
        for name in self.attribute_names:
            if name not in PALETTE:
                raise WorldError(f"unknown palette color {name!r}, expected one of {tuple(PALETTE)}")
        if self.image_size < 8:
            raise ValidationError("image_size must be at least 8")
        if not 0.1 <= self.core_fraction <= 0.9:
            raise ValidationError("core_fraction must lie in [0.1, 0.9]")

    # -- geometry ---------------------------------------------------------

    @property
    def core_slice(self) -> Tuple[slice, slice]:
        s = self.image_size
        side = max(2, int(round(s * self.core_fraction)))
        start = (s - side) // 2
        return slice(start, start + side), slice(start, start + side)

    def core_mask(self) -> np.ndarray:
        mask = np.zeros((self.image_size, self.image_size), dtype=bool)
        ys, xs = self.core_slice
        mask[ys, xs] = True
        return mask

    def background_mask(self) -> np.ndarray:
        return ~self.core_mask()

    # -- rendering --------------------------------------------------------

    def render(self, class_id: int, attribute_id: int, rng: np.random.Generator) -> np.ndarray:
        """Draw one image for (class, attribute) with per-sample variation.

        The rng stream is consumed in a fixed order (jitter, distractor,
        noise) so renders are reproducible from the generator state.
        ``color_jitter`` shifts the whole background color per sample;
        ``distractor_level`` blends a random solid color over the core,
        label-independent clutter that an explanation mask can remove.
        """
        s = self.image_size
        img = np.empty((s, s, 3), dtype=np.float64)
        background = np.asarray(PALETTE[self.attribute_names[attribute_id]], dtype=np.float64)
        if self.color_jitter > 0.0:
            background = np.clip(background + rng.normal(0.0, self.color_jitter, size=3), 0.0, 1.0)
        img[:] = background
        ys, xs = self.core_slice
        field = pattern_field(
            self.class_names[class_id], (ys.stop - ys.start, xs.stop - xs.start), self.core_contrast
        )
        img[ys, xs, :] = np.clip(_GRAY + field, 0.0, 1.0)[..., None]
        if self.distractor_level > 0.0:
            color = rng.uniform(0.0, 1.0, size=3)
            img[ys, xs, :] = (1.0 - self.distractor_level) * img[ys, xs, :] + self.distractor_level * color
        if self.noise_level > 0.0:
            img = img + rng.normal(0.0, self.noise_level, size=img.shape)
        return np.clip(img, 0.0, 1.0)

    # -- canvases (text grounding) ----------------------------------------

    def color_canvas(self, attribute_id: int) -> np.ndarray:
        s = self.image_size
        canvas = np.empty((s, s, 3), dtype=np.float64)
        canvas[:] = PALETTE[self.attribute_names[attribute_id]]
        return canvas

    def class_canvas(self, class_id: int, background: Optional[int] = None) -> np.ndarray:
        """Pattern in the core region; gray background unless one is given."""
        if background is None:
            canvas = np.full((self.image_size, self.image_size, 3), _GRAY, dtype=np.float64)
        else:
            canvas = self.color_canvas(background)
        ys, xs = self.core_slice
        field = pattern_field(
            self.class_names[class_id], (ys.stop - ys.start, xs.stop - xs.start), self.core_contrast
        )
        canvas[ys, xs, :] = np.clip(_GRAY + field, 0.0, 1.0)[..., None]
        return canvas

    def neutral_canvas(self) -> np.ndarray:
        return np.full((self.image_size, self.image_size, 3), _GRAY, dtype=np.float64)

    def majority_attribute(self, class_id: int) -> int:
        """Attribute paired with a class under the diagonal co-occurrence convention."""
        return class_id % len(self.attribute_names)

    # -- reading images back ----------------------------------------------

    def nearest_class(self, image: np.ndarray, visible: Optional[np.ndarray] = None) -> int:
        """Best-matching pattern for the core region by template correlation."""
        ys, xs = self.core_slice
        block = np.asarray(image, dtype=np.float64)[ys, xs]
        gray = block.mean(axis=-1) if block.ndim == 3 else block
        if visible is not None:
            vis = visible[ys, xs]
        else:
            vis = np.ones_like(gray, dtype=bool)
        if not vis.any():
            raise WorldError("core region fully hidden; pattern unreadable")
        centered = gray[vis] - gray[vis].mean()
        scores = []
        for name in self.class_names:
            tmpl = pattern_field(name, gray.shape, self.core_contrast)[vis]
            tmpl = tmpl - tmpl.mean()
            scores.append(float(np.dot(centered, tmpl)))
        return int(np.argmax(scores))

    def nearest_attribute(self, image: np.ndarray, visible: Optional[np.ndarray] = None) -> int:
        """Best-matching palette color for the background region."""
        bg = self.background_mask()
        if visible is not None:
            bg = bg & visible
        if not bg.any():
            raise WorldError("background region fully hidden; color unreadable")
        mean_color = np.asarray(image, dtype=np.float64)[bg].mean(axis=0)
        dists = [
            float(np.sum((mean_color - np.asarray(PALETTE[name])) ** 2))
            for name in self.attribute_names
        ]
        return int(np.argmin(dists))

    # -- vocabulary -------------------------------------------------------

    def token_canvas(self, token: str, *, neutral_classes: bool = False) -> Optional[np.ndarray]:
        """Canvas for one vocabulary token, or None if the token is unknown.

        Class tokens normally render on their majority-attribute background,
        mirroring co-occurrence priors picked up from natural data; with
        ``neutral_classes`` they render on gray instead.
        """
        token = token.lower()
        if token in self.attribute_names:
            return self.color_canvas(self.attribute_names.index(token))
        if token in self.class_names:
            cid = self.class_names.index(token)
            bg = None if neutral_classes else self.majority_attribute(cid)
            return self.class_canvas(cid, background=bg)
        if token in NEUTRAL_WORDS:
            return self.neutral_canvas()
        return None

    def known_words(self) -> frozenset:
        return frozenset(self.class_names) | frozenset(self.attribute_names) | NEUTRAL_WORDS

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "attribute_names": list(self.attribute_names),
            "image_size": self.image_size,
            "core_fraction": self.core_fraction,
            "core_contrast": self.core_contrast,
            "noise_level": self.noise_level,
            "distractor_level": self.distractor_level,
            "color_jitter": self.color_jitter,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticWorld":
        return cls(
            class_names=tuple(d["class_names"]),
            attribute_names=tuple(d["attribute_names"]),
            image_size=int(d.get("image_size", 32)),
            core_fraction=float(d.get("core_fraction", 0.5)),
            core_contrast=float(d.get("core_contrast", 0.25)),
            noise_level=float(d.get("noise_level", 0.05)),
            distractor_level=float(d.get("distractor_level", 0.0)),
            color_jitter=float(d.get("color_jitter", 0.0)),
        )
