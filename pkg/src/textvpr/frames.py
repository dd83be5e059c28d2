"""Record types shared across the toolkit."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .font import CHARSET
from .geometry import Polygon


def normalize_text(s):
    """Case-fold to the upper-case charset; other symbols are kept as-is."""
    return s.upper()


@dataclass(eq=False)
class TextInstance:
    """One word: region polygon, transcription, confidence in [0, 1]."""

    polygon: Polygon
    text: str
    confidence: float = 1.0

    def __post_init__(self):
        if not isinstance(self.polygon, Polygon):
            self.polygon = Polygon(self.polygon)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def __eq__(self, other):
        return (isinstance(other, TextInstance) and self.text == other.text
                and self.confidence == other.confidence and self.polygon == other.polygon)


@dataclass(eq=False)
class Frame:
    frame_id: str
    image: np.ndarray | None = None
    instances: list = field(default_factory=list)

    def __eq__(self, other):
        if not isinstance(other, Frame) or self.frame_id != other.frame_id:
            return False
        if (self.image is None) != (other.image is None):
            return False
        if self.image is not None and not np.array_equal(self.image, other.image):
            return False
        return self.instances == other.instances


def in_charset(s):
    return all(c in CHARSET for c in s)
