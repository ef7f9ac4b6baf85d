"""Standardisation des intensités par points de repère (min, déciles, max) vers [1, 4095]"""
import logging
from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigurationError, DegenerateError, LeakageError
from app.data.images import GrayImage
from app.preprocessing.foreground import foreground_mask

logger = logging.getLogger(__name__)

SCALE_MIN = 1.0
SCALE_MAX = 4095.0
LANDMARK_PERCENTILES: Tuple[float, ...] = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0)


@dataclass(frozen=True)
class StandardScale:
    """Échelle standard apprise: positions des repères sur [1, 4095]

    provenance liste les sujets dont les images ont servi à l'apprentissage.
    """
    positions: Tuple[float, ...]
    percentiles: Tuple[float, ...] = LANDMARK_PERCENTILES
    provenance: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        positions = tuple(float(p) for p in self.positions)
        if len(positions) != len(self.percentiles):
            raise ConfigurationError(
                f"{len(positions)} positions pour {len(self.percentiles)} percentiles"
            )
        if np.any(np.diff(positions) <= 0):
            raise ConfigurationError(f"Positions standard non strictement croissantes: {positions}")
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'provenance', frozenset(self.provenance))

    def check_provenance(self, allowed_subjects: Iterable[str]):
        """Lève LeakageError si l'échelle a vu un sujet hors de l'ensemble autorisé"""
        leaked = self.provenance - set(allowed_subjects)
        if leaked:
            raise LeakageError(f"Échelle apprise sur des sujets hors entraînement: {sorted(leaked)[:5]}")

    def to_dict(self):
        return {'positions': list(self.positions), 'percentiles': list(self.percentiles),
                'provenance': sorted(self.provenance)}


def image_landmarks(img: GrayImage, percentiles: Sequence[float] = LANDMARK_PERCENTILES) -> np.ndarray:
    """Repères d'intensité de l'avant-plan, rendus strictement croissants"""
    pixels = img.pixels.astype(np.float64)
    values = pixels[foreground_mask(pixels)]
    landmarks = np.percentile(values, percentiles)
    span = landmarks[-1] - landmarks[0]
    if span <= 0:
        raise DegenerateError("Histogramme dégénéré: intensité constante sur l'avant-plan")
    step = 1e-6 * span
    for i in range(1, len(landmarks)):
        landmarks[i] = max(landmarks[i], landmarks[i - 1] + step)
    return landmarks


def train_scale(images: Sequence[GrayImage], subjects: Optional[Iterable[str]] = None,
                percentiles: Sequence[float] = LANDMARK_PERCENTILES) -> StandardScale:
    """Apprend l'échelle standard: moyenne des repères projetés sur [1, 4095]

    Args:
        images: Images d'entraînement (un seul contraste)
        subjects: Sujets d'origine, mémorisés pour le contrôle de fuite
        percentiles: Percentiles des repères

    Returns:
        StandardScale
    """
    if not images:
        raise ConfigurationError("Au moins une image est nécessaire pour apprendre l'échelle")
    total = np.zeros(len(percentiles))
    for img in images:
        landmarks = image_landmarks(img, percentiles)
        total += np.interp(landmarks, [landmarks[0], landmarks[-1]], [SCALE_MIN, SCALE_MAX])
    positions = total / len(images)
    positions[0], positions[-1] = SCALE_MIN, SCALE_MAX
    logger.debug(f"Échelle apprise sur {len(images)} images")
    return StandardScale(tuple(positions), tuple(percentiles), frozenset(subjects or ()))


def standardize(img: GrayImage, scale: StandardScale) -> GrayImage:
    """Projection linéaire par morceaux des repères de l'image sur l'échelle"""
    landmarks = image_landmarks(img, scale.percentiles)
    mapped = np.interp(img.pixels.astype(np.float64), landmarks, scale.positions)
    return img.with_pixels(np.clip(mapped, SCALE_MIN, SCALE_MAX).astype(np.float32))
