"""Types d'images: contrastes IRM, cartes d'étiquettes et tâches de segmentation"""
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Dict, FrozenSet, Iterable, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigurationError, ShapeError

Spacing = Tuple[float, float]
IGNORE_LABEL = 255


class Tissue(IntEnum):
    """Classes de tissus de la cuisse"""
    BACKGROUND = 0
    MUSCLE = 1
    FAT = 2
    IMAT = 3
    BONE = 4
    MARROW = 5


ALL_TISSUES: FrozenSet[int] = frozenset(int(t) for t in Tissue)

# Ordre fixe des canaux
CONTRASTS = ('water_fat', 'fat_suppressed', 'water_suppressed')
CONTRAST_LABELS = ('MRI1', 'MRI2', 'MRI3')


@dataclass(frozen=True)
class GrayImage:
    """Image en niveaux de gris, intensités finies et positives"""
    pixels: np.ndarray
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 2 or min(pixels.shape) < 1:
            raise ShapeError(f"Image 2D attendue, reçu shape={pixels.shape}")
        if not np.all(np.isfinite(pixels)):
            raise ConfigurationError("Intensités non finies dans l'image")
        if pixels.min() < 0:
            raise ConfigurationError(f"Intensité négative dans l'image: {pixels.min():.4g}")
        object.__setattr__(self, 'pixels', pixels)
        object.__setattr__(self, 'spacing', (float(self.spacing[0]), float(self.spacing[1])))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> 'GrayImage':
        return GrayImage(pixels, self.spacing)


@dataclass(frozen=True)
class MultiContrastSlice:
    """Coupe multi-contraste: eau+graisse, graisse supprimée, eau supprimée

    `processing` trace les étapes de prétraitement appliquées, dans l'ordre.
    """
    channels: Tuple[GrayImage, GrayImage, GrayImage]
    subject_id: str
    slice_index: int = 0
    spacing: Spacing = (1.0, 1.0)
    processing: Tuple[str, ...] = ()

    def __post_init__(self):
        channels = tuple(self.channels)
        if len(channels) != len(CONTRASTS):
            raise ShapeError(f"{len(CONTRASTS)} contrastes attendus, reçu {len(channels)}")
        shapes = {c.shape for c in channels}
        if len(shapes) != 1:
            raise ShapeError(f"Contrastes de tailles différentes: {sorted(shapes)}")
        object.__setattr__(self, 'channels', channels)

    @classmethod
    def from_array(cls, array: np.ndarray, subject_id: str, slice_index: int = 0,
                   spacing: Spacing = (1.0, 1.0), processing: Tuple[str, ...] = ()) -> 'MultiContrastSlice':
        """Construit une coupe à partir d'un tableau [3, H, W]"""
        array = np.asarray(array)
        if array.ndim != 3:
            raise ShapeError(f"Tableau [3, H, W] attendu, reçu shape={array.shape}")
        channels = tuple(GrayImage(plane, spacing) for plane in array)
        return cls(channels, subject_id, slice_index, spacing, processing)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.channels[0].shape

    @property
    def key(self) -> Tuple[str, int]:
        return (self.subject_id, self.slice_index)

    def stack(self, contrasts: Sequence[int] = (0, 1, 2)) -> np.ndarray:
        """Empile les contrastes demandés en [C, H, W] float32"""
        return np.stack([self.channels[c].pixels for c in contrasts]).astype(np.float32)

    def with_channels(self, channels: Iterable[GrayImage], stage: Optional[str] = None) -> 'MultiContrastSlice':
        processing = self.processing + ((stage,) if stage else ())
        return replace(self, channels=tuple(channels), processing=processing)


@dataclass(frozen=True)
class LabelMap:
    """Carte d'étiquettes par pixel (identifiants de Tissue)

    annotated_classes liste les classes effectivement annotées: une coupe
    sans annotation IMAT ne contient aucun pixel de classe 3.
    """
    classes: np.ndarray
    annotated_classes: FrozenSet[int] = ALL_TISSUES
    spacing: Spacing = (1.0, 1.0)

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise ShapeError(f"Carte 2D attendue, reçu shape={classes.shape}")
        if classes.size and (classes.min() < 0 or classes.max() > max(ALL_TISSUES)):
            bad = int(classes[(classes < 0) | (classes > max(ALL_TISSUES))].flat[0])
            raise ConfigurationError(f"Valeur d'étiquette invalide: {bad}")
        annotated = frozenset(int(c) for c in self.annotated_classes)
        if not annotated <= ALL_TISSUES:
            raise ConfigurationError(f"Classes annotées inconnues: {sorted(annotated - ALL_TISSUES)}")
        present = set(np.unique(classes).tolist())
        if Tissue.IMAT not in annotated and Tissue.IMAT in present:
            raise ConfigurationError("Pixels IMAT présents alors que l'IMAT n'est pas annotée")
        classes = classes.astype(np.uint8)
        classes.setflags(write=False)
        object.__setattr__(self, 'classes', classes)
        object.__setattr__(self, 'annotated_classes', annotated)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.classes.shape

    def mask(self, tissue: int) -> np.ndarray:
        return self.classes == int(tissue)

    def without_imat(self) -> 'LabelMap':
        """Fusionne l'IMAT dans le muscle (annotation IMAT absente)"""
        merged = np.where(self.classes == Tissue.IMAT, Tissue.MUSCLE, self.classes)
        return LabelMap(merged, self.annotated_classes - {int(Tissue.IMAT)}, self.spacing)


class TissueTask(Enum):
    """Tâches de segmentation: 2, 4 ou 5 tissus (plus le fond)"""
    TWO_TISSUE = "two_tissue"
    FOUR_TISSUE = "four_tissue"
    FIVE_TISSUE = "five_tissue"

    @property
    def tissues(self) -> Tuple[Tissue, ...]:
        """Tissu d'origine représenté par chaque classe de la tâche"""
        return _TASK_TISSUES[self]

    @property
    def num_classes(self) -> int:
        return len(self.tissues)

    @property
    def required_annotations(self) -> FrozenSet[int]:
        return frozenset(int(t) for t in self.tissues)

    @classmethod
    def for_classes(cls, num_classes: int) -> 'TissueTask':
        for task in cls:
            if task.num_classes == num_classes:
                return task
        raise ConfigurationError(f"Aucune tâche pour {num_classes} classes (attendu 3, 5 ou 6)")

    @classmethod
    def parse(cls, name: str) -> 'TissueTask':
        try:
            return cls(name)
        except ValueError:
            choices = ', '.join(t.value for t in cls)
            raise ConfigurationError(f"Tâche inconnue: {name!r} (choix: {choices})") from None

    def encode(self, labels) -> np.ndarray:
        """Identifiants de tissus -> classes de la tâche (IGNORE_LABEL conservé)"""
        array = labels.classes if isinstance(labels, LabelMap) else np.asarray(labels)
        lookup = np.full(256, -1, dtype=np.int16)
        lookup[IGNORE_LABEL] = IGNORE_LABEL
        for tissue, target in _TASK_FOLDING[self].items():
            lookup[int(tissue)] = target
        encoded = lookup[array.astype(np.uint8)]
        if (encoded < 0).any():
            bad = int(array[encoded < 0].flat[0])
            raise ConfigurationError(f"Classe {bad} présente dans les étiquettes mais absente de la tâche {self.value}")
        return encoded.astype(np.uint8)

    def decode(self, classes) -> np.ndarray:
        """Classes de la tâche -> identifiants de tissus"""
        classes = np.asarray(classes)
        if classes.size and classes.max() >= self.num_classes:
            raise ConfigurationError(
                f"Classe {int(classes.max())} hors de la tâche {self.value} ({self.num_classes} classes)"
            )
        table = np.array([int(t) for t in self.tissues], dtype=np.uint8)
        return table[classes]


_TASK_TISSUES = {
    TissueTask.TWO_TISSUE: (Tissue.BACKGROUND, Tissue.MUSCLE, Tissue.FAT),
    TissueTask.FOUR_TISSUE: (Tissue.BACKGROUND, Tissue.MUSCLE, Tissue.FAT, Tissue.BONE, Tissue.MARROW),
    TissueTask.FIVE_TISSUE: tuple(Tissue),
}

_TASK_FOLDING: Dict[TissueTask, Dict[Tissue, int]] = {
    TissueTask.TWO_TISSUE: {
        Tissue.BACKGROUND: 0, Tissue.MUSCLE: 1, Tissue.FAT: 2,
        Tissue.IMAT: 1, Tissue.BONE: 0, Tissue.MARROW: 0,
    },
    TissueTask.FOUR_TISSUE: {
        Tissue.BACKGROUND: 0, Tissue.MUSCLE: 1, Tissue.FAT: 2,
        Tissue.IMAT: 1, Tissue.BONE: 3, Tissue.MARROW: 4,
    },
    TissueTask.FIVE_TISSUE: {t: int(t) for t in Tissue},
}


def tissue_areas(labels, spacing: Optional[Spacing] = None) -> Dict[Tissue, float]:
    """Surface de chaque tissu en mm²

    Args:
        labels: LabelMap ou tableau d'identifiants de tissus
        spacing: Taille du pixel (mm); par défaut celle de la LabelMap

    Returns:
        Dict Tissue -> surface en mm²
    """
    if isinstance(labels, LabelMap):
        spacing = spacing or labels.spacing
        labels = labels.classes
    spacing = spacing or (1.0, 1.0)
    pixel_area = float(spacing[0]) * float(spacing[1])
    counts = np.bincount(np.asarray(labels).reshape(-1), minlength=len(Tissue))
    return {tissue: float(counts[int(tissue)]) * pixel_area for tissue in Tissue}
