"""Générateur de fantômes de cuisse multi-contrastes"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import binary_erosion

from app.core.errors import ConfigurationError, DegenerateError
from app.data.dataset import Dataset, SliceRecord
from app.data.images import LabelMap, MultiContrastSlice, Tissue

logger = logging.getLogger(__name__)

# Intensités nominales (eau+graisse, graisse supprimée, eau supprimée) par tissu
NOMINAL_INTENSITIES: Tuple[Tuple[float, float, float], ...] = (
    (0.0, 0.0, 0.0),            # fond
    (900.0, 1000.0, 150.0),     # muscle
    (1800.0, 150.0, 1600.0),    # graisse sous-cutanée
    (1500.0, 300.0, 1300.0),    # IMAT
    (200.0, 150.0, 100.0),      # os cortical
    (1700.0, 200.0, 1500.0),    # moelle
)


@dataclass(frozen=True)
class PhantomParams:
    """Paramètres du fantôme

    Les rayons sont exprimés en fraction du quart de la largeur (une cuisse
    occupe une moitié de l'image).
    """
    height: int = 64
    width: int = 64
    spacing: Tuple[float, float] = (1.0, 1.0)
    outer_radius: float = 0.85
    muscle_radius: float = 0.65
    bone_radius: float = 0.22
    marrow_radius: float = 0.12
    radius_jitter: float = 0.06
    imat_blobs: int = 6
    imat_blob_radius: Tuple[float, float] = (0.6, 1.4)
    noise_sigma: float = 30.0
    bias_strength: float = 0.2
    intensities: Tuple[Tuple[float, float, float], ...] = NOMINAL_INTENSITIES

    def __post_init__(self):
        object.__setattr__(self, 'spacing', tuple(float(s) for s in self.spacing))
        object.__setattr__(self, 'imat_blob_radius', tuple(float(r) for r in self.imat_blob_radius))
        object.__setattr__(self, 'intensities', tuple(tuple(float(v) for v in row) for row in self.intensities))
        self.validate()

    def validate(self):
        if self.height < 16 or self.width < 16:
            raise ConfigurationError(f"Image trop petite pour un fantôme: {self.height}x{self.width}")
        radii = (self.marrow_radius, self.bone_radius, self.muscle_radius, self.outer_radius)
        if not 0 < radii[0] < radii[1] < radii[2] < radii[3]:
            raise ConfigurationError(f"Rayons incohérents (moelle < os < muscle < cuisse): {radii}")
        if self.outer_radius * (1 + self.radius_jitter) > 1.0 or 2 * self.height < self.width:
            raise ConfigurationError(
                f"Géométrie impossible: rayon de cuisse {self.outer_radius * self.width / 4:.1f} px "
                f"pour une image {self.height}x{self.width}"
            )
        if not 0 <= self.bias_strength < 1:
            raise ConfigurationError(f"bias_strength doit être dans [0, 1) (reçu {self.bias_strength})")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"noise_sigma doit être >= 0 (reçu {self.noise_sigma})")
        if len(self.intensities) != len(Tissue) or any(len(row) != 3 for row in self.intensities):
            raise ConfigurationError("Table d'intensités: 6 tissus x 3 contrastes attendus")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['spacing'] = list(self.spacing)
        data['imat_blob_radius'] = list(self.imat_blob_radius)
        data['intensities'] = [list(row) for row in self.intensities]
        return data


@dataclass(frozen=True)
class ThighRegions:
    """Disques géométriques d'une cuisse: contour, fascia (muscle) et os"""
    thigh: np.ndarray
    muscle: np.ndarray
    bone: np.ndarray

    @property
    def footprint(self) -> np.ndarray:
        return self.thigh | self.bone


def check_containment(labels: np.ndarray, regions: Sequence[ThighRegions]):
    """Vérifie l'emboîtement des tissus de chaque cuisse

    os ⊂ intérieur de la cuisse, moelle ⊂ os, IMAT ⊂ compartiment musculaire
    (hors os); aucun de ces tissus hors d'une cuisse.

    Raises:
        DegenerateError: si un emboîtement est violé
    """
    labels = np.asarray(labels)
    covered = np.zeros(labels.shape, dtype=bool)
    for side, region in enumerate(regions):
        local = region.footprint
        covered |= local
        if (region.bone & ~binary_erosion(region.thigh)).any():
            raise DegenerateError(f"Cuisse {side}: l'os déborde de l'intérieur de la cuisse")
        if ((labels == Tissue.MARROW) & local & ~region.bone).any():
            raise DegenerateError(f"Cuisse {side}: moelle hors de l'os")
        imat = (labels == Tissue.IMAT) & local
        if (imat & ~region.muscle).any() or (imat & region.bone).any():
            raise DegenerateError(f"Cuisse {side}: IMAT hors du compartiment musculaire")
    nested = np.isin(labels, (int(Tissue.IMAT), int(Tissue.BONE), int(Tissue.MARROW)))
    if (nested & ~covered).any():
        raise DegenerateError("IMAT, os ou moelle hors des cuisses")


def _draw_thigh(labels: np.ndarray, center: Tuple[float, float], params: PhantomParams,
                rng: np.random.Generator) -> ThighRegions:
    quarter = params.width / 4
    jitter = lambda: 1 + rng.uniform(-params.radius_jitter, params.radius_jitter)
    aspect = rng.uniform(0.92, 1.08)
    yy, xx = np.mgrid[0:params.height, 0:params.width].astype(np.float64)
    dy, dx = yy - center[0], (xx - center[1]) * aspect
    dist = np.hypot(dy, dx)

    r_outer = params.outer_radius * quarter * jitter()
    r_muscle = params.muscle_radius * quarter * jitter()
    r_bone = params.bone_radius * quarter * jitter()
    r_marrow = min(params.marrow_radius * quarter * jitter(), r_bone - 0.5)

    # os légèrement décentré
    by, bx = center[0] + rng.uniform(-1, 1), center[1] + rng.uniform(-1, 1)
    bone_dist = np.hypot(yy - by, xx - bx)

    thigh, muscle_region, bone = dist <= r_outer, dist <= r_muscle, bone_dist <= r_bone
    labels[thigh] = Tissue.FAT
    labels[muscle_region] = Tissue.MUSCLE

    for _ in range(params.imat_blobs):
        radius_pos = rng.uniform(r_bone + 1.5, max(r_bone + 1.5, r_muscle - 1.5))
        angle = rng.uniform(0, 2 * np.pi)
        cy = int(round(by + radius_pos * np.sin(angle)))
        cx = int(round(bx + radius_pos * np.cos(angle)))
        blob_r = rng.uniform(*params.imat_blob_radius)
        stretch = rng.uniform(1.0, 2.5)
        theta = rng.uniform(0, np.pi)
        u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        blob = (u / (blob_r * stretch)) ** 2 + (v / blob_r) ** 2 <= 1.0
        blob[np.clip(cy, 0, params.height - 1), np.clip(cx, 0, params.width - 1)] = True
        labels[blob & muscle_region & (bone_dist > r_bone + 0.5)] = Tissue.IMAT

    labels[bone] = Tissue.BONE
    labels[bone_dist <= r_marrow] = Tissue.MARROW
    labels[int(round(by)), int(round(bx))] = Tissue.MARROW
    return ThighRegions(thigh, muscle_region, bone)


def smooth_bias_field(shape: Tuple[int, int], strength: float, rng: np.random.Generator) -> np.ndarray:
    """Champ multiplicatif lisse 1 + s·sin(.)·cos(.); constant à 1 si s = 0"""
    if strength == 0:
        return np.ones(shape, dtype=np.float64)
    height, width = shape
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    fy, fx = rng.uniform(0.5, 1.0, size=2)
    py, px = rng.uniform(0, 2 * np.pi, size=2)
    return 1.0 + strength * np.sin(np.pi * fy * yy / height + py) * np.cos(np.pi * fx * xx / width + px)


def generate_phantom(rng: np.random.Generator, params: Optional[PhantomParams] = None,
                     subject_id: str = 'phantom', slice_index: int = 0
                     ) -> Tuple[MultiContrastSlice, LabelMap]:
    """Génère une coupe de fantôme et sa vérité terrain complète

    Args:
        rng: Générateur numpy
        params: Paramètres du fantôme
        subject_id: Identifiant du sujet
        slice_index: Indice de la coupe

    Returns:
        Tuple (MultiContrastSlice, LabelMap)

    Raises:
        DegenerateError: géométrie trop petite pour emboîter les tissus
    """
    params = params or PhantomParams()
    shape = (params.height, params.width)
    labels = np.zeros(shape, dtype=np.uint8)
    regions = []
    for cx in (params.width / 4, 3 * params.width / 4):
        center = (params.height / 2 + rng.uniform(-1, 1), cx + rng.uniform(-1, 1))
        regions.append(_draw_thigh(labels, center, params, rng))
    check_containment(labels, regions)

    table = np.asarray(params.intensities, dtype=np.float64)
    field = smooth_bias_field(shape, params.bias_strength, rng)
    channels = []
    for c in range(3):
        plane = table[labels, c] * field
        if params.noise_sigma > 0:
            plane = np.clip(plane + rng.normal(0.0, params.noise_sigma, size=shape), 0.0, None)
        channels.append(plane.astype(np.float32))

    image = MultiContrastSlice.from_array(np.stack(channels), subject_id, slice_index, params.spacing)
    return image, LabelMap(labels, spacing=params.spacing)


def make_corpus(rng: np.random.Generator, n_subjects: int = 50, slices_per_subject: int = 3,
                imat_labeled_fraction: float = 0.4, params: Optional[PhantomParams] = None) -> Dataset:
    """Construit un corpus de fantômes à annotation IMAT partielle

    round(fraction·n) sujets gardent l'IMAT annotée; pour les autres, l'IMAT
    est fusionnée dans le muscle et la vérité complète est conservée à part.
    """
    if not 0.0 <= imat_labeled_fraction <= 1.0:
        raise ConfigurationError(f"Fraction IMAT invalide: {imat_labeled_fraction}")
    if n_subjects < 1 or slices_per_subject < 1:
        raise ConfigurationError("Le corpus doit contenir au moins un sujet et une coupe")
    params = params or PhantomParams()

    subject_ids = [f"S{i + 1:03d}" for i in range(n_subjects)]
    n_labeled = int(np.floor(imat_labeled_fraction * n_subjects + 0.5))
    labeled = set(subject_ids[i] for i in rng.permutation(n_subjects)[:n_labeled])

    records = []
    for subject_id in subject_ids:
        subject_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
        for index in range(slices_per_subject):
            image, truth = generate_phantom(subject_rng, params, subject_id, index)
            expert = truth if subject_id in labeled else truth.without_imat()
            records.append(SliceRecord(image, expert_label=expert, truth=truth))

    logger.info(f"Corpus fantôme: {n_subjects} sujets, {len(records)} coupes, {n_labeled} avec IMAT annotée")
    return Dataset(records)
