"""Chaîne de prétraitement: biais -> débruitage -> standardisation, par contraste"""
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.core.errors import ConfigurationError
from app.data.dataset import Dataset
from app.data.images import CONTRASTS, MultiContrastSlice
from app.preprocessing.bias_field import correct_bias, estimate_bias_field
from app.preprocessing.diffusion import denoise_diffusion
from app.preprocessing.standardization import StandardScale, standardize, train_scale

logger = logging.getLogger(__name__)

STAGES = ('bias', 'denoise', 'standardize')


@dataclass(frozen=True)
class PreprocessParams:
    """Paramètres des trois étapes"""
    bias_correction: bool = True
    bias_iterations: int = 50
    control_spacing: float = 16.0
    histogram_bins: int = 200
    fwhm: float = 0.15
    wiener_noise: float = 0.01
    denoise: bool = True
    diffusion_iterations: int = 10
    kappa: Optional[float] = None
    diffusion_lambda: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.diffusion_lambda <= 0.25:
            raise ConfigurationError(f"diffusion_lambda doit être dans (0, 0.25] (reçu {self.diffusion_lambda})")
        if self.bias_iterations < 0 or self.diffusion_iterations < 0:
            raise ConfigurationError("Les nombres d'itérations doivent être >= 0")

    def to_dict(self) -> Dict:
        return asdict(self)


def correct_and_denoise(image: MultiContrastSlice, params: PreprocessParams) -> MultiContrastSlice:
    """Étapes 1 et 2 sur chaque contraste"""
    current = image
    if params.bias_correction:
        channels = []
        for name, channel in zip(CONTRASTS, current.channels):
            field = estimate_bias_field(channel, params.bias_iterations, params.control_spacing,
                                        params.histogram_bins, params.fwhm, params.wiener_noise)
            channels.append(correct_bias(channel, field))
            logger.debug(f"{image.subject_id}/{image.slice_index} {name}: biais corrigé")
        current = current.with_channels(channels, 'bias')
    if params.denoise:
        channels = []
        for name, channel in zip(CONTRASTS, current.channels):
            channels.append(denoise_diffusion(channel, params.diffusion_iterations,
                                              params.kappa, params.diffusion_lambda))
            logger.debug(f"{image.subject_id}/{image.slice_index} {name}: débruité")
        current = current.with_channels(channels, 'denoise')
    return current


def apply_scales(image: MultiContrastSlice, scales: Sequence[StandardScale]) -> MultiContrastSlice:
    """Étape 3: standardisation de chaque contraste par son échelle"""
    if len(scales) != len(CONTRASTS):
        raise ConfigurationError(f"Une échelle par contraste attendue ({len(CONTRASTS)}), reçu {len(scales)}")
    channels = [standardize(channel, scale) for channel, scale in zip(image.channels, scales)]
    return image.with_channels(channels, 'standardize')


def preprocess_pipeline(image: MultiContrastSlice, scales: Sequence[StandardScale],
                        params: Optional[PreprocessParams] = None) -> MultiContrastSlice:
    """Biais -> débruitage -> standardisation (ordre fixe, tracé dans image.processing)

    Args:
        image: Coupe brute
        scales: Une échelle par contraste, apprise sur le pli d'entraînement
        params: Paramètres des étapes

    Returns:
        Coupe prétraitée
    """
    params = params or PreprocessParams()
    return apply_scales(correct_and_denoise(image, params), scales)


def train_scales(images: Sequence[MultiContrastSlice]) -> List[StandardScale]:
    """Une échelle par contraste, à partir de coupes déjà corrigées et débruitées"""
    subjects = {img.subject_id for img in images}
    return [train_scale([img.channels[c] for img in images], subjects) for c in range(len(CONTRASTS))]


def _deciles(image: MultiContrastSlice) -> List[float]:
    return [float(v) for c in image.channels for v in np.percentile(c.pixels, (10, 50, 90))]


def preprocess_dataset(dataset: Dataset, train_subjects: Iterable[str],
                       params: Optional[PreprocessParams] = None
                       ) -> Tuple[Dataset, List[StandardScale], List[Dict]]:
    """Prétraite tout le corpus avec des échelles apprises sur les sujets d'entraînement

    Returns:
        Tuple (corpus prétraité, échelles par contraste, lignes de contrôle qualité)
    """
    params = params or PreprocessParams()
    train_subjects = set(train_subjects)
    if not train_subjects:
        raise ConfigurationError("Aucun sujet d'entraînement pour apprendre les échelles")

    stage2 = {record.key: correct_and_denoise(record.image, params) for record in dataset}
    scales = train_scales([img for key, img in stage2.items() if key[0] in train_subjects])
    for scale in scales:
        scale.check_provenance(train_subjects)

    records, qc_rows = [], []
    for record in dataset:
        processed = apply_scales(stage2[record.key], scales)
        before, after = _deciles(record.image), _deciles(processed)
        row = {'subject_id': record.subject_id, 'slice_index': record.image.slice_index,
               'stages': '>'.join(processed.processing)}
        for c, name in enumerate(CONTRASTS):
            for j, p in enumerate((10, 50, 90)):
                row[f"{name}_p{p}_before"] = round(before[3 * c + j], 4)
                row[f"{name}_p{p}_after"] = round(after[3 * c + j], 4)
        qc_rows.append(row)
        records.append(record.with_image(processed))

    logger.info(f"Prétraitement terminé: {len(records)} coupes, échelles apprises sur {len(train_subjects)} sujets")
    return Dataset(records), scales, qc_rows
