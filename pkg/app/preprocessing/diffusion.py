"""Débruitage par diffusion anisotrope (Perona-Malik)"""
import logging
from typing import Optional

import numpy as np
from tqdm import trange

from app.core.errors import ConfigurationError, NoForegroundError
from app.data.images import GrayImage
from app.preprocessing.foreground import foreground_mask

logger = logging.getLogger(__name__)

MAD_TO_SIGMA = 1.4826


def conductance(gradient: np.ndarray, kappa: float) -> np.ndarray:
    """Conductance exponentielle g = exp(-(∇/κ)²)"""
    with np.errstate(over='ignore', divide='ignore', invalid='ignore'):
        return np.exp(-np.square(gradient / kappa))


def estimate_kappa(pixels: np.ndarray) -> float:
    """κ = 2 × 1.4826 × médiane des écarts absolus entre voisins (avant-plan)"""
    pixels = np.asarray(pixels, dtype=np.float64)
    try:
        mask = foreground_mask(pixels)
    except NoForegroundError:
        mask = np.ones(pixels.shape, dtype=bool)
    diffs = np.concatenate([
        np.abs(np.diff(pixels, axis=0))[mask[1:, :] & mask[:-1, :]],
        np.abs(np.diff(pixels, axis=1))[mask[:, 1:] & mask[:, :-1]],
    ])
    if diffs.size == 0:
        return 0.0
    return float(2.0 * MAD_TO_SIGMA * np.median(diffs))


def denoise_diffusion(img: GrayImage, iterations: int = 10, kappa: Optional[float] = None,
                      lam: float = 0.2, progress: bool = False) -> GrayImage:
    """Diffusion de Perona-Malik à 4 voisins, bords répliqués

    Args:
        img: Image à débruiter
        iterations: Nombre d'itérations (0 = identité)
        kappa: Seuil de gradient; None pour une estimation robuste du bruit
        lam: Pas de temps, dans (0, 0.25]
        progress: Affiche une barre de progression

    Returns:
        Image débruitée
    """
    if not 0.0 < lam <= 0.25:
        raise ConfigurationError(f"Pas de diffusion instable: lambda={lam} (attendu dans (0, 0.25])")
    if iterations < 0:
        raise ConfigurationError(f"iterations doit être >= 0 (reçu {iterations})")
    if kappa is not None and kappa <= 0:
        raise ConfigurationError(f"kappa doit être > 0 (reçu {kappa})")
    if iterations == 0:
        return img

    u = img.pixels.astype(np.float64)
    if kappa is None:
        kappa = estimate_kappa(u)
        logger.info(f"κ de diffusion estimé: {kappa:.4g}")
    kappa = max(kappa, 1e-12)

    steps = trange(iterations, desc="Diffusion", leave=False) if progress else range(iterations)
    for _ in steps:
        padded = np.pad(u, 1, mode='edge')
        flux = np.zeros_like(u)
        for neighbour in (padded[:-2, 1:-1], padded[2:, 1:-1], padded[1:-1, :-2], padded[1:-1, 2:]):
            delta = neighbour - u
            flux += conductance(delta, kappa) * delta
        u = u + lam * flux

    return img.with_pixels(np.clip(u, 0.0, None).astype(np.float32))
