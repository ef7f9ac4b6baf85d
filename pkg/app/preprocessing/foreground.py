"""Masque d'avant-plan (seuil d'Otsu)"""
import numpy as np
from skimage.filters import threshold_otsu

from app.core.errors import NoForegroundError


def foreground_mask(pixels: np.ndarray) -> np.ndarray:
    """Pixels au-dessus du seuil d'Otsu de la coupe

    Une image constante non nulle est entièrement d'avant-plan.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    if not np.any(pixels > 0):
        raise NoForegroundError("Image sans pixel d'avant-plan (toutes les intensités sont nulles)")
    if pixels.min() == pixels.max():
        return pixels > 0
    return pixels > threshold_otsu(pixels)
