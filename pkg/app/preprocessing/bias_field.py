"""Correction du champ de biais multiplicatif (schéma itératif de type N4)"""
import logging
from typing import Tuple

import numpy as np
from scipy.interpolate import BSpline

from app.core.errors import ConfigurationError, ShapeError
from app.data.images import GrayImage
from app.preprocessing.foreground import foreground_mask

logger = logging.getLogger(__name__)

SPLINE_ORDER = 3


def _axis_design(length: int, spacing: float) -> np.ndarray:
    """Matrice de conception B-spline cubique sur un axe de `length` pixels"""
    intervals = max(1, int(round((length - 1) / spacing)))
    x = np.arange(length, dtype=np.float64)
    interior = np.linspace(0.0, length - 1.0, intervals + 1)
    knots = np.concatenate([[0.0] * SPLINE_ORDER, interior, [length - 1.0] * SPLINE_ORDER])
    return BSpline.design_matrix(x, knots, SPLINE_ORDER).toarray()


def spline_basis(shape: Tuple[int, int], spacing: float) -> np.ndarray:
    """Base tensorielle 2D, une ligne par pixel (ordre ligne)"""
    rows = _axis_design(shape[0], spacing)
    cols = _axis_design(shape[1], spacing)
    return np.kron(rows, cols)


def _gaussian_kernel(n: int, sigma_bins: float) -> np.ndarray:
    offsets = np.minimum(np.arange(n), n - np.arange(n))
    kernel = np.exp(-0.5 * (offsets / sigma_bins) ** 2)
    return kernel / kernel.sum()


def sharpen_histogram(values: np.ndarray, bins: int = 200, fwhm: float = 0.15,
                      wiener_noise: float = 0.01) -> np.ndarray:
    """Affine la distribution des log-intensités par déconvolution de Wiener

    Retourne, pour chaque valeur, l'espérance de la valeur non biaisée
    sachant la valeur observée.
    """
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return values.copy()
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    width = edges[1] - edges[0]

    size = int(2 ** np.ceil(np.log2(2 * bins)))
    offset = (size - bins) // 2
    padded = np.zeros(size)
    padded[offset:offset + bins] = hist / hist.sum()
    centers = lo + (np.arange(size) - offset + 0.5) * width

    sigma_bins = fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0))) / width
    kernel_f = np.fft.fft(_gaussian_kernel(size, max(sigma_bins, 1e-3)))
    wiener = np.conj(kernel_f) / (np.abs(kernel_f) ** 2 + wiener_noise)
    sharpened = np.clip(np.real(np.fft.ifft(np.fft.fft(padded) * wiener)), 0.0, None)

    numerator = np.real(np.fft.ifft(np.fft.fft(sharpened * centers) * kernel_f))
    denominator = np.real(np.fft.ifft(np.fft.fft(sharpened) * kernel_f))
    safe = denominator > 1e-12 * max(denominator.max(), 1e-300)
    mapping = np.where(safe, numerator / np.where(safe, denominator, 1.0), centers)
    return np.interp(values, centers[offset:offset + bins], mapping[offset:offset + bins])


def estimate_bias_field(img: GrayImage, iterations: int = 50, control_spacing: float = 16.0,
                        bins: int = 200, fwhm: float = 0.15, wiener_noise: float = 0.01,
                        tolerance: float = 1e-4) -> GrayImage:
    """Estime un champ de biais multiplicatif lisse, de moyenne 1 sur l'avant-plan

    À chaque itération, les log-intensités corrigées sont affinées
    (sharpen_histogram) et le résidu est ajusté par une B-spline cubique
    aux moindres carrés sur l'avant-plan.

    Args:
        img: Image à analyser
        iterations: Nombre maximal d'itérations
        control_spacing: Espacement des noeuds de la B-spline (pixels)
        bins: Nombre de classes de l'histogramme
        fwhm: Largeur à mi-hauteur du flou supposé (log-intensités)
        wiener_noise: Terme de régularisation du filtre de Wiener
        tolerance: Arrêt quand la mise à jour RMS du log-champ passe sous ce seuil

    Returns:
        Champ multiplicatif strictement positif
    """
    if iterations < 0:
        raise ConfigurationError(f"iterations doit être >= 0 (reçu {iterations})")
    if control_spacing <= 0:
        raise ConfigurationError(f"control_spacing doit être > 0 (reçu {control_spacing})")
    pixels = img.pixels.astype(np.float64)
    mask = foreground_mask(pixels) & (pixels > 0)
    log_img = np.log(pixels[mask])

    basis = spline_basis(img.shape, control_spacing)
    fg_basis = basis[mask.reshape(-1)]
    gram = fg_basis.T @ fg_basis
    ridge = 1e-6 * np.trace(gram) / gram.shape[0]
    gram += ridge * np.eye(gram.shape[0])

    log_field = np.zeros(mask.sum())
    coef = np.zeros(basis.shape[1])
    for it in range(iterations):
        sharpened = sharpen_histogram(log_img - log_field, bins, fwhm, wiener_noise)
        target = log_img - sharpened
        coef = np.linalg.solve(gram, fg_basis.T @ target)
        updated = fg_basis @ coef
        change = np.sqrt(np.mean((updated - log_field) ** 2))
        log_field = updated
        if change < tolerance:
            logger.debug(f"Champ de biais convergé après {it + 1} itérations")
            break

    field = np.exp(basis @ coef).reshape(img.shape)
    field /= field[mask].mean()
    return GrayImage(field.astype(np.float32), img.spacing)


def correct_bias(img: GrayImage, field: GrayImage) -> GrayImage:
    """Divise l'image par le champ de biais"""
    if img.shape != field.shape:
        raise ShapeError(f"Champ {field.shape} incompatible avec l'image {img.shape}")
    if np.any(field.pixels <= 0):
        raise ConfigurationError("Le champ de biais doit être strictement positif")
    corrected = img.pixels.astype(np.float64) / field.pixels.astype(np.float64)
    return img.with_pixels(corrected.astype(np.float32))


def field_roughness(field: GrayImage) -> float:
    """Gradient relatif maximal du champ (par pixel)"""
    values = field.pixels.astype(np.float64)
    grad_y, grad_x = np.gradient(values)
    return float(np.max(np.hypot(grad_y, grad_x) / values))
