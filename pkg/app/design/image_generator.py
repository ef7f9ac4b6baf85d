"""Générateur d'images de contrôle: superpositions couleur (PPM) et niveaux de gris (PGM)"""
from pathlib import Path
from typing import Optional, Sequence, Union
import logging

import numpy as np
from PIL import Image

from app.data.images import GrayImage, LabelMap, MultiContrastSlice
from app.design.color_palette import TissuePalette

logger = logging.getLogger(__name__)


class ImageGenerator:
    """Rendu des coupes et des segmentations au format pixmap portable"""

    DEFAULT_ALPHA = 0.5
    GAP = 2

    def __init__(self, palette: Optional[TissuePalette] = None, alpha: float = DEFAULT_ALPHA):
        """Initialise le générateur

        Args:
            palette: Palette des tissus
            alpha: Opacité des étiquettes sur l'image (0 = image seule, 1 = étiquettes seules)
        """
        self.palette = palette or TissuePalette()
        self.alpha = float(np.clip(alpha, 0.0, 1.0))

    @staticmethod
    def to_gray(image: GrayImage) -> Image.Image:
        """Image en niveaux de gris 8 bits (min-max sur la coupe)"""
        pixels = image.pixels.astype(np.float64)
        span = pixels.max() - pixels.min()
        scaled = (pixels - pixels.min()) / span if span > 0 else np.zeros_like(pixels)
        return Image.fromarray(np.round(scaled * 255).astype(np.uint8))

    def overlay(self, image: MultiContrastSlice, labels: LabelMap, contrast: int = 0) -> Image.Image:
        """Étiquettes colorées sur un contraste; le fond reste en niveaux de gris

        Returns:
            Image RGB de la taille de la coupe
        """
        gray = np.asarray(self.to_gray(image.channels[contrast]), dtype=np.float64)
        base = np.repeat(gray[..., None], 3, axis=2)
        colors = self.palette.colorize(labels).astype(np.float64)
        tissue = (labels.classes != 0)[..., None]
        blended = np.where(tissue, (1 - self.alpha) * base + self.alpha * colors, base)
        return Image.fromarray(np.round(blended).astype(np.uint8))

    def panel(self, image: MultiContrastSlice, truth: LabelMap, prediction: LabelMap) -> Image.Image:
        """Trois contrastes, vérité terrain puis prédiction, côte à côte"""
        tiles = [self.to_gray(c).convert('RGB') for c in image.channels]
        tiles.append(Image.fromarray(self.palette.colorize(truth)))
        tiles.append(Image.fromarray(self.palette.colorize(prediction)))
        width = sum(t.width for t in tiles) + self.GAP * (len(tiles) - 1)
        canvas = Image.new('RGB', (width, image.shape[0]), (255, 255, 255))
        x = 0
        for tile in tiles:
            canvas.paste(tile, (x, 0))
            x += tile.width + self.GAP
        return canvas

    def save_image(self, img: Image.Image, output_path: Union[str, Path]) -> Path:
        """Enregistre en PPM (RGB) ou PGM (L) selon le mode de l'image"""
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        img.save(output_path, format='PPM')
        logger.debug(f"Image sauvegardée: {output_path}")
        return output_path

    def save_overlays(self, out_dir: Union[str, Path], stem: str, image: MultiContrastSlice,
                      truth: LabelMap, prediction: LabelMap) -> Sequence[Path]:
        out_dir = Path(out_dir)
        return [
            self.save_image(self.overlay(image, truth), out_dir / f"{stem}_gt.ppm"),
            self.save_image(self.overlay(image, prediction), out_dir / f"{stem}_pred.ppm"),
            self.save_image(self.panel(image, truth, prediction), out_dir / f"{stem}_panel.ppm"),
        ]

    def save_contrasts(self, out_dir: Union[str, Path], stem: str, image: MultiContrastSlice) -> Sequence[Path]:
        """Un fichier PGM par contraste (contrôle qualité du prétraitement)"""
        out_dir = Path(out_dir)
        return [self.save_image(self.to_gray(channel), out_dir / f"{stem}_c{i}.pgm")
                for i, channel in enumerate(image.channels)]
