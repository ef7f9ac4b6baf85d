"""Palette de couleurs des tissus pour les superpositions"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np

from app.data.images import LabelMap, Tissue

logger = logging.getLogger(__name__)

RGB = Tuple[int, int, int]


@dataclass(frozen=True)
class TissueColor:
    """Couleur d'affichage d'un tissu"""
    tissue: Tissue
    rgb: RGB
    name: str

    @property
    def hex(self) -> str:
        return '#{:02X}{:02X}{:02X}'.format(*self.rgb)

    def __repr__(self) -> str:
        return f"TissueColor({self.tissue.name.lower()}: {self.name} {self.hex})"


class TissuePalette:
    """Correspondance tissu -> couleur RGB

    Graisse en bleu, muscle en vert, os en orange, moelle en marron et IMAT en rouge.
    """

    DEFAULT_COLORS = {
        Tissue.BACKGROUND: TissueColor(Tissue.BACKGROUND, (0, 0, 0), 'Noir'),
        Tissue.MUSCLE: TissueColor(Tissue.MUSCLE, (0, 176, 80), 'Vert'),
        Tissue.FAT: TissueColor(Tissue.FAT, (0, 112, 255), 'Bleu'),
        Tissue.IMAT: TissueColor(Tissue.IMAT, (230, 25, 25), 'Rouge'),
        Tissue.BONE: TissueColor(Tissue.BONE, (255, 153, 0), 'Orange'),
        Tissue.MARROW: TissueColor(Tissue.MARROW, (139, 69, 19), 'Marron'),
    }

    def __init__(self, overrides: Optional[Dict[Tissue, RGB]] = None):
        self.colors = dict(self.DEFAULT_COLORS)
        for tissue, rgb in (overrides or {}).items():
            tissue = Tissue(tissue)
            self.colors[tissue] = TissueColor(tissue, tuple(int(c) for c in rgb), 'Personnalisée')
        logger.debug(f"Palette de tissus: {list(self.colors.values())}")

    def color_for(self, tissue: int) -> TissueColor:
        return self.colors[Tissue(int(tissue))]

    def lookup_table(self) -> np.ndarray:
        """Table [256, 3] uint8 indexée par identifiant de tissu"""
        table = np.zeros((256, 3), dtype=np.uint8)
        for tissue, color in self.colors.items():
            table[int(tissue)] = color.rgb
        return table

    def colorize(self, labels) -> np.ndarray:
        """Carte d'étiquettes -> image RGB [H, W, 3]"""
        classes = labels.classes if isinstance(labels, LabelMap) else np.asarray(labels, dtype=np.uint8)
        return self.lookup_table()[classes]

    def legend(self) -> List[Tuple[str, str]]:
        return [(tissue.name.lower(), color.hex) for tissue, color in sorted(self.colors.items())]
