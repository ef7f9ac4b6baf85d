"""Métriques de segmentation par tissu: Dice, sensibilité, spécificité, HD95"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial import cKDTree

from app.core.errors import ShapeError
from app.data.images import LabelMap, Spacing, Tissue

logger = logging.getLogger(__name__)

REPORT_FIELDS = ['model', 'fold', 'seed', 'class', 'dice', 'sensitivity', 'specificity', 'hd95_mm']
BOXPLOT_FIELDS = ['model', 'subject', 'class', 'metric', 'value']
METRICS = ('dice', 'sensitivity', 'specificity', 'hd95_mm')
HD95_DEFINITION = "HD95: 95e percentile des distances de bord regroupées dans les deux sens"


def _pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"Masques de tailles différentes: {pred.shape} et {gt.shape}")
    return pred, gt


def confusion(pred, gt) -> Tuple[int, int, int, int]:
    """(TP, FP, FN, TN) de deux masques binaires"""
    pred, gt = _pair(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


def dice(pred, gt) -> float:
    """2|P∩G| / (|P|+|G|); deux masques vides -> 1.0"""
    tp, fp, fn, _ = confusion(pred, gt)
    denominator = 2 * tp + fp + fn
    return 1.0 if denominator == 0 else 2.0 * tp / denominator


def sensitivity(pred, gt) -> Optional[float]:
    tp, _, fn, _ = confusion(pred, gt)
    return None if tp + fn == 0 else tp / (tp + fn)


def specificity(pred, gt) -> Optional[float]:
    _, fp, _, tn = confusion(pred, gt)
    return None if tn + fp == 0 else tn / (tn + fp)


def boundary(mask) -> np.ndarray:
    """Pixels du masque dont un 4-voisin est du fond ou hors de l'image"""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def _boundary_points(mask: np.ndarray, spacing: Spacing) -> np.ndarray:
    return np.argwhere(boundary(mask)).astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def hd95(pred, gt, spacing: Spacing = (1.0, 1.0)) -> Optional[float]:
    """Distance de Hausdorff au 95e percentile, en mm

    Les distances des bords de chaque masque vers l'autre sont
    regroupées avant le percentile (interpolation linéaire).

    Args:
        pred: Masque prédit
        gt: Masque de référence
        spacing: Taille du pixel (ligne, colonne) en mm

    Returns:
        HD95 en mm, ou None si un des masques est vide
    """
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    a, b = _boundary_points(pred, spacing), _boundary_points(gt, spacing)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(np.percentile(np.concatenate([d_ab, d_ba]), 95))


@dataclass
class ClassMetrics:
    """Ligne de rapport pour une classe"""
    tissue: int
    dice: Optional[float] = None
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    hd95_mm: Optional[float] = None

    @property
    def name(self) -> str:
        return Tissue(self.tissue).name.lower()

    def value(self, metric: str) -> Optional[float]:
        return getattr(self, metric)


@dataclass
class MetricsReport:
    """Métriques par classe avec les métadonnées d'agrégation"""
    rows: List[ClassMetrics]
    model: str = ''
    fold: Optional[int] = None
    seed: Optional[int] = None
    subject: Optional[str] = None
    extra: Dict = field(default_factory=dict)

    def row(self, tissue: int) -> ClassMetrics:
        for row in self.rows:
            if row.tissue == int(tissue):
                return row
        raise KeyError(f"Classe {tissue} absente du rapport")

    @property
    def mean_hd95(self) -> Optional[float]:
        values = [r.hd95_mm for r in self.rows if r.hd95_mm is not None and r.tissue != Tissue.BACKGROUND]
        return float(np.mean(values)) if values else None

    def mean_dice(self, exclude_background: bool = True) -> Optional[float]:
        values = [r.dice for r in self.rows
                  if r.dice is not None and not (exclude_background and r.tissue == Tissue.BACKGROUND)]
        return float(np.mean(values)) if values else None

    def to_rows(self) -> List[Dict]:
        return [{
            'model': self.model, 'fold': '' if self.fold is None else self.fold,
            'seed': '' if self.seed is None else self.seed, 'class': r.name,
            **{m: _fmt(r.value(m)) for m in METRICS},
        } for r in self.rows]


def _fmt(value: Optional[float]) -> str:
    return '' if value is None else f"{value:.6f}"


def per_class_report(pred: LabelMap, gt: LabelMap, classes: Optional[Iterable[int]] = None,
                     spacing: Optional[Spacing] = None, **metadata) -> MetricsReport:
    """Métriques un-contre-tous pour chaque classe demandée

    Les classes non annotées dans gt donnent une ligne vide.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"Cartes de tailles différentes: {pred.shape} et {gt.shape}")
    spacing = spacing or gt.spacing
    classes = sorted(int(c) for c in (classes if classes is not None else gt.annotated_classes))
    rows = []
    for tissue in classes:
        if tissue not in gt.annotated_classes:
            rows.append(ClassMetrics(tissue))
            continue
        p, g = pred.mask(tissue), gt.mask(tissue)
        rows.append(ClassMetrics(tissue, dice(p, g), sensitivity(p, g), specificity(p, g), hd95(p, g, spacing)))
    return MetricsReport(rows, **metadata)


def pool_label_maps(maps: Sequence[LabelMap]) -> LabelMap:
    """Empile plusieurs coupes de même taille en une seule carte (pour l'évaluation globale)"""
    annotated = frozenset.intersection(*(m.annotated_classes for m in maps))
    return LabelMap(np.concatenate([m.classes for m in maps], axis=0), annotated, maps[0].spacing)


def evaluate_pairs(pairs: Sequence[Tuple[LabelMap, LabelMap]], classes: Iterable[int], **metadata) -> MetricsReport:
    """Dice/sensibilité/spécificité sur les pixels regroupés; HD95 moyenné par coupe"""
    classes = list(classes)
    preds = [p for p, _ in pairs]
    gts = [g for _, g in pairs]
    pooled = per_class_report(pool_label_maps(preds), pool_label_maps(gts), classes, **metadata)
    for row in pooled.rows:
        if row.dice is None:
            continue
        per_slice = [hd95(p.mask(row.tissue), g.mask(row.tissue), g.spacing) for p, g in pairs]
        per_slice = [v for v in per_slice if v is not None]
        row.hd95_mm = float(np.mean(per_slice)) if per_slice else None
    return pooled


def aggregate_reports(reports: Sequence[MetricsReport]) -> Dict[int, Dict[str, Tuple[Optional[float], Optional[float]]]]:
    """Moyenne ± écart-type (ddof=0) de chaque métrique par classe, valeurs None exclues"""
    aggregate: Dict[int, Dict[str, Tuple[Optional[float], Optional[float]]]] = {}
    tissues = sorted({r.tissue for report in reports for r in report.rows})
    for tissue in tissues:
        aggregate[tissue] = {}
        for metric in METRICS:
            values = [rep.row(tissue).value(metric) for rep in reports
                      if any(r.tissue == tissue for r in rep.rows)]
            values = [v for v in values if v is not None]
            if values:
                aggregate[tissue][metric] = (float(np.mean(values)), float(np.std(values)))
            else:
                aggregate[tissue][metric] = (None, None)
    return aggregate


def write_report_csv(path: Union[str, Path], reports: Sequence[MetricsReport]) -> Path:
    """Export CSV: une ligne par (rapport, classe)"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for report in reports:
            writer.writerows(report.to_rows())
    logger.info(f"Rapport écrit: {path} ({HD95_DEFINITION})")
    return path


def write_aggregate_csv(path: Union[str, Path], reports: Sequence[MetricsReport], model: str = '') -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(['model', 'class', 'metric', 'mean', 'std', 'n_folds'])
        for tissue, metrics in aggregate_reports(reports).items():
            for metric, (mean, std) in metrics.items():
                writer.writerow([model, Tissue(tissue).name.lower(), metric, _fmt(mean), _fmt(std), len(reports)])
    return path


def write_boxplot_csv(path: Union[str, Path], reports: Sequence[MetricsReport]) -> Path:
    """Une ligne par (sujet, classe, métrique), pour les boîtes à moustaches"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=BOXPLOT_FIELDS)
        writer.writeheader()
        for report in reports:
            for row in report.rows:
                for metric in METRICS:
                    writer.writerow({'model': report.model, 'subject': report.subject or '',
                                     'class': row.name, 'metric': metric, 'value': _fmt(row.value(metric))})
    return path

