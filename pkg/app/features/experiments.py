"""Expériences comparatives sur fantômes: convergence, contrastes, auto-apprentissage"""
import csv
import logging
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from app.core.dropouts import DropoutVariant
from app.core.networks import ModelConfig
from app.data.dataset import Dataset, make_splits
from app.data.images import CONTRAST_LABELS, Tissue
from app.features.evaluation import evaluate_checkpoint
from app.features.self_training import self_train
from app.features.training import Hyperparams, train_supervised

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (0, 1, 2)
MULTI_CONTRAST = 'Multi-contrast'
CONTRAST_GRID = (((0,), CONTRAST_LABELS[0]), ((1,), CONTRAST_LABELS[1]),
                 ((2,), CONTRAST_LABELS[2]), ((0, 1, 2), MULTI_CONTRAST))


def _fmt(value: Optional[float]) -> str:
    return '' if value is None else f"{value:.6f}"


def convergence_comparison(config: ModelConfig, data: Dataset, hp: Hyperparams,
                           seeds: Sequence[int] = DEFAULT_SEEDS,
                           variants: Sequence[DropoutVariant] = tuple(DropoutVariant)) -> List[Dict]:
    """Époques jusqu'à convergence pour chaque variante de dropout et chaque graine

    Returns:
        Une ligne par (graine, variante)
    """
    rows = []
    for seed in seeds:
        split = make_splits(data.subjects, (70, 10, 20), k=1, seed=seed).fold(0)
        for variant in variants:
            variant_config = config.with_overrides(dropout=replace(config.dropout, variant=variant))
            _, history = train_supervised(variant_config, data, split, hp.with_overrides(seed=seed))
            converged = history.epochs_to_converge
            rows.append({'seed': seed, 'variant': variant.value, 'epochs_to_converge': converged,
                         'epochs_run': len(history), 'best_val_dice': max(history.val_dice)})
            logger.info(f"Convergence {variant.value} (graine {seed}): {converged}")
    return rows


def contrast_ablation(config: ModelConfig, data: Dataset, hp: Hyperparams,
                      seeds: Sequence[int] = DEFAULT_SEEDS,
                      architectures: Sequence[str] = ('tiramisu',)) -> List[Dict]:
    """Contraste unique contre multi-contraste, évalué sur les sujets de test

    Returns:
        Une ligne par (architecture, graine, entrée, tissu) avec Dice, sensibilité et spécificité
    """
    rows = []
    for architecture in architectures:
        for seed in seeds:
            split = make_splits(data.subjects, (70, 10, 20), k=1, seed=seed).fold(0)
            for contrasts, label in CONTRAST_GRID:
                run_config = config.with_overrides(architecture=architecture, contrasts=contrasts)
                checkpoint, _ = train_supervised(run_config, data, split, hp.with_overrides(seed=seed))
                report = evaluate_checkpoint(checkpoint, data, split.test).report
                for row in report.rows:
                    if row.tissue == Tissue.BACKGROUND:
                        continue
                    rows.append({'architecture': architecture, 'seed': seed, 'input': label,
                                 'tissue': row.name, 'dice': row.dice,
                                 'sensitivity': row.sensitivity, 'specificity': row.specificity})
                logger.info(f"Ablation {architecture} {label} (graine {seed}): Dice moyen {report.mean_dice()}")
    return rows


def self_training_benefit(config: ModelConfig, data: Dataset, hp: Hyperparams,
                          seeds: Sequence[int] = DEFAULT_SEEDS) -> List[Dict]:
    """Dice IMAT de test des modèles des étapes 1 et 3, par graine"""
    rows = []
    for seed in seeds:
        result = self_train(config, data, hp.with_overrides(seed=seed))
        step1 = result.step1_report.row(Tissue.IMAT).dice
        step3 = result.report.row(Tissue.IMAT).dice
        improvement = None if step1 is None or step3 is None else step3 - step1
        rows.append({'seed': seed, 'step1_imat_dice': step1, 'step3_imat_dice': step3,
                     'improvement': improvement})
    return rows


def mean_dice_by_input(rows: Sequence[Dict], architecture: str, seed: int) -> Dict[str, float]:
    """Dice moyen sur les tissus, par entrée, pour une architecture et une graine"""
    means = {}
    for _, label in CONTRAST_GRID:
        values = [r['dice'] for r in rows if r['architecture'] == architecture and r['seed'] == seed
                  and r['input'] == label and r['dice'] is not None]
        if values:
            means[label] = sum(values) / len(values)
    return means


def write_rows_csv(path: Union[str, Path], rows: Sequence[Dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(rows[0]) if rows else []
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(v) if isinstance(v, float) else ('' if v is None else v)
                             for k, v in row.items()})
    return path
