"""Validation croisée à k plis par sujet"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from app.core.checkpoint import Checkpoint
from app.core.networks import ModelConfig
from app.data.dataset import Dataset, FoldSplit, SplitPlan, make_splits
from app.data.images import TissueTask
from app.features.evaluation import Evaluation, evaluate_checkpoint
from app.features.training import Hyperparams, train_supervised
from app.intelligence.history_manager import RunHistory
from app.intelligence.metrics import MetricsReport, aggregate_reports
from app.utils.hashing import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class FoldResult:
    fold: int
    seed: int
    checkpoint: Checkpoint
    history: RunHistory
    evaluation: Evaluation

    @property
    def report(self) -> MetricsReport:
        return self.evaluation.report


@dataclass
class CrossValidationResult:
    plan: SplitPlan
    folds: List[FoldResult]

    @property
    def reports(self) -> List[MetricsReport]:
        return [f.report for f in self.folds]

    @property
    def aggregate(self) -> Dict[int, Dict[str, Tuple[Optional[float], Optional[float]]]]:
        """Moyenne ± écart-type par tissu et par métrique"""
        return aggregate_reports(self.reports)


def fold_seed(base_seed: int, fold: int) -> int:
    return derive_seed(base_seed, fold)


def run_fold(config: ModelConfig, data: Dataset, split: FoldSplit, hp: Hyperparams,
             task: Optional[TissueTask] = None) -> FoldResult:
    """Entraîne puis évalue un pli, avec une graine dérivée de (graine, pli)"""
    seed = fold_seed(hp.seed, split.fold)
    checkpoint, history = train_supervised(config, data, split, hp.with_overrides(seed=seed), task)
    evaluation = evaluate_checkpoint(checkpoint, data, split.test, fold=split.fold)
    logger.info(f"Pli {split.fold}: Dice moyen test {evaluation.report.mean_dice()}")
    return FoldResult(split.fold, seed, checkpoint, history, evaluation)


def cross_validate(config: ModelConfig, data: Dataset, hp: Hyperparams, k: int = 5,
                   ratios: Sequence[float] = (70, 10, 20), task: Optional[TissueTask] = None,
                   workers: int = 1) -> CrossValidationResult:
    """Un entraînement indépendant par pli, chaque sujet testé exactement une fois

    Args:
        config: Configuration du modèle
        data: Corpus prétraité
        hp: Hyperparamètres (hp.seed fixe le découpage et les graines des plis)
        k: Nombre de plis
        ratios: Ratios train/validation/test
        task: Tâche de segmentation
        workers: Plis entraînés en parallèle

    Returns:
        CrossValidationResult
    """
    plan = make_splits(data.subjects, ratios, k=k, seed=hp.seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            folds = list(pool.map(lambda split: run_fold(config, data, split, hp, task), plan.folds))
    else:
        folds = [run_fold(config, data, split, hp, task) for split in plan.folds]
    return CrossValidationResult(plan, folds)
