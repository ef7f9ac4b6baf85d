"""Auto-apprentissage en trois étapes: experts -> pseudo-annotations -> ré-entraînement"""
import logging
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from app.core.checkpoint import Checkpoint
from app.core.errors import ConfigurationError, ProtocolError
from app.core.networks import Model, ModelConfig, build_model, predict_labels
from app.data.dataset import Dataset, FoldSplit, make_splits
from app.data.images import TissueTask
from app.features.evaluation import Evaluation, evaluate_checkpoint
from app.features.training import Hyperparams, train_supervised
from app.intelligence.history_manager import RunHistory
from app.utils.hashing import derive_seed, parameter_hash

logger = logging.getLogger(__name__)


def pseudo_label(checkpoint: Union[Checkpoint, Model], unlabeled: Dataset) -> Dataset:
    """Annote chaque coupe avec la prédiction du modèle (provenance pseudo)

    Args:
        checkpoint: Modèle à 6 classes, ou son point de sauvegarde
        unlabeled: Coupes sans annotation IMAT

    Returns:
        Dataset des mêmes coupes avec pseudo-annotation
    """
    if len(unlabeled) == 0:
        logger.warning("Aucune coupe à pseudo-annoter")
        return unlabeled
    model = checkpoint.to_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    if TissueTask.for_classes(model.config.num_classes) is not TissueTask.FIVE_TISSUE:
        raise ConfigurationError(
            f"Pseudo-annotation impossible: {model.config.num_classes} classes (6 attendues)"
        )
    records = [record.with_pseudo_label(predict_labels(model, record.image)) for record in unlabeled]
    logger.info(f"Pseudo-annotation: {len(records)} coupes")
    return Dataset(records)


@dataclass
class SelfTrainingResult:
    """Modèles des étapes 1 et 3 évalués sur les mêmes sujets de test"""
    checkpoint: Checkpoint
    history: RunHistory
    evaluation: Evaluation
    step1_checkpoint: Checkpoint
    step1_history: RunHistory
    step1_evaluation: Evaluation
    merged: Dataset
    split: FoldSplit
    step3_initial_hash: str

    @property
    def report(self):
        return self.evaluation.report

    @property
    def step1_report(self):
        return self.step1_evaluation.report


def self_train(config: ModelConfig, data: Dataset, hp: Hyperparams,
               ratios: Sequence[float] = (70, 10, 20),
               step1_ratios: Sequence[float] = (90, 10)) -> SelfTrainingResult:
    """Protocole semi-supervisé complet

    Les sujets de test du découpage final sont tirés en premier et exclus
    des étapes 1 et 2.

    Args:
        config: Configuration à 6 classes
        data: Corpus prétraité (annotation IMAT partielle)
        hp: Hyperparamètres communs aux deux entraînements
        ratios: Découpage train/validation/test de l'étape 3
        step1_ratios: Découpage train/validation de l'étape 1

    Returns:
        SelfTrainingResult
    """
    if config.num_classes != TissueTask.FIVE_TISSUE.num_classes:
        raise ConfigurationError(f"L'auto-apprentissage demande 6 classes (reçu {config.num_classes})")
    task = TissueTask.FIVE_TISSUE
    final = make_splits(data.subjects, ratios, k=1, seed=hp.seed).fold(0)
    test = set(final.test)

    experts = [s for s in data.imat_labeled_subjects() if s not in test]
    unlabeled = [s for s in data.imat_unlabeled_subjects() if s not in test]
    if not experts:
        raise ProtocolError("Aucun sujet avec annotation IMAT experte hors du test")
    if not unlabeled:
        logger.warning("Aucun sujet sans annotation IMAT: l'étape 2 ne produira rien")

    # Étape 1
    step1_split = make_splits(experts, step1_ratios, k=1, seed=hp.seed).fold(0)
    step1_hp = hp.with_overrides(seed=derive_seed(hp.seed, 'step1'))
    step1_ckpt, step1_history = train_supervised(config, data, step1_split, step1_hp, task)
    logger.info(f"Étape 1: {len(step1_split.train)} sujets experts, meilleur Dice val "
                f"{max(step1_history.val_dice):.4f}")

    # Étape 2
    pseudo = pseudo_label(step1_ckpt, data.subset(unlabeled))

    # Étape 3
    merged = Dataset(list(data.subset(experts)) + list(pseudo))
    step3_split = FoldSplit(0, tuple(s for s in final.train if s in set(merged.subjects)),
                            tuple(s for s in final.validation if s in set(merged.subjects)), final.test)
    step3_hp = hp.with_overrides(seed=derive_seed(hp.seed, 'step3'))
    initial_hash = parameter_hash(build_model(config, np.random.default_rng(step3_hp.seed)))
    checkpoint, history = train_supervised(config, merged, step3_split, step3_hp, task)
    logger.info(f"Étape 3: {merged.summary()}")

    evaluation = evaluate_checkpoint(checkpoint, data, final.test)
    step1_evaluation = evaluate_checkpoint(step1_ckpt, data, final.test)
    logger.info(f"IMAT test: étape 1 {step1_evaluation.report.row(3).dice}, "
                f"étape 3 {evaluation.report.row(3).dice}")
    return SelfTrainingResult(checkpoint, history, evaluation, step1_ckpt, step1_history,
                              step1_evaluation, merged, step3_split, initial_hash)
