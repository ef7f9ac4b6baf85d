"""Évaluation d'un modèle sur des sujets de test: rapports, surfaces et superpositions"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple, Union

from app.core.checkpoint import Checkpoint
from app.core.errors import ConfigurationError
from app.core.networks import predict_labels
from app.data.dataset import Dataset, SliceRecord
from app.data.images import LabelMap, Tissue, TissueTask, tissue_areas
from app.design.image_generator import ImageGenerator
from app.intelligence.metrics import MetricsReport, evaluate_pairs, write_boxplot_csv, write_report_csv

logger = logging.getLogger(__name__)

AREA_FIELDS = ['subject', 'slice_index', 'tissue', 'predicted_mm2', 'truth_mm2']


@dataclass
class Evaluation:
    """Résultat d'une évaluation: rapport global, rapports par sujet et prédictions"""
    report: MetricsReport
    per_subject: List[MetricsReport]
    predictions: List[Tuple[SliceRecord, LabelMap, LabelMap]]


def fold_reference(truth: LabelMap, task: TissueTask) -> LabelMap:
    """Ramène une vérité à 6 tissus dans l'espace de la tâche (IMAT -> muscle, etc.)"""
    annotated = truth.annotated_classes & task.required_annotations
    return LabelMap(task.decode(task.encode(truth)), annotated, truth.spacing)


def evaluate_model(model, dataset: Dataset, subjects: Optional[Iterable[str]] = None,
                   model_tag: str = '', fold: Optional[int] = None, seed: Optional[int] = None,
                   classes: Optional[Iterable[int]] = None) -> Evaluation:
    """Prédit chaque coupe et compare à la vérité (complète si disponible)

    Args:
        model: Modèle (ou bouchon exposant `config` et `forward`)
        dataset: Corpus prétraité
        subjects: Sujets évalués; par défaut tout le corpus
        model_tag: Identifiant reporté dans la colonne model
        fold: Pli reporté dans le rapport
        seed: Graine reportée dans le rapport
        classes: Classes demandées; par défaut celles de la tâche du modèle

    Returns:
        Evaluation
    """
    task = TissueTask.for_classes(model.config.num_classes)
    classes = sorted(int(c) for c in (classes if classes is not None else task.required_annotations))
    unknown = set(classes) - task.required_annotations
    if unknown:
        raise ConfigurationError(
            f"Classes {sorted(unknown)} demandées mais absentes du modèle ({task.value})"
        )
    records = list(dataset.subset(subjects) if subjects is not None else dataset)
    if not records:
        raise ConfigurationError("Aucune coupe à évaluer")

    predictions = []
    for record in records:
        reference = record.evaluation_label()
        if reference is None:
            logger.warning(f"{record.subject_id}/{record.image.slice_index}: aucune référence, coupe ignorée")
            continue
        predictions.append((record, predict_labels(model, record.image), fold_reference(reference, task)))
    if not predictions:
        raise ConfigurationError("Aucune coupe annotée parmi les sujets évalués")

    metadata = {'model': model_tag or model.config.model_tag, 'fold': fold, 'seed': seed}
    report = evaluate_pairs([(p, t) for _, p, t in predictions], classes, **metadata)
    per_subject = []
    for subject in dict.fromkeys(r.subject_id for r, _, _ in predictions):
        pairs = [(p, t) for r, p, t in predictions if r.subject_id == subject]
        per_subject.append(evaluate_pairs(pairs, classes, subject=subject, **metadata))
    logger.info(f"Évaluation {metadata['model']}: {len(predictions)} coupes, {len(per_subject)} sujets, "
                f"Dice moyen {report.mean_dice():.4f}")
    return Evaluation(report, per_subject, predictions)


def evaluate_checkpoint(checkpoint: Checkpoint, dataset: Dataset, subjects: Optional[Iterable[str]] = None,
                        fold: Optional[int] = None, classes: Optional[Iterable[int]] = None) -> Evaluation:
    model = checkpoint.to_model()
    return evaluate_model(model, dataset, subjects, model.config.model_tag, fold, checkpoint.seed, classes)


def write_tissue_areas(path: Union[str, Path], evaluation: Evaluation) -> Path:
    """Surfaces prédites et vraies par coupe et par tissu"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=AREA_FIELDS)
        writer.writeheader()
        for record, prediction, truth in evaluation.predictions:
            predicted, reference = tissue_areas(prediction), tissue_areas(truth)
            for tissue in Tissue:
                if tissue == Tissue.BACKGROUND:
                    continue
                writer.writerow({'subject': record.subject_id, 'slice_index': record.image.slice_index,
                                 'tissue': tissue.name.lower(), 'predicted_mm2': f"{predicted[tissue]:.2f}",
                                 'truth_mm2': f"{reference[tissue]:.2f}"})
    return path


def write_evaluation(out_dir: Union[str, Path], evaluation: Evaluation, overlays: bool = True,
                     generator: Optional[ImageGenerator] = None) -> Path:
    """metrics.csv, per_subject.csv, tissue_areas.csv et superpositions PPM"""
    out_dir = Path(out_dir)
    write_report_csv(out_dir / 'metrics.csv', [evaluation.report])
    write_boxplot_csv(out_dir / 'per_subject.csv', evaluation.per_subject)
    write_tissue_areas(out_dir / 'tissue_areas.csv', evaluation)
    if overlays:
        generator = generator or ImageGenerator()
        for record, prediction, truth in evaluation.predictions:
            stem = f"{record.subject_id}_{record.image.slice_index:03d}"
            generator.save_overlays(out_dir / 'overlays', stem, record.image, truth, prediction)
    return out_dir
