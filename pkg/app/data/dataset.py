"""Corpus de coupes annotées et découpage train/validation/test par sujet"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import KFold

from app.core.errors import ConfigurationError, ProtocolError
from app.data.images import LabelMap, MultiContrastSlice, Tissue, TissueTask

logger = logging.getLogger(__name__)


class Provenance(Enum):
    """Origine d'une annotation"""
    EXPERT = "expert"
    PSEUDO = "pseudo"


def merge_labels(expert: LabelMap, pseudo: LabelMap) -> LabelMap:
    """Ajoute l'IMAT prédite à une annotation experte sans IMAT

    Les pixels IMAT de la pseudo-annotation ne remplacent l'annotation
    experte que là où celle-ci indique du muscle.
    """
    if expert.shape != pseudo.shape:
        raise ConfigurationError(f"Annotations de tailles différentes: {expert.shape} et {pseudo.shape}")
    if Tissue.IMAT in expert.annotated_classes:
        return expert
    take = (pseudo.classes == Tissue.IMAT) & (expert.classes == Tissue.MUSCLE)
    merged = np.where(take, Tissue.IMAT, expert.classes)
    return LabelMap(merged, expert.annotated_classes | {int(Tissue.IMAT)}, expert.spacing)


@dataclass(frozen=True)
class SliceRecord:
    """Coupe du corpus avec ses annotations

    expert_label n'est jamais modifiée; truth est la vérité complète du
    fantôme, réservée à l'évaluation.
    """
    image: MultiContrastSlice
    expert_label: Optional[LabelMap] = None
    pseudo_label: Optional[LabelMap] = None
    truth: Optional[LabelMap] = None

    @property
    def key(self) -> Tuple[str, int]:
        return self.image.key

    @property
    def subject_id(self) -> str:
        return self.image.subject_id

    @property
    def labeled(self) -> bool:
        return self.expert_label is not None or self.pseudo_label is not None

    @property
    def provenance(self) -> Optional[Provenance]:
        if self.pseudo_label is not None:
            return Provenance.PSEUDO
        if self.expert_label is not None:
            return Provenance.EXPERT
        return None

    @property
    def label(self) -> Optional[LabelMap]:
        """Annotation d'entraînement (fusion experte + pseudo si les deux existent)"""
        if self.pseudo_label is None:
            return self.expert_label
        if self.expert_label is None:
            return self.pseudo_label
        return merge_labels(self.expert_label, self.pseudo_label)

    @property
    def annotated_classes(self) -> frozenset:
        label = self.label
        return label.annotated_classes if label is not None else frozenset()

    def covers(self, task: TissueTask) -> bool:
        return self.labeled and task.required_annotations <= self.annotated_classes

    def with_pseudo_label(self, label: LabelMap) -> 'SliceRecord':
        return replace(self, pseudo_label=label)

    def with_image(self, image: MultiContrastSlice) -> 'SliceRecord':
        return replace(self, image=image)

    def evaluation_label(self) -> Optional[LabelMap]:
        """Vérité complète si disponible, sinon l'annotation experte"""
        return self.truth if self.truth is not None else self.expert_label


class Dataset:
    """Ensemble ordonné de coupes, indexé par (sujet, coupe)"""

    def __init__(self, records: Iterable[SliceRecord]):
        self.records: Tuple[SliceRecord, ...] = tuple(records)
        keys = [r.key for r in self.records]
        if len(set(keys)) != len(keys):
            raise ConfigurationError("Coupes dupliquées dans le corpus")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SliceRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> SliceRecord:
        return self.records[index]

    @property
    def subjects(self) -> List[str]:
        """Sujets dans l'ordre de première apparition"""
        return list(dict.fromkeys(r.subject_id for r in self.records))

    def subset(self, subject_ids: Iterable[str]) -> 'Dataset':
        wanted = set(subject_ids)
        return Dataset(r for r in self.records if r.subject_id in wanted)

    def by_subject(self) -> Dict[str, List[SliceRecord]]:
        grouped: Dict[str, List[SliceRecord]] = {}
        for record in self.records:
            grouped.setdefault(record.subject_id, []).append(record)
        return grouped

    def labeled(self) -> 'Dataset':
        return Dataset(r for r in self.records if r.labeled)

    def covering(self, task: TissueTask) -> 'Dataset':
        """Coupes dont l'annotation couvre toutes les classes de la tâche"""
        return Dataset(r for r in self.records if r.covers(task))

    def imat_labeled_subjects(self) -> List[str]:
        return [s for s, recs in self.by_subject().items()
                if all(r.expert_label is not None and Tissue.IMAT in r.expert_label.annotated_classes
                       for r in recs)]

    def imat_unlabeled_subjects(self) -> List[str]:
        labeled = set(self.imat_labeled_subjects())
        return [s for s in self.subjects if s not in labeled]

    def replace(self, updated: Iterable[SliceRecord]) -> 'Dataset':
        """Remplace les coupes de même clé"""
        by_key = {r.key: r for r in updated}
        return Dataset(by_key.get(r.key, r) for r in self.records)

    def summary(self) -> Dict:
        provenances = [r.provenance.value if r.provenance else 'none' for r in self.records]
        return {
            'subjects': len(self.subjects),
            'slices': len(self.records),
            'expert': provenances.count('expert'),
            'pseudo': provenances.count('pseudo'),
            'unlabeled': provenances.count('none'),
        }


@dataclass(frozen=True)
class FoldSplit:
    """Sujets d'entraînement, de validation et de test d'un pli"""
    fold: int
    train: Tuple[str, ...]
    validation: Tuple[str, ...]
    test: Tuple[str, ...]

    def role_of(self, subject_id: str) -> Optional[str]:
        for role in ('train', 'validation', 'test'):
            if subject_id in getattr(self, role):
                return role
        return None


@dataclass(frozen=True)
class SplitPlan:
    """Plan de découpage par sujet (k plis)"""
    folds: Tuple[FoldSplit, ...]
    ratios: Tuple[float, ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    @property
    def test_sets(self) -> List[Tuple[str, ...]]:
        return [f.test for f in self.folds]

    def fold(self, index: int) -> FoldSplit:
        if not 0 <= index < len(self.folds):
            raise ConfigurationError(f"Pli {index} inexistant (k={len(self.folds)})")
        return self.folds[index]

    def check(self):
        """Vérifie l'absence de fuite entre rôles dans chaque pli"""
        for f in self.folds:
            train, val, test = set(f.train), set(f.validation), set(f.test)
            if train & val or train & test or val & test:
                raise ProtocolError(f"Sujet partagé entre deux rôles dans le pli {f.fold}")


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def make_splits(subjects: Sequence[str], ratios: Sequence[float] = (70, 10, 20),
                k: int = 5, seed: int = 0) -> SplitPlan:
    """Découpe les sujets en plis train/validation/test

    Avec k > 1, les ensembles de test sont les plis d'un KFold mélangé;
    la validation prend round(n·r_val/100) sujets parmi les restants.
    Avec k = 1, un seul tirage aux ratios demandés; (90, 10) donne un
    découpage train/validation sans test.

    Args:
        subjects: Identifiants des sujets
        ratios: (train, validation, test) ou (train, validation), somme 100
        k: Nombre de plis
        seed: Graine du tirage

    Returns:
        SplitPlan déterministe pour (sujets, ratios, k, seed)
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) == 2:
        ratios = ratios + (0.0,)
        if k != 1:
            raise ConfigurationError("Le découpage train/validation sans test impose k = 1")
    if len(ratios) != 3 or abs(sum(ratios) - 100.0) > 1e-9 or min(ratios) < 0:
        raise ConfigurationError(f"Ratios invalides: {ratios} (somme attendue: 100)")
    if k < 1:
        raise ConfigurationError(f"k doit être >= 1 (reçu {k})")

    ordered = sorted(set(subjects))
    n = len(ordered)
    _, r_val, r_test = ratios
    n_val = _round_half_up(n * r_val / 100)
    if k == 1:
        n_test = _round_half_up(n * r_test / 100)
    else:
        n_test = int(np.ceil(n / k))
    if k > n or n - n_val - n_test < 1 or (r_val > 0 and n_val < 1) or (r_test > 0 and n_test < 1):
        raise ConfigurationError(
            f"Trop peu de sujets ({n}) pour le découpage {ratios} en {k} pli(s)"
        )

    folds = []
    if k == 1:
        order = np.random.default_rng(seed).permutation(n)
        shuffled = [ordered[i] for i in order]
        test = tuple(sorted(shuffled[:n_test]))
        val = tuple(sorted(shuffled[n_test:n_test + n_val]))
        train = tuple(sorted(shuffled[n_test + n_val:]))
        folds.append(FoldSplit(0, train, val, test))
    else:
        kfold = KFold(n_splits=k, shuffle=True, random_state=seed)
        for index, (rest_idx, test_idx) in enumerate(kfold.split(ordered)):
            rest = [ordered[i] for i in rest_idx]
            order = np.random.default_rng([seed, index]).permutation(len(rest))
            val = tuple(sorted(rest[i] for i in order[:n_val]))
            train = tuple(sorted(rest[i] for i in order[n_val:]))
            folds.append(FoldSplit(index, train, val, tuple(ordered[i] for i in test_idx)))

    plan = SplitPlan(tuple(folds), ratios, seed)
    plan.check()
    logger.info(f"Découpage {ratios} en {k} pli(s) sur {n} sujets")
    return plan
