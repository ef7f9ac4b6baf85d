"""Entraînement supervisé: mini-lots, Adam, sélection par Dice de validation"""
import logging
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from tqdm import trange

from app.core.checkpoint import Checkpoint
from app.core.dropouts import vd_kl_penalty
from app.core.errors import ConfigurationError, LeakageError, NumericError, ProtocolError
from app.core.layers import softmax_cross_entropy
from app.core.networks import Model, ModelConfig, build_model
from app.core.optim import adam_step
from app.core.tensor import ComputationTape, add, backward, scale
from app.data.dataset import Dataset, FoldSplit, SliceRecord
from app.data.images import TissueTask
from app.intelligence.history_manager import RunHistory, epochs_to_converge
from app.intelligence.metrics import dice

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hyperparams:
    """Hyperparamètres d'entraînement

    kl_weight=None pondère la pénalité KL par 1 / (pixels d'entraînement).
    """
    learning_rate: float = 5e-5
    batch_size: int = 3
    max_epochs: int = 1000
    convergence_patience: int = 10
    convergence_tolerance: float = 1.02
    kl_weight: Optional[float] = None
    seed: int = 0
    early_stop: bool = True
    check_leakage: bool = True
    progress: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ConfigurationError(f"learning_rate invalide: {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.convergence_patience < 1:
            raise ConfigurationError("batch_size, max_epochs et convergence_patience doivent être >= 1")
        if self.convergence_tolerance < 1.0:
            raise ConfigurationError(f"convergence_tolerance doit être >= 1 (reçu {self.convergence_tolerance})")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise ConfigurationError(f"kl_weight doit être >= 0 (reçu {self.kl_weight})")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'Hyperparams':
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Clés inconnues dans la section hyperparams: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **changes) -> 'Hyperparams':
        return replace(self, **changes)


def batch_arrays(records: Sequence[SliceRecord], contrasts: Sequence[int],
                 task: TissueTask) -> Tuple[np.ndarray, np.ndarray]:
    """Empile images [N, C, H, W] et étiquettes de la tâche [N, H, W]"""
    images = np.stack([r.image.stack(contrasts) for r in records]).astype(np.float32)
    labels = np.stack([task.encode(r.label) for r in records])
    return images, labels


def _batch_id(epoch: int, index: int, records: Sequence[SliceRecord]) -> str:
    keys = ','.join(f"{r.subject_id}/{r.image.slice_index}" for r in records)
    return f"epoch{epoch}-batch{index}[{keys}]"


class Trainer:
    """Boucle d'entraînement d'un modèle sur un ensemble d'entraînement fixé

    Seules les coupes de `train` peuvent produire un pas de gradient.
    """

    def __init__(self, model: Model, task: TissueTask, hp: Hyperparams,
                 train: Dataset, validation: Dataset):
        if len(train) == 0:
            raise ConfigurationError("Ensemble d'entraînement vide")
        if len(validation) == 0:
            raise ConfigurationError("Ensemble de validation vide")
        self.model = model
        self.task = task
        self.hp = hp
        self.train = train
        self.validation = validation
        self._train_keys = {r.key for r in train}
        self._check_classes()
        pixels = sum(r.image.shape[0] * r.image.shape[1] for r in train)
        self.kl_weight = hp.kl_weight if hp.kl_weight is not None else 1.0 / pixels
        self.steps = 0

    def _check_classes(self):
        limit = self.model.config.num_classes
        for record in self.train:
            labels = self.task.encode(record.label)
            if labels.max() >= limit:
                raise ConfigurationError(
                    f"Classe {int(labels.max())} présente dans les étiquettes mais absente de la configuration "
                    f"({limit} classes)"
                )

    def _guard(self, records: Sequence[SliceRecord]):
        if not self.hp.check_leakage:
            return
        leaked = [r.key for r in records if r.key not in self._train_keys]
        if leaked:
            raise LeakageError(f"Coupes hors entraînement dans un lot: {leaked[:3]}")

    def step(self, records: Sequence[SliceRecord], batch_id: str, rng: np.random.Generator) -> float:
        """Un pas d'Adam sur un mini-lot

        Returns:
            Perte du lot (entropie croisée + KL pondérée)
        """
        self._guard(records)
        images, labels = batch_arrays(records, self.model.config.contrasts, self.task)
        self.model.zero_grad()
        states = list(self.model.variational_states().values())
        with ComputationTape() as tape:
            logits = self.model.forward(images, 'train', rng)
            loss = softmax_cross_entropy(logits, labels)
            if states:
                loss = add(loss, scale(vd_kl_penalty(states), self.kl_weight))
        value = loss.item()
        if not np.isfinite(value):
            logger.error(f"Perte non finie ({value}) sur le lot {batch_id}")
            raise NumericError(f"Perte non finie sur le lot {batch_id}", batch_id)
        backward(loss, tape)
        adam_step(self.model.parameters(), self.hp.learning_rate)
        self.model.clamp_log_alphas()
        self.steps += 1
        return value

    def run_epoch(self, epoch: int) -> float:
        """Parcourt l'ensemble d'entraînement dans un ordre tiré pour cette époque"""
        order = np.random.default_rng([self.hp.seed, epoch]).permutation(len(self.train))
        size = self.hp.batch_size
        total, count = 0.0, 0
        for index, start in enumerate(range(0, len(order), size)):
            records = [self.train[i] for i in order[start:start + size]]
            noise_rng = np.random.default_rng([self.hp.seed, epoch, index])
            loss = self.step(records, _batch_id(epoch, index, records), noise_rng)
            total += loss * len(records)
            count += len(records)
        return total / count

    def evaluate(self, dataset: Optional[Dataset] = None) -> Tuple[float, float]:
        """Perte et Dice moyen (hors fond) en mode évaluation

        Returns:
            Tuple (perte moyenne par pixel, Dice moyen sur les classes de la tâche)
        """
        dataset = dataset if dataset is not None else self.validation
        size = self.hp.batch_size
        loss_sum, pixels = 0.0, 0
        predictions, targets = [], []
        for start in range(0, len(dataset), size):
            records = [dataset[i] for i in range(start, min(start + size, len(dataset)))]
            images, labels = batch_arrays(records, self.model.config.contrasts, self.task)
            logits = self.model.forward(images, 'eval')
            loss_sum += softmax_cross_entropy(logits, labels).item() * labels.size
            pixels += labels.size
            predictions.append(np.argmax(logits.data, axis=1))
            targets.append(labels)
        pred, target = np.concatenate(predictions), np.concatenate(targets)
        scores = [dice(pred == c, target == c) for c in range(1, self.task.num_classes)]
        return loss_sum / pixels, float(np.mean(scores))

    def fit(self) -> Tuple[Checkpoint, RunHistory]:
        """Entraîne jusqu'à max_epochs ou convergence; renvoie le meilleur point de sauvegarde"""
        history = RunHistory()
        best: Optional[Checkpoint] = None
        best_dice = -np.inf
        epochs = trange(1, self.hp.max_epochs + 1, desc=self.model.config.model_tag) \
            if self.hp.progress else range(1, self.hp.max_epochs + 1)
        for epoch in epochs:
            train_loss = self.run_epoch(epoch)
            val_loss, val_dice = self.evaluate()
            history.append(train_loss, val_loss, val_dice)
            logger.info(f"Époque {epoch}: perte {train_loss:.4f} / {val_loss:.4f}, Dice val {val_dice:.4f}")
            if val_dice > best_dice:
                best_dice = val_dice
                best = Checkpoint.from_model(self.model, epoch, self.hp.seed,
                                             val_dice=val_dice, model_tag=self.model.config.model_tag)
            if self.hp.early_stop and epochs_to_converge(
                    history, self.hp.convergence_tolerance, self.hp.convergence_patience) is not None:
                logger.info(f"Convergence atteinte, arrêt à l'époque {epoch}")
                break
        return best, history


def _usable(data: Dataset, subjects: Sequence[str], task: TissueTask, role: str) -> Dataset:
    subset = data.subset(subjects)
    covered = subset.covering(task)
    skipped = len(subset) - len(covered)
    if skipped:
        logger.warning(f"{skipped} coupe(s) de {role} ignorée(s): annotation incomplète pour {task.value}")
    return covered


def train_supervised(config: ModelConfig, data: Dataset, split: FoldSplit, hp: Hyperparams,
                     task: Optional[TissueTask] = None) -> Tuple[Checkpoint, RunHistory]:
    """Entraîne un modèle neuf sur les sujets d'entraînement d'un pli

    Args:
        config: Configuration du modèle
        data: Corpus prétraité
        split: Pli (sujets train / validation / test)
        hp: Hyperparamètres
        task: Tâche; par défaut celle qui correspond à config.num_classes

    Returns:
        Tuple (meilleur point de sauvegarde, historique)
    """
    task = task or TissueTask.for_classes(config.num_classes)
    roles = [set(split.train), set(split.validation), set(split.test)]
    if roles[0] & roles[1] or roles[0] & roles[2] or roles[1] & roles[2]:
        raise LeakageError(f"Sujet partagé entre deux rôles dans le pli {split.fold}")
    train = _usable(data, split.train, task, 'train')
    validation = _usable(data, split.validation, task, 'validation')
    if len(train) == 0:
        raise ProtocolError(f"Aucune coupe d'entraînement annotée pour {task.value} (pli {split.fold})")

    model = build_model(config, np.random.default_rng(hp.seed))
    trainer = Trainer(model, task, hp, train, validation)
    logger.info(f"Entraînement {config.model_tag} pli {split.fold}: {len(train)} coupes, "
                f"{len(validation)} en validation, lr={hp.learning_rate}, lot={hp.batch_size}")
    return trainer.fit()

