"""Module de gestion de l'historique des entraînements"""
import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from tinydb import Query, TinyDB

logger = logging.getLogger(__name__)

RUN_LOG_FIELDS = ['epoch', 'train_loss', 'val_loss', 'val_dice']
CONVERGENCE_TOLERANCE = 1.02
CONVERGENCE_PATIENCE = 10


@dataclass
class RunHistory:
    """Courbes d'apprentissage, une entrée par époque (numérotées à partir de 1)"""
    epochs: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_dice: List[float] = field(default_factory=list)

    def append(self, train_loss: float, val_loss: float, val_dice: float) -> int:
        epoch = len(self.epochs) + 1
        self.epochs.append(epoch)
        self.train_loss.append(float(train_loss))
        self.val_loss.append(float(val_loss))
        self.val_dice.append(float(val_dice))
        return epoch

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def best_epoch(self) -> Optional[int]:
        """Époque de meilleur Dice de validation (la première en cas d'égalité)"""
        if not self.epochs:
            return None
        return self.epochs[int(np.argmax(self.val_dice))]

    @property
    def epochs_to_converge(self) -> Optional[int]:
        return epochs_to_converge(self)

    def write_csv(self, path: Union[str, Path]) -> Path:
        """Journal de la forme "epoch,train_loss,val_loss,val_dice" """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(RUN_LOG_FIELDS)
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.val_dice):
                writer.writerow([row[0]] + [f"{v:.8f}" for v in row[1:]])
        return path

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> 'RunHistory':
        history = cls()
        with open(path, newline='', encoding='utf-8') as f:
            for row in csv.DictReader(f):
                history.append(float(row['train_loss']), float(row['val_loss']), float(row['val_dice']))
        return history


def epochs_to_converge(history: RunHistory, tolerance: float = CONVERGENCE_TOLERANCE,
                       patience: int = CONVERGENCE_PATIENCE) -> Optional[int]:
    """Première époque à partir de laquelle la perte de validation reste proche de son minimum futur

    L'époque e converge si, pour toute époque j >= e, val_loss(j) <= tolerance
    × min(val_loss(e..fin)), et s'il reste au moins `patience` époques à
    partir de e.

    Args:
        history: Historique non vide
        tolerance: Facteur multiplicatif sur le minimum
        patience: Nombre d'époques pendant lesquelles la condition doit tenir

    Returns:
        Numéro d'époque (base 1) ou None si jamais atteint
    """
    losses = np.asarray(history.val_loss, dtype=np.float64)
    n = len(losses)
    if n == 0:
        return None
    # suffix_min[i] = min(losses[i:]); suffix_max idem
    suffix_min = np.minimum.accumulate(losses[::-1])[::-1]
    suffix_max = np.maximum.accumulate(losses[::-1])[::-1]
    for start in range(n - patience + 1):
        if suffix_max[start] <= tolerance * suffix_min[start]:
            return history.epochs[start]
    return None


class HistoryManager:
    """Registre TinyDB des entraînements terminés"""

    def __init__(self, db_path: str = 'data/runs_registry.json'):
        """Initialise le registre

        Args:
            db_path: Chemin vers la base de données TinyDB
        """
        Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.db = TinyDB(db_path)
        self.runs = self.db.table('runs')

    def record_run(self, run_data: Dict) -> int:
        """Enregistre un entraînement terminé

        Args:
            run_data: command, experiment, model_tag, fold, seed, best_val_dice,
                      epochs_to_converge, checkpoint...

        Returns:
            Identifiant du document TinyDB
        """
        document = dict(run_data)
        document.setdefault('timestamp', datetime.now().isoformat())
        doc_id = self.runs.insert(document)
        logger.debug(f"Entraînement enregistré: {document.get('experiment')} / {document.get('model_tag')}")
        return doc_id

    def get_recent(self, limit: int = 10) -> List[Dict]:
        return sorted(self.runs.all(), key=lambda x: x.get('timestamp', ''), reverse=True)[:limit]

    def get_by_experiment(self, experiment: str, limit: int = 50) -> List[Dict]:
        Run = Query()
        results = self.runs.search(Run.experiment == experiment)
        return sorted(results, key=lambda x: x.get('timestamp', ''), reverse=True)[:limit]

    def get_stats(self) -> Dict:
        """Nombre d'entraînements par variante de dropout et par architecture, meilleur entraînement"""
        all_runs = self.runs.all()
        if not all_runs:
            return {'total_runs': 0, 'variants': {}, 'architectures': {}, 'best_run': None}

        variants = Counter(r.get('dropout', 'unknown') for r in all_runs)
        architectures = Counter(r.get('architecture', 'unknown') for r in all_runs)
        scored = [r for r in all_runs if r.get('best_val_dice') is not None]
        best = max(scored, key=lambda r: r['best_val_dice']) if scored else None
        return {
            'total_runs': len(all_runs),
            'variants': dict(variants.most_common()),
            'architectures': dict(architectures.most_common()),
            'best_run': dict(best) if best else None,
        }

    def export_history(self, output_path: str, format: str = 'json') -> bool:
        """Exporte le registre ('json' ou 'csv')

        Returns:
            True si succès, False sinon
        """
        all_runs = [dict(r) for r in self.runs.all()]
        try:
            if format == 'json':
                with open(output_path, 'w', encoding='utf-8') as f:
                    json.dump(all_runs, f, indent=2, ensure_ascii=False)
            elif format == 'csv':
                keys = sorted({k for r in all_runs for k in r})
                with open(output_path, 'w', newline='', encoding='utf-8') as f:
                    writer = csv.DictWriter(f, fieldnames=keys)
                    writer.writeheader()
                    writer.writerows(all_runs)
            else:
                logger.warning(f"Format d'export inconnu: {format}")
                return False
            return True
        except OSError as e:
            logger.error(f"Erreur export: {e}")
            return False

    def clear_all(self) -> int:
        """Vide le registre

        Returns:
            Nombre d'entraînements supprimés
        """
        count = len(self.runs)
        self.runs.truncate()
        return count

    def close(self):
        self.db.close()
