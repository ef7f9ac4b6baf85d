"""Fixtures partagées: générateur, petits fantômes, modèle oracle, différences finies"""
from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np
import pytest

from app.core.networks import ModelConfig
from app.core.tensor import Tensor
from app.data.images import MultiContrastSlice, TissueTask
from app.data.phantoms import PhantomParams, generate_phantom, make_corpus

SMALL = PhantomParams(height=32, width=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_params():
    return SMALL


@pytest.fixture
def phantom(rng):
    """Une coupe 32x32 et sa vérité complète"""
    return generate_phantom(rng, SMALL, 'S001', 0)


@pytest.fixture
def tiny_config():
    return ModelConfig.from_preset('tiny', input_size=32)


def small_corpus(n_subjects=6, slices_per_subject=1, fraction=1.0, seed=0):
    return make_corpus(np.random.default_rng(seed), n_subjects, slices_per_subject, fraction, SMALL)


@pytest.fixture
def corpus():
    return small_corpus()


@dataclass
class OracleModel:
    """Bouchon de modèle: renvoie des logits one-hot tirés de la vérité connue"""
    config: ModelConfig
    truths: Dict[bytes, np.ndarray]

    @classmethod
    def from_dataset(cls, dataset, num_classes: int = 6) -> 'OracleModel':
        config = ModelConfig(num_classes=num_classes, input_size=32)
        task = TissueTask.for_classes(num_classes)
        truths = {}
        for record in dataset:
            reference = record.truth if record.truth is not None else record.expert_label
            truths[cls._key(record.image, config)] = task.encode(reference)
        return cls(config, truths)

    @staticmethod
    def _key(image: MultiContrastSlice, config: ModelConfig) -> bytes:
        return image.stack(config.contrasts).astype(np.float32).tobytes()

    def forward(self, batch, mode='eval', rng=None) -> Tensor:
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        logits = []
        for sample in data.astype(np.float32):
            classes = self.truths[sample.tobytes()]
            one_hot = np.eye(self.config.num_classes, dtype=np.float32)[classes]
            logits.append(np.moveaxis(one_hot, -1, 0) * 10.0)
        return Tensor(np.stack(logits))


@pytest.fixture
def oracle():
    return OracleModel


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Gradient par différences centrées (float64), `array` modifié en place puis restauré"""
    grad = np.zeros(array.shape, dtype=np.float64)
    flat, out = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        plus = f()
        flat[i] = saved - eps
        minus = f()
        flat[i] = saved
        out[i] = (plus - minus) / (2 * eps)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic, numeric = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
