"""Utilitaires - Empreintes de paramètres et graines dérivées"""
import hashlib
from typing import Iterable, Tuple, Union

import numpy as np


def get_array_hash(arrays: Iterable[Tuple[str, np.ndarray]]) -> str:
    """Empreinte MD5 d'une suite de tableaux nommés

    Args:
        arrays: Paires (nom, tableau), dans un ordre stable

    Returns:
        Hash hexadécimal
    """
    digest = hashlib.md5()
    for name, array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(name.encode())
        digest.update(str(array.dtype).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def parameter_hash(model) -> str:
    """Empreinte des valeurs courantes des paramètres d'un modèle"""
    return get_array_hash((name, param.data) for name, param in model.named_parameters())


def derive_seed(base_seed: int, *keys: Union[int, str]) -> int:
    """Graine déterministe dérivée de (graine, clés)

    Les clés textuelles passent par un hash MD5 pour rester stables
    d'une exécution à l'autre.
    """
    entropy = [int(base_seed)]
    for key in keys:
        if isinstance(key, str):
            key = int(hashlib.md5(key.encode()).hexdigest()[:8], 16)
        entropy.append(int(key))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])
