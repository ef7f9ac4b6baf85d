"""Optimiseur Adam et initialisation de Xavier"""
from typing import Iterable, Sequence

import numpy as np

from app.core.errors import ConfigurationError, ContractError
from app.core.tensor import Parameter, Tensor


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Applique un pas d'Adam (avec correction de biais) à chaque paramètre

    Args:
        params: Paramètres dont le gradient est renseigné
        lr: Taux d'apprentissage
        beta1: Décroissance du premier moment
        beta2: Décroissance du second moment
        eps: Terme de stabilité numérique
    """
    params = list(params)
    missing = [p.name or repr(p) for p in params if p.grad is None]
    if missing:
        raise ContractError(f"Gradient absent pour: {', '.join(missing[:5])}")

    for param in params:
        grad = param.grad.reshape(-1).astype(np.float64)
        param.step_count += 1
        t = param.step_count
        param.adam_m[...] = beta1 * param.adam_m + (1 - beta1) * grad
        param.adam_v[...] = beta2 * param.adam_v + (1 - beta2) * grad * grad
        m_hat = param.adam_m / (1 - beta1 ** t)
        v_hat = param.adam_v / (1 - beta2 ** t)
        update = lr * m_hat / (np.sqrt(v_hat) + eps)
        param.data = param.data.reshape(-1) - update


def xavier_init(shape: Sequence[int], rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Initialisation uniforme de Xavier (Glorot)

    Les tenseurs à une dimension (biais, gamma/beta exclus) sont mis à zéro.
    Pour un noyau [Cout, Cin, kH, kW], fan_in = Cin·kH·kW et fan_out = Cout·kH·kW.

    Args:
        shape: Forme du tenseur
        rng: Générateur numpy
        dtype: Type des données

    Returns:
        Tensor initialisé
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ConfigurationError(f"Forme invalide pour l'initialisation: {shape}")
    if len(shape) == 1:
        return Tensor(np.zeros(shape, dtype=dtype), dtype=dtype)

    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_out, fan_in = shape[0] * receptive, shape[1] * receptive
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    values = rng.uniform(-limit, limit, size=shape)
    return Tensor(values.astype(dtype), dtype=dtype)
