"""Mécanismes de dropout: régulier, variationnel et ciblé"""
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, Optional, Union

import numpy as np

from app.core.errors import ConfigurationError
from app.core.layers import check_mode
from app.core.tensor import Parameter, Tensor, as_tensor, mul, record_op

logger = logging.getLogger(__name__)

# Approximation cubique de -KL pour le bruit gaussien multiplicatif
KL_C1 = 1.16145124
KL_C2 = -1.50204118
KL_C3 = 0.58629921
LOG_ALPHA_FLOOR = -20.0


class DropoutVariant(Enum):
    """Variantes de dropout supportées"""
    REGULAR = "regular"
    VARIATIONAL = "variational"
    TARGETED = "targeted"


@dataclass(frozen=True)
class DropoutSpec:
    """Configuration d'un mécanisme de dropout

    Seuls les champs de la variante active sont utilisés; les autres gardent
    leur valeur par défaut et sont sérialisés tels quels.
    """
    variant: DropoutVariant = DropoutVariant.REGULAR
    p: float = 0.2
    gamma: float = 0.5
    log_alpha_init: float = float(np.log(0.25))
    log_alpha_max: float = 0.0

    def __post_init__(self):
        if isinstance(self.variant, str):
            object.__setattr__(self, 'variant', parse_variant(self.variant))
        self.validate()

    def validate(self):
        if self.variant is DropoutVariant.REGULAR and not 0.0 <= self.p < 1.0:
            raise ConfigurationError(f"Taux de dropout invalide: p={self.p} (attendu 0 <= p < 1)")
        if self.variant is DropoutVariant.TARGETED:
            if not 0.0 <= self.p <= 1.0:
                raise ConfigurationError(f"Taux de dropout ciblé invalide: p={self.p}")
            if not 0.0 <= self.gamma <= 1.0:
                raise ConfigurationError(f"Taux de ciblage invalide: gamma={self.gamma}")
        if self.variant is DropoutVariant.VARIATIONAL:
            if not np.isfinite(self.log_alpha_init) or not np.isfinite(self.log_alpha_max):
                raise ConfigurationError("log_alpha doit être fini")
            if self.log_alpha_init > self.log_alpha_max:
                raise ConfigurationError(
                    f"log_alpha_init ({self.log_alpha_init}) dépasse log_alpha_max ({self.log_alpha_max})"
                )

    @property
    def tag(self) -> str:
        return self.variant.value

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['variant'] = self.variant.value
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'DropoutSpec':
        unknown = set(data) - {'variant', 'p', 'gamma', 'log_alpha_init', 'log_alpha_max'}
        if unknown:
            raise ConfigurationError(f"Clés inconnues dans la section dropout: {sorted(unknown)}")
        return cls(**data)


def parse_variant(name: str) -> DropoutVariant:
    try:
        return DropoutVariant(name)
    except ValueError:
        choices = ', '.join(v.value for v in DropoutVariant)
        raise ConfigurationError(f"Variante de dropout inconnue: {name!r} (choix: {choices})") from None


class VariationalState:
    """log α appris pour un site de dropout variationnel"""

    def __init__(self, log_alpha_init: float, log_alpha_max: float = 0.0,
                 name: str = 'log_alpha', dtype=np.float32):
        self.log_alpha = Parameter(np.array([log_alpha_init]), name=name, dtype=dtype)
        self.log_alpha_max = log_alpha_max

    def clamp(self):
        """Ramène log α dans [LOG_ALPHA_FLOOR, log_alpha_max] après un pas d'optimiseur"""
        self.log_alpha.data = np.clip(self.log_alpha.data, LOG_ALPHA_FLOOR, self.log_alpha_max)

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.data[0]))


_ACTIVATION_DROPOUTS: Dict[DropoutVariant, Callable] = {}


def register(variant: DropoutVariant):
    def add_to_dict(fn):
        _ACTIVATION_DROPOUTS[variant] = fn
        return fn
    return add_to_dict


@register(DropoutVariant.REGULAR)
def regular_dropout(x, p: float, rng: np.random.Generator, mode: str) -> Tensor:
    """Dropout de Bernoulli inversé (identité en évaluation)

    Args:
        x: Activations
        p: Probabilité de mise à zéro, 0 <= p < 1
        rng: Générateur numpy
        mode: 'train' ou 'eval'

    Returns:
        Activations masquées et remises à l'échelle par 1/(1-p)
    """
    check_mode(mode)
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"Taux de dropout invalide: p={p} (attendu 0 <= p < 1)")
    x = as_tensor(x)
    if mode == 'eval' or p == 0.0:
        return x
    keep = rng.random(x.shape) >= p
    mask = Tensor(keep.astype(x.dtype) / x.dtype.type(1.0 - p), dtype=x.dtype)
    return mul(x, mask)


@register(DropoutVariant.VARIATIONAL)
def variational_dropout(x, state: VariationalState, rng: np.random.Generator, mode: str) -> Tensor:
    """Bruit gaussien multiplicatif de moyenne 1 et de variance α

    Reparamétrisé (y = x·(1 + sqrt(α)·ξ)) pour que le gradient atteigne log α.
    """
    check_mode(mode)
    x = as_tensor(x)
    if mode == 'eval':
        return x
    log_alpha = state.log_alpha.value
    raw = float(log_alpha.data[0])
    if not np.isfinite(raw):
        raise ConfigurationError(f"log_alpha non fini: {raw}")
    clipped = min(raw, state.log_alpha_max)
    sigma = np.exp(0.5 * clipped)
    xi = rng.standard_normal(x.shape).astype(x.dtype)
    noise = 1.0 + sigma * xi
    out = x.data * noise

    def grad_fn(g):
        grad_x = g * noise
        grad_la = 0.0
        if raw <= state.log_alpha_max:
            grad_la = 0.5 * sigma * np.sum(g * x.data * xi, dtype=np.float64)
        return grad_x, np.array([grad_la])

    return record_op('variational_dropout', (x, log_alpha), out.astype(x.dtype), grad_fn)


def _neg_kl(alpha):
    return 0.5 * np.log(alpha) + KL_C1 * alpha + KL_C2 * alpha ** 2 + KL_C3 * alpha ** 3


def vd_kl_penalty(states: Union[VariationalState, Iterable[VariationalState]]) -> Tensor:
    """Pénalité KL sommée sur les sites, nulle pour α -> 0

    La valeur est l'approximation cubique décalée de sa valeur en
    α = exp(LOG_ALPHA_FLOOR); log α est borné à [LOG_ALPHA_FLOOR, log_alpha_max]
    et le gradient est nul hors de cet intervalle.
    """
    if isinstance(states, VariationalState):
        states = [states]
    states = list(states)
    if not states:
        return Tensor(0.0)
    inputs = tuple(s.log_alpha.value for s in states)
    raw = np.array([float(t.data[0]) for t in inputs])
    upper = np.array([s.log_alpha_max for s in states])
    clipped = np.clip(raw, LOG_ALPHA_FLOOR, upper)
    alpha = np.exp(clipped)
    penalty = np.sum(_neg_kl(alpha) - _neg_kl(np.exp(LOG_ALPHA_FLOOR)))
    active = (raw >= LOG_ALPHA_FLOOR) & (raw <= upper)

    def grad_fn(g):
        slope = 0.5 + KL_C1 * alpha + 2 * KL_C2 * alpha ** 2 + 3 * KL_C3 * alpha ** 3
        return tuple(np.array([float(g) * slope[i] * active[i]]) for i in range(len(states)))

    return record_op('vd_kl', inputs, np.asarray(max(penalty, 0.0)), grad_fn)


def target_set(weights: np.ndarray, gamma: float) -> np.ndarray:
    """Indices (à plat) des ⌈γ·n⌉ poids de plus faible magnitude

    Les égalités de |w| sont départagées par l'indice le plus faible.
    """
    flat = np.abs(np.asarray(weights)).reshape(-1)
    count = int(np.ceil(round(gamma * flat.size, 9)))
    order = np.argsort(flat, kind='stable')
    return order[:count]


def targeted_dropout(weights, gamma: float, p: float, rng: np.random.Generator, mode: str) -> Tensor:
    """Dropout ciblé sur les poids de plus faible magnitude

    Args:
        weights: Poids d'une couche de convolution
        gamma: Fraction ciblée des poids
        p: Probabilité de mise à zéro d'un poids ciblé (pas de remise à l'échelle)
        rng: Générateur numpy
        mode: 'train' ou 'eval'

    Returns:
        Poids masqués
    """
    check_mode(mode)
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"Taux de ciblage invalide: gamma={gamma}")
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"Taux de dropout ciblé invalide: p={p}")
    w = as_tensor(weights)
    if mode == 'eval' or p == 0.0 or gamma == 0.0:
        return w
    target = target_set(w.data, gamma)
    dropped = target[rng.random(target.size) < p]
    mask = np.ones(w.size, dtype=w.dtype)
    mask[dropped] = 0
    return mul(w, Tensor(mask.reshape(w.shape), dtype=w.dtype))


class DropoutSite:
    """Point d'insertion d'un dropout dans le réseau

    Les variantes régulière et variationnelle agissent sur les activations;
    la variante ciblée agit sur les poids de la convolution précédente.
    """

    def __init__(self, spec: DropoutSpec, name: str, acts_on_weights: bool = True, dtype=np.float32):
        self.spec = spec
        self.name = name
        self.acts_on_weights = acts_on_weights
        self.state: Optional[VariationalState] = None
        if spec.variant is DropoutVariant.VARIATIONAL:
            self.state = VariationalState(spec.log_alpha_init, spec.log_alpha_max,
                                          name=f"{name}.log_alpha", dtype=dtype)

    def weights(self, kernel, rng: np.random.Generator, mode: str):
        if self.spec.variant is DropoutVariant.TARGETED and self.acts_on_weights:
            return targeted_dropout(kernel, self.spec.gamma, self.spec.p, rng, mode)
        return kernel

    def activations(self, x, rng: np.random.Generator, mode: str):
        variant = self.spec.variant
        if variant is DropoutVariant.REGULAR:
            return _ACTIVATION_DROPOUTS[variant](x, self.spec.p, rng, mode)
        if variant is DropoutVariant.VARIATIONAL:
            return _ACTIVATION_DROPOUTS[variant](x, self.state, rng, mode)
        return as_tensor(x)
