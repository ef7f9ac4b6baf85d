"""Réseaux de segmentation: Tiramisu (FC-DenseNet) et U-Net de référence"""
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.dropouts import DropoutSite, DropoutSpec, VariationalState
from app.core.errors import ConfigurationError, ShapeError
from app.core.layers import (
    RunningStats, batch_norm, check_mode, concat_channels, conv2d, crop_spatial,
    max_pool2d, relu, transposed_conv2d
)
from app.core.optim import xavier_init
from app.core.tensor import Parameter, Tensor, as_tensor, scale
from app.data.images import LabelMap, MultiContrastSlice, TissueTask

logger = logging.getLogger(__name__)

ARCHITECTURES = ('tiramisu', 'unet_baseline')
INPUT_SCALE = 1.0 / 4095.0

TIRAMISU_PRESETS = {
    'tiramisu103': {'layers_per_block': (4, 5, 7, 10, 12), 'bottleneck_layers': 15,
                    'growth_rate': 24, 'first_conv_filters': 48},
    'tiny': {'layers_per_block': (2, 2), 'bottleneck_layers': 2,
             'growth_rate': 8, 'first_conv_filters': 16},
}
UNET_PRESETS = {
    'tiramisu103': {'unet_base_filters': 64},
    'tiny': {'unet_base_filters': 8},
}


@dataclass(frozen=True)
class ModelConfig:
    """Architecture, preset et hyperparamètres structurels d'un modèle"""
    architecture: str = 'tiramisu'
    preset: str = 'tiny'
    layers_per_block: Tuple[int, ...] = (2, 2)
    bottleneck_layers: int = 2
    growth_rate: int = 8
    first_conv_filters: int = 16
    unet_base_filters: int = 8
    unet_depth: int = 4
    contrasts: Tuple[int, ...] = (0, 1, 2)
    num_classes: int = 6
    dropout: DropoutSpec = field(default_factory=DropoutSpec)
    input_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, 'layers_per_block', tuple(int(n) for n in self.layers_per_block))
        object.__setattr__(self, 'contrasts', tuple(int(c) for c in self.contrasts))
        if isinstance(self.dropout, dict):
            object.__setattr__(self, 'dropout', DropoutSpec.from_dict(self.dropout))
        self.validate()

    @classmethod
    def from_preset(cls, preset: str = 'tiny', architecture: str = 'tiramisu', **overrides) -> 'ModelConfig':
        """Configuration issue d'un preset (tiramisu103 | tiny), surchargée champ par champ"""
        if preset == 'custom':
            values = {}
        elif preset in TIRAMISU_PRESETS:
            values = dict(TIRAMISU_PRESETS[preset], **UNET_PRESETS[preset])
        else:
            raise ConfigurationError(f"Preset inconnu: {preset!r} (choix: tiramisu103, tiny, custom)")
        values.update(overrides)
        return cls(architecture=architecture, preset=preset, **values)

    @property
    def input_channels(self) -> int:
        return len(self.contrasts)

    @property
    def down_factor(self) -> int:
        stages = len(self.layers_per_block) if self.architecture == 'tiramisu' else self.unet_depth
        return 2 ** stages

    @property
    def model_tag(self) -> str:
        return f"{self.architecture}-{self.preset}-{self.dropout.tag}"

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"Architecture inconnue: {self.architecture!r} (choix: {', '.join(ARCHITECTURES)})")
        if self.num_classes not in (3, 5, 6):
            raise ConfigurationError(f"num_classes doit valoir 3, 5 ou 6 (reçu {self.num_classes})")
        if not self.contrasts or len(set(self.contrasts)) != len(self.contrasts) \
                or not set(self.contrasts) <= {0, 1, 2}:
            raise ConfigurationError(f"Contrastes invalides: {self.contrasts}")
        if not self.layers_per_block or min(self.layers_per_block) < 1 or self.bottleneck_layers < 1:
            raise ConfigurationError("Chaque bloc dense doit contenir au moins une couche")
        if min(self.growth_rate, self.first_conv_filters, self.unet_base_filters, self.unet_depth) < 1:
            raise ConfigurationError("growth_rate, first_conv_filters, unet_base_filters et unet_depth doivent être >= 1")
        self.check_input_size(self.input_size, self.input_size)

    def check_input_size(self, height: int, width: int):
        factor = self.down_factor
        if height % factor or width % factor:
            raise ConfigurationError(
                f"Taille d'entrée {height}x{width} non divisible par {factor} "
                f"(2^{int(np.log2(factor))} étages de sous-échantillonnage)"
            )

    def to_dict(self) -> Dict:
        return {
            'architecture': self.architecture, 'preset': self.preset,
            'layers_per_block': list(self.layers_per_block), 'bottleneck_layers': self.bottleneck_layers,
            'growth_rate': self.growth_rate, 'first_conv_filters': self.first_conv_filters,
            'unet_base_filters': self.unet_base_filters, 'unet_depth': self.unet_depth,
            'contrasts': list(self.contrasts), 'num_classes': self.num_classes,
            'dropout': self.dropout.to_dict(), 'input_size': self.input_size,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Clés inconnues dans la section model: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **changes) -> 'ModelConfig':
        return replace(self, **changes)


class Model:
    """Paramètres nommés, statistiques de normalisation et sites de dropout

    Les sous-classes déclarent leurs couches dans _build et les enchaînent
    dans _forward.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self._rng = rng
        self._params: Dict[str, Parameter] = {}
        self.running_stats: Dict[str, RunningStats] = {}
        self.sites: Dict[str, DropoutSite] = {}
        self._build()

    # Déclaration des couches

    def _add_param(self, name: str, shape: Sequence[int], fill: Optional[float] = None) -> Parameter:
        if name in self._params:
            raise ConfigurationError(f"Paramètre dupliqué: {name}")
        if fill is None:
            value = xavier_init(shape, self._rng, self.dtype).data
        else:
            value = np.full(shape, fill, dtype=self.dtype)
        param = Parameter(value, name=name, dtype=self.dtype)
        self._params[name] = param
        return param

    def _declare_conv(self, name: str, c_in: int, c_out: int, k: int):
        self._add_param(f"{name}.w", (c_out, c_in, k, k))
        self._add_param(f"{name}.b", (c_out,))

    def _declare_tconv(self, name: str, c_in: int, c_out: int, k: int):
        self._add_param(f"{name}.w", (c_in, c_out, k, k))
        self._add_param(f"{name}.b", (c_out,))

    def _declare_bn(self, name: str, channels: int):
        self._add_param(f"{name}.gamma", (channels,), fill=1.0)
        self._add_param(f"{name}.beta", (channels,), fill=0.0)
        self.running_stats[name] = RunningStats.fresh(channels, self.dtype)

    def _declare_site(self, name: str, acts_on_weights: bool = True):
        self.sites[name] = DropoutSite(self.config.dropout, name, acts_on_weights, self.dtype)

    def _build(self):
        raise NotImplementedError

    # Application des couches

    def _conv(self, name: str, x, pad: int, rng=None, mode='eval', site: Optional[str] = None):
        kernel = self._params[f"{name}.w"]
        if site is not None:
            kernel = self.sites[site].weights(kernel, rng, mode)
        return conv2d(x, kernel, self._params[f"{name}.b"], stride=1, pad=pad)

    def _bn_relu(self, name: str, x, mode: str):
        out = batch_norm(x, self._params[f"{name}.gamma"], self._params[f"{name}.beta"],
                         self.running_stats[name], mode)
        return relu(out)

    def _drop(self, site: str, x, rng, mode):
        return self.sites[site].activations(x, rng, mode)

    # Interface publique

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        named = list(self._params.items())
        for name, state in self.variational_states().items():
            named.append((state.log_alpha.name, state.log_alpha))
        return named

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def variational_states(self) -> Dict[str, VariationalState]:
        return {name: site.state for name, site in self.sites.items() if site.state is not None}

    def clamp_log_alphas(self):
        for state in self.variational_states().values():
            state.clamp()

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def forward(self, batch, mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> Tensor:
        """Logits par pixel [N, num_classes, H, W]"""
        check_mode(mode)
        x = as_tensor(batch)
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"Entrée {x.shape} incompatible: {self.config.input_channels} canaux attendus [N, C, H, W]"
            )
        self.config.check_input_size(x.shape[2], x.shape[3])
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype), dtype=self.dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        return self._forward(scale(x, INPUT_SCALE), mode, rng)

    def _forward(self, x: Tensor, mode: str, rng: np.random.Generator) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.config.model_tag}, {self.parameter_count()} paramètres)"


def _cat(tensors: List[Tensor]) -> Tensor:
    return tensors[0] if len(tensors) == 1 else concat_channels(*tensors)


class TiramisuNet(Model):
    """FC-DenseNet: blocs denses, transitions et connexions par concaténation"""

    def _declare_dense_block(self, name: str, channels: int, layers: int) -> int:
        growth = self.config.growth_rate
        for l in range(layers):
            c_in = channels + l * growth
            self._declare_bn(f"{name}.l{l}.bn", c_in)
            self._declare_conv(f"{name}.l{l}.conv", c_in, growth, 3)
            self._declare_site(f"{name}.l{l}.drop")
        return channels + layers * growth

    def _build(self):
        cfg = self.config
        growth = cfg.growth_rate
        self._declare_conv('first', cfg.input_channels, cfg.first_conv_filters, 3)
        channels = cfg.first_conv_filters
        self.skip_channels: List[int] = []
        for i, layers in enumerate(cfg.layers_per_block):
            channels = self._declare_dense_block(f"down{i}", channels, layers)
            self.skip_channels.append(channels)
            self._declare_bn(f"td{i}.bn", channels)
            self._declare_conv(f"td{i}.conv", channels, channels, 1)
            self._declare_site(f"td{i}.drop", acts_on_weights=False)

        self._declare_dense_block('bottleneck', channels, cfg.bottleneck_layers)
        upsampled = cfg.bottleneck_layers * growth
        blocks = list(cfg.layers_per_block)
        for j, layers in enumerate(reversed(blocks)):
            skip = self.skip_channels[len(blocks) - 1 - j]
            self._declare_tconv(f"tu{j}", upsampled, upsampled, 3)
            block_in = upsampled + skip
            out = self._declare_dense_block(f"up{j}", block_in, layers)
            assert out == block_in + layers * growth
            upsampled = out if j == len(blocks) - 1 else layers * growth
        self._declare_conv('final', upsampled, cfg.num_classes, 1)

    def _dense_block(self, name: str, x: Tensor, layers: int, keep_input: bool, rng, mode) -> Tensor:
        features, new = [x], []
        for l in range(layers):
            h = self._bn_relu(f"{name}.l{l}.bn", _cat(features), mode)
            h = self._conv(f"{name}.l{l}.conv", h, pad=1, rng=rng, mode=mode, site=f"{name}.l{l}.drop")
            h = self._drop(f"{name}.l{l}.drop", h, rng, mode)
            features.append(h)
            new.append(h)
        return _cat(features if keep_input else new)

    def _forward(self, x: Tensor, mode: str, rng: np.random.Generator) -> Tensor:
        blocks = list(self.config.layers_per_block)
        x = self._conv('first', x, pad=1)
        skips = []
        for i, layers in enumerate(blocks):
            x = self._dense_block(f"down{i}", x, layers, True, rng, mode)
            skips.append(x)
            x = self._bn_relu(f"td{i}.bn", x, mode)
            x = self._conv(f"td{i}.conv", x, pad=0)
            x = self._drop(f"td{i}.drop", x, rng, mode)
            x = max_pool2d(x, 2, 2)

        x = self._dense_block('bottleneck', x, self.config.bottleneck_layers, False, rng, mode)
        for j, layers in enumerate(reversed(blocks)):
            skip = skips[len(blocks) - 1 - j]
            up = transposed_conv2d(x, self._params[f"tu{j}.w"], 2, self._params[f"tu{j}.b"])
            up = crop_spatial(up, skip.shape[2], skip.shape[3])
            x = concat_channels(up, skip)
            x = self._dense_block(f"up{j}", x, layers, j == len(blocks) - 1, rng, mode)
        return self._conv('final', x, pad=0)


class UNetBaseline(Model):
    """U-Net à 4 niveaux: doubles convolutions et concaténation des sauts"""

    def _declare_double(self, name: str, c_in: int, c_out: int):
        self._declare_conv(f"{name}.conv1", c_in, c_out, 3)
        self._declare_bn(f"{name}.bn1", c_out)
        self._declare_conv(f"{name}.conv2", c_out, c_out, 3)
        self._declare_bn(f"{name}.bn2", c_out)
        self._declare_site(f"{name}.drop")

    def _build(self):
        cfg = self.config
        base, depth = cfg.unet_base_filters, cfg.unet_depth
        channels = cfg.input_channels
        for i in range(depth):
            self._declare_double(f"enc{i}", channels, base * 2 ** i)
            channels = base * 2 ** i
        self._declare_double('bottom', channels, base * 2 ** depth)
        channels = base * 2 ** depth
        for i in reversed(range(depth)):
            self._declare_tconv(f"up{i}", channels, base * 2 ** i, 2)
            self._declare_double(f"dec{i}", 2 * base * 2 ** i, base * 2 ** i)
            channels = base * 2 ** i
        self._declare_conv('final', channels, cfg.num_classes, 1)

    def _double(self, name: str, x: Tensor, rng, mode) -> Tensor:
        x = self._conv(f"{name}.conv1", x, pad=1)
        x = self._bn_relu(f"{name}.bn1", x, mode)
        x = self._conv(f"{name}.conv2", x, pad=1, rng=rng, mode=mode, site=f"{name}.drop")
        x = self._bn_relu(f"{name}.bn2", x, mode)
        return self._drop(f"{name}.drop", x, rng, mode)

    def _forward(self, x: Tensor, mode: str, rng: np.random.Generator) -> Tensor:
        depth = self.config.unet_depth
        skips = []
        for i in range(depth):
            x = self._double(f"enc{i}", x, rng, mode)
            skips.append(x)
            x = max_pool2d(x, 2, 2)
        x = self._double('bottom', x, rng, mode)
        for i in reversed(range(depth)):
            up = transposed_conv2d(x, self._params[f"up{i}.w"], 2, self._params[f"up{i}.b"])
            x = self._double(f"dec{i}", concat_channels(up, skips[i]), rng, mode)
        return self._conv('final', x, pad=0)


def build_model(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Model:
    """Instancie l'architecture demandée par la configuration

    Args:
        config: Configuration validée
        rng: Générateur pour l'initialisation de Xavier
        dtype: float32 (défaut) ou float64 pour les vérifications de gradient

    Returns:
        Model
    """
    if config.architecture == 'unet_baseline':
        return build_unet_baseline(config, rng, dtype)
    model = TiramisuNet(config, rng, dtype)
    logger.info(f"Modèle construit: {model}")
    return model


def build_unet_baseline(config: ModelConfig, rng: Optional[np.random.Generator] = None,
                        dtype=np.float32) -> Model:
    if config.architecture != 'unet_baseline':
        config = config.with_overrides(architecture='unet_baseline')
    model = UNetBaseline(config, rng if rng is not None else np.random.default_rng(0), dtype)
    logger.info(f"Modèle construit: {model}")
    return model


def forward(model, batch, mode: str = 'eval', rng: Optional[np.random.Generator] = None) -> Tensor:
    return model.forward(batch, mode, rng)


def predict_classes(model, batch: np.ndarray) -> np.ndarray:
    """Argmax des logits en mode eval (égalités -> plus petit indice de classe)"""
    logits = model.forward(Tensor(np.asarray(batch, dtype=np.float32)), 'eval', None)
    return np.argmax(logits.data, axis=1).astype(np.uint8)


def predict_labels(model, image: MultiContrastSlice) -> LabelMap:
    """Carte d'étiquettes (identifiants de tissus) prédite pour une coupe

    Args:
        model: Modèle exposant `config` et `forward`
        image: MultiContrastSlice prétraitée

    Returns:
        LabelMap
    """
    task = TissueTask.for_classes(model.config.num_classes)
    classes = predict_classes(model, image.stack(model.config.contrasts)[None])[0]
    return LabelMap(task.decode(classes), task.required_annotations, image.spacing)
