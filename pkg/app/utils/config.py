"""Configuration des exécutions: arbre JSON versionné et surcharges d'environnement"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from dotenv import load_dotenv

from app.core.errors import ConfigurationError
from app.core.networks import ModelConfig
from app.data.images import TissueTask
from app.data.phantoms import PhantomParams
from app.features.training import Hyperparams
from app.preprocessing.pipeline import PreprocessParams

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
SNAPSHOT_NAME = 'run_config.json'
ENV_OUTPUT_ROOT = 'THIGHSEG_OUTPUT_ROOT'
ENV_REGISTRY = 'THIGHSEG_REGISTRY'
ENV_LOG_LEVEL = 'THIGHSEG_LOG_LEVEL'


@dataclass(frozen=True)
class CorpusConfig:
    """Taille du corpus fantôme"""
    n_subjects: int = 50
    slices_per_subject: int = 3
    imat_labeled_fraction: float = 0.4


@dataclass(frozen=True)
class SplitConfig:
    ratios: Tuple[float, ...] = (70.0, 10.0, 20.0)
    k: int = 5
    fold: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'ratios', tuple(float(r) for r in self.ratios))
        if not 0 <= self.fold < max(self.k, 1):
            raise ConfigurationError(f"Pli {self.fold} hors de [0, {self.k})")


@dataclass(frozen=True)
class PathsConfig:
    corpus_dir: str = 'data/corpus'
    output_dir: str = 'runs'
    registry: str = 'data/runs_registry.json'


def _section(cls, data: Optional[Dict], name: str):
    data = dict(data or {})
    unknown = set(data) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"Clés inconnues dans la section {name}: {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigurationError(f"Section {name} invalide: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    """Configuration complète et sérialisable d'une commande

    La graine de premier niveau prime sur hyperparams.seed.
    """
    experiment: str = 'default'
    seed: int = 0
    task: str = TissueTask.FIVE_TISSUE.value
    model: ModelConfig = field(default_factory=ModelConfig)
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    phantom: PhantomParams = field(default_factory=PhantomParams)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    preprocess: PreprocessParams = field(default_factory=PreprocessParams)
    split: SplitConfig = field(default_factory=SplitConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        task = TissueTask.parse(self.task)
        if self.model.num_classes != task.num_classes:
            raise ConfigurationError(
                f"La tâche {task.value} demande {task.num_classes} classes, le modèle en déclare "
                f"{self.model.num_classes}"
            )
        self.model.check_input_size(self.phantom.height, self.phantom.width)
        if self.hyperparams.seed != self.seed:
            object.__setattr__(self, 'hyperparams', self.hyperparams.with_overrides(seed=self.seed))

    @property
    def tissue_task(self) -> TissueTask:
        return TissueTask.parse(self.task)

    def to_dict(self) -> Dict:
        hyperparams = self.hyperparams.to_dict()
        hyperparams.pop('seed')
        split = asdict(self.split)
        split['ratios'] = list(self.split.ratios)
        return {
            'config_version': CONFIG_VERSION,
            'experiment': self.experiment,
            'seed': self.seed,
            'task': self.task,
            'model': self.model.to_dict(),
            'hyperparams': hyperparams,
            'phantom': self.phantom.to_dict(),
            'corpus': asdict(self.corpus),
            'preprocess': self.preprocess.to_dict(),
            'split': split,
            'paths': asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'RunConfig':
        data = dict(data)
        version = data.pop('config_version', CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigurationError(f"Version de configuration non supportée: {version}")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Clés inconnues dans la configuration: {sorted(unknown)}")
        seed = int(data.get('seed', 0))
        hyperparams = dict(data.get('hyperparams') or {})
        hyperparams['seed'] = seed
        model_data = data.get('model')
        return cls(
            experiment=data.get('experiment', 'default'),
            seed=seed,
            task=data.get('task', TissueTask.FIVE_TISSUE.value),
            model=ModelConfig.from_dict(model_data) if model_data else ModelConfig(),
            hyperparams=Hyperparams.from_dict(hyperparams),
            phantom=_section(PhantomParams, data.get('phantom'), 'phantom'),
            corpus=_section(CorpusConfig, data.get('corpus'), 'corpus'),
            preprocess=_section(PreprocessParams, data.get('preprocess'), 'preprocess'),
            split=_section(SplitConfig, data.get('split'), 'split'),
            paths=_section(PathsConfig, data.get('paths'), 'paths'),
        )

    def with_overrides(self, **changes) -> 'RunConfig':
        return replace(self, **changes)

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir) / self.experiment


def load_config(path: Optional[Union[str, Path]] = None, env_file: Optional[str] = None) -> RunConfig:
    """Charge la configuration (fichier JSON optionnel) puis applique l'environnement

    Args:
        path: Fichier JSON; None donne la configuration par défaut
        env_file: Fichier .env; par défaut celui du répertoire courant s'il existe

    Returns:
        RunConfig validée
    """
    load_dotenv(env_file)
    if path is None:
        config = RunConfig()
    else:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: JSON invalide ({e.msg}, ligne {e.lineno})") from e
        config = RunConfig.from_dict(data)

    paths = config.paths
    if os.getenv(ENV_OUTPUT_ROOT):
        paths = replace(paths, output_dir=os.environ[ENV_OUTPUT_ROOT])
    if os.getenv(ENV_REGISTRY):
        paths = replace(paths, registry=os.environ[ENV_REGISTRY])
    return config.with_overrides(paths=paths)


def log_level(cli_level: Optional[str] = None) -> str:
    """Niveau de journalisation: option CLI, sinon THIGHSEG_LOG_LEVEL, sinon INFO"""
    return (cli_level or os.getenv(ENV_LOG_LEVEL) or 'INFO').upper()


def write_snapshot(config: RunConfig, out_dir: Union[str, Path]) -> Path:
    """Écrit la configuration résolue dans le répertoire de sortie"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / SNAPSHOT_NAME
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.debug(f"Configuration écrite: {path}")
    return path
