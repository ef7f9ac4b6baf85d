"""Points de sauvegarde des modèles (format binaire TSCK)"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from app.core.errors import ConfigurationError, ParseError
from app.core.networks import Model, ModelConfig, build_model

logger = logging.getLogger(__name__)

MAGIC = b"TSCK"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct('<4sII')


@dataclass
class Checkpoint:
    """Instantané complet d'un modèle: poids, état Adam, statistiques BN"""
    config: ModelConfig
    params: Dict[str, np.ndarray]
    adam: Dict[str, Tuple[np.ndarray, np.ndarray, int]]
    running_stats: Dict[str, Tuple[np.ndarray, np.ndarray]]
    epoch: int = 0
    seed: int = 0
    dtype: str = 'float32'
    metadata: Dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, epoch: int = 0, seed: int = 0, **metadata) -> 'Checkpoint':
        params, adam = {}, {}
        for name, param in model.named_parameters():
            params[name] = param.data.copy()
            adam[name] = (param.adam_m.copy(), param.adam_v.copy(), param.step_count)
        stats = {name: (s.mean.copy(), s.var.copy()) for name, s in model.running_stats.items()}
        return cls(model.config, params, adam, stats, epoch, seed, str(model.dtype), dict(metadata))

    def to_model(self) -> Model:
        """Reconstruit le modèle et restaure tous les états"""
        model = build_model(self.config, np.random.default_rng(self.seed), np.dtype(self.dtype))
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            missing = sorted(set(named) ^ set(self.params))
            raise ConfigurationError(f"Point de sauvegarde incompatible avec la configuration: {missing[:5]}")
        for name, param in named.items():
            param.data = self.params[name]
            m, v, steps = self.adam[name]
            param.adam_m[...] = m
            param.adam_v[...] = v
            param.step_count = int(steps)
        for name, (mean, var) in self.running_stats.items():
            model.running_stats[name].mean[...] = mean
            model.running_stats[name].var[...] = var
        return model


def _entries(ckpt: Checkpoint) -> List[Tuple[str, np.ndarray]]:
    entries = []
    for name, value in ckpt.params.items():
        entries.append((f"param/{name}", value))
        m, v, _ = ckpt.adam[name]
        entries.append((f"adam_m/{name}", m))
        entries.append((f"adam_v/{name}", v))
    for name, (mean, var) in ckpt.running_stats.items():
        entries.append((f"bn_mean/{name}", mean))
        entries.append((f"bn_var/{name}", var))
    return entries


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> Path:
    """Écrit: signature, version, longueur de l'en-tête JSON, en-tête, blobs little-endian"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs, index, offset = [], [], 0
    for key, array in _entries(ckpt):
        array = np.ascontiguousarray(array)
        data = array.astype(array.dtype.newbyteorder('<')).tobytes()
        index.append({'key': key, 'dtype': array.dtype.str.lstrip('<>|='), 'shape': list(array.shape),
                      'offset': offset, 'nbytes': len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        'config': ckpt.config.to_dict(),
        'epoch': ckpt.epoch,
        'seed': ckpt.seed,
        'dtype': ckpt.dtype,
        'steps': {name: int(steps) for name, (_, _, steps) in ckpt.adam.items()},
        'metadata': ckpt.metadata,
        'entries': index,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    path.write_bytes(PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b''.join(blobs))
    logger.debug(f"Point de sauvegarde écrit: {path} ({offset} octets de données)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Relit un point de sauvegarde écrit par save_checkpoint"""
    data = Path(path).read_bytes()
    if len(data) < PREAMBLE.size:
        raise ParseError(f"{path}: en-tête tronqué", offset=len(data))
    magic, version, header_len = PREAMBLE.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(f"{path}: signature invalide {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: version non supportée {version}", offset=4)
    body_start = PREAMBLE.size + header_len
    if len(data) < body_start:
        raise ParseError(f"{path}: en-tête JSON tronqué", offset=len(data))
    try:
        header = json.loads(data[PREAMBLE.size:body_start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: en-tête JSON illisible ({e})", offset=PREAMBLE.size) from e

    arrays = {}
    for entry in header['entries']:
        start = body_start + entry['offset']
        if start + entry['nbytes'] > len(data):
            raise ParseError(f"{path}: bloc {entry['key']} tronqué", offset=len(data))
        dtype = np.dtype(entry['dtype']).newbyteorder('<')
        array = np.frombuffer(data, dtype=dtype, count=entry['nbytes'] // dtype.itemsize, offset=start)
        arrays[entry['key']] = array.reshape(entry['shape']).astype(dtype.newbyteorder('='))

    params, adam, stats = {}, {}, {}
    for key, array in arrays.items():
        kind, name = key.split('/', 1)
        if kind == 'param':
            params[name] = array
    for name in params:
        adam[name] = (arrays[f"adam_m/{name}"], arrays[f"adam_v/{name}"], header['steps'][name])
    for key in arrays:
        kind, name = key.split('/', 1)
        if kind == 'bn_mean':
            stats[name] = (arrays[key], arrays[f"bn_var/{name}"])

    return Checkpoint(ModelConfig.from_dict(header['config']), params, adam, stats,
                      header['epoch'], header['seed'], header['dtype'], header['metadata'])
