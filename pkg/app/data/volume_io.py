"""Lecture/écriture des coupes au format MCSL et du manifeste de corpus"""
import csv
import logging
import struct
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple, Union

import numpy as np

from app.core.errors import ConfigurationError, LabelRangeError, ParseError
from app.data.dataset import Dataset, Provenance, SliceRecord
from app.data.images import ALL_TISSUES, LabelMap, MultiContrastSlice

logger = logging.getLogger(__name__)

MAGIC = b"MCSL"
FORMAT_VERSION = 1
HEADER = struct.Struct('<4sIII')
MANIFEST_NAME = 'manifest.csv'
SLICES_DIR = 'slices'
REFERENCES_DIR = 'references'
MANIFEST_FIELDS = ['path', 'subject_id', 'slice_index', 'labeled', 'provenance',
                   'annotated', 'truth_path', 'pseudo_path', 'spacing']

PathLike = Union[str, Path]


def encode_volume(image: MultiContrastSlice, label: Optional[LabelMap]) -> bytes:
    """Sérialise une coupe (3 plans float32 + 1 plan u8, little-endian)"""
    height, width = image.shape
    planes = image.stack().astype('<f4')
    labels = label.classes if label is not None else np.zeros((height, width), dtype=np.uint8)
    if labels.shape != (height, width):
        raise ConfigurationError(f"Étiquettes {labels.shape} incompatibles avec l'image {image.shape}")
    return HEADER.pack(MAGIC, FORMAT_VERSION, height, width) + planes.tobytes() + labels.astype(np.uint8).tobytes()


def decode_volume(data: bytes) -> Tuple[np.ndarray, np.ndarray]:
    """Décode un flux MCSL en (plans [3, H, W] float32, étiquettes [H, W] uint8)"""
    if len(data) < HEADER.size:
        raise ParseError("En-tête tronqué", offset=len(data))
    magic, version, height, width = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(f"Signature invalide {magic!r} (attendu {MAGIC!r})", offset=0)
    if version != FORMAT_VERSION:
        raise ParseError(f"Version de format non supportée: {version}", offset=4)
    if height == 0 or width == 0:
        raise ParseError(f"Dimensions invalides: {height}x{width}", offset=8)

    n_pixels = height * width
    label_offset = HEADER.size + 3 * 4 * n_pixels
    expected = label_offset + n_pixels
    if len(data) < expected:
        raise ParseError(f"Fichier tronqué ({len(data)} octets sur {expected})", offset=len(data))
    if len(data) > expected:
        raise ParseError(f"Octets en trop après les étiquettes ({len(data) - expected})", offset=expected)

    planes = np.frombuffer(data, dtype='<f4', count=3 * n_pixels, offset=HEADER.size)
    labels = np.frombuffer(data, dtype=np.uint8, count=n_pixels, offset=label_offset)
    invalid = np.flatnonzero(labels > max(ALL_TISSUES))
    if invalid.size:
        index = int(invalid[0])
        raise LabelRangeError(int(labels[index]), offset=label_offset + index)
    if not np.all(np.isfinite(planes)):
        bad = int(np.flatnonzero(~np.isfinite(planes))[0])
        raise ParseError("Intensité non finie", offset=HEADER.size + 4 * bad)
    return (planes.reshape(3, height, width).astype(np.float32),
            labels.reshape(height, width).copy())


def save_volume(path: PathLike, image: MultiContrastSlice, label: Optional[LabelMap] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(image, label))
    return path


def load_volume(path: PathLike, subject_id: str = '', slice_index: int = 0,
                annotated: FrozenSet[int] = ALL_TISSUES,
                spacing: Tuple[float, float] = (1.0, 1.0)) -> Tuple[MultiContrastSlice, LabelMap]:
    """Charge une coupe MCSL

    Args:
        path: Fichier .mcsl
        subject_id: Identifiant du sujet (absent du fichier)
        slice_index: Indice de la coupe
        annotated: Classes annotées de la carte d'étiquettes
        spacing: Taille du pixel en mm

    Returns:
        Tuple (MultiContrastSlice, LabelMap)
    """
    path = Path(path)
    try:
        planes, labels = decode_volume(path.read_bytes())
    except ParseError:
        logger.error(f"Lecture impossible: {path}")
        raise
    image = MultiContrastSlice.from_array(planes, subject_id or path.stem, slice_index, spacing)
    return image, LabelMap(labels, annotated, spacing)


def _format_classes(classes: FrozenSet[int]) -> str:
    return ';'.join(str(c) for c in sorted(classes))


def _parse_classes(text: str) -> FrozenSet[int]:
    return frozenset(int(c) for c in text.split(';') if c != '')


def save_corpus(dataset: Dataset, out_dir: PathLike) -> Path:
    """Écrit chaque coupe en MCSL et le manifeste CSV

    Disposition: slices/ contient exactement un fichier par coupe (étiquette
    experte); les cartes de référence (vérité complète, pseudo-annotation)
    sont des compagnons rangés sous references/ et listés dans les colonnes
    truth_path et pseudo_path du manifeste.

    Returns:
        Chemin du manifeste
    """
    out_dir = Path(out_dir)
    (out_dir / SLICES_DIR).mkdir(parents=True, exist_ok=True)
    rows: List[Dict] = []
    for record in dataset:
        stem = f"{record.subject_id}_{record.image.slice_index:03d}"
        relative = Path(SLICES_DIR) / f"{stem}.mcsl"
        save_volume(out_dir / relative, record.image, record.expert_label)

        truth_path = pseudo_path = ''
        if record.truth is not None:
            truth_path = (Path(REFERENCES_DIR) / f"{stem}.truth.mcsl").as_posix()
            save_volume(out_dir / truth_path, record.image, record.truth)
        if record.pseudo_label is not None:
            pseudo_path = (Path(REFERENCES_DIR) / f"{stem}.pseudo.mcsl").as_posix()
            save_volume(out_dir / pseudo_path, record.image, record.pseudo_label)

        rows.append({
            'path': relative.as_posix(),
            'subject_id': record.subject_id,
            'slice_index': record.image.slice_index,
            'labeled': int(record.expert_label is not None),
            'provenance': record.provenance.value if record.provenance else '',
            'annotated': _format_classes(record.expert_label.annotated_classes) if record.expert_label else '',
            'truth_path': truth_path,
            'pseudo_path': pseudo_path,
            'spacing': f"{record.image.spacing[0]};{record.image.spacing[1]}",
        })

    manifest = out_dir / MANIFEST_NAME
    with open(manifest, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    logger.info(f"Corpus écrit: {len(rows)} coupes dans {out_dir}")
    return manifest


def read_manifest(corpus_dir: PathLike) -> List[Dict]:
    manifest = Path(corpus_dir) / MANIFEST_NAME
    if not manifest.exists():
        raise ConfigurationError(f"Manifeste introuvable: {manifest}")
    with open(manifest, newline='', encoding='utf-8') as f:
        reader = csv.DictReader(f)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ParseError(f"{manifest}: colonnes manquantes {sorted(missing)}")
        return list(reader)


def load_corpus(corpus_dir: PathLike) -> Dataset:
    """Recharge un corpus écrit par save_corpus (provenance comprise)"""
    corpus_dir = Path(corpus_dir)
    records = []
    for row in read_manifest(corpus_dir):
        subject_id, index = row['subject_id'], int(row['slice_index'])
        spacing = tuple(float(s) for s in row['spacing'].split(';'))
        labeled = row['labeled'] == '1'
        annotated = _parse_classes(row['annotated']) if labeled else ALL_TISSUES
        image, label = load_volume(corpus_dir / row['path'], subject_id, index, annotated, spacing)

        truth = pseudo = None
        if row['truth_path']:
            _, truth = load_volume(corpus_dir / row['truth_path'], subject_id, index, ALL_TISSUES, spacing)
        if row['pseudo_path']:
            _, pseudo = load_volume(corpus_dir / row['pseudo_path'], subject_id, index, ALL_TISSUES, spacing)
        if row['provenance'] == Provenance.PSEUDO.value and pseudo is None:
            raise ParseError(f"Coupe {subject_id}/{index}: provenance pseudo sans fichier de pseudo-annotation")

        records.append(SliceRecord(image, label if labeled else None, pseudo, truth))
    return Dataset(records)
