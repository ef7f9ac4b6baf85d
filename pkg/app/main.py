"""Segmentation multi-tissus de la cuisse - interface en ligne de commande"""
import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from app.core.checkpoint import load_checkpoint, save_checkpoint
from app.core.errors import ConfigurationError, ThighSegError
from app.data.dataset import make_splits
from app.data.phantoms import make_corpus
from app.data.volume_io import load_corpus, save_corpus
from app.design.image_generator import ImageGenerator
from app.features.cross_validation import cross_validate
from app.features.evaluation import evaluate_checkpoint, write_evaluation
from app.features.experiments import contrast_ablation, convergence_comparison, write_rows_csv
from app.features.self_training import self_train
from app.features.training import train_supervised
from app.intelligence.history_manager import HistoryManager
from app.intelligence.metrics import write_aggregate_csv, write_boxplot_csv, write_report_csv
from app.preprocessing.pipeline import preprocess_dataset
from app.utils.config import RunConfig, load_config, log_level, write_snapshot

logger = logging.getLogger(__name__)

COMMANDS = ('phantom', 'preprocess', 'train', 'selftrain', 'crossval', 'evaluate', 'ablation', 'convergence',
            'registry')
EXPORT_FORMATS = {'.json': 'json', '.csv': 'csv'}
ARCH_CHOICES = {'tiramisu': 'tiramisu', 'unet': 'unet_baseline'}
CONTRAST_CHOICES = {'0': (0,), '1': (1,), '2': (2,), 'all': (0, 1, 2)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='app.main', description="Segmentation multi-tissus de la cuisse (IRM)")
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', help="Fichier de configuration JSON")
    parser.add_argument('--seed', type=int)
    parser.add_argument('--dropout', choices=('regular', 'variational', 'targeted'))
    parser.add_argument('--arch', choices=tuple(ARCH_CHOICES))
    parser.add_argument('--contrasts', choices=tuple(CONTRAST_CHOICES))
    parser.add_argument('--out', help="Répertoire de sortie de la commande")
    parser.add_argument('--corpus', help="Corpus d'entrée (manifest.csv)")
    parser.add_argument('--checkpoint', help="Point de sauvegarde à évaluer")
    parser.add_argument('--fold', type=int, help="Pli utilisé par train et evaluate")
    parser.add_argument('--epochs', type=int, help="Nombre maximal d'époques")
    parser.add_argument('--with-unet', action='store_true', help="ablation: ajoute le U-Net de référence")
    parser.add_argument('--no-overlays', action='store_true', help="evaluate: pas d'images de superposition")
    parser.add_argument('--qc', action='store_true', help="preprocess: images PGM avant/après par contraste")
    parser.add_argument('--export', help="registry: exporte le registre (.json ou .csv)")
    parser.add_argument('--clear', action='store_true', help="registry: vide le registre")
    parser.add_argument('--log-level')
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Fichier de configuration, puis environnement, puis options de la ligne de commande"""
    config = load_config(args.config)
    model = config.model
    if args.dropout:
        model = model.with_overrides(dropout=replace(model.dropout, variant=args.dropout))
    if args.arch:
        model = model.with_overrides(architecture=ARCH_CHOICES[args.arch])
    if args.contrasts:
        model = model.with_overrides(contrasts=CONTRAST_CHOICES[args.contrasts])
    changes = {'model': model}
    if args.seed is not None:
        changes['seed'] = args.seed
    if args.epochs is not None:
        changes['hyperparams'] = config.hyperparams.with_overrides(max_epochs=args.epochs)
    if args.fold is not None:
        changes['split'] = replace(config.split, fold=args.fold)
    if args.corpus:
        changes['paths'] = replace(config.paths, corpus_dir=args.corpus)
    return config.with_overrides(**changes)


def _registry(config: RunConfig) -> HistoryManager:
    return HistoryManager(config.paths.registry)


def _record(config: RunConfig, command: str, **fields):
    registry = _registry(config)
    registry.record_run({
        'command': command, 'experiment': config.experiment, 'model_tag': config.model.model_tag,
        'dropout': config.model.dropout.tag, 'architecture': config.model.architecture,
        'seed': config.seed, **fields,
    })
    registry.close()


def _split(config: RunConfig, subjects: List[str]):
    return make_splits(subjects, config.split.ratios, config.split.k, config.seed)


def cmd_phantom(config: RunConfig, out_dir: Path) -> int:
    corpus = config.corpus
    dataset = make_corpus(np.random.default_rng(config.seed), corpus.n_subjects, corpus.slices_per_subject,
                          corpus.imat_labeled_fraction, config.phantom)
    save_corpus(dataset, out_dir)
    write_snapshot(config, out_dir)
    summary = dataset.summary()
    print(f"✅ Corpus fantôme: {summary['subjects']} sujets, {summary['slices']} coupes -> {out_dir}")
    return 0


def cmd_preprocess(config: RunConfig, in_dir: Path, out_dir: Path, qc_images: bool = False) -> int:
    dataset = load_corpus(in_dir)
    fold = _split(config, dataset.subjects).fold(config.split.fold)
    processed, scales, qc_rows = preprocess_dataset(dataset, fold.train, config.preprocess)
    save_corpus(processed, out_dir)
    if qc_images:
        generator = ImageGenerator()
        for before, after in zip(dataset, processed):
            stem = f"{before.subject_id}_{before.image.slice_index:03d}"
            generator.save_contrasts(out_dir / 'qc', f"{stem}_raw", before.image)
            generator.save_contrasts(out_dir / 'qc', f"{stem}_{'-'.join(after.image.processing)}", after.image)
    with open(out_dir / 'qc.csv', 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=list(qc_rows[0]))
        writer.writeheader()
        writer.writerows(qc_rows)
    (out_dir / 'scales.json').write_text(
        json.dumps([s.to_dict() for s in scales], indent=2, sort_keys=True) + '\n', encoding='utf-8')
    write_snapshot(config, out_dir)
    print(f"✅ Prétraitement: {len(processed)} coupes, échelles apprises sur {len(fold.train)} sujets -> {out_dir}")
    return 0


def cmd_train(config: RunConfig, out_dir: Path) -> int:
    dataset = load_corpus(config.paths.corpus_dir)
    fold = _split(config, dataset.subjects).fold(config.split.fold)
    checkpoint, history = train_supervised(config.model, dataset, fold, config.hyperparams, config.tissue_task)
    ckpt_path = save_checkpoint(out_dir / 'checkpoint.tsck', checkpoint)
    history.write_csv(out_dir / 'run_log.csv')
    evaluation = evaluate_checkpoint(checkpoint, dataset, fold.test, fold=fold.fold)
    write_report_csv(out_dir / 'metrics.csv', [evaluation.report])
    write_snapshot(config, out_dir)
    _record(config, 'train', fold=fold.fold, best_val_dice=max(history.val_dice),
            epochs_to_converge=history.epochs_to_converge, checkpoint=str(ckpt_path))
    print(f"✅ Entraînement {config.model.model_tag}: {len(history)} époques, "
          f"Dice test moyen {evaluation.report.mean_dice():.4f} -> {out_dir}")
    return 0


def cmd_selftrain(config: RunConfig, out_dir: Path) -> int:
    dataset = load_corpus(config.paths.corpus_dir)
    result = self_train(config.model, dataset, config.hyperparams, config.split.ratios)
    save_checkpoint(out_dir / 'step1.tsck', result.step1_checkpoint)
    ckpt_path = save_checkpoint(out_dir / 'checkpoint.tsck', result.checkpoint)
    result.step1_history.write_csv(out_dir / 'run_log_step1.csv')
    result.history.write_csv(out_dir / 'run_log.csv')
    write_report_csv(out_dir / 'metrics_step1.csv', [result.step1_report])
    write_report_csv(out_dir / 'metrics.csv', [result.report])
    write_boxplot_csv(out_dir / 'per_subject.csv', result.evaluation.per_subject)
    write_snapshot(config, out_dir)
    _record(config, 'selftrain', best_val_dice=max(result.history.val_dice),
            epochs_to_converge=result.history.epochs_to_converge, checkpoint=str(ckpt_path))
    summary = result.merged.summary()
    print(f"✅ Auto-apprentissage: {summary['expert']} coupes expertes + {summary['pseudo']} pseudo-annotées")
    print(f"   IMAT (test): étape 1 {result.step1_report.row(3).dice}, étape 3 {result.report.row(3).dice}")
    return 0


def cmd_crossval(config: RunConfig, out_dir: Path) -> int:
    dataset = load_corpus(config.paths.corpus_dir)
    result = cross_validate(config.model, dataset, config.hyperparams, config.split.k,
                            config.split.ratios, config.tissue_task)
    for fold in result.folds:
        save_checkpoint(out_dir / f"fold{fold.fold}.tsck", fold.checkpoint)
        fold.history.write_csv(out_dir / f"run_log_fold{fold.fold}.csv")
        _record(config, 'crossval', fold=fold.fold, best_val_dice=max(fold.history.val_dice),
                epochs_to_converge=fold.history.epochs_to_converge,
                checkpoint=str(out_dir / f"fold{fold.fold}.tsck"))
    write_report_csv(out_dir / 'metrics.csv', result.reports)
    write_aggregate_csv(out_dir / 'aggregate.csv', result.reports, config.model.model_tag)
    write_boxplot_csv(out_dir / 'per_subject.csv', [r for f in result.folds for r in f.evaluation.per_subject])
    write_snapshot(config, out_dir)
    print(f"✅ Validation croisée: {result.plan.k} plis -> {out_dir}")
    return 0


def cmd_evaluate(config: RunConfig, checkpoint_path: Path, out_dir: Path, overlays: bool = True) -> int:
    dataset = load_corpus(config.paths.corpus_dir)
    checkpoint = load_checkpoint(checkpoint_path)
    task = config.tissue_task
    if checkpoint.config.num_classes != task.num_classes:
        raise ConfigurationError(
            f"Tâche demandée {task.value} ({task.num_classes} classes) incompatible avec le point de "
            f"sauvegarde ({checkpoint.config.num_classes} classes)"
        )
    fold = _split(config, dataset.subjects).fold(config.split.fold)
    evaluation = evaluate_checkpoint(checkpoint, dataset, fold.test, fold=fold.fold,
                                     classes=task.required_annotations)
    write_evaluation(out_dir, evaluation, overlays)
    write_snapshot(config, out_dir)
    print(f"✅ Évaluation: {len(evaluation.per_subject)} sujets de test, "
          f"Dice moyen {evaluation.report.mean_dice():.4f} -> {out_dir}")
    return 0


def cmd_ablation(config: RunConfig, out_dir: Path, with_unet: bool = False) -> int:
    dataset = load_corpus(config.paths.corpus_dir)
    architectures = [config.model.architecture]
    if with_unet and 'unet_baseline' not in architectures:
        architectures.append('unet_baseline')
    rows = contrast_ablation(config.model, dataset, config.hyperparams, (config.seed,), architectures)
    write_rows_csv(out_dir / 'ablation.csv', rows)
    write_snapshot(config, out_dir)
    print(f"✅ Ablation des contrastes: {len(rows)} lignes -> {out_dir / 'ablation.csv'}")
    return 0


def cmd_convergence(config: RunConfig, out_dir: Path) -> int:
    dataset = load_corpus(config.paths.corpus_dir)
    rows = convergence_comparison(config.model, dataset, config.hyperparams, (config.seed,))
    write_rows_csv(out_dir / 'convergence.csv', rows)
    write_snapshot(config, out_dir)
    for row in rows:
        print(f"   {row['variant']}: convergence à l'époque {row['epochs_to_converge']}")
    return 0


def cmd_registry(config: RunConfig, export_path: Optional[str] = None, clear: bool = False) -> int:
    registry = _registry(config)
    try:
        stats = registry.get_stats()
        print(f"📊 Registre {config.paths.registry}: {stats['total_runs']} exécutions")
        for variant, count in stats['variants'].items():
            print(f"   dropout {variant}: {count}")
        for architecture, count in stats['architectures'].items():
            print(f"   architecture {architecture}: {count}")
        if stats['best_run']:
            best = stats['best_run']
            print(f"   meilleur: {best.get('model_tag')} (Dice validation {best['best_val_dice']:.4f})")
        if export_path:
            fmt = EXPORT_FORMATS.get(Path(export_path).suffix.lower())
            if fmt is None:
                raise ConfigurationError(f"Format d'export inconnu: {export_path} (choix: .json, .csv)")
            Path(export_path).parent.mkdir(parents=True, exist_ok=True)
            if not registry.export_history(export_path, fmt):
                print(f"❌ Export impossible: {export_path}")
                return 1
            print(f"✅ Registre exporté -> {export_path}")
        if clear:
            print(f"🗑️ {registry.clear_all()} exécutions supprimées")
    finally:
        registry.close()
    return 0


def run(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    command = args.command
    if command == 'registry':
        return cmd_registry(config, args.export, args.clear)
    out_dir = Path(args.out) if args.out else config.output_dir / args.command
    out_dir.mkdir(parents=True, exist_ok=True)
    if command == 'phantom':
        return cmd_phantom(config, out_dir)
    if command == 'preprocess':
        return cmd_preprocess(config, Path(config.paths.corpus_dir), out_dir, args.qc)
    if command == 'train':
        return cmd_train(config, out_dir)
    if command == 'selftrain':
        return cmd_selftrain(config, out_dir)
    if command == 'crossval':
        return cmd_crossval(config, out_dir)
    if command == 'evaluate':
        if not args.checkpoint:
            print("❌ evaluate: --checkpoint est obligatoire")
            return 2
        return cmd_evaluate(config, Path(args.checkpoint), out_dir, not args.no_overlays)
    if command == 'ablation':
        return cmd_ablation(config, out_dir, args.with_unet)
    return cmd_convergence(config, out_dir)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=log_level(args.log_level),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return run(args)
    except ThighSegError as e:
        print(f"❌ {type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        print(f"❌ Erreur d'entrée/sortie: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
