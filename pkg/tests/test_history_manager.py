"""Tests de l'historique d'entraînement et du registre TinyDB"""
import csv
import json

import pytest

from app.intelligence.history_manager import HistoryManager, RunHistory, epochs_to_converge


def history_from(losses, dice=None):
    history = RunHistory()
    for i, loss in enumerate(losses):
        history.append(2 * loss, loss, dice[i] if dice else 0.5)
    return history


class TestEpochsToConverge:

    def test_flattening_loss(self):
        losses = [2.0 - 0.1 * e for e in range(10)] + [1.1] * 20
        assert epochs_to_converge(history_from(losses)) == 10

    def test_increasing_loss_never_converges(self):
        assert epochs_to_converge(history_from([float(v) for v in range(1, 21)])) is None

    def test_history_shorter_than_patience(self):
        assert epochs_to_converge(history_from([1.0] * 5)) is None

    def test_empty_history(self):
        assert RunHistory().epochs_to_converge is None

    def test_custom_rule(self):
        losses = [1.0, 1.04, 1.0, 1.0]
        assert epochs_to_converge(history_from(losses), tolerance=1.05, patience=2) == 1
        assert epochs_to_converge(history_from(losses), tolerance=1.01, patience=2) == 3


class TestRunHistory:

    def test_epochs_are_numbered_from_one(self):
        history = history_from([3.0, 2.0, 1.0])
        assert history.epochs == [1, 2, 3]
        assert len(history) == 3

    def test_best_epoch_takes_first_maximum(self):
        history = history_from([1.0] * 4, dice=[0.2, 0.7, 0.7, 0.1])
        assert history.best_epoch == 2
        assert RunHistory().best_epoch is None

    def test_csv_round_trip(self, tmp_path):
        history = history_from([1.5, 1.25, 1.125], dice=[0.25, 0.5, 0.75])
        path = history.write_csv(tmp_path / 'logs' / 'run_log.csv')
        assert path.read_text(encoding='utf-8').splitlines()[0] == 'epoch,train_loss,val_loss,val_dice'
        assert RunHistory.read_csv(path) == history


class TestHistoryManager:

    @pytest.fixture
    def manager(self, tmp_path):
        manager = HistoryManager(str(tmp_path / 'registry' / 'runs.json'))
        yield manager
        manager.close()

    def run(self, **overrides):
        data = {'command': 'train', 'experiment': 'exp', 'model_tag': 'tiramisu-tiny-regular',
                'dropout': 'regular', 'architecture': 'tiramisu', 'fold': 0, 'seed': 0,
                'best_val_dice': 0.5, 'epochs_to_converge': None, 'checkpoint': 'runs/exp/checkpoint.tsck'}
        data.update(overrides)
        return data

    def test_record_and_query(self, manager):
        manager.record_run(self.run(timestamp='2024-01-01T00:00:00'))
        manager.record_run(self.run(experiment='other', timestamp='2024-01-02T00:00:00'))
        assert [r['experiment'] for r in manager.get_recent()] == ['other', 'exp']
        assert len(manager.get_by_experiment('exp')) == 1

    def test_timestamp_is_added(self, manager):
        manager.record_run(self.run())
        assert 'timestamp' in manager.get_recent(1)[0]

    def test_stats(self, manager):
        assert manager.get_stats()['total_runs'] == 0
        manager.record_run(self.run(best_val_dice=0.6))
        manager.record_run(self.run(dropout='variational', best_val_dice=0.9))
        manager.record_run(self.run(dropout='targeted', architecture='unet_baseline', best_val_dice=None))
        stats = manager.get_stats()
        assert stats['total_runs'] == 3
        assert stats['variants'] == {'regular': 1, 'variational': 1, 'targeted': 1}
        assert stats['architectures'] == {'tiramisu': 2, 'unet_baseline': 1}
        assert stats['best_run']['dropout'] == 'variational'

    def test_export(self, manager, tmp_path):
        manager.record_run(self.run())
        assert manager.export_history(str(tmp_path / 'runs.json'), 'json')
        assert json.loads((tmp_path / 'runs.json').read_text(encoding='utf-8'))[0]['experiment'] == 'exp'
        assert manager.export_history(str(tmp_path / 'runs.csv'), 'csv')
        with open(tmp_path / 'runs.csv', newline='', encoding='utf-8') as f:
            assert next(csv.DictReader(f))['model_tag'] == 'tiramisu-tiny-regular'
        assert not manager.export_history(str(tmp_path / 'runs.xml'), 'xml')

    def test_clear(self, manager):
        manager.record_run(self.run())
        manager.record_run(self.run())
        assert manager.clear_all() == 2
        assert manager.get_recent() == []
