"""Tests de la validation croisée par sujet"""
import numpy as np
import pytest

from app.core.networks import ModelConfig
from app.data.images import Tissue
from app.features.cross_validation import cross_validate, fold_seed
from app.features.training import Hyperparams
from app.utils.hashing import derive_seed
from tests.conftest import small_corpus

QUICK = Hyperparams(learning_rate=1e-3, batch_size=2, max_epochs=1, early_stop=False, seed=3)


def test_fold_seed_is_derived():
    assert fold_seed(3, 1) == derive_seed(3, 1)
    assert len({fold_seed(3, f) for f in range(5)}) == 5


@pytest.mark.slow
class TestCrossValidate:

    @pytest.fixture(scope='class')
    def data(self):
        return small_corpus(n_subjects=10)

    @pytest.fixture(scope='class')
    def result(self, data):
        return cross_validate(ModelConfig.from_preset('tiny', input_size=32), data, QUICK, k=5)

    def test_every_subject_is_tested_once(self, data, result):
        tested = [s for split in result.plan.folds for s in split.test]
        assert sorted(tested) == sorted(data.subjects)
        for fold in result.folds:
            assert [r.subject for r in fold.evaluation.per_subject] == list(result.plan.fold(fold.fold).test)

    def test_fold_seeds(self, result):
        assert [f.fold for f in result.folds] == list(range(5))
        for fold in result.folds:
            assert fold.seed == fold_seed(QUICK.seed, fold.fold)
            assert fold.checkpoint.seed == fold.seed
            assert fold.report.fold == fold.fold

    def test_aggregate(self, result):
        aggregate = result.aggregate
        assert set(aggregate) == {int(t) for t in Tissue}
        for metrics in aggregate.values():
            assert set(metrics) == {'dice', 'sensitivity', 'specificity', 'hd95_mm'}
        mean, std = aggregate[int(Tissue.MUSCLE)]['dice']
        assert 0.0 <= mean <= 1.0 and std >= 0.0
        assert len(result.reports) == 5

    def test_parallel_folds_match(self, data, result):
        parallel = cross_validate(ModelConfig.from_preset('tiny', input_size=32), data, QUICK, k=5, workers=2)
        for serial_fold, parallel_fold in zip(result.folds, parallel.folds):
            assert serial_fold.history == parallel_fold.history
            for name, value in serial_fold.checkpoint.params.items():
                assert np.array_equal(value, parallel_fold.checkpoint.params[name]), name
