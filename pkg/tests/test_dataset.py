"""Tests des cartes d'étiquettes, du corpus et du découpage par sujet"""
import numpy as np
import pytest

from app.core.errors import ConfigurationError, ProtocolError
from app.data.dataset import (
    Dataset, FoldSplit, Provenance, SliceRecord, SplitPlan, make_splits, merge_labels
)
from app.data.images import ALL_TISSUES, LabelMap, Tissue, TissueTask, tissue_areas

NO_IMAT = ALL_TISSUES - {int(Tissue.IMAT)}
SUBJECTS = [f"S{i:03d}" for i in range(1, 11)]


class TestLabelMap:

    def test_imat_requires_annotation(self):
        with pytest.raises(ConfigurationError, match="IMAT"):
            LabelMap(np.array([[1, 3]]), NO_IMAT)

    def test_out_of_range_value(self):
        with pytest.raises(ConfigurationError, match="9"):
            LabelMap(np.array([[0, 9]]))

    def test_without_imat(self):
        merged = LabelMap(np.array([[1, 3, 2]])).without_imat()
        assert merged.classes.tolist() == [[1, 1, 2]]
        assert Tissue.IMAT not in merged.annotated_classes

    def test_read_only(self):
        labels = LabelMap(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            labels.classes[0, 0] = 1


class TestTissueTask:

    def test_two_tissue_folding(self):
        encoded = TissueTask.TWO_TISSUE.encode(np.array([[0, 1, 2, 3, 4, 5, 255]]))
        assert encoded.tolist() == [[0, 1, 2, 1, 0, 0, 255]]

    def test_four_tissue_round_trip_of_classes(self):
        task = TissueTask.FOUR_TISSUE
        assert task.decode(task.encode(np.array([4, 5, 3]))).tolist() == [4, 5, 1]

    def test_decode_out_of_range(self):
        with pytest.raises(ConfigurationError):
            TissueTask.TWO_TISSUE.decode(np.array([3]))

    def test_lookup_by_classes(self):
        assert TissueTask.for_classes(6) is TissueTask.FIVE_TISSUE
        with pytest.raises(ConfigurationError):
            TissueTask.for_classes(4)

    def test_parse(self):
        assert TissueTask.parse('four_tissue') is TissueTask.FOUR_TISSUE
        with pytest.raises(ConfigurationError, match="two_tissue"):
            TissueTask.parse('seven_tissue')


def test_tissue_areas_use_pixel_spacing():
    areas = tissue_areas(LabelMap(np.array([[1, 1, 2], [0, 0, 0]]), spacing=(0.5, 2.0)))
    assert areas[Tissue.MUSCLE] == 2.0
    assert areas[Tissue.FAT] == 1.0
    assert areas[Tissue.IMAT] == 0.0


class TestMergeLabels:

    def test_imat_only_inside_expert_muscle(self):
        expert = LabelMap(np.array([[1, 1, 2, 0]]), NO_IMAT)
        pseudo = LabelMap(np.array([[3, 1, 3, 3]]))
        merged = merge_labels(expert, pseudo)
        assert merged.classes.tolist() == [[3, 1, 2, 0]]
        assert Tissue.IMAT in merged.annotated_classes

    def test_expert_with_imat_wins(self):
        expert = LabelMap(np.array([[1, 3]]))
        assert merge_labels(expert, LabelMap(np.array([[3, 1]]))) is expert

    def test_shape_mismatch(self):
        with pytest.raises(ConfigurationError):
            merge_labels(LabelMap(np.zeros((2, 2))), LabelMap(np.zeros((2, 3))))


class TestSliceRecord:

    def test_provenance_and_coverage(self, phantom):
        image, truth = phantom
        record = SliceRecord(image, expert_label=truth.without_imat(), truth=truth)
        assert record.provenance is Provenance.EXPERT
        assert record.covers(TissueTask.FOUR_TISSUE)
        assert not record.covers(TissueTask.FIVE_TISSUE)

        pseudo = record.with_pseudo_label(truth)
        assert pseudo.provenance is Provenance.PSEUDO
        assert pseudo.covers(TissueTask.FIVE_TISSUE)
        assert pseudo.expert_label is record.expert_label

    def test_unlabeled(self, phantom):
        record = SliceRecord(phantom[0])
        assert record.provenance is None
        assert not record.covers(TissueTask.TWO_TISSUE)
        assert record.evaluation_label() is None


class TestDataset:

    def test_duplicates_rejected(self, corpus):
        with pytest.raises(ConfigurationError):
            Dataset(list(corpus) + [corpus[0]])

    def test_subset_keeps_order(self, corpus):
        subset = corpus.subset(['S004', 'S002'])
        assert subset.subjects == ['S002', 'S004']

    def test_summary(self, corpus):
        updated = corpus.replace([corpus[0].with_pseudo_label(corpus[0].truth)])
        assert updated.summary() == {'subjects': 6, 'slices': 6, 'expert': 5, 'pseudo': 1, 'unlabeled': 0}
        assert corpus.summary()['pseudo'] == 0

    def test_covering(self, corpus):
        assert len(corpus.covering(TissueTask.FIVE_TISSUE)) == len(corpus)
        assert len(corpus.covering(TissueTask.TWO_TISSUE)) == len(corpus)


class TestMakeSplits:

    def test_five_folds_partition_subjects(self):
        plan = make_splits(SUBJECTS, (70, 10, 20), k=5, seed=0)
        assert plan.k == 5
        tested = [s for f in plan.folds for s in f.test]
        assert sorted(tested) == SUBJECTS
        for f in plan.folds:
            assert len(f.test) == 2 and len(f.validation) == 1 and len(f.train) == 7
            assert set(f.train) | set(f.validation) | set(f.test) == set(SUBJECTS)

    def test_deterministic(self):
        assert make_splits(SUBJECTS, seed=3) == make_splits(list(reversed(SUBJECTS)), seed=3)

    def test_train_validation_only(self):
        fold = make_splits(SUBJECTS, (90, 10), k=1, seed=0).fold(0)
        assert len(fold.train) == 9 and len(fold.validation) == 1 and fold.test == ()

    def test_single_draw(self):
        fold = make_splits(SUBJECTS, (70, 10, 20), k=1, seed=1).fold(0)
        assert (len(fold.train), len(fold.validation), len(fold.test)) == (7, 1, 2)
        assert fold.role_of(fold.test[0]) == 'test'
        assert fold.role_of('S999') is None

    def test_two_ratios_need_single_fold(self):
        with pytest.raises(ConfigurationError, match="k = 1"):
            make_splits(SUBJECTS, (90, 10), k=5)

    @pytest.mark.parametrize("subjects,ratios,k", [
        (SUBJECTS[:3], (70, 10, 20), 5),
        (SUBJECTS, (70, 10, 10), 5),
        (SUBJECTS, (70, 10, 20), 0),
        (SUBJECTS[:1], (90, 10), 1),
    ])
    def test_invalid_plans(self, subjects, ratios, k):
        with pytest.raises(ConfigurationError):
            make_splits(subjects, ratios, k)

    def test_missing_fold(self):
        with pytest.raises(ConfigurationError):
            make_splits(SUBJECTS).fold(5)

    def test_overlap_detected(self):
        plan = SplitPlan((FoldSplit(0, ('S001', 'S002'), ('S002',), ('S003',)),), (70, 10, 20), 0)
        with pytest.raises(ProtocolError):
            plan.check()
