"""Tests du générateur de fantômes et du corpus"""
import numpy as np
import pytest
from scipy.ndimage import binary_dilation, binary_erosion
from scipy.ndimage import label as ndimage_label

from app.core.errors import ConfigurationError, DegenerateError
from app.data.images import Tissue
from app.data.phantoms import (
    NOMINAL_INTENSITIES, PhantomParams, ThighRegions, check_containment, generate_phantom, make_corpus,
    smooth_bias_field
)


def disk(center, radius, size=32):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.hypot(yy - center[0], xx - center[1]) <= radius


def nested_thigh():
    """Une cuisse centrée: graisse r=10, muscle r=7, os r=3, moelle r=1.5, un pixel d'IMAT"""
    thigh, muscle, bone = disk((16, 16), 10), disk((16, 16), 7), disk((16, 16), 3)
    labels = np.zeros((32, 32), dtype=np.uint8)
    labels[thigh] = Tissue.FAT
    labels[muscle] = Tissue.MUSCLE
    labels[bone] = Tissue.BONE
    labels[disk((16, 16), 1.5)] = Tissue.MARROW
    labels[16, 21] = Tissue.IMAT
    return labels, ThighRegions(thigh, muscle, bone)


class TestGeneratePhantom:

    def test_shapes_and_labels(self, phantom, small_params):
        image, truth = phantom
        assert image.shape == truth.shape == (small_params.height, small_params.width)
        assert len(image.channels) == 3
        assert set(np.unique(truth.classes)) <= {int(t) for t in Tissue}
        assert image.stack().min() >= 0

    def test_reproducible(self, small_params):
        a = generate_phantom(np.random.default_rng(5), small_params)
        b = generate_phantom(np.random.default_rng(5), small_params)
        assert np.array_equal(a[0].stack(), b[0].stack())
        assert np.array_equal(a[1].classes, b[1].classes)

    def test_noiseless_unbiased_intensities(self):
        params = PhantomParams(height=32, width=32, noise_sigma=0.0, bias_strength=0.0)
        image, truth = generate_phantom(np.random.default_rng(0), params)
        expected = np.asarray(NOMINAL_INTENSITIES, dtype=np.float32)[truth.classes]
        assert np.array_equal(np.moveaxis(image.stack(), 0, -1), expected)

    @pytest.mark.parametrize("seed", range(5))
    def test_every_tissue_present(self, seed):
        _, truth = generate_phantom(np.random.default_rng(seed), PhantomParams())
        counts = np.bincount(truth.classes.reshape(-1), minlength=len(Tissue))
        assert np.all(counts > 0)

    @pytest.mark.parametrize("seed", range(6))
    @pytest.mark.parametrize("size", [32, 64])
    def test_tissues_are_nested(self, seed, size):
        _, truth = generate_phantom(np.random.default_rng(seed), PhantomParams(height=size, width=size))
        labels = truth.classes
        bone = np.isin(labels, (Tissue.BONE, Tissue.MARROW))
        assert (bone & ~binary_erosion(labels != Tissue.BACKGROUND)).sum() == 0

        around_marrow = binary_dilation(labels == Tissue.MARROW)
        assert set(np.unique(labels[around_marrow]).tolist()) <= {Tissue.MARROW, Tissue.BONE, Tissue.MUSCLE}

        components, count = ndimage_label(np.isin(labels, (Tissue.MUSCLE, Tissue.IMAT, Tissue.BONE, Tissue.MARROW)))
        sizes = np.bincount(components.reshape(-1), minlength=count + 1)
        sizes[0] = 0
        compartments = np.isin(components, np.argsort(sizes)[-2:])
        imat = labels == Tissue.IMAT
        assert (imat & ~compartments).sum() == 0

    def test_subject_and_slice_ids(self, small_params):
        image, _ = generate_phantom(np.random.default_rng(0), small_params, 'S042', 3)
        assert image.key == ('S042', 3)

    @pytest.mark.parametrize("changes", [
        {'height': 8},
        {'bias_strength': 1.0},
        {'noise_sigma': -1.0},
        {'bone_radius': 0.1},
        {'outer_radius': 0.99},
        {'intensities': ((0.0, 0.0, 0.0),)},
    ])
    def test_invalid_parameters(self, changes):
        with pytest.raises(ConfigurationError):
            PhantomParams(**changes)

    def test_params_round_trip(self, small_params):
        assert PhantomParams(**small_params.to_dict()) == small_params


class TestContainment:

    def test_nested_thigh_passes(self):
        labels, regions = nested_thigh()
        check_containment(labels, [regions])

    @pytest.mark.parametrize("pixel,tissue,message", [
        ((16, 25), Tissue.IMAT, "IMAT hors du compartiment"),
        ((16, 19), Tissue.IMAT, "IMAT hors du compartiment"),
        ((16, 21), Tissue.MARROW, "moelle hors de l'os"),
        ((1, 1), Tissue.BONE, "hors des cuisses"),
    ])
    def test_misplaced_tissue(self, pixel, tissue, message):
        labels, regions = nested_thigh()
        labels[pixel] = tissue
        with pytest.raises(DegenerateError, match=message):
            check_containment(labels, [regions])

    def test_bone_reaching_the_skin(self):
        labels, regions = nested_thigh()
        oversized = ThighRegions(regions.thigh, regions.muscle, disk((16, 16), 10))
        with pytest.raises(DegenerateError, match="os déborde"):
            check_containment(labels, [oversized])


class TestBiasField:

    def test_zero_strength_is_flat(self):
        assert np.array_equal(smooth_bias_field((8, 8), 0.0, np.random.default_rng(0)), np.ones((8, 8)))

    def test_bounded_by_strength(self):
        field = smooth_bias_field((32, 32), 0.2, np.random.default_rng(0))
        assert field.min() >= 0.8 - 1e-12 and field.max() <= 1.2 + 1e-12
        assert field.std() > 0


class TestMakeCorpus:

    def test_partial_imat_annotation(self, small_params):
        dataset = make_corpus(np.random.default_rng(0), 10, 2, 0.4, small_params)
        assert len(dataset) == 20
        labeled = dataset.imat_labeled_subjects()
        assert len(labeled) == 4
        assert len(dataset.imat_unlabeled_subjects()) == 6
        for record in dataset:
            if record.subject_id in labeled:
                assert np.array_equal(record.expert_label.classes, record.truth.classes)
            else:
                assert Tissue.IMAT not in record.expert_label.annotated_classes
                assert not record.expert_label.mask(Tissue.IMAT).any()
                assert np.array_equal(record.expert_label.classes, record.truth.without_imat().classes)

    def test_fraction_rounding(self, small_params):
        dataset = make_corpus(np.random.default_rng(0), 5, 1, 0.5, small_params)
        assert len(dataset.imat_labeled_subjects()) == 3

    def test_reproducible(self, small_params):
        a = make_corpus(np.random.default_rng(7), 3, 1, 0.5, small_params)
        b = make_corpus(np.random.default_rng(7), 3, 1, 0.5, small_params)
        assert [r.subject_id for r in a] == ['S001', 'S002', 'S003']
        for ra, rb in zip(a, b):
            assert np.array_equal(ra.image.stack(), rb.image.stack())

    @pytest.mark.parametrize("n,spp,fraction", [(0, 1, 0.5), (2, 0, 0.5), (2, 1, 1.5)])
    def test_invalid_arguments(self, small_params, n, spp, fraction):
        with pytest.raises(ConfigurationError):
            make_corpus(np.random.default_rng(0), n, spp, fraction, small_params)
