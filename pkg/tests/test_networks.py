"""Tests des réseaux Tiramisu et U-Net"""
from dataclasses import dataclass

import numpy as np
import pytest

from app.core.dropouts import DropoutSpec
from app.core.errors import ConfigurationError, ShapeError
from app.core.layers import softmax, softmax_cross_entropy
from app.core.networks import (
    ModelConfig, UNetBaseline, build_model, build_unet_baseline, predict_classes, predict_labels
)
from app.core.optim import adam_step
from app.core.tensor import ComputationTape, Tensor, backward
from app.data.images import Tissue, TissueTask
from tests.conftest import rel_error, small_corpus


def conv_count(c_in, c_out, k):
    return c_out * c_in * k * k + c_out


def dense_block_count(channels, layers, growth):
    return sum(2 * (channels + l * growth) + conv_count(channels + l * growth, growth, 3)
               for l in range(layers))


def tiramisu_count(cfg: ModelConfig) -> int:
    """Nombre de paramètres attendu, recompté couche par couche"""
    growth = cfg.growth_rate
    total = conv_count(cfg.input_channels, cfg.first_conv_filters, 3)
    channels, skips = cfg.first_conv_filters, []
    for layers in cfg.layers_per_block:
        total += dense_block_count(channels, layers, growth)
        channels += layers * growth
        skips.append(channels)
        total += 2 * channels + conv_count(channels, channels, 1)
    total += dense_block_count(channels, cfg.bottleneck_layers, growth)
    upsampled = cfg.bottleneck_layers * growth
    blocks = list(cfg.layers_per_block)
    for j, layers in enumerate(reversed(blocks)):
        total += conv_count(upsampled, upsampled, 3)
        block_in = upsampled + skips[len(blocks) - 1 - j]
        total += dense_block_count(block_in, layers, growth)
        upsampled = block_in + layers * growth if j == len(blocks) - 1 else layers * growth
    return total + conv_count(upsampled, cfg.num_classes, 1)


@dataclass
class FixedLogits:
    """Bouchon renvoyant toujours les mêmes logits"""
    config: ModelConfig
    logits: np.ndarray

    def forward(self, batch, mode='eval', rng=None):
        n = batch.shape[0]
        return Tensor(np.repeat(self.logits[None], n, axis=0))


class TestTiramisu:

    def test_output_shape(self, rng, tiny_config):
        model = build_model(tiny_config, rng)
        logits = model.forward(np.zeros((2, 3, 32, 32), dtype=np.float32), 'eval')
        assert logits.shape == (2, 6, 32, 32)

    def test_tiny_parameter_count(self, rng, tiny_config):
        model = build_model(tiny_config, rng)
        assert model.parameter_count() == 42870
        assert model.parameter_count() == tiramisu_count(tiny_config)

    def test_variational_sites_add_one_parameter_each(self, rng):
        config = ModelConfig.from_preset('tiny', input_size=32, dropout=DropoutSpec(variant='variational'))
        model = build_model(config, rng)
        assert len(model.variational_states()) == 12
        assert model.parameter_count() == 42870 + 12
        names = [name for name, _ in model.named_parameters() if name.endswith('.log_alpha')]
        assert len(names) == 12

    def test_reference_preset_size(self):
        count = tiramisu_count(ModelConfig.from_preset('tiramisu103'))
        assert 8.5e6 < count < 10.5e6

    def test_indivisible_input_size(self):
        with pytest.raises(ConfigurationError, match="non divisible par 4"):
            ModelConfig.from_preset('tiny', input_size=30)

    def test_indivisible_batch(self, rng, tiny_config):
        model = build_model(tiny_config, rng)
        with pytest.raises(ConfigurationError):
            model.forward(np.zeros((1, 3, 30, 30), dtype=np.float32))

    def test_channel_mismatch(self, rng, tiny_config):
        model = build_model(tiny_config, rng)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 2, 32, 32), dtype=np.float32))

    def test_zero_input_gives_probabilities(self, rng, tiny_config):
        model = build_model(tiny_config, rng)
        logits = model.forward(np.zeros((1, 3, 32, 32), dtype=np.float32), 'eval')
        assert np.all(np.isfinite(logits.data))
        assert np.allclose(softmax(logits.data).sum(axis=1), 1.0)

    def test_train_forward_is_reproducible(self, rng, tiny_config):
        model = build_model(tiny_config, rng)
        batch = rng.uniform(0, 4095, (2, 3, 32, 32)).astype(np.float32)
        first = model.forward(batch, 'train', np.random.default_rng(5)).data
        second = model.forward(batch, 'train', np.random.default_rng(5)).data
        assert np.array_equal(first, second)

    def test_dropout_only_in_train(self, rng, tiny_config):
        model = build_model(tiny_config, rng)
        batch = rng.uniform(0, 4095, (2, 3, 32, 32)).astype(np.float32)
        train = model.forward(batch, 'train', np.random.default_rng(5)).data
        evaluation = model.forward(batch, 'eval').data
        assert not np.allclose(train, evaluation)

    def test_same_seed_same_weights(self, tiny_config):
        a = build_model(tiny_config, np.random.default_rng(9))
        b = build_model(tiny_config, np.random.default_rng(9))
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert np.array_equal(p.data, q.data), name

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError, match="Preset inconnu"):
            ModelConfig.from_preset('tiramisu57')

    def test_config_round_trip(self, tiny_config):
        assert ModelConfig.from_dict(tiny_config.to_dict()) == tiny_config
        assert tiny_config.model_tag == 'tiramisu-tiny-regular'

    def test_gradient_spot_check(self):
        config = ModelConfig.from_preset('tiny', input_size=8, dropout=DropoutSpec(p=0.0))
        model = build_model(config, np.random.default_rng(0), dtype=np.float64)
        data_rng = np.random.default_rng(1)
        batch = data_rng.uniform(0, 4095, (1, 3, 8, 8))
        labels = data_rng.integers(0, 6, (1, 8, 8))

        def loss_value():
            return softmax_cross_entropy(model.forward(batch, 'train', np.random.default_rng(2)), labels)

        with ComputationTape() as tape:
            loss = loss_value()
        backward(loss, tape)

        params = dict(model.named_parameters())
        analytic, numeric = [], []
        for name in ('first.w', 'down0.l1.conv.w', 'bottleneck.l0.bn.gamma', 'tu0.w', 'final.b'):
            flat = params[name].data.reshape(-1)
            for index in data_rng.choice(flat.size, size=3, replace=False):
                saved = flat[index]
                flat[index] = saved + 1e-6
                plus = loss_value().item()
                flat[index] = saved - 1e-6
                minus = loss_value().item()
                flat[index] = saved
                numeric.append((plus - minus) / 2e-6)
                analytic.append(params[name].grad.reshape(-1)[index])
        assert rel_error(np.array(analytic), np.array(numeric)) < 1e-2

    @pytest.mark.slow
    def test_overfits_a_few_slices(self):
        config = ModelConfig.from_preset('tiny', input_size=32, dropout=DropoutSpec(p=0.0))
        model = build_model(config, np.random.default_rng(0))
        records = list(small_corpus(n_subjects=4))
        batch = np.stack([r.image.stack() for r in records])
        labels = np.stack([TissueTask.FIVE_TISSUE.encode(r.expert_label) for r in records])
        rng = np.random.default_rng(3)
        for _ in range(500):
            with ComputationTape() as tape:
                loss = softmax_cross_entropy(model.forward(batch, 'train', rng), labels)
            backward(loss, tape)
            adam_step(model.parameters(), 1e-3)
            model.zero_grad()
        accuracy = np.mean(predict_classes(model, batch) == labels)
        assert accuracy > 0.99


class TestUNetBaseline:

    def test_output_shape(self, rng):
        config = ModelConfig.from_preset('tiny', 'unet_baseline', input_size=32)
        model = build_unet_baseline(config, rng)
        assert isinstance(model, UNetBaseline)
        assert model.forward(np.zeros((1, 3, 32, 32), dtype=np.float32)).shape == (1, 6, 32, 32)

    def test_needs_sixteen_fold_divisibility(self):
        with pytest.raises(ConfigurationError, match="non divisible par 16"):
            ModelConfig.from_preset('tiny', 'unet_baseline', input_size=24)

    def test_eval_is_deterministic(self, rng):
        model = build_model(ModelConfig.from_preset('tiny', 'unet_baseline', input_size=32), rng)
        batch = rng.uniform(0, 4095, (1, 3, 32, 32)).astype(np.float32)
        assert np.array_equal(model.forward(batch).data, model.forward(batch).data)

    def test_architecture_forced(self, rng, tiny_config):
        model = build_unet_baseline(tiny_config, rng)
        assert model.config.architecture == 'unet_baseline'


class TestPredictLabels:

    def test_constant_logits(self, phantom, tiny_config):
        image, _ = phantom
        logits = np.zeros((6, 32, 32), dtype=np.float32)
        logits[2] = 1.0
        labels = predict_labels(FixedLogits(tiny_config, logits), image)
        assert np.all(labels.classes == Tissue.FAT)

    def test_scale_invariance(self, rng, phantom, tiny_config):
        image, _ = phantom
        logits = rng.standard_normal((6, 32, 32)).astype(np.float32)
        once = predict_labels(FixedLogits(tiny_config, logits), image)
        twice = predict_labels(FixedLogits(tiny_config, 2 * logits), image)
        assert np.array_equal(once.classes, twice.classes)

    def test_reduced_task_decodes_tissue_ids(self, phantom):
        image, _ = phantom
        config = ModelConfig(num_classes=5, input_size=32)
        logits = np.zeros((5, 32, 32), dtype=np.float32)
        logits[3] = 1.0
        labels = predict_labels(FixedLogits(config, logits), image)
        assert np.all(labels.classes == Tissue.BONE)

    def test_oracle_recovers_truth(self, oracle, corpus):
        model = oracle.from_dataset(corpus)
        for record in corpus:
            predicted = predict_labels(model, record.image)
            assert np.array_equal(predicted.classes, record.truth.classes)

    def test_single_contrast_model(self, phantom):
        image, _ = phantom
        config = ModelConfig(contrasts=(1,), input_size=32)
        logits = np.zeros((6, 32, 32), dtype=np.float32)
        logits[1] = 1.0
        labels = predict_labels(FixedLogits(config, logits), image)
        assert np.all(labels.classes == Tissue.MUSCLE)
