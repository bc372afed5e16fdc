import numpy as np
import pytest
import torch

from balagan.data import ImageBatch
from balagan.errors import ShapeMismatch
from balagan.networks import (Discriminator, Generator, adain, classify_real,
                              discriminate, translate)


def batch_from(rng, n=2, size=16):
    data = torch.from_numpy(rng.uniform(-1, 1, size=(n, 3, size, size)).astype(np.float32))
    return ImageBatch(data)


class TestAdain:
    def test_identity_case(self, rng):
        content = torch.from_numpy(rng.normal(size=(2, 4, 8, 8)))
        mu = content.mean(dim=(2, 3))
        sigma = content.std(dim=(2, 3), unbiased=False)
        out = adain(content, mu, sigma, eps=1e-8)
        assert (out - content).abs().max() < 1e-5

    def test_standardization(self, rng):
        content = torch.from_numpy(rng.normal(loc=3.0, scale=2.0, size=(2, 4, 8, 8)))
        out = adain(content, torch.zeros(2, 4), torch.ones(2, 4))
        assert out.mean(dim=(2, 3)).abs().max() < 1e-6
        assert (out.std(dim=(2, 3), unbiased=False) - 1).abs().max() < 1e-4

    def test_target_statistics(self, rng):
        content = torch.from_numpy(rng.normal(size=(3, 5, 6, 6)))
        mean = torch.from_numpy(rng.normal(size=(3, 5)))
        std = torch.from_numpy(rng.uniform(0.5, 2.0, size=(3, 5)))
        out = adain(content, mean, std)
        assert (out.mean(dim=(2, 3)) - mean).abs().max() < 1e-6
        rel = ((out.std(dim=(2, 3), unbiased=False) - std).abs() / std).max()
        assert rel < 1e-4

    def test_constant_channel_collapses_to_style_mean(self):
        content = torch.full((1, 2, 4, 4), 0.7)
        mean = torch.tensor([[0.1, -0.4]])
        std = torch.tensor([[1.0, 2.0]])
        out = adain(content, mean, std)
        assert (out[0, 0] - 0.1).abs().max() < 1e-6
        assert (out[0, 1] + 0.4).abs().max() < 1e-6

    def test_rejects_nonpositive_std(self):
        with pytest.raises(ValueError):
            adain(torch.zeros(1, 2, 4, 4), torch.zeros(1, 2), torch.zeros(1, 2))


@pytest.fixture(scope="module")
def small_generator():
    torch.manual_seed(0)
    return Generator(base_width=8, style_dim=16)


@pytest.fixture(scope="module")
def small_discriminator():
    torch.manual_seed(1)
    return Discriminator(n_classes=5, base_width=8)


class TestGenerator:
    def test_shape_preserved(self, small_generator, rng):
        x, y = batch_from(rng, 4, 16), batch_from(rng, 4, 16)
        out = translate(small_generator, x, y)
        assert out.data.shape == (4, 3, 16, 16)

    def test_output_in_value_range(self, small_generator, rng):
        x, y = batch_from(rng, 2, 16), batch_from(rng, 2, 16)
        out = translate(small_generator, x, y)
        assert out.data.min() >= -1.0
        assert out.data.max() <= 1.0

    def test_different_references_change_output(self, small_generator, rng):
        x = batch_from(rng, 2, 16)
        y1, y2 = batch_from(rng, 2, 16), batch_from(rng, 2, 16)
        out1 = translate(small_generator, x, y1)
        out2 = translate(small_generator, x, y2)
        assert float((out1.data - out2.data).abs().mean()) > 0.0

    def test_deterministic(self, small_generator, rng):
        x, y = batch_from(rng, 2, 16), batch_from(rng, 2, 16)
        a = translate(small_generator, x, y)
        b = translate(small_generator, x, y)
        assert torch.equal(a.data, b.data)

    def test_batch_mismatch_rejected(self, small_generator, rng):
        with pytest.raises(ShapeMismatch):
            small_generator(batch_from(rng, 2, 16).data, batch_from(rng, 3, 16).data)

    def test_resolution_mismatch_rejected(self, small_generator, rng):
        with pytest.raises(ShapeMismatch):
            small_generator(batch_from(rng, 2, 16).data, batch_from(rng, 2, 32).data)

    def test_indivisible_resolution_rejected(self, small_generator, rng):
        bad = torch.zeros(1, 3, 18, 18)
        with pytest.raises(ShapeMismatch):
            small_generator(bad, bad)


class TestDiscriminator:
    def test_score_shapes(self, small_discriminator, rng):
        scores, feats = discriminate(small_discriminator, batch_from(rng, 2, 16))
        assert scores.shape == (2, 5)
        assert feats.shape == (2, small_discriminator.feat_dim)

    def test_classify_shape(self, small_discriminator, rng):
        logits = classify_real(small_discriminator, batch_from(rng, 3, 16))
        assert logits.shape == (3, 5)

    def test_duplicate_images_identical_rows(self, small_discriminator, rng):
        single = batch_from(rng, 1, 16)
        pair = ImageBatch(torch.cat([single.data, single.data]))
        scores, feats = discriminate(small_discriminator, pair)
        assert torch.equal(scores[0], scores[1])
        assert torch.equal(feats[0], feats[1])

    def test_finite_at_range_extremes(self, small_discriminator):
        extremes = ImageBatch(torch.cat([torch.full((1, 3, 16, 16), -1.0),
                                         torch.full((1, 3, 16, 16), 1.0)]))
        scores, feats = discriminate(small_discriminator, extremes)
        assert torch.isfinite(scores).all()
        assert torch.isfinite(feats).all()
        assert torch.isfinite(classify_real(small_discriminator, extremes)).all()

    def test_cls_head_perturbation_leaves_adv_unchanged(self, rng):
        torch.manual_seed(2)
        d = Discriminator(n_classes=4, base_width=8)
        images = batch_from(rng, 2, 16)
        scores_before, feats_before = discriminate(d, images)
        with torch.no_grad():
            for p in d.d_cls.parameters():
                p.add_(1.0)
        scores_after, feats_after = discriminate(d, images)
        assert torch.equal(scores_before, scores_after)
        assert torch.equal(feats_before, feats_after)

    def test_trunk_perturbation_changes_both_heads(self, rng):
        torch.manual_seed(3)
        d = Discriminator(n_classes=4, base_width=8)
        images = batch_from(rng, 2, 16)
        scores_before, _ = discriminate(d, images)
        cls_before = classify_real(d, images)
        with torch.no_grad():
            for p in d.d_f.parameters():
                p.add_(0.5)
        scores_after, _ = discriminate(d, images)
        cls_after = classify_real(d, images)
        assert not torch.equal(scores_before, scores_after)
        assert not torch.equal(cls_before, cls_after)

    def test_adv_head_perturbation_leaves_cls_unchanged(self, rng):
        torch.manual_seed(4)
        d = Discriminator(n_classes=4, base_width=8)
        images = batch_from(rng, 2, 16)
        cls_before = classify_real(d, images)
        with torch.no_grad():
            for p in d.d_adv.parameters():
                p.add_(1.0)
        assert torch.equal(cls_before, classify_real(d, images))


def test_translate_value_range_mismatch(small_generator, rng):
    x = batch_from(rng, 2, 16)
    y_data = torch.from_numpy(rng.uniform(0, 1, size=(2, 3, 16, 16)).astype(np.float32))
    y = ImageBatch(y_data, value_range=(0.0, 1.0))
    with pytest.raises(ShapeMismatch):
        translate(small_generator, x, y)
