import numpy as np
import pytest
import torch
import torch.nn.functional as F

from diversity import MixedTargets, apply_policy, cutmix, flip, mixed_cross_entropy, randaug_lite
from errors import InvalidInputError
from schemas import AugmentationPolicy


def _batch(n=32, size=16, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=generator), torch.arange(n) % 4


def test_flip_is_an_involution():
    image = torch.rand(3, 8, 8)
    assert torch.equal(flip(flip(image)), image)
    assert torch.equal(flip(image)[..., 0], image[..., -1])


@pytest.mark.parametrize("lam", [0.0, 0.3, 0.5, 0.9, 1.0])
def test_cutmix_weights_follow_the_pasted_area(lam):
    a, b = torch.zeros(3, 16, 16), torch.ones(3, 16, 16)
    mixed, pair = cutmix(a, 0, b, 1, lam, np.random.default_rng(0))
    pasted = int(mixed[0].sum())
    assert pair.weight_a == pytest.approx(1 - pasted / 256)
    assert pair.weight_a + pair.weight_b == pytest.approx(1.0)
    assert (pair.label_a, pair.label_b) == (0, 1)


class _FixedCentre:
    """Stands in for the generator: every box centre lands on `at`."""

    def __init__(self, at):
        self.at = at

    def integers(self, low, high):
        return self.at


def test_cutmix_extremes():
    a, b = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
    kept, pair = cutmix(a, 2, b, 3, 1.0)
    assert torch.equal(kept, a) and pair.weight_a == 1.0
    replaced, pair = cutmix(a, 2, b, 3, 0.0, _FixedCentre(4))
    assert torch.equal(replaced, b) and pair.weight_a == 0.0


def test_cutmix_box_clipped_at_the_corner_keeps_more_of_image_a():
    a, b = torch.zeros(3, 8, 8), torch.ones(3, 8, 8)
    mixed, pair = cutmix(a, 0, b, 1, 0.0, _FixedCentre(0))
    # a full-size box centred on (0, 0) only covers the top-left quarter
    assert torch.equal(mixed[:, :4, :4], b[:, :4, :4])
    assert int(mixed.sum()) == 3 * 16
    assert pair.weight_a == pytest.approx(0.75)
    assert pair.weight_a > 0.0


def test_flip_hits_about_half_of_a_large_batch():
    n = 1000
    images = torch.linspace(0, 1, 4).expand(n, 3, 4, 4).clone()
    labels = torch.zeros(n, dtype=torch.long)
    batch = apply_policy(images, labels, AugmentationPolicy(flip=True, randaug=False, cutmix=False))
    flipped = int((batch.images[:, 0, 0, 0] == 1.0).sum())
    assert torch.equal(batch.images[batch.images[:, 0, 0, 0] == 1.0][0], flip(images[0]))
    assert abs(flipped - n * 0.5) <= 3 * (n * 0.25) ** 0.5


def test_cutmix_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        cutmix(torch.rand(3, 8, 8), 0, torch.rand(3, 6, 6), 1, 0.5)
    with pytest.raises(InvalidInputError):
        cutmix(torch.rand(3, 8, 8), 0, torch.rand(3, 8, 8), 1, 1.5)


def test_randaug_keeps_shape_and_range():
    image = torch.rand(3, 16, 16)
    out = randaug_lite(image, magnitude=9, num_ops=2, rng=np.random.default_rng(0))
    assert out.shape == image.shape
    assert out.min() >= 0 and out.max() <= 1


def test_evaluation_gets_the_identity():
    images, labels = _batch()
    policy = AugmentationPolicy(flip=True, randaug=True, cutmix=True)
    batch = apply_policy(images, labels, policy, training=False)
    assert batch.images is images
    assert torch.equal(batch.targets.weight_a, torch.ones(len(labels)))


def test_policy_replays_per_seed_epoch_and_batch():
    images, labels = _batch()
    policy = AugmentationPolicy(flip=True, randaug=True, cutmix=True, seed=4)
    first = apply_policy(images, labels, policy, epoch=1, batch_index=2)
    again = apply_policy(images, labels, policy, epoch=1, batch_index=2)
    other = apply_policy(images, labels, policy, epoch=1, batch_index=3)
    assert torch.equal(first.images, again.images)
    assert torch.equal(first.targets.weight_a, again.targets.weight_a)
    assert not torch.equal(first.images, other.images)
    assert torch.equal(images, _batch()[0])


def test_no_augmentation_policy_returns_same_pixels():
    images, labels = _batch()
    batch = apply_policy(images, labels, AugmentationPolicy(flip=False))
    assert torch.equal(batch.images, images)
    assert torch.equal(batch.targets.labels_a, labels)


def test_mixed_cross_entropy_reduces_to_plain_loss():
    logits = torch.randn(6, 4)
    labels = torch.tensor([0, 1, 2, 3, 0, 1])
    assert torch.allclose(mixed_cross_entropy(logits, MixedTargets.plain(labels)), F.cross_entropy(logits, labels))
    mixed = MixedTargets(labels, labels.roll(1), torch.full((6,), 0.25))
    expected = 0.25 * F.cross_entropy(logits, labels) + 0.75 * F.cross_entropy(logits, labels.roll(1))
    assert torch.allclose(mixed_cross_entropy(logits, mixed), expected)
