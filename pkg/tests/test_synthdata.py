import numpy as np
import pytest

from cycreg.evaluation import dice, jacobian_stats, warp_labels
from cycreg.losses import nmi
from cycreg.synthdata import (
    DeformationError,
    DeformSpec,
    PhantomSpec,
    build_dataset,
    generate_deformation,
    generate_phantom,
    invert_field,
)
from cycreg.warp import compose_displacements, warp_image


def test_same_maps_no_noise_gives_identical_modalities():
    spec = PhantomSpec(intensities_b=PhantomSpec().intensities_a, remap_strength=0.0, noise_sigma=0.0, seed=3)
    a, b, _ = generate_phantom(spec)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("seed", range(4))
def test_every_label_present(seed):
    _, _, labels = generate_phantom(PhantomSpec(seed=seed))
    assert set(np.unique(labels)) == {0, 1, 2, 3}


def test_3d_phantom():
    a, b, labels = generate_phantom(PhantomSpec(shape=(32, 32, 16), seed=1))
    assert a.shape == b.shape == labels.shape == (32, 32, 16)
    assert set(np.unique(labels)) == {0, 1, 2, 3}


def test_modalities_share_anatomy():
    a, b, _ = generate_phantom(PhantomSpec(seed=2))
    shuffled = np.random.default_rng(0).permutation(b.ravel()).reshape(b.shape)
    assert nmi(a, b) > nmi(a, shuffled)


def test_phantom_is_deterministic():
    one = generate_phantom(PhantomSpec(seed=5))
    two = generate_phantom(PhantomSpec(seed=5))
    for x, y in zip(one, two):
        assert np.array_equal(x, y)


def test_phantom_validation():
    with pytest.raises(ValueError):
        PhantomSpec(shape=(8, 8))
    with pytest.raises(ValueError):
        PhantomSpec(intensities_a=(0, 1))


def test_zero_magnitudes_give_zero_field():
    _, _, labels = generate_phantom(PhantomSpec(seed=0))
    field = generate_deformation(DeformSpec(global_max=0.0, local_max=0.0), labels)
    assert field.shape == (2, 64, 64) and np.all(field == 0)


@pytest.mark.parametrize("seed", range(5))
def test_default_deformation_is_severe_in_liver_and_fold_free(seed):
    _, _, labels = generate_phantom(PhantomSpec(seed=seed))
    field = generate_deformation(DeformSpec(seed=seed), labels)
    mag = np.sqrt((field**2).sum(axis=0))
    assert mag[labels == 1].max() > mag[labels != 1].max()
    assert jacobian_stats(field)["min_det"] > 0


def test_deformation_deterministic_per_seed():
    _, _, labels = generate_phantom(PhantomSpec(seed=0))
    f1 = generate_deformation(DeformSpec(seed=4), labels)
    f2 = generate_deformation(DeformSpec(seed=4), labels)
    f3 = generate_deformation(DeformSpec(seed=5), labels)
    assert np.array_equal(f1, f2) and not np.array_equal(f1, f3)


def test_deformation_damps_until_fold_free():
    _, _, labels = generate_phantom(PhantomSpec(seed=0))
    # a gain far above 1 folds the centre; damping must bring it back
    field = generate_deformation(DeformSpec(local_max=8.0, radial_gain=3.0), labels)
    assert jacobian_stats(field)["min_det"] > 0
    with pytest.raises(DeformationError):
        generate_deformation(DeformSpec(local_max=8.0, radial_gain=3.0), labels, max_retries=0)


def test_deformation_needs_severe_label():
    with pytest.raises(ValueError):
        generate_deformation(DeformSpec(), np.zeros((32, 32), dtype=int))


def test_inverse_field_composes_to_identity():
    _, _, labels = generate_phantom(PhantomSpec(seed=1))
    u = generate_deformation(DeformSpec(seed=1), labels)
    v = invert_field(u)
    residual = compose_displacements(u, v).data
    assert np.abs(residual).max() < 1e-6


def test_dataset_split_sizes_and_contents():
    train, test = build_dataset(5, split=(3, 2))
    assert len(train) == 3 and len(test) == 2
    p = train[0]
    assert p.moving.shape == p.fixed.shape == p.moving_labels.shape == p.fixed_labels.shape
    assert p.true_field.shape == (2,) + p.moving.shape
    assert not np.array_equal(train[0].true_field, train[1].true_field)


def test_single_pair_dataset():
    train, test = build_dataset(1, split=(1, 0))
    assert len(train) == 1 and test == [] and train[0].true_field is not None


def test_dataset_invalid_split():
    with pytest.raises(ValueError):
        build_dataset(5, split=(3, 3))


def test_dataset_reproducible():
    a, _ = build_dataset(2, split=(2, 0))
    b, _ = build_dataset(2, split=(2, 0))
    for x, y in zip(a, b):
        assert np.array_equal(x.moving, y.moving) and np.array_equal(x.true_field, y.true_field)


def test_true_field_registers_moving_onto_fixed_anatomy():
    train, _ = build_dataset(1, split=(1, 0))
    p = train[0]
    before = dice(p.moving_labels, p.fixed_labels, 1)
    after = dice(warp_labels(p.moving_labels, p.true_field), p.fixed_labels, 1)
    assert before < 0.8 < 0.95 < after
    warped = warp_image(p.moving[None], p.true_field).data[0]
    a, _, _ = generate_phantom(PhantomSpec(seed=int(np.random.SeedSequence([0, 0, 0]).generate_state(2)[0])))
    assert np.abs(warped - a)[8:-8, 8:-8].mean() < 0.02
