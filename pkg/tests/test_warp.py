import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cycreg import tensor as T
from cycreg.tensor import ShapeError, Tensor, grad_check
from cycreg.warp import DisplacementField, Volume, compose_displacements, warp_image


def const_field(shape, vec):
    return np.stack([np.full(shape, float(v)) for v in vec])


def test_zero_field_is_bit_exact_identity():
    img = np.random.default_rng(0).normal(size=(2, 7, 5))
    out = warp_image(img, np.zeros((2, 7, 5))).data
    assert np.array_equal(out, img)


def test_zero_field_identity_3d():
    img = np.random.default_rng(1).normal(size=(1, 4, 5, 3))
    assert np.array_equal(warp_image(img, np.zeros((3, 4, 5, 3))).data, img)


def test_integer_row_shift_on_ramp():
    ramp = np.arange(16.0).reshape(4, 4)
    out = warp_image(ramp[None], const_field((4, 4), (1, 0))).data[0]
    np.testing.assert_array_equal(out[:3], ramp[1:])
    np.testing.assert_array_equal(out[3], ramp[3])


def test_half_voxel_average():
    img = np.array([[0.0, 2.0], [0.0, 2.0]])
    out = warp_image(img[None], const_field((2, 2), (0, 0.5))).data[0]
    np.testing.assert_allclose(out[:, 0], [1.0, 1.0], atol=0)
    # second column samples past the border and clamps to it
    np.testing.assert_allclose(out[:, 1], [2.0, 2.0], atol=0)


def test_integer_fields_match_direct_indexing_inside():
    rng = np.random.default_rng(2)
    img = rng.normal(size=(9, 8))
    shift = rng.integers(-2, 3, size=(2, 9, 8)).astype(float)
    out = warp_image(img[None], shift).data[0]
    ii, jj = np.indices(img.shape)
    si, sj = ii + shift[0].astype(int), jj + shift[1].astype(int)
    ok = (si >= 0) & (si < 9) & (sj >= 0) & (sj < 8)
    np.testing.assert_array_equal(out[ok], img[si[ok], sj[ok]])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 6.0))
def test_output_is_convex_combination(seed, scale):
    rng = np.random.default_rng(seed)
    img = rng.normal(size=(6, 7))
    fld = rng.normal(scale=scale, size=(2, 6, 7))
    out = warp_image(img[None], fld).data
    assert out.min() >= img.min() - 1e-12
    assert out.max() <= img.max() + 1e-12


def test_field_gradient_matches_fd_off_grid():
    rng = np.random.default_rng(3)
    img = Tensor(rng.normal(size=(1, 6, 6)))
    # fractional parts away from 0 keep the check off the interpolant's kinks
    fld = rng.integers(-1, 2, size=(2, 6, 6)) + rng.uniform(0.2, 0.8, size=(2, 6, 6))
    fld[:, [0, -1], :] = 0.5
    fld[:, :, [0, -1]] = 0.5
    assert grad_check(lambda f: T.mean(warp_image(img, f)), fld, eps=1e-6) < 1e-5
    w = Tensor(rng.normal(size=(1, 6, 6)))
    assert grad_check(lambda f: T.sum_(T.mul(warp_image(img, f), w)), fld, eps=1e-6) < 1e-5


def test_image_gradient_matches_fd():
    rng = np.random.default_rng(4)
    fld = Tensor(rng.uniform(-1.7, 1.7, size=(2, 5, 6)))
    w = Tensor(rng.normal(size=(2, 5, 6)))
    assert grad_check(lambda im: T.sum_(T.mul(warp_image(im, fld), w)), rng.normal(size=(2, 5, 6))) < 1e-5


def test_3d_field_gradient():
    rng = np.random.default_rng(5)
    img = Tensor(rng.normal(size=(1, 4, 4, 4)))
    fld = rng.uniform(0.2, 0.8, size=(3, 4, 4, 4)) * rng.choice([-1, 1], size=(3, 4, 4, 4))
    w = Tensor(rng.normal(size=(1, 4, 4, 4)))
    assert grad_check(lambda f: T.sum_(T.mul(warp_image(img, f), w)), fld) < 1e-5


def test_clamped_samples_carry_no_field_gradient():
    img = Tensor(np.random.default_rng(6).normal(size=(1, 4, 4)))
    fld = Tensor(const_field((4, 4), (10.0, 0.0)), requires_grad=True)
    T.backward(T.sum_(warp_image(img, fld)))
    # only the component pushed off the grid is masked
    assert np.all(fld.grad[0] == 0)
    assert np.any(fld.grad[1] != 0)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        warp_image(np.zeros((1, 4, 4)), np.zeros((2, 4, 5)))
    with pytest.raises(ShapeError):
        warp_image(np.zeros((1, 4, 4)), np.zeros((3, 4, 4)))


def test_compose_examples():
    rng = np.random.default_rng(7)
    f = rng.normal(size=(2, 6, 6))
    zero = np.zeros_like(f)
    np.testing.assert_array_equal(compose_displacements(zero, f).data, f)
    np.testing.assert_array_equal(compose_displacements(f, zero).data, f)
    c = compose_displacements(const_field((6, 6), (1, 0)), const_field((6, 6), (0, 1))).data
    np.testing.assert_array_equal(c, const_field((6, 6), (1, 1)))


def test_compose_approximates_sequential_warp():
    yy, xx = np.indices((32, 32), dtype=float)
    img = np.sin(yy / 4) + np.cos(xx / 5)
    f = 0.8 * np.stack([np.sin(xx / 9), np.cos(yy / 7)])
    g = 0.6 * np.stack([np.cos(yy / 8), np.sin(xx / 6)])
    seq = warp_image(warp_image(img[None], f), g).data[0]
    comp = warp_image(img[None], compose_displacements(f, g)).data[0]
    inner = (slice(4, -4), slice(4, -4))
    assert np.abs(seq - comp)[inner].max() < 0.02


def test_domain_types_validate():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4)), spacing=(1.0, 0.0))
    with pytest.raises(ShapeError):
        Volume(np.zeros(4))
    with pytest.raises(ShapeError):
        DisplacementField(np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        DisplacementField(np.full((2, 4, 4), np.nan))
    assert DisplacementField.zeros((4, 5)).data.shape == (2, 4, 5)
    assert Volume(np.zeros((4, 5))).as_tensor().shape == (1, 4, 5)
