import numpy as np
import pytest
import torch

from volsr.corruption import (
    CorruptionSpec,
    apply_corruption,
    hermitian_symmetrize,
    kspace_spec,
    kspace_undersample,
    observation_mask,
    region_mask,
    region_spec,
    slice_mask,
    slice_spec,
)
from volsr.volume import Volume


def random_volume(seed, shape=(8, 6, 5)):
    return Volume(data=np.random.default_rng(seed).random(shape))


class TestSliceMask:
    def test_three_of_four_slices_removed(self):
        # thick-slice pattern: keep 1 slice in every 4 along the axis
        v = Volume(data=np.ones((8, 4, 4)))
        masked, mask = slice_mask(v, axis=0, k=4)
        nonzero_slices = sorted(set(np.nonzero(masked.data)[0]))
        assert nonzero_slices == [0, 4]
        assert mask.sum() == 2 * 4 * 4

    def test_k1_is_identity(self):
        v = random_volume(0)
        masked, mask = slice_mask(v, axis=1, k=1)
        np.testing.assert_array_equal(masked.data, v.data)
        assert mask.min() == 1.0

    def test_retained_and_removed_slices(self):
        v = random_volume(1)
        masked, _ = slice_mask(v, axis=2, k=2)
        for i in range(v.shape[2]):
            if i % 2 == 0:
                np.testing.assert_array_equal(masked.data[:, :, i], v.data[:, :, i])
            else:
                assert np.all(masked.data[:, :, i] == 0.0)

    def test_offset(self):
        v = Volume(data=np.ones((6, 2, 2)))
        masked, _ = slice_mask(v, axis=0, k=3, offset=1)
        assert sorted(set(np.nonzero(masked.data)[0])) == [1, 4]

    def test_k_exceeding_axis_rejected(self):
        v = Volume(data=np.ones((4, 4, 4)))
        with pytest.raises(ValueError, match="exceeds axis length"):
            slice_mask(v, axis=0, k=5)

    def test_bad_factor_rejected(self):
        with pytest.raises(ValueError, match="k must be"):
            slice_spec(axis=0, k=0)


class TestRegionMask:
    def test_all_ones_identity(self):
        v = random_volume(2)
        out = region_mask(v, np.ones(v.shape))
        np.testing.assert_array_equal(out.data, v.data)

    def test_all_zeros_annihilates(self):
        v = random_volume(3)
        out = region_mask(v, np.zeros(v.shape))
        assert np.all(out.data == 0.0)

    def test_matches_elementwise_product(self):
        v = random_volume(4)
        mask = (np.random.default_rng(5).random(v.shape) > 0.5).astype(float)
        out = region_mask(v, mask)
        np.testing.assert_array_equal(out.data, v.data * mask)

    def test_non_binary_rejected(self):
        v = random_volume(6)
        with pytest.raises(ValueError, match="binary"):
            region_mask(v, np.full(v.shape, 0.5))


class TestKspaceUndersample:
    def test_full_keep_recovers_input(self):
        v = random_volume(7)
        out = kspace_undersample(v, np.ones(v.shape))
        np.testing.assert_allclose(out.data, v.data, atol=1e-6)

    def test_dc_only_gives_mean(self):
        v = random_volume(8)
        keep = np.zeros(v.shape)
        keep[0, 0, 0] = 1.0
        out = kspace_undersample(v, keep)
        np.testing.assert_allclose(out.data, np.full(v.shape, v.data.mean()), atol=1e-10)

    def test_linearity(self):
        rng = np.random.default_rng(9)
        shape = (8, 8, 8)
        keep = (rng.random(shape) > 0.4).astype(float)
        spec = kspace_spec(keep)
        x = rng.random(shape)
        y = rng.random(shape)
        a, b = 0.7, -1.3
        lhs = apply_corruption(spec, a * x + b * y)
        rhs = a * apply_corruption(spec, x) + b * apply_corruption(spec, y)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_idempotent_after_symmetrization(self):
        rng = np.random.default_rng(10)
        shape = (6, 6, 6)
        spec = kspace_spec((rng.random(shape) > 0.5).astype(float))
        x = rng.random(shape)
        once = apply_corruption(spec, x)
        twice = apply_corruption(spec, once)
        np.testing.assert_allclose(once, twice, atol=1e-10)

    def test_symmetrize_involution(self):
        rng = np.random.default_rng(11)
        m = (rng.random((5, 4, 3)) > 0.5).astype(float)
        sym = hermitian_symmetrize(m)
        np.testing.assert_array_equal(sym, hermitian_symmetrize(sym))

    def test_shape_mismatch_rejected(self):
        v = random_volume(12)
        with pytest.raises(ValueError, match="shape"):
            kspace_undersample(v, np.ones((2, 2, 2)))


class TestApplyDispatch:
    def test_slice_spec_matches_direct_call(self):
        v = random_volume(13)
        spec = slice_spec(axis=0, k=4)
        via_apply = apply_corruption(spec, v)
        direct, _ = slice_mask(v, axis=0, k=4)
        np.testing.assert_array_equal(via_apply.data, direct.data)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown corruption kind"):
            CorruptionSpec(kind="blur")

    @pytest.mark.parametrize("spec_builder", [
        lambda shape: slice_spec(axis=0, k=3),
        lambda shape: region_spec((np.random.default_rng(1).random(shape) > 0.5).astype(float)),
    ])
    def test_masking_projection_laws_exact(self, spec_builder):
        rng = np.random.default_rng(14)
        shape = (6, 6, 6)
        spec = spec_builder(shape)
        x = rng.normal(size=shape)
        y = rng.normal(size=shape)
        a, b = 1.7, -0.4
        fx = apply_corruption(spec, x)
        fy = apply_corruption(spec, y)
        # idempotence, linearity, self-adjointness: exact equality
        np.testing.assert_array_equal(apply_corruption(spec, fx), fx)
        np.testing.assert_array_equal(apply_corruption(spec, a * x + b * y), a * fx + b * fy)
        assert np.sum(fx * y) == np.sum(x * fy)

    def test_batched_tensor_broadcast(self):
        spec = slice_spec(axis=0, k=2)
        x = torch.rand(3, 1, 4, 4, 4, dtype=torch.float64)
        out = apply_corruption(spec, x)
        assert out.shape == x.shape
        for i in range(3):
            np.testing.assert_array_equal(out[i, 0].numpy(), apply_corruption(spec, x[i, 0]).numpy())

    def test_gradient_vanishes_on_masked_voxels(self):
        spec = slice_spec(axis=0, k=2)
        target = torch.rand(4, 4, 4, dtype=torch.float64)
        target = apply_corruption(spec, target)
        x = torch.rand(4, 4, 4, dtype=torch.float64, requires_grad=True)
        loss = torch.sum(torch.abs(apply_corruption(spec, x) - target))
        loss.backward()
        grad = x.grad.numpy()
        mask = observation_mask(spec, (4, 4, 4))
        assert np.all(grad[mask == 0.0] == 0.0)
        # finite-difference probe at one masked-out voxel
        base = torch.sum(torch.abs(apply_corruption(spec, x.detach()) - target))
        bumped = x.detach().clone()
        bumped[1, 0, 0] += 1e-3
        assert mask[1, 0, 0] == 0.0
        after = torch.sum(torch.abs(apply_corruption(spec, bumped) - target))
        assert float(after - base) == 0.0

    def test_observation_mask_for_kspace_rejected(self):
        spec = kspace_spec(np.ones((4, 4, 4)))
        with pytest.raises(ValueError, match="no voxel-space"):
            observation_mask(spec, (4, 4, 4))

    def test_config_round_trip(self):
        spec = slice_spec(axis=1, k=4, offset=2)
        again = CorruptionSpec.from_config(spec.to_config())
        assert again == spec
        region = region_spec(np.ones((3, 3, 3)))
        again = CorruptionSpec.from_config(region.to_config())
        np.testing.assert_array_equal(again.mask, region.mask)
