import numpy as np
import pytest

from warpnet import gridgen as gg
from warpnet import sampler as sp
from warpnet.tensor import FeatureMap, Rng, ShapeError, from_array, new_map


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


def random_map(rng, shape):
    return FeatureMap(rng.normal_array(int(np.prod(shape))).reshape(shape))


def random_grid(rng, out_shape, dim, lo=-1.3, hi=1.3):
    p = int(np.prod(out_shape))
    coords = rng.uniform_array(p * dim, lo, hi).reshape(p, dim)
    return gg.SampleGrid(coords, out_shape)


def away_from_kinks(coords, sizes, margin=1e-3):
    """Push pixel-space coordinates at least `margin` away from integers."""
    out = coords.copy()
    order = (1, 0) if len(sizes) == 2 else (1, 0, 2)
    for axis, col in enumerate(order):
        n = sizes[axis]
        if n == 1:
            continue
        px = sp.to_pixel(out[:, col], n)
        frac = px - np.floor(px)
        px = np.where(frac < margin, px + margin, px)
        px = np.where(frac > 1 - margin, px - margin, px)
        out[:, col] = px / sp.pixel_scale(n) - 1.0
    return out


class TestForward:
    def test_identity_grid_reproduces_input_2d(self):
        rng = Rng(1)
        for shape in [(5, 7, 1), (4, 4, 3), (1, 6, 2)]:
            u = random_map(rng.fork(shape[0] * 10 + shape[1]), shape)
            grid = gg.apply_transform(gg.identity_transform("affine"),
                                      gg.regular_grid(shape[:2]))
            out = sp.sample(u, grid, sp.BILINEAR).output
            assert np.array_equal(out.array, u.array)

    def test_identity_grid_reproduces_input_3d(self):
        u = random_map(Rng(2), (3, 4, 5, 2))
        grid = gg.apply_transform(gg.identity_transform("affine3d"),
                                  gg.regular_grid((3, 4, 5)))
        out = sp.sample(u, grid, sp.TRILINEAR).output
        assert np.array_equal(out.array, u.array)

    def test_midway_point_averages(self):
        u = from_array(np.array([[[0.0], [1.0]]]))  # 1 x 2 x 1
        grid = gg.SampleGrid(np.array([[0.0, 0.0]]), (1, 1))
        out = sp.sample(u, grid, sp.BILINEAR).output
        assert out.array.reshape(-1).tolist() == [0.5]

    def test_out_of_bounds_is_zero(self):
        u = from_array(np.full((3, 3, 1), 9.0))
        # pixel x = -2 -> normalized -3 for a 3-wide axis
        grid = gg.SampleGrid(np.array([[-3.0, 0.0]]), (1, 1))
        out = sp.sample(u, grid, sp.BILINEAR).output
        assert out.array.reshape(-1).tolist() == [0.0]

    def test_integer_kernel_rounds_to_nearest(self):
        u = from_array(np.array([[[10.0], [20.0]]]))  # pixels 0 and 1 along x
        def norm_for_px(px):
            return px / sp.pixel_scale(2) - 1.0
        g49 = gg.SampleGrid(np.array([[norm_for_px(0.49), 0.0]]), (1, 1))
        g51 = gg.SampleGrid(np.array([[norm_for_px(0.51), 0.0]]), (1, 1))
        assert sp.sample(u, g49, sp.INTEGER).output.array.reshape(-1)[0] == 10.0
        assert sp.sample(u, g51, sp.INTEGER).output.array.reshape(-1)[0] == 20.0

    def test_trilinear_center_of_cube_averages(self):
        u = FeatureMap(np.arange(8, dtype=np.float64).reshape(2, 2, 2, 1))
        grid = gg.SampleGrid(np.array([[0.0, 0.0, 0.0]]), (1, 1, 1))
        out = sp.sample(u, grid, sp.TRILINEAR).output
        assert out.array.reshape(-1)[0] == pytest.approx(3.5)

    def test_kernel_map_mismatch(self):
        u2 = new_map((3, 3, 1))
        u3 = new_map((3, 3, 3, 1))
        g2 = random_grid(Rng(0), (2, 2), 2)
        g3 = random_grid(Rng(0), (2, 2, 2), 3)
        with pytest.raises(ShapeError):
            sp.sample(u2, g3, sp.TRILINEAR)
        with pytest.raises(ShapeError):
            sp.sample(u3, g2, sp.BILINEAR)
        with pytest.raises(ShapeError):
            sp.sample(u2, g2, sp.TRILINEAR)
        with pytest.raises(ShapeError):
            sp.sample(u2, g2, "nonsense")


class TestOracleEquivalence:
    @pytest.mark.parametrize("kind", [sp.INTEGER, sp.BILINEAR])
    def test_bitwise_equal_2d(self, kind):
        rng = Rng(400 if kind == sp.INTEGER else 500)
        for case in range(100):
            r = rng.fork(case)
            h, w = r.integer(9) + 1, r.integer(9) + 1
            c = r.integer(3) + 1
            oh, ow = r.integer(7) + 1, r.integer(7) + 1
            u = random_map(r, (h, w, c))
            grid = random_grid(r, (oh, ow), 2)
            fast = sp.sample(u, grid, kind).output
            slow = sp.sample_oracle(u, grid, kind)
            assert np.array_equal(fast.array, slow.array), f"case {case}"

    def test_bitwise_equal_3d(self):
        rng = Rng(600)
        for case in range(100):
            r = rng.fork(case)
            shape = (r.integer(5) + 1, r.integer(5) + 1, r.integer(5) + 1, r.integer(2) + 1)
            out_shape = (r.integer(4) + 1, r.integer(4) + 1, r.integer(4) + 1)
            u = random_map(r, shape)
            grid = random_grid(r, out_shape, 3)
            fast = sp.sample(u, grid, sp.TRILINEAR).output
            slow = sp.sample_oracle(u, grid, sp.TRILINEAR)
            assert np.array_equal(fast.array, slow.array), f"case {case}"

    def test_oracle_identity_grid(self):
        u = random_map(Rng(7), (4, 5, 2))
        grid = gg.apply_transform(gg.identity_transform("affine"), gg.regular_grid((4, 5)))
        assert np.array_equal(sp.sample_oracle(u, grid, sp.BILINEAR).array, u.array)

    def test_oracle_zero_input(self):
        u = new_map((4, 4, 1), 0.0)
        grid = random_grid(Rng(8), (3, 3), 2)
        assert np.all(sp.sample_oracle(u, grid, sp.BILINEAR).array == 0.0)


class TestBackwardInput:
    def test_identity_grid_passes_ones(self):
        u = random_map(Rng(1), (4, 5, 2))
        grid = gg.apply_transform(gg.identity_transform("affine"), gg.regular_grid((4, 5)))
        res = sp.sample(u, grid, sp.BILINEAR)
        grads = sp.backward_input(res, new_map((4, 5, 2), 1.0))
        assert np.array_equal(grads.array, np.ones((4, 5, 2)))

    def test_midway_splits_half_half(self):
        u = from_array(np.array([[[0.0], [1.0]]]))
        grid = gg.SampleGrid(np.array([[0.0, 0.0]]), (1, 1))
        res = sp.sample(u, grid, sp.BILINEAR)
        grads = sp.backward_input(res, new_map((1, 1, 1), 1.0))
        assert grads.array.reshape(-1).tolist() == [0.5, 0.5]

    def test_shape_mismatch(self):
        u = random_map(Rng(1), (3, 3, 1))
        res = sp.sample(u, random_grid(Rng(2), (2, 2), 2), sp.BILINEAR)
        with pytest.raises(ShapeError):
            sp.backward_input(res, new_map((3, 3, 1), 1.0))

    @pytest.mark.parametrize("kind", [sp.INTEGER, sp.BILINEAR, sp.TRILINEAR])
    def test_matches_finite_differences(self, kind):
        rng = Rng(900)
        for case in range(20):
            r = rng.fork(case)
            if kind == sp.TRILINEAR:
                shape, out_shape = (3, 4, 3, 2), (2, 3, 2)
            else:
                shape, out_shape = (5, 4, 2), (3, 3)
            u = random_map(r, shape)
            grid = random_grid(r, out_shape, len(out_shape))
            gw = r.normal_array(int(np.prod(out_shape)) * shape[-1]).reshape(
                out_shape + (shape[-1],))
            res = sp.sample(u, grid, kind)
            an = sp.backward_input(res, FeatureMap(gw)).array
            eps = 1e-6
            fd = np.empty_like(u.array)
            flat = u.array.reshape(-1)
            for j in range(flat.size):
                up, um = u.array.copy().reshape(-1), u.array.copy().reshape(-1)
                up[j] += eps
                um[j] -= eps
                lp = np.sum(sp.sample(FeatureMap(up.reshape(shape)), grid, kind).output.array * gw)
                lm = np.sum(sp.sample(FeatureMap(um.reshape(shape)), grid, kind).output.array * gw)
                fd.reshape(-1)[j] = (lp - lm) / (2 * eps)
            assert rel_err(an, fd) < 1e-6, f"{kind} case {case}"


class TestBackwardGrid:
    def test_between_two_pixels_slope_is_difference(self):
        u = from_array(np.array([[[0.0], [1.0]]]))
        grid = gg.SampleGrid(np.array([[0.0, 0.0]]), (1, 1))
        res = sp.sample(u, grid, sp.BILINEAR)
        g = sp.backward_grid(res, new_map((1, 1, 1), 1.0))
        # dV/d(pixel x) = U[1] - U[0] = 1; returned value is in normalized units
        assert g[0, 0] / sp.pixel_scale(2) == pytest.approx(1.0)
        assert g[0, 1] == 0.0

    def test_constant_map_zero_gradient_in_bounds(self):
        u = new_map((5, 5, 2), 3.25)
        coords = Rng(4).uniform_array(20, -0.7, 0.7).reshape(10, 2)
        grid = gg.SampleGrid(coords, (2, 5))
        res = sp.sample(u, grid, sp.BILINEAR)
        g = sp.backward_grid(res, new_map((2, 5, 2), 1.0))
        assert np.max(np.abs(g)) < 1e-12

    def test_integer_kernel_reports_zero(self):
        u = random_map(Rng(5), (4, 4, 1))
        grid = random_grid(Rng(6), (3, 3), 2)
        res = sp.sample(u, grid, sp.INTEGER)
        g = sp.backward_grid(res, new_map((3, 3, 1), 1.0))
        assert np.all(g == 0.0)

    @pytest.mark.parametrize("kind", [sp.BILINEAR, sp.TRILINEAR])
    def test_matches_finite_differences(self, kind):
        rng = Rng(901)
        for case in range(20):
            r = rng.fork(case)
            if kind == sp.TRILINEAR:
                shape, out_shape = (4, 5, 3, 2), (2, 2, 3)
            else:
                shape, out_shape = (6, 5, 2), (4, 3)
            u = random_map(r, shape)
            grid = random_grid(r, out_shape, len(out_shape), lo=-0.95, hi=0.95)
            coords = away_from_kinks(grid.coords, shape[:-1])
            grid = gg.SampleGrid(coords, out_shape)
            gw = r.normal_array(int(np.prod(out_shape)) * shape[-1]).reshape(
                out_shape + (shape[-1],))
            res = sp.sample(u, grid, kind)
            an = sp.backward_grid(res, FeatureMap(gw))
            eps = 1e-5
            fd = np.empty_like(coords)
            for j in range(coords.size):
                cp, cm = coords.copy().reshape(-1), coords.copy().reshape(-1)
                cp[j] += eps
                cm[j] -= eps
                lp = np.sum(sp.sample(u, gg.SampleGrid(cp.reshape(coords.shape), out_shape),
                                      kind).output.array * gw)
                lm = np.sum(sp.sample(u, gg.SampleGrid(cm.reshape(coords.shape), out_shape),
                                      kind).output.array * gw)
                fd.reshape(-1)[j] = (lp - lm) / (2 * eps)
            assert rel_err(an, fd) < 1e-5, f"{kind} case {case}"


class TestProperties:
    def test_linearity_in_input(self):
        rng = Rng(21)
        u1, u2 = random_map(rng.fork(0), (5, 5, 2)), random_map(rng.fork(1), (5, 5, 2))
        grid = random_grid(rng.fork(2), (4, 4), 2)
        a, b = 1.7, -0.3
        combo = FeatureMap(a * u1.array + b * u2.array)
        lhs = sp.sample(combo, grid, sp.BILINEAR).output.array
        rhs = (a * sp.sample(u1, grid, sp.BILINEAR).output.array
               + b * sp.sample(u2, grid, sp.BILINEAR).output.array)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_partition_of_unity(self):
        # constant map sampled strictly inside the support stays constant
        u = new_map((6, 7, 1), 2.5)
        coords = Rng(22).uniform_array(40, -0.8, 0.8).reshape(20, 2)
        grid = gg.SampleGrid(coords, (4, 5))
        out = sp.sample(u, grid, sp.BILINEAR).output
        assert np.allclose(out.array, 2.5, atol=1e-12)

    def test_partition_of_unity_3d(self):
        u = new_map((4, 4, 4, 1), -1.25)
        coords = Rng(23).uniform_array(30, -0.7, 0.7).reshape(10, 3)
        grid = gg.SampleGrid(coords, (2, 5, 1))
        out = sp.sample(u, grid, sp.TRILINEAR).output
        assert np.allclose(out.array, -1.25, atol=1e-12)

    def test_channel_equivariance(self):
        rng = Rng(24)
        u = random_map(rng.fork(0), (5, 5, 3))
        grid = random_grid(rng.fork(1), (4, 4), 2)
        perm = [2, 0, 1]
        direct = sp.sample(FeatureMap(u.array[:, :, perm]), grid, sp.BILINEAR).output.array
        permuted = sp.sample(u, grid, sp.BILINEAR).output.array[:, :, perm]
        assert np.array_equal(direct, permuted)

    @pytest.mark.parametrize("kind", [sp.INTEGER, sp.BILINEAR, sp.TRILINEAR])
    def test_adjoint_identity(self, kind):
        rng = Rng(25)
        for case in range(20):
            r = rng.fork(case)
            if kind == sp.TRILINEAR:
                shape, out_shape = (4, 3, 4, 2), (3, 2, 2)
            else:
                shape, out_shape = (6, 5, 3), (4, 4)
            u = random_map(r, shape)
            grid = random_grid(r, out_shape, len(out_shape))
            g = r.normal_array(int(np.prod(out_shape)) * shape[-1]).reshape(
                out_shape + (shape[-1],))
            res = sp.sample(u, grid, kind)
            lhs = np.sum(res.output.array * g)
            rhs = np.sum(u.array * sp.backward_input(res, FeatureMap(g)).array)
            assert abs(lhs - rhs) < 1e-10, f"{kind} case {case}"


class TestFlattenDepth:
    def test_single_slice_is_identity(self):
        u = random_map(Rng(30), (3, 4, 1, 2))
        out = sp.flatten_depth(u)
        assert np.array_equal(out.array, u.array[:, :, 0, :])

    def test_all_ones_sums_to_depth(self):
        out = sp.flatten_depth(new_map((2, 2, 3, 1), 1.0))
        assert np.all(out.array == 3.0)

    def test_backward_broadcasts(self):
        g = sp.flatten_depth_backward(new_map((2, 2, 1), 1.0), depth=4)
        assert g.shape == (2, 2, 4, 1)
        assert np.all(g.array == 1.0)

    def test_rejects_2d(self):
        with pytest.raises(ShapeError):
            sp.flatten_depth(new_map((2, 2, 1)))

    def test_adjoint(self):
        rng = Rng(31)
        u = random_map(rng.fork(0), (3, 3, 4, 2))
        g = rng.fork(1).normal_array(18).reshape(3, 3, 2)
        lhs = np.sum(sp.flatten_depth(u).array * g)
        rhs = np.sum(u.array * sp.flatten_depth_backward(FeatureMap(g), 4).array)
        assert abs(lhs - rhs) < 1e-10
