import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from msvm.errors import ShapeError
from msvm.routes import (ALL_ROUTES, ScanRoute, flatten, min_route_distance, route_distance, route_order, ss2d,
                         unflatten)
from msvm.ssm import selective_scan
from msvm.tensor import Tensor
from msvm.verify import random_params

routes = st.sampled_from(ALL_ROUTES)
dims = st.integers(1, 12)


def grid(H, W, D=2):
    return np.arange(H * W * D, dtype=np.float64).reshape(H, W, D)


class TestFlatten:
    @given(routes, dims, dims)
    def test_order_matches_written_out_sequence(self, route, H, W):
        seq = O.route_sequence(route.value, H, W)
        assert route_order(route, H, W).tolist() == [p * W + q for p, q in seq]

    @given(routes, dims, dims)
    def test_involution(self, route, H, W):
        Z = grid(H, W)
        np.testing.assert_array_equal(unflatten(route, flatten(route, Tensor(Z)), H, W).data, Z)

    def test_row_fwd_is_raster(self):
        Z = grid(3, 4)
        np.testing.assert_array_equal(flatten(ScanRoute.ROW_FWD, Tensor(Z)).data, Z.reshape(12, 2))

    def test_col_rev_first_token_is_bottom_right(self):
        Z = grid(3, 4)
        np.testing.assert_array_equal(flatten(ScanRoute.COL_REV, Tensor(Z)).data[0], Z[2, 3])

    def test_batched(self):
        Z = np.stack([grid(2, 3), -grid(2, 3)])
        X = flatten(ScanRoute.COL_FWD, Tensor(Z)).data
        assert X.shape == (2, 6, 2)
        np.testing.assert_array_equal(X[1], -X[0])

    def test_unflatten_length_mismatch(self):
        with pytest.raises(ShapeError):
            unflatten(ScanRoute.ROW_FWD, Tensor(np.zeros((5, 1))), 2, 3)

    def test_parse(self):
        assert ScanRoute.parse("COL_REV") is ScanRoute.COL_REV
        with pytest.raises(ValueError):
            ScanRoute.parse("diag")


class TestDistance:
    @given(routes, st.integers(0, 7), st.integers(0, 7), st.integers(0, 7), st.integers(0, 7))
    def test_distance_vs_table(self, route, a, b, c, d):
        seq = O.route_sequence(route.value, 8, 8)
        assert route_distance(route, (a, b), (c, d), 8, 8) == seq.index((c, d)) - seq.index((a, b))

    def test_examples(self):
        # raster arithmetic on an 8x8 grid
        assert route_distance(ScanRoute.ROW_FWD, (0, 0), (1, 0), 8, 8) == 8
        assert route_distance(ScanRoute.COL_FWD, (0, 0), (1, 0), 8, 8) == 1
        assert min_route_distance(ALL_ROUTES, (0, 0), (1, 0), 8, 8) == 1
        assert min_route_distance([ScanRoute.ROW_FWD], (1, 0), (0, 0), 8, 8) is None

    def test_vertical_neighbour_under_row_route_only(self):
        # a vertical neighbour is W steps away on a row route
        assert min_route_distance([ScanRoute.ROW_FWD, ScanRoute.ROW_REV], (2, 3), (3, 3), 8, 8) == 8

    def test_empty_route_set(self):
        with pytest.raises(ValueError):
            min_route_distance([], (0, 0), (0, 1), 4, 4)

    def test_out_of_bounds(self):
        with pytest.raises(IndexError):
            route_distance(ScanRoute.ROW_FWD, (0, 0), (4, 0), 4, 4)


class TestSS2D:
    def test_matches_per_route_sum(self, rng):
        ps = [random_params(rng, 2, 2) for _ in range(4)]
        Z = rng.standard_normal((3, 4, 2))
        expect = np.zeros_like(Z)
        for route, p in zip(ALL_ROUTES, ps):
            seq = O.route_sequence(route.value, 3, 4)
            u = np.array([Z[a, b] for a, b in seq])
            y = O.scan(u, p)
            for (a, b), row in zip(seq, y):
                expect[a, b] += row
        np.testing.assert_allclose(ss2d(Tensor(Z), ps).data, expect, rtol=1e-10, atol=1e-12)

    @given(st.integers(0, 2**31))
    def test_transpose_and_rot180_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        p, Z = random_params(rng, 2, 2), rng.standard_normal((6, 6, 2))
        base = ss2d(Tensor(Z), p).data
        np.testing.assert_allclose(ss2d(Tensor(Z.transpose(1, 0, 2).copy()), p).data,
                                   base.transpose(1, 0, 2), rtol=0, atol=1e-10)
        np.testing.assert_allclose(ss2d(Tensor(Z[::-1, ::-1].copy()), p).data, base[::-1, ::-1], rtol=0, atol=1e-10)

    def test_single_route_is_plain_scan(self, rng):
        p, Z = random_params(rng, 2, 2), rng.standard_normal((3, 3, 2))
        got = ss2d(Tensor(Z), p, routes=[ScanRoute.ROW_FWD]).data
        np.testing.assert_allclose(got.reshape(9, 2), selective_scan(Tensor(Z.reshape(9, 2)), p).data)

    def test_group_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            ss2d(Tensor(np.zeros((2, 2, 2))), [random_params(rng, 2, 1)] * 3)
