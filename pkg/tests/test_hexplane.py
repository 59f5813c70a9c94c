import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from occ4d.hexplane import (
    DimsError,
    HexPlane,
    PlaneDims,
    RolledMap,
    compression_ratio,
    pad_mask,
    query,
    rollout,
    token_grid,
    unrollout,
)

TOY = PlaneDims.from_grid(8, 32, 32, 8, 2, 2, 2, 2, 16)


def randn_plane(dims, seed=0):
    return HexPlane.randn(dims, torch.Generator().manual_seed(seed))


class TestDims:
    def test_divisibility_enforced(self):
        with pytest.raises(DimsError):
            PlaneDims.from_grid(8, 32, 32, 8, 3, 2, 2, 2, 16)

    def test_square_requirement(self):
        with pytest.raises(DimsError):
            PlaneDims.from_grid(8, 32, 16, 8, 2, 2, 2, 2, 16)

    def test_toy_sizes(self):
        assert (TOY.tl, TOY.xl, TOY.yl, TOY.zl) == (4, 16, 16, 4)
        assert TOY.side == 24
        assert TOY.padding_cells == 4 * 4 + 4 * 4 + 4 * 4


class TestQuery:
    def test_all_ones(self):
        h = HexPlane.zeros(TOY).map_planes(lambda p: p + 1.0)
        assert torch.equal(query(h, (0, 0, 0, 0)), torch.ones(16))

    def test_zero_plane_absorbs(self):
        h = randn_plane(TOY)
        h = HexPlane(h.p_xy, h.p_xz, h.p_yz, h.p_tx, h.p_ty,
                     torch.zeros_like(h.p_tz), dims=TOY)
        assert torch.equal(query(h, (1, 2, 3, 0)), torch.zeros(16))

    def test_hand_oracle(self):
        dims = PlaneDims.from_grid(4, 8, 8, 4, 2, 2, 2, 2, 2)
        h = randn_plane(dims, seed=7)
        t, x, y, z = 1, 2, 3, 0
        expected = (
            h.p_xy[x, y] * h.p_xz[x, z] * h.p_yz[y, z]
            * h.p_tx[t, x] * h.p_ty[t, y] * h.p_tz[t, z]
        )
        assert torch.allclose(query(h, (t, x, y, z)), expected)

    def test_out_of_bounds(self):
        h = randn_plane(TOY)
        with pytest.raises(IndexError):
            query(h, (4, 0, 0, 0))
        with pytest.raises(IndexError):
            query(h, (0, 0, -1, 0))


class TestRollout:
    def test_carla_side(self):
        dims = PlaneDims.from_grid(16, 128, 128, 8, 2, 2, 2, 2, 16)
        assert dims.side == 76

    def test_toy_padding_count(self):
        dims = PlaneDims(4, 16, 16, 4, 2, 2, 2, 2, 16)
        m = rollout(randn_plane(dims))
        assert m.side == 24
        assert int(m.pad_mask.sum()) == 48

    def test_bijectivity(self):
        for seed in range(5):
            h = randn_plane(TOY, seed)
            h2 = unrollout(rollout(h), TOY)
            assert all(torch.equal(a, b) for a, b in zip(h.planes(), h2.planes()))

    def test_padding_exactly_zero(self):
        m = rollout(randn_plane(TOY, 3))
        assert bool((m.data[m.pad_mask] == 0).all())

    def test_nonpad_count_matches_plane_cells(self):
        m = rollout(randn_plane(TOY))
        assert int((~m.pad_mask).sum()) == TOY.total_plane_cells

    def test_roundtrip_on_nonpadding(self):
        h = randn_plane(TOY, 11)
        m = rollout(h)
        m2 = rollout(unrollout(m, TOY))
        assert torch.equal(m.data, m2.data)

    def test_all_zero_map(self):
        m = RolledMap(torch.zeros(24, 24, 16), pad_mask(TOY))
        h = unrollout(m, TOY)
        assert all((p == 0).all() for p in h.planes())

    def test_side_mismatch(self):
        bad = RolledMap(torch.zeros(25, 25, 16), torch.zeros(25, 25, dtype=torch.bool))
        with pytest.raises(DimsError):
            unrollout(bad, TOY)

    def test_strict_rejects_dirty_padding(self):
        m = rollout(randn_plane(TOY))
        m.data[TOY.xl + 1, TOY.xl + 1, 0] = 1.0  # inside the (z, z) padding block
        with pytest.raises(DimsError):
            unrollout(m, TOY, strict=True)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_bijection_property(self, seed):
        dims = PlaneDims(2, 4, 4, 2, 1, 1, 1, 1, 3)
        h = randn_plane(dims, seed)
        h2 = unrollout(rollout(h), dims)
        assert all(torch.equal(a, b) for a, b in zip(h.planes(), h2.planes()))


class TestCompressionRatio:
    CASES = [
        ((16, 128, 128, 8), (1, 1, 1, 1), 5.78),
        ((16, 128, 128, 8), (1, 2, 2, 1), 17.96),
        ((16, 128, 128, 8), (2, 2, 2, 2), 23.14),
        ((16, 128, 128, 8), (2, 4, 4, 2), 71.86),
        ((16, 200, 200, 16), (1, 2, 2, 1), 38.42),
        ((16, 200, 200, 16), (2, 2, 2, 2), 48.25),
        ((16, 200, 200, 16), (2, 4, 4, 2), 153.69),
    ]

    @pytest.mark.parametrize("original,rates,expected", CASES)
    def test_published_table(self, original, rates, expected):
        dims = PlaneDims.from_grid(*original, *rates, 16)
        assert compression_ratio(original, dims) == pytest.approx(expected, abs=0.02)

    def test_inconsistent_original(self):
        dims = PlaneDims.from_grid(8, 32, 32, 8, 2, 2, 2, 2, 16)
        with pytest.raises(DimsError):
            compression_ratio((8, 32, 32, 16), dims)


class TestTokenGrid:
    def test_carla_token_count(self):
        dims = PlaneDims.from_grid(16, 128, 128, 8, 2, 2, 2, 2, 16)
        n, _ = token_grid(dims, 2)
        assert n == 1444

    def test_toy_tokens(self):
        n, tp = token_grid(PlaneDims(4, 16, 16, 4, 2, 2, 2, 2, 16), 2)
        assert n == 144
        assert int(tp.sum()) == 12

    def test_divisibility_error(self):
        with pytest.raises(DimsError):
            token_grid(PlaneDims(4, 16, 16, 4, 2, 2, 2, 2, 16), 3)

    def test_padding_tokens_cover_padding_cells(self):
        dims = PlaneDims(4, 16, 16, 4, 2, 2, 2, 2, 16)
        p = 2
        _, tp = token_grid(dims, p)
        cells = pad_mask(dims)
        for i in range(dims.side // p):
            for j in range(dims.side // p):
                block = cells[i * p:(i + 1) * p, j * p:(j + 1) * p]
                assert bool(tp[i, j]) == bool(block.all())
                # uniform footprint: never a partially padded token
                assert bool(block.all()) == bool(block.any())
