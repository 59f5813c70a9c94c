"""Six-plane factorized latents for 4D grids, and their square-map rollout.

A latent is six 2D feature planes [p_xy, p_xz, p_yz, p_tx, p_ty, p_tz] with a
shared channel count C.  The rollout packs all six into one square map of side
S = Xl + Zl + Tl so a plain 2D transformer can consume it; the three uncovered
corner blocks are zero padding.

Canonical block layout (rows x columns, bands [Xl | Zl | Tl]):

    +--------+--------+--------+
    |  p_xy  |  p_xz  | p_ty^T |
    +--------+--------+--------+
    | p_yz^T |  pad   |  pad   |
    +--------+--------+--------+
    |  p_tx  |  p_tz  |  pad   |
    +--------+--------+--------+

which requires Xl == Yl and wastes exactly Zl^2 + Zl*Tl + Tl^2 cells.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

PLANE_NAMES = ("p_xy", "p_xz", "p_yz", "p_tx", "p_ty", "p_tz")


class DimsError(ValueError):
    """Inconsistent plane dimensions or rates."""


@dataclass(frozen=True)
class PlaneDims:
    """Latent axis sizes, their downsampling rates and the channel count."""

    tl: int
    xl: int
    yl: int
    zl: int
    d_t: int
    d_x: int
    d_y: int
    d_z: int
    c: int

    def __post_init__(self):
        for name in ("tl", "xl", "yl", "zl", "d_t", "d_x", "d_y", "d_z", "c"):
            if getattr(self, name) < 1:
                raise DimsError(f"{name} must be positive")
        if self.xl != self.yl:
            raise DimsError(f"square rollout needs Xl == Yl, got {self.xl} != {self.yl}")

    @classmethod
    def from_grid(cls, t: int, x: int, y: int, z: int,
                  d_t: int, d_x: int, d_y: int, d_z: int, c: int) -> "PlaneDims":
        for name, dim, rate in (("T", t, d_t), ("X", x, d_x), ("Y", y, d_y), ("Z", z, d_z)):
            if rate < 1 or dim % rate:
                raise DimsError(f"{name}={dim} not divisible by rate {rate}")
        return cls(t // d_t, x // d_x, y // d_y, z // d_z, d_t, d_x, d_y, d_z, c)

    @property
    def original(self) -> tuple[int, int, int, int]:
        return (self.tl * self.d_t, self.xl * self.d_x, self.yl * self.d_y, self.zl * self.d_z)

    @property
    def side(self) -> int:
        return self.xl + self.zl + self.tl

    @property
    def plane_shapes(self) -> dict[str, tuple[int, int]]:
        return {
            "p_xy": (self.xl, self.yl),
            "p_xz": (self.xl, self.zl),
            "p_yz": (self.yl, self.zl),
            "p_tx": (self.tl, self.xl),
            "p_ty": (self.tl, self.yl),
            "p_tz": (self.tl, self.zl),
        }

    @property
    def total_plane_cells(self) -> int:
        return sum(a * b for a, b in self.plane_shapes.values())

    @property
    def padding_cells(self) -> int:
        return self.zl * self.zl + self.zl * self.tl + self.tl * self.tl

    def with_time(self, tl: int, d_t: int = 1) -> "PlaneDims":
        return PlaneDims(tl, self.xl, self.yl, self.zl, d_t,
                         self.d_x, self.d_y, self.d_z, self.c)


@dataclass
class HexPlane:
    """Six channel-last feature planes plus their dims; immutable by convention."""

    p_xy: torch.Tensor
    p_xz: torch.Tensor
    p_yz: torch.Tensor
    p_tx: torch.Tensor
    p_ty: torch.Tensor
    p_tz: torch.Tensor
    dims: PlaneDims

    def __post_init__(self):
        for name in PLANE_NAMES:
            plane = getattr(self, name)
            want = (*self.dims.plane_shapes[name], self.dims.c)
            if tuple(plane.shape) != want:
                raise DimsError(f"{name} has shape {tuple(plane.shape)}, expected {want}")
            if not torch.isfinite(plane).all():
                raise DimsError(f"{name} contains non-finite values")

    def planes(self) -> tuple[torch.Tensor, ...]:
        return tuple(getattr(self, name) for name in PLANE_NAMES)

    def map_planes(self, fn) -> "HexPlane":
        return HexPlane(*(fn(p) for p in self.planes()), dims=self.dims)

    def allclose(self, other: "HexPlane", atol: float = 0.0, rtol: float = 0.0) -> bool:
        return all(
            torch.allclose(a, b, atol=atol, rtol=rtol)
            for a, b in zip(self.planes(), other.planes())
        )

    @classmethod
    def zeros(cls, dims: PlaneDims, dtype=torch.float32) -> "HexPlane":
        planes = [torch.zeros(*shape, dims.c, dtype=dtype) for shape in dims.plane_shapes.values()]
        return cls(*planes, dims=dims)

    @classmethod
    def randn(cls, dims: PlaneDims, generator: torch.Generator | None = None,
              dtype=torch.float32) -> "HexPlane":
        planes = [
            torch.randn(*shape, dims.c, generator=generator, dtype=dtype)
            for shape in dims.plane_shapes.values()
        ]
        return cls(*planes, dims=dims)


@dataclass
class RolledMap:
    """Square S x S x C map with a boolean padding mask (True = padding)."""

    data: torch.Tensor
    pad_mask: torch.Tensor

    def __post_init__(self):
        s = self.data.shape[0]
        if self.data.ndim != 3 or self.data.shape[1] != s:
            raise DimsError(f"rolled map must be (S, S, C), got {tuple(self.data.shape)}")
        if tuple(self.pad_mask.shape) != (s, s):
            raise DimsError("pad_mask must be (S, S)")

    @property
    def side(self) -> int:
        return self.data.shape[0]


def band_slices(dims: PlaneDims) -> tuple[slice, slice, slice]:
    """Row/column bands of the rollout layout, in order (x, z, t)."""
    x0, z0, t0 = 0, dims.xl, dims.xl + dims.zl
    return slice(x0, z0), slice(z0, t0), slice(t0, dims.side)


def pad_mask(dims: PlaneDims, device=None) -> torch.Tensor:
    """(S, S) boolean mask, True exactly on the three uncovered corner blocks."""
    xb, zb, tb = band_slices(dims)
    mask = torch.zeros(dims.side, dims.side, dtype=torch.bool, device=device)
    mask[zb, zb] = True
    mask[zb, tb] = True
    mask[tb, tb] = True
    return mask


def query(h: HexPlane, p: tuple[int, int, int, int]) -> torch.Tensor:
    """Fused feature at latent grid point (t, x, y, z): the six-way elementwise product.

    Factor order is fixed (xy, xz, yz, tx, ty, tz) so results match the
    broadcast decoder bit for bit.
    """
    t, x, y, z = p
    d = h.dims
    if not (0 <= t < d.tl and 0 <= x < d.xl and 0 <= y < d.yl and 0 <= z < d.zl):
        raise IndexError(f"point {p} outside latent grid ({d.tl},{d.xl},{d.yl},{d.zl})")
    out = h.p_xy[x, y] * h.p_xz[x, z]
    out = out * h.p_yz[y, z]
    out = out * h.p_tx[t, x]
    out = out * h.p_ty[t, y]
    return out * h.p_tz[t, z]


def rollout(h: HexPlane) -> RolledMap:
    """Pack the six planes into one zero-padded square map."""
    data = rollout_planes(tuple(p.unsqueeze(0) for p in h.planes()), h.dims)[0]
    return RolledMap(data=data, pad_mask=pad_mask(h.dims))


def rollout_planes(planes: tuple[torch.Tensor, ...], dims: PlaneDims) -> torch.Tensor:
    """Batched rollout: six (B, rows, cols, C) planes -> (B, S, S, C)."""
    p_xy, p_xz, p_yz, p_tx, p_ty, p_tz = planes
    b = p_xy.shape[0]
    xb, zb, tb = band_slices(dims)
    data = torch.zeros(b, dims.side, dims.side, dims.c,
                       dtype=p_xy.dtype, device=p_xy.device)
    data[:, xb, xb] = p_xy
    data[:, xb, zb] = p_xz
    data[:, xb, tb] = p_ty.transpose(1, 2)
    data[:, zb, xb] = p_yz.transpose(1, 2)
    data[:, tb, xb] = p_tx
    data[:, tb, zb] = p_tz
    return data


def unrollout(m: RolledMap, dims: PlaneDims, strict: bool = True) -> HexPlane:
    """Invert rollout; with ``strict`` the padding cells must be exactly zero."""
    if m.side != dims.side:
        raise DimsError(f"rolled side {m.side} does not match dims side {dims.side}")
    if strict:
        pad = pad_mask(dims, device=m.data.device)
        if bool((m.data[pad] != 0).any()):
            raise DimsError("nonzero padding cells in strict unrollout")
    planes = unrollout_planes(m.data.unsqueeze(0), dims)
    return HexPlane(*(p[0] for p in planes), dims=dims)


def unrollout_planes(data: torch.Tensor, dims: PlaneDims) -> tuple[torch.Tensor, ...]:
    """Batched inverse of rollout_planes: (B, S, S, C) -> six (B, rows, cols, C)."""
    xb, zb, tb = band_slices(dims)
    return (
        data[:, xb, xb].clone(),
        data[:, xb, zb].clone(),
        data[:, zb, xb].transpose(1, 2).clone(),
        data[:, tb, xb].clone(),
        data[:, xb, tb].transpose(1, 2).clone(),
        data[:, tb, zb].clone(),
    )


def compression_ratio(original: tuple[int, int, int, int], dims: PlaneDims) -> float:
    """Input voxel count over latent scalar count (C x total plane cells)."""
    t, x, y, z = original
    expect = dims.original
    if (t, x, y, z) != expect:
        raise DimsError(f"original dims {original} inconsistent with latent dims {expect}")
    return (t * x * y * z) / (dims.c * dims.total_plane_cells)


def token_grid(dims: PlaneDims, p: int) -> tuple[int, torch.Tensor]:
    """Token count and (G, G) padding mask for patch size ``p``.

    Each latent axis must be divisible by p so every token footprint lies in
    exactly one plane (or padding) block.
    """
    for name, v in (("Xl", dims.xl), ("Zl", dims.zl), ("Tl", dims.tl)):
        if v % p:
            raise DimsError(f"{name}={v} not divisible by patch size {p}")
    g = dims.side // p
    cells = pad_mask(dims)
    blocks = cells.reshape(g, p, g, p).permute(0, 2, 1, 3).reshape(g, g, p * p)
    token_pad = blocks.all(dim=-1)
    # footprints never straddle blocks, so all-padding and any-padding agree
    assert bool((token_pad == blocks.any(dim=-1)).all())
    return g * g, token_pad
