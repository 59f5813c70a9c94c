"""Condition encoders and latent-manipulation applications.

Vector conditions (driving command, ego trajectory) feed the denoiser's
adaLN-Zero branch; token conditions (BEV layout, a previous latent) are
patch-embedded with the denoiser's token geometry and consumed by gated
cross-attention.  Inpainting/outpainting clamp unmasked latent cells to
noised copies of a reference latent at every reverse step.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from . import diffusion
from .hexplane import (
    HexPlane,
    PlaneDims,
    band_slices,
    pad_mask,
    rollout_planes,
    token_grid,
)
from .occgrid import SemanticGrid
from .vae import PlaneBatch, VaeModel, decode, encode_mean, logits_to_grid


class Command(enum.IntEnum):
    STATIC = 0
    FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3

    @classmethod
    def parse(cls, name: str) -> "Command":
        try:
            return cls[name.strip().upper().replace(" ", "_")]
        except KeyError:
            raise ValueError(
                f"unknown command {name!r}; expected one of {[c.name for c in cls]}"
            ) from None


class ConditionError(ValueError):
    pass


@dataclass
class ConditionBundle:
    """Per-sample conditions; a None field means 'absent' for CFG purposes."""

    command: Optional[Command] = None
    trajectory: Optional[torch.Tensor] = None  # (T, 2) xy meters, ego frame
    layout: Optional[torch.Tensor] = None      # (Tl, Xl, Yl) bool
    cond_hexplane: Optional[HexPlane] = None

    def presence(self) -> dict[str, bool]:
        return {
            "command": self.command is not None,
            "trajectory": self.trajectory is not None,
            "layout": self.layout is not None,
            "cond_hexplane": self.cond_hexplane is not None,
        }

    def is_empty(self) -> bool:
        return not any(self.presence().values())


@dataclass
class BatchedConditions:
    """Stacked conditions with per-sample presence flags; built by ConditionEncoders."""

    command: torch.Tensor        # (B,) long, -1 where absent
    trajectory: torch.Tensor     # (B, T, 2)
    traj_present: torch.Tensor   # (B,) float
    layout: torch.Tensor         # (B, Tl, Xl, Yl)
    layout_present: torch.Tensor
    hex_planes: Optional[PlaneBatch]
    hex_present: torch.Tensor

    def is_empty(self) -> bool:
        return (
            bool((self.command < 0).all())
            and not bool(self.traj_present.any())
            and not bool(self.layout_present.any())
            and not bool(self.hex_present.any())
        )

    def with_dropout(self, draws: torch.Tensor, p_drop: float) -> "BatchedConditions":
        keep = draws >= p_drop  # (B, 4) in slot order command/traj/layout/hexplane
        return BatchedConditions(
            command=torch.where(keep[:, 0], self.command, torch.full_like(self.command, -1)),
            trajectory=self.trajectory,
            traj_present=self.traj_present * keep[:, 1].float(),
            layout=self.layout,
            layout_present=self.layout_present * keep[:, 2].float(),
            hex_planes=self.hex_planes,
            hex_present=self.hex_present * keep[:, 3].float(),
        )


class ConditionEncoders(nn.Module):
    """Owns the learned condition parameters and the batching logic.

    At most one token-condition source (layout or previous latent) may be
    enabled per model so the cross-attention context keeps a single
    per-sample presence flag.
    """

    def __init__(self, width: int, dims: PlaneDims, patch: int, frames: int,
                 use_command: bool = False, use_trajectory: bool = False,
                 use_layout: bool = False, use_hexplane: bool = False):
        super().__init__()
        if use_layout and use_hexplane:
            raise ConditionError("enable at most one of layout / previous-latent context")
        self.width = width
        self.dims = dims
        self.patch = patch
        self.frames = frames
        self.use_command = use_command
        self.use_trajectory = use_trajectory
        self.use_layout = use_layout
        self.use_hexplane = use_hexplane
        grid = dims.side // patch
        self.register_buffer("pos", diffusion.token_pos_embed(grid, width), persistent=False)
        _, token_pad = token_grid(dims, patch)
        keep = (~token_pad.reshape(-1)).nonzero(as_tuple=True)[0]
        self.register_buffer("keep_idx", keep, persistent=False)
        # token indices of the top-left (xy-plane) block of the rolled square
        gxy = dims.xl // patch
        xy_idx = (torch.arange(gxy)[:, None] * grid + torch.arange(gxy)[None, :]).reshape(-1)
        self.register_buffer("xy_idx", xy_idx, persistent=False)
        if use_command:
            self.command_table = nn.Embedding(len(Command), width)
        if use_trajectory:
            self.traj_mlp = nn.Sequential(
                nn.Linear(2 * frames, width), nn.SiLU(), nn.Linear(width, width)
            )
        if use_layout:
            self.layout_patch = nn.Conv2d(dims.tl, width, patch, stride=patch)
        if use_hexplane:
            self.hex_patch = nn.Conv2d(dims.c, width, patch, stride=patch)

    @property
    def has_context(self) -> bool:
        return self.use_layout or self.use_hexplane

    # -- batching ----------------------------------------------------------
    def batch(self, bundles: list[Optional[ConditionBundle]]) -> BatchedConditions:
        b = len(bundles)
        d = self.dims
        command = torch.full((b,), -1, dtype=torch.long)
        traj = torch.zeros(b, self.frames, 2)
        traj_present = torch.zeros(b)
        layout = torch.zeros(b, d.tl, d.xl, d.yl)
        layout_present = torch.zeros(b)
        hex_list: list[Optional[HexPlane]] = [None] * b
        hex_present = torch.zeros(b)
        for i, bundle in enumerate(bundles):
            if bundle is None:
                continue
            if bundle.command is not None:
                command[i] = int(bundle.command)
            if bundle.trajectory is not None:
                tr = torch.as_tensor(bundle.trajectory, dtype=torch.float32)
                if tuple(tr.shape) != (self.frames, 2):
                    raise ConditionError(
                        f"trajectory must be ({self.frames}, 2), got {tuple(tr.shape)}"
                    )
                if not torch.isfinite(tr).all():
                    raise ConditionError("trajectory contains non-finite values")
                traj[i] = tr
                traj_present[i] = 1.0
            if bundle.layout is not None:
                lay = torch.as_tensor(bundle.layout)
                if tuple(lay.shape) != (d.tl, d.xl, d.yl):
                    raise ConditionError(
                        f"layout must be ({d.tl}, {d.xl}, {d.yl}), got {tuple(lay.shape)}"
                    )
                layout[i] = lay.float()
                layout_present[i] = 1.0
            if bundle.cond_hexplane is not None:
                if bundle.cond_hexplane.dims != d:
                    raise ConditionError("condition latent dims do not match the generator")
                hex_list[i] = bundle.cond_hexplane
                hex_present[i] = 1.0
        hex_planes = None
        if any(h is not None for h in hex_list):
            zero = HexPlane.zeros(d)
            hex_planes = PlaneBatch.stack([h if h is not None else zero for h in hex_list])
        return BatchedConditions(command, traj, traj_present, layout, layout_present,
                                 hex_planes, hex_present)

    # -- encoding ----------------------------------------------------------
    def forward(self, cond: Optional[BatchedConditions], batch: int, stats):
        vec = torch.zeros(batch, self.width)
        if cond is None:
            return vec, None
        if self.use_command:
            active = cond.command >= 0
            emb = self.command_table(cond.command.clamp_min(0))
            vec = vec + emb * active.float().unsqueeze(1)
        if self.use_trajectory:
            emb = self.traj_mlp(cond.trajectory.reshape(batch, -1))
            vec = vec + emb * cond.traj_present.unsqueeze(1)
        ctx = None
        if self.use_layout and bool(cond.layout_present.any()):
            tokens = self._layout_tokens(cond.layout)
            ctx = (tokens, cond.layout_present)
        elif self.use_hexplane and cond.hex_planes is not None and bool(cond.hex_present.any()):
            tokens = self._hexplane_tokens(cond.hex_planes, stats)
            ctx = (tokens, cond.hex_present)
        return vec, ctx

    def _layout_tokens(self, layout: torch.Tensor) -> torch.Tensor:
        tokens = self.layout_patch(layout).flatten(2).transpose(1, 2)  # (B, Gxy^2, W)
        return tokens + self.pos[self.xy_idx]

    def _hexplane_tokens(self, planes: PlaneBatch, stats) -> torch.Tensor:
        mean, std = stats
        normed = PlaneBatch(*((p - mean[i]) / std[i] for i, p in enumerate(planes)))
        rolled = rollout_planes(normed, self.dims).permute(0, 3, 1, 2)
        tokens = self.hex_patch(rolled).flatten(2).transpose(1, 2)
        return tokens[:, self.keep_idx] + self.pos[self.keep_idx]


# ---------------------------------------------------------------------------
# Single-condition encoding ops
# ---------------------------------------------------------------------------

def encode_command(cmd: Command | str, encoders: ConditionEncoders) -> torch.Tensor:
    """The learned embedding row for one driving command."""
    if not encoders.use_command:
        raise ConditionError("model has no command table")
    cmd = Command.parse(cmd) if isinstance(cmd, str) else Command(cmd)
    with torch.no_grad():
        return encoders.command_table.weight[int(cmd)].clone()


def encode_trajectory(traj: torch.Tensor, encoders: ConditionEncoders) -> torch.Tensor:
    """Flatten a (T, 2) trajectory and push it through the two-layer MLP."""
    if not encoders.use_trajectory:
        raise ConditionError("model has no trajectory encoder")
    traj = torch.as_tensor(traj, dtype=torch.float32)
    if tuple(traj.shape) != (encoders.frames, 2):
        raise ConditionError(f"trajectory must be ({encoders.frames}, 2)")
    if not torch.isfinite(traj).all():
        raise ConditionError("trajectory contains non-finite values")
    with torch.no_grad():
        return encoders.traj_mlp(traj.reshape(1, -1))[0]


def extract_layout(q: SemanticGrid, vehicle_class: int, dims: PlaneDims) -> torch.Tensor:
    """Binary BEV occupancy of one class, max-pooled to (Tl, Xl, Yl)."""
    if not (0 <= vehicle_class < q.num_classes):
        raise ConditionError(f"class {vehicle_class} outside [0, {q.num_classes})")
    t, x, y, z = q.shape
    if (t, x, y) != (dims.tl * dims.d_t, dims.xl * dims.d_x, dims.yl * dims.d_y):
        raise ConditionError("grid extents do not match plane dims")
    occ = torch.from_numpy((q.labels == vehicle_class).any(axis=3))
    pooled = occ.reshape(dims.tl, dims.d_t, dims.xl, dims.d_x, dims.yl, dims.d_y)
    return pooled.any(dim=5).any(dim=3).any(dim=1)


def embed_layout(layout: torch.Tensor, encoders: ConditionEncoders) -> torch.Tensor:
    """Condition tokens for one BEV layout, aligned with the xy-plane block."""
    if not encoders.use_layout:
        raise ConditionError("model has no layout encoder")
    d = encoders.dims
    lay = torch.as_tensor(layout)
    if tuple(lay.shape) != (d.tl, d.xl, d.yl):
        raise ConditionError(f"layout must be ({d.tl}, {d.xl}, {d.yl})")
    with torch.no_grad():
        return encoders._layout_tokens(lay.float().unsqueeze(0))[0]


def embed_cond_hexplane(h: HexPlane, encoders: ConditionEncoders,
                        stats=None) -> torch.Tensor:
    """Condition tokens for a previous latent (padding tokens dropped)."""
    if not encoders.use_hexplane:
        raise ConditionError("model has no latent-condition encoder")
    if h.dims != encoders.dims:
        raise ConditionError("latent dims do not match the generator")
    if stats is None:
        stats = (torch.zeros(6, h.dims.c), torch.ones(6, h.dims.c))
    planes = PlaneBatch(*(p.unsqueeze(0) for p in h.planes()))
    with torch.no_grad():
        return encoders._hexplane_tokens(planes, stats)[0]


# ---------------------------------------------------------------------------
# Inpainting masks
# ---------------------------------------------------------------------------

@dataclass
class InpaintMask:
    """Boolean (Xl, Yl) mask in latent coordinates; True marks cells to regenerate."""

    m: torch.Tensor

    def __post_init__(self):
        self.m = torch.as_tensor(self.m).bool()
        if self.m.ndim != 2 or self.m.numel() == 0:
            raise ConditionError("mask must be a non-empty 2-D array")

    def check(self, dims: PlaneDims) -> None:
        if tuple(self.m.shape) != (dims.xl, dims.yl):
            raise ConditionError(
                f"mask shape {tuple(self.m.shape)} does not match planes ({dims.xl}, {dims.yl})"
            )


def extend_mask(mask: InpaintMask, dims: PlaneDims) -> dict[str, torch.Tensor]:
    """Spread an xy mask onto all six planes.

    A plane cell regenerates iff its spatial footprint intersects the masked
    xy region; the tz plane's footprint is all of xy, so it is all-or-nothing.
    """
    mask.check(dims)
    m = mask.m
    any_y = m.any(dim=1)  # per x
    any_x = m.any(dim=0)  # per y
    full = bool(m.any())
    return {
        "p_xy": m.clone(),
        "p_xz": any_y[:, None].expand(dims.xl, dims.zl).clone(),
        "p_yz": any_x[:, None].expand(dims.yl, dims.zl).clone(),
        "p_tx": any_y[None, :].expand(dims.tl, dims.xl).clone(),
        "p_ty": any_x[None, :].expand(dims.tl, dims.yl).clone(),
        "p_tz": torch.full((dims.tl, dims.zl), full, dtype=torch.bool),
    }


def rolled_regen_mask(plane_masks: dict[str, torch.Tensor], dims: PlaneDims) -> torch.Tensor:
    """(S, S) regeneration mask over the rolled square; padding counts as free."""
    xb, zb, tb = band_slices(dims)
    out = pad_mask(dims).clone()
    out[xb, xb] = plane_masks["p_xy"]
    out[xb, zb] = plane_masks["p_xz"]
    out[xb, tb] = plane_masks["p_ty"].transpose(0, 1)
    out[zb, xb] = plane_masks["p_yz"].transpose(0, 1)
    out[tb, xb] = plane_masks["p_tx"]
    out[tb, zb] = plane_masks["p_tz"]
    return out


# ---------------------------------------------------------------------------
# Applications
# ---------------------------------------------------------------------------

def inpaint(model: diffusion.Denoiser, schedule: diffusion.DiffusionSchedule,
            h_in: HexPlane, mask: InpaintMask, cond: Optional[ConditionBundle] = None,
            w: float = 0.0, seed: int = 0, deterministic: bool = False) -> HexPlane:
    """Regenerate masked latent regions; unmasked cells match ``h_in`` exactly."""
    if h_in.dims != model.dims:
        raise ConditionError("input latent dims do not match the model")
    plane_masks = extend_mask(mask, model.dims)
    if all(bool(pm.all()) for pm in plane_masks.values()):
        # nothing preserved: identical to a plain (conditional) sample
        return diffusion.sample(model, schedule, cond, w, seed, deterministic=deterministic)

    regen = rolled_regen_mask(plane_masks, model.dims)  # True = evolve freely
    keep3 = (~regen)[None, None, :, :]
    x0 = rollout_planes(
        model.normalize(PlaneBatch(*(p.unsqueeze(0) for p in h_in.planes()))), model.dims
    ).permute(0, 3, 1, 2)
    clamp_gen = torch.Generator().manual_seed((seed * 7_369_009 + 17) % (2 ** 63 - 1))

    def clamp(x: torch.Tensor, t_next: int) -> torch.Tensor:
        if t_next == 0:
            ref = x0
        else:
            eps = torch.randn(x0.shape, generator=clamp_gen)
            ref = diffusion.q_sample(x0, t_next, eps, schedule, pad=model.cell_pad)
        return torch.where(keep3, ref, x)

    out = diffusion.sample(model, schedule, cond, w, seed,
                           deterministic=deterministic, clamp=clamp)
    # exact preservation, immune to normalization round-trip error
    merged = []
    for name_mask, out_p, in_p in zip(plane_masks.values(), out.planes(), h_in.planes()):
        merged.append(torch.where(name_mask.unsqueeze(-1), out_p, in_p))
    return HexPlane(*merged, dims=model.dims)


def outpaint(model: diffusion.Denoiser, schedule: diffusion.DiffusionSchedule,
             h_in: HexPlane, shift_cells: int, cond: Optional[ConditionBundle] = None,
             w: float = 0.0, seed: int = 0, deterministic: bool = False) -> HexPlane:
    """Shift the latent scene along +x and regenerate the vacated strip."""
    d = model.dims
    if h_in.dims != d:
        raise ConditionError("input latent dims do not match the model")
    if not (0 < shift_cells < d.xl):
        raise ConditionError(f"shift must be in (0, {d.xl}), got {shift_cells}")
    s = shift_cells
    keep = d.xl - s

    def shift_rows(p):  # x on axis 0
        out = torch.zeros_like(p)
        out[:keep] = p[s:]
        return out

    def shift_cols(p):  # x on axis 1
        out = torch.zeros_like(p)
        out[:, :keep] = p[:, s:]
        return out

    shifted = HexPlane(
        shift_rows(h_in.p_xy), shift_rows(h_in.p_xz), h_in.p_yz.clone(),
        shift_cols(h_in.p_tx), h_in.p_ty.clone(), h_in.p_tz.clone(), dims=d,
    )
    m = torch.zeros(d.xl, d.yl, dtype=torch.bool)
    m[keep:] = True
    return inpaint(model, schedule, shifted, InpaintMask(m), cond, w, seed, deterministic)


def extend_sequence(model: diffusion.Denoiser, schedule: diffusion.DiffusionSchedule,
                    h_prev: HexPlane, n_chunks: int, w: float = 0.0,
                    seed: int = 0) -> list[HexPlane]:
    """Autoregressively sample ``n_chunks`` latents, each conditioned on its predecessor."""
    if n_chunks < 1:
        raise ConditionError("n_chunks must be >= 1")
    if h_prev.dims != model.dims:
        raise ConditionError("previous latent dims do not match the model")
    chunks: list[HexPlane] = []
    prev = h_prev
    for i in range(n_chunks):
        bundle = ConditionBundle(cond_hexplane=prev)
        prev = diffusion.sample(model, schedule, bundle, w, seed + i)
        chunks.append(prev)
    return chunks


def forecast(model: diffusion.Denoiser, schedule: diffusion.DiffusionSchedule,
             context: SemanticGrid, vae: VaeModel, w: float = 0.0,
             seed: int = 0) -> SemanticGrid:
    """Predict the next chunk of frames from a context chunk (mean-path encoding)."""
    h_ctx = encode_mean(context, vae.encoder)
    if h_ctx.dims != model.dims:
        raise ConditionError("context latent dims do not match the generator")
    nxt = extend_sequence(model, schedule, h_ctx, n_chunks=1, w=w, seed=seed)[0]
    logits = decode(nxt, vae.decoder)
    return logits_to_grid(logits, vae.spec.num_classes)
