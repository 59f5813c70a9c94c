"""Denoising diffusion over rolled plane maps.

The denoiser is a transformer over p x p patches of the square rolled map;
tokens whose footprint is padding are dropped before the blocks and restored
as zeros afterwards, and the training loss only covers non-padding cells.
Vector conditions (timestep, command, trajectory) modulate each block through
zero-initialized scale/shift/gate regression (adaLN-Zero); token conditions
(layout, previous latent) enter through a gated cross-attention sublayer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .hexplane import (
    HexPlane,
    PlaneDims,
    pad_mask,
    rollout_planes,
    token_grid,
    unrollout_planes,
)
from .vae import PlaneBatch, _attention


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step variances and derived posterior coefficients, indexed by t-1."""

    n_steps: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    alpha_bar_prev: torch.Tensor
    posterior_var: torch.Tensor

    def signal(self, t: int) -> float:
        return float(self.alpha_bar[t - 1])


def make_schedule(n_steps: int, kind: str = "linear") -> DiffusionSchedule:
    """Linear beta ramp 1e-4 .. 2e-2; cumulative products computed in float64."""
    if n_steps < 1:
        raise ScheduleError(f"n_steps must be >= 1, got {n_steps}")
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    beta = torch.linspace(1e-4, 2e-2, n_steps, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return DiffusionSchedule(
        n_steps=n_steps,
        beta=beta.float(),
        alpha=alpha.float(),
        alpha_bar=alpha_bar.float(),
        alpha_bar_prev=alpha_bar_prev.float(),
        posterior_var=posterior_var.float(),
    )


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor,
             schedule: DiffusionSchedule, pad: torch.Tensor | None = None) -> torch.Tensor:
    """Forward noising sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; padding re-zeroed.

    ``t`` is 1-based; a tensor ``t`` applies per-sample levels over the batch.
    """
    if torch.is_tensor(t):
        if int(t.min()) < 1 or int(t.max()) > schedule.n_steps:
            raise ScheduleError("t out of range")
        abar = schedule.alpha_bar[t - 1].reshape(-1, *([1] * (x0.ndim - 1)))
    else:
        if not (1 <= t <= schedule.n_steps):
            raise ScheduleError(f"t={t} outside [1, {schedule.n_steps}]")
        abar = schedule.alpha_bar[t - 1]
    if eps.shape != x0.shape:
        raise ScheduleError("eps shape must match x0")
    out = torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps
    if pad is not None:
        out = out.masked_fill(_expand_pad(pad, out), 0.0)
    return out


def _expand_pad(pad: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    # pad is (S, S); broadcast over batch and channel dims of (B, C, S, S) or (S, S, C)
    if like.ndim == 4:
        return pad[None, None, :, :].expand_as(like)
    if like.ndim == 3 and like.shape[0] == pad.shape[0]:
        return pad[:, :, None].expand_as(like)
    raise ScheduleError(f"cannot broadcast pad mask to shape {tuple(like.shape)}")


@dataclass
class NoisedSample:
    x_t: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor


def guided_eps(eps_c: torch.Tensor, eps_u: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance combination (1 + w) * eps_c - w * eps_u."""
    if eps_c.shape != eps_u.shape:
        raise ScheduleError("guidance inputs must share a shape")
    return (1.0 + w) * eps_c - w * eps_u


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

def token_pos_embed(grid: int, width: int) -> torch.Tensor:
    """Fixed 2D sin/cos position table over a grid x grid token lattice."""
    if width % 4:
        raise ValueError("token embedding width must be divisible by 4")
    quarter = width // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    coords = torch.arange(grid, dtype=torch.float64)
    angles = coords[:, None] * omega[None, :]
    table_1d = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)  # (grid, width/2)
    rows = table_1d[:, None, :].expand(grid, grid, width // 2)
    cols = table_1d[None, :, :].expand(grid, grid, width // 2)
    return torch.cat([rows, cols], dim=-1).reshape(grid * grid, width).float()


class TimestepEmbedder(nn.Module):
    def __init__(self, width: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, width), nn.SiLU(), nn.Linear(width, width)
        )

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half
        )
        args = t.float()[:, None] * freqs[None]
        emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
        return self.mlp(emb)


def _modulate(x, shift, scale):
    return x * (1.0 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class DiTBlock(nn.Module):
    """Self-attention + optional cross-attention + MLP, all gated by adaLN-Zero."""

    def __init__(self, width: int, heads: int, cross_attention: bool, mlp_ratio: float = 4.0):
        super().__init__()
        self.heads = heads
        self.cross_attention = cross_attention
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(width, 3 * width)
        self.attn_out = nn.Linear(width, width)
        if cross_attention:
            self.norm_ctx = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
            self.q_ctx = nn.Linear(width, width)
            self.kv_ctx = nn.Linear(width, 2 * width)
            self.ctx_out = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        hidden = int(width * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(width, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, width)
        )
        n_mod = 7 if cross_attention else 6
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, n_mod * width))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor, ctx=None) -> torch.Tensor:
        """``ctx`` is None or (tokens (B, L, W), present (B,)); samples with
        present == 0 receive an exactly-zero cross-attention contribution."""
        mods = self.modulation(c)
        if self.cross_attention:
            (shift_sa, scale_sa, gate_sa, gate_ca,
             shift_mlp, scale_mlp, gate_mlp) = mods.chunk(7, dim=1)
        else:
            shift_sa, scale_sa, gate_sa, shift_mlp, scale_mlp, gate_mlp = mods.chunk(6, dim=1)
        h = _modulate(self.norm1(x), shift_sa, scale_sa)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        x = x + gate_sa.unsqueeze(1) * self.attn_out(_attention(q, k, v, self.heads))
        if self.cross_attention and ctx is not None:
            tokens, present = ctx
            q = self.q_ctx(self.norm_ctx(x))
            k, v = self.kv_ctx(tokens).chunk(2, dim=-1)
            out = self.ctx_out(_attention(q, k, v, self.heads))
            x = x + gate_ca.unsqueeze(1) * (out * present.view(-1, 1, 1))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(_modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


class FinalLayer(nn.Module):
    def __init__(self, width: int, patch: int, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(width, patch * patch * channels)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(width, 2 * width))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)
        nn.init.zeros_(self.linear.weight)
        nn.init.zeros_(self.linear.bias)

    def forward(self, x: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(c).chunk(2, dim=1)
        return self.linear(_modulate(self.norm(x), shift, scale))


class Denoiser(nn.Module):
    """Noise predictor over rolled maps.

    ``cond_encoders`` (optional) must expose
    ``forward(cond, batch, stats) -> (vector (B, width), context or None)``;
    see conditioning.ConditionEncoders.  Normalization statistics of the
    latent channels live here as buffers so checkpoints carry them.
    """

    def __init__(self, dims: PlaneDims, patch: int = 2, width: int = 192,
                 depth: int = 8, heads: int = 4, cond_encoders: nn.Module | None = None):
        super().__init__()
        self.dims = dims
        self.patch = patch
        self.width = width
        n_tokens, token_pad = token_grid(dims, patch)
        self.grid = dims.side // patch
        keep = (~token_pad.reshape(-1)).nonzero(as_tuple=True)[0]
        self.register_buffer("keep_idx", keep, persistent=False)
        self.register_buffer("cell_pad", pad_mask(dims), persistent=False)
        self.register_buffer("pos", token_pos_embed(self.grid, width), persistent=False)
        self.register_buffer("norm_mean", torch.zeros(6, dims.c))
        self.register_buffer("norm_std", torch.ones(6, dims.c))
        self.patch_embed = nn.Conv2d(dims.c, width, patch, stride=patch)
        self.t_embed = TimestepEmbedder(width)
        cross = cond_encoders is not None and cond_encoders.has_context
        self.blocks = nn.ModuleList(
            [DiTBlock(width, heads, cross_attention=cross) for _ in range(depth)]
        )
        self.final = FinalLayer(width, patch, dims.c)
        self.cond_encoders = cond_encoders

    @property
    def n_keep(self) -> int:
        return int(self.keep_idx.numel())

    def set_normalization(self, mean: torch.Tensor, std: torch.Tensor) -> None:
        self.norm_mean.copy_(mean)
        self.norm_std.copy_(std.clamp_min(1e-6))

    def normalize(self, planes: PlaneBatch) -> PlaneBatch:
        return PlaneBatch(
            *((p - self.norm_mean[i]) / self.norm_std[i] for i, p in enumerate(planes))
        )

    def denormalize(self, planes: PlaneBatch) -> PlaneBatch:
        return PlaneBatch(
            *(p * self.norm_std[i] + self.norm_mean[i] for i, p in enumerate(planes))
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor, cond=None) -> torch.Tensor:
        """x: (B, C, S, S) rolled map with zeroed padding; returns eps_hat, same shape."""
        b, c, s, _ = x.shape
        if s != self.dims.side or c != self.dims.c:
            raise ValueError(f"input {tuple(x.shape)} does not match dims {self.dims}")
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)  # (B, G*G, W)
        h = tokens[:, self.keep_idx] + self.pos[self.keep_idx]
        cvec = self.t_embed(t)
        ctx = None
        if self.cond_encoders is not None:
            vec, ctx = self.cond_encoders(cond, batch=b,
                                          stats=(self.norm_mean, self.norm_std))
            cvec = cvec + vec
        elif cond is not None and not _cond_is_empty(cond):
            raise ValueError("model was built without condition encoders")
        for block in self.blocks:
            h = block(h, cvec, ctx)
        out_tokens = self.final(h, cvec)  # (B, n_keep, p*p*C)
        full = torch.zeros(b, self.grid * self.grid, out_tokens.shape[-1],
                           dtype=out_tokens.dtype, device=out_tokens.device)
        full[:, self.keep_idx] = out_tokens
        return self._unpatchify(full)

    def _unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b = tokens.shape[0]
        p, g, c = self.patch, self.grid, self.dims.c
        x = tokens.reshape(b, g, g, p, p, c)
        x = x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, g * p, g * p)
        return x


def _cond_is_empty(cond) -> bool:
    if cond is None:
        return True
    if isinstance(cond, (list, tuple)):
        return all(_cond_is_empty(c) for c in cond)
    empty = getattr(cond, "is_empty", None)
    return bool(empty() if callable(empty) else False)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class Ema:
    """Exponential moving average of a module's parameters."""

    def __init__(self, model: nn.Module, decay: float = 0.9999):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in model.named_parameters()}

    @torch.no_grad()
    def update(self, model: nn.Module) -> None:
        for k, v in model.named_parameters():
            if self.decay == 0.0:
                self.shadow[k].copy_(v.detach())
            else:
                # lerp keeps the shadow bitwise-fixed whenever it equals the param
                self.shadow[k].lerp_(v.detach(), 1.0 - self.decay)

    def copy_to(self, model: nn.Module) -> None:
        with torch.no_grad():
            for k, v in model.named_parameters():
                v.copy_(self.shadow[k])

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return dict(self.shadow)


@dataclass
class DitStepReport:
    step: int
    mse: float
    skipped: bool = False


def train_step_dit(model: Denoiser, ema: Ema, optimizer: torch.optim.Optimizer,
                   planes: PlaneBatch, conds, schedule: DiffusionSchedule,
                   cond_dropout: float, seed: int, step: int) -> DitStepReport:
    """One denoising-MSE step on raw (unnormalized) plane batches.

    Per-sample conditions are independently dropped with ``cond_dropout``
    probability so the model also learns the unconditional path.  The loss is
    averaged over non-padding cells only.
    """
    torch.manual_seed((seed * 9_176_011 + step) % (2 ** 63 - 1))
    model.train()
    b = planes.p_xy.shape[0]
    x0 = rollout_planes(model.normalize(planes), model.dims).permute(0, 3, 1, 2)
    pad = model.cell_pad
    t = torch.randint(1, schedule.n_steps + 1, (b,))
    eps = torch.randn_like(x0)
    x_t = q_sample(x0, t, eps, schedule, pad=pad)
    dropped = _drop_conditions(conds, b, cond_dropout)
    eps_hat = model(x_t, t, dropped)
    keep = (~pad)[None, None].expand_as(eps_hat)
    loss = ((eps_hat - eps)[keep] ** 2).mean()
    if not torch.isfinite(loss):
        optimizer.zero_grad(set_to_none=True)
        return DitStepReport(step=step, mse=float(loss.detach()), skipped=True)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    ema.update(model)
    return DitStepReport(step=step, mse=float(loss.detach()))


def _drop_conditions(conds, batch: int, p_drop: float):
    if conds is None or p_drop <= 0.0:
        return conds
    dropper = getattr(conds, "with_dropout", None)
    if dropper is None:
        return conds
    return dropper(torch.rand(batch, 4), p_drop)  # one draw per condition slot per sample


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def reverse_step(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor,
                 schedule: DiffusionSchedule, noise: torch.Tensor | None = None,
                 deterministic: bool = False) -> torch.Tensor:
    """One ancestral update from level t to t-1 (1-based t).

    The deterministic variant drops the posterior noise and uses the plain
    1/sqrt(alpha) * (x - sqrt(1 - alpha) eps) contraction.
    """
    if not (1 <= t <= schedule.n_steps):
        raise ScheduleError(f"t={t} outside schedule")
    alpha = schedule.alpha[t - 1]
    if deterministic:
        return (x_t - torch.sqrt(1.0 - alpha) * eps_hat) / torch.sqrt(alpha)
    beta = schedule.beta[t - 1]
    abar = schedule.alpha_bar[t - 1]
    mean = (x_t - beta / torch.sqrt(1.0 - abar) * eps_hat) / torch.sqrt(alpha)
    if t == 1 or noise is None:
        return mean
    return mean + torch.sqrt(schedule.posterior_var[t - 1]) * noise


def sample(model: Denoiser, schedule: DiffusionSchedule, cond=None, w: float = 0.0,
           seed: int = 0, deterministic: bool = False, clamp=None) -> HexPlane:
    """Draw one latent; bit-reproducible for a fixed seed in single-thread mode."""
    return sample_batch(model, schedule, [cond], w, [seed],
                        deterministic=deterministic, clamp=clamp)[0]


def sample_batch(model: Denoiser, schedule: DiffusionSchedule, conds: list | None,
                 w: float = 0.0, seeds: list[int] | None = None,
                 deterministic: bool = False, clamp=None) -> list[HexPlane]:
    """Ancestral sampling for a batch; each sample consumes only its own seed.

    ``clamp(x, t_next) -> x`` may rewrite the state after every step (used for
    inpainting); ``t_next`` is 0 after the final step.  The callback owns any
    randomness it needs so the main noise stream stays untouched.
    """
    if w < -1.0:
        raise ScheduleError(f"guidance weight w={w} must be >= -1")
    if conds is None:
        conds = [None]
    b = len(conds)
    seeds = list(range(b)) if seeds is None else list(seeds)
    if len(seeds) != b:
        raise ScheduleError("need one seed per sample")
    model.eval()
    dims = model.dims
    pad = model.cell_pad
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    shape = (dims.c, dims.side, dims.side)
    x = torch.stack([torch.randn(shape, generator=g) for g in gens])
    x = x.masked_fill(_expand_pad(pad, x), 0.0)
    batched = _batch_conditions_if_needed(model, conds)
    use_guidance = batched is not None and not _cond_is_empty(batched)
    with torch.no_grad():
        for t in range(schedule.n_steps, 0, -1):
            tt = torch.full((b,), t, dtype=torch.long)
            if not use_guidance:
                eps = model(x, tt, None)
            elif w == 0.0:
                eps = model(x, tt, batched)
            elif w == -1.0:
                eps = model(x, tt, None)
            else:
                eps = guided_eps(model(x, tt, batched), model(x, tt, None), w)
            if t > 1 and not deterministic:
                noise = torch.stack([torch.randn(shape, generator=g) for g in gens])
            else:
                noise = None
            x = reverse_step(x, t, eps, schedule, noise=noise, deterministic=deterministic)
            x = x.masked_fill(_expand_pad(pad, x), 0.0)
            if clamp is not None:
                x = clamp(x, t - 1)
    planes = PlaneBatch(*unrollout_planes(x.permute(0, 2, 3, 1), dims))
    planes = model.denormalize(planes)
    return [planes.select(i, dims) for i in range(b)]


def _batch_conditions_if_needed(model: Denoiser, conds: list):
    if all(c is None for c in conds):
        return None
    if model.cond_encoders is None:
        raise ScheduleError("conditions supplied but model has no condition encoders")
    return model.cond_encoders.batch(conds)


def compute_normalization(plane_batches: list[PlaneBatch]) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-plane channel-wise mean/std (6, C) over every cell of the given batches."""
    means, stds = [], []
    for i in range(6):
        flat = torch.cat([pb[i].reshape(-1, pb[i].shape[-1]) for pb in plane_batches])
        means.append(flat.mean(dim=0))
        stds.append(flat.std(dim=0).clamp_min(1e-6))
    return torch.stack(means), torch.stack(stds)
