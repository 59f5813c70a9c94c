"""Plane-factorized VAE for occupancy sequences.

Encoding: a shared per-frame 3D conv stack extracts a spatially downsampled
feature volume per frame; transformer projection networks then collapse axes
of the stacked volume into the six latent planes (one learned query token
attention-pools the reduced axis).  The three time-indexed planes are further
downsampled along t by strided convs, and per-plane 1x1 heads emit a diagonal
Gaussian (mu, logvar) per plane.

Decoding: transposed convs restore the t axis of the time-indexed planes, the
six planes are broadcast to a full (T, Xl, Yl, Zl, C) volume and multiplied
elementwise, sinusoidal position features are concatenated, and a mirrored
conv stack upsamples to per-voxel class logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

from .hexplane import PLANE_NAMES, HexPlane, PlaneDims
from .occgrid import SemanticGrid


class PlaneBatch(NamedTuple):
    """Six channel-last plane tensors with a leading batch axis."""

    p_xy: torch.Tensor
    p_xz: torch.Tensor
    p_yz: torch.Tensor
    p_tx: torch.Tensor
    p_ty: torch.Tensor
    p_tz: torch.Tensor

    def map(self, fn) -> "PlaneBatch":
        return PlaneBatch(*(fn(p) for p in self))

    def select(self, i: int, dims: PlaneDims) -> HexPlane:
        return HexPlane(*(p[i] for p in self), dims=dims)

    @classmethod
    def stack(cls, planes: list[HexPlane]) -> "PlaneBatch":
        return cls(*(torch.stack([getattr(h, n) for h in planes]) for n in PLANE_NAMES))


@dataclass(frozen=True)
class VaeSpec:
    """Architecture hyperparameters; defaults match the desk-scale setup."""

    dims: PlaneDims
    num_classes: int
    embed_channels: int = 16
    conv_channels: int = 24
    feat_channels: int = 32
    proj_layers: int = 2
    proj_heads: int = 2
    proj_head_dim: int = 16
    proj_dropout: float = 0.1
    proj_mlp_ratio: int = 2
    pe_bands: int = 4

    @property
    def proj_width(self) -> int:
        return self.proj_heads * self.proj_head_dim


def _stride_pair(rate: int) -> tuple[int, int]:
    table = {1: (1, 1), 2: (2, 1), 4: (2, 2)}
    if rate not in table:
        raise ValueError(f"spatial downsampling rate {rate} not in {{1, 2, 4}}")
    return table[rate]


def _attention(q, k, v, heads, dropout_p=0.0, training=False):
    # (B, L, W) -> heads-split scaled dot product -> (B, Lq, W)
    b, lq, w = q.shape
    hd = w // heads
    q = q.view(b, lq, heads, hd).transpose(1, 2)
    k = k.view(b, k.shape[1], heads, hd).transpose(1, 2)
    v = v.view(b, v.shape[1], heads, hd).transpose(1, 2)
    out = F.scaled_dot_product_attention(q, k, v, dropout_p=dropout_p if training else 0.0)
    return out.transpose(1, 2).reshape(b, lq, w)


class _SelfAttnBlock(nn.Module):
    def __init__(self, width, heads, dropout, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.attn_out = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, mlp_ratio * width),
            nn.GELU(),
            nn.Linear(mlp_ratio * width, width),
        )
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        x = x + self.drop(self.attn_out(_attention(q, k, v, self.heads, training=self.training)))
        x = x + self.drop(self.mlp(self.norm2(x)))
        return x


class ProjectionNet(nn.Module):
    """Collapses a (N, L, C) sequence axis into one pooled feature per row.

    Two pre-norm self-attention layers contextualize the sequence (with learned
    positional embeddings), then a single learned query cross-attends over it.
    With L == 1 the pooling softmax is over one key, so the pooled value does
    not depend on the query parameters at all.
    """

    def __init__(self, channels: int, max_len: int, heads: int = 2, head_dim: int = 16,
                 layers: int = 2, dropout: float = 0.1, mlp_ratio: int = 2):
        super().__init__()
        width = heads * head_dim
        self.heads = heads
        self.max_len = max_len
        self.in_proj = nn.Linear(channels, width)
        self.pos = nn.Parameter(torch.randn(max_len, width) * 0.02)
        self.blocks = nn.ModuleList(
            [_SelfAttnBlock(width, heads, dropout, mlp_ratio) for _ in range(layers)]
        )
        self.pool_norm = nn.LayerNorm(width)
        self.query = nn.Parameter(torch.randn(1, 1, width) * 0.02)
        self.q_proj = nn.Linear(width, width)
        self.k_proj = nn.Linear(width, width)
        self.v_proj = nn.Linear(width, width)
        self.pool_out = nn.Linear(width, width)
        self.out_proj = nn.Linear(width, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, length, _ = x.shape
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds positional table {self.max_len}")
        h = self.in_proj(x) + self.pos[:length]
        for block in self.blocks:
            h = block(h)
        keys = self.pool_norm(h)
        q = self.q_proj(self.query).expand(n, 1, -1)
        pooled = _attention(q, self.k_proj(keys), self.v_proj(keys), self.heads)
        return self.out_proj(self.pool_out(pooled[:, 0]))


def project(x: torch.Tensor, axes: str, keep: str, reduce: str,
            net: ProjectionNet) -> torch.Tensor:
    """Collapse ``reduce`` axes of a channel-last tensor (B, *axes, C) via ``net``.

    ``keep`` and ``reduce`` must partition ``axes`` exactly; the result has
    shape (B, *keep sizes, C).
    """
    if sorted(keep + reduce) != sorted(axes) or len(set(axes)) != len(axes):
        raise ValueError(f"axes {axes!r} must split exactly into {keep!r} + {reduce!r}")
    b = x.shape[0]
    order = [0] + [1 + axes.index(a) for a in keep] + [1 + axes.index(a) for a in reduce]
    order.append(x.ndim - 1)
    xp = x.permute(order)
    keep_shape = tuple(xp.shape[1 : 1 + len(keep)])
    s_k = math.prod(keep_shape)
    s_r = math.prod(xp.shape[1 + len(keep) : -1])
    flat = xp.reshape(b * s_k, s_r, x.shape[-1])
    out = net(flat)
    return out.reshape(b, *keep_shape, x.shape[-1])


class _TemporalResample(nn.Module):
    """Strided (down) or transposed (up) conv along the leading axis of (B, T, A, C)."""

    def __init__(self, channels: int, rate: int, up: bool):
        super().__init__()
        self.rate = rate
        if rate == 1:
            self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        elif up:
            self.conv = nn.ConvTranspose2d(
                channels, channels, (2 * rate, 3), stride=(rate, 1), padding=(rate // 2, 1)
            )
        else:
            self.conv = nn.Conv2d(channels, channels, 3, stride=(rate, 1), padding=1)

    def forward(self, x):
        h = x.permute(0, 3, 1, 2)
        h = self.conv(h)
        return h.permute(0, 2, 3, 1)


class Encoder(nn.Module):
    def __init__(self, spec: VaeSpec):
        super().__init__()
        self.spec = spec
        d = spec.dims
        s1 = tuple(_stride_pair(r)[0] for r in (d.d_x, d.d_y, d.d_z))
        s2 = tuple(_stride_pair(r)[1] for r in (d.d_x, d.d_y, d.d_z))
        self.embed = nn.Embedding(spec.num_classes, spec.embed_channels)
        self.conv = nn.Sequential(
            nn.Conv3d(spec.embed_channels, spec.conv_channels, 3, stride=s1, padding=1),
            nn.GroupNorm(8, spec.conv_channels),
            nn.SiLU(),
            nn.Conv3d(spec.conv_channels, spec.feat_channels, 3, stride=s2, padding=1),
            nn.GroupNorm(8, spec.feat_channels),
            nn.SiLU(),
        )
        t_full = d.tl * d.d_t
        proj = lambda max_len: ProjectionNet(
            spec.feat_channels, max_len, spec.proj_heads, spec.proj_head_dim,
            spec.proj_layers, spec.proj_dropout, spec.proj_mlp_ratio,
        )
        self.proj_t = proj(t_full)
        self.proj_z = proj(d.zl)
        self.proj_y = proj(d.yl)
        self.proj_x = proj(d.xl)
        self.proj_zy = proj(d.zl * d.yl)
        self.proj_xz = proj(d.xl * d.zl)
        self.proj_xy = proj(d.xl * d.yl)
        self.down_t = nn.ModuleList(
            [_TemporalResample(spec.feat_channels, d.d_t, up=False) for _ in range(3)]
        )
        self.heads = nn.ModuleList(
            [nn.Conv2d(spec.feat_channels, 2 * d.c, 1) for _ in range(6)]
        )
        # start every plane near (mu=1, sigma~0.05): the six-way product of the
        # decoder is ~1 with usable gradients instead of a dead all-zero fixpoint
        for head in self.heads:
            with torch.no_grad():
                c = head.out_channels // 2
                head.bias[:c] = 1.0
                head.bias[c:] = -6.0

    def features(self, labels: torch.Tensor) -> torch.Tensor:
        """(B, T, X, Y, Z) class ids -> (B, T, Xl, Yl, Zl, C_feat) channel-last."""
        b, t = labels.shape[:2]
        x = self.embed(labels.reshape(b * t, *labels.shape[2:]).long())
        x = x.permute(0, 4, 1, 2, 3)
        x = self.conv(x)
        x = x.permute(0, 2, 3, 4, 1)
        return x.reshape(b, t, *x.shape[1:])

    def forward(self, labels: torch.Tensor) -> tuple[PlaneBatch, PlaneBatch]:
        """Returns per-plane (mu, logvar), each a PlaneBatch of (B, rows, cols, C)."""
        feats = self.features(labels)
        x_xyz = project(feats, "txyz", "xyz", "t", self.proj_t)
        raw = [
            project(x_xyz, "xyz", "xy", "z", self.proj_z),
            project(x_xyz, "xyz", "xz", "y", self.proj_y),
            project(x_xyz, "xyz", "yz", "x", self.proj_x),
            project(feats, "txyz", "tx", "zy", self.proj_zy),
            project(feats, "txyz", "ty", "xz", self.proj_xz),
            project(feats, "txyz", "tz", "xy", self.proj_xy),
        ]
        for i in range(3):
            raw[3 + i] = self.down_t[i](raw[3 + i])
        mus, logvars = [], []
        for plane, head in zip(raw, self.heads):
            stats = head(plane.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
            mu, logvar = stats.chunk(2, dim=-1)
            mus.append(mu)
            logvars.append(logvar)
        return PlaneBatch(*mus), PlaneBatch(*logvars)


class Decoder(nn.Module):
    def __init__(self, spec: VaeSpec):
        super().__init__()
        self.spec = spec
        d = spec.dims
        self.up_t = nn.ModuleList(
            [_TemporalResample(d.c, d.d_t, up=True) for _ in range(3)]
        )
        pe_channels = 4 * spec.pe_bands
        s1 = tuple(_stride_pair(r)[1] for r in (d.d_x, d.d_y, d.d_z))  # mirror, reversed
        s2 = tuple(_stride_pair(r)[0] for r in (d.d_x, d.d_y, d.d_z))
        self.block1 = nn.Sequential(
            self._up_conv(d.c + pe_channels, spec.conv_channels, s1),
            nn.GroupNorm(8, spec.conv_channels),
            nn.SiLU(),
        )
        self.block2 = nn.Sequential(
            self._up_conv(spec.conv_channels, spec.embed_channels, s2),
            nn.GroupNorm(4, spec.embed_channels),
            nn.SiLU(),
        )
        self.head = nn.Conv3d(spec.embed_channels, spec.num_classes, 1)
        t_full = d.tl * d.d_t
        self.register_buffer(
            "pos_enc",
            position_encoding(t_full, d.xl, d.yl, d.zl, spec.pe_bands),
            persistent=False,
        )

    @staticmethod
    def _up_conv(c_in, c_out, strides):
        if all(s == 1 for s in strides):
            return nn.Conv3d(c_in, c_out, 3, padding=1)
        kernel = tuple(2 * s if s > 1 else 3 for s in strides)
        padding = tuple(s // 2 if s > 1 else 1 for s in strides)
        return nn.ConvTranspose3d(c_in, c_out, kernel, stride=strides, padding=padding)

    def forward(self, fused: torch.Tensor) -> torch.Tensor:
        """(B, T, Xl, Yl, Zl, C) fused volume -> (B, T, X, Y, Z, K) logits."""
        b, t = fused.shape[:2]
        pe = self.pos_enc.to(fused.dtype).unsqueeze(0).expand(b, -1, -1, -1, -1, -1)
        x = torch.cat([fused, pe], dim=-1)
        x = x.reshape(b * t, *x.shape[2:]).permute(0, 4, 1, 2, 3)
        x = self.block1(x)
        x = self.block2(x)
        x = self.head(x)
        x = x.permute(0, 2, 3, 4, 1)
        return x.reshape(b, t, *x.shape[1:])


def position_encoding(t: int, x: int, y: int, z: int, bands: int = 4,
                      dtype=torch.float32) -> torch.Tensor:
    """Per-axis sinusoidal features of each voxel position, ``bands`` per axis."""
    sizes = (t, x, y, z)
    feats = []
    for axis, size in enumerate(sizes):
        coords = torch.arange(size, dtype=dtype)
        shape = [1, 1, 1, 1]
        shape[axis] = size
        for k in range(bands):
            freq = (2.0 ** k) * math.pi / size
            feats.append(torch.sin(freq * coords).reshape(shape).expand(sizes))
    return torch.stack(feats, dim=-1)


class VaeModel(nn.Module):
    def __init__(self, spec: VaeSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)


# ---------------------------------------------------------------------------
# Functional ops over single grids / planes
# ---------------------------------------------------------------------------

def extract_features(q: SemanticGrid, encoder: Encoder) -> torch.Tensor:
    """Per-frame conv features of one grid: (T, Xl, Yl, Zl, C_feat)."""
    _check_grid(q, encoder.spec)
    labels = torch.from_numpy(q.labels.copy()).long().unsqueeze(0)
    encoder.eval()
    with torch.no_grad():
        return encoder.features(labels)[0]


def encode(q: SemanticGrid, encoder: Encoder, rng_seed: int) -> tuple[HexPlane, HexPlane, HexPlane]:
    """Posterior sample, mean and logvar planes for one grid (deterministic per seed)."""
    _check_grid(q, encoder.spec)
    labels = torch.from_numpy(q.labels.copy()).long().unsqueeze(0)
    encoder.eval()
    with torch.no_grad():
        mu, logvar = encoder(labels)
    gen = torch.Generator().manual_seed(rng_seed)
    sample = reparameterize(mu, logvar, generator=gen)
    dims = encoder.spec.dims
    for planes in (sample, mu, logvar):
        for p in planes:
            if not torch.isfinite(p).all():
                raise FloatingPointError("non-finite encoder output")
    return sample.select(0, dims), mu.select(0, dims), logvar.select(0, dims)


def encode_mean(q: SemanticGrid, encoder: Encoder) -> HexPlane:
    labels = torch.from_numpy(q.labels.copy()).long().unsqueeze(0)
    encoder.eval()
    with torch.no_grad():
        mu, _ = encoder(labels)
    return mu.select(0, encoder.spec.dims)


def reparameterize(mu: PlaneBatch, logvar: PlaneBatch,
                   generator: torch.Generator | None) -> PlaneBatch:
    out = []
    for m, lv in zip(mu, logvar):
        eps = torch.randn(lv.shape, generator=generator, dtype=lv.dtype, device=lv.device)
        out.append(m + torch.exp(0.5 * lv) * eps)
    return PlaneBatch(*out)


def restore_time(h: HexPlane, decoder: Decoder) -> HexPlane:
    """Upsample the t axis of the three time-indexed planes back to full length."""
    d = h.dims
    t_full = d.tl * d.d_t
    decoder.eval()
    with torch.no_grad():
        tx = decoder.up_t[0](h.p_tx.unsqueeze(0))[0]
        ty = decoder.up_t[1](h.p_ty.unsqueeze(0))[0]
        tz = decoder.up_t[2](h.p_tz.unsqueeze(0))[0]
    return HexPlane(h.p_xy, h.p_xz, h.p_yz, tx, ty, tz, dims=d.with_time(t_full))


def fuse_planes(planes: PlaneBatch) -> torch.Tensor:
    """Broadcast the six planes to the full grid and multiply them elementwise.

    Shapes: p_xy (B, X, Y, C) etc. with p_t* at full temporal length T; the
    result is (B, T, X, Y, Z, C).  Factor order matches ``hexplane.query``.
    """
    p_xy, p_xz, p_yz, p_tx, p_ty, p_tz = planes
    out = p_xy[:, None, :, :, None, :] * p_xz[:, None, :, None, :, :]
    out = out * p_yz[:, None, None, :, :, :]
    out = out * p_tx[:, :, :, None, None, :]
    out = out * p_ty[:, :, None, :, None, :]
    out = out * p_tz[:, :, None, None, :, :]
    return out


def expand_squeeze(h: HexPlane, decoder: Decoder) -> torch.Tensor:
    """Restore t, then fuse: (T, Xl, Yl, Zl, C) feature volume for one latent."""
    full = restore_time(h, decoder)
    return fuse_planes(PlaneBatch(*(p.unsqueeze(0) for p in full.planes())))[0]


def decode(h: HexPlane, decoder: Decoder) -> torch.Tensor:
    """Class logits (T, X, Y, Z, K) for one latent."""
    decoder.eval()
    with torch.no_grad():
        fused = expand_squeeze(h, decoder).unsqueeze(0)
        return decoder(fused)[0]


def decode_batch(planes: PlaneBatch, decoder: Decoder) -> torch.Tensor:
    """Differentiable batched decode: PlaneBatch -> (B, T, X, Y, Z, K) logits."""
    full_t = [decoder.up_t[i](p) for i, p in enumerate(planes[3:])]
    fused = fuse_planes(PlaneBatch(*planes[:3], *full_t))
    return decoder(fused)


def grid_to_labels(q: SemanticGrid) -> torch.Tensor:
    return torch.from_numpy(q.labels.copy()).long()


def logits_to_grid(logits: torch.Tensor, num_classes: int) -> SemanticGrid:
    labels = logits.argmax(dim=-1).to(torch.uint8).cpu().numpy()
    return SemanticGrid(labels=labels, num_classes=num_classes)


def _check_grid(q: SemanticGrid, spec: VaeSpec) -> None:
    t, x, y, z = q.shape
    want = spec.dims.original
    if (t, x, y, z) != want:
        raise ValueError(f"grid shape {(t, x, y, z)} does not match model dims {want}")
    if q.num_classes != spec.num_classes:
        raise ValueError("grid class count does not match model")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    total: torch.Tensor
    ce: torch.Tensor
    lovasz: torch.Tensor
    kl: torch.Tensor

    def detach(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("total", "ce", "lovasz", "kl")}


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean per-voxel cross entropy; logits (..., K), labels (...)."""
    k = logits.shape[-1]
    return F.cross_entropy(logits.reshape(-1, k), labels.reshape(-1))


def lovasz_grad(gt_sorted: torch.Tensor) -> torch.Tensor:
    """Gradient of the Jaccard-loss extension along a sorted-error path."""
    p = gt_sorted.numel()
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if p > 1:
        jaccard = jaccard.clone()
        jaccard[1:p] = jaccard[1:p] - jaccard[0:-1]
    return jaccard


def lovasz_softmax_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Lovasz extension of the per-class Jaccard loss, averaged over present classes.

    ``probs`` are class probabilities (N, K); errors per class are sorted
    descending with stable tie-breaking by original index.
    """
    return lovasz_softmax_batch(probs.unsqueeze(0), labels.unsqueeze(0))


def lovasz_softmax_batch(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Batched Lovasz-softmax: probs (B, N, K), labels (B, N).

    All (sample, class) error vectors are sorted in one call; classes absent
    from a sample's ground truth are dropped from that sample's mean.
    """
    b, n, k = probs.shape
    fg = F.one_hot(labels, num_classes=k).to(probs.dtype).permute(0, 2, 1)  # (B, K, N)
    errors = (fg - probs.transpose(1, 2)).abs().reshape(b * k, n)
    errors_sorted, perm = torch.sort(errors, dim=1, descending=True, stable=True)
    fg_sorted = fg.reshape(b * k, n).gather(1, perm)
    gts = fg_sorted.sum(dim=1, keepdim=True)
    intersection = gts - fg_sorted.cumsum(dim=1)
    union = gts + (1.0 - fg_sorted).cumsum(dim=1)
    jaccard = 1.0 - intersection / union
    grad = torch.cat([jaccard[:, :1], jaccard[:, 1:] - jaccard[:, :-1]], dim=1)
    per_class = (errors_sorted * grad).sum(dim=1).reshape(b, k)
    present = (fg.sum(dim=2) > 0).to(probs.dtype)
    counts = present.sum(dim=1).clamp_min(1.0)
    return ((per_class * present).sum(dim=1) / counts).mean()


def kl_loss(mu: PlaneBatch | HexPlane, logvar: PlaneBatch | HexPlane) -> torch.Tensor:
    """Diagonal-Gaussian KL to N(0, I), one term per plane, summed over the six planes.

    Each plane contributes its mean per-entry divergence, which keeps the loss
    weight meaningful across plane resolutions; batched inputs are averaged
    over the batch.
    """
    mu_planes = mu.planes() if isinstance(mu, HexPlane) else mu
    lv_planes = logvar.planes() if isinstance(logvar, HexPlane) else logvar
    total = None
    for m, lv in zip(mu_planes, lv_planes):
        term = 0.5 * (m.pow(2) + lv.exp() - 1.0 - lv)
        if isinstance(mu, HexPlane):
            s = term.mean()
        else:
            s = term.reshape(term.shape[0], -1).mean(dim=1)
        total = s if total is None else total + s
    return total.mean() if total.ndim else total


def vae_loss(q: SemanticGrid, logits: torch.Tensor, mu: HexPlane, logvar: HexPlane,
             alpha: float = 1.0, beta: float = 0.005) -> LossReport:
    """Combined objective: cross entropy + alpha * Lovasz-softmax + beta * KL."""
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    labels = grid_to_labels(q)
    if logits.shape[:-1] != labels.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} does not match grid {q.shape}")
    return _loss_terms(logits.unsqueeze(0), labels.unsqueeze(0),
                       mu_planes=[mu], logvar_planes=[logvar], alpha=alpha, beta=beta)


def vae_loss_batch(logits: torch.Tensor, labels: torch.Tensor, mu: PlaneBatch,
                   logvar: PlaneBatch, alpha: float, beta: float) -> LossReport:
    ce = cross_entropy_loss(logits, labels)
    k = logits.shape[-1]
    probs = F.softmax(logits.reshape(logits.shape[0], -1, k), dim=-1)
    lov = lovasz_softmax_batch(probs, labels.reshape(labels.shape[0], -1))
    kl = kl_loss(mu, logvar)
    total = ce + alpha * lov + beta * kl
    return LossReport(total=total, ce=ce, lovasz=lov, kl=kl)


def _loss_terms(logits, labels, mu_planes, logvar_planes, alpha, beta) -> LossReport:
    mu = PlaneBatch(*(torch.stack([getattr(h, n) for h in mu_planes]) for n in PLANE_NAMES))
    lv = PlaneBatch(*(torch.stack([getattr(h, n) for h in logvar_planes]) for n in PLANE_NAMES))
    return vae_loss_batch(logits, labels, mu, lv, alpha, beta)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class StepReport:
    step: int
    total: float
    ce: float
    lovasz: float
    kl: float
    skipped: bool = False


def vae_train_step(model: VaeModel, optimizer: torch.optim.Optimizer,
                   labels: torch.Tensor, alpha: float, beta: float,
                   seed: int, step: int) -> StepReport:
    """One gradient step on a (B, T, X, Y, Z) label batch; deterministic per (seed, step)."""
    if labels.ndim != 5 or labels.shape[0] == 0:
        raise ValueError("batch must be a non-empty (B, T, X, Y, Z) tensor")
    torch.manual_seed((seed * 1_000_003 + step) % (2 ** 63 - 1))
    model.train()
    mu, logvar = model.encoder(labels)
    planes = reparameterize(mu, logvar, generator=None)
    logits = decode_batch(planes, model.decoder)
    report = vae_loss_batch(logits, labels, mu, logvar, alpha, beta)
    if not torch.isfinite(report.total):
        optimizer.zero_grad(set_to_none=True)
        vals = report.detach()
        return StepReport(step=step, skipped=True, **vals)
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    optimizer.step()
    vals = report.detach()
    return StepReport(step=step, skipped=False, **vals)
