"""End-to-end recipes behind the CLI: datasets, training loops, sampling, eval.

Every recipe writes a ``run_record.json`` (config hash, seeds, library
versions) into its output directory; re-running a record in single-thread
mode reproduces the outputs bit-exactly.
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    load_module,
    load_optimizer,
    module_tensors,
    optimizer_tensors,
    save_checkpoint,
)
from .conditioning import (
    Command,
    ConditionBundle,
    ConditionEncoders,
    InpaintMask,
    extract_layout,
    forecast,
    inpaint,
    outpaint,
)
from .config import ConfigError, RunConfig, config_from_dict
from .diffusion import (
    Denoiser,
    Ema,
    compute_normalization,
    make_schedule,
    sample_batch,
    train_step_dit,
)
from .hexplane import PLANE_NAMES, HexPlane, PlaneDims
from .metrics import FeatureSet, fid, inception_score, kid, miou_arrays, precision_recall
from .occgrid import (
    TOY_CLASSES,
    VEHICLE,
    GridFormatError,
    SemanticGrid,
    ToySpec,
    generate_toy_scene,
    read_grid,
    render_bev,
    write_bev_png,
    write_grid,
)
from .vae import (
    PlaneBatch,
    VaeModel,
    decode,
    decode_batch,
    encode_mean,
    grid_to_labels,
    logits_to_grid,
    vae_train_step,
)


class DataError(ValueError):
    pass


def write_run_record(out_dir: Path, command: str, cfg: RunConfig | None,
                     inputs: dict | None = None) -> None:
    record = {
        "command": command,
        "config_hash": cfg.hash() if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "inputs": inputs or {},
        "versions": {
            "occ4d": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "torch_threads": torch.get_num_threads(),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_record.json").write_text(json.dumps(record, indent=2))


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def gen_toy_dataset(cfg: RunConfig, out_dir: str | Path, force: bool = False) -> list[Path]:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output dir {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    spec = ToySpec(cfg.frames, cfg.size_x, cfg.size_y, cfg.size_z,
                   cfg.n_vehicles, cfg.n_pedestrians)
    entries = []
    paths = []
    for i in range(cfg.n_sequences):
        seed = cfg.seed * 1_000_003 + i
        grid = generate_toy_scene(seed, spec)
        path = out / f"seq{i:04d}.ocg"
        write_grid(grid, path)
        entries.append({"file": path.name, "seed": seed})
        paths.append(path)
    manifest = {"n_sequences": cfg.n_sequences, "toy_seed": cfg.seed, "entries": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    if cfg.n_sequences == 0:
        print("warning: generated an empty dataset")
    write_run_record(out, "gen-toy", cfg)
    return paths


def dataset_files(data_dir: str | Path) -> list[Path]:
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    manifest = root / "manifest.json"
    if manifest.exists():
        entries = json.loads(manifest.read_text())["entries"]
        return [root / e["file"] for e in entries]
    files = sorted(root.glob("*.ocg"))
    if not files:
        raise DataError(f"no .ocg files under {root}")
    return files


def load_grids(data_dir: str | Path) -> list[SemanticGrid]:
    try:
        return [read_grid(p) for p in dataset_files(data_dir)]
    except GridFormatError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------------------
# VAE training
# ---------------------------------------------------------------------------

def build_vae(cfg: RunConfig) -> VaeModel:
    torch.manual_seed(cfg.seed)
    return VaeModel(cfg.vae_spec())


def _chunk_grid(grid: SemanticGrid, frames: int) -> list[np.ndarray]:
    t = grid.shape[0]
    if t % frames:
        raise DataError(f"sequence length {t} is not a multiple of model frames {frames}")
    return [grid.labels[i : i + frames] for i in range(0, t, frames)]


def _training_labels(grids: list[SemanticGrid], cfg: RunConfig) -> torch.Tensor:
    chunks = []
    for g in grids:
        if g.num_classes != cfg.num_classes:
            raise DataError("dataset class count does not match config")
        if g.shape[1:] != (cfg.size_x, cfg.size_y, cfg.size_z):
            raise DataError(f"grid spatial shape {g.shape[1:]} does not match config")
        chunks.extend(_chunk_grid(g, cfg.frames))
    return torch.from_numpy(np.stack(chunks)).long()


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    final: dict


def probe_miou(model: VaeModel, labels: torch.Tensor, cfg: RunConfig,
               limit: int | None = None, batch: int = 4) -> float:
    """Mean-path reconstruction mIoU (free class excluded) over a label batch."""
    n = labels.shape[0] if limit is None else min(limit, labels.shape[0])
    model.eval()
    scores = []
    with torch.inference_mode():
        for i in range(0, n, batch):
            chunk = labels[i : i + batch]
            mu, _ = model.encoder(chunk)
            logits = decode_batch(mu, model.decoder)
            pred = logits.argmax(dim=-1).numpy()
            for j in range(chunk.shape[0]):
                rep = miou_arrays(pred[j], chunk[j].numpy(), cfg.num_classes,
                                  ignore_free=True)
                scores.append(rep.miou)
    return float(np.mean(scores))


def train_vae(cfg: RunConfig, data_dir: str | Path, out_dir: str | Path,
              resume: str | Path | None = None, max_steps: int | None = None,
              time_budget_s: float | None = None,
              log_fn=print) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grids = load_grids(data_dir)
    labels = _training_labels(grids, cfg)
    if labels.shape[0] == 0:
        raise DataError("dataset is empty")
    model = build_vae(cfg)
    named = list(model.named_parameters())
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.vae_lr,
                            weight_decay=cfg.vae_weight_decay)
    start_step = 1
    if resume is not None:
        ck = load_checkpoint(resume)
        load_module(model, ck.tensors, prefix="model.")
        load_optimizer(opt, named, ck.tensors, prefix="opt.")
        start_step = ck.step + 1
    n_steps = max_steps if max_steps is not None else cfg.vae_steps
    log_path = out / "vae_log.jsonl"
    started = time.monotonic()
    last = {}
    with open(log_path, "a") as log:
        for step in range(start_step, n_steps + 1):
            idx = _batch_indices(cfg.seed, step, labels.shape[0], cfg.vae_batch)
            report = vae_train_step(model, opt, labels[idx], cfg.lovasz_weight,
                                    cfg.kl_weight, cfg.seed, step)
            last = report.__dict__ | {}
            if step % cfg.log_every == 0 or step == n_steps:
                row = dict(step=step, total=report.total, ce=report.ce,
                           lovasz=report.lovasz, kl=report.kl, skipped=report.skipped)
                if step % cfg.probe_every == 0 or step == n_steps:
                    row["probe_miou"] = probe_miou(model, labels, cfg,
                                                   limit=cfg.probe_sequences)
                log.write(json.dumps(row) + "\n")
                log.flush()
                log_fn(f"[vae {step}/{n_steps}] " +
                       " ".join(f"{k}={v:.4f}" for k, v in row.items()
                                if isinstance(v, float)))
            if time_budget_s is not None and time.monotonic() - started > time_budget_s:
                log_fn(f"[vae] stopping at step {step}: time budget reached")
                n_steps = step
                break
    stats = _encoder_stats(model, labels, cfg)
    ckpt_path = out / "vae.ock"
    tensors = module_tensors(model, "model.")
    tensors.update(optimizer_tensors(opt, named))
    tensors["norm_mean"] = stats[0]
    tensors["norm_std"] = stats[1]
    save_checkpoint(ckpt_path, tensors, config=cfg.to_dict(), step=n_steps,
                    meta={"kind": "vae"})
    write_run_record(out, "train-vae", cfg, {"data_dir": str(data_dir)})
    return TrainResult(ckpt_path, log_path, n_steps, last)


def _batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng((seed * 2_654_435_761 + step) % 2**64)
    return rng.choice(n, size=min(batch, n), replace=n < batch)


def _encoder_stats(model: VaeModel, labels: torch.Tensor,
                   cfg: RunConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-plane channel mean/std (6, C) of mean-path encodings."""
    model.eval()
    sums = torch.zeros(6, cfg.latent_channels)
    sqs = torch.zeros(6, cfg.latent_channels)
    counts = torch.zeros(6)
    with torch.no_grad():
        for i in range(labels.shape[0]):
            mu, _ = model.encoder(labels[i : i + 1])
            for j, p in enumerate(mu):
                flat = p.reshape(-1, p.shape[-1])
                sums[j] += flat.sum(dim=0)
                sqs[j] += (flat ** 2).sum(dim=0)
                counts[j] += flat.shape[0]
    mean = sums / counts[:, None]
    var = sqs / counts[:, None] - mean ** 2
    return mean, var.clamp_min(1e-12).sqrt()


def load_vae(path: str | Path) -> tuple[VaeModel, RunConfig, Checkpoint]:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "vae":
        raise DataError(f"{path} is not a VAE checkpoint")
    cfg = config_from_dict(ck.config)
    model = VaeModel(cfg.vae_spec())
    load_module(model, ck.tensors, prefix="model.")
    model.eval()
    return model, cfg, ck


# ---------------------------------------------------------------------------
# Encoding
# ---------------------------------------------------------------------------

def plane_tensors(h: HexPlane) -> dict[str, torch.Tensor]:
    return {name: getattr(h, name) for name in PLANE_NAMES}

def hexplane_from_checkpoint(ck: Checkpoint) -> HexPlane:
    dims = PlaneDims(**ck.meta["dims"])
    return HexPlane(*(ck.tensor(n) for n in PLANE_NAMES), dims=dims)


def save_hexplane(h: HexPlane, path: str | Path, meta: dict | None = None) -> None:
    m = {"kind": "hexplane", "dims": h.dims.__dict__} | (meta or {})
    save_checkpoint(path, plane_tensors(h), meta=m)


def load_hexplane(path: str | Path) -> HexPlane:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "hexplane":
        raise DataError(f"{path} is not a latent checkpoint")
    return hexplane_from_checkpoint(ck)


def encode_dataset(vae_ckpt: str | Path, data_dir: str | Path,
                   out_dir: str | Path) -> list[Path]:
    """Mean-path encode every chunk of every sequence into a latent archive.

    Planes are stored raw; the VAE's normalization statistics are recorded in
    the archive manifest (and travel with the DiT checkpoint) so diffusion
    training can standardize its inputs.
    """
    model, cfg, ck = load_vae(vae_ckpt)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    paths = []
    dims = cfg.plane_dims()
    for src in dataset_files(data_dir):
        grid = read_grid(src)
        chunks = _chunk_grid(grid, cfg.frames)
        for j, chunk in enumerate(chunks):
            sub = SemanticGrid(labels=chunk, num_classes=grid.num_classes)
            h = encode_mean(sub, model.encoder)
            name = f"{src.stem}_c{j}.ock"
            save_hexplane(h, out / name, meta={"source": src.name, "chunk": j,
                                               "n_chunks": len(chunks)})
            entries.append({"file": name, "source": src.name, "chunk": j,
                            "n_chunks": len(chunks)})
            paths.append(out / name)
    manifest = {
        "vae_checkpoint": str(vae_ckpt),
        "dims": dims.__dict__,
        "norm_mean": ck.tensor("norm_mean").tolist(),
        "norm_std": ck.tensor("norm_std").tolist(),
        "entries": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    write_run_record(out, "encode", cfg, {"vae_ckpt": str(vae_ckpt),
                                          "data_dir": str(data_dir)})
    return paths


# ---------------------------------------------------------------------------
# DiT training
# ---------------------------------------------------------------------------

def build_denoiser(cfg: RunConfig) -> Denoiser:
    torch.manual_seed(cfg.seed + 1)
    dims = cfg.plane_dims()
    encoders = None
    if cfg.use_command or cfg.use_trajectory or cfg.use_layout or cfg.use_hexplane_cond:
        encoders = ConditionEncoders(
            cfg.dit_width, dims, cfg.patch_size, cfg.frames,
            use_command=cfg.use_command, use_trajectory=cfg.use_trajectory,
            use_layout=cfg.use_layout, use_hexplane=cfg.use_hexplane_cond,
        )
    return Denoiser(dims, cfg.patch_size, cfg.dit_width, cfg.dit_depth,
                    cfg.dit_heads, cond_encoders=encoders)


def derive_command(grid: SemanticGrid) -> Command:
    """Annotate a toy sequence by its dominant vehicle displacement."""
    occ = grid.labels == VEHICLE
    if not occ.any():
        return Command.STATIC
    def centroid(frame):
        xs, ys, _ = np.nonzero(frame)
        if xs.size == 0:
            return None
        return np.array([xs.mean(), ys.mean()])
    c0, c1 = centroid(occ[0]), centroid(occ[-1])
    if c0 is None or c1 is None:
        return Command.STATIC
    dx, dy = c1 - c0
    if abs(dx) < 0.5 and abs(dy) < 0.5:
        return Command.STATIC
    if abs(dx) >= abs(dy):
        return Command.FORWARD
    return Command.TURN_LEFT if dy > 0 else Command.TURN_RIGHT


def derive_trajectory(grid: SemanticGrid) -> torch.Tensor:
    """Per-frame mean vehicle centroid in meters; zeros when no vehicles exist."""
    t = grid.shape[0]
    out = np.zeros((t, 2), dtype=np.float32)
    for i in range(t):
        xs, ys, _ = np.nonzero(grid.labels[i] == VEHICLE)
        if xs.size:
            out[i] = (xs.mean() * grid.voxel_size, ys.mean() * grid.voxel_size)
    return torch.from_numpy(out)


@dataclass
class DitData:
    planes: PlaneBatch             # training targets, raw
    conds: list[ConditionBundle | None]


def load_dit_data(cfg: RunConfig, archive_dir: str | Path,
                  data_dir: str | Path | None = None) -> tuple[DitData, dict]:
    root = Path(archive_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    dims = cfg.plane_dims()
    if manifest["dims"] != dims.__dict__:
        raise DataError("archive dims do not match config dims")
    latents: dict[tuple[str, int], HexPlane] = {}
    for e in manifest["entries"]:
        latents[(e["source"], e["chunk"])] = load_hexplane(root / e["file"])
    need_grid = cfg.use_command or cfg.use_trajectory or cfg.use_layout
    grids: dict[str, SemanticGrid] = {}
    if need_grid:
        if data_dir is None:
            raise DataError("command/trajectory/layout conditioning needs --data")
        for p in dataset_files(data_dir):
            grids[p.name] = read_grid(p)
    targets: list[HexPlane] = []
    conds: list[ConditionBundle | None] = []
    for e in manifest["entries"]:
        key = (e["source"], e["chunk"])
        if cfg.use_hexplane_cond:
            if e["chunk"] == 0:
                continue  # no predecessor
            prev = latents[(e["source"], e["chunk"] - 1)]
        else:
            prev = None
        bundle = ConditionBundle(cond_hexplane=prev)
        if need_grid:
            grid = grids[e["source"]]
            chunk = _chunk_grid(grid, cfg.frames)[e["chunk"]]
            sub = SemanticGrid(labels=chunk, num_classes=grid.num_classes)
            if cfg.use_command:
                bundle.command = derive_command(sub)
            if cfg.use_trajectory:
                bundle.trajectory = derive_trajectory(sub)
            if cfg.use_layout:
                bundle.layout = extract_layout(sub, VEHICLE, dims)
        if bundle.is_empty():
            bundle = None
        targets.append(latents[key])
        conds.append(bundle)
    if not targets:
        raise DataError("no training items in archive (need chunked sequences for "
                        "previous-latent conditioning)")
    data = DitData(planes=PlaneBatch.stack(targets), conds=conds)
    return data, manifest


def train_dit(cfg: RunConfig, archive_dir: str | Path, out_dir: str | Path,
              data_dir: str | Path | None = None, resume: str | Path | None = None,
              max_steps: int | None = None, time_budget_s: float | None = None,
              log_fn=print) -> TrainResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, manifest = load_dit_data(cfg, archive_dir, data_dir)
    n = data.planes.p_xy.shape[0]
    model = build_denoiser(cfg)
    model.set_normalization(torch.tensor(manifest["norm_mean"]),
                            torch.tensor(manifest["norm_std"]))
    ema = Ema(model, decay=cfg.ema_decay)
    named = list(model.named_parameters())
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.dit_lr,
                            weight_decay=cfg.dit_weight_decay)
    schedule = make_schedule(cfg.diffusion_steps)
    start_step = 1
    if resume is not None:
        ck = load_checkpoint(resume)
        load_module(model, ck.tensors, prefix="model.")
        load_optimizer(opt, named, ck.tensors, prefix="opt.")
        for k in ema.shadow:
            ema.shadow[k] = ck.tensors["ema." + k].clone()
        start_step = ck.step + 1
    n_steps = max_steps if max_steps is not None else cfg.dit_steps
    log_path = out / "dit_log.jsonl"
    started = time.monotonic()
    last = {}
    with open(log_path, "a") as log:
        for step in range(start_step, n_steps + 1):
            idx = _batch_indices(cfg.seed + 7, step, n, cfg.dit_batch)
            planes = data.planes.map(lambda p: p[idx])
            conds = [data.conds[i] for i in idx]
            batched = (model.cond_encoders.batch(conds)
                       if model.cond_encoders is not None else None)
            report = train_step_dit(model, ema, opt, planes, batched, schedule,
                                    cfg.cond_dropout, cfg.seed, step)
            last = {"step": step, "mse": report.mse, "skipped": report.skipped}
            if step % cfg.log_every == 0 or step == n_steps:
                log.write(json.dumps(last) + "\n")
                log.flush()
                log_fn(f"[dit {step}/{n_steps}] mse={report.mse:.4f}")
            if time_budget_s is not None and time.monotonic() - started > time_budget_s:
                log_fn(f"[dit] stopping at step {step}: time budget reached")
                n_steps = step
                break
    ckpt_path = out / "dit.ock"
    tensors = module_tensors(model, "model.")
    tensors.update({f"ema.{k}": v for k, v in ema.state_tensors().items()})
    tensors.update(optimizer_tensors(opt, named))
    save_checkpoint(ckpt_path, tensors, config=cfg.to_dict(), step=n_steps,
                    meta={"kind": "dit"})
    write_run_record(out, "train-dit", cfg, {"archive_dir": str(archive_dir)})
    return TrainResult(ckpt_path, log_path, n_steps, last)


def load_denoiser(path: str | Path, use_ema: bool = True) -> tuple[Denoiser, RunConfig]:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "dit":
        raise DataError(f"{path} is not a denoiser checkpoint")
    cfg = config_from_dict(ck.config)
    model = build_denoiser(cfg)
    load_module(model, ck.tensors, prefix="model.")
    if use_ema:
        with torch.no_grad():
            for name, param in model.named_parameters():
                key = "ema." + name
                if key in ck.tensors:
                    param.copy_(ck.tensors[key])
    model.eval()
    return model, cfg


# ---------------------------------------------------------------------------
# Sampling / applications / evaluation
# ---------------------------------------------------------------------------

def _condition_from_files(cfg: RunConfig, dims: PlaneDims,
                          command: str | None = None,
                          command_file: str | Path | None = None,
                          trajectory_file: str | Path | None = None,
                          layout_file: str | Path | None = None,
                          cond_hexplane_file: str | Path | None = None) -> ConditionBundle | None:
    """Build a condition bundle from the documented file schemas.

    command file: a single keyword line; trajectory: CSV rows "t,x,y";
    layout: OCG1 raster (Tl, Xl, Yl, 1) with labels in {0, 1}; previous
    latent: a latent checkpoint.
    """
    bundle = ConditionBundle()
    if command_file is not None:
        command = Path(command_file).read_text().strip()
    if command:
        bundle.command = Command.parse(command)
    if trajectory_file is not None:
        rows = []
        for line in Path(trajectory_file).read_text().splitlines():
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("t,"):
                continue
            t_str, x_str, y_str = line.split(",")
            rows.append((int(t_str), float(x_str), float(y_str)))
        rows.sort()
        if [r[0] for r in rows] != list(range(cfg.frames)):
            raise DataError(f"trajectory must cover t = 0..{cfg.frames - 1} exactly")
        bundle.trajectory = torch.tensor([[r[1], r[2]] for r in rows], dtype=torch.float32)
    if layout_file is not None:
        raster = read_grid(layout_file)
        if raster.shape != (dims.tl, dims.xl, dims.yl, 1):
            raise DataError(
                f"layout raster must be ({dims.tl}, {dims.xl}, {dims.yl}, 1), got {raster.shape}"
            )
        bundle.layout = torch.from_numpy(raster.labels[..., 0] != 0)
    if cond_hexplane_file is not None:
        bundle.cond_hexplane = load_hexplane(cond_hexplane_file)
    return None if bundle.is_empty() else bundle


def read_mask_file(path: str | Path, dims: PlaneDims) -> InpaintMask:
    """Inpainting masks ride in OCG1 rasters of shape (1, Xl, Yl, 1), labels {0, 1}."""
    raster = read_grid(path)
    if raster.shape != (1, dims.xl, dims.yl, 1):
        raise DataError(
            f"mask raster must be (1, {dims.xl}, {dims.yl}, 1), got {raster.shape}"
        )
    return InpaintMask(torch.from_numpy(raster.labels[0, :, :, 0] != 0))


def decode_to_files(h: HexPlane, vae: VaeModel, out_base: Path,
                    bev: bool = False) -> Path:
    logits = decode(h, vae.decoder)
    grid = logits_to_grid(logits, vae.spec.num_classes)
    ocg = out_base.with_suffix(".ocg")
    write_grid(grid, ocg)
    if bev:
        strip = np.concatenate([render_bev(grid, t, TOY_CLASSES)
                                for t in range(grid.shape[0])], axis=1)
        write_bev_png(strip, out_base.with_suffix(".png"))
    return ocg


def run_sample(dit_ckpt: Path, vae_ckpt: Path, out_dir: Path, cfg_overrides,
               n: int | None = None, w: float | None = None, seed: int | None = None,
               cond: ConditionBundle | None = None, bev: bool = False,
               use_ema: bool = True, deterministic: bool | None = None) -> list[Path]:
    from .config import apply_overrides

    model, cfg = load_denoiser(dit_ckpt, use_ema=use_ema)
    if cfg_overrides:
        cfg = apply_overrides(cfg, cfg_overrides)
    vae, vae_cfg, _ = load_vae(vae_ckpt)
    if vae_cfg.plane_dims() != cfg.plane_dims():
        raise DataError("VAE and denoiser were built for different latent dims")
    n = cfg.n_samples if n is None else n
    w = cfg.cfg_w if w is None else w
    seed = cfg.sample_seed if seed is None else seed
    det = cfg.deterministic_sampler if deterministic is None else deterministic
    schedule = make_schedule(cfg.diffusion_steps)
    out_dir.mkdir(parents=True, exist_ok=True)
    conds = [cond] * n
    seeds = [seed + i for i in range(n)]
    latents = sample_batch(model, schedule, conds, w, seeds, deterministic=det)
    paths = []
    for i, h in enumerate(latents):
        save_hexplane(h, out_dir / f"sample{i:03d}.ock", meta={"seed": seeds[i]})
        paths.append(decode_to_files(h, vae, out_dir / f"sample{i:03d}", bev=bev))
    write_run_record(out_dir, "sample", cfg,
                     {"dit": str(dit_ckpt), "vae": str(vae_ckpt), "seeds": seeds, "w": w})
    return paths


def run_eval(pred_dir: Path, truth_dir: Path, out_file: Path,
             vae_ckpt: Path | None = None, quantile: float = 0.95) -> dict:
    """mIoU over matched files plus feature-space metrics from VAE encodings."""
    pred_files = dataset_files(pred_dir)
    truth_files = dataset_files(truth_dir)
    if len(pred_files) != len(truth_files):
        raise DataError(f"{len(pred_files)} predictions vs {len(truth_files)} references")
    preds = [read_grid(p) for p in pred_files]
    truths = [read_grid(p) for p in truth_files]
    num_classes = truths[0].num_classes
    pred_cat = np.stack([g.labels for g in preds])
    truth_cat = np.stack([g.labels for g in truths])
    iou = miou_arrays(pred_cat, truth_cat, num_classes)
    iou_semantic = miou_arrays(pred_cat, truth_cat, num_classes, ignore_free=True)
    report: dict = {
        "n_sequences": len(preds),
        "miou": iou.miou,
        "miou_ignore_free": iou_semantic.miou,
        "per_class": [v if v is not None else "absent" for v in iou.per_class],
    }
    hist = np.stack([np.bincount(g.labels.reshape(-1), minlength=num_classes)
                     for g in preds]).astype(np.float64)
    report["inception_score"] = inception_score(hist / hist.sum(axis=1, keepdims=True))
    if vae_ckpt is not None:
        model, vcfg, _ = load_vae(vae_ckpt)
        feats_g = FeatureSet(_pooled_features(model, preds, vcfg), source="generated")
        feats_r = FeatureSet(_pooled_features(model, truths, vcfg), source="real")
        report["fid"] = fid(feats_r, feats_g)
        report["kid"] = kid(feats_r, feats_g)
        d = feats_r.dim
        if feats_r.n >= d + 1 and feats_g.n >= d + 1:
            p, r = precision_recall(feats_r, feats_g, quantile)
            report["precision"] = p
            report["recall"] = r
        else:
            report["precision"] = report["recall"] = "skipped (too few samples)"
    out_file.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in report.items()]
    out_file.write_text("\n".join(lines) + "\n")
    return report


def _pooled_features(model: VaeModel, grids: list[SemanticGrid],
                     cfg: RunConfig) -> np.ndarray:
    """Desk-scale feature extractor: mean over planes of each plane's spatial mean."""
    rows = []
    with torch.no_grad():
        for g in grids:
            chunks = _chunk_grid(g, cfg.frames)
            vecs = []
            for chunk in chunks:
                sub = SemanticGrid(labels=chunk, num_classes=g.num_classes)
                h = encode_mean(sub, model.encoder)
                vecs.append(torch.stack([p.reshape(-1, p.shape[-1]).mean(dim=0)
                                         for p in h.planes()]).mean(dim=0))
            rows.append(torch.stack(vecs).mean(dim=0).numpy())
    return np.stack(rows)
