"""Self-supervised objectives and their training loops.

Two methods share one data pipeline:

* ``jepa``: a convolutional encoder embeds a context window and the window
  that follows it; a predictor maps the context embedding onto the target
  embedding under a VICReg objective. Both windows go through the same
  encoder and gradients flow through both branches.
* ``mae``: tube-masked patch reconstruction with a transformer autoencoder.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import (
    Encoder,
    EncoderConfig,
    MaeConfig,
    MaskedAutoencoder,
    Module,
    Predictor,
    PredictorConfig,
    read_checkpoint,
    save_checkpoint,
)
from .optim import AdamW, cosine_lr
from .rng import make_rng
from .tensor import Tensor

log = logging.getLogger(__name__)

METHODS = ("jepa", "mae")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# VICReg
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VicregWeights:
    lam: float = 2.0
    mu: float = 40.0
    nu: float = 2.0
    eps: float = 1e-4
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.lam, self.mu, self.nu, self.gamma) < 0:
            raise ValueError(f"VicregWeights: weights must be non-negative, got {self}")
        if self.eps <= 0:
            raise ValueError(f"VicregWeights: eps must be positive, got {self.eps}")


@dataclass
class VicregTerms:
    s: float
    v_a: float
    v_b: float
    c_a: float
    c_b: float
    loss: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _variance_term(z: Tensor, w: VicregWeights) -> Tensor:
    std = T.sqrt(T.var(z, axis=0) + w.eps)
    return T.mean(T.relu(w.gamma - std))


def _covariance_term(z: Tensor) -> Tensor:
    n, d = z.shape
    zc = z - T.mean(z, axis=0, keepdims=True)
    cov = T.matmul(T.transpose(zc), zc) * (1.0 / n)
    off = 1.0 - np.eye(d)
    return T.tsum(cov * cov * off) * (1.0 / d)


def vicreg_loss(z_a, z_b, w: VicregWeights = VicregWeights()) -> tuple[Tensor, VicregTerms]:
    """λ·s + μ·(v_a + v_b) + ν·(c_a + c_b) on [n, d] embeddings.

    ``s`` is the batch mean of squared L2 distances, ``v`` the mean hinge on
    per-dimension std (population variance), ``c`` the squared off-diagonal
    covariance summed and divided by the embedding dimension.
    """
    z_a, z_b = T.as_tensor(z_a), T.as_tensor(z_b)
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise T.ShapeError(f"vicreg_loss: need matching [n, d] embeddings, got {z_a.shape} and {z_b.shape}")
    if z_a.shape[0] < 2:
        raise ValueError(f"vicreg_loss: batch variance needs n >= 2, got n={z_a.shape[0]}")
    if not (np.all(np.isfinite(z_a.data)) and np.all(np.isfinite(z_b.data))):
        raise FloatingPointError("vicreg_loss: non-finite embeddings")
    diff = z_a - z_b
    s = T.mean(T.tsum(diff * diff, axis=1))
    v_a, v_b = _variance_term(z_a, w), _variance_term(z_b, w)
    c_a, c_b = _covariance_term(z_a), _covariance_term(z_b)
    loss = w.lam * s + w.mu * (v_a + v_b) + w.nu * (c_a + c_b)
    terms = VicregTerms(s.item(), v_a.item(), v_b.item(), c_a.item(), c_b.item(), loss.item())
    return loss, terms


# ---------------------------------------------------------------------------
# JEPA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JepaPair:
    traj: int
    offset: int
    k: int

    @property
    def context(self) -> slice:
        return slice(self.offset, self.offset + self.k)

    @property
    def target(self) -> slice:
        return slice(self.offset + self.k, self.offset + 2 * self.k)


def make_jepa_pairs(lengths: Sequence[int], k: int, seed: int, epoch: int = 0, per_traj: int = 1) -> list[JepaPair]:
    """``per_traj`` (context, next-window) pairs per usable trajectory, shuffled; offsets uniform in [0, T - 2k]."""
    if k < 1 or per_traj < 1:
        raise ValueError(f"make_jepa_pairs: k and per_traj must be >= 1, got {k}, {per_traj}")
    rng = make_rng(seed, "jepa-pairs", epoch)
    usable = []
    for i, t in enumerate(lengths):
        if t < 2 * k:
            log.warning("trajectory %d has %d frames < 2k=%d; skipped", i, t, 2 * k)
        else:
            usable.append(i)
    pairs = [JepaPair(i, int(rng.integers(0, lengths[i] - 2 * k + 1)), k) for _ in range(per_traj) for i in usable]
    return [pairs[j] for j in rng.permutation(len(pairs))]


def clips_from_pairs(frames: np.ndarray, pairs: Sequence[JepaPair]) -> tuple[np.ndarray, np.ndarray]:
    """Context and target clips [N, C, k, H, W] from trajectories [n, T, C, H, W]."""
    ctx = np.stack([frames[p.traj, p.context] for p in pairs]).transpose(0, 2, 1, 3, 4)
    tgt = np.stack([frames[p.traj, p.target] for p in pairs]).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(ctx, dtype=np.float64), np.ascontiguousarray(tgt, dtype=np.float64)


class JepaModel(Module):
    def __init__(self, enc_cfg: EncoderConfig, pred_cfg: PredictorConfig, seed: int = 0):
        super().__init__()
        if pred_cfg.embed_dim != enc_cfg.embed_dim:
            raise ValueError("JepaModel: predictor and encoder embedding dims differ")
        self.encoder = Encoder(enc_cfg, seed)
        self.predictor = Predictor(pred_cfg, seed)
        self._name_params()

    def embed_pairs(self, ctx: np.ndarray, tgt: np.ndarray) -> tuple[Tensor, Tensor]:
        """Shared-encoder pass over both windows; returns (predicted, target) grids [N, h, w, E]."""
        n = ctx.shape[0]
        z = self.encoder(Tensor(np.concatenate([ctx, tgt], axis=0)))
        return self.predictor(z[:n]), z[n:]


def _flatten_embeddings(z: Tensor, per_token: bool) -> Tensor:
    n, h, w, e = z.shape
    if per_token:
        return T.reshape(z, (n * h * w, e))
    return T.mean(z, axis=(1, 2))


def jepa_loss(model: JepaModel, ctx: np.ndarray, tgt: np.ndarray, w: VicregWeights, per_token: bool = False):
    pred, target = model.embed_pairs(ctx, tgt)
    return vicreg_loss(_flatten_embeddings(pred, per_token), _flatten_embeddings(target, per_token), w)


def jepa_train_step(model: JepaModel, ctx: np.ndarray, tgt: np.ndarray, w: VicregWeights,
                    opt: AdamW, lr: float, per_token: bool = False) -> VicregTerms:
    opt.zero_grad()
    loss, terms = jepa_loss(model, ctx, tgt, w, per_token)
    if not math.isfinite(terms.loss):
        raise TrainingError(f"non-finite JEPA loss; terms {terms.as_dict()}")
    T.backward(loss)
    opt.step(lr)
    return terms


def embedding_std(encoder: Encoder, clips: np.ndarray, batch: int = 64) -> float:
    """Mean over dimensions of the batch std of pooled embeddings."""
    pooled = []
    with T.no_grad():
        for i in range(0, len(clips), batch):
            z = encoder(Tensor(clips[i : i + batch]))
            pooled.append(z.data.mean(axis=(1, 2)))
    return float(np.concatenate(pooled).std(axis=0).mean())


# ---------------------------------------------------------------------------
# MAE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TubeMask:
    """Spatial patch mask reused for every frame; True marks hidden patches."""

    spatial: np.ndarray
    ratio: float

    def at_frame(self, t: int) -> np.ndarray:
        return self.spatial

    @property
    def num_masked(self) -> int:
        return int(self.spatial.sum())


def tube_mask(grid: tuple[int, int], ratio: float, rng: np.random.Generator) -> TubeMask:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"tube_mask: ratio must lie in (0, 1), got {ratio}")
    ph, pw = grid
    total = ph * pw
    n_mask = int(round(ratio * total))
    if n_mask in (0, total):
        raise ValueError(f"tube_mask: ratio {ratio} on a {ph}x{pw} grid masks {n_mask} of {total} patches")
    flat = np.zeros(total, dtype=bool)
    flat[rng.choice(total, size=n_mask, replace=False)] = True
    return TubeMask(flat.reshape(ph, pw), ratio)


def mae_loss(pred, target, mask) -> Tensor:
    """Mean squared error over masked entries; ``mask`` broadcasts against ``target``."""
    pred = T.as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), target.shape)
    count = int(m.sum())
    if count == 0:
        raise ValueError("mae_loss: mask selects no entries")
    diff = pred - target
    return T.tsum(diff * diff * m.astype(np.float64)) * (1.0 / count)


def normalize_patches(patches: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    mean = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mean) / np.sqrt(var + eps)


def mae_batch_loss(model: MaskedAutoencoder, clips: np.ndarray, masks: np.ndarray) -> Tensor:
    """Patch-space reconstruction loss for clips [N, C, t, H, W] under per-sample tube masks [N, Ph, Pw]."""
    clip = Tensor(clips)
    grid = model.grid(clip.shape)
    tmask = model.token_mask(masks, clip.shape[0], grid)
    latent, order = model.encode_visible(clip, tmask)
    pred = model.decode(latent, order, grid)
    target = model.patchify(clips)
    if model.cfg.norm_pix_loss:
        target = normalize_patches(target)
    return mae_loss(pred, target, tmask[..., None])


def mae_train_step(model: MaskedAutoencoder, clips: np.ndarray, masks: np.ndarray, opt: AdamW, lr: float) -> float:
    opt.zero_grad()
    loss = mae_batch_loss(model, clips, masks)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError("non-finite MAE loss")
    T.backward(loss)
    opt.step(lr)
    return value


def sample_mae_batch(frames: np.ndarray, idx: Sequence[int], k: int, cfg: MaeConfig, rng: np.random.Generator):
    """Random k-frame windows from trajectories ``idx`` plus one tube mask per clip."""
    t_total = frames.shape[1]
    offs = rng.integers(0, t_total - k + 1, size=len(idx))
    clips = np.stack([frames[i, o : o + k] for i, o in zip(idx, offs)]).transpose(0, 2, 1, 3, 4)
    grid = (frames.shape[3] // cfg.patch_size, frames.shape[4] // cfg.patch_size)
    masks = np.stack([tube_mask(grid, cfg.mask_ratio, rng).spatial for _ in idx])
    return np.ascontiguousarray(clips, dtype=np.float64), masks


# ---------------------------------------------------------------------------
# pretraining loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainConfig:
    method: str = "jepa"
    epochs: int = 6
    batch_size: int = 32
    lr: float = 3e-3
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    context_frames: int = 8
    windows_per_traj: int = 4
    per_token: bool = False
    vicreg: VicregWeights = field(default_factory=VicregWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    mae: MaeConfig = field(default_factory=MaeConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("PretrainConfig: epochs must be >= 0 and batch_size >= 2")
        if isinstance(self.vicreg, dict):
            self.vicreg = VicregWeights(**self.vicreg)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.predictor, dict):
            self.predictor = PredictorConfig(**self.predictor)
        if isinstance(self.mae, dict):
            self.mae = MaeConfig(**self.mae)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("encoder", "mae"):
            d[key] = {k: list(v) if isinstance(v, tuple) else v for k, v in d[key].items()}
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def build_model(cfg: PretrainConfig, in_channels: int, seed: int) -> Module:
    if cfg.method == "jepa":
        enc = EncoderConfig(**{**asdict(cfg.encoder), "in_channels": in_channels, "context_frames": cfg.context_frames})
        pred = PredictorConfig(**{**asdict(cfg.predictor), "embed_dim": enc.embed_dim})
        return JepaModel(enc, pred, seed)
    mae = MaeConfig(**{**asdict(cfg.mae), "in_channels": in_channels, "context_frames": cfg.context_frames})
    return MaskedAutoencoder(mae, seed)


def model_from_checkpoint(path) -> tuple[Module, dict]:
    header, state = read_checkpoint(path)
    cfg = PretrainConfig(**header["config"])
    model = build_model(cfg, header["in_channels"], header["seed"])
    model.load_state_dict(state)
    return model, header


def frozen_encoder(path):
    """Load a pretrained checkpoint and return (token function, token dim, header).

    The token function maps clips [N, C, k, H, W] to token grids [N, ..., dim] without recording a graph.
    """
    model, header = model_from_checkpoint(path)
    model_params = model.parameters()
    for p in model_params:
        p.requires_grad = False
    if isinstance(model, JepaModel):
        dim = model.encoder.cfg.embed_dim
        fn = model.encoder
    else:
        dim = model.cfg.enc_dim
        fn = model.encode_tokens

    def tokens(clips: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return fn(Tensor(clips)).data

    return tokens, dim, header


@dataclass
class PretrainResult:
    checkpoint: Path
    loss_log: Path
    losses: list[dict]
    model: Module


LOSS_COLUMNS = {
    "jepa": ["step", "epoch", "lr", "loss", "s", "v", "c"],
    "mae": ["step", "epoch", "lr", "loss"],
}


def _write_loss_csv(path: Path, method: str, rows: list[dict]) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOSS_COLUMNS[method])
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    tmp.replace(path)


def _save_resume(path: Path, model: Module, opt: AdamW, epoch: int, rows: list[dict], digest: str) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays.update({f"opt/{k}": v for k, v in opt.state_arrays().items()})
    arrays["epoch"] = np.array(epoch)
    arrays["digest"] = np.array(digest)
    arrays["losses"] = np.array(json.dumps(rows))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **arrays)
    tmp.replace(path)


def _load_resume(path: Path, model: Module, opt: AdamW, digest: str):
    if not path.exists():
        return 0, []
    with np.load(path) as z:
        if str(z["digest"]) != digest:
            log.info("resume state %s belongs to another config; starting fresh", path)
            return 0, []
        model.load_state_dict({k[6:]: z[k] for k in z.files if k.startswith("param/")})
        opt.load_state_arrays({k[4:]: z[k] for k in z.files if k.startswith("opt/")})
        return int(z["epoch"]), json.loads(str(z["losses"]))


def pretrain(method: str, frames: np.ndarray, cfg: PretrainConfig, seed: int, out_dir,
             tag: str = "", resume: bool = True, config_hash: str = "") -> PretrainResult:
    """Pretrain on normalized trajectories [n, T, C, H, W]; writes checkpoint, loss CSV and a resume sidecar.

    Each epoch draws one window (pair) per trajectory. Sampling streams are
    keyed by (seed, epoch), so an interrupted run resumed from its last
    finished epoch reproduces the uninterrupted loss curve exactly.
    """
    if method != cfg.method:
        cfg = PretrainConfig(**{**cfg.__dict__, "method": method})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{method}{'_' + tag if tag else ''}"
    ckpt_path, csv_path, resume_path = out_dir / f"{stem}.ckpt", out_dir / f"{stem}_loss.csv", out_dir / f"{stem}_resume.npz"
    n, t_total, c = frames.shape[:3]
    k = cfg.context_frames
    need = 2 * k if method == "jepa" else k
    if t_total < need:
        raise ValueError(f"pretrain: trajectories have {t_total} frames, {method} needs {need}")
    if n < cfg.batch_size:
        raise ValueError(f"pretrain: {n} trajectories is fewer than one batch of {cfg.batch_size}")

    model = build_model(cfg, c, seed)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)
    steps_per_epoch = (n * cfg.windows_per_traj) // cfg.batch_size
    total = max(1, steps_per_epoch * cfg.epochs)
    warmup = min(int(round(cfg.warmup_frac * total)), total - 1)
    digest = cfg.digest() + f"-{seed}-{frames.shape}"
    start_epoch, rows = _load_resume(resume_path, model, opt, digest) if resume else (0, [])
    if start_epoch:
        log.info("resuming %s from epoch %d", stem, start_epoch)

    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, cfg.epochs):
        if method == "jepa":
            pairs = make_jepa_pairs([t_total] * n, k, seed, epoch, cfg.windows_per_traj)
        else:
            order = make_rng(seed, "mae-order", epoch).permutation(np.tile(np.arange(n), cfg.windows_per_traj))
            rng = make_rng(seed, "mae-masks", epoch)
        for b in range(steps_per_epoch):
            lr = cosine_lr(step, total, cfg.lr, warmup)
            if method == "jepa":
                ctx, tgt = clips_from_pairs(frames, pairs[b * cfg.batch_size : (b + 1) * cfg.batch_size])
                terms = jepa_train_step(model, ctx, tgt, cfg.vicreg, opt, lr, cfg.per_token)
                rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": terms.loss, "s": terms.s,
                             "v": terms.v_a + terms.v_b, "c": terms.c_a + terms.c_b})
            else:
                idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
                clips, masks = sample_mae_batch(frames, idx, k, cfg.mae, rng)
                value = mae_train_step(model, clips, masks, opt, lr)
                rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": value})
            step += 1
        log.info("%s epoch %d/%d loss %.5f", stem, epoch + 1, cfg.epochs, rows[-1]["loss"])
        _save_resume(resume_path, model, opt, epoch + 1, rows, digest)

    header = {"method": method, "config": cfg.to_dict(), "seed": seed, "step": step,
              "epochs": cfg.epochs, "in_channels": c, "context_frames": k, "config_hash": config_hash}
    save_checkpoint(ckpt_path, model, header)
    _write_loss_csv(csv_path, method, rows)
    return PretrainResult(ckpt_path, csv_path, rows, model)
