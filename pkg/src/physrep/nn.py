"""Network blocks: 3D ConvNeXt encoder, latent predictor, tube-masked
autoencoder and the attentive probe, plus the checkpoint file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import make_rng, truncated_normal
from .tensor import ShapeError, Tensor

INIT_STD = 0.02


class Module:
    """Registers parameters and sub-modules in attribute-assignment order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        elif isinstance(value, Module):
            self._children[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._children.items():
            yield from m.named_parameters(f"{prefix}{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state dict missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: stored shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _name_params(self) -> None:
        for k, p in self.named_parameters():
            p.name = k


class _Init:
    def __init__(self, seed: int, tag: str):
        self.rng = make_rng(seed, tag)

    def weight(self, *shape, std: float = INIT_STD) -> Tensor:
        return Tensor(truncated_normal(self.rng, shape, std), requires_grad=True)

    @staticmethod
    def zeros(*shape) -> Tensor:
        return Tensor(np.zeros(shape), requires_grad=True)

    @staticmethod
    def ones(*shape) -> Tensor:
        return Tensor(np.ones(shape), requires_grad=True)


class Linear(Module):
    def __init__(self, init: _Init, d_in: int, d_out: int, bias: bool = True, std: float | None = None):
        super().__init__()
        self.weight = init.weight(d_out, d_in) if std is None else init.weight(d_out, d_in, std=std)
        self.bias = init.zeros(d_out) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, init: _Init, dim: int, axis: int = -1):
        super().__init__()
        self.axis = axis
        self.weight = init.ones(dim)
        self.bias = init.zeros(dim)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, axis=self.axis)


class Conv3d(Module):
    def __init__(self, init: _Init, c_in: int, c_out: int, kernel, stride=1, padding=0, groups: int = 1):
        super().__init__()
        k = T._triple(kernel)
        self.stride, self.padding, self.groups = stride, padding, groups
        self.weight = init.weight(c_out, c_in // groups, *k)
        self.bias = init.zeros(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


# ---------------------------------------------------------------------------
# JEPA encoder / predictor
# ---------------------------------------------------------------------------


@dataclass
class EncoderConfig:
    in_channels: int = 1
    context_frames: int = 8
    widths: tuple[int, ...] = (32, 64)
    depths: tuple[int, ...] = (1, 1)
    downsample: int = 8
    embed_dim: int = 64
    kernel_size: int = 3
    mlp_ratio: int = 4
    # off by default: a final per-token norm fixes the embedding scale and masks collapse
    out_norm: bool = False

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.depths = tuple(int(d) for d in self.depths)
        if len(self.widths) != len(self.depths) or not self.widths:
            raise ValueError("EncoderConfig: widths and depths must be non-empty and equal length")
        d = self.downsample
        if d < 2 or d & (d - 1):
            raise ValueError(f"EncoderConfig: downsample {d} must be a power of 2")
        if self.embed_dim != self.widths[-1]:
            raise ValueError(f"EncoderConfig: embed_dim {self.embed_dim} must equal last width {self.widths[-1]}")
        if self.stem_stride < 1:
            raise ValueError(f"EncoderConfig: {len(self.widths)} stages need downsample >= {2 ** (len(self.widths) - 1)}")

    @property
    def stem_stride(self) -> int:
        return self.downsample // 2 ** (len(self.widths) - 1)


class ConvNeXtBlock(Module):
    """Depthwise conv, channel LayerNorm, pointwise expand, GELU, pointwise project, residual.

    Operates channels-first on [N, C, T, H, W]; pointwise layers are 1x1x1 convs.
    ``kernel`` may be 2D-in-time (kT = 1) for the predictor.
    """

    def __init__(self, init: _Init, dim: int, kernel=(3, 3, 3), mlp_ratio: int = 4):
        super().__init__()
        kernel = T._triple(kernel)
        self.dwconv = Conv3d(init, dim, dim, kernel, padding=tuple(k // 2 for k in kernel), groups=dim)
        self.norm = LayerNorm(init, dim, axis=1)
        self.pw1 = Conv3d(init, dim, mlp_ratio * dim, 1)
        self.pw2 = Conv3d(init, mlp_ratio * dim, dim, 1)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(self.dwconv(x))
        y = self.pw2(T.gelu(self.pw1(y)))
        return x + y


class Encoder(Module):
    """Downsampling 3D ConvNeXt: [N, C, t, H, W] -> [N, H/D, W/D, embed_dim].

    A patchify stem is followed by stages separated by stride-2 convs. Time
    is halved at every downsample while even; any remaining frames are
    folded by one temporal conv spanning them.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init = _Init(seed, "encoder")
        t = cfg.context_frames
        s0 = cfg.stem_stride
        ts = 2 if t % 2 == 0 else 1
        self.stem = Conv3d(init, cfg.in_channels, cfg.widths[0], (ts, s0, s0), stride=(ts, s0, s0))
        self.stem_norm = LayerNorm(init, cfg.widths[0], axis=1)
        t //= ts
        k = cfg.kernel_size
        self.stages: list[list[ConvNeXtBlock]] = []
        self.downs: list[tuple[LayerNorm, Conv3d]] = []
        for i, (width, depth) in enumerate(zip(cfg.widths, cfg.depths)):
            if i > 0:
                ts = 2 if t % 2 == 0 else 1
                norm = LayerNorm(init, cfg.widths[i - 1], axis=1)
                conv = Conv3d(init, cfg.widths[i - 1], width, (ts, 2, 2), stride=(ts, 2, 2))
                setattr(self, f"down{i}_norm", norm)
                setattr(self, f"down{i}", conv)
                self.downs.append((norm, conv))
                t //= ts
            blocks = []
            for j in range(depth):
                block = ConvNeXtBlock(init, width, (k if t > 1 else 1, k, k), cfg.mlp_ratio)
                setattr(self, f"stage{i}_block{j}", block)
                blocks.append(block)
            self.stages.append(blocks)
        self.time_fold = None
        if t > 1:
            self.time_fold = Conv3d(init, cfg.embed_dim, cfg.embed_dim, (t, 1, 1), stride=(t, 1, 1))
        self.out_norm = LayerNorm(init, cfg.embed_dim, axis=1) if cfg.out_norm else None
        self._name_params()

    def forward(self, clip: Tensor) -> Tensor:
        cfg = self.cfg
        if clip.ndim != 5:
            raise ShapeError(f"encoder: expected clip [N, C, t, H, W], got {clip.shape}")
        n, c, t, h, w = clip.shape
        if c != cfg.in_channels:
            raise ShapeError(f"encoder: clip has {c} channels, config expects {cfg.in_channels}")
        if t != cfg.context_frames:
            raise ShapeError(f"encoder: clip has {t} frames, config expects {cfg.context_frames}")
        if h % cfg.downsample or w % cfg.downsample:
            raise ShapeError(f"encoder: spatial size {h}x{w} not divisible by {cfg.downsample}")
        x = self.stem_norm(self.stem(clip))
        for i, blocks in enumerate(self.stages):
            if i > 0:
                norm, conv = self.downs[i - 1]
                x = conv(norm(x))
            for block in blocks:
                x = block(x)
        if self.time_fold is not None:
            x = self.time_fold(x)
        if self.out_norm is not None:
            x = self.out_norm(x)
        # [N, E, 1, h, w] -> [N, h, w, E]
        return T.reshape(T.transpose(x, (0, 2, 3, 4, 1)), (n, h // cfg.downsample, w // cfg.downsample, cfg.embed_dim))


@dataclass
class PredictorConfig:
    embed_dim: int = 64
    expansion: int = 4
    depth: int = 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.expansion <= 1:
            raise ValueError("PredictorConfig: inverse bottleneck needs expansion > 1")


class Predictor(Module):
    """Shape-preserving latent map on [N, h, w, E] grids built from inverse-bottleneck conv blocks."""

    def __init__(self, cfg: PredictorConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init = _Init(seed, "predictor")
        k = cfg.kernel_size
        self.blocks = []
        for j in range(cfg.depth):
            block = ConvNeXtBlock(init, cfg.embed_dim, (1, k, k), cfg.expansion)
            setattr(self, f"block{j}", block)
            self.blocks.append(block)
        self._name_params()

    def forward(self, z: Tensor) -> Tensor:
        if z.ndim != 4 or z.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"predictor: expected [N, h, w, {self.cfg.embed_dim}], got {z.shape}")
        n, h, w, e = z.shape
        x = T.reshape(T.transpose(z, (0, 3, 1, 2)), (n, e, 1, h, w))
        for block in self.blocks:
            x = block(x)
        return T.transpose(T.reshape(x, (n, e, h, w)), (0, 2, 3, 1))


# ---------------------------------------------------------------------------
# masked autoencoder
# ---------------------------------------------------------------------------


@dataclass
class MaeConfig:
    in_channels: int = 1
    context_frames: int = 8
    patch_size: int = 4
    tubelet: int = 2
    enc_dim: int = 64
    enc_depth: int = 2
    enc_heads: int = 4
    dec_dim: int = 32
    dec_depth: int = 1
    dec_heads: int = 4
    mlp_ratio: int = 4
    mask_ratio: float = 0.75
    norm_pix_loss: bool = True

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"MaeConfig: mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.context_frames % self.tubelet:
            raise ValueError("MaeConfig: tubelet must divide context_frames")
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("MaeConfig: model dims must be divisible by head counts")

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.tubelet * self.patch_size**2


def sincos_embedding(positions: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sin/cos features for integer coordinates; positions is [L, A], features split across axes."""
    n_axes = positions.shape[1]
    per_axis = 2 * (dim // (2 * n_axes))
    out = np.zeros((positions.shape[0], dim))
    for a in range(n_axes):
        half = per_axis // 2
        freqs = 1.0 / 10000 ** (np.arange(half) / max(half, 1))
        ang = positions[:, a : a + 1] * freqs[None, :]
        out[:, a * per_axis : a * per_axis + half] = np.sin(ang)
        out[:, a * per_axis + half : (a + 1) * per_axis] = np.cos(ang)
    return out


class Attention(Module):
    # query and value biases only: a key bias shifts every logit of a row equally and has no effect
    def __init__(self, init: _Init, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = Linear(init, dim, 3 * dim, bias=False)
        self.q_bias = init.zeros(dim)
        self.v_bias = init.zeros(dim)
        self.proj = Linear(init, dim, dim)
        self._k_zero = np.zeros(dim)

    def forward(self, x: Tensor) -> Tensor:
        n, l, d = x.shape
        hd = d // self.heads
        bias = T.concat([self.q_bias, Tensor(self._k_zero), self.v_bias], axis=0)
        qkv = T.transpose(T.reshape(T.linear(x, self.qkv.weight, bias), (n, l, 3, self.heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(hd)), axis=-1)
        out = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (n, l, d))
        return self.proj(out)


class TransformerBlock(Module):
    def __init__(self, init: _Init, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = LayerNorm(init, dim)
        self.attn = Attention(init, dim, heads)
        self.norm2 = LayerNorm(init, dim)
        self.fc1 = Linear(init, dim, mlp_ratio * dim)
        self.fc2 = Linear(init, mlp_ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(T.gelu(self.fc1(self.norm2(x))))


class MaskedAutoencoder(Module):
    """Tubelet-patch transformer autoencoder.

    The encoder only ever sees visible tokens; the decoder receives encoded
    visible tokens plus a learned mask token at every masked position and
    reconstructs all patches.
    """

    def __init__(self, cfg: MaeConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init = _Init(seed, "mae")
        self.patch_embed = Linear(init, cfg.patch_dim, cfg.enc_dim)
        self.enc_blocks = []
        for j in range(cfg.enc_depth):
            blk = TransformerBlock(init, cfg.enc_dim, cfg.enc_heads, cfg.mlp_ratio)
            setattr(self, f"enc_block{j}", blk)
            self.enc_blocks.append(blk)
        self.enc_norm = LayerNorm(init, cfg.enc_dim)
        self.dec_embed = Linear(init, cfg.enc_dim, cfg.dec_dim)
        self.mask_token = init.weight(1, 1, cfg.dec_dim)
        self.dec_blocks = []
        for j in range(cfg.dec_depth):
            blk = TransformerBlock(init, cfg.dec_dim, cfg.dec_heads, cfg.mlp_ratio)
            setattr(self, f"dec_block{j}", blk)
            self.dec_blocks.append(blk)
        self.dec_norm = LayerNorm(init, cfg.dec_dim)
        self.dec_pred = Linear(init, cfg.dec_dim, cfg.patch_dim)
        self._pos_cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._name_params()

    # token grid helpers -----------------------------------------------------

    def grid(self, clip_shape) -> tuple[int, int, int]:
        _, c, t, h, w = clip_shape
        p = self.cfg.patch_size
        if c != self.cfg.in_channels or t != self.cfg.context_frames:
            raise ShapeError(f"mae: clip {tuple(clip_shape)} does not match config (C={self.cfg.in_channels}, t={self.cfg.context_frames})")
        if h % p or w % p:
            raise ShapeError(f"mae: patch size {p} does not divide spatial size {h}x{w}")
        return t // self.cfg.tubelet, h // p, w // p

    def _pos(self, grid) -> tuple[np.ndarray, np.ndarray]:
        if grid not in self._pos_cache:
            coords = np.stack(np.meshgrid(*[np.arange(g) for g in grid], indexing="ij"), -1).reshape(-1, 3)
            self._pos_cache[grid] = (
                sincos_embedding(coords.astype(float), self.cfg.enc_dim),
                sincos_embedding(coords.astype(float), self.cfg.dec_dim),
            )
        return self._pos_cache[grid]

    def patchify(self, clip):
        """[N, C, t, H, W] -> [N, L, patch_dim] with tokens ordered (time, row, col)."""
        data = clip.data if isinstance(clip, Tensor) else np.asarray(clip)
        n, c, t, h, w = data.shape
        tt, ph, pw = self.grid(data.shape)
        u, p = self.cfg.tubelet, self.cfg.patch_size
        x = data.reshape(n, c, tt, u, ph, p, pw, p).transpose(0, 2, 4, 6, 1, 3, 5, 7)
        return x.reshape(n, tt * ph * pw, self.cfg.patch_dim)

    def unpatchify(self, tokens: Tensor, clip_shape) -> Tensor:
        n, c, t, h, w = clip_shape
        tt, ph, pw = self.grid(clip_shape)
        u, p = self.cfg.tubelet, self.cfg.patch_size
        x = T.reshape(tokens, (n, tt, ph, pw, c, u, p, p))
        x = T.transpose(x, (0, 4, 1, 5, 2, 6, 3, 7))
        return T.reshape(x, (n, c, t, h, w))

    def token_mask(self, mask: np.ndarray, n: int, grid) -> np.ndarray:
        """Expand a spatial tube mask ([Ph, Pw] or [N, Ph, Pw]) to [N, L] over all time slices."""
        tt, ph, pw = grid
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim == 2:
            mask = np.broadcast_to(mask, (n, *mask.shape))
        if mask.shape != (n, ph, pw):
            raise ShapeError(f"mae: mask shape {mask.shape} does not match patch grid {(n, ph, pw)}")
        counts = mask.reshape(n, -1).sum(axis=1)
        if np.any(counts != counts[0]):
            raise ShapeError("mae: every sample's tube mask must hide the same number of patches")
        return np.broadcast_to(mask[:, None], (n, tt, ph, pw)).reshape(n, -1)

    # forward ----------------------------------------------------------------

    def _encode(self, tokens: Tensor) -> Tensor:
        x = tokens
        for blk in self.enc_blocks:
            x = blk(x)
        return self.enc_norm(x)

    def encode_visible(self, clip: Tensor, token_mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """Encode only the unmasked tokens. Returns latents [N, L_vis, enc_dim] and their indices."""
        grid = self.grid(clip.shape)
        pos_enc, _ = self._pos(grid)
        n = clip.shape[0]
        patches = Tensor(self.patchify(clip))
        x = self.patch_embed(patches) + pos_enc[None]
        order = np.argsort(token_mask, axis=1, kind="stable")
        n_vis = int((~token_mask[0]).sum())
        keep = order[:, :n_vis]
        return self._encode(T.gather_rows(x, keep)), order

    def forward(self, clip: Tensor, mask: np.ndarray) -> Tensor:
        """Full-field reconstruction [N, C, t, H, W] from a tube-masked clip."""
        grid = self.grid(clip.shape)
        n = clip.shape[0]
        tmask = self.token_mask(mask, n, grid)
        latent, order = self.encode_visible(clip, tmask)
        return self.unpatchify(self.decode(latent, order, grid), clip.shape)

    def decode(self, latent: Tensor, order: np.ndarray, grid) -> Tensor:
        """Decoder output in patch space [N, L, patch_dim]."""
        _, pos_dec = self._pos(grid)
        n, n_vis, _ = latent.shape
        n_tok = order.shape[1]
        x = self.dec_embed(latent)
        fill = T.broadcast_to(self.mask_token, (n, n_tok - n_vis, self.cfg.dec_dim))
        x = T.concat([x, fill], axis=1)
        restore = np.argsort(order, axis=1, kind="stable")
        x = T.gather_rows(x, restore) + pos_dec[None]
        for blk in self.dec_blocks:
            x = blk(x)
        return self.dec_pred(self.dec_norm(x))

    def encode_tokens(self, clip: Tensor) -> Tensor:
        """Unmasked encoding for probing: [N, t/tubelet, H/p, W/p, enc_dim]."""
        grid = self.grid(clip.shape)
        pos_enc, _ = self._pos(grid)
        x = self.patch_embed(Tensor(self.patchify(clip))) + pos_enc[None]
        x = self._encode(x)
        return T.reshape(x, (clip.shape[0], *grid, self.cfg.enc_dim))


# ---------------------------------------------------------------------------
# attentive probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    token_dim: int = 64
    probe_dim: int = 64
    num_queries: int = 1
    num_heads: int = 1
    num_outputs: int = 2

    def __post_init__(self):
        if self.probe_dim % self.num_heads:
            raise ValueError("ProbeConfig: probe_dim must be divisible by num_heads")
        if self.num_outputs < 1 or self.num_queries < 1:
            raise ValueError("ProbeConfig: num_outputs and num_queries must be positive")


class AttentiveProbe(Module):
    """Learnable queries cross-attend over a frozen token set, then a linear head.

    Token positions are not encoded, so the output is invariant to token order.
    """

    def __init__(self, cfg: ProbeConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        init = _Init(seed, "probe")
        self.query = init.weight(cfg.num_queries, cfg.probe_dim)
        # fan-in scaled projections and a zero head: the untrained probe predicts the
        # target mean and training starts as plain regression instead of a saddle
        fan_in = 1.0 / math.sqrt(cfg.token_dim)
        self.key = Linear(init, cfg.token_dim, cfg.probe_dim, bias=False, std=fan_in)
        self.value = Linear(init, cfg.token_dim, cfg.probe_dim, std=fan_in)
        self.head = Linear(init, cfg.probe_dim, cfg.num_outputs, std=0.0)
        self._name_params()

    def forward(self, tokens) -> Tensor:
        tokens = T.as_tensor(tokens)
        cfg = self.cfg
        if tokens.ndim < 2 or tokens.shape[-1] != cfg.token_dim:
            raise ShapeError(f"probe: token dim {tokens.shape[-1:]} != configured {cfg.token_dim}")
        n = tokens.shape[0]
        l = int(np.prod(tokens.shape[1:-1])) if tokens.ndim > 2 else 0
        if l == 0:
            raise ShapeError(f"probe: empty token set {tokens.shape}")
        x = T.reshape(tokens, (n, l, cfg.token_dim))
        h, hd = cfg.num_heads, cfg.probe_dim // cfg.num_heads
        k = T.transpose(T.reshape(self.key(x), (n, l, h, hd)), (0, 2, 3, 1))  # [N, h, hd, L]
        v = T.transpose(T.reshape(self.value(x), (n, l, h, hd)), (0, 2, 1, 3))  # [N, h, L, hd]
        q = T.transpose(T.reshape(self.query, (cfg.num_queries, h, hd)), (1, 0, 2))  # [h, Q, hd]
        attn = T.softmax(T.matmul(q, k) * (1.0 / math.sqrt(hd)), axis=-1)  # [N, h, Q, L]
        pooled = T.matmul(attn, v)  # [N, h, Q, hd]
        pooled = T.reshape(T.transpose(pooled, (0, 2, 1, 3)), (n, cfg.num_queries, cfg.probe_dim))
        return self.head(T.mean(pooled, axis=1))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PHRPCKPT"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, module: Module, header: dict) -> None:
    """Header JSON (config, step, seed, ...) then little-endian float32 parameters in declaration order."""
    params = module.named_parameters()
    names, shapes, chunks = [], [], []
    for name, p in params:
        names.append(name)
        shapes.append(list(p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    head = dict(header)
    head["params"] = [{"name": n, "shape": s} for n, s in zip(names, shapes)]
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    offset = 16 + hlen
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 4 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated at parameter {entry['name']}")
        state[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64).reshape(entry["shape"])
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return header, state


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
