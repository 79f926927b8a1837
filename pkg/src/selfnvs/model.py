"""The scene network: four patch transformers plus camera and surfel heads.

A shared Per-Frame transformer extracts per-frame feature maps. A Camera
transformer sees all frames jointly and regresses per-frame intrinsics and
extrinsics. A Context transformer encodes a strict subset of frames into
context feature maps and per-pixel surfel parameters. A View-Synthesis
transformer decodes a target image from context features embedded with
per-pixel ray maps.

All four share the same block architecture (pre-norm self-attention and
MLP with residuals) and differ only in embeddings, depth and width.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from einops import rearrange
from torch import Tensor, nn

from .geometry import Extrinsics, Intrinsics, plucker_map, unproject_rays, pixel_grid
from .splat import Gaussians2D

FOCAL_SHIFT = math.log(math.exp(0.8) - 1.0)  # softplus(FOCAL_SHIFT) = 0.8


@dataclass
class TransformerSpec:
    blocks: int
    hidden: int
    heads: int

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The paper-scale preset uses a 12-block/768-wide per-frame transformer
    and 8-block/512-wide camera, context and view-synthesis transformers
    with 8x8 patches; the toy presets shrink everything for CPU runs.
    """

    height: int = 64
    width: int = 64
    patch_size: int = 8
    sh_degree: int = 0
    fs_channels: int = 32
    fc_channels: int = 32
    camera_feat_channels: int = 32
    per_frame: TransformerSpec = field(default_factory=lambda: TransformerSpec(4, 128, 4))
    camera: TransformerSpec = field(default_factory=lambda: TransformerSpec(3, 128, 4))
    context: TransformerSpec = field(default_factory=lambda: TransformerSpec(3, 128, 4))
    view_synthesis: TransformerSpec = field(default_factory=lambda: TransformerSpec(3, 128, 4))
    camera_head_hidden: int = 256
    gaussian_head_hidden: int = 128
    depth_min: float = 0.05
    depth_bias: float = 1.2
    scale_bias: float = -2.5
    alpha_bias: float = 0.0
    focal_init: float = 0.8

    def __post_init__(self):
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ValueError(
                f"resolution {self.width}x{self.height} not divisible by patch {self.patch_size}"
            )
        if self.sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")

    @property
    def gaussian_channels(self) -> int:
        # depth, opacity, quaternion, two scales, SH coefficients
        return 8 + 3 * (self.sh_degree + 1) ** 2

    @classmethod
    def paper_square(cls) -> "ModelConfig":
        return cls(
            height=256, width=256,
            per_frame=TransformerSpec(12, 768, 12),
            camera=TransformerSpec(8, 512, 8),
            context=TransformerSpec(8, 512, 8),
            view_synthesis=TransformerSpec(8, 512, 8),
            fs_channels=64, fc_channels=64, camera_feat_channels=64,
        )

    @classmethod
    def paper_wide(cls) -> "ModelConfig":
        cfg = cls.paper_square()
        cfg.height, cfg.width = 256, 448
        return cfg

    @classmethod
    def toy(cls) -> "ModelConfig":
        return cls()  # 64x64, hidden 128, blocks {4,3,3,3}

    @classmethod
    def toy_small(cls) -> "ModelConfig":
        return cls(height=32, width=32)


def patchify(maps: Tensor, patch: int) -> Tensor:
    """Split maps into flattened non-overlapping patches.

    [H, W, C] -> [T, patch*patch*C] or [N, H, W, C] -> [N, T, patch*patch*C];
    a pure rearrangement, inverted exactly by :func:`unpatchify`.
    """
    if maps.shape[-3] % patch or maps.shape[-2] % patch:
        raise ValueError(f"map size {tuple(maps.shape)} not divisible by patch {patch}")
    pattern = "(hp p1) (wp p2) c -> (hp wp) (p1 p2 c)"
    if maps.ndim == 4:
        pattern = "n " + pattern.replace("->", "-> n")
    return rearrange(maps, pattern, p1=patch, p2=patch)


def unpatchify(tokens: Tensor, H: int, W: int, patch: int) -> Tensor:
    """Inverse of :func:`patchify`: [..., T, patch*patch*C] -> [..., H, W, C]."""
    pattern = "(hp wp) (p1 p2 c) -> (hp p1) (wp p2) c"
    if tokens.ndim == 3:
        pattern = "n " + pattern.replace("->", "-> n")
    return rearrange(tokens, pattern, hp=H // patch, wp=W // patch, p1=patch, p2=patch)


@dataclass
class TokenGrid:
    """Token sequence with (frame, patch-row, patch-col) provenance."""

    tokens: Tensor  # [T, D]
    frame: Tensor  # [T] long
    row: Tensor  # [T] long
    col: Tensor  # [T] long

    @classmethod
    def build(cls, maps: Tensor, patch: int) -> "TokenGrid":
        """maps: [N, H, W, C]. Tokens are ordered frame-major, row-major."""
        N, H, W, _ = maps.shape
        tokens = patchify(maps, patch).reshape(N * (H // patch) * (W // patch), -1)
        rows = H // patch
        cols = W // patch
        frame = torch.arange(N).repeat_interleave(rows * cols)
        rc = torch.arange(rows * cols)
        row = (rc // cols).repeat(N)
        col = (rc % cols).repeat(N)
        return cls(tokens=tokens, frame=frame, row=row, col=col)

    def pixels(self, patch: int, index: int) -> set[tuple[int, int]]:
        """Pixel set covered by one token, for provenance checks."""
        r, c = int(self.row[index]) * patch, int(self.col[index]) * patch
        return {(r + i, c + j) for i in range(patch) for j in range(patch)}


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3, bias=True)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)  # [B, heads, T, head_dim]
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(B, T, D)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * ratio, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm residual self-attention followed by a pre-norm residual MLP."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x[0] if squeeze else x


class TransformerCore(nn.Module):
    """Patchify -> linear embed -> blocks -> norm -> linear -> unpatchify."""

    def __init__(self, in_channels: int, out_channels: int, patch: int, spec: TransformerSpec):
        super().__init__()
        self.patch = patch
        self.out_channels = out_channels
        self.embed = nn.Linear(in_channels * patch * patch, spec.hidden)
        self.blocks = nn.ModuleList(TransformerBlock(spec.hidden, spec.heads) for _ in range(spec.blocks))
        self.norm = nn.LayerNorm(spec.hidden)
        self.head = nn.Linear(spec.hidden, out_channels * patch * patch)

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        x = self.embed(tokens)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x))

    def forward(self, maps: Tensor) -> Tensor:
        """maps: [B, H, W, C] -> [B, H, W, out_channels]; attention runs
        within each batch element independently."""
        B, H, W, _ = maps.shape
        tokens = patchify(maps, self.patch)
        out = self.forward_tokens(tokens)
        return unpatchify(out, H, W, self.patch)


def _index_channel(N: int, H: int, W: int, dtype: torch.dtype) -> Tensor:
    """Per-frame positional channel with value (i+1)/N, shape [N, H, W, 1]."""
    vals = torch.arange(1, N + 1, dtype=dtype) / N
    return vals.view(N, 1, 1, 1).expand(N, H, W, 1)


def _coord_channels(H: int, W: int, dtype: torch.dtype) -> Tensor:
    """Normalized pixel coordinates (u/W, v/H), shape [H, W, 2]."""
    pix = pixel_grid(H, W, dtype=dtype)
    return torch.stack([pix[..., 0] / W, pix[..., 1] / H], dim=-1)


class CameraHead(nn.Module):
    """GAP over each frame's feature map, then a 2-layer MLP to 9 numbers:
    (fx_raw, fy_raw, qw, qx, qy, qz, tx, ty, tz).

    The output layer is initialized so untrained predictions are identity
    rotations with zero translation; the focal rows keep a small random
    weight so gradients reach the camera transformer from step one.
    """

    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(in_channels, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, 9)
        with torch.no_grad():
            nn.init.trunc_normal_(self.fc2.weight, std=0.02)
            self.fc2.weight[2:].zero_()
            self.fc2.bias.zero_()
            self.fc2.bias[2] = 1.0  # quaternion w

    def forward(self, feats: Tensor) -> Tensor:
        """feats: [N, H, W, C] -> raw camera vectors [N, 9]."""
        pooled = feats.mean(dim=(1, 2))
        return self.fc2(self.act(self.fc1(pooled)))


class GaussianHead(nn.Module):
    """Two 3x3 convolutions mapping context features to per-pixel surfel
    parameters (depth, opacity, quaternion, scales, SH coefficients)."""

    def __init__(self, in_channels: int, hidden: int, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.conv1 = nn.Conv2d(in_channels, hidden, 3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(hidden, cfg.gaussian_channels, 3, padding=1)
        with torch.no_grad():
            nn.init.trunc_normal_(self.conv2.weight, std=0.01)
            self.conv2.bias.zero_()
            self.conv2.bias[0] = cfg.depth_bias
            self.conv2.bias[1] = cfg.alpha_bias
            self.conv2.bias[2] = 1.0  # quaternion w
            self.conv2.bias[6:8] = cfg.scale_bias

    def forward(self, fc: Tensor) -> Tensor:
        """fc: [M, H, W, C] -> raw parameter maps [M, H, W, gaussian_channels]."""
        x = fc.permute(0, 3, 1, 2)
        x = self.conv2(self.act(self.conv1(x)))
        return x.permute(0, 2, 3, 1)


class SceneModel(nn.Module):
    """Full network: per-frame features, cameras, context and view synthesis."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        p = config.patch_size
        self.per_frame = TransformerCore(3 + 2, config.fs_channels, p, config.per_frame)
        self.camera_transformer = TransformerCore(
            config.fs_channels + 1, config.camera_feat_channels, p, config.camera
        )
        self.camera_head = CameraHead(config.camera_feat_channels, config.camera_head_hidden)
        self.context_transformer = TransformerCore(
            config.fs_channels + 1, config.fc_channels, p, config.context
        )
        self.context_skip = nn.Linear(config.fs_channels, config.fc_channels)
        self.view_synthesis = TransformerCore(
            config.fc_channels + 6, 3, p, config.view_synthesis
        )
        self.gaussian_head = GaussianHead(config.fc_channels, config.gaussian_head_hidden, config)
        # heads carry their own special initialization; only the transformer
        # stacks and the skip projection get the generic one
        for mod in (
            self.per_frame,
            self.camera_transformer,
            self.context_transformer,
            self.view_synthesis,
            self.context_skip,
        ):
            mod.apply(self._init_linear)

    @staticmethod
    def _init_linear(m: nn.Module):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    # ---------------------------------------------------------------- features

    def per_frame_features(self, images: Tensor) -> Tensor:
        """images: [N, H, W, 3] in [0, 1] -> per-frame features [N, H, W, Cs].

        Frames are processed independently (attention never crosses the
        batch dimension), so no inter-frame information leaks here.
        """
        N, H, W, _ = images.shape
        coords = _coord_channels(H, W, images.dtype).expand(N, H, W, 2)
        return self.per_frame(torch.cat([images, coords], dim=-1))

    # ----------------------------------------------------------------- cameras

    def predict_cameras(self, fs: Tensor) -> list[tuple[Intrinsics, Extrinsics]]:
        """fs: [N, H, W, Cs] for the whole clip -> per-frame cameras.

        All frames attend to each other; intrinsics are averaged across the
        clip so every returned camera shares identical focal lengths.
        """
        N, H, W, _ = fs.shape
        if N < 2:
            raise ValueError(f"camera prediction needs at least 2 frames, got {N}")
        inp = torch.cat([fs, _index_channel(N, H, W, fs.dtype)], dim=-1)
        tokens = patchify(inp, self.config.patch_size)  # [N, T, D_in]
        out = self.camera_transformer.forward_tokens(tokens.reshape(1, -1, tokens.shape[-1]))
        out = out.reshape(N, tokens.shape[1], -1)
        maps = unpatchify(out, H, W, self.config.patch_size)
        raw = self.camera_head(maps)  # [N, 9]

        f = F.softplus(raw[:, 0:2] + FOCAL_SHIFT) * max(H, W)
        f_mean = f.mean(dim=0)  # shared intrinsics across the clip
        cams = []
        for i in range(N):
            K = Intrinsics(fx=f_mean[0], fy=f_mean[1], width=W, height=H)
            P = Extrinsics(q=raw[i, 2:6], t=raw[i, 6:9])
            cams.append((K, P))
        return cams

    # ----------------------------------------------------------------- context

    def predict_context(self, fs_subset: Tensor) -> tuple[Tensor, Tensor]:
        """fs_subset: [M, H, W, Cs] (a strict subset of the clip's frames).

        Returns (context features [M, H, W, Cc], raw surfel maps
        [M, H, W, gaussian_channels]). A linear skip from the per-frame
        features is added onto the transformer output.
        """
        M, H, W, _ = fs_subset.shape
        if M == 0:
            raise ValueError("context subset must not be empty")
        inp = torch.cat([fs_subset, _index_channel(M, H, W, fs_subset.dtype)], dim=-1)
        tokens = patchify(inp, self.config.patch_size)
        out = self.context_transformer.forward_tokens(tokens.reshape(1, -1, tokens.shape[-1]))
        out = out.reshape(M, tokens.shape[1], -1)
        fc = unpatchify(out, H, W, self.config.patch_size)
        fc = fc + self.context_skip(fs_subset)
        raw = self.gaussian_head(fc)
        return fc, raw

    def decode_gaussians(self, raw: Tensor, K: Intrinsics) -> tuple[Gaussians2D, Tensor]:
        """raw: [H, W, gaussian_channels] for one frame -> camera-frame surfels.

        Centers are the per-pixel rays scaled by the activated depth;
        moving them to the world frame is the caller's job (it needs the
        frame's pose). Also returns the depth map [H, W].
        """
        H, W, _ = raw.shape
        cfg = self.config
        depth = cfg.depth_min + F.softplus(raw[..., 0])
        alpha = torch.sigmoid(raw[..., 1])
        quat = raw[..., 2:6]
        scale = F.softplus(raw[..., 6:8])
        sh = raw[..., 8:].reshape(H, W, (cfg.sh_degree + 1) ** 2, 3)
        rays = unproject_rays(pixel_grid(H, W, dtype=raw.dtype), K).to(raw.dtype)
        mu_cam = rays * depth[..., None]
        g = Gaussians2D(
            mu=mu_cam.reshape(-1, 3),
            alpha=alpha.reshape(-1),
            quat=quat.reshape(-1, 4),
            scale=scale.reshape(-1, 2),
            sh=sh.reshape(-1, (cfg.sh_degree + 1) ** 2, 3),
        )
        return g, depth

    # ---------------------------------------------------------------- renderer

    def synthesize_view(
        self,
        fc: Tensor,
        context_cams: list[tuple[Intrinsics, Extrinsics]],
        target_cam: tuple[Intrinsics, Extrinsics],
    ) -> Tensor:
        """Decode the target image from embedded context features.

        Context tokens carry (features, ray map); the target contributes a
        zero feature map with its own ray map. Only the updated target
        tokens are decoded, through a sigmoid, to an [H, W, 3] image.
        """
        M, H, W, _ = fc.shape
        if len(context_cams) != M:
            raise ValueError("one camera per context frame required")
        dtype = fc.dtype
        ctx_maps = []
        for i, (K, P) in enumerate(context_cams):
            pm = plucker_map(K, P, H, W).to(dtype)
            ctx_maps.append(torch.cat([fc[i], pm], dim=-1))
        Kt, Pt = target_cam
        Ht, Wt = Kt.height, Kt.width
        target_map = torch.cat(
            [torch.zeros(Ht, Wt, fc.shape[-1], dtype=dtype), plucker_map(Kt, Pt, Ht, Wt).to(dtype)],
            dim=-1,
        )
        p = self.config.patch_size
        ctx_tokens = torch.cat([patchify(m, p) for m in ctx_maps], dim=0)
        tgt_tokens = patchify(target_map, p)
        tokens = torch.cat([ctx_tokens, tgt_tokens], dim=0)
        out = self.view_synthesis.forward_tokens(tokens[None])[0]
        tgt_out = out[ctx_tokens.shape[0]:]
        return torch.sigmoid(unpatchify(tgt_out, Ht, Wt, p))


# ------------------------------------------------------------------ checkpoint

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_ARRAYS = "arrays.bin"


def save_checkpoint(path: str | Path, model: nn.Module, config: dict, stage: int, step: int) -> None:
    """Write a self-describing archive: JSON manifest + raw float32 arrays.

    Arrays are stored little-endian in manifest order (sorted by name), so
    two saves of identical state are byte-identical.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    arrays = []
    blobs = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        blob = arr.tobytes()
        arrays.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "schema_version": 1,
        "stage": stage,
        "step": step,
        "config": config,
        "arrays": arrays,
    }
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    (path / CHECKPOINT_ARRAYS).write_bytes(b"".join(blobs))


@dataclass
class Checkpoint:
    config: dict
    stage: int
    step: int
    state: dict[str, Tensor]


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / CHECKPOINT_MANIFEST).read_text())
    raw = (path / CHECKPOINT_ARRAYS).read_bytes()
    state = {}
    for entry in manifest["arrays"]:
        buf = raw[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
    return Checkpoint(
        config=manifest["config"], stage=manifest["stage"], step=manifest["step"], state=state
    )
