"""Training objectives for both stages.

Stage 1 optimizes a weighted photometric reconstruction of every input
frame from the latent renderer. Stage 2 adds the splatted reconstruction,
a depth reprojection term and edge-aware depth smoothness, with the
reprojection weight linearly decayed to zero (it is occlusion-blind).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
from torch import Tensor

from .geometry import Extrinsics, Intrinsics, back_project, bilinear_sample, pixel_grid, project


@dataclass
class LossConfig:
    w_low: float = 0.1  # weight of reconstructed context frames
    lambda_perc: float = 0.5  # perceptual weight inside render losses
    lambda_proj: float = 0.1  # reprojection weight in the stage-2 total
    lambda_ds: float = 0.01  # smoothness weight in the stage-2 total
    gamma: float = 10.0  # edge sharpness in the smoothness weight
    proj_decay_start: int = 0
    proj_decay_end: int = 1

    def __post_init__(self):
        if not (0 < self.w_low <= 1):
            raise ValueError("w_low must lie in (0, 1]")
        if min(self.lambda_perc, self.lambda_proj, self.lambda_ds) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class LossReport:
    """Named scalar components; total is their documented weighted sum."""

    latent_render: float = 0.0
    gs_render: float = 0.0
    proj: float = 0.0
    smooth: float = 0.0
    total: float = 0.0
    lambda_proj_effective: float = 0.0
    step: int = 0

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "latent_render": self.latent_render,
            "gs_render": self.gs_render,
            "proj": self.proj,
            "smooth": self.smooth,
            "total": self.total,
            "lambda_proj_effective": self.lambda_proj_effective,
        }


def _grad_x(img: Tensor) -> Tensor:
    return img[:, 1:] - img[:, :-1]


def _grad_y(img: Tensor) -> Tensor:
    return img[1:] - img[:-1]


def perceptual_distance(a: Tensor, b: Tensor, levels: int = 3) -> Tensor:
    """Default desk-scale perceptual backend.

    Averages, over a small pyramid, the MSE of downsampled images plus the
    MSE of their gradient maps. Symmetric and zero on identical inputs; a
    pretrained-feature metric can be swapped in anywhere a
    ``perceptual_fn`` is accepted.
    """
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = a.new_zeros(())
    xa = a.permute(2, 0, 1)[None]
    xb = b.permute(2, 0, 1)[None]
    for level in range(levels):
        if level > 0:
            xa = torch.nn.functional.avg_pool2d(xa, 2, ceil_mode=True)
            xb = torch.nn.functional.avg_pool2d(xb, 2, ceil_mode=True)
        ia = xa[0].permute(1, 2, 0)
        ib = xb[0].permute(1, 2, 0)
        term = (ia - ib).pow(2).mean()
        if ia.shape[1] > 1:
            term = term + (_grad_x(ia) - _grad_x(ib)).pow(2).mean()
        if ia.shape[0] > 1:
            term = term + (_grad_y(ia) - _grad_y(ib)).pow(2).mean()
        total = total + term
    return total / levels


PerceptualFn = Callable[[Tensor, Tensor], Tensor]


def weighted_render_loss(
    renders: list[Tensor],
    targets: list[Tensor],
    context_mask: list[bool],
    cfg: LossConfig,
    perceptual_fn: PerceptualFn = perceptual_distance,
) -> Tensor:
    """Weighted photometric loss over a clip.

    Each frame contributes ``MSE + lambda_perc * perceptual``; frames that
    were visible to the context encoder are down-weighted by ``w_low`` so
    trivially re-encoded frames cannot dominate. At least one frame must be
    outside the context set.
    """
    if len(renders) != len(targets) or len(renders) != len(context_mask):
        raise ValueError("renders, targets and context_mask must align")
    if len(renders) < 2:
        raise ValueError("need at least 2 frames")
    if all(context_mask):
        raise ValueError("context covers every frame; the strict-subset rule is broken")
    num = renders[0].new_zeros(())
    den = 0.0
    for render, target, in_context in zip(renders, targets, context_mask):
        w = cfg.w_low if in_context else 1.0
        term = (render - target).pow(2).mean()
        if cfg.lambda_perc > 0:
            term = term + cfg.lambda_perc * perceptual_fn(render, target)
        num = num + w * term
        den += w
    return num / den


def latent_render_loss(renders, targets, context_mask, cfg: LossConfig, perceptual_fn=perceptual_distance) -> Tensor:
    """Stage-1 objective on the latent (transformer) renders."""
    return weighted_render_loss(renders, targets, context_mask, cfg, perceptual_fn)


def gs_render_loss(renders, targets, context_mask, cfg: LossConfig, perceptual_fn=perceptual_distance) -> Tensor:
    """Same weighting applied to the splatted renders."""
    return weighted_render_loss(renders, targets, context_mask, cfg, perceptual_fn)


def projection_loss(
    depth_i: Tensor,
    image_i: Tensor,
    image_j: Tensor,
    cam_i: tuple[Intrinsics, Extrinsics],
    cam_j: tuple[Intrinsics, Extrinsics],
) -> tuple[Tensor, Tensor]:
    """Photometric depth-reprojection loss from frame i onto frame j.

    Back-projects frame i's depth map, projects the points into frame j,
    samples colors there and compares with frame i. Pixels that land
    behind camera j or outside its image are excluded from the mean.

    Returns (loss, valid_mask [H, W]); an all-invalid warp yields loss 0.
    """
    H, W = depth_i.shape
    pix = pixel_grid(H, W, dtype=depth_i.dtype)
    world = back_project(pix, depth_i, *cam_i)
    coords, _, in_front = project(world, *cam_j)
    sampled, in_bounds = bilinear_sample(image_j, coords)
    valid = in_front & in_bounds
    if not bool(valid.any()):
        return depth_i.new_zeros(()), valid
    diff = (sampled - image_i).pow(2).sum(-1)
    loss = (diff * valid.to(diff.dtype)).sum() / (valid.sum() * image_i.shape[-1])
    return loss, valid


def smoothness_loss(depth: Tensor, image: Tensor, gamma: float) -> Tensor:
    """Edge-aware depth smoothness.

    Mean absolute forward-difference depth gradient, attenuated where the
    image has strong edges (L1 over channels): the last row/column drops
    out of the respective direction's mean.
    """
    if depth.shape != image.shape[:2]:
        raise ValueError("depth and image resolution mismatch")
    loss = depth.new_zeros(())
    if depth.shape[1] > 1:
        wx = torch.exp(-gamma * _grad_x(image).abs().sum(-1))
        loss = loss + (_grad_x(depth).abs() * wx).mean()
    if depth.shape[0] > 1:
        wy = torch.exp(-gamma * _grad_y(image).abs().sum(-1))
        loss = loss + (_grad_y(depth).abs() * wy).mean()
    return loss


def lambda_proj_at(step: int, cfg: LossConfig) -> float:
    """Linearly decay the reprojection weight to zero over the schedule."""
    if step <= cfg.proj_decay_start:
        return cfg.lambda_proj
    if step >= cfg.proj_decay_end:
        return 0.0
    frac = (step - cfg.proj_decay_start) / (cfg.proj_decay_end - cfg.proj_decay_start)
    return cfg.lambda_proj * (1.0 - frac)


def stage2_total(
    latent: Tensor,
    gs: Tensor,
    proj: Tensor,
    smooth: Tensor,
    step: int,
    cfg: LossConfig,
) -> tuple[Tensor, LossReport]:
    """Combine the stage-2 components at the scheduled weights."""
    lam = lambda_proj_at(step, cfg)
    total = latent + gs + lam * proj + cfg.lambda_ds * smooth
    report = LossReport(
        latent_render=float(latent.detach()),
        gs_render=float(gs.detach()),
        proj=float(proj.detach()),
        smooth=float(smooth.detach()),
        total=float(total.detach()),
        lambda_proj_effective=lam,
        step=step,
    )
    return total, report
