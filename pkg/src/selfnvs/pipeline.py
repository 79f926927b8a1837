"""Training orchestration: episodes, forward passes, the two stages and
interpolated two-view inference.

Stage 1 optimizes the latent rendering objective only. Stage 2 starts from
stage-1 weights (the surfel head alone stays freshly initialized), adds the
explicit splatted reconstruction and the depth terms, and keeps the
pretraining loss in the total.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import Config, FrameDataset, save_image
from .geometry import (
    DegenerateCameraMeanError,
    Extrinsics,
    Intrinsics,
    average_cameras,
)
from .losses import (
    LossConfig,
    LossReport,
    gs_render_loss,
    latent_render_loss,
    projection_loss,
    smoothness_loss,
    stage2_total,
)
from .model import SceneModel, load_checkpoint, save_checkpoint
from .splat import Gaussians2D, RenderOutput, gaussians_to_world, rasterize

logger = logging.getLogger(__name__)


class StageOrderError(RuntimeError):
    """Stage-2 training requested without stage-1 weights."""


class StrictSubsetError(AssertionError):
    """A forward pass saw context covering every input frame."""


@dataclass
class Episode:
    """One training sample: a shuffled clip window plus a context subset."""

    frames: Tensor  # [N, H, W, 3]
    context_indices: list[int]
    clip_index: int
    start: int
    order: list[int]

    def __post_init__(self):
        N = self.frames.shape[0]
        ctx = set(self.context_indices)
        if not (2 <= N):
            raise ValueError("episode needs at least two frames")
        if not (1 <= len(ctx) <= N - 1) or len(ctx) != len(self.context_indices):
            raise ValueError("context must be a non-empty proper subset")

    @property
    def context_mask(self) -> list[bool]:
        ctx = set(self.context_indices)
        return [i in ctx for i in range(self.frames.shape[0])]


def sample_episode(dataset: FrameDataset, rng: np.random.Generator, cfg: Config) -> Episode:
    """N ~ U{n_min..n_max}, a random contiguous window of a random clip,
    shuffled order, context size ~ U{1..N-1} without replacement."""
    tc = cfg.train
    n = int(rng.integers(tc.n_min, tc.n_max + 1))
    for _ in range(50):
        clip_idx = int(rng.integers(len(dataset)))
        length = dataset.clip_length(clip_idx)
        if length >= n:
            break
        if tc.short_clip_policy == "truncate" and length >= 2:
            n = length
            break
    else:
        raise ValueError(f"no clip long enough for {n} frames")
    start = int(rng.integers(0, dataset.clip_length(clip_idx) - n + 1))
    frames = dataset.load_window(clip_idx, start, n)
    order = [int(i) for i in rng.permutation(n)]
    frames = frames[order]
    ctx_size = int(rng.integers(1, n))
    context = sorted(int(i) for i in rng.choice(n, size=ctx_size, replace=False))
    return Episode(frames=frames, context_indices=context, clip_index=clip_idx, start=start, order=order)


@dataclass
class ForwardResult:
    cameras: list[tuple[Intrinsics, Extrinsics]]
    context_indices: list[int]
    fc: Tensor  # [M, H, W, Cc]
    latent_renders: list[Tensor]  # N x [H, W, 3]
    splat_outputs: list[RenderOutput] | None  # stage 2: N entries
    pred_depths: list[Tensor] | None  # stage 2: M entries (context frames)
    gaussians_world: Gaussians2D | None  # stage 2: concatenated primitives


def forward(model: SceneModel, frames: Tensor, context_indices: list[int], stage: int) -> ForwardResult:
    """Full clip pass: cameras for all frames, context features for the
    subset, one latent render per frame at its own predicted camera; in
    stage 2 additionally world-frame surfels (concatenated over the context
    frames) splatted into every frame."""
    N = frames.shape[0]
    ctx = sorted(set(context_indices))
    if not ctx or len(ctx) >= N:
        raise StrictSubsetError(f"context {context_indices} must be a proper subset of {N} frames")
    fs = model.per_frame_features(frames)
    cameras = model.predict_cameras(fs)
    fc, raw = model.predict_context(fs[ctx])
    ctx_cams = [cameras[i] for i in ctx]
    latent_renders = [model.synthesize_view(fc, ctx_cams, cameras[i]) for i in range(N)]

    splat_outputs = None
    pred_depths = None
    gaussians_world = None
    if stage >= 2:
        parts = []
        pred_depths = []
        for m, frame_idx in enumerate(ctx):
            K, P = cameras[frame_idx]
            g_cam, depth = model.decode_gaussians(raw[m], K)
            parts.append(gaussians_to_world(g_cam, P))
            pred_depths.append(depth)
        gaussians_world = Gaussians2D.cat(parts)
        H, W = frames.shape[1], frames.shape[2]
        splat_outputs = [
            rasterize(gaussians_world, cameras[i][0], cameras[i][1], H, W) for i in range(N)
        ]
    return ForwardResult(
        cameras=cameras,
        context_indices=ctx,
        fc=fc,
        latent_renders=latent_renders,
        splat_outputs=splat_outputs,
        pred_depths=pred_depths,
        gaussians_world=gaussians_world,
    )


def _resolved_loss_config(cfg: Config) -> LossConfig:
    """(0, 1) decay bounds mean 'derive from the step budget'."""
    lc = cfg.loss
    if (lc.proj_decay_start, lc.proj_decay_end) == (0, 1):
        steps = cfg.train.steps
        lc = replace(lc, proj_decay_start=int(0.4 * steps), proj_decay_end=max(int(0.9 * steps), 1))
    return lc


class Trainer:
    """Owns the model, optimizer, RNG and step counter for one stage."""

    def __init__(
        self,
        config: Config,
        dataset: FrameDataset,
        out_dir: str | Path | None = None,
        init_from: str | Path | None = None,
        from_scratch: bool = False,
    ):
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.stage = config.train.stage
        self.loss_cfg = _resolved_loss_config(config)

        torch.manual_seed(config.train.seed)
        self.model = SceneModel(config.model)
        self.step = 0

        if init_from is not None:
            ck = load_checkpoint(init_from)
            if ck.stage == self.stage:
                self.model.load_state_dict(ck.state)
                self.step = ck.step
            elif ck.stage == 1 and self.stage == 2:
                # keep this trainer's fresh surfel head; adopt everything else
                state = {k: v for k, v in ck.state.items() if not k.startswith("gaussian_head.")}
                missing, unexpected = self.model.load_state_dict(state, strict=False)
                if unexpected:
                    raise ValueError(f"unexpected checkpoint keys: {unexpected}")
                not_head = [k for k in missing if not k.startswith("gaussian_head.")]
                if not_head:
                    raise ValueError(f"checkpoint is missing keys: {not_head}")
            else:
                raise StageOrderError(
                    f"cannot initialize stage {self.stage} from a stage-{ck.stage} checkpoint"
                )
        elif self.stage == 2:
            if not from_scratch:
                raise StageOrderError(
                    "stage 2 requires stage-1 weights; pass from_scratch=True to override"
                )
            logger.warning("training stage 2 from scratch; expect poor convergence")

        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.train.lr, weight_decay=config.train.weight_decay
        )
        self.rng = np.random.default_rng(config.train.seed)
        self._log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._log_file = (self.out_dir / "train_log.jsonl").open("a")

    # ------------------------------------------------------------------ steps

    def lr_at(self, step: int) -> float:
        total = self.config.train.steps
        warmup = max(int(self.config.train.warmup_frac * total), 1)
        base = self.config.train.lr
        if step < warmup:
            return base * (step + 1) / warmup
        frac = (step - warmup) / max(total - warmup, 1)
        return base * 0.5 * (1 + math.cos(math.pi * min(frac, 1.0)))

    def _sample_partner(self, i: int, n: int) -> int:
        j = int(self.rng.integers(0, n - 1))
        return j if j < i else j + 1

    def episode_losses(self, episode: Episode) -> tuple[Tensor, LossReport]:
        frames = episode.frames
        result = forward(self.model, frames, episode.context_indices, self.stage)
        mask = episode.context_mask
        targets = list(frames)
        latent = latent_render_loss(result.latent_renders, targets, mask, self.loss_cfg)
        if self.stage == 1:
            val = float(latent.detach())
            return latent, LossReport(latent_render=val, total=val, step=self.step)

        n = frames.shape[0]
        gs = gs_render_loss([o.color for o in result.splat_outputs], targets, mask, self.loss_cfg)
        proj_terms = []
        smooth_terms = []
        # predicted depth exists for context frames only
        pred_proj = []
        pred_smooth = []
        for m, frame_idx in enumerate(result.context_indices):
            j = self._sample_partner(frame_idx, n)
            loss, _ = projection_loss(
                result.pred_depths[m], frames[frame_idx], frames[j],
                result.cameras[frame_idx], result.cameras[j],
            )
            pred_proj.append(loss)
            pred_smooth.append(
                smoothness_loss(result.pred_depths[m], frames[frame_idx], self.loss_cfg.gamma)
            )
        # rendered depth exists for every frame
        rend_proj = []
        rend_smooth = []
        for i in range(n):
            j = self._sample_partner(i, n)
            loss, _ = projection_loss(
                result.splat_outputs[i].depth, frames[i], frames[j],
                result.cameras[i], result.cameras[j],
            )
            rend_proj.append(loss)
            rend_smooth.append(
                smoothness_loss(result.splat_outputs[i].depth, frames[i], self.loss_cfg.gamma)
            )
        proj = torch.stack(pred_proj).mean() + torch.stack(rend_proj).mean()
        smooth = torch.stack(pred_smooth).mean() + torch.stack(rend_smooth).mean()
        total, report = stage2_total(latent, gs, proj, smooth, self.step, self.loss_cfg)
        return total, report

    def train_step(self, episodes: list[Episode]) -> LossReport:
        """One optimizer update over a small batch of episodes. Non-finite
        losses skip the update and are logged as anomalies."""
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        totals = []
        reports = []
        for ep in episodes:
            total, report = self.episode_losses(ep)
            totals.append(total)
            reports.append(report)
        batch_total = torch.stack(totals).mean()
        if not bool(torch.isfinite(batch_total)):
            logger.warning("non-finite loss at step %d; skipping update", self.step)
            self.step += 1
            return LossReport(total=float("nan"), step=self.step - 1)

        batch_total.backward()
        if self.config.train.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.train.grad_clip)
        lr = self.lr_at(self.step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.step += 1

        avg = LossReport(
            latent_render=float(np.mean([r.latent_render for r in reports])),
            gs_render=float(np.mean([r.gs_render for r in reports])),
            proj=float(np.mean([r.proj for r in reports])),
            smooth=float(np.mean([r.smooth for r in reports])),
            total=float(batch_total.detach()),
            lambda_proj_effective=reports[0].lambda_proj_effective,
            step=self.step - 1,
        )
        return avg

    # -------------------------------------------------------------------- run

    def run(self) -> list[LossReport]:
        cfg = self.config.train
        history = []
        for _ in range(cfg.steps):
            episodes = [sample_episode(self.dataset, self.rng, self.config) for _ in range(cfg.batch_clips)]
            report = self.train_step(episodes)
            history.append(report)
            if self._log_file is not None and (self.step % max(cfg.log_every, 1) == 0 or self.step == cfg.steps):
                self._log_file.write(json.dumps({**report.to_dict(), "lr": self.lr_at(self.step - 1)}) + "\n")
                self._log_file.flush()
            if self.out_dir is not None and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                self.save(self.out_dir / f"checkpoint_{self.step:06d}")
            if self.out_dir is not None and cfg.dump_images_every and self.step % cfg.dump_images_every == 0:
                self._dump_images(episodes[0])
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoint_final")
        if self._log_file is not None:
            self._log_file.flush()
        return history

    def _dump_images(self, episode: Episode) -> None:
        with torch.no_grad():
            result = forward(self.model, episode.frames, episode.context_indices, self.stage)
        dump_dir = self.out_dir / "renders"
        dump_dir.mkdir(exist_ok=True)
        target = episode.frames[0]
        panels = [target, result.latent_renders[0]]
        if result.splat_outputs is not None:
            panels.append(result.splat_outputs[0].color)
        save_image(torch.cat(panels, dim=1), dump_dir / f"step_{self.step:06d}.png")

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model, self.config.to_dict(), self.stage, self.step)

    def close(self) -> None:
        if self._log_file is not None:
            self._log_file.close()
            self._log_file = None


def load_model(path: str | Path) -> tuple[SceneModel, Config, int]:
    """Rebuild a model from a checkpoint directory; returns (model, config,
    stage)."""
    ck = load_checkpoint(path)
    config = Config.from_dict(ck.config)
    model = SceneModel(config.model)
    model.load_state_dict(ck.state)
    model.eval()
    return model, config, ck.stage


# ------------------------------------------------- interpolated two-view pass

@dataclass
class InterpolationResult:
    cameras: list[tuple[Intrinsics, Extrinsics]]  # for frames a, b
    result: ForwardResult  # the final pass (three frames unless fallback)
    fallback: bool
    mid_camera: tuple[Intrinsics, Extrinsics] | None
    mid_image: Tensor | None


def interpolated_inference(
    model: SceneModel, frame_a: Tensor, frame_b: Tensor, stage: int = 2, context_first: bool = True
) -> InterpolationResult:
    """Two-view inference with a synthesized middle frame.

    A plain two-frame pass predicts cameras; the midpoint camera renders an
    interpolated frame through the latent renderer; the three-frame clip
    (a, mid, b) is re-run with the real frames as context and the outputs
    for a and b are returned. A degenerate camera midpoint falls back to
    the plain two-frame result.
    """
    frames2 = torch.stack([frame_a, frame_b])
    ctx2 = [0] if context_first else [1]
    first = forward(model, frames2, ctx2, stage)
    try:
        mid_cam = average_cameras(first.cameras[0], first.cameras[1])
    except DegenerateCameraMeanError:
        logger.warning("degenerate camera midpoint; falling back to the two-frame pass")
        return InterpolationResult(
            cameras=first.cameras, result=first, fallback=True, mid_camera=None, mid_image=None
        )
    ctx_cams = [first.cameras[i] for i in first.context_indices]
    with torch.no_grad():
        mid_image = model.synthesize_view(first.fc, ctx_cams, mid_cam)
    frames3 = torch.stack([frame_a, mid_image, frame_b])
    final = forward(model, frames3, [0, 2], stage)
    return InterpolationResult(
        cameras=[final.cameras[0], final.cameras[2]],
        result=final,
        fallback=False,
        mid_camera=mid_cam,
        mid_image=mid_image,
    )
