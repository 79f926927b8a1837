"""Evaluation: image metrics, relative pose metrics and both protocols.

Ground-truth cameras enter the system only here. The target-aware protocol
feeds context and test frames to the camera network together; the
target-aligned protocol predicts cameras from the context pair alone and
carries the ground-truth test pose into the predicted frame through an
anchored similarity transform, optionally refined by optimizing the test
extrinsics against the splatted render.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .data import DatasetManifest, camera_record_to_tensors, load_gt_cameras, load_gt_depth, load_image, save_image
from .geometry import Extrinsics, Intrinsics, quat_multiply, quat_normalize, quat_to_rotation, rotation_to_quat
from .losses import LossConfig, perceptual_distance
from .model import SceneModel
from .splat import Gaussians2D, gaussians_to_world, rasterize

PSNR_CAP = 99.0


# ------------------------------------------------------------- image metrics

def psnr(pred: Tensor, gt: Tensor) -> float:
    mse = float((pred - gt).pow(2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] @ g[None, :]


def ssim(pred: Tensor, gt: Tensor, window: int = 11, sigma: float = 1.5) -> float:
    """Structural similarity with the canonical 11x11 Gaussian window and
    constants (K1, K2) = (0.01, 0.03) on unit-range images; windows run in
    'valid' mode and channels are averaged."""
    if pred.shape != gt.shape:
        raise ValueError("resolution mismatch")
    C1, C2 = 0.01**2, 0.03**2
    w = _gaussian_window(window, sigma, dtype=torch.float64)[None, None]
    a = pred.double().permute(2, 0, 1)[:, None]  # [C, 1, H, W]
    b = gt.double().permute(2, 0, 1)[:, None]
    conv = lambda x: torch.nn.functional.conv2d(x, w)
    mu_a, mu_b = conv(a), conv(b)
    var_a = conv(a * a) - mu_a**2
    var_b = conv(b * b) - mu_b**2
    cov = conv(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float((num / den).mean())


def image_metrics(pred: Tensor, gt: Tensor) -> tuple[float, float, float]:
    """(PSNR, SSIM, perceptual distance); inputs are [H, W, 3] in [0, 1]."""
    if pred.shape != gt.shape:
        raise ValueError("resolution mismatch")
    return psnr(pred, gt), ssim(pred, gt), float(perceptual_distance(pred.double(), gt.double()))


# -------------------------------------------------------------- pose metrics

def _rotation_angle_deg(R: Tensor) -> float:
    cos = (float(R.diagonal().sum()) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


def relative_pose_errors(
    pred_pair: tuple[Extrinsics, Extrinsics], gt_pair: tuple[Extrinsics, Extrinsics]
) -> tuple[float, float]:
    """Angular errors (degrees) between predicted and true relative poses.

    Relative rotation/translation are expressed in the first camera's frame
    (R_rel = R_a^T R_b, t_rel = R_a^T (t_b - t_a)), which makes both errors
    invariant to any global rigid transform of the predictions and the
    translation error additionally scale-free. Near-zero translations
    (< 1e-8) degenerate: both zero -> 0 degrees, exactly one -> 90.
    """
    def rel(pair):
        Pa, Pb = pair
        Ra = Pa.rotation().double()
        Rb = Pb.rotation().double()
        R = Ra.transpose(0, 1) @ Rb
        t = Ra.transpose(0, 1) @ (Pb.t.double() - Pa.t.double())
        return R, t

    R_pred, t_pred = rel(pred_pair)
    R_gt, t_gt = rel(gt_pair)
    rot_err = _rotation_angle_deg(R_pred @ R_gt.transpose(0, 1))

    n_pred = float(torch.linalg.vector_norm(t_pred))
    n_gt = float(torch.linalg.vector_norm(t_gt))
    if n_pred < 1e-8 and n_gt < 1e-8:
        trans_err = 0.0
    elif n_pred < 1e-8 or n_gt < 1e-8:
        trans_err = 90.0
    else:
        cos = float(torch.dot(t_pred / n_pred, t_gt / n_gt))
        trans_err = math.degrees(math.acos(min(1.0, max(-1.0, cos))))
    return rot_err, trans_err


def angular_accuracy(errors: list[float], threshold: float) -> float:
    """Percentage of pairs with error strictly under the threshold."""
    if not errors:
        return 0.0
    return 100.0 * float(np.mean([e < threshold for e in errors]))


def spearman_rho(a: np.ndarray, b: np.ndarray) -> float:
    """Rank correlation (average ranks for ties)."""
    def ranks(x):
        order = np.argsort(x, kind="mergesort")
        r = np.empty(len(x))
        r[order] = np.arange(len(x), dtype=np.float64)
        # average tied ranks
        vals, inv, counts = np.unique(x, return_inverse=True, return_counts=True)
        sums = np.zeros(len(vals))
        np.add.at(sums, inv, r)
        return sums[inv] / counts[inv]

    ra, rb = ranks(np.asarray(a, dtype=np.float64)), ranks(np.asarray(b, dtype=np.float64))
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float((ra**2).sum()) * float((rb**2).sum()))
    if denom == 0:
        return 0.0
    return float((ra * rb).sum()) / denom


# ----------------------------------------------------------------- alignment

@dataclass
class Similarity:
    """x -> scale * R x + t."""

    scale: float
    q: Tensor  # rotation as a quaternion
    t: Tensor

    def apply_pose(self, P: Extrinsics) -> Extrinsics:
        R = quat_to_rotation(self.q)
        q = quat_multiply(quat_normalize(self.q), quat_normalize(P.q.to(self.q.dtype)))
        t = self.scale * (R @ P.t.to(self.q.dtype)) + self.t
        return Extrinsics(q=q, t=t)

    def apply_gaussians(self, g: Gaussians2D) -> Gaussians2D:
        R = quat_to_rotation(self.q).to(g.mu.dtype)
        mu = self.scale * (g.mu @ R.transpose(0, 1)) + self.t.to(g.mu.dtype)
        quat = quat_multiply(quat_normalize(self.q.to(g.quat.dtype)).expand_as(g.quat), g.quat)
        return Gaussians2D(mu=mu, alpha=g.alpha, quat=quat, scale=g.scale * self.scale, sh=g.sh)


@dataclass
class AlignmentInfo:
    degenerate_gt_baseline: bool
    degenerate_pred_baseline: bool
    residual_rotation_b_deg: float
    residual_position_b: float


def align_target_pose(
    gt_context: tuple[Extrinsics, Extrinsics],
    gt_test: Extrinsics,
    pred_context: tuple[Extrinsics, Extrinsics],
) -> tuple[Extrinsics, Similarity, AlignmentInfo]:
    """Carry the ground-truth test pose into the predicted frame.

    The similarity is fully determined by anchoring context camera A
    exactly (orientation and position) plus the baseline-ratio scale;
    camera B's residual mismatch is reported as a diagnostic. Degenerate
    baselines fall back to unit scale and are flagged.
    """
    gA, gB = gt_context
    pA, pB = pred_context
    gt_base = float(torch.linalg.vector_norm(gB.t.double() - gA.t.double()))
    pred_base = float(torch.linalg.vector_norm(pB.t.double() - pA.t.double()))
    degenerate_gt = gt_base < 1e-8
    degenerate_pred = pred_base < 1e-8
    scale = 1.0 if (degenerate_gt or degenerate_pred) else pred_base / gt_base

    R_s = pA.rotation().double() @ gA.rotation().double().transpose(0, 1)
    q_s = rotation_to_quat(R_s)
    t_s = pA.t.double() - scale * (R_s @ gA.t.double())
    sim = Similarity(scale=scale, q=q_s, t=t_s)

    aligned_b = sim.apply_pose(gB)
    resid_rot = _rotation_angle_deg(aligned_b.rotation() @ pB.rotation().double().transpose(0, 1))
    resid_pos = float(torch.linalg.vector_norm(aligned_b.t - pB.t.double()))
    info = AlignmentInfo(
        degenerate_gt_baseline=degenerate_gt,
        degenerate_pred_baseline=degenerate_pred,
        residual_rotation_b_deg=resid_rot,
        residual_position_b=resid_pos,
    )
    return sim.apply_pose(gt_test), sim, info


# ---------------------------------------------------------------- refinement

@dataclass
class RefineInfo:
    steps: int
    initial_loss: float
    final_loss: float
    fell_back: bool


def refine_test_pose(
    gaussians: Gaussians2D,
    K: Intrinsics,
    test_image: Tensor,
    init_pose: Extrinsics,
    iterations: int = 40,
    lr: float = 1e-3,
    lambda_perc: float = 0.5,
) -> tuple[Extrinsics, RefineInfo]:
    """Optimize only the test-view extrinsics against the splatted render.

    A 6-dof tangent increment (first-order quaternion retraction) is
    optimized for exactly ``iterations`` adaptive steps; if the final loss
    exceeds the initial one the initial pose is returned unchanged.
    """
    g = Gaussians2D(
        mu=gaussians.mu.detach().double(), alpha=gaussians.alpha.detach().double(),
        quat=gaussians.quat.detach().double(), scale=gaussians.scale.detach().double(),
        sh=gaussians.sh.detach().double(),
    )
    q0 = quat_normalize(init_pose.q.detach().double())
    t0 = init_pose.t.detach().double()
    delta_w = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    delta_t = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    H, W = test_image.shape[0], test_image.shape[1]
    target = test_image.double()

    def pose_of() -> Extrinsics:
        one = torch.ones(1, dtype=torch.float64)
        dq = quat_normalize(torch.cat([one, 0.5 * delta_w]))
        return Extrinsics(q=quat_multiply(dq, q0), t=t0 + delta_t)

    def loss_of() -> Tensor:
        out = rasterize(g, K, pose_of(), H, W)
        return (out.color - target).pow(2).mean() + lambda_perc * perceptual_distance(out.color, target)

    with torch.no_grad():
        initial = float(loss_of())
    opt = torch.optim.Adam([delta_w, delta_t], lr=lr)
    steps = 0
    for _ in range(iterations):
        opt.zero_grad()
        loss = loss_of()
        loss.backward()
        opt.step()
        steps += 1
    with torch.no_grad():
        final = float(loss_of())
    if final <= initial:
        refined = pose_of()
        return Extrinsics(q=refined.q.detach(), t=refined.t.detach()), RefineInfo(
            steps=steps, initial_loss=initial, final_loss=final, fell_back=False
        )
    return init_pose, RefineInfo(steps=steps, initial_loss=initial, final_loss=final, fell_back=True)


# ----------------------------------------------------------------- protocols

@dataclass
class EvalCase:
    """Two context frames, one test frame, ground truth for all three."""

    context_images: Tensor  # [2, H, W, 3]
    test_image: Tensor  # [H, W, 3]
    gt_cameras: list[tuple[Intrinsics, Extrinsics]]  # [ctx_a, ctx_b, test]
    gt_test_depth: np.ndarray | None = None
    case_id: str = ""


@dataclass
class CaseResult:
    case_id: str
    psnr_latent: float
    ssim_latent: float
    perc_latent: float
    psnr_splat: float | None
    ssim_splat: float | None
    perc_splat: float | None
    rotation_error_deg: float
    translation_error_deg: float
    depth_spearman: float | None = None
    refine: RefineInfo | None = None


@dataclass
class EvalReport:
    protocol: str
    results: list[CaseResult] = field(default_factory=list)

    def _mean(self, key: str) -> float | None:
        vals = [getattr(r, key) for r in self.results if getattr(r, key) is not None]
        return float(np.mean(vals)) if vals else None

    def summary(self) -> dict:
        rot = [r.rotation_error_deg for r in self.results]
        trans = [r.translation_error_deg for r in self.results]
        return {
            "protocol": self.protocol,
            "cases": len(self.results),
            "psnr_latent": self._mean("psnr_latent"),
            "ssim_latent": self._mean("ssim_latent"),
            "perceptual_latent": self._mean("perc_latent"),
            "psnr_splat": self._mean("psnr_splat"),
            "ssim_splat": self._mean("ssim_splat"),
            "perceptual_splat": self._mean("perc_splat"),
            "rra_5": angular_accuracy(rot, 5.0),
            "rra_15": angular_accuracy(rot, 15.0),
            "rta_5": angular_accuracy(trans, 5.0),
            "rta_15": angular_accuracy(trans, 15.0),
            "median_rotation_error_deg": float(np.median(rot)) if rot else None,
            "median_translation_error_deg": float(np.median(trans)) if trans else None,
        }

    def save_json(self, path: str | Path) -> None:
        payload = {
            "summary": self.summary(),
            "cases": [
                {
                    "case_id": r.case_id,
                    "psnr_latent": r.psnr_latent,
                    "ssim_latent": r.ssim_latent,
                    "perceptual_latent": r.perc_latent,
                    "psnr_splat": r.psnr_splat,
                    "ssim_splat": r.ssim_splat,
                    "perceptual_splat": r.perc_splat,
                    "rotation_error_deg": r.rotation_error_deg,
                    "translation_error_deg": r.translation_error_deg,
                    "depth_spearman": r.depth_spearman,
                }
                for r in self.results
            ],
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["case_id", "rotation_error_deg", "translation_error_deg"])
            for r in self.results:
                writer.writerow([r.case_id, f"{r.rotation_error_deg:.6f}", f"{r.translation_error_deg:.6f}"])


def splat_scene_from_context(
    model: SceneModel, raw: Tensor, cams: list, indices: list[int]
) -> tuple[Gaussians2D, list[Tensor]]:
    """Decode per-frame surfel maps and merge them in the world frame."""
    parts = []
    depths = []
    for m, idx in enumerate(indices):
        K, P = cams[idx]
        g_cam, depth = model.decode_gaussians(raw[m], K)
        parts.append(gaussians_to_world(g_cam, P))
        depths.append(depth)
    return Gaussians2D.cat(parts), depths


def run_target_aware(model: SceneModel, case: EvalCase, stage: int) -> CaseResult:
    """Cameras predicted from context + test jointly; context features from
    the context pair alone; the test view rendered at its own predicted
    camera by both renderers."""
    frames = torch.cat([case.context_images, case.test_image[None]])
    with torch.no_grad():
        fs = model.per_frame_features(frames)
        cams = model.predict_cameras(fs)
        fc, raw = model.predict_context(fs[:2])
        ctx_cams = [cams[0], cams[1]]
        latent = model.synthesize_view(fc, ctx_cams, cams[2])
        p_l, s_l, d_l = image_metrics(latent, case.test_image)
        p_s = s_s = d_s = None
        depth_rho = None
        if stage >= 2:
            scene, _ = splat_scene_from_context(model, raw, cams, [0, 1])
            out = rasterize(scene, cams[2][0], cams[2][1], frames.shape[1], frames.shape[2])
            p_s, s_s, d_s = image_metrics(out.color, case.test_image)
            if case.gt_test_depth is not None:
                covered = out.alpha.numpy() > 0.5
                if covered.sum() >= 16:
                    depth_rho = spearman_rho(
                        out.depth.numpy()[covered], case.gt_test_depth[covered]
                    )
    rot_err, trans_err = relative_pose_errors(
        (cams[0][1], cams[1][1]), (case.gt_cameras[0][1], case.gt_cameras[1][1])
    )
    return CaseResult(
        case_id=case.case_id,
        psnr_latent=p_l, ssim_latent=s_l, perc_latent=d_l,
        psnr_splat=p_s, ssim_splat=s_s, perc_splat=d_s,
        rotation_error_deg=rot_err, translation_error_deg=trans_err,
        depth_spearman=depth_rho,
    )


def run_target_aligned(
    model: SceneModel, case: EvalCase, stage: int, refine: bool = False, refine_iters: int = 40
) -> CaseResult:
    """Cameras predicted from the context pair alone; the ground-truth test
    pose is aligned into the predicted frame (optionally refined against
    the splatted render) before rendering."""
    frames = case.context_images
    with torch.no_grad():
        fs = model.per_frame_features(frames)
        cams = model.predict_cameras(fs)
        fc, raw = model.predict_context(fs)  # both frames: inference-time context
    aligned, _, _ = align_target_pose(
        (case.gt_cameras[0][1], case.gt_cameras[1][1]),
        case.gt_cameras[2][1],
        (cams[0][1], cams[1][1]),
    )
    H, W = frames.shape[1], frames.shape[2]
    refine_info = None
    with torch.no_grad():
        scene = None
        if stage >= 2:
            scene, _ = splat_scene_from_context(model, raw, cams, [0, 1])
    if refine:
        if stage < 2:
            raise ValueError("pose refinement needs the splat renderer (stage 2)")
        aligned, refine_info = refine_test_pose(
            scene, cams[0][0], case.test_image, aligned, iterations=refine_iters
        )
    with torch.no_grad():
        latent = model.synthesize_view(fc, cams, (cams[0][0], aligned))
        p_l, s_l, d_l = image_metrics(latent, case.test_image)
        p_s = s_s = d_s = None
        depth_rho = None
        if stage >= 2:
            out = rasterize(scene, cams[0][0], aligned, H, W)
            p_s, s_s, d_s = image_metrics(out.color, case.test_image)
            if case.gt_test_depth is not None:
                covered = out.alpha.numpy() > 0.5
                if covered.sum() >= 16:
                    depth_rho = spearman_rho(out.depth.numpy()[covered], case.gt_test_depth[covered])
    rot_err, trans_err = relative_pose_errors(
        (cams[0][1], cams[1][1]), (case.gt_cameras[0][1], case.gt_cameras[1][1])
    )
    return CaseResult(
        case_id=case.case_id,
        psnr_latent=p_l, ssim_latent=s_l, perc_latent=d_l,
        psnr_splat=p_s, ssim_splat=s_s, perc_splat=d_s,
        rotation_error_deg=rot_err, translation_error_deg=trans_err,
        depth_spearman=depth_rho, refine=refine_info,
    )


# -------------------------------------------------------------- case loading

def build_eval_cases(
    manifest: DatasetManifest,
    context_gap: int = 4,
    max_cases: int | None = None,
    split: str | None = None,
) -> list[EvalCase]:
    """Context frames (i, i + gap) with the middle frame as the test view,
    one case per clip window."""
    cases = []
    clips = manifest.clips if split is None else manifest.subset(split)
    for clip in clips:
        if clip.cameras is None:
            continue
        records = load_gt_cameras(manifest, clip)
        depth = load_gt_depth(manifest, clip) if clip.depth is not None else None
        n = len(clip.frames)
        for start in range(0, n - context_gap, context_gap):
            a, b = start, start + context_gap
            t = start + context_gap // 2
            if t in (a, b):
                continue
            images = [load_image(manifest.root / clip.frames[k]) for k in (a, b, t)]
            cases.append(
                EvalCase(
                    context_images=torch.stack(images[:2]),
                    test_image=images[2],
                    gt_cameras=[camera_record_to_tensors(records[k]) for k in (a, b, t)],
                    gt_test_depth=None if depth is None else depth[t],
                    case_id=f"{clip.clip_id}:{a}-{b}/{t}",
                )
            )
            if max_cases is not None and len(cases) >= max_cases:
                return cases
    return cases


def save_comparison_grid(
    path: str | Path, gt: Tensor, latent: Tensor, splat: Tensor | None
) -> None:
    """Side-by-side GT | latent render | splat render panel."""
    panels = [gt, latent] + ([splat] if splat is not None else [])
    save_image(torch.cat(panels, dim=1), path)
