"""Synthetic room scenes with ground-truth cameras and depth.

Scenes are closed boxes whose faces carry smooth procedural textures, plus
a few floating textured rectangles for parallax. A tiny analytic
ray-caster renders frames along a smooth spline trajectory, which makes
per-pixel ground-truth depth available for oracle tests. Ground truth is
written next to the frames but is only ever consumed by evaluation code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import rotation_to_quat

import torch


class GenerationError(RuntimeError):
    """Scene generation kept failing the texture-coverage check."""


@dataclass
class TexturedRect:
    """Planar patch: points are center + a*ex + b*ey for a, b in [-1, 1]."""

    center: np.ndarray
    ex: np.ndarray
    ey: np.ndarray
    base: np.ndarray  # [3]
    amp: np.ndarray  # [3]
    freq: np.ndarray  # [3, 2]
    phase: np.ndarray  # [3, 2]
    grad: np.ndarray  # [3, 2]

    def normal(self) -> np.ndarray:
        n = np.cross(self.ex, self.ey)
        return n / np.linalg.norm(n)

    def color(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Smooth Lambertian texture at local coords a, b (arrays)."""
        out = np.empty(a.shape + (3,))
        for c in range(3):
            wave = self.amp[c] * np.sin(self.freq[c, 0] * a + self.phase[c, 0]) * np.sin(
                self.freq[c, 1] * b + self.phase[c, 1]
            )
            out[..., c] = self.base[c] + wave + self.grad[c, 0] * a + self.grad[c, 1] * b
        return np.clip(out, 0.0, 1.0)


@dataclass
class GeneratorConfig:
    n_clips: int = 5
    frames_per_clip: int = 8
    height: int = 64
    width: int = 64
    focal_factor: float = 0.8  # focal = factor * max(H, W)
    room_half: tuple[float, float] = (2.2, 3.2)
    n_floaters: tuple[int, int] = (3, 6)
    texture_amp: tuple[float, float] = (0.1, 0.25)
    eye_radius: float = 0.9  # control-point spread around the room center
    target_jitter: float = 0.6
    min_texture_fraction: float = 0.3
    texture_threshold: float = 0.02
    max_rotation_per_frame: float = 25.0  # degrees
    max_translation_per_frame: float = 0.7
    max_retries: int = 10
    split: str = "train"


def _random_texture(rng: np.random.Generator, amp: tuple[float, float]) -> dict:
    return dict(
        base=rng.uniform(0.25, 0.75, 3),
        amp=rng.uniform(*amp, 3),
        freq=rng.uniform(1.5, 4.5, (3, 2)),
        phase=rng.uniform(0, 2 * np.pi, (3, 2)),
        grad=rng.uniform(-0.12, 0.12, (3, 2)),
    )


def build_scene(rng: np.random.Generator, cfg: GeneratorConfig) -> list[TexturedRect]:
    """Room shell (6 textured faces) plus floating textured rectangles."""
    half = rng.uniform(*cfg.room_half)
    rects = []
    axes = np.eye(3)
    for dim in range(3):
        for sign in (-1.0, 1.0):
            n = axes[dim] * sign
            u = axes[(dim + 1) % 3]
            v = axes[(dim + 2) % 3]
            # oversize faces slightly so corners stay watertight
            rects.append(
                TexturedRect(
                    center=-n * half,
                    ex=u * (half * 1.05),
                    ey=v * (half * 1.05),
                    **_random_texture(rng, cfg.texture_amp),
                )
            )
    for _ in range(rng.integers(cfg.n_floaters[0], cfg.n_floaters[1] + 1)):
        center = rng.uniform(-0.6 * half, 0.6 * half, 3)
        # keep floaters away from the camera region in the middle
        center *= np.where(np.abs(center) < 0.9, 1.7, 1.0)
        e1 = rng.normal(size=3)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(e1, rng.normal(size=3))
        e2 /= np.linalg.norm(e2)
        size = rng.uniform(0.35, 1.0, 2)
        rects.append(
            TexturedRect(
                center=center, ex=e1 * size[0], ey=e2 * size[1],
                **_random_texture(rng, cfg.texture_amp),
            )
        )
    return rects


def catmull_rom(points: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Centripetal-free Catmull-Rom through control points, ts in [0, 1]."""
    pts = np.concatenate([points[:1], points, points[-1:]], axis=0)
    n_seg = len(points) - 1
    out = np.empty((len(ts), points.shape[1]))
    for i, t in enumerate(ts):
        x = min(t * n_seg, n_seg - 1e-9)
        seg = int(x)
        u = x - seg
        p0, p1, p2, p3 = pts[seg], pts[seg + 1], pts[seg + 2], pts[seg + 3]
        out[i] = 0.5 * (
            2 * p1
            + (-p0 + p2) * u
            + (2 * p0 - 5 * p1 + 4 * p2 - p3) * u**2
            + (-p0 + 3 * p1 - 3 * p2 + p3) * u**3
        )
    return out


def look_at_rotation(eye: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with +z forward toward the target."""
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(up + np.array([0.13, 0.02, 0.21]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def _motion_extremes(eyes: np.ndarray, rotations: np.ndarray) -> tuple[float, float]:
    max_angle = 0.0
    max_step = 0.0
    for i in range(1, len(eyes)):
        rel = rotations[i - 1].T @ rotations[i]
        angle = np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1)))
        max_angle = max(max_angle, float(angle))
        max_step = max(max_step, float(np.linalg.norm(eyes[i] - eyes[i - 1])))
    return max_angle, max_step


def sample_trajectory(
    rng: np.random.Generator, cfg: GeneratorConfig, n_frames: int
) -> tuple[np.ndarray, np.ndarray]:
    """Smooth eye path and per-frame rotations (both camera-to-world).

    The control polygon is shrunk until the per-frame rotation and
    translation stay within the configured bounds.
    """
    n_ctrl = 4
    eyes_ctrl = rng.uniform(-cfg.eye_radius, cfg.eye_radius, (n_ctrl, 3))
    targets_ctrl = rng.uniform(-cfg.target_jitter, cfg.target_jitter, (3, 3))
    # look roughly across the room so textured walls stay in view
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    targets_ctrl += direction * 1.8
    ts = np.linspace(0, 1, n_frames)
    up = np.array([0.0, 1.0, 0.0])
    for _ in range(12):
        eyes = catmull_rom(eyes_ctrl, ts)
        targets = catmull_rom(targets_ctrl, ts)
        rotations = np.stack([look_at_rotation(e, t, up) for e, t in zip(eyes, targets)])
        max_angle, max_step = _motion_extremes(eyes, rotations)
        excess = max(max_angle / cfg.max_rotation_per_frame, max_step / cfg.max_translation_per_frame)
        if excess <= 1.0:
            break
        shrink = 0.9 / excess
        eyes_ctrl = eyes_ctrl.mean(0) + (eyes_ctrl - eyes_ctrl.mean(0)) * shrink
        targets_ctrl = targets_ctrl.mean(0) + (targets_ctrl - targets_ctrl.mean(0)) * shrink
    return eyes, rotations


def render_frame(
    rects: list[TexturedRect],
    R: np.ndarray,
    t: np.ndarray,
    fx: float,
    fy: float,
    H: int,
    W: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Ray-cast one view; returns (image [H, W, 3], depth [H, W]).

    Rays are parameterized as p = t + tau * (R K^-1 [u v 1]), so tau is the
    camera-frame depth and matches the projection conventions exactly.
    """
    u, v = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    rays_cam = np.stack([(u - W / 2) / fx, (v - H / 2) / fy, np.ones_like(u)], axis=-1)
    dirs = rays_cam @ R.T  # [H, W, 3]

    best_tau = np.full((H, W), np.inf)
    image = np.zeros((H, W, 3))
    for rect in rects:
        n = rect.normal()
        denom = dirs @ n
        denom = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        tau = ((rect.center - t) @ n) / denom
        offset = t + tau[..., None] * dirs - rect.center
        a = offset @ rect.ex / (rect.ex @ rect.ex)
        b = offset @ rect.ey / (rect.ey @ rect.ey)
        hit = (tau > 1e-4) & (np.abs(a) <= 1) & (np.abs(b) <= 1) & (tau < best_tau)
        if not hit.any():
            continue
        color = rect.color(a[hit], b[hit])
        image[hit] = color
        best_tau = np.where(hit, tau, best_tau)
    depth = np.where(np.isfinite(best_tau), best_tau, 0.0)
    return image, depth


def texture_fraction(image: np.ndarray, threshold: float) -> float:
    """Fraction of pixels with visible local contrast."""
    gx = np.abs(np.diff(image, axis=1)).sum(-1)
    gy = np.abs(np.diff(image, axis=0)).sum(-1)
    lively = np.zeros(image.shape[:2], dtype=bool)
    lively[:, :-1] |= gx > threshold
    lively[:, 1:] |= gx > threshold
    lively[:-1] |= gy > threshold
    lively[1:] |= gy > threshold
    return float(lively.mean())


@dataclass
class ClipData:
    images: np.ndarray  # [N, H, W, 3] float in [0, 1]
    depths: np.ndarray  # [N, H, W]
    rotations: np.ndarray  # [N, 3, 3] camera-to-world
    translations: np.ndarray  # [N, 3]
    fx: float
    fy: float


def generate_clip(rng: np.random.Generator, cfg: GeneratorConfig) -> ClipData:
    """Sample scene + trajectory until every frame passes the checks."""
    H, W = cfg.height, cfg.width
    fx = fy = cfg.focal_factor * max(H, W)
    for _ in range(cfg.max_retries):
        rects = build_scene(rng, cfg)
        eyes, rotations = sample_trajectory(rng, cfg, cfg.frames_per_clip)

        # bounded per-frame motion
        ok = True
        for i in range(1, cfg.frames_per_clip):
            rel = rotations[i - 1].T @ rotations[i]
            angle = np.degrees(np.arccos(np.clip((np.trace(rel) - 1) / 2, -1, 1)))
            step = np.linalg.norm(eyes[i] - eyes[i - 1])
            if angle > cfg.max_rotation_per_frame or step > cfg.max_translation_per_frame:
                ok = False
                break
        if not ok:
            continue

        images = np.empty((cfg.frames_per_clip, H, W, 3))
        depths = np.empty((cfg.frames_per_clip, H, W))
        for i in range(cfg.frames_per_clip):
            images[i], depths[i] = render_frame(rects, rotations[i], eyes[i], fx, fy, H, W)
            if texture_fraction(images[i], cfg.texture_threshold) < cfg.min_texture_fraction:
                ok = False
                break
            if float(depths[i].min()) <= 0:
                ok = False  # ray escaped the room shell
                break
        if ok:
            return ClipData(
                images=images, depths=depths, rotations=rotations, translations=eyes, fx=fx, fy=fy
            )
    raise GenerationError(f"no valid clip after {cfg.max_retries} retries")


def camera_records(clip: ClipData, H: int, W: int) -> list[dict]:
    """Per-frame ground-truth camera entries for cameras.json."""
    records = []
    for R, t in zip(clip.rotations, clip.translations):
        q = rotation_to_quat(torch.tensor(R)).numpy()
        records.append(
            {
                "fx": clip.fx,
                "fy": clip.fy,
                "width": W,
                "height": H,
                "q": [float(x) for x in q],
                "t": [float(x) for x in t],
            }
        )
    return records


def generate_dataset(out_dir: str | Path, cfg: GeneratorConfig, seed: int) -> Path:
    """Write clips, ground-truth cameras/depth and a manifest; deterministic
    per seed. Returns the manifest path."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    clips_meta = []
    for ci in range(cfg.n_clips):
        clip = generate_clip(rng, cfg)
        clip_dir = out_dir / f"clip_{ci:04d}"
        clip_dir.mkdir(exist_ok=True)
        frame_paths = []
        for fi in range(clip.images.shape[0]):
            img8 = np.clip(np.round(clip.images[fi] * 255), 0, 255).astype(np.uint8)
            path = clip_dir / f"frame_{fi:03d}.png"
            Image.fromarray(img8).save(path)
            frame_paths.append(str(path.relative_to(out_dir)))
        cam_path = clip_dir / "cameras.json"
        cam_path.write_text(
            json.dumps(camera_records(clip, cfg.height, cfg.width), indent=2) + "\n"
        )
        depth_path = clip_dir / "depth.npy"
        np.save(depth_path, clip.depths.astype(np.float32))
        clips_meta.append(
            {
                "id": f"clip_{ci:04d}",
                "frames": frame_paths,
                "cameras": str(cam_path.relative_to(out_dir)),
                "depth": str(depth_path.relative_to(out_dir)),
                "split": cfg.split,
            }
        )
    manifest = {
        "schema_version": 1,
        "resolution": [cfg.height, cfg.width],
        "clips": clips_meta,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path
