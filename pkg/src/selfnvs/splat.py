"""Oriented 2D Gaussian surfels and a differentiable CPU rasterizer.

A surfel is a planar elliptical Gaussian: center ``mu``, orientation
quaternion ``q`` (columns 1/2 of R(q) span the disk, column 3 is the
normal), anisotropic in-plane scales ``s``, opacity ``alpha`` and
spherical-harmonic color coefficients.

Rendering intersects each pixel ray with the surfel plane, evaluates the
Gaussian at the local in-plane coordinates and alpha-composites
front-to-back in primitive-center depth order. Everything is autograd
friendly: gradients flow to all primitive fields and to the target pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from torch import Tensor

from .geometry import (
    BEHIND_CAMERA_EPS,
    Extrinsics,
    Intrinsics,
    pixel_grid,
    quat_multiply,
    quat_normalize,
    quat_to_rotation,
    unproject_rays,
)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

# local-frame cutoff: contributions beyond 3 sigma are dropped
CUTOFF_R2 = 9.0
ALPHA_EPS = 1e-8

# compile the per-chunk compositing kernel once workloads get large enough
# to amortize the warmup; small or float64 calls stay eager
COMPILE_THRESHOLD = 1 << 19
_compiled_chunk = None
_compile_failed = False


@dataclass
class Gaussians2D:
    """A batch of surfel primitives.

    mu: [P, 3] centers; alpha: [P] opacities in [0, 1]; quat: [P, 4]
    orientations (w, x, y, z); scale: [P, 2] positive in-plane extents;
    sh: [P, (deg+1)^2, 3] color coefficients.
    """

    mu: Tensor
    alpha: Tensor
    quat: Tensor
    scale: Tensor
    sh: Tensor

    def __post_init__(self):
        P = self.mu.shape[0]
        if self.mu.shape != (P, 3) or self.alpha.shape != (P,) or self.quat.shape != (P, 4):
            raise ValueError("inconsistent primitive tensor shapes")
        if self.scale.shape != (P, 2) or self.sh.ndim != 3 or self.sh.shape[0] != P or self.sh.shape[2] != 3:
            raise ValueError("inconsistent primitive tensor shapes")
        n_coeffs = self.sh.shape[1]
        if n_coeffs not in (1, 4):
            raise ValueError(f"unsupported SH coefficient count {n_coeffs} (degree 0 or 1)")
        if P:
            # slack admits finite-difference probes of boundary opacities
            with torch.no_grad():
                if float(self.alpha.min()) < -1e-3 or float(self.alpha.max()) > 1 + 1e-3:
                    raise ValueError("opacity outside [0, 1]")
                if float(self.scale.min()) <= 0:
                    raise ValueError("scales must be positive")

    @property
    def count(self) -> int:
        return self.mu.shape[0]

    @property
    def sh_degree(self) -> int:
        return 0 if self.sh.shape[1] == 1 else 1

    @classmethod
    def empty(cls, sh_degree: int = 0, dtype: torch.dtype = torch.float32) -> "Gaussians2D":
        n = (sh_degree + 1) ** 2
        return cls(
            mu=torch.zeros(0, 3, dtype=dtype),
            alpha=torch.zeros(0, dtype=dtype),
            quat=torch.zeros(0, 4, dtype=dtype),
            scale=torch.zeros(0, 2, dtype=dtype),
            sh=torch.zeros(0, n, 3, dtype=dtype),
        )

    @classmethod
    def cat(cls, parts: list["Gaussians2D"]) -> "Gaussians2D":
        parts = [p for p in parts if p.count > 0]
        if not parts:
            return cls.empty()
        return cls(
            mu=torch.cat([p.mu for p in parts]),
            alpha=torch.cat([p.alpha for p in parts]),
            quat=torch.cat([p.quat for p in parts]),
            scale=torch.cat([p.scale for p in parts]),
            sh=torch.cat([p.sh for p in parts]),
        )


@dataclass
class RenderOutput:
    """color: [H, W, 3] in [0, 1]; depth: [H, W]; alpha: [H, W] in [0, 1].

    Pixels with zero accumulated opacity carry the (black) background color
    and zero depth.
    """

    color: Tensor
    depth: Tensor
    alpha: Tensor


def sh_from_rgb(rgb, degree: int = 0) -> Tensor:
    """DC coefficients reproducing a constant RGB color under eval_sh."""
    rgb = torch.as_tensor(rgb, dtype=torch.float64)
    n = (degree + 1) ** 2
    sh = torch.zeros(n, 3, dtype=rgb.dtype)
    sh[0] = (rgb - 0.5) / SH_C0
    return sh


def eval_sh(sh: Tensor, view_dir: Tensor) -> Tensor:
    """Evaluate real spherical harmonics: sh [P, n, 3], view_dir [P, 3] unit.

    Degree 0 (n=1) is direction independent; degree 1 (n=4) adds the three
    linear bands. Returns unclamped RGB [P, 3]; the rasterizer clamps to
    [0, 1] when compositing.
    """
    n = sh.shape[1]
    if n not in (1, 4):
        raise ValueError(f"unsupported SH coefficient count {n}")
    rgb = 0.5 + SH_C0 * sh[:, 0]
    if n == 4:
        x, y, z = view_dir[:, 0:1], view_dir[:, 1:2], view_dir[:, 2:3]
        rgb = rgb - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
    return rgb


def gaussians_to_world(g: Gaussians2D, P: Extrinsics) -> Gaussians2D:
    """Rigidly move camera-frame primitives into the world frame.

    Centers follow the camera-to-world map; orientations are composed with
    the pose quaternion. Opacity, scales and SH coefficients are untouched
    (view directions for SH are evaluated in the world frame downstream).
    """
    R = P.rotation().to(g.mu.dtype)
    mu_w = g.mu @ R.transpose(0, 1) + P.t.to(g.mu.dtype)
    q_pose = quat_normalize(P.q.to(g.quat.dtype))
    quat_w = quat_multiply(q_pose.expand_as(g.quat), g.quat)
    return Gaussians2D(mu=mu_w, alpha=g.alpha, quat=quat_w, scale=g.scale, sh=g.sh)


def _cull_mask(g: Gaussians2D, K: Intrinsics, R: Tensor, t: Tensor, H: int, W: int) -> Tensor:
    """Conservative visibility mask (no_grad): center in front of the camera
    and the 3-sigma bounding disk not provably outside the image."""
    with torch.no_grad():
        cam = (g.mu - t) @ R  # [P, 3]
        z = cam[:, 2]
        keep = z > BEHIND_CAMERA_EPS
        margin = 3.0 * g.scale.max(dim=1).values
        z_near = z - margin
        safe = z_near > 1e-6
        zs = torch.where(safe, z_near, torch.ones_like(z_near))
        r_px = margin * torch.maximum(K.fx, K.fy).to(zs.dtype) / zs
        u = cam[:, 0] / z.clamp(min=1e-9) * K.fx + K.cx
        v = cam[:, 1] / z.clamp(min=1e-9) * K.fy + K.cy
        inside = (u + r_px >= 0) & (u - r_px <= W - 1) & (v + r_px >= 0) & (v - r_px <= H - 1)
        keep &= torch.where(safe, inside, torch.ones_like(inside))
    return keep


def _chunk_composite(
    v: Tensor,  # [HW, 3] pixel rays (z = 1 in the camera frame)
    n_t: Tensor,  # [3, Pc] surfel normals, transposed
    r1_t: Tensor,  # [3, Pc] first tangent
    r2_t: Tensor,  # [3, Pc] second tangent
    a_num: Tensor,  # [Pc] n . (mu - o)
    om_r1: Tensor,  # [Pc] (mu - o) . r1
    om_r2: Tensor,  # [Pc]
    s0: Tensor,  # [Pc]
    s1: Tensor,  # [Pc]
    alpha: Tensor,  # [Pc]
    colors: Tensor,  # [Pc, 3]
    log_trans: Tensor,  # [HW] incoming log-transmittance
):
    """Front-to-back compositing of one sorted primitive chunk.

    Transmittance runs in log space: the exclusive prefix product becomes
    exp(cumsum(log1p(-w)) - log1p(-w)), whose backward is a cheap reversed
    cumsum (a cumprod here makes the compiled backward the bottleneck).
    Weights are capped at 1 - 1e-7 so fully opaque primitives stay finite.
    """
    vn = v @ n_t
    denom = torch.where(vn.abs() > 1e-9, vn, torch.full_like(vn, 1e-9))
    tau = (a_num[None, :] / denom).clamp(-1e6, 1e6)
    d1 = (tau * (v @ r1_t) - om_r1[None, :]) / s0[None, :]
    d2 = (tau * (v @ r2_t) - om_r2[None, :]) / s1[None, :]
    rr = d1 * d1 + d2 * d2
    gauss = torch.exp(-0.5 * rr)
    visible = (vn.abs() > 1e-9) & (tau > BEHIND_CAMERA_EPS) & (rr <= CUTOFF_R2)
    w_solo = torch.where(visible, alpha[None, :] * gauss, torch.zeros_like(gauss))
    log_one_minus = torch.log1p(-w_solo.clamp(max=1.0 - 1e-7))
    log_t_excl = torch.cumsum(log_one_minus, dim=1) - log_one_minus
    w = w_solo * torch.exp(log_t_excl + log_trans[:, None])
    color_inc = w @ colors
    depth_inc = (w * tau).sum(dim=1)
    alpha_inc = w.sum(dim=1)
    log_trans_out = log_trans + log_one_minus.sum(dim=1)
    return color_inc, depth_inc, alpha_inc, log_trans_out


def _chunk_kernel(numel: int, dtype: torch.dtype):
    """Pick the eager or compiled compositing kernel for this workload."""
    global _compiled_chunk, _compile_failed
    if dtype != torch.float32 or numel < COMPILE_THRESHOLD or _compile_failed:
        return _chunk_composite
    if _compiled_chunk is None:
        try:
            _compiled_chunk = torch.compile(_chunk_composite, dynamic=True)
        except Exception:  # pragma: no cover - backend-dependent
            _compile_failed = True
            return _chunk_composite
    return _compiled_chunk


def rasterize(
    g: Gaussians2D,
    K: Intrinsics,
    P_target: Extrinsics,
    H: int,
    W: int,
    chunk_size: int = 1024,
) -> RenderOutput:
    """Render world-frame surfels into the target camera.

    Primitives are sorted front-to-back by center depth (ties broken by
    input index) and composited per pixel with weights
    ``w_i = alpha_i G_i prod_{j<i}(1 - alpha_j G_j)``. Depth is the
    opacity-normalized expected ray depth; background is black with zero
    depth and zero alpha.
    """
    dtype = g.mu.dtype if g.count else torch.float32
    if g.count == 0:
        return RenderOutput(
            color=torch.zeros(H, W, 3, dtype=dtype),
            depth=torch.zeros(H, W, dtype=dtype),
            alpha=torch.zeros(H, W, dtype=dtype),
        )

    R_cam = P_target.rotation().to(dtype)
    o = P_target.t.to(dtype)

    keep = _cull_mask(g, K, R_cam, o, H, W)
    idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
    if idx.numel() == 0:
        return RenderOutput(
            color=torch.zeros(H, W, 3, dtype=dtype),
            depth=torch.zeros(H, W, dtype=dtype),
            alpha=torch.zeros(H, W, dtype=dtype),
        )

    mu = g.mu[idx]
    alpha = g.alpha[idx]
    scale = g.scale[idx]
    sh = g.sh[idx]
    R_prim = quat_to_rotation(g.quat[idx])  # [P, 3, 3]

    # front-to-back order by center depth in the target camera
    with torch.no_grad():
        z_center = ((mu - o) @ R_cam)[:, 2]
        order = torch.argsort(z_center, stable=True)
    mu, alpha, scale, sh, R_prim = mu[order], alpha[order], scale[order], sh[order], R_prim[order]

    # pixel rays: p = o + tau * v with v = R K^-1 [u v 1]; tau equals the
    # camera-frame depth of p because the camera-frame ray has z = 1
    rays_cam = unproject_rays(pixel_grid(H, W, dtype=dtype), K).to(dtype)
    v = (rays_cam @ R_cam.transpose(0, 1)).reshape(-1, 3)  # [HW, 3]

    r1 = R_prim[:, :, 0]  # [P, 3] unit tangent
    r2 = R_prim[:, :, 1]
    n = R_prim[:, :, 2]  # normal
    om = mu - o  # [P, 3] camera center to primitive center
    a_num = (om * n).sum(-1)  # [P]
    om_r1 = (om * r1).sum(-1)
    om_r2 = (om * r2).sum(-1)

    view_dir = om / torch.linalg.vector_norm(om, dim=-1, keepdim=True).clamp(min=1e-12)
    colors = eval_sh(sh, view_dir).clamp(0.0, 1.0)  # [P, 3]

    HW = H * W
    color_acc = torch.zeros(HW, 3, dtype=dtype)
    depth_acc = torch.zeros(HW, dtype=dtype)
    alpha_acc = torch.zeros(HW, dtype=dtype)
    trans = torch.zeros(HW, dtype=dtype)  # log-transmittance

    P_total = mu.shape[0]
    for start in range(0, P_total, chunk_size):
        end = min(start + chunk_size, P_total)
        kernel = _chunk_kernel(HW * (end - start), dtype)
        color_inc, depth_inc, alpha_inc, trans = kernel(
            v,
            n[start:end].transpose(0, 1).contiguous(),
            r1[start:end].transpose(0, 1).contiguous(),
            r2[start:end].transpose(0, 1).contiguous(),
            a_num[start:end],
            om_r1[start:end],
            om_r2[start:end],
            scale[start:end, 0],
            scale[start:end, 1],
            alpha[start:end],
            colors[start:end],
            trans,
        )
        color_acc = color_acc + color_inc
        depth_acc = depth_acc + depth_inc
        alpha_acc = alpha_acc + alpha_inc

    depth = depth_acc / alpha_acc.clamp(min=ALPHA_EPS)
    return RenderOutput(
        color=color_acc.reshape(H, W, 3),
        depth=depth.reshape(H, W),
        alpha=alpha_acc.reshape(H, W),
    )


def _render_scalar_probe(
    params: dict[str, Tensor], K: Intrinsics, H: int, W: int, probes: dict[str, Tensor]
) -> Tensor:
    g = Gaussians2D(
        mu=params["mu"], alpha=params["alpha"], quat=params["quat"],
        scale=params["scale"], sh=params["sh"],
    )
    pose = Extrinsics(q=params["pose_q"], t=params["pose_t"])
    out = rasterize(g, K, pose, H, W)
    return (
        (out.color * probes["color"]).sum()
        + (out.depth * probes["depth"]).sum()
        + (out.alpha * probes["alpha"]).sum()
    )


def _discrete_signature(params: dict[str, Tensor], K: Intrinsics, H: int, W: int) -> tuple:
    """Hashable snapshot of the rasterizer's discrete structure.

    Finite differences are only meaningful where the render is smooth; a
    probe that flips the cull set, the depth sort or any pixel's 3-sigma
    visibility straddles a (measure-zero) discontinuity and is skipped by
    the gradient check, mirroring the usual treatment of sort-order ties.
    """
    with torch.no_grad():
        g = Gaussians2D(
            mu=params["mu"], alpha=params["alpha"], quat=params["quat"],
            scale=params["scale"], sh=params["sh"],
        )
        pose = Extrinsics(q=params["pose_q"], t=params["pose_t"])
        R_cam = pose.rotation().to(g.mu.dtype)
        o = pose.t.to(g.mu.dtype)
        keep = _cull_mask(g, K, R_cam, o, H, W)
        idx = torch.nonzero(keep, as_tuple=False).squeeze(-1)
        if idx.numel() == 0:
            return (b"", b"", b"")
        mu, scale = g.mu[idx], g.scale[idx]
        R_prim = quat_to_rotation(g.quat[idx])
        z_center = ((mu - o) @ R_cam)[:, 2]
        order = torch.argsort(z_center, stable=True)
        mu, scale, R_prim = mu[order], scale[order], R_prim[order]

        rays_cam = unproject_rays(pixel_grid(H, W, dtype=g.mu.dtype), K).to(g.mu.dtype)
        v = (rays_cam @ R_cam.transpose(0, 1)).reshape(-1, 3)
        r1, r2, n = R_prim[:, :, 0], R_prim[:, :, 1], R_prim[:, :, 2]
        om = mu - o
        vn = v @ n.transpose(0, 1)
        denom = torch.where(vn.abs() > 1e-9, vn, torch.full_like(vn, 1e-9))
        tau = ((om * n).sum(-1)[None, :] / denom).clamp(-1e6, 1e6)
        d1 = (tau * (v @ r1.transpose(0, 1)) - (om * r1).sum(-1)[None, :]) / scale[:, 0][None, :]
        d2 = (tau * (v @ r2.transpose(0, 1)) - (om * r2).sum(-1)[None, :]) / scale[:, 1][None, :]
        rr = d1 * d1 + d2 * d2
        visible = (vn.abs() > 1e-9) & (tau > BEHIND_CAMERA_EPS) & (rr <= CUTOFF_R2)
        return (
            keep.numpy().tobytes(),
            order.numpy().tobytes(),
            visible.numpy().tobytes(),
        )


def rasterize_grad_check(
    g: Gaussians2D,
    K: Intrinsics,
    P_target: Extrinsics,
    H: int,
    W: int,
    fd_step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    A fixed random linear probe of (color, depth, alpha) serves as the
    scalar loss; gradients over mu, alpha, scale, quat and the target pose
    are compared entry by entry in float64. Coordinates whose probe window
    straddles a discrete change (cull set, depth sort, 3-sigma visibility)
    are skipped: the render is not differentiable there and central
    differences measure the jump, not the gradient.
    """
    gen = torch.Generator().manual_seed(seed)
    probes = {
        "color": torch.rand(H, W, 3, dtype=torch.float64, generator=gen),
        "depth": torch.rand(H, W, dtype=torch.float64, generator=gen),
        "alpha": torch.rand(H, W, dtype=torch.float64, generator=gen),
    }
    params = {
        "mu": g.mu.double().clone().requires_grad_(True),
        "alpha": g.alpha.double().clone().requires_grad_(True),
        "quat": g.quat.double().clone().requires_grad_(True),
        "scale": g.scale.double().clone().requires_grad_(True),
        "sh": g.sh.double().clone(),
        "pose_q": P_target.q.double().clone().requires_grad_(True),
        "pose_t": P_target.t.double().clone().requires_grad_(True),
    }

    loss = _render_scalar_probe(params, K, H, W, probes)
    loss.backward()

    max_rel = 0.0
    checked = ["mu", "alpha", "quat", "scale", "pose_q", "pose_t"]
    for name in checked:
        p = params[name]
        grad = p.grad
        flat = p.detach().reshape(-1)
        for k in range(flat.numel()):
            with torch.no_grad():
                plus = {n: t.detach().clone() for n, t in params.items()}
                minus = {n: t.detach().clone() for n, t in params.items()}
                plus[name].reshape(-1)[k] += fd_step
                minus[name].reshape(-1)[k] -= fd_step
                if _discrete_signature(plus, K, H, W) != _discrete_signature(minus, K, H, W):
                    continue
                fd = float(
                    _render_scalar_probe(plus, K, H, W, probes)
                    - _render_scalar_probe(minus, K, H, W, probes)
                ) / (2 * fd_step)
            ga = float(grad.reshape(-1)[k])
            rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-4)
            max_rel = max(max_rel, rel)
    return max_rel


def write_ply(g: Gaussians2D, path: str | Path) -> None:
    """Dump primitives as an ASCII point list for external viewers."""
    path = Path(path)
    rgb = eval_sh(g.sh.double(), torch.zeros(g.count, 3, dtype=torch.float64)).clamp(0, 1)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {g.count}",
        "property float x",
        "property float y",
        "property float z",
        "property float alpha",
        "property float sx",
        "property float sy",
        "property float qw",
        "property float qx",
        "property float qy",
        "property float qz",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    mu = g.mu.detach().double()
    alpha = g.alpha.detach().double()
    s = g.scale.detach().double()
    q = g.quat.detach().double()
    for i in range(g.count):
        c = (rgb[i] * 255).round().int().tolist()
        lines.append(
            f"{mu[i,0]:.6f} {mu[i,1]:.6f} {mu[i,2]:.6f} {alpha[i]:.6f} "
            f"{s[i,0]:.6f} {s[i,1]:.6f} "
            f"{q[i,0]:.6f} {q[i,1]:.6f} {q[i,2]:.6f} {q[i,3]:.6f} "
            f"{c[0]} {c[1]} {c[2]}"
        )
    path.write_text("\n".join(lines) + "\n")
