"""Camera geometry: quaternions, projection, ray maps, bilinear sampling.

Conventions used throughout the package:

- Extrinsics are camera-to-world: ``world = R @ cam + t``.
- Quaternions are stored ``(w, x, y, z)`` and normalized at use.
- The principal point sits at the image center ``(W/2, H/2)`` and pixel
  ``(u, v)`` addresses the raw integer coordinate (no half-pixel offset),
  with ``u`` the column and ``v`` the row.

All operations are pure functions of their inputs, accept torch tensors
of any float dtype, and are differentiable wherever that makes sense
(python scalars are promoted to float64).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

BEHIND_CAMERA_EPS = 1e-6


class DegenerateQuaternionError(ValueError):
    """Quaternion norm too small to define a rotation."""


class DegenerateCameraMeanError(ValueError):
    """Two rotations are (near) 180 degrees apart; their mean is ambiguous."""


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


@dataclass
class Intrinsics:
    """Pinhole intrinsics with the principal point fixed at the image center.

    ``fx``/``fy`` are focal lengths in pixels and may be 0-dim tensors so
    gradients can flow into predicted focal lengths.
    """

    fx: Tensor
    fy: Tensor
    width: int
    height: int

    def __post_init__(self):
        self.fx = _as_tensor(self.fx)
        self.fy = _as_tensor(self.fy, like=self.fx)
        if float(self.fx.detach()) <= 0 or float(self.fy.detach()) <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")

    @property
    def cx(self) -> float:
        return self.width / 2.0

    @property
    def cy(self) -> float:
        return self.height / 2.0

    def matrix(self) -> Tensor:
        """3x3 calibration matrix K."""
        dtype = self.fx.dtype
        z = torch.zeros((), dtype=dtype)
        o = torch.ones((), dtype=dtype)
        cx = torch.full((), self.cx, dtype=dtype)
        cy = torch.full((), self.cy, dtype=dtype)
        return torch.stack(
            [
                torch.stack([self.fx, z, cx]),
                torch.stack([z, self.fy, cy]),
                torch.stack([z, z, o]),
            ]
        )


@dataclass
class Extrinsics:
    """Camera pose, camera-to-world: ``world = R(q) @ cam + t``."""

    q: Tensor  # [4], (w, x, y, z); normalized lazily where used
    t: Tensor  # [3]

    def __post_init__(self):
        self.q = _as_tensor(self.q)
        self.t = _as_tensor(self.t, like=self.q)
        if self.q.shape != (4,) or self.t.shape != (3,):
            raise ValueError(f"expected q[4], t[3], got {tuple(self.q.shape)}, {tuple(self.t.shape)}")

    def rotation(self) -> Tensor:
        return quat_to_rotation(self.q)


def quat_normalize(q: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize quaternion(s) [..., 4]; raises on (near-)zero norm."""
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if bool((norm < eps).any()):
        raise DegenerateQuaternionError(f"quaternion norm below {eps}")
    return q / norm


def quat_to_rotation(q: Tensor) -> Tensor:
    """Convert quaternion(s) (w, x, y, z) [..., 4] to rotation matrices [..., 3, 3].

    The input is normalized internally, so any nonzero scaling of ``q``
    yields the same rotation.
    """
    q = quat_normalize(_as_tensor(q))
    w, x, y, z = torch.unbind(q, dim=-1)
    rows = torch.stack(
        [
            1 - 2 * (y * y + z * z),
            2 * (x * y - w * z),
            2 * (x * z + w * y),
            2 * (x * y + w * z),
            1 - 2 * (x * x + z * z),
            2 * (y * z - w * x),
            2 * (x * z - w * y),
            2 * (y * z + w * x),
            1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return rows.reshape(q.shape[:-1] + (3, 3))


def quat_multiply(a: Tensor, b: Tensor) -> Tensor:
    """Hamilton product a ⊗ b for (w, x, y, z) quaternions [..., 4]."""
    aw, ax, ay, az = torch.unbind(_as_tensor(a), dim=-1)
    bw, bx, by, bz = torch.unbind(_as_tensor(b), dim=-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def rotation_to_quat(R: Tensor) -> Tensor:
    """Convert a 3x3 rotation matrix to a (w, x, y, z) quaternion with w >= 0."""
    R = _as_tensor(R)
    m00, m11, m22 = R[0, 0], R[1, 1], R[2, 2]
    trace = m00 + m11 + m22
    if float(trace) > 0:
        s = torch.sqrt(trace + 1.0) * 2
        q = torch.stack([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif float(m00) > float(m11) and float(m00) > float(m22):
        s = torch.sqrt(1.0 + m00 - m11 - m22) * 2
        q = torch.stack([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif float(m11) > float(m22):
        s = torch.sqrt(1.0 + m11 - m00 - m22) * 2
        q = torch.stack([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = torch.sqrt(1.0 + m22 - m00 - m11) * 2
        q = torch.stack([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if float(q[0]) < 0:
        q = -q
    return quat_normalize(q)


def unproject_rays(pixels: Tensor, K: Intrinsics) -> Tensor:
    """Camera-frame ray directions ``K^-1 [u v 1]^T`` (unnormalized, z = 1).

    pixels: [..., 2] with (u, v) order. Returns [..., 3].
    """
    pixels = _as_tensor(pixels, like=K.fx)
    u, v = pixels[..., 0], pixels[..., 1]
    x = (u - K.cx) / K.fx
    y = (v - K.cy) / K.fy
    return torch.stack([x, y, torch.ones_like(x)], dim=-1)


def back_project(pixels: Tensor, depth: Tensor, K: Intrinsics, P: Extrinsics) -> Tensor:
    """Lift pixels to world points: ``mu = R (D K^-1 [u v 1]^T) + t``.

    pixels: [..., 2]; depth: broadcastable to pixels[..., 0]. Returns [..., 3].
    Depth 0 collapses the point onto the camera center ``t``.
    """
    rays = unproject_rays(pixels, K)  # [..., 3], camera frame, z=1
    depth = _as_tensor(depth, like=rays)
    cam = rays * depth[..., None]
    R = P.rotation().to(cam.dtype)
    return cam @ R.transpose(-1, -2) + P.t.to(cam.dtype)


def project(points: Tensor, K: Intrinsics, P: Extrinsics) -> tuple[Tensor, Tensor, Tensor]:
    """Project world points into a camera: inverse of :func:`back_project`.

    points: [..., 3]. Returns (pixels [..., 2], depth [...], valid [...]),
    where depth is measured along the camera optical axis and ``valid`` is
    False for points at or behind the camera plane (z <= BEHIND_CAMERA_EPS).
    Invalid pixels are still computed from a clamped depth so the output
    stays finite; callers mask them out.
    """
    points = _as_tensor(points)
    R = P.rotation().to(points.dtype)
    cam = (points - P.t.to(points.dtype)) @ R  # R^T (p - t), via right-multiply
    z = cam[..., 2]
    valid = z > BEHIND_CAMERA_EPS
    z_safe = torch.where(valid, z, torch.full_like(z, BEHIND_CAMERA_EPS))
    u = cam[..., 0] / z_safe * K.fx + K.cx
    v = cam[..., 1] / z_safe * K.fy + K.cy
    return torch.stack([u, v], dim=-1), z, valid


def pixel_grid(H: int, W: int, dtype: torch.dtype = torch.float64) -> Tensor:
    """Integer (u, v) coordinates for every pixel, shape [H, W, 2]."""
    v, u = torch.meshgrid(
        torch.arange(H, dtype=dtype), torch.arange(W, dtype=dtype), indexing="ij"
    )
    return torch.stack([u, v], dim=-1)


def plucker_map(K: Intrinsics, P: Extrinsics, H: int, W: int) -> Tensor:
    """Per-pixel ray embedding [H, W, 6]: unit direction d then moment m = t x d.

    Directions are expressed in the world frame; the moment encodes the ray
    origin (camera center) so that d.m = 0 holds per pixel.
    """
    dtype = K.fx.dtype if K.fx.is_floating_point() else torch.float64
    pix = pixel_grid(H, W, dtype=dtype)
    rays = unproject_rays(pix, K)  # [H, W, 3]
    R = P.rotation().to(rays.dtype)
    d = rays @ R.transpose(-1, -2)
    d = d / torch.linalg.vector_norm(d, dim=-1, keepdim=True)
    m = torch.cross(P.t.to(d.dtype).expand_as(d), d, dim=-1)
    return torch.cat([d, m], dim=-1)


def bilinear_sample(image: Tensor, coords: Tensor) -> tuple[Tensor, Tensor]:
    """Sample ``image`` [H, W, C] at continuous pixel coords [..., 2] (u, v).

    Standard 4-neighbor interpolation, differentiable w.r.t. both the image
    and the coordinates. Samples whose interpolation stencil leaves the image
    (u outside [0, W-1] or v outside [0, H-1]) are masked invalid and zeroed
    rather than raising.

    Returns (values [..., C], valid [...]).
    """
    H, W, _ = image.shape
    coords = _as_tensor(coords, like=image)
    u, v = coords[..., 0], coords[..., 1]
    valid = (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)

    u = u.clamp(0, W - 1)
    v = v.clamp(0, H - 1)
    u0 = u.detach().floor().clamp(0, max(W - 2, 0))
    v0 = v.detach().floor().clamp(0, max(H - 2, 0))
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    u0 = u0.long()
    v0 = v0.long()
    u1 = (u0 + 1).clamp(max=W - 1)
    v1 = (v0 + 1).clamp(max=H - 1)

    tl = image[v0, u0]  # [..., C]
    tr = image[v0, u1]
    bl = image[v1, u0]
    br = image[v1, u1]
    top = tl + (tr - tl) * fu
    bot = bl + (br - bl) * fu
    out = top + (bot - top) * fv
    return out * valid[..., None].to(out.dtype), valid


def compose_poses(outer: Extrinsics, inner: Extrinsics) -> Extrinsics:
    """Compose camera-to-world maps: ``x -> R_o (R_i x + t_i) + t_o``."""
    q = quat_multiply(quat_normalize(outer.q), quat_normalize(inner.q.to(outer.q.dtype)))
    t = outer.rotation() @ inner.t.to(outer.t.dtype) + outer.t
    return Extrinsics(q=q, t=t)


def average_quaternions(qa: Tensor, qb: Tensor) -> Tensor:
    """Midpoint rotation of two unit quaternions (slerp at 0.5).

    The sign of ``qb`` is corrected so both quaternions live on the same
    hemisphere; the normalized sum is then the geodesic midpoint. Rotations
    ~180 degrees apart have no unique midpoint and raise.
    """
    qa = quat_normalize(_as_tensor(qa))
    qb = quat_normalize(_as_tensor(qb, like=qa))
    d = torch.dot(qa, qb)
    if float(torch.abs(d)) < 1e-6:
        raise DegenerateCameraMeanError("rotations are ~180 degrees apart; midpoint is ambiguous")
    if float(d) < 0:
        qb = -qb
    return quat_normalize(qa + qb)


def average_cameras(
    cam_a: tuple[Intrinsics, Extrinsics], cam_b: tuple[Intrinsics, Extrinsics]
) -> tuple[Intrinsics, Extrinsics]:
    """Midpoint camera: mean focal lengths and translation, slerp-mid rotation.

    Symmetric in its arguments and exact on identical inputs. Raises
    :class:`DegenerateCameraMeanError` for antipodal rotations.
    """
    Ka, Pa = cam_a
    Kb, Pb = cam_b
    if (Ka.width, Ka.height) != (Kb.width, Kb.height):
        raise ValueError("cannot average cameras with different image sizes")
    K = Intrinsics(fx=(Ka.fx + Kb.fx) / 2, fy=(Ka.fy + Kb.fy) / 2, width=Ka.width, height=Ka.height)
    q = average_quaternions(Pa.q, Pb.q)
    t = (Pa.t + Pb.t.to(Pa.t.dtype)) / 2
    return K, Extrinsics(q=q, t=t)
