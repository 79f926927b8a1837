"""Geometry unit tests.

Expected values are hand-computed or checked against independent
matrix-algebra oracles built inside each test (4x4 homogeneous pipelines,
scalar interpolation loops, scipy-free slerp).
"""

import math

import numpy as np
import pytest
import torch

from selfnvs.geometry import (
    DegenerateCameraMeanError,
    DegenerateQuaternionError,
    Extrinsics,
    Intrinsics,
    average_cameras,
    average_quaternions,
    back_project,
    bilinear_sample,
    pixel_grid,
    plucker_map,
    project,
    quat_multiply,
    quat_to_rotation,
    rotation_to_quat,
)

RNG = np.random.default_rng


def random_unit_quat(rng) -> torch.Tensor:
    q = rng.normal(size=4)
    return torch.tensor(q / np.linalg.norm(q))


def random_camera(rng, width=64, height=48):
    K = Intrinsics(
        fx=float(rng.uniform(20, 200)),
        fy=float(rng.uniform(20, 200)),
        width=width,
        height=height,
    )
    P = Extrinsics(q=random_unit_quat(rng), t=torch.tensor(rng.uniform(-5, 5, size=3)))
    return K, P


def rotation_oracle_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


class TestQuatToRotation:
    def test_identity(self):
        R = quat_to_rotation(torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64))
        np.testing.assert_allclose(R.numpy(), np.eye(3), atol=1e-15)

    def test_90_about_z(self):
        # q = (cos45, 0, 0, sin45) rotates 90 degrees about z
        h = math.sqrt(0.5)
        R = quat_to_rotation(torch.tensor([h, 0.0, 0.0, h], dtype=torch.float64))
        np.testing.assert_allclose(R.numpy(), rotation_oracle_z(90.0), atol=1e-12)

    def test_normalization_invariance(self):
        R = quat_to_rotation(torch.tensor([2.0, 0.0, 0.0, 0.0], dtype=torch.float64))
        np.testing.assert_allclose(R.numpy(), np.eye(3), atol=1e-15)

    def test_degenerate_raises(self):
        with pytest.raises(DegenerateQuaternionError):
            quat_to_rotation(torch.tensor([1e-13, 0.0, 0.0, 0.0], dtype=torch.float64))

    def test_orthonormality_random_sweep(self):
        # spec invariant: ||R^T R - I||_max < 1e-9 over 1e4 random quaternions
        rng = RNG(0)
        q = torch.tensor(rng.normal(size=(10_000, 4)))
        R = quat_to_rotation(q)
        err = torch.matmul(R.transpose(-1, -2), R) - torch.eye(3, dtype=R.dtype)
        assert float(err.abs().max()) < 1e-9
        det = torch.linalg.det(R)
        assert float((det - 1).abs().max()) < 1e-9

    def test_quat_multiply_matches_matrix_product(self):
        rng = RNG(1)
        qa, qb = random_unit_quat(rng), random_unit_quat(rng)
        R = quat_to_rotation(quat_multiply(qa, qb))
        np.testing.assert_allclose(
            R.numpy(), (quat_to_rotation(qa) @ quat_to_rotation(qb)).numpy(), atol=1e-12
        )

    def test_rotation_to_quat_round_trip(self):
        rng = RNG(2)
        for _ in range(50):
            q = random_unit_quat(rng)
            R = quat_to_rotation(q)
            q2 = rotation_to_quat(R)
            np.testing.assert_allclose(
                quat_to_rotation(q2).numpy(), R.numpy(), atol=1e-10
            )


class TestBackProject:
    def test_identity_camera(self):
        # fx=fy=1, 2x2 image so the principal point lands on pixel (1,1)
        K = Intrinsics(fx=1.0, fy=1.0, width=2, height=2)
        P = Extrinsics(q=[1.0, 0, 0, 0], t=[0.0, 0, 0])
        mu = back_project(torch.tensor([1.0, 1.0]), 5.0, K, P)
        np.testing.assert_allclose(mu.numpy(), [0.0, 0.0, 5.0], atol=1e-14)

    def test_zero_depth_collapses_to_camera_center(self):
        rng = RNG(3)
        K, P = random_camera(rng)
        mu = back_project(torch.tensor([11.0, 7.0]), 0.0, K, P)
        np.testing.assert_allclose(mu.numpy(), P.t.numpy(), atol=1e-14)

    def test_hand_computed_rotated_camera(self):
        # Rz(90), t=(1,2,3), fx=fy=2, 256x256 (principal (128,128)),
        # pixel (130,128), D=4:
        #   K^-1 [130 128 1] = (1, 0, 1); * 4 = (4, 0, 4)
        #   Rz90 . (4,0,4) = (0, 4, 4); + t = (1, 6, 7)
        h = math.sqrt(0.5)
        K = Intrinsics(fx=2.0, fy=2.0, width=256, height=256)
        P = Extrinsics(q=[h, 0.0, 0.0, h], t=[1.0, 2.0, 3.0])
        mu = back_project(torch.tensor([130.0, 128.0]), 4.0, K, P)
        np.testing.assert_allclose(mu.numpy(), [1.0, 6.0, 7.0], atol=1e-12)

    def test_matches_homogeneous_matrix_oracle(self):
        rng = RNG(4)
        for _ in range(20):
            K, P = random_camera(rng)
            pix = torch.tensor(rng.uniform(0, 48, size=(5, 2)))
            depth = torch.tensor(rng.uniform(0.1, 20, size=5))
            mu = back_project(pix, depth, K, P)

            # independent 4x4 pipeline
            Kinv = np.linalg.inv(K.matrix().numpy())
            T = np.eye(4)
            T[:3, :3] = P.rotation().numpy()
            T[:3, 3] = P.t.numpy()
            for i in range(5):
                uv1 = np.array([pix[i, 0], pix[i, 1], 1.0])
                cam = Kinv @ uv1 * float(depth[i])
                world = (T @ np.append(cam, 1.0))[:3]
                np.testing.assert_allclose(mu[i].numpy(), world, atol=1e-9)


class TestProject:
    def test_round_trip(self):
        rng = RNG(5)
        for _ in range(20):
            K, P = random_camera(rng)
            pix = torch.tensor(rng.uniform(0, 48, size=(7, 2)))
            depth = torch.tensor(rng.uniform(0.05, 50, size=7))
            uv, z, valid = project(back_project(pix, depth, K, P), K, P)
            assert bool(valid.all())
            np.testing.assert_allclose(uv.numpy(), pix.numpy(), atol=1e-8)
            np.testing.assert_allclose(z.numpy(), depth.numpy(), atol=1e-8)

    def test_camera_center_is_invalid(self):
        rng = RNG(6)
        K, P = random_camera(rng)
        _, z, valid = project(P.t.clone(), K, P)
        assert not bool(valid)
        assert abs(float(z)) < 1e-12

    def test_behind_camera_flagged(self):
        K = Intrinsics(fx=10.0, fy=10.0, width=8, height=8)
        P = Extrinsics(q=[1.0, 0, 0, 0], t=[0.0, 0, 0])
        _, _, valid = project(torch.tensor([0.0, 0.0, -1.0]), K, P)
        assert not bool(valid)

    def test_matches_homogeneous_oracle(self):
        rng = RNG(7)
        for _ in range(20):
            K, P = random_camera(rng)
            pts = torch.tensor(rng.uniform(-10, 10, size=(6, 3)))
            uv, z, valid = project(pts, K, P)

            Km = K.matrix().numpy()
            T = np.eye(4)
            T[:3, :3] = P.rotation().numpy()
            T[:3, 3] = P.t.numpy()
            Tinv = np.linalg.inv(T)
            for i in range(6):
                cam = (Tinv @ np.append(pts[i].numpy(), 1.0))[:3]
                np.testing.assert_allclose(float(z[i]), cam[2], atol=1e-9)
                if cam[2] > 1e-6:
                    assert bool(valid[i])
                    hom = Km @ cam
                    np.testing.assert_allclose(uv[i].numpy(), hom[:2] / hom[2], atol=1e-8)
                else:
                    assert not bool(valid[i])


class TestPluckerMap:
    def test_origin_camera_center_pixel(self):
        K = Intrinsics(fx=1.0, fy=1.0, width=2, height=2)
        P = Extrinsics(q=[1.0, 0, 0, 0], t=[0.0, 0, 0])
        pm = plucker_map(K, P, 2, 2)
        # center pixel (1,1): ray (0,0,1); zero moment for a camera at origin
        np.testing.assert_allclose(pm[1, 1, :3].numpy(), [0, 0, 1], atol=1e-14)
        np.testing.assert_allclose(pm[..., 3:].numpy(), 0, atol=1e-14)

    def test_sliding_origin_along_ray_is_invariant(self):
        rng = RNG(8)
        K, P = random_camera(rng, width=8, height=8)
        pm = plucker_map(K, P, 8, 8)
        u, v, s = 5, 2, 3.7
        d = pm[v, u, :3]
        P2 = Extrinsics(q=P.q, t=P.t + s * d)
        pm2 = plucker_map(K, P2, 8, 8)
        np.testing.assert_allclose(pm2[v, u].numpy(), pm[v, u].numpy(), atol=1e-12)

    def test_invariants_random_cameras(self):
        rng = RNG(9)
        for _ in range(10):
            K, P = random_camera(rng, width=16, height=12)
            pm = plucker_map(K, P, 12, 16)
            d, m = pm[..., :3], pm[..., 3:]
            norms = torch.linalg.vector_norm(d, dim=-1)
            np.testing.assert_allclose(norms.numpy(), 1.0, atol=1e-6)
            dots = (d * m).sum(-1)
            np.testing.assert_allclose(dots.numpy(), 0.0, atol=1e-6)


def bilinear_oracle(image: np.ndarray, u: float, v: float) -> np.ndarray:
    """Scalar-loop reference interpolation (in-bounds coords only)."""
    H, W, _ = image.shape
    u0, v0 = int(np.floor(u)), int(np.floor(v))
    u0, v0 = min(u0, W - 2), min(v0, H - 2)
    fu, fv = u - u0, v - v0
    return (
        image[v0, u0] * (1 - fu) * (1 - fv)
        + image[v0, u0 + 1] * fu * (1 - fv)
        + image[v0 + 1, u0] * (1 - fu) * fv
        + image[v0 + 1, u0 + 1] * fu * fv
    )


class TestBilinearSample:
    def test_integer_coords_exact(self):
        rng = RNG(10)
        img = torch.tensor(rng.uniform(size=(5, 6, 3)))
        coords = pixel_grid(5, 6)
        out, valid = bilinear_sample(img, coords)
        assert bool(valid.all())
        np.testing.assert_allclose(out.numpy(), img.numpy(), atol=1e-15)

    def test_midpoint_of_ramp(self):
        img = torch.tensor([[[0.0], [1.0]]])  # 1x2 image, ramp 0 -> 1
        out, valid = bilinear_sample(img, torch.tensor([0.5, 0.0]))
        assert bool(valid)
        assert float(out) == pytest.approx(0.5)

    def test_out_of_bounds_masked(self):
        img = torch.ones(4, 4, 2, dtype=torch.float64)
        coords = torch.tensor([[-0.1, 1.0], [3.5, 1.0], [1.0, 5.0], [3.0, 3.0]])
        out, valid = bilinear_sample(img, coords)
        assert valid.tolist() == [False, False, False, True]
        np.testing.assert_allclose(out[:3].numpy(), 0.0)

    def test_matches_loop_oracle(self):
        rng = RNG(11)
        img_np = rng.uniform(size=(9, 7, 3))
        img = torch.tensor(img_np)
        coords = rng.uniform(low=[0, 0], high=[6, 8], size=(40, 2))
        out, valid = bilinear_sample(img, torch.tensor(coords))
        assert bool(valid.all())
        for i, (u, v) in enumerate(coords):
            np.testing.assert_allclose(
                out[i].numpy(), bilinear_oracle(img_np, u, v), atol=1e-6
            )

    def test_coordinate_gradients_match_finite_differences(self):
        rng = RNG(12)
        img = torch.tensor(rng.uniform(size=(8, 8, 3)))
        # keep away from the lattice, where the interpolant is non-smooth
        base = rng.uniform(0.2, 6.8, size=(10, 2))
        base = np.where(np.abs(base - np.round(base)) < 0.05, base + 0.1, base)
        coords = torch.tensor(base, requires_grad=True)
        w = torch.tensor(rng.normal(size=(10, 3)))
        out, _ = bilinear_sample(img, coords)
        loss = (out * w).sum()
        loss.backward()

        eps = 1e-6
        for i in range(10):
            for ax in range(2):
                cp, cm = base.copy(), base.copy()
                cp[i, ax] += eps
                cm[i, ax] -= eps
                lp = (bilinear_sample(img, torch.tensor(cp))[0] * w).sum()
                lm = (bilinear_sample(img, torch.tensor(cm))[0] * w).sum()
                fd = float(lp - lm) / (2 * eps)
                grad = float(coords.grad[i, ax])
                assert grad == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_image_gradients_flow(self):
        img = torch.rand(4, 4, 1, dtype=torch.float64, requires_grad=True)
        out, _ = bilinear_sample(img, torch.tensor([1.3, 2.7]))
        out.sum().backward()
        assert float(img.grad.abs().sum()) > 0


class TestAverageCameras:
    def test_idempotent_on_identical(self):
        rng = RNG(13)
        K, P = random_camera(rng)
        K2, P2 = average_cameras((K, P), (K, P))
        assert float(K2.fx) == float(K.fx) and float(K2.fy) == float(K.fy)
        np.testing.assert_array_equal(P2.t.numpy(), P.t.numpy())
        np.testing.assert_allclose(P2.q.numpy(), P.q.numpy(), atol=1e-15)

    def test_translation_midpoint(self):
        K = Intrinsics(fx=10.0, fy=10.0, width=8, height=8)
        Pa = Extrinsics(q=[1.0, 0, 0, 0], t=[0.0, 0, 0])
        Pb = Extrinsics(q=[1.0, 0, 0, 0], t=[2.0, 0, 0])
        _, P = average_cameras((K, Pa), (K, Pb))
        np.testing.assert_allclose(P.t.numpy(), [1.0, 0, 0], atol=1e-15)

    def test_rotation_slerp_midpoint(self):
        # identity and 90 degrees about y -> 45 degrees about y
        K = Intrinsics(fx=10.0, fy=10.0, width=8, height=8)
        h = math.sqrt(0.5)
        Pa = Extrinsics(q=[1.0, 0, 0, 0], t=[0.0, 0, 0])
        Pb = Extrinsics(q=[h, 0.0, h, 0.0], t=[0.0, 0, 0])
        _, P = average_cameras((K, Pa), (K, Pb))
        expect = np.array([math.cos(math.pi / 8), 0.0, math.sin(math.pi / 8), 0.0])
        np.testing.assert_allclose(P.q.numpy(), expect, atol=1e-12)

    def test_symmetric(self):
        rng = RNG(14)
        Ka, Pa = random_camera(rng)
        Kb, Pb = random_camera(rng)
        K1, P1 = average_cameras((Ka, Pa), (Kb, Pb))
        K2, P2 = average_cameras((Kb, Pb), (Ka, Pa))
        assert float(K1.fx) == float(K2.fx)
        np.testing.assert_allclose(P1.t.numpy(), P2.t.numpy(), atol=1e-15)
        # q and -q encode the same rotation; symmetry holds at camera level
        np.testing.assert_allclose(P1.rotation().numpy(), P2.rotation().numpy(), atol=1e-12)

    def test_sign_corrected_mean(self):
        rng = RNG(15)
        q = random_unit_quat(rng)
        avg = average_quaternions(q, -q)
        np.testing.assert_allclose(avg.numpy(), q.numpy(), atol=1e-12)

    def test_antipodal_rotations_raise(self):
        qa = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        qb = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64)  # 180 deg about x
        with pytest.raises(DegenerateCameraMeanError):
            average_quaternions(qa, qb)


class TestProjectionRoundTripSweep:
    def test_dense_round_trip(self):
        # smaller version of acceptance criterion 1; full sweep lives in
        # test_acceptance.py
        rng = RNG(16)
        K, P = random_camera(rng)
        pix = torch.tensor(rng.uniform(0, 48, size=(1000, 2)))
        depth = torch.tensor(rng.uniform(1e-3, 100, size=1000))
        uv, z, valid = project(back_project(pix, depth, K, P), K, P)
        assert bool(valid.all())
        err = (uv - pix).abs().max()
        assert float(err) < 1e-5
