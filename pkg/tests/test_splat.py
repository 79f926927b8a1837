"""Surfel rasterizer tests: compositing oracles, invariances, gradients."""

import math

import numpy as np
import pytest
import torch

from selfnvs.geometry import Extrinsics, Intrinsics, compose_poses
from selfnvs.splat import (
    SH_C0,
    SH_C1,
    Gaussians2D,
    eval_sh,
    gaussians_to_world,
    rasterize,
    rasterize_grad_check,
    sh_from_rgb,
    write_ply,
)

RNG = np.random.default_rng


def identity_pose(dtype=torch.float64):
    return Extrinsics(
        q=torch.tensor([1.0, 0, 0, 0], dtype=dtype), t=torch.zeros(3, dtype=dtype)
    )


def make_surfel(mu, rgb, alpha=1.0, scale=(1.0, 1.0), quat=(1.0, 0, 0, 0)):
    return Gaussians2D(
        mu=torch.tensor([mu], dtype=torch.float64),
        alpha=torch.tensor([alpha], dtype=torch.float64),
        quat=torch.tensor([quat], dtype=torch.float64),
        scale=torch.tensor([scale], dtype=torch.float64),
        sh=sh_from_rgb(rgb)[None],
    )


def random_scene(rng, count, sh_degree=0, depth_range=(1.0, 5.0), spread=1.0):
    """Random surfels in front of an identity camera, well-separated depths."""
    depths = np.sort(rng.uniform(*depth_range, size=count))
    # enforce a minimum depth gap so finite differences cannot flip the sort
    depths += np.arange(count) * 0.05
    mu = np.stack(
        [rng.uniform(-spread, spread, count), rng.uniform(-spread, spread, count), depths],
        axis=1,
    )
    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    sh = rng.uniform(-1.5, 1.5, size=(count, (sh_degree + 1) ** 2, 3))
    return Gaussians2D(
        mu=torch.tensor(mu),
        alpha=torch.tensor(rng.uniform(0.2, 0.9, count)),
        quat=torch.tensor(q),
        scale=torch.tensor(rng.uniform(0.2, 0.8, size=(count, 2))),
        sh=torch.tensor(sh),
    )


class TestEvalSh:
    def test_deg0_direction_independent(self):
        sh = sh_from_rgb([0.5, 0.5, 0.5])[None]
        for d in [(0, 0, 1.0), (1.0, 0, 0), (0.577, 0.577, 0.577)]:
            rgb = eval_sh(sh, torch.tensor([d], dtype=torch.float64))
            np.testing.assert_allclose(rgb.numpy(), [[0.5, 0.5, 0.5]], atol=1e-12)

    def test_deg1_zero_bands_matches_deg0(self):
        rng = RNG(0)
        dc = torch.tensor(rng.normal(size=(5, 1, 3)))
        deg1 = torch.cat([dc, torch.zeros(5, 3, 3, dtype=torch.float64)], dim=1)
        dirs = torch.tensor(rng.normal(size=(5, 3)))
        dirs /= torch.linalg.vector_norm(dirs, dim=1, keepdim=True)
        np.testing.assert_allclose(
            eval_sh(deg1, dirs).numpy(), eval_sh(dc, dirs).numpy(), atol=1e-12
        )

    def test_deg1_matches_basis_table(self):
        # real SH basis: Y00 = C0, Y1,-1 = -C1*y, Y10 = C1*z, Y11 = -C1*x
        rng = RNG(1)
        sh = torch.tensor(rng.normal(size=(4, 4, 3)))
        dirs = torch.tensor(rng.normal(size=(4, 3)))
        dirs /= torch.linalg.vector_norm(dirs, dim=1, keepdim=True)
        got = eval_sh(sh, dirs).numpy()
        for i in range(4):
            x, y, z = dirs[i].tolist()
            basis = np.array([SH_C0, -SH_C1 * y, SH_C1 * z, -SH_C1 * x])
            expect = 0.5 + basis @ sh[i].numpy()
            np.testing.assert_allclose(got[i], expect, atol=1e-12)

    def test_unsupported_degree(self):
        with pytest.raises(ValueError):
            eval_sh(torch.zeros(1, 9, 3), torch.zeros(1, 3))


class TestGaussiansToWorld:
    def test_identity_pose_is_noop(self):
        rng = RNG(2)
        g = random_scene(rng, 4)
        out = gaussians_to_world(g, identity_pose())
        np.testing.assert_allclose(out.mu.numpy(), g.mu.numpy(), atol=1e-15)
        np.testing.assert_allclose(out.quat.numpy(), g.quat.numpy(), atol=1e-15)

    def test_pure_translation(self):
        rng = RNG(3)
        g = random_scene(rng, 4)
        t = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        out = gaussians_to_world(g, Extrinsics(q=[1.0, 0, 0, 0], t=t))
        np.testing.assert_allclose(out.mu.numpy(), (g.mu + t).numpy(), atol=1e-15)
        np.testing.assert_allclose(out.quat.numpy(), g.quat.numpy(), atol=1e-12)

    def test_rotation_moves_normal(self):
        # surfel normal +x (90 deg rotation about y maps +z to +x);
        # pose Rz(90) should take it to +y
        h = math.sqrt(0.5)
        g = make_surfel([0, 0, 1.0], [1, 0, 0], quat=(h, 0.0, h, 0.0))
        pose = Extrinsics(q=[h, 0.0, 0.0, h], t=[0.0, 0, 0])
        from selfnvs.geometry import quat_to_rotation

        n0 = quat_to_rotation(g.quat[0])[:, 2]
        np.testing.assert_allclose(n0.numpy(), [1, 0, 0], atol=1e-12)
        out = gaussians_to_world(g, pose)
        n1 = quat_to_rotation(out.quat[0])[:, 2]
        np.testing.assert_allclose(n1.numpy(), [0, 1, 0], atol=1e-12)


class TestRasterize:
    def K(self, size=16, f=16.0):
        return Intrinsics(fx=f, fy=f, width=size, height=size)

    def test_empty_scene(self):
        out = rasterize(Gaussians2D.empty(), self.K(), identity_pose(), 16, 16)
        assert float(out.color.abs().sum()) == 0
        assert float(out.depth.abs().sum()) == 0
        assert float(out.alpha.abs().sum()) == 0

    def test_single_opaque_splat_dominates(self):
        g = make_surfel([0, 0, 2.0], [1, 0, 0], alpha=1.0, scale=(5.0, 5.0))
        out = rasterize(g, self.K(), identity_pose(), 16, 16)
        center = out.color[8, 8]
        np.testing.assert_allclose(center.numpy(), [1, 0, 0], atol=1e-3)
        assert float(out.alpha[8, 8]) > 0.999

    def test_two_splat_compositing_oracle(self):
        # front: alpha 0.6 green at z=1; back: alpha 1.0 blue at z=2
        front = make_surfel([0, 0, 1.0], [0, 1, 0], alpha=0.6, scale=(50.0, 50.0))
        back = make_surfel([0, 0, 2.0], [0, 0, 1], alpha=1.0, scale=(50.0, 50.0))
        g = Gaussians2D.cat([back, front])  # input order must not matter
        out = rasterize(g, self.K(), identity_pose(), 16, 16)
        # scalar front-to-back oracle at the optical center, G=1 exactly there:
        #   w1 = 0.6, w2 = 1.0 * (1 - 0.6) = 0.4
        expect = 0.6 * np.array([0, 1, 0]) + 0.4 * np.array([0, 0, 1])
        np.testing.assert_allclose(out.color[8, 8].numpy(), expect, atol=1e-6)
        # depth composite: (0.6*1 + 0.4*2) / 1.0
        assert float(out.depth[8, 8]) == pytest.approx(1.4, abs=1e-6)

    def test_order_invariance(self):
        rng = RNG(4)
        g = random_scene(rng, 12, spread=0.8)
        out1 = rasterize(g, self.K(), identity_pose(), 16, 16)
        perm = torch.tensor(rng.permutation(12))
        g2 = Gaussians2D(
            mu=g.mu[perm], alpha=g.alpha[perm], quat=g.quat[perm],
            scale=g.scale[perm], sh=g.sh[perm],
        )
        out2 = rasterize(g2, self.K(), identity_pose(), 16, 16)
        np.testing.assert_allclose(out1.color.numpy(), out2.color.numpy(), atol=1e-12)
        np.testing.assert_allclose(out1.depth.numpy(), out2.depth.numpy(), atol=1e-12)

    def test_alpha_bounded_and_background(self):
        rng = RNG(5)
        g = random_scene(rng, 10)
        out = rasterize(g, self.K(), identity_pose(), 16, 16)
        assert float(out.alpha.min()) >= 0
        assert float(out.alpha.max()) <= 1 + 1e-9
        empty = out.alpha == 0
        assert float(out.color[empty].abs().sum()) == 0
        assert float(out.depth[empty].abs().sum()) == 0

    def test_rigid_transform_invariance(self):
        rng = RNG(6)
        g = random_scene(rng, 8)
        K = self.K()
        base = identity_pose()
        q = torch.tensor(rng.normal(size=4))
        q /= torch.linalg.vector_norm(q)
        T = Extrinsics(q=q, t=torch.tensor(rng.uniform(-2, 2, 3)))
        out0 = rasterize(g, K, base, 16, 16)
        out1 = rasterize(gaussians_to_world(g, T), K, compose_poses(T, base), 16, 16)
        np.testing.assert_allclose(out1.color.numpy(), out0.color.numpy(), atol=1e-5)
        np.testing.assert_allclose(out1.depth.numpy(), out0.depth.numpy(), atol=1e-5)
        np.testing.assert_allclose(out1.alpha.numpy(), out0.alpha.numpy(), atol=1e-5)

    def test_fronto_parallel_depth(self):
        g = make_surfel([0, 0, 3.0], [1, 1, 1], alpha=1.0, scale=(20.0, 20.0))
        out = rasterize(g, self.K(), identity_pose(), 16, 16)
        covered = out.alpha > 0.5
        assert bool(covered.any())
        np.testing.assert_allclose(out.depth[covered].numpy(), 3.0, atol=1e-4)

    def test_chunking_matches_single_pass(self):
        rng = RNG(7)
        g = random_scene(rng, 30, spread=0.8)
        K = self.K()
        a = rasterize(g, K, identity_pose(), 16, 16, chunk_size=4)
        b = rasterize(g, K, identity_pose(), 16, 16, chunk_size=1024)
        np.testing.assert_allclose(a.color.numpy(), b.color.numpy(), atol=1e-12)
        np.testing.assert_allclose(a.depth.numpy(), b.depth.numpy(), atol=1e-12)

    def test_transmittance_monotone(self):
        # pixel weights sum <= 1 holds for arbitrary random scenes
        rng = RNG(8)
        for seed in range(3):
            g = random_scene(RNG(seed), 20)
            out = rasterize(g, self.K(), identity_pose(), 16, 16)
            assert float(out.alpha.max()) <= 1 + 1e-9


class TestGradients:
    def K(self, size=8, f=8.0):
        return Intrinsics(fx=f, fy=f, width=size, height=size)

    def test_single_splat_gradcheck(self):
        g = make_surfel([0.1, -0.2, 2.0], [0.8, 0.3, 0.4], alpha=0.7, scale=(0.8, 0.5),
                        quat=(0.9, 0.1, 0.3, -0.1))
        pose = Extrinsics(q=[0.98, 0.1, 0.05, 0.0], t=[0.1, -0.1, -0.3])
        err = rasterize_grad_check(g, self.K(), pose, 8, 8)
        assert err < 1e-3

    def test_zero_opacity_color_gradients_vanish(self):
        g = make_surfel([0, 0, 2.0], [1, 0, 0], alpha=0.5, scale=(2.0, 2.0))
        g = Gaussians2D(mu=g.mu, alpha=torch.zeros_like(g.alpha), quat=g.quat,
                        scale=g.scale, sh=g.sh.clone().requires_grad_(True))
        out = rasterize(g, self.K(), identity_pose(), 8, 8)
        (out.color.sum() + out.depth.sum()).backward()
        assert float(g.sh.grad.abs().sum()) == 0.0

    def test_sixteen_splat_gradcheck(self):
        rng = RNG(11)
        g = random_scene(rng, 16, spread=0.6)
        pose = identity_pose()
        err = rasterize_grad_check(g, self.K(), pose, 8, 8)
        assert err < 1e-2


class TestPlyDump:
    def test_write_ply(self, tmp_path):
        rng = RNG(12)
        g = random_scene(rng, 3)
        path = tmp_path / "prims.ply"
        write_ply(g, path)
        text = path.read_text().splitlines()
        assert text[0] == "ply"
        assert f"element vertex 3" in text
        # header + 3 rows
        assert len(text) == text.index("end_header") + 4
