"""Randomized rig/grid configurations shared by the LUT tests."""

import math

import numpy as np
import torch

from polarbev.bev_transform import RigGeometry, build_polar_grid
from polarbev.geometry import Camera, CameraIntrinsics, CameraRig, RigPose


def random_camera(rng, i):
    w = int(rng.choice([64, 96, 128]))
    h = int(rng.choice([32, 48, 64]))
    if rng.random() < 0.35:
        f = w / 2 / math.radians(rng.uniform(70, 100))
        intr = CameraIntrinsics("fisheye", f, f, w / 2 - 0.5, h / 2 - 0.5, w, h,
                                distortion=(rng.uniform(-0.02, 0.03),), max_range=rng.uniform(15, 40))
    else:
        f = w / 2 / math.tan(math.radians(rng.uniform(25, 60)))
        intr = CameraIntrinsics("pinhole", f, f * rng.uniform(0.95, 1.05), rng.uniform(0.3, 0.7) * w,
                                rng.uniform(0.3, 0.7) * h, w, h, distortion=(rng.uniform(-0.15, 0.05),),
                                max_range=rng.uniform(30, 150))
    pose = RigPose.from_mount(rng.uniform(-math.pi, math.pi), rng.uniform(0.0, 0.5), rng.uniform(-0.05, 0.05),
                              (rng.uniform(-3, 3), rng.uniform(-1, 1), rng.uniform(0.5, 3.0)))
    return Camera(f"cam{i}", intr, pose)


def random_case(seed):
    rng = np.random.default_rng(seed)
    rig = CameraRig(f"rig{seed}", tuple(random_camera(rng, i) for i in range(int(rng.integers(1, 5)))))
    r_min = rng.uniform(0.5, 4.0)
    grid = build_polar_grid(int(rng.integers(8, 91)), int(rng.integers(2, 25)), r_min, r_min * rng.uniform(5, 60))
    geom = RigGeometry.build(rig, grid, int(rng.integers(4, 33)), near=rng.uniform(0.3, 1.5))
    gen = torch.Generator().manual_seed(seed)
    pseudo = [torch.randn(2, *t.shape, 5, generator=gen) for t in geom.lut.tables]
    return geom, pseudo
