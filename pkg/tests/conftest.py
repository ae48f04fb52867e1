import math

import numpy as np
import pytest

from polarbev.geometry import CameraIntrinsics, RigPose, Camera


@pytest.fixture
def pinhole():
    return CameraIntrinsics("pinhole", 100.0, 100.0, 63.5, 31.5, 128, 64)


@pytest.fixture
def fisheye():
    return CameraIntrinsics("fisheye", 40.0, 40.0, 63.5, 63.5, 128, 128, distortion=(0.02, -0.003))


def quaternion_from_rotation(m):
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    t = np.trace(m)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quaternion_angle(ra, rb):
    """Angle of the relative rotation via quaternions: 2 atan2(|v|, |w|)."""
    q = quaternion_from_rotation(ra.T @ rb)
    return 2.0 * math.atan2(np.linalg.norm(q[1:]), abs(q[0]))


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def make_camera(intr, yaw=0.0, pitch=0.0, roll=0.0, xyz=(0.0, 0.0, 1.5), name="cam"):
    return Camera(name, intr, RigPose.from_mount(yaw, pitch, roll, xyz))
