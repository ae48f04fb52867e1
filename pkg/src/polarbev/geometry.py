"""Camera models, rig poses and pixel / ground / polar conversions.

Frames
------
Camera frame follows the OpenCV convention: +x right, +y down, +z along the
optical axis.  The rig frame is also the BEV frame: +x forward, +y left,
+z up, origin at the rig origin.  A :class:`RigPose` maps camera-frame
points into the rig frame, ``p_rig = R @ p_cam + t``.

Pixel coordinates use the pixel-center convention: pixel ``(0, 0)`` is
centered at ``u = v = 0`` so the image spans ``[-0.5, width - 0.5]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

TWO_PI = 2.0 * math.pi
HORIZON_EPS = 1e-9
UNDISTORT_ITERS = 20
UNDISTORT_TOL = 1e-10
FISHEYE_MAX_THETA = math.radians(110.0)

# columns are the rig-frame images of the camera x, y, z axes
CAM_TO_BODY = np.array(
    [
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ]
)


class GeometryError(ValueError):
    """Raised for inputs outside a camera model's domain."""


def _rz(psi):
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(phi):
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def euler_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)`` as a 3x3 array."""
    return _rz(yaw) @ _ry(pitch) @ _rx(roll)


def is_rotation(m: np.ndarray, tol: float = 1e-9) -> bool:
    m = np.asarray(m, dtype=float)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        return False
    return bool(
        np.allclose(m.T @ m, np.eye(3), atol=tol, rtol=0.0)
        and abs(np.linalg.det(m) - 1.0) <= tol
    )


def rotation_error(r_gt: np.ndarray, r_pred: np.ndarray) -> float:
    """Geodesic angle in radians between two rotations, in ``[0, pi]``."""
    c = (np.trace(np.asarray(r_gt).T @ np.asarray(r_pred)) - 1.0) / 2.0
    return float(math.acos(min(1.0, max(-1.0, c))))


def wrap_angle(a):
    """Wrap angles to ``[0, 2*pi)``; works on scalars and arrays."""
    w = np.mod(a, TWO_PI)
    # np.mod(-tiny, 2pi) rounds up to exactly 2pi
    w = np.where(w >= TWO_PI, 0.0, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def angle_diff(a, b):
    """Signed difference ``a - b`` wrapped to ``[-pi, pi)``."""
    return np.mod(np.asarray(a) - np.asarray(b) + math.pi, TWO_PI) - math.pi


@dataclass(frozen=True)
class PolarPoint:
    azimuth: float
    distance: float
    elevation: float | None = None


def to_polar(x: float, y: float) -> PolarPoint:
    d = math.hypot(x, y)
    if d == 0.0:
        return PolarPoint(0.0, 0.0)
    return PolarPoint(wrap_angle(math.atan2(y, x)), d)


def to_cartesian(p: PolarPoint) -> tuple[float, float]:
    return p.distance * math.cos(p.azimuth), p.distance * math.sin(p.azimuth)


def polar_arrays(x, y):
    """Vectorized :func:`to_polar`; returns ``(azimuth, distance)`` arrays."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return wrap_angle(np.arctan2(y, x)), np.hypot(x, y)


@dataclass(frozen=True)
class RigPose:
    """Camera-to-rig rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not is_rotation(r):
            raise GeometryError("pose rotation is not a valid rotation matrix")
        if not np.all(np.isfinite(t)):
            raise GeometryError("pose translation must be finite")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_mount(cls, yaw=0.0, pitch=0.0, roll=0.0, xyz=(0.0, 0.0, 0.0)):
        """Pose of a camera mounted at ``xyz`` looking along rig +x rotated by
        yaw (left positive), pitch (down positive) and roll."""
        return cls(euler_to_rotation(yaw, pitch, roll) @ CAM_TO_BODY, xyz)

    def to_rig(self, p_cam):
        return np.asarray(p_cam) @ self.rotation.T + self.translation

    def to_camera(self, p_rig):
        return (np.asarray(p_rig) - self.translation) @ self.rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    model: str
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple[float, ...] = ()
    max_range: float = 200.0

    def __post_init__(self):
        if self.model not in ("pinhole", "fisheye"):
            raise GeometryError(f"unknown camera model {self.model!r}")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")
        if self.max_range <= 0:
            raise GeometryError("max_range must be positive")
        object.__setattr__(self, "distortion", tuple(float(k) for k in self.distortion))

    def _radial(self, s):
        """Distortion factor ``1 + k1 s + k2 s^2 + ...`` for ``s = r^2`` or ``theta^2``."""
        f = np.ones_like(s)
        p = np.ones_like(s)
        for k in self.distortion:
            p = p * s
            f = f + k * p
        return f

    def project(self, rays) -> np.ndarray:
        """Project camera-frame directions ``(..., 3)`` to pixels ``(..., 2)``.

        Rays that the model cannot image come back as NaN.
        """
        rays = np.asarray(rays, dtype=float)
        x, y, z = rays[..., 0], rays[..., 1], rays[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.model == "pinhole":
                xn = np.where(z > 0, x / z, np.nan)
                yn = np.where(z > 0, y / z, np.nan)
                f = self._radial(xn * xn + yn * yn)
                xd, yd = xn * f, yn * f
            else:
                rho = np.hypot(x, y)
                theta = np.arctan2(rho, z)
                theta_d = theta * self._radial(theta * theta)
                scale = np.where(rho > 0, theta_d / np.where(rho > 0, rho, 1.0), 0.0)
                scale = np.where(theta <= FISHEYE_MAX_THETA, scale, np.nan)
                # along the optical axis the projection is the principal point
                xd = np.where(rho > 0, x * scale, 0.0 * scale)
                yd = np.where(rho > 0, y * scale, 0.0 * scale)
        return np.stack([self.fx * xd + self.cx, self.fy * yd + self.cy], axis=-1)

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        u, v = uv[..., 0], uv[..., 1]
        return (u >= -0.5) & (u <= self.width - 0.5) & (v >= -0.5) & (v <= self.height - 0.5)

    def unproject(self, uv, check=True) -> np.ndarray:
        """Unit camera-frame rays for pixels ``(..., 2)``."""
        uv = np.asarray(uv, dtype=float)
        if check and not np.all(self.in_bounds(uv)):
            raise GeometryError("pixel outside image bounds")
        xd = (uv[..., 0] - self.cx) / self.fx
        yd = (uv[..., 1] - self.cy) / self.fy
        if self.model == "pinhole":
            xn, yn = xd.copy(), yd.copy()
            if self.distortion:
                for _ in range(UNDISTORT_ITERS):
                    f = self._radial(xn * xn + yn * yn)
                    nx, ny = xd / f, yd / f
                    step = max(np.max(np.abs(nx - xn), initial=0.0), np.max(np.abs(ny - yn), initial=0.0))
                    xn, yn = nx, ny
                    if step < UNDISTORT_TOL:
                        break
            rays = np.stack([xn, yn, np.ones_like(xn)], axis=-1)
        else:
            theta_d = np.hypot(xd, yd)
            theta = theta_d.copy()
            if self.distortion:
                for _ in range(UNDISTORT_ITERS):
                    nt = theta_d / self._radial(theta * theta)
                    step = np.max(np.abs(nt - theta), initial=0.0)
                    theta = nt
                    if step < UNDISTORT_TOL:
                        break
            if check and np.any(theta > FISHEYE_MAX_THETA):
                raise GeometryError("pixel beyond the fisheye model's valid angle")
            with np.errstate(invalid="ignore", divide="ignore"):
                s = np.where(theta_d > 0, np.sin(theta) / np.where(theta_d > 0, theta_d, 1.0), 0.0)
            rays = np.stack([xd * s, yd * s, np.cos(theta)], axis=-1)
            if not check:
                rays[theta > FISHEYE_MAX_THETA] = np.nan
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


def unproject_pixel(cam: CameraIntrinsics, pixel) -> np.ndarray:
    return cam.unproject(np.asarray(pixel, dtype=float))


def project_ray(cam: CameraIntrinsics, ray) -> np.ndarray:
    uv = cam.project(np.asarray(ray, dtype=float))
    if not np.all(np.isfinite(uv)):
        raise GeometryError("ray cannot be imaged by this camera")
    return uv


def ground_hits(pose: RigPose, rays):
    """Intersect camera-frame rays with the rig plane ``z = 0``.

    Returns ``(x, y, valid)``; invalid where the ray does not point below
    the horizon or the camera is not above the plane.
    """
    d = np.asarray(rays, dtype=float) @ pose.rotation.T
    h = pose.translation[2]
    dz = d[..., 2]
    valid = (dz < -HORIZON_EPS) & (h > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(valid, -h / np.where(valid, dz, -1.0), np.nan)
    x = pose.translation[0] + t * d[..., 0]
    y = pose.translation[1] + t * d[..., 1]
    return x, y, valid


def project_to_ground(pose: RigPose, ray) -> PolarPoint | None:
    x, y, valid = ground_hits(pose, np.asarray(ray, dtype=float))
    if not bool(valid):
        return None
    return to_polar(float(x), float(y))


@dataclass(frozen=True)
class Camera:
    name: str
    intrinsics: CameraIntrinsics
    pose: RigPose
    group: str = "default"


@dataclass(frozen=True)
class CameraRig:
    name: str
    cameras: tuple[Camera, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.cameras)

    def camera(self, name: str) -> Camera:
        for c in self.cameras:
            if c.name == name:
                return c
        raise KeyError(name)


def camera_from_record(rec: dict) -> Camera:
    known = {"name", "model", "fx", "fy", "cx", "cy", "width", "height", "distortion",
             "yaw", "pitch", "roll", "xyz", "max_range", "group"}
    unknown = set(rec) - known
    if unknown:
        raise GeometryError(f"unknown camera keys: {sorted(unknown)}")
    intr = CameraIntrinsics(
        model=rec["model"],
        fx=float(rec["fx"]),
        fy=float(rec["fy"]),
        cx=float(rec["cx"]),
        cy=float(rec["cy"]),
        width=int(rec["width"]),
        height=int(rec["height"]),
        distortion=tuple(rec.get("distortion", ())),
        max_range=float(rec.get("max_range", 200.0)),
    )
    pose = RigPose.from_mount(
        math.radians(rec.get("yaw", 0.0)),
        math.radians(rec.get("pitch", 0.0)),
        math.radians(rec.get("roll", 0.0)),
        rec.get("xyz", (0.0, 0.0, 0.0)),
    )
    return Camera(rec["name"], intr, pose, rec.get("group", "default"))


def rig_from_dict(doc: dict) -> CameraRig:
    return CameraRig(doc["name"], tuple(camera_from_record(r) for r in doc["cameras"]))


def load_rig(path) -> CameraRig:
    """Load a rig file: YAML with ``name`` and a ``cameras`` list.

    Each camera record carries ``model, fx, fy, cx, cy, width, height,
    distortion, yaw, pitch, roll`` (degrees), ``xyz`` (meters) and
    ``max_range``.
    """
    with open(path) as fh:
        return rig_from_dict(yaml.safe_load(fh))


def save_rig(rig_doc: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(rig_doc, sort_keys=False))

