"""Pinhole cameras, quaternions, and point-map algebra.

Conventions used everywhere downstream:
  - extrinsics are world-to-camera: x_cam = R x_world + t
  - quaternions are (w, x, y, z), unit norm, sign-canonicalized to w >= 0
  - pixel (u, v) rays through ((u-cx)/fx, (v-cy)/fy, 1), integer pixel coords
  - invalid depth sentinel is 0 with mask False; valid depth is always > 0
"""

from dataclasses import dataclass

import numpy as np

from .container import read_bundle, write_bundle

Z_NEAR = 1e-3


# ---------------------------------------------------------------- quaternions

def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("zero-norm quaternion")
    q = q / n
    if q[0] < 0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(m):
    m = np.asarray(m, dtype=np.float64)
    # Shepperd's method: pick the largest diagonal combination for stability
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s,
                      (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s,
                      0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def quat_rotate(q, pts):
    """Rotate points of shape (..., 3) by quaternion q."""
    return np.asarray(pts) @ quat_to_matrix(q).T


def rotation_angle_between(qa, qb):
    """Geodesic angle in radians between two rotations.

    Uses the chord length, which stays accurate near zero where the
    dot-product arccos form loses half the digits.
    """
    qa, qb = quat_normalize(qa), quat_normalize(qb)
    chord = min(np.linalg.norm(qa - qb), np.linalg.norm(qa + qb))
    return 4.0 * np.arcsin(min(chord / 2.0, 1.0))


# ---------------------------------------------------------------- domain types

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"degenerate focal lengths ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self):
        return np.array([[self.fx, 0, self.cx],
                         [0, self.fy, self.cy],
                         [0, 0, 1.0]])


@dataclass(frozen=True)
class CameraExtrinsics:
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))

    def matrix(self):
        """4x4 world-to-camera."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m

    def world_to_cam(self, pts):
        return quat_rotate(self.rotation, pts) + self.translation

    def cam_to_world(self, pts):
        return quat_rotate(quat_conjugate(self.rotation),
                           np.asarray(pts) - self.translation)


def identity_extrinsics():
    return CameraExtrinsics(np.array([1.0, 0, 0, 0]), np.zeros(3))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64))

    def apply(self, pts):
        return quat_rotate(self.rotation, pts) + self.translation

    def inverse(self):
        qi = quat_conjugate(self.rotation)
        return RigidTransform(qi, -quat_rotate(qi, self.translation))


def compose(t2, t1):
    """Transform equal to applying t1 first, then t2."""
    return RigidTransform(quat_multiply(t2.rotation, t1.rotation),
                          quat_rotate(t2.rotation, t1.translation)
                          + t2.translation)


def identity_transform():
    return RigidTransform(np.array([1.0, 0, 0, 0]), np.zeros(3))


def world_to_reference(ref_ext):
    """Rigid map from world coordinates into the reference camera frame.

    The shared reference frame is a chosen camera (first view of the
    first frame, by convention downstream); the map is just its
    world-to-camera extrinsics viewed as a transform.
    """
    return RigidTransform(ref_ext.rotation, ref_ext.translation)


def camera_to_reference(ext, ref_ext):
    """Rigid map taking points in ext's camera frame into ref_ext's."""
    inv = RigidTransform(ext.rotation, ext.translation).inverse()
    return compose(world_to_reference(ref_ext), inv)


@dataclass(frozen=True)
class PointMap:
    points: np.ndarray  # (3, H, W), meters, reference frame
    valid: np.ndarray   # (H, W) bool
    frame_id: tuple     # (view, time)

    def __post_init__(self):
        if self.points.shape[0] != 3 or self.points.shape[1:] != self.valid.shape:
            raise ValueError(f"shape mismatch {self.points.shape} vs "
                             f"{self.valid.shape}")


@dataclass(frozen=True)
class DisplacementField:
    delta: np.ndarray  # (3, H, W), meters
    valid: np.ndarray  # (H, W) bool


# ---------------------------------------------------------------- projection

def pixel_grid(height, width):
    v, u = np.meshgrid(np.arange(height, dtype=np.float64),
                       np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def unproject(depth, intrinsics, extrinsics, frame_id=(0, 0)):
    """Lift a depth map to world-frame 3D points, one per pixel."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth) & (depth > 0)
    d = np.where(valid, depth, 0.0)
    u, v = pixel_grid(*depth.shape)
    x = (u - intrinsics.cx) / intrinsics.fx * d
    y = (v - intrinsics.cy) / intrinsics.fy * d
    cam = np.stack([x, y, d], axis=-1)
    world = extrinsics.cam_to_world(cam.reshape(-1, 3)).reshape(cam.shape)
    world = np.where(valid[..., None], world, 0.0)
    return PointMap(np.moveaxis(world, -1, 0), valid, tuple(frame_id))


def project(pointmap, intrinsics, extrinsics):
    """Pinhole projection of a PointMap.

    Returns (pixels (2,H,W), depth (H,W)).  Pixels behind the camera or
    invalid in the input get the depth-0 sentinel; depth > 0 is the mask.
    """
    pts = np.moveaxis(pointmap.points, 0, -1)
    cam = extrinsics.world_to_cam(pts.reshape(-1, 3)).reshape(pts.shape)
    z = cam[..., 2]
    valid = pointmap.valid & (z > Z_NEAR)
    zs = np.where(valid, z, 1.0)
    u = intrinsics.fx * cam[..., 0] / zs + intrinsics.cx
    v = intrinsics.fy * cam[..., 1] / zs + intrinsics.cy
    pixels = np.where(valid, np.stack([u, v]), 0.0)
    depth = np.where(valid, z, 0.0)
    return pixels, depth


def to_reference(pointmap, transform):
    """Apply a rigid transform to every valid point; masks unchanged."""
    pts = np.moveaxis(pointmap.points, 0, -1)
    moved = transform.apply(pts.reshape(-1, 3)).reshape(pts.shape)
    moved = np.where(pointmap.valid[..., None], moved, 0.0)
    return PointMap(np.moveaxis(moved, -1, 0), pointmap.valid,
                    pointmap.frame_id)


def displacement(pm_t, pm_next):
    """Per-pixel motion between two point maps of the same view stream."""
    if pm_t.points.shape != pm_next.points.shape:
        raise ValueError(f"resolution mismatch {pm_t.points.shape} vs "
                         f"{pm_next.points.shape}")
    valid = pm_t.valid & pm_next.valid
    delta = np.where(valid[None], pm_next.points - pm_t.points, 0.0)
    return DisplacementField(delta, valid)


# ---------------------------------------------------------------- 9-vector camera

def camera_encode(intrinsics, extrinsics):
    """Pack a camera as [quat(4), trans(3), fov_y, fov_x], fov in radians."""
    fov_y = 2.0 * np.arctan(intrinsics.height / (2.0 * intrinsics.fy))
    fov_x = 2.0 * np.arctan(intrinsics.width / (2.0 * intrinsics.fx))
    return np.concatenate([quat_normalize(extrinsics.rotation),
                           extrinsics.translation, [fov_y, fov_x]])


def camera_decode(g, width, height):
    """Inverse of camera_encode for a centered principal point.

    The 9-vector carries no principal point or extents, so the decoded
    intrinsics place cx, cy at the image center of the given extents.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (9,):
        raise ValueError(f"camera vector must have 9 entries, got {g.shape}")
    q = quat_normalize(g[:4])
    fov_y, fov_x = g[7], g[8]
    if not (0 < fov_y < np.pi and 0 < fov_x < np.pi):
        raise ValueError(f"fov out of range ({fov_y}, {fov_x})")
    fy = height / (2.0 * np.tan(fov_y / 2.0))
    fx = width / (2.0 * np.tan(fov_x / 2.0))
    intr = CameraIntrinsics(fx, fy, width / 2.0, height / 2.0, width, height)
    return intr, CameraExtrinsics(q, g[4:7])


# ---------------------------------------------------------------- serialization

def write_pointmap(path, pointmap, intrinsics, extrinsics):
    meta = {
        "fx": intrinsics.fx, "fy": intrinsics.fy,
        "cx": intrinsics.cx, "cy": intrinsics.cy,
        "width": intrinsics.width, "height": intrinsics.height,
        "quat_wxyz": [float(x) for x in extrinsics.rotation],
        "trans_xyz": [float(x) for x in extrinsics.translation],
        "view": int(pointmap.frame_id[0]), "time": int(pointmap.frame_id[1]),
    }
    write_bundle(path, {"points": pointmap.points, "valid": pointmap.valid},
                 meta)


def read_pointmap(path):
    named, meta = read_bundle(path)
    pm = PointMap(named["points"], named["valid"],
                  (meta["view"], meta["time"]))
    intr = CameraIntrinsics(meta["fx"], meta["fy"], meta["cx"], meta["cy"],
                            meta["width"], meta["height"])
    ext = CameraExtrinsics(np.array(meta["quat_wxyz"]),
                           np.array(meta["trans_xyz"]))
    return pm, intr, ext
