"""Camera model, rigid transforms and the CAVE screen layout.

Conventions used everywhere in the package:

* World frame: origin at the floor centre, Z up, metres.
* Camera frame: ``x_cam = R @ X + t`` with x right, y down, z forward.
* Pixels: origin top-left, u right, v down.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LayoutError, NonPositiveDepth, OutOfPanel, UnknownScreen

MIN_DEPTH = 1e-9


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation_from_axis_angle(r) -> np.ndarray:
    """Rodrigues formula: rotation by ``|r|`` radians about ``r / |r|``."""
    r = np.asarray(r, dtype=np.float64)
    theta = float(np.linalg.norm(r))
    if theta < 1e-12:
        # second order keeps the result orthonormal to ~1e-24
        K = skew(r)
        return np.eye(3) + K + 0.5 * K @ K
    k = r / theta
    K = skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def axis_angle_from_rotation(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_t)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        return 0.5 * w
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; take the axis from R + I
        B = 0.5 * (R + np.eye(3))
        i = int(np.argmax(np.diag(B)))
        axis = B[:, i] / np.sqrt(B[i, i])
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return axis * theta
    sin_t = np.sin(theta)
    return w * (theta / (2.0 * sin_t))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    ortho = np.linalg.norm(R.T @ R - np.eye(3))
    return bool(ortho <= tol and abs(np.linalg.det(R) - 1.0) <= tol)


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


@dataclass(frozen=True)
class Pose:
    """World-to-camera rigid transform: ``x_cam = rotation @ X + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, r, t) -> "Pose":
        return cls(rotation_from_axis_angle(r), t)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        return is_rotation(self.rotation, tol) and bool(np.all(np.isfinite(self.translation)))


def compose(a: Pose, b: Pose) -> Pose:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    Rt = a.rotation.T
    return Pose(Rt, -Rt @ a.translation)


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose of a camera at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        raise ValueError("viewing direction parallel to up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Pose(R, -R @ eye)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return self.k1 != 0.0 or self.k2 != 0.0

    def with_params(self, fx, fy, cx, cy) -> "Intrinsics":
        return Intrinsics(float(fx), float(fy), float(cx), float(cy), self.k1, self.k2)


def distort(xn, k1: float, k2: float) -> np.ndarray:
    xn = np.asarray(xn, dtype=np.float64)
    if k1 == 0.0 and k2 == 0.0:
        return xn
    r2 = np.sum(xn * xn, axis=-1, keepdims=True)
    return xn * (1.0 + k1 * r2 + k2 * r2 * r2)


def undistort(xd, k1: float, k2: float, iters: int = 20) -> np.ndarray:
    xd = np.asarray(xd, dtype=np.float64)
    if k1 == 0.0 and k2 == 0.0:
        return xd
    xn = xd.copy()
    for _ in range(iters):
        r2 = np.sum(xn * xn, axis=-1, keepdims=True)
        xn = xd / (1.0 + k1 * r2 + k2 * r2 * r2)
    return xn


@dataclass(frozen=True)
class CameraModel:
    id: int
    intrinsics: Intrinsics
    pose: Pose
    image_size: tuple[int, int] = (1920, 1080)

    def __post_init__(self):
        w, h = self.image_size
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")

    @property
    def projection_matrix(self) -> np.ndarray:
        """3x4 pinhole matrix ``K [R | t]`` (ignores distortion)."""
        return self.intrinsics.K @ np.hstack([self.pose.rotation, self.pose.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        return self.pose.center

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        w, h = self.image_size
        return (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)


def project_points(camera: CameraModel, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection; returns ``(uv, depth)``. No depth check is made."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = camera.pose.apply(pts)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        xn = pc[:, :2] / z[:, None]
    k = camera.intrinsics
    xd = distort(xn, k.k1, k.k2)
    uv = np.column_stack([k.fx * xd[:, 0] + k.cx, k.fy * xd[:, 1] + k.cy])
    return uv, z


def project(camera: CameraModel, p) -> np.ndarray:
    uv, z = project_points(camera, p)
    if not z[0] > MIN_DEPTH:
        raise NonPositiveDepth(f"camera {camera.id}: depth {z[0]:.3g} <= {MIN_DEPTH}")
    return uv[0]


def normalized_coords(camera: CameraModel, uv) -> np.ndarray:
    """Pixels to undistorted normalised image coordinates."""
    uv = np.asarray(uv, dtype=np.float64)
    k = camera.intrinsics
    xd = np.stack([(uv[..., 0] - k.cx) / k.fx, (uv[..., 1] - k.cy) / k.fy], axis=-1)
    return undistort(xd, k.k1, k.k2)


# ---------------------------------------------------------------------------
# CAVE layout


@dataclass(frozen=True)
class ScreenPanel:
    screen_id: int
    name: str
    origin: np.ndarray
    axis_u: np.ndarray
    axis_v: np.ndarray
    width: float
    height: float
    resolution: tuple[int, int] = (3840, 2400)

    def __post_init__(self):
        for attr in ("origin", "axis_u", "axis_v"):
            object.__setattr__(self, attr, np.asarray(getattr(self, attr), dtype=np.float64).reshape(3))
        u, v = self.axis_u, self.axis_v
        if abs(np.linalg.norm(u) - 1) > 1e-9 or abs(np.linalg.norm(v) - 1) > 1e-9 or abs(u @ v) > 1e-9:
            raise LayoutError(f"panel {self.screen_id}: axes not orthonormal")
        if self.width <= 0 or self.height <= 0:
            raise LayoutError(f"panel {self.screen_id}: non-positive extent")

    @property
    def normal(self) -> np.ndarray:
        """Unit normal pointing into the room."""
        return np.cross(self.axis_u, self.axis_v)

    def to_world(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        return self.origin + s[..., 0:1] * self.axis_u + s[..., 1:2] * self.axis_v


@dataclass(frozen=True)
class CaveLayout:
    panels: tuple[ScreenPanel, ...]

    def panel(self, screen_id: int) -> ScreenPanel:
        for p in self.panels:
            if p.screen_id == screen_id:
                return p
        raise UnknownScreen(f"no screen with id {screen_id}")

    @classmethod
    def default(cls, side: float = 4.0, height: float = 2.5) -> "CaveLayout":
        """Four vertical walls around a ``side`` x ``side`` floor."""
        h = side / 2.0
        z = (0.0, 0.0, 1.0)
        specs = [
            ("front", (-h, h, 0.0), (1.0, 0.0, 0.0)),
            ("right", (h, h, 0.0), (0.0, -1.0, 0.0)),
            ("back", (h, -h, 0.0), (-1.0, 0.0, 0.0)),
            ("left", (-h, -h, 0.0), (0.0, 1.0, 0.0)),
        ]
        return cls(tuple(
            ScreenPanel(i, name, origin, u, z, side, height) for i, (name, origin, u) in enumerate(specs)
        ))

    def to_dict(self) -> dict:
        return {
            "panels": [
                {
                    "screen_id": p.screen_id,
                    "name": p.name,
                    "origin": p.origin.tolist(),
                    "axis_u": p.axis_u.tolist(),
                    "axis_v": p.axis_v.tolist(),
                    "width": p.width,
                    "height": p.height,
                    "resolution": list(p.resolution),
                }
                for p in self.panels
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaveLayout":
        try:
            panels = tuple(
                ScreenPanel(
                    int(p["screen_id"]),
                    str(p.get("name", f"screen{p['screen_id']}")),
                    p["origin"],
                    p["axis_u"],
                    p["axis_v"],
                    float(p["width"]),
                    float(p["height"]),
                    tuple(p.get("resolution", (3840, 2400))),
                )
                for p in d["panels"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutError(f"malformed layout: {exc}") from exc
        if len({p.screen_id for p in panels}) != len(panels):
            raise LayoutError("duplicate screen ids")
        return cls(panels)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CaveLayout":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise LayoutError(f"{path}: {exc}") from exc
        return cls.from_dict(d)


def screen_to_world(layout: CaveLayout, screen_id: int, s) -> np.ndarray:
    panel = layout.panel(screen_id)
    s = np.asarray(s, dtype=np.float64)
    tol = 1e-12
    if s[0] < -tol or s[0] > panel.width + tol or s[1] < -tol or s[1] > panel.height + tol:
        raise OutOfPanel(f"({s[0]}, {s[1]}) outside {panel.width} x {panel.height} panel {screen_id}")
    return panel.to_world(s)


# ---------------------------------------------------------------------------
# Default capture rig


def default_cameras(
    layout: CaveLayout | None = None,
    mount_height: float = 2.3,
    inset: float = 0.15,
    image_size=(1920, 1080),
) -> list[CameraModel]:
    """Four corner-mounted cameras aimed at a point above the floor centre."""
    layout = layout or CaveLayout.default()
    xs = [p.origin for p in layout.panels]
    half = max(abs(o[0]) for o in xs)
    c = half - inset
    corners = [(-c, -c), (c, -c), (c, c), (-c, c)]
    # small per-camera differences so intrinsics recovery is not trivially shared
    focal = [(900.0, 902.0), (910.0, 908.0), (895.0, 896.0), (905.0, 903.0)]
    principal = [(960.0, 540.0), (955.0, 545.0), (963.0, 538.0), (958.0, 542.0)]
    cams = []
    for i, (x, y) in enumerate(corners):
        pose = look_at((x, y, mount_height), (0.0, 0.0, 1.2))
        fx, fy = focal[i]
        cx, cy = principal[i]
        cams.append(CameraModel(i, Intrinsics(fx, fy, cx, cy), pose, tuple(image_size)))
    return cams
