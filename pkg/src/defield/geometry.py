"""Cameras, rays, and point sampling for a static multi-camera rig.

Conventions: pinhole intrinsics K with pixel coordinates measured at
pixel centers (the principal point of a centered W x H image is at
((W-1)/2, (H-1)/2)); camera looks down +z in its own frame; poses are
world-from-camera rigid transforms. Frame indices t and camera indices
v are 1-based.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from defield.kernels import uniform01
from defield.kernels import numpy_impl as _hash


class GeometryError(ValueError):
    pass


@dataclass
class BoundingBox:
    """Axis-aligned scene bounds in world units."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise GeometryError("bounding box corners must be 3-vectors")
        if not np.all(self.hi > self.lo):
            raise GeometryError("bounding box must have positive extent")

    @property
    def extent(self) -> np.ndarray:
        return self.hi - self.lo

    def normalize(self, points: np.ndarray) -> np.ndarray:
        """Map world points into [0,1]^3 (no clamping here)."""
        return (points - self.lo) / self.extent

    def clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lo, self.hi)

    def to_json(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["lo"]), np.array(obj["hi"]))


@dataclass
class Camera:
    """Pinhole camera with a fixed pose.

    intrinsics: (3,3) K matrix in pixels; world_from_camera: (4,4)
    rigid transform; index: 1-based camera id v.
    """

    intrinsics: np.ndarray
    world_from_camera: np.ndarray
    width: int
    height: int
    index: int = 1
    allow_skew: bool = False

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.world_from_camera = np.asarray(
            self.world_from_camera, dtype=np.float64
        )
        k = self.intrinsics
        if k.shape != (3, 3):
            raise GeometryError("intrinsics must be 3x3")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        if not self.allow_skew and abs(k[0, 1]) > 1e-12:
            raise GeometryError("nonzero skew requires allow_skew=True")
        if self.world_from_camera.shape != (4, 4):
            raise GeometryError("pose must be 4x4")
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise GeometryError("pose rotation block is not orthonormal")
        if self.index < 1:
            raise GeometryError("camera index is 1-based")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    def pixel_in_bounds(self, x, y) -> bool:
        return 0.0 <= x <= self.width - 1 and 0.0 <= y <= self.height - 1

    def directions_for_pixels(self, pixels: np.ndarray) -> np.ndarray:
        """Unit world-space ray directions for (M,2) pixel coordinates."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
        ones = np.ones((pixels.shape[0], 1))
        homog = np.concatenate([pixels, ones], axis=1)
        d_cam = np.linalg.solve(self.intrinsics, homog.T).T
        d_world = d_cam @ self.rotation.T
        return d_world / np.linalg.norm(d_world, axis=1, keepdims=True)

    def project(self, points: np.ndarray):
        """World points (M,3) -> pixel coords (M,2) and camera-frame depth (M,)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        p_cam = (points - self.origin) @ self.rotation
        z = p_cam[:, 2]
        pix_h = p_cam @ self.intrinsics.T
        with np.errstate(divide="ignore", invalid="ignore"):
            pix = pix_h[:, :2] / pix_h[:, 2:3]
        return pix, z

    def to_json(self):
        return {
            "K": self.intrinsics.tolist(),
            "pose_w_from_c": self.world_from_camera.tolist(),
            "width": int(self.width),
            "height": int(self.height),
        }


def save_rig(cameras, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([c.to_json() for c in cameras], f, indent=1)


def load_rig(path):
    """Load a camera rig JSON file (a list of camera entries, row-major)."""
    with open(path, "r", encoding="utf-8") as f:
        entries = json.load(f)
    if not isinstance(entries, list) or not entries:
        raise GeometryError(f"{path}: rig file must be a non-empty list")
    cams = []
    for i, e in enumerate(entries):
        try:
            cams.append(
                Camera(
                    intrinsics=np.array(e["K"], dtype=np.float64),
                    world_from_camera=np.array(
                        e["pose_w_from_c"], dtype=np.float64
                    ),
                    width=int(e["width"]),
                    height=int(e["height"]),
                    index=i + 1,
                )
            )
        except (KeyError, GeometryError) as exc:
            raise GeometryError(f"{path}: camera {i + 1}: {exc}") from exc
    return cams


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-from-camera pose for a camera at eye looking at target (+z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = down
    pose[:3, 2] = fwd
    pose[:3, 3] = eye
    return pose


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float
    pixel: tuple = (0.0, 0.0)
    t: int = 1
    cam_index: int = 1

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise GeometryError("ray direction must be unit length")
        if not self.near < self.far:
            raise GeometryError("ray must have near < far")
        if self.t < 1:
            raise GeometryError("frame index is 1-based")


@dataclass
class RayBatch:
    """Structure-of-arrays ray bundle; all shapes share leading R."""

    origins: np.ndarray  # (R,3)
    directions: np.ndarray  # (R,3) unit
    near: np.ndarray  # (R,)
    far: np.ndarray  # (R,)
    pixels: np.ndarray  # (R,2)
    t: np.ndarray  # (R,) int
    cam_index: np.ndarray  # (R,) int

    def __len__(self):
        return self.origins.shape[0]

    @classmethod
    def single(cls, ray: Ray):
        return cls(
            origins=ray.origin[None],
            directions=ray.direction[None],
            near=np.array([ray.near]),
            far=np.array([ray.far]),
            pixels=np.array([[ray.pixel[0], ray.pixel[1]]]),
            t=np.array([ray.t], dtype=np.int64),
            cam_index=np.array([ray.cam_index], dtype=np.int64),
        )


@dataclass
class SampleSet:
    positions: np.ndarray  # (N,3), clamped into the scene box
    depths: np.ndarray  # (N,) strictly increasing
    deltas: np.ndarray  # (N,), deltas[0] = depths[0] - near


def intersect_box(origins, directions, box: BoundingBox):
    """Slab test; returns (t_enter, t_exit, hit) per ray, t clipped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (box.lo[None, :] - origins) * inv
        t1 = (box.hi[None, :] - origins) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # axis-parallel rays: ignore that axis when the origin is inside the slab
    inside = (origins >= box.lo[None, :]) & (origins <= box.hi[None, :])
    par = directions == 0.0
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_enter = np.max(lo, axis=1)
    t_exit = np.min(hi, axis=1)
    t_enter = np.maximum(t_enter, 0.0)
    hit = t_exit > t_enter
    return t_enter, t_exit, hit


def ray_for_pixel(
    camera: Camera,
    pixel,
    t: int,
    box: BoundingBox = None,
    near: float = 0.1,
    far: float = 10.0,
) -> Ray:
    """Ray through a pixel center at frame t; near/far from the scene box
    when one is given (global near/far as fallback for missed rays)."""
    x, y = float(pixel[0]), float(pixel[1])
    if not camera.pixel_in_bounds(x, y):
        raise GeometryError(
            f"pixel ({x}, {y}) outside {camera.width}x{camera.height} image"
        )
    d = camera.directions_for_pixels(np.array([[x, y]]))[0]
    o = camera.origin
    if box is not None:
        t_enter, t_exit, hit = intersect_box(o[None], d[None], box)
        if hit[0]:
            near, far = float(t_enter[0]), float(t_exit[0])
    return Ray(
        origin=o, direction=d, near=near, far=far,
        pixel=(x, y), t=int(t), cam_index=camera.index,
    )


def rays_for_pixels(
    camera: Camera, pixels, t, box: BoundingBox = None,
    near: float = 0.1, far: float = 10.0,
) -> RayBatch:
    """Batched ray construction; t may be a scalar or (R,) array."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    r = pixels.shape[0]
    dirs = camera.directions_for_pixels(pixels)
    origins = np.broadcast_to(camera.origin, (r, 3)).copy()
    nears = np.full(r, near)
    fars = np.full(r, far)
    if box is not None:
        t_enter, t_exit, hit = intersect_box(origins, dirs, box)
        nears = np.where(hit, t_enter, near)
        fars = np.where(hit, t_exit, far)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.int64), (r,)).copy()
    return RayBatch(
        origins=origins,
        directions=dirs,
        near=nears,
        far=fars,
        pixels=pixels,
        t=t_arr,
        cam_index=np.full(r, camera.index, dtype=np.int64),
    )


def ray_keys(seed: int, batch: RayBatch) -> np.ndarray:
    """Order-independent uint64 stream keys from (seed, camera, t, pixel)."""
    px = np.ascontiguousarray(batch.pixels[:, 0]).view(np.uint64)
    py = np.ascontiguousarray(batch.pixels[:, 1]).view(np.uint64)
    k = _hash.splitmix64(np.full(len(batch), seed, dtype=np.uint64))
    k = _hash.splitmix64(k ^ batch.cam_index.astype(np.uint64))
    k = _hash.splitmix64(k ^ batch.t.astype(np.uint64))
    k = _hash.splitmix64(k ^ px)
    k = _hash.splitmix64(k ^ py)
    return k


def sample_depths(
    batch: RayBatch, n: int, mode: str = "stratified", seed: int = 0
):
    """Per-ray sample depths (R,n) and deltas (R,n).

    uniform: bin centers, deterministic. stratified: one jittered sample
    per equal-width bin, jitter drawn from the per-ray hash stream so
    results never depend on evaluation order.
    """
    if n < 1:
        raise GeometryError("need at least one sample per ray")
    if mode not in ("uniform", "stratified"):
        raise GeometryError(f"unknown sampling mode {mode!r}")
    r = len(batch)
    if mode == "uniform":
        u = np.full((r, n), 0.5)
    else:
        u = uniform01(ray_keys(seed, batch), n)
    span = (batch.far - batch.near)[:, None]
    depths = batch.near[:, None] + (np.arange(n)[None, :] + u) / n * span
    deltas = np.empty_like(depths)
    deltas[:, 0] = depths[:, 0] - batch.near
    deltas[:, 1:] = depths[:, 1:] - depths[:, :-1]
    return depths, deltas


def sample_positions(batch: RayBatch, depths: np.ndarray, box: BoundingBox):
    """World positions o + z*d, clamped into the scene box. (R,n,3)."""
    pos = batch.origins[:, None, :] + depths[..., None] * batch.directions[:, None, :]
    return box.clamp(pos)


def sample_along_ray(
    ray: Ray, n: int, mode: str, seed: int, box: BoundingBox
) -> SampleSet:
    """Single-ray sampling; the batched path with R = 1."""
    batch = RayBatch.single(ray)
    depths, deltas = sample_depths(batch, n, mode, seed)
    pos = sample_positions(batch, depths, box)
    return SampleSet(positions=pos[0], depths=depths[0], deltas=deltas[0])
