"""Procedural dynamic test scenes with closed-form ground truth.

Scenes are sums of moving primitives (Gaussian blobs and soft-edged
boxes) on closed-form trajectories, so density, color, depth, flow,
and visibility all have independent analytic answers. This module is
the reference against which the learned pipeline is tested, and the
source of synthetic datasets and exact flow priors.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from defield.geometry import BoundingBox, Camera, intersect_box, look_at_pose, save_rig


@dataclass
class Trajectory:
    """Closed-form center path; kinds: static, orbit, linear.

    orbit: circle of ``radius`` in the xy-plane around ``center``,
    ``revolutions`` full turns across the clip. linear: ``center`` +
    (t-1) * ``velocity``.
    """

    kind: str = "static"
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    revolutions: float = 1.0
    phase: float = 0.0
    velocity: tuple = (0.0, 0.0, 0.0)

    def position(self, t, n_frames: int) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "static":
            return np.broadcast_to(c, t.shape + (3,)).copy()
        if self.kind == "orbit":
            span = max(n_frames - 1, 1)
            ang = self.phase + 2.0 * np.pi * self.revolutions * (t - 1.0) / span
            out = np.empty(t.shape + (3,))
            out[..., 0] = c[0] + self.radius * np.cos(ang)
            out[..., 1] = c[1] + self.radius * np.sin(ang)
            out[..., 2] = c[2]
            return out
        if self.kind == "linear":
            v = np.asarray(self.velocity, dtype=np.float64)
            return c + (t - 1.0)[..., None] * v
        raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def to_json(self):
        return {
            "kind": self.kind, "center": list(self.center),
            "radius": self.radius, "revolutions": self.revolutions,
            "phase": self.phase, "velocity": list(self.velocity),
        }

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["center"] = tuple(obj["center"])
        obj["velocity"] = tuple(obj.get("velocity", (0.0, 0.0, 0.0)))
        return cls(**obj)


@dataclass
class Element:
    """One primitive: 'blob' (isotropic Gaussian) or 'box' (soft-edged).

    Blobs use ``size`` as the Gaussian sigma; boxes use ``extents`` as
    half-widths with a sixth-power falloff, smooth enough for sampling
    convergence."""

    kind: str
    trajectory: Trajectory
    amplitude: float
    color: tuple
    size: float = 0.25
    extents: tuple = (0.4, 0.4, 0.4)

    def density(self, rel: np.ndarray) -> np.ndarray:
        """Density at offsets from the element center; rel (M,3)."""
        if self.kind == "blob":
            q = np.sum(rel ** 2, axis=-1) / (2.0 * self.size ** 2)
        elif self.kind == "box":
            h = np.asarray(self.extents, dtype=np.float64)
            q = np.sum((rel / h) ** 6, axis=-1)
        else:
            raise ValueError(f"unknown element kind {self.kind!r}")
        return self.amplitude * np.exp(-q)

    def sample_offsets(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Points attached to the element, in its local frame."""
        if self.kind == "blob":
            return rng.normal(0.0, 0.5 * self.size, (n, 3))
        h = np.asarray(self.extents, dtype=np.float64)
        return rng.uniform(-0.7, 0.7, (n, 3)) * h

    def to_json(self):
        return {
            "kind": self.kind, "trajectory": self.trajectory.to_json(),
            "amplitude": self.amplitude, "color": list(self.color),
            "size": self.size, "extents": list(self.extents),
        }

    @classmethod
    def from_json(cls, obj):
        obj = dict(obj)
        obj["trajectory"] = Trajectory.from_json(obj["trajectory"])
        obj["color"] = tuple(obj["color"])
        obj["extents"] = tuple(obj.get("extents", (0.4, 0.4, 0.4)))
        return cls(**obj)


@dataclass
class SyntheticScene:
    elements: list
    n_frames: int
    box: BoundingBox
    name: str = "custom"

    def centers(self, t) -> np.ndarray:
        """(E,3) element centers at frame t (scalar)."""
        return np.stack([
            e.trajectory.position(np.float64(t), self.n_frames)
            for e in self.elements
        ])

    def densities(self, points: np.ndarray, t) -> np.ndarray:
        """Per-element densities, (E, M)."""
        points = np.atleast_2d(points)
        cs = self.centers(t)
        return np.stack([
            e.density(points - cs[i][None, :])
            for i, e in enumerate(self.elements)
        ])

    def oracle_sigma_color(self, points: np.ndarray, t):
        """Closed-form (sigma (M,), rgb (M,3)) at frame t."""
        dens = self.densities(points, t)
        sigma = dens.sum(axis=0)
        cols = np.array([e.color for e in self.elements])
        rgb = dens.T @ cols
        safe = np.maximum(sigma, 1e-300)
        rgb = np.where(sigma[:, None] > 0.0, rgb / safe[:, None], 0.0)
        return sigma, rgb

    def dominant_element(self, points: np.ndarray, t) -> np.ndarray:
        """Index of the highest-density element at each point; -1 in
        (near-)empty space."""
        dens = self.densities(points, t)
        owner = np.argmax(dens, axis=0)
        owner[dens.max(axis=0) < 1e-6] = -1
        return owner

    def oracle_flow(self, points: np.ndarray, t, s) -> np.ndarray:
        """Exact displacement of primitive-attached points from t to s."""
        points = np.atleast_2d(points)
        owner = self.dominant_element(points, t)
        move = self.centers(s) - self.centers(t)
        flow = np.zeros_like(points)
        ok = owner >= 0
        flow[ok] = move[owner[ok]]
        return flow

    def advect_points(self, points: np.ndarray, t, s):
        """(moved points, owner element ids) for occlusion checks."""
        points = np.atleast_2d(points)
        owner = self.dominant_element(points, t)
        return points + self.oracle_flow(points, t, s), owner

    def transmittance(self, origin: np.ndarray, points: np.ndarray, t,
                      steps: int = 96, exclude=None) -> np.ndarray:
        """exp(-integral of sigma) from origin to each point, midpoint rule.

        exclude: optional (M,) element ids whose density is ignored
        (a tracked point should not occlude itself)."""
        points = np.atleast_2d(points)
        seg = points - origin[None, :]
        length = np.linalg.norm(seg, axis=1)
        frac = (np.arange(steps) + 0.5) / steps
        pos = origin[None, None, :] + frac[None, :, None] * seg[:, None, :]
        flat = pos.reshape(-1, 3)
        dens = self.densities(flat, t)
        if exclude is not None:
            for ei in range(len(self.elements)):
                hit = np.asarray(exclude) == ei
                if np.any(hit):
                    dens[ei].reshape(points.shape[0], steps)[hit] = 0.0
        sigma = dens.sum(axis=0).reshape(points.shape[0], steps)
        tau = sigma.sum(axis=1) * (length / steps)
        return np.exp(-tau)

    def track_points(self, n_per_element: int, rng: np.random.Generator):
        """(element_ids (K,), local offsets (K,3)) of tracked points."""
        ids = []
        offs = []
        for i, e in enumerate(self.elements):
            o = e.sample_offsets(n_per_element, rng)
            offs.append(o)
            ids.append(np.full(o.shape[0], i, dtype=np.int64))
        return np.concatenate(ids), np.concatenate(offs)

    def track_positions(self, track, t) -> np.ndarray:
        ids, offs = track
        return self.centers(t)[ids] + offs

    def oracle_render(self, camera: Camera, t, n_samples: int = 512,
                      chunk: int = 1024):
        """Independent ray-marched reference render.

        Composites with transmittance * local opacity at uniform bin
        centers; written directly in numpy, separate from the engine's
        kernels. Returns (rgb (H,W,3), depth (H,W), acc (H,W))."""
        h, w = camera.height, camera.width
        xs, ys = np.meshgrid(np.arange(w, dtype=np.float64),
                             np.arange(h, dtype=np.float64))
        pixels = np.stack([xs.ravel(), ys.ravel()], axis=1)
        rgb = np.zeros((h * w, 3))
        depth = np.zeros(h * w)
        acc = np.zeros(h * w)
        for lo in range(0, pixels.shape[0], chunk):
            hi = min(pixels.shape[0], lo + chunk)
            pix = pixels[lo:hi]
            dirs = camera.directions_for_pixels(pix)
            origins = np.broadcast_to(camera.origin, dirs.shape)
            t_enter, t_exit, hit = intersect_box(origins, dirs, self.box)
            t_enter = np.where(hit, t_enter, 1.0)
            t_exit = np.where(hit, t_exit, 1.0 + 1e-6)
            frac = (np.arange(n_samples) + 0.5) / n_samples
            z = t_enter[:, None] + frac[None, :] * (t_exit - t_enter)[:, None]
            pos = origins[:, None, :] + z[..., None] * dirs[:, None, :]
            sigma, cols = self.oracle_sigma_color(pos.reshape(-1, 3), t)
            sigma = sigma.reshape(z.shape)
            cols = cols.reshape(z.shape + (3,))
            delta = np.empty_like(z)
            delta[:, 0] = z[:, 0] - t_enter
            delta[:, 1:] = z[:, 1:] - z[:, :-1]
            alpha = 1.0 - np.exp(-delta * sigma)
            trans = np.cumprod(1.0 - alpha + 0.0, axis=1)
            trans = np.concatenate(
                [np.ones((z.shape[0], 1)), trans[:, :-1]], axis=1
            )
            wgt = trans * alpha
            rgb[lo:hi] = np.einsum("rn,rnc->rc", wgt, cols)
            depth[lo:hi] = np.einsum("rn,rn->r", wgt, z)
            acc[lo:hi] = wgt.sum(axis=1)
        return rgb.reshape(h, w, 3), depth.reshape(h, w), acc.reshape(h, w)

    def to_json(self):
        return {
            "name": self.name,
            "n_frames": self.n_frames,
            "box": self.box.to_json(),
            "elements": [e.to_json() for e in self.elements],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            elements=[Element.from_json(e) for e in obj["elements"]],
            n_frames=int(obj["n_frames"]),
            box=BoundingBox.from_json(obj["box"]),
            name=obj.get("name", "custom"),
        )


def make_blob_orbit(n_frames: int = 60) -> SyntheticScene:
    """Default benchmark scene: a static soft box plus an orbiting blob."""
    box = BoundingBox(np.array([-1.5, -1.5, -1.1]), np.array([1.5, 1.5, 1.1]))
    elements = [
        Element(
            kind="box",
            trajectory=Trajectory(kind="static", center=(0.35, -0.4, -0.45)),
            amplitude=25.0,
            color=(0.25, 0.45, 0.85),
            extents=(0.5, 0.45, 0.35),
        ),
        Element(
            kind="blob",
            trajectory=Trajectory(
                kind="orbit", center=(-0.1, 0.15, 0.3), radius=0.75,
                revolutions=1.0, phase=0.7,
            ),
            amplitude=30.0,
            color=(0.9, 0.55, 0.15),
            size=0.22,
        ),
    ]
    return SyntheticScene(
        elements=elements, n_frames=n_frames, box=box, name="blob-orbit"
    )


def make_arc_rig(n_cameras: int = 3, image_size: int = 64,
                 distance: float = 4.2, spread_deg: float = 64.0,
                 height: float = 0.55, focal: float = None):
    """Cameras on a horizontal arc, all looking at the origin."""
    if focal is None:
        focal = image_size * 1.0
    cams = []
    if n_cameras == 1:
        angles = [0.0]
    else:
        angles = np.linspace(-spread_deg / 2, spread_deg / 2, n_cameras)
    for i, a in enumerate(angles):
        rad = np.deg2rad(a)
        eye = np.array([
            distance * np.sin(rad), -distance * np.cos(rad), height
        ])
        pose = look_at_pose(eye, np.zeros(3))
        c = (image_size - 1) / 2.0
        k = np.array([[focal, 0.0, c], [0.0, focal, c], [0.0, 0.0, 1.0]])
        cams.append(Camera(
            intrinsics=k, world_from_camera=pose,
            width=image_size, height=image_size, index=i + 1,
        ))
    return cams


SCENES = {"blob-orbit": make_blob_orbit}


def emit_dataset(scene: SyntheticScene, cameras, out_dir,
                 render_samples: int = 256, prior_offset: int = 10,
                 n_sparse: int = 24, dense_stride: int = 4,
                 noise_rate: float = 0.0, noise_px: float = 20.0,
                 seed: int = 0):
    """Write the full synthetic dataset directory.

    Layout: rig.json, scene.json, meta.json, cam_<v>/frame_<t>.png,
    depth_gt/cam_<v>/frame_<t>.f32(+.json), priors_sparse.csv,
    priors_dense.csv, priors_depth.csv. Deterministic for a fixed seed.
    """
    from defield import priors as priors_mod
    from defield.renderer import save_color_png, save_depth_f32

    os.makedirs(out_dir, exist_ok=True)
    save_rig(cameras, os.path.join(out_dir, "rig.json"))
    with open(os.path.join(out_dir, "scene.json"), "w", encoding="utf-8") as f:
        json.dump(scene.to_json(), f, indent=1)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as f:
        json.dump({
            "n_frames": scene.n_frames,
            "n_cameras": len(cameras),
            "width": cameras[0].width,
            "height": cameras[0].height,
            "box": scene.box.to_json(),
            "seed": seed,
        }, f, indent=1)

    depth_maps = {}
    for cam in cameras:
        cam_dir = os.path.join(out_dir, f"cam_{cam.index}")
        gt_dir = os.path.join(out_dir, "depth_gt", f"cam_{cam.index}")
        os.makedirs(cam_dir, exist_ok=True)
        os.makedirs(gt_dir, exist_ok=True)
        for t in range(1, scene.n_frames + 1):
            rgb, depth, acc = scene.oracle_render(cam, t, render_samples)
            save_color_png(os.path.join(cam_dir, f"frame_{t}.png"), rgb)
            save_depth_f32(os.path.join(gt_dir, f"frame_{t}.f32"), depth)
            save_depth_f32(os.path.join(gt_dir, f"frame_{t}_acc.f32"), acc)
            depth_maps[(cam.index, t)] = (depth, acc)

    sparse, dense = priors_mod.synth_priors(
        scene, cameras, offset=prior_offset, n_sparse=n_sparse,
        dense_stride=dense_stride, noise_rate=noise_rate,
        noise_px=noise_px, seed=seed, depth_maps=depth_maps,
    )
    priors_mod.save_flow_priors(
        os.path.join(out_dir, "priors_sparse.csv"), sparse
    )
    priors_mod.save_flow_priors(
        os.path.join(out_dir, "priors_dense.csv"), dense
    )
    depth_records = priors_mod.synth_depth_priors(
        scene, cameras, n_points=n_sparse, seed=seed
    )
    priors_mod.save_depth_priors(
        os.path.join(out_dir, "priors_depth.csv"), depth_records
    )
    return out_dir
