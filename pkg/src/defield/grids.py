"""Multi-resolution factorized plane grids.

A 3D (or 4D) field is stored as 2D feature planes, one per axis pair.
A query projects the point onto every plane of a level, bilinearly
interpolates, multiplies the plane features elementwise, and
concatenates the per-level results. The backward pass scatters
gradients to the (at most 4) touched nodes per plane and returns the
gradient with respect to the query point via the product rule.
"""

import logging
from dataclasses import dataclass

import numpy as np

from defield.kernels import bilerp_gather, planes_gather, planes_backward

log = logging.getLogger("defield.grids")

AXIS_INDEX = {"x": 0, "y": 1, "z": 2, "t": 3}
SPATIAL3_PLANES = ("xy", "yz", "xz")
SPATIOTEMPORAL4_PLANES = ("xy", "yz", "xz", "xt", "yt", "zt")

_clamp_warned = False


def _warn_clamp(name):
    global _clamp_warned
    if not _clamp_warned:
        log.warning(
            "grid %s queried outside [0,1]; coordinates clamped "
            "(reported once per run)", name,
        )
        _clamp_warned = True


@dataclass
class Plane:
    """One 2D feature plane; axes like 'xy' or 'zt', data (Ra, Rb, F)."""

    axes: str
    data: np.ndarray

    def __post_init__(self):
        if len(self.axes) != 2 or any(a not in AXIS_INDEX for a in self.axes):
            raise ValueError(f"bad plane axes {self.axes!r}")
        if self.data.ndim != 3 or min(self.data.shape[:2]) < 2:
            raise ValueError("plane data must be (Ra>=2, Rb>=2, F)")

    @property
    def resolution(self):
        return self.data.shape[:2]

    @property
    def feature_dim(self):
        return self.data.shape[2]


def interpolate_plane(plane: Plane, uv) -> np.ndarray:
    """Bilinear feature lookup at a single (u, v) in [0,1]^2."""
    uv = np.asarray(uv, dtype=np.float64)
    feat, *_ = bilerp_gather(
        plane.data, np.array([uv[0]]), np.array([uv[1]])
    )
    return feat[0]


class PlaneGridSet:
    """A named stack of plane levels factorizing a 3D or 4D volume.

    kind 'spatial3' holds planes {xy, yz, xz}; 'spatiotemporal4' adds
    {xt, yt, zt}. All planes within a level share a feature dimension;
    level outputs are concatenated.
    """

    def __init__(self, name: str, kind: str, levels):
        if kind == "spatial3":
            expected = SPATIAL3_PLANES
            self.point_dim = 3
        elif kind == "spatiotemporal4":
            expected = SPATIOTEMPORAL4_PLANES
            self.point_dim = 4
        else:
            raise ValueError(f"unknown grid kind {kind!r}")
        self.name = name
        self.kind = kind
        self.levels = []
        for li, planes in enumerate(levels):
            by_axes = {p.axes: p for p in planes}
            if set(by_axes) != set(expected) or len(by_axes) != len(planes):
                raise ValueError(
                    f"{name} level {li}: needs planes {expected}, got {tuple(by_axes)}"
                )
            ordered = [by_axes[a] for a in expected]
            dims = {p.feature_dim for p in ordered}
            if len(dims) != 1:
                raise ValueError(f"{name} level {li}: mixed feature dims {dims}")
            self.levels.append(ordered)
        self.feature_dims = [lv[0].feature_dim for lv in self.levels]
        self.axes_a = np.array([AXIS_INDEX[a[0]] for a in expected],
                               dtype=np.int64)
        self.axes_b = np.array([AXIS_INDEX[a[1]] for a in expected],
                               dtype=np.int64)

    @property
    def feature_dim(self):
        return sum(self.feature_dims)

    def plane_name(self, level: int, axes: str) -> str:
        return f"{self.name}/L{level}/{axes}"

    def parameters(self):
        out = {}
        for li, planes in enumerate(self.levels):
            for p in planes:
                out[self.plane_name(li, p.axes)] = p.data
        return out

    def load_parameters(self, arrays):
        for li, planes in enumerate(self.levels):
            for p in planes:
                src = arrays[self.plane_name(li, p.axes)]
                if src.shape != p.data.shape:
                    raise ValueError(
                        f"{self.plane_name(li, p.axes)}: shape {src.shape} "
                        f"!= expected {p.data.shape}"
                    )
                p.data[...] = src

    def forward(self, pts: np.ndarray):
        """Features (M, sum F) for normalized points (M, point_dim).

        Returns (features, cache); the cache carries everything the
        backward pass needs. Out-of-range coordinates clamp.
        """
        pts = np.ascontiguousarray(pts)
        if pts.ndim != 2 or pts.shape[1] != self.point_dim:
            raise ValueError(
                f"{self.name}: expected (M,{self.point_dim}) points, got {pts.shape}"
            )
        feats = []
        cache = []
        clamped = 0
        for planes in self.levels:
            data = tuple(p.data for p in planes)
            prod, idx, frac, taps, n_clamped = planes_gather(
                data, pts, self.axes_a, self.axes_b
            )
            clamped += n_clamped
            feats.append(prod)
            cache.append((idx, frac, taps))
        if clamped:
            _warn_clamp(self.name)
        if len(feats) == 1:
            return feats[0], cache
        return np.concatenate(feats, axis=1), cache

    def backward(self, cache, upstream: np.ndarray, grads: dict,
                 need_point_grad: bool = True):
        """Chain upstream (M, sum F) into plane gradients and, optionally,
        the gradient with respect to the normalized query point (M, d).

        Plane gradients accumulate into grads[plane_name] (created on
        first touch)."""
        m = upstream.shape[0]
        point_grad = np.zeros((m, self.point_dim)) if need_point_grad else None
        col = 0
        for li, planes in enumerate(self.levels):
            f_dim = self.feature_dims[li]
            up = np.ascontiguousarray(upstream[:, col:col + f_dim])
            col += f_dim
            idx, frac, taps = cache[li]
            data = tuple(p.data for p in planes)
            gbufs = []
            for p in planes:
                name = self.plane_name(li, p.axes)
                g = grads.get(name)
                if g is None:
                    g = grads[name] = np.zeros_like(p.data)
                gbufs.append(g)
            pg = planes_backward(
                data, tuple(gbufs), idx, frac, taps, up,
                self.axes_a, self.axes_b, need_point_grad, self.point_dim,
            )
            if need_point_grad:
                point_grad += pg
        return point_grad


def combine_features(gridset: PlaneGridSet, point) -> np.ndarray:
    """Single-point convenience wrapper around PlaneGridSet.forward."""
    feat, _ = gridset.forward(np.asarray(point, dtype=np.float64)[None, :])
    return feat[0]


def combine_features_backward(gridset: PlaneGridSet, point, upstream):
    """Single-point forward + backward; returns (plane_grads, point_grad)."""
    pts = np.asarray(point, dtype=np.float64)[None, :]
    _, cache = gridset.forward(pts)
    grads = {}
    pg = gridset.backward(
        cache, np.asarray(upstream, dtype=np.float64)[None, :], grads
    )
    return grads, pg[0]


def build_grid_set(
    name: str,
    kind: str,
    level_resolutions,
    feature_dims,
    rng: np.random.Generator,
    spatial_scale: float = 0.2,
    temporal_value: float = 1.0,
    dtype=np.float64,
) -> PlaneGridSet:
    """Allocate and initialize a grid set.

    level_resolutions: one dict per level mapping axis -> node count,
    e.g. {"x": 64, "y": 64, "z": 64} (plus "t" for spatiotemporal4).
    Spatial planes start uniform in [-spatial_scale, spatial_scale];
    planes touching the t axis start at exactly temporal_value so the
    temporal factor is the multiplicative identity at init.
    """
    plane_axes = SPATIAL3_PLANES if kind == "spatial3" else SPATIOTEMPORAL4_PLANES
    if np.isscalar(feature_dims):
        feature_dims = [feature_dims] * len(level_resolutions)
    dtype = np.dtype(dtype)
    levels = []
    for res, fdim in zip(level_resolutions, feature_dims):
        planes = []
        for axes in plane_axes:
            ra, rb = res[axes[0]], res[axes[1]]
            if "t" in axes:
                data = np.full((ra, rb, fdim), temporal_value, dtype=dtype)
            else:
                data = rng.uniform(
                    -spatial_scale, spatial_scale, (ra, rb, fdim)
                ).astype(dtype)
            planes.append(Plane(axes=axes, data=data))
        levels.append(planes)
    return PlaneGridSet(name=name, kind=kind, levels=levels)
