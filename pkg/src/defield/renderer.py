"""Differentiable volume rendering.

A ray is sampled, every sample is deformed to the canonical frame by
the motion field, the canonical field supplies density and color, and
the samples composite into pixel color, expected depth, and the
weighted canonical point. The backward pass routes upstream gradients
through the compositing weights (no stop-gradient anywhere) into both
fields' parameters.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from defield.fields import FieldBundle, normalize_time
from defield.geometry import (
    Ray, RayBatch, intersect_box, rays_for_pixels, sample_depths,
    sample_positions,
)
from defield.kernels import composite_forward, composite_backward


class RenderError(ValueError):
    pass


@dataclass
class RenderOptions:
    n_samples: int = 128
    mode: str = "stratified"
    seed: int = 0
    chunk_rays: int = 2048


@dataclass
class RenderBundle:
    """Batched render with retained intermediates; shapes (R, N, ...)."""

    batch: RayBatch
    depths: np.ndarray
    deltas: np.ndarray
    positions: np.ndarray
    t_norm: np.ndarray
    flow: np.ndarray
    p_prime: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    att: np.ndarray
    trans: np.ndarray
    weights: np.ndarray
    color: np.ndarray  # (R,3)
    depth: np.ndarray  # (R,)
    kappa: np.ndarray  # (R,3) weighted canonical point
    acc: np.ndarray  # (R,) accumulated opacity
    hit: np.ndarray  # (R,) ray intersects the scene box
    motion_cache: object = None
    canonical_cache: object = None


@dataclass
class RenderResult:
    """Single-ray view of a render, per the public contract."""

    color: np.ndarray
    depth: float
    weights: np.ndarray
    canonical_points: np.ndarray
    transmittances: np.ndarray
    valid: bool


def render_rays(batch: RayBatch, fields: FieldBundle,
                options: RenderOptions, retain: bool = True) -> RenderBundle:
    if not np.all(batch.far > batch.near):
        raise RenderError("degenerate ray: near >= far")
    r = len(batch)
    n = options.n_samples
    box = fields.canonical.box
    depths, deltas = sample_depths(batch, n, options.mode, options.seed)
    positions = sample_positions(batch, depths, box)
    t_norm = normalize_time(batch.t, fields.config.n_frames)

    flat_p = positions.reshape(r * n, 3)
    flat_t = np.repeat(t_norm, n)
    flow, motion_cache = fields.motion.forward(flat_p, flat_t)
    p_prime = flat_p + flow

    flat_d = np.repeat(batch.directions, n, axis=0)
    sigma, rgb, canon_cache = fields.canonical.forward(p_prime, flat_d, flat_t)

    sigma = sigma.reshape(r, n)
    rgb = rgb.reshape(r, n, 3)
    p_prime = p_prime.reshape(r, n, 3)
    # rays that miss the scene box carry no mass (their clamped sample
    # positions would otherwise pick up density from the box surface)
    hit = intersect_box(batch.origins, batch.directions, box)[2]
    if not np.all(hit):
        sigma = sigma * hit[:, None]
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    att, trans, weights = composite_forward(sigma, np.ascontiguousarray(deltas))
    color = np.einsum("rn,rnc->rc", weights, rgb)
    depth = np.einsum("rn,rn->r", weights, depths)
    kappa = np.einsum("rn,rnc->rc", weights, p_prime)
    acc = weights.sum(axis=1)
    return RenderBundle(
        batch=batch, depths=depths, deltas=deltas, positions=positions,
        t_norm=t_norm, flow=flow.reshape(r, n, 3), p_prime=p_prime,
        sigma=sigma, rgb=rgb, att=att, trans=trans, weights=weights,
        color=color, depth=depth, kappa=kappa, acc=acc, hit=hit,
        motion_cache=motion_cache if retain else None,
        canonical_cache=canon_cache if retain else None,
    )


def render_rays_backward(rb: RenderBundle, fields: FieldBundle, grads: dict,
                         dcolor=None, ddepth=None, dkappa=None,
                         dweights=None, dpprime=None):
    """Push upstream gradients into both fields' parameter gradients.

    Any of the upstream terms may be omitted. The canonical-point path
    keeps gradients flowing through both the weights and the deformed
    points, and the weight path reaches sigma and hence both fields.
    """
    if rb.motion_cache is None:
        raise RenderError("render bundle was not retained for backward")
    r, n = rb.sigma.shape
    dw = np.zeros((r, n))
    dp = np.zeros((r, n, 3))
    drgb = np.zeros((r, n, 3))
    if dcolor is not None:
        dw += np.einsum("rc,rnc->rn", dcolor, rb.rgb)
        drgb += dcolor[:, None, :] * rb.weights[:, :, None]
    if ddepth is not None:
        dw += ddepth[:, None] * rb.depths
    if dkappa is not None:
        dw += np.einsum("rc,rnc->rn", dkappa, rb.p_prime)
        dp += dkappa[:, None, :] * rb.weights[:, :, None]
    if dweights is not None:
        dw += dweights
    if dpprime is not None:
        dp += dpprime

    dsigma = composite_backward(dw, rb.att, rb.trans,
                                np.ascontiguousarray(rb.deltas))
    if not np.all(rb.hit):
        dsigma = dsigma * rb.hit[:, None]  # missed rays carry no signal
        dp = dp * rb.hit[:, None, None]
    dp_flat = fields.canonical.backward(
        rb.canonical_cache, dsigma.reshape(-1), drgb.reshape(-1, 3),
        grads, need_point_grad=True,
    )
    dp_flat = dp_flat + dp.reshape(-1, 3)
    # p' = p + flow with p fixed, so dL/dflow = dL/dp'
    fields.motion.backward(rb.motion_cache, dp_flat, grads)


def render_ray(ray: Ray, fields: FieldBundle,
               options: RenderOptions = None) -> RenderResult:
    """Render one ray; wraps the batched path with R = 1."""
    options = options or RenderOptions()
    rb = render_rays(RayBatch.single(ray), fields, options, retain=False)
    return RenderResult(
        color=rb.color[0],
        depth=float(rb.depth[0]),
        weights=rb.weights[0],
        canonical_points=rb.p_prime[0],
        transmittances=rb.trans[0],
        valid=bool(rb.acc[0] > 0.0),
    )


def render_image(camera, t: int, fields: FieldBundle,
                 options: RenderOptions = None):
    """Full-frame render; returns (rgb (H,W,3), depth (H,W), acc (H,W))."""
    options = options or RenderOptions()
    h, w = camera.height, camera.width
    box = fields.canonical.box
    rgb = np.zeros((h, w, 3))
    depth = np.zeros((h, w))
    acc = np.zeros((h, w))
    rows_per_chunk = max(1, options.chunk_rays // w)
    xs = np.arange(w, dtype=np.float64)
    for y0 in range(0, h, rows_per_chunk):
        y1 = min(h, y0 + rows_per_chunk)
        ys = np.arange(y0, y1, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        pixels = np.stack([gx.ravel(), gy.ravel()], axis=1)
        batch = rays_for_pixels(camera, pixels, t, box)
        rb = render_rays(batch, fields, options, retain=False)
        rgb[y0:y1] = rb.color.reshape(y1 - y0, w, 3)
        depth[y0:y1] = rb.depth.reshape(y1 - y0, w)
        acc[y0:y1] = rb.acc.reshape(y1 - y0, w)
    return rgb, depth, acc


def save_color_png(path, rgb: np.ndarray):
    """8-bit row-major PNG from float RGB in [0,1]."""
    q = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(q, mode="RGB").save(path)
    except OSError as exc:
        raise RenderError(f"writing {path}: {exc}") from exc


def load_color_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise RenderError(f"reading {path}: {exc}") from exc


def save_depth_f32(path, depth: np.ndarray):
    """Flat little-endian float32 array plus a JSON size sidecar."""
    depth = np.asarray(depth, dtype="<f4")
    try:
        depth.tofile(path)
        with open(str(path) + ".json", "w", encoding="utf-8") as f:
            json.dump({"width": depth.shape[1], "height": depth.shape[0]}, f)
    except OSError as exc:
        raise RenderError(f"writing {path}: {exc}") from exc


def load_depth_f32(path) -> np.ndarray:
    try:
        with open(str(path) + ".json", "r", encoding="utf-8") as f:
            meta = json.load(f)
        flat = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise RenderError(f"reading {path}: {exc}") from exc
    h, w = int(meta["height"]), int(meta["width"])
    if flat.size != h * w:
        raise RenderError(
            f"{path}: payload has {flat.size} values, sidecar says {h}x{w}"
        )
    return flat.reshape(h, w).astype(np.float64)
