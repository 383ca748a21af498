"""Flow and depth prior records, their CSV wire format, and selection.

Sparse records match a pixel at (t, v) to a pixel at (s, u) in any
camera; dense records are within-camera (u = v). ``synth_priors``
replaces the real-footage extraction tools at desk scale: it emits
exact correspondences from a synthetic scene's closed-form motion,
optionally corrupted with outliers.

Float columns are written with 6 significant digits, so generators
quantize coordinates at record-creation time; a written file then
round-trips bit-exactly.
"""

from dataclasses import dataclass

import numpy as np

FLOW_HEADER = "kind,t,v,x,y,s,u,xp,yp,conf"
DEPTH_HEADER = "t,v,x,y,z,conf"


class PriorFormatError(ValueError):
    pass


def _q6(value: float) -> float:
    """Quantize to the 6-significant-digit wire precision."""
    return float(f"{float(value):.6g}")


@dataclass
class FlowPriorRecord:
    kind: str  # 'sparse' | 'dense'
    t: int
    v: int
    x: float
    y: float
    s: int
    u: int
    xp: float
    yp: float
    conf: float = 1.0


@dataclass
class DepthPriorRecord:
    t: int
    v: int
    x: float
    y: float
    z: float
    conf: float = 1.0


def save_flow_priors(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(FLOW_HEADER + "\n")
        for r in records:
            f.write(
                f"{r.kind},{r.t},{r.v},{r.x:.6g},{r.y:.6g},"
                f"{r.s},{r.u},{r.xp:.6g},{r.yp:.6g},{r.conf:.6g}\n"
            )


def save_depth_priors(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(DEPTH_HEADER + "\n")
        for r in records:
            f.write(f"{r.t},{r.v},{r.x:.6g},{r.y:.6g},{r.z:.6g},{r.conf:.6g}\n")


def _check_pixel(x, y, cam, line_no, path, what):
    if not (0.0 <= x <= cam.width - 1 and 0.0 <= y <= cam.height - 1):
        raise PriorFormatError(
            f"{path}:{line_no}: {what} pixel ({x:g}, {y:g}) outside "
            f"{cam.width}x{cam.height} image"
        )


def load_flow_priors(path, cameras, n_frames: int):
    """Parse and validate a flow-prior CSV against the rig dimensions.

    Malformed rows, out-of-range indices, out-of-image pixels, and
    dense rows with u != v are rejected with their line number.
    """
    by_index = {c.index: c for c in cameras}
    records = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != FLOW_HEADER:
            raise PriorFormatError(
                f"{path}:1: bad header {header!r}, expected {FLOW_HEADER!r}"
            )
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 10:
                raise PriorFormatError(
                    f"{path}:{line_no}: expected 10 fields, got {len(parts)}"
                )
            try:
                kind = parts[0]
                t, v = int(parts[1]), int(parts[2])
                x, y = float(parts[3]), float(parts[4])
                s, u = int(parts[5]), int(parts[6])
                xp, yp = float(parts[7]), float(parts[8])
                conf = float(parts[9])
            except ValueError as exc:
                raise PriorFormatError(f"{path}:{line_no}: {exc}") from exc
            if kind not in ("sparse", "dense"):
                raise PriorFormatError(
                    f"{path}:{line_no}: unknown kind {kind!r}"
                )
            if not (1 <= t <= n_frames and 1 <= s <= n_frames):
                raise PriorFormatError(
                    f"{path}:{line_no}: frame index outside [1, {n_frames}]"
                )
            if v not in by_index or u not in by_index:
                raise PriorFormatError(
                    f"{path}:{line_no}: unknown camera index "
                    f"{v if v not in by_index else u}"
                )
            if kind == "dense" and v != u:
                raise PriorFormatError(
                    f"{path}:{line_no}: dense record must stay within one "
                    f"camera (v={v}, u={u})"
                )
            if not 0.0 <= conf <= 1.0:
                raise PriorFormatError(
                    f"{path}:{line_no}: confidence {conf:g} outside [0, 1]"
                )
            _check_pixel(x, y, by_index[v], line_no, path, "source")
            _check_pixel(xp, yp, by_index[u], line_no, path, "target")
            records.append(
                FlowPriorRecord(kind, t, v, x, y, s, u, xp, yp, conf)
            )
    return FlowPriorStore(records, n_frames)


def load_depth_priors(path, cameras, n_frames: int):
    by_index = {c.index: c for c in cameras}
    records = []
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip()
        if header != DEPTH_HEADER:
            raise PriorFormatError(
                f"{path}:1: bad header {header!r}, expected {DEPTH_HEADER!r}"
            )
        for line_no, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 6:
                raise PriorFormatError(
                    f"{path}:{line_no}: expected 6 fields, got {len(parts)}"
                )
            try:
                t, v = int(parts[0]), int(parts[1])
                x, y, z, conf = (float(p) for p in parts[2:])
            except ValueError as exc:
                raise PriorFormatError(f"{path}:{line_no}: {exc}") from exc
            if not 1 <= t <= n_frames:
                raise PriorFormatError(
                    f"{path}:{line_no}: frame index outside [1, {n_frames}]"
                )
            if v not in by_index:
                raise PriorFormatError(
                    f"{path}:{line_no}: unknown camera index {v}"
                )
            if z <= 0:
                raise PriorFormatError(
                    f"{path}:{line_no}: depth prior must be positive"
                )
            _check_pixel(x, y, by_index[v], line_no, path, "source")
            records.append(DepthPriorRecord(t, v, x, y, z, conf))
    return DepthPriorStore(records, n_frames)


class FlowPriorStore:
    """Immutable indexed store; lookup by (t, v) then target frame s."""

    def __init__(self, records, n_frames: int):
        self.records = list(records)
        self.n_frames = n_frames
        self._index = {}
        for i, r in enumerate(self.records):
            self._index.setdefault((r.t, r.v), {}).setdefault(r.s, []).append(i)

    def __len__(self):
        return len(self.records)

    def keys(self):
        return sorted(self._index.keys())

    def records_at(self, t: int, v: int, s: int):
        idx = self._index.get((t, v), {}).get(s, [])
        return [self.records[i] for i in idx]

    def select_pairs(self, t: int, v: int, rng: np.random.Generator,
                     offset: int = 10):
        """Matched pixel pairs for a training step at (t, v).

        The target frame is drawn uniformly from {t-offset, t+offset}
        restricted to [1, n_frames]; with both out of range, or no
        records at (t, v), the result is empty. Returns (sparse, dense)
        record lists; dense records always satisfy u = v.
        """
        eligible = [s for s in (t - offset, t + offset)
                    if 1 <= s <= self.n_frames]
        if not eligible:
            return [], []
        s = int(eligible[rng.integers(len(eligible))])
        recs = self.records_at(t, v, s)
        sparse = [r for r in recs if r.kind == "sparse"]
        dense = [r for r in recs if r.kind == "dense"]
        return sparse, dense


class DepthPriorStore:
    def __init__(self, records, n_frames: int):
        self.records = list(records)
        self.n_frames = n_frames
        self._index = {}
        for i, r in enumerate(self.records):
            self._index.setdefault((r.t, r.v), []).append(i)

    def __len__(self):
        return len(self.records)

    def records_at(self, t: int, v: int):
        return [self.records[i] for i in self._index.get((t, v), [])]


def inject_outliers(records, rate: float, magnitude_px: float,
                    cameras, rng: np.random.Generator):
    """Corrupt a fraction of records with fixed-magnitude target offsets.

    Mimics unreliable matchers: each corrupted record's target pixel is
    pushed ``magnitude_px`` pixels in a random direction (clamped to
    stay a valid pixel)."""
    by_index = {c.index: c for c in cameras}
    out = []
    for r in records:
        if rng.random() < rate:
            theta = rng.uniform(0.0, 2.0 * np.pi)
            cam = by_index[r.u]
            xp = np.clip(r.xp + magnitude_px * np.cos(theta), 0, cam.width - 1)
            yp = np.clip(r.yp + magnitude_px * np.sin(theta), 0, cam.height - 1)
            out.append(FlowPriorRecord(
                r.kind, r.t, r.v, r.x, r.y, r.s, r.u,
                _q6(xp), _q6(yp), r.conf,
            ))
        else:
            out.append(r)
    return out


def _visible(scene, camera, points, t, exclude=None, threshold=0.25):
    """Points both inside the image and not occluded from the camera.

    exclude: per-point element ids ignored in the occlusion integral,
    so a point attached to a primitive is not hidden by it."""
    pix, z_cam = camera.project(points)
    inside = (
        (z_cam > 1e-6)
        & (pix[:, 0] >= 0.0) & (pix[:, 0] <= camera.width - 1)
        & (pix[:, 1] >= 0.0) & (pix[:, 1] <= camera.height - 1)
    )
    trans = scene.transmittance(camera.origin, points, t, exclude=exclude)
    return pix, inside & (trans > threshold)


def synth_priors(scene, cameras, offset: int = 10, n_sparse: int = 30,
                 dense_stride: int = 4, noise_rate: float = 0.0,
                 noise_px: float = 20.0, seed: int = 0,
                 depth_maps=None):
    """Exact flow priors from a synthetic scene's closed-form motion.

    Sparse records: ``n_sparse`` points tracked on the scene elements,
    projected into every ordered cross-camera pair (v, u != v) at every
    valid (t, s = t +/- offset); occluded or out-of-image projections
    are skipped. Dense records: within-camera (u = v) per-pixel flow on
    a ``dense_stride`` pixel grid, using the oracle depth maps
    (``depth_maps[(v, t)]``, rendered when not supplied).

    Returns (sparse_records, dense_records).
    """
    rng = np.random.default_rng(seed)
    n_frames = scene.n_frames
    track = scene.track_points(n_sparse, rng)
    track_ids = track[0]
    sparse = []
    for t in range(1, n_frames + 1):
        for s in (t - offset, t + offset):
            if not 1 <= s <= n_frames:
                continue
            pts_t = scene.track_positions(track, t)
            pts_s = scene.track_positions(track, s)
            for cam_v in cameras:
                pix_v, ok_v = _visible(scene, cam_v, pts_t, t, track_ids)
                for cam_u in cameras:
                    if cam_u.index == cam_v.index:
                        continue
                    pix_u, ok_u = _visible(scene, cam_u, pts_s, s, track_ids)
                    for i in np.flatnonzero(ok_v & ok_u):
                        sparse.append(FlowPriorRecord(
                            "sparse", t, cam_v.index,
                            _q6(pix_v[i, 0]), _q6(pix_v[i, 1]),
                            s, cam_u.index,
                            _q6(pix_u[i, 0]), _q6(pix_u[i, 1]), 1.0,
                        ))

    dense = []
    for cam in cameras:
        xs = np.arange(dense_stride // 2, cam.width, dense_stride)
        ys = np.arange(dense_stride // 2, cam.height, dense_stride)
        gx, gy = np.meshgrid(xs, ys)
        pix = np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)
        dirs = cam.directions_for_pixels(pix)
        for t in range(1, n_frames + 1):
            if depth_maps is not None and (cam.index, t) in depth_maps:
                depth, acc = depth_maps[(cam.index, t)]
            else:
                _, depth, acc = scene.oracle_render(cam, t, n_samples=256)
            z = depth[pix[:, 1].astype(int), pix[:, 0].astype(int)]
            a = acc[pix[:, 1].astype(int), pix[:, 0].astype(int)]
            solid = a > 0.5
            if not np.any(solid):
                continue
            p_world = cam.origin[None, :] + z[:, None] * dirs
            for s in (t - offset, t + offset):
                if not 1 <= s <= n_frames:
                    continue
                moved, owner = scene.advect_points(p_world[solid], t, s)
                pix_s, ok = _visible(scene, cam, moved, s, owner)
                src = pix[solid]
                for j in np.flatnonzero(ok):
                    dense.append(FlowPriorRecord(
                        "dense", t, cam.index,
                        _q6(src[j, 0]), _q6(src[j, 1]),
                        s, cam.index,
                        _q6(pix_s[j, 0]), _q6(pix_s[j, 1]), 1.0,
                    ))

    if noise_rate > 0.0:
        sparse = inject_outliers(sparse, noise_rate, noise_px, cameras, rng)
        dense = inject_outliers(dense, noise_rate, noise_px, cameras, rng)
    return sparse, dense


def synth_depth_priors(scene, cameras, n_points: int = 30, seed: int = 0):
    """Exact sparse depth supervision from tracked scene points."""
    rng = np.random.default_rng(seed)
    track = scene.track_points(n_points, rng)
    records = []
    for t in range(1, scene.n_frames + 1):
        pts = scene.track_positions(track, t)
        for cam in cameras:
            pix, ok = _visible(scene, cam, pts, t, track[0])
            depth_along_ray = np.linalg.norm(pts - cam.origin[None, :], axis=1)
            for i in np.flatnonzero(ok):
                records.append(DepthPriorRecord(
                    t, cam.index, _q6(pix[i, 0]), _q6(pix[i, 1]),
                    _q6(depth_along_ray[i]), 1.0,
                ))
    return records
