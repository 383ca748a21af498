"""The two neural fields.

MotionField maps a world point and a frame index to the scene flow
that carries the point to the canonical frame. CanonicalField maps a
canonical-frame point (plus view direction and time) to volume density
and color. Both are a factorized plane grid followed by a small MLP;
forward passes retain caches so the analytic backward can reach every
plane entry and MLP weight.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

from defield.geometry import BoundingBox
from defield.grids import PlaneGridSet, build_grid_set


def softplus(x):
    return np.logaddexp(0.0, x)


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class Encoding:
    """Sinusoidal frequency encoding with frequencies pi * 2^k."""

    num_frequencies: int
    include_input: bool = True

    def output_dim(self, input_dim: int) -> int:
        return input_dim * (2 * self.num_frequencies + int(self.include_input))

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        parts = [x] if self.include_input else []
        for k in range(self.num_frequencies):
            f = np.pi * (2.0 ** k)
            parts.append(np.sin(f * x))
            parts.append(np.cos(f * x))
        if not parts:
            return np.zeros((x.shape[0], 0))
        return np.concatenate(parts, axis=1)

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        """d(upstream . encoding)/dx; upstream (M, output_dim)."""
        x = np.atleast_2d(x)
        d = x.shape[1]
        col = 0
        dx = np.zeros_like(x)
        if self.include_input:
            dx += upstream[:, :d]
            col = d
        for k in range(self.num_frequencies):
            f = np.pi * (2.0 ** k)
            dx += upstream[:, col:col + d] * f * np.cos(f * x)
            col += d
            dx += upstream[:, col:col + d] * (-f) * np.sin(f * x)
            col += d
        return dx


class TinyMLP:
    """Fully-connected net, ReLU hidden activations, linear output.

    Weights are stored (fan_in, fan_out) so a batch forward is x @ W + b.
    """

    def __init__(self, name, sizes, rng: np.random.Generator,
                 zero_output: bool = False, zero_input_rows=None,
                 dtype=np.float64):
        self.name = name
        self.sizes = list(sizes)
        self.dtype = np.dtype(dtype)
        self.weights = []
        self.biases = []
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            last = i == n_layers - 1
            if last and zero_output:
                w = np.zeros((fan_in, fan_out))
            elif last:
                s = np.sqrt(6.0 / (fan_in + fan_out))
                w = rng.uniform(-s, s, (fan_in, fan_out))
            else:
                s = np.sqrt(6.0 / fan_in)
                w = rng.uniform(-s, s, (fan_in, fan_out))
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        if zero_input_rows is not None:
            self.weights[0][np.asarray(zero_input_rows)] = 0.0

    def parameters(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}/W{i}"] = w
            out[f"{self.name}/b{i}"] = b
        return out

    def load_parameters(self, arrays):
        for key, value in self.parameters().items():
            src = arrays[key]
            if src.shape != value.shape:
                raise ValueError(
                    f"{key}: shape {src.shape} != expected {value.shape}"
                )
            value[...] = src

    def forward(self, x: np.ndarray):
        """Returns (y, cache); cache holds pre-activations for backward."""
        acts = [x]
        pre = []
        h = x
        n = len(self.weights)
        for i in range(n):
            a = h @ self.weights[i] + self.biases[i]
            pre.append(a)
            h = relu(a) if i < n - 1 else a
            acts.append(h)
        return h, (acts, pre)

    def backward(self, cache, dy: np.ndarray, grads: dict) -> np.ndarray:
        """Accumulate parameter gradients; returns gradient w.r.t. input."""
        acts, pre = cache
        n = len(self.weights)
        d = dy.astype(self.dtype, copy=False)
        for i in range(n - 1, -1, -1):
            if i < n - 1:
                d = d * (pre[i] > 0)
            wk, bk = f"{self.name}/W{i}", f"{self.name}/b{i}"
            gw = grads.get(wk)
            if gw is None:
                grads[wk] = acts[i].T @ d
                grads[bk] = d.sum(axis=0)
            else:
                gw += acts[i].T @ d
                grads[bk] += d.sum(axis=0)
            d = d @ self.weights[i].T
        return d


@dataclass
class ModelConfig:
    """Shapes and hyperparameters of the two fields."""

    n_frames: int = 60
    bbox_lo: tuple = (-2.0, -2.0, -2.0)
    bbox_hi: tuple = (2.0, 2.0, 2.0)
    canonical_time: int = 1
    motion_levels: tuple = (32, 64)
    motion_time_levels: tuple = None  # default: n_frames//4, n_frames//2
    motion_feature_dim: int = 8
    canonical_levels: tuple = (64, 128)
    canonical_feature_dim: int = 16
    motion_mlp_width: int = 64
    motion_mlp_hidden: int = 2
    color_mlp_width: int = 64
    color_mlp_hidden: int = 2
    dir_frequencies: int = 4
    time_frequencies: int = 6
    density_bias: float = 0.0
    dtype: str = "float32"  # parameter/activation precision

    def box(self) -> BoundingBox:
        return BoundingBox(np.array(self.bbox_lo), np.array(self.bbox_hi))

    def to_json(self):
        d = dict(self.__dict__)
        for k in ("bbox_lo", "bbox_hi", "motion_levels", "motion_time_levels",
                  "canonical_levels"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_json(cls, obj):
        kwargs = dict(obj)
        for k in ("bbox_lo", "bbox_hi", "motion_levels", "motion_time_levels",
                  "canonical_levels"):
            if kwargs.get(k) is not None:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs)


def normalize_time(t, n_frames: int):
    """1-based frame index -> [0,1]; a single frame maps to 0."""
    t = np.asarray(t, dtype=np.float64)
    if n_frames <= 1:
        return np.zeros_like(t)
    return (t - 1.0) / (n_frames - 1.0)


class MotionField:
    """Scene flow from time t to the canonical time, world units."""

    def __init__(self, gridset: PlaneGridSet, mlp: TinyMLP,
                 box: BoundingBox, n_frames: int, canonical_time: int = 1):
        self.gridset = gridset
        self.mlp = mlp
        self.box = box
        self.n_frames = n_frames
        self.canonical_time = canonical_time

    def parameters(self):
        out = self.gridset.parameters()
        out.update(self.mlp.parameters())
        return out

    def forward(self, points: np.ndarray, t_norm: np.ndarray):
        """points (M,3) world, t_norm (M,) in [0,1] -> (flow (M,3), cache)."""
        pn = self.box.normalize(points)
        pts4 = np.concatenate([pn, t_norm[:, None]], axis=1)
        feat, grid_cache = self.gridset.forward(pts4)
        flow, mlp_cache = self.mlp.forward(feat)
        return flow, (grid_cache, mlp_cache)

    def backward(self, cache, dflow: np.ndarray, grads: dict):
        grid_cache, mlp_cache = cache
        dfeat = self.mlp.backward(
            mlp_cache, dflow.astype(self.mlp.dtype, copy=False), grads
        )
        self.gridset.backward(grid_cache, dfeat, grads, need_point_grad=False)

    def flow(self, points: np.ndarray, t) -> np.ndarray:
        """Scene flow at world points for frame t (scalar or (M,))."""
        points = np.atleast_2d(points)
        t_norm = np.broadcast_to(
            normalize_time(t, self.n_frames), (points.shape[0],)
        )
        out, _ = self.forward(points, np.ascontiguousarray(t_norm))
        return out


class CanonicalField:
    """Density and view/time-conditioned color of the canonical scene."""

    def __init__(self, gridset: PlaneGridSet, color_mlp: TinyMLP,
                 box: BoundingBox, n_frames: int,
                 dir_encoding: Encoding, time_encoding: Encoding,
                 density_bias: float = 0.0):
        self.gridset = gridset
        self.color_mlp = color_mlp
        self.box = box
        self.n_frames = n_frames
        self.dir_encoding = dir_encoding
        self.time_encoding = time_encoding
        self.density_bias = density_bias

    def parameters(self):
        out = self.gridset.parameters()
        out.update(self.color_mlp.parameters())
        return out

    def forward(self, points: np.ndarray, view_dirs: np.ndarray,
                t_norm: np.ndarray):
        """(sigma (M,), rgb (M,3), cache) at canonical-frame world points."""
        dt = self.color_mlp.dtype
        pn = self.box.normalize(points)
        feat, grid_cache = self.gridset.forward(pn)
        raw_sigma = feat[:, 0] + dt.type(self.density_bias)
        sigma = softplus(raw_sigma)
        enc_d = self.dir_encoding.forward(view_dirs.astype(dt, copy=False))
        enc_t = self.time_encoding.forward(
            t_norm[:, None].astype(dt, copy=False)
        )
        mlp_in = np.concatenate([feat[:, 1:], enc_d, enc_t], axis=1)
        raw_rgb, mlp_cache = self.color_mlp.forward(mlp_in)
        rgb = sigmoid(raw_rgb)
        cache = (pn, grid_cache, raw_sigma, raw_rgb, mlp_cache)
        return sigma, rgb, cache

    def backward(self, cache, dsigma: np.ndarray, drgb: np.ndarray,
                 grads: dict, need_point_grad: bool = True):
        """Returns dL/d(world point) (M,3) when requested, else None.

        The point gradient is zeroed on coordinates that fell outside
        the box (the clamp makes the field locally constant there)."""
        pn, grid_cache, raw_sigma, raw_rgb, mlp_cache = cache
        dt = self.color_mlp.dtype
        s = sigmoid(raw_rgb)
        draw_rgb = drgb * s * (1.0 - s)
        dmlp_in = self.color_mlp.backward(
            mlp_cache, draw_rgb.astype(dt, copy=False), grads
        )
        latent_dim = self.gridset.feature_dim - 1
        dfeat = np.empty((pn.shape[0], self.gridset.feature_dim), dtype=dt)
        dfeat[:, 0] = dsigma * sigmoid(raw_sigma)
        dfeat[:, 1:] = dmlp_in[:, :latent_dim]
        pg = self.gridset.backward(
            grid_cache, dfeat, grads, need_point_grad=need_point_grad
        )
        if not need_point_grad:
            return None
        pg[(pn < 0.0) | (pn > 1.0)] = 0.0
        return pg / self.box.extent[None, :]

    def query(self, points: np.ndarray, view_dirs: np.ndarray, t):
        """(sigma, rgb) at world points for frame t; dirs must be unit."""
        points = np.atleast_2d(points)
        view_dirs = np.atleast_2d(view_dirs)
        t_norm = np.ascontiguousarray(np.broadcast_to(
            normalize_time(t, self.n_frames), (points.shape[0],)
        ))
        sigma, rgb, _ = self.forward(points, view_dirs, t_norm)
        return sigma, rgb


@dataclass
class FieldBundle:
    motion: MotionField
    canonical: CanonicalField
    config: ModelConfig

    def parameters(self):
        out = self.motion.parameters()
        out.update(self.canonical.parameters())
        return out

    def load_parameters(self, arrays):
        self.motion.gridset.load_parameters(
            {k: v for k, v in arrays.items() if k.startswith("Gf/")}
        )
        self.canonical.gridset.load_parameters(
            {k: v for k, v in arrays.items() if k.startswith("Gs/")}
        )
        self.motion.mlp.load_parameters(
            {k: v for k, v in arrays.items() if k.startswith("Mf/")}
        )
        self.canonical.color_mlp.load_parameters(
            {k: v for k, v in arrays.items() if k.startswith("Ms/")}
        )


def build_fields(config: ModelConfig, rng: np.random.Generator) -> FieldBundle:
    """Construct freshly initialized motion and canonical fields.

    The motion MLP output layer and the color MLP's time-input rows are
    zeroed, so a new model is an identity deformation of a
    time-constant scene."""
    box = config.box()
    dtype = np.dtype(config.dtype)
    t_levels = config.motion_time_levels
    if t_levels is None:
        t_levels = tuple(
            max(2, config.n_frames // d) for d in (4, 2)
        )[: len(config.motion_levels)]
    motion_res = [
        {"x": r, "y": r, "z": r, "t": tr}
        for r, tr in zip(config.motion_levels, t_levels)
    ]
    gf = build_grid_set(
        "Gf", "spatiotemporal4", motion_res, config.motion_feature_dim, rng,
        dtype=dtype,
    )
    mf_sizes = (
        [gf.feature_dim]
        + [config.motion_mlp_width] * config.motion_mlp_hidden
        + [3]
    )
    mf = TinyMLP("Mf", mf_sizes, rng, zero_output=True, dtype=dtype)
    motion = MotionField(gf, mf, box, config.n_frames, config.canonical_time)

    canon_res = [{"x": r, "y": r, "z": r} for r in config.canonical_levels]
    gs = build_grid_set(
        "Gs", "spatial3", canon_res, config.canonical_feature_dim, rng,
        dtype=dtype,
    )
    dir_enc = Encoding(config.dir_frequencies)
    time_enc = Encoding(config.time_frequencies)
    latent = gs.feature_dim - 1
    in_dim = latent + dir_enc.output_dim(3) + time_enc.output_dim(1)
    ms_sizes = (
        [in_dim] + [config.color_mlp_width] * config.color_mlp_hidden + [3]
    )
    time_rows = np.arange(in_dim - time_enc.output_dim(1), in_dim)
    ms = TinyMLP("Ms", ms_sizes, rng, zero_input_rows=time_rows, dtype=dtype)
    canonical = CanonicalField(
        gs, ms, box, config.n_frames, dir_enc, time_enc, config.density_bias
    )
    return FieldBundle(motion=motion, canonical=canonical, config=config)
