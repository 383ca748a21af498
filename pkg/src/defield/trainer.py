"""Optimization loop: ray batching, prior-pair batching, loss assembly,
Adam updates, and checkpointing.

Every iteration draws its randomness from a counter-keyed generator
(seed, iteration), so runs are reproducible and resume exactly from a
checkpoint.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from defield import losses as L
from defield.container import load_container, save_container
from defield.dataset import VideoDataset
from defield.fields import FieldBundle, ModelConfig, build_fields
from defield.geometry import RayBatch, rays_for_pixels
from defield.renderer import (
    RenderOptions, render_image, render_rays, render_rays_backward,
    save_color_png, save_depth_f32,
)


class NumericalAbort(RuntimeError):
    """Raised when a loss term stops being finite."""

    def __init__(self, iteration, term, max_grad):
        self.iteration = iteration
        self.term = term
        self.max_grad = max_grad
        super().__init__(
            f"non-finite loss at iteration {iteration}: term {term}, "
            f"max |grad| {max_grad:.3e}"
        )


@dataclass
class TrainConfig:
    iterations: int = 30000
    batch_rays: int = 512
    prior_rays_per_batch: int = -1  # -1: 25% of batch_rays
    lambda_sf: float = 1.0
    lambda_df: float = 1.0
    lambda_sd: float = 0.0
    lr_grids: float = 1e-2
    lr_mlps: float = 1e-3
    warmup_steps: int = 512
    lr_floor: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    n_samples: int = 64
    sample_mode: str = "stratified"
    prior_offset: int = 10
    train_cameras: list = None  # camera indices; None = every camera
    checkpoint_every: int = 0  # 0: final checkpoint only
    eval_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr_grids <= 0 or self.lr_mlps <= 0:
            raise ValueError("learning rates must be positive")

    @property
    def prior_rays(self) -> int:
        if self.prior_rays_per_batch >= 0:
            return self.prior_rays_per_batch
        return self.batch_rays // 4

    def to_json(self):
        d = dict(self.__dict__)
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, obj):
        kwargs = dict(obj)
        if "model" in kwargs and not isinstance(kwargs["model"], ModelConfig):
            kwargs["model"] = ModelConfig.from_json(kwargs["model"])
        return cls(**kwargs)


def lr_schedule(step: int, total: int, warmup: int, floor: float) -> float:
    """Linear warmup then cosine decay to ``floor`` of the base rate."""
    w = min(1.0, (step + 1) / max(1, warmup))
    progress = min(1.0, step / max(1, total - 1))
    c = floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))
    return w * c


def adam_update(param, grad, m, v, rate, beta1, beta2, eps, step):
    """Bias-corrected Adam, in place; step is 1-based."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= rate * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class TrainState:
    """Learnable arrays plus optimizer moments and the step counter."""

    def __init__(self, fields: FieldBundle, config: TrainConfig):
        self.fields = fields
        self.config = config
        self.params = fields.parameters()
        self.m = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p) for k, p in self.params.items()}
        self.iteration = 0


def init_state(config: TrainConfig, dataset: VideoDataset) -> TrainState:
    """Build a fresh state with model geometry synced to the dataset."""
    model = ModelConfig.from_json(config.model.to_json())
    model.n_frames = dataset.n_frames
    model.bbox_lo = tuple(dataset.box.lo.tolist())
    model.bbox_hi = tuple(dataset.box.hi.tolist())
    config.model = model
    rng = np.random.default_rng(config.seed)
    fields = build_fields(model, rng)
    return TrainState(fields, config)


def checkpoint_save(path, state: TrainState):
    arrays = dict(state.params)
    for k in state.params:
        arrays[f"adam/m/{k}"] = state.m[k]
        arrays[f"adam/v/{k}"] = state.v[k]
    arrays["meta/iteration"] = np.array(float(state.iteration))
    save_container(path, arrays)
    with open(str(path) + ".json", "w", encoding="utf-8") as f:
        json.dump(state.config.to_json(), f, indent=1)


def checkpoint_load(path) -> TrainState:
    with open(str(path) + ".json", "r", encoding="utf-8") as f:
        config = TrainConfig.from_json(json.load(f))
    fields = build_fields(config.model, np.random.default_rng(config.seed))
    state = TrainState(fields, config)
    arrays = load_container(path)
    for k, p in state.params.items():
        for src_key, dst in (
            (k, p), (f"adam/m/{k}", state.m[k]), (f"adam/v/{k}", state.v[k]),
        ):
            if src_key not in arrays:
                raise ValueError(f"{path}: missing array {src_key}")
            src = arrays[src_key]
            if src.shape != dst.shape:
                raise ValueError(
                    f"{path}: {src_key}: shape {src.shape} != {dst.shape}"
                )
            dst[...] = src
    state.iteration = int(arrays["meta/iteration"].item())
    return state


def _step_rng(seed: int, iteration: int) -> np.random.Generator:
    key = np.array([seed & (2 ** 64 - 1), iteration], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def build_ray_batch(dataset: VideoDataset, cam_indices, ts, pixels) -> RayBatch:
    """Rays across mixed cameras, preserving input order."""
    r = len(cam_indices)
    origins = np.empty((r, 3))
    dirs = np.empty((r, 3))
    near = np.empty(r)
    far = np.empty(r)
    for ci in np.unique(cam_indices):
        mask = cam_indices == ci
        sub = rays_for_pixels(
            dataset.camera(int(ci)), pixels[mask], ts[mask], dataset.box
        )
        origins[mask] = sub.origins
        dirs[mask] = sub.directions
        near[mask] = sub.near
        far[mask] = sub.far
    return RayBatch(
        origins=origins, directions=dirs, near=near, far=far,
        pixels=np.asarray(pixels, dtype=np.float64),
        t=np.asarray(ts, dtype=np.int64),
        cam_index=np.asarray(cam_indices, dtype=np.int64),
    )


def _draw_prior_pairs(store, rng, n_sparse, n_dense, offset):
    """Sample matched pairs kind by kind until the quotas fill."""
    keys = store.keys()
    sparse, dense = [], []
    if not keys:
        return sparse, dense
    budget = 16 * (n_sparse + n_dense) + 16
    while (len(sparse) < n_sparse or len(dense) < n_dense) and budget > 0:
        budget -= 1
        t, v = keys[rng.integers(len(keys))]
        got_sp, got_dn = store.select_pairs(t, v, rng, offset)
        if got_sp and len(sparse) < n_sparse:
            take = min(4, n_sparse - len(sparse), len(got_sp))
            for i in rng.choice(len(got_sp), size=take, replace=False):
                sparse.append(got_sp[i])
        if got_dn and len(dense) < n_dense:
            take = min(4, n_dense - len(dense), len(got_dn))
            for i in rng.choice(len(got_dn), size=take, replace=False):
                dense.append(got_dn[i])
    return sparse, dense


def train_step(state: TrainState, dataset: VideoDataset, flow_store,
               depth_store=None) -> L.LossBreakdown:
    """One optimization step; every parameter the step used receives a
    gradient (asserted) and one Adam update.

    All ray groups (photometric, both sides of each flow pair, depth
    supervision) render as one combined batch, and a single backward
    pass carries the per-group upstream gradients."""
    cfg = state.config
    it = state.iteration
    rng = _step_rng(cfg.seed, it)
    step_seed = (cfg.seed ^ (0x9E3779B97F4A7C15 * (it + 1))) % (2 ** 64)
    opts = RenderOptions(
        n_samples=cfg.n_samples, mode=cfg.sample_mode, seed=step_seed
    )
    cams = cfg.train_cameras or [c.index for c in dataset.cameras]

    # photometric rays, uniform over (pixel, t, v)
    r = cfg.batch_rays
    cam_pick = np.asarray(cams)[rng.integers(len(cams), size=r)]
    ts = rng.integers(1, dataset.n_frames + 1, size=r)
    xs = rng.integers(0, dataset.width, size=r)
    ys = rng.integers(0, dataset.height, size=r)
    truth = np.empty((r, 3))
    for ci in np.unique(cam_pick):
        mask = cam_pick == ci
        truth[mask] = dataset.frames[ci][ts[mask] - 1, ys[mask], xs[mask]]

    # flow-prior pairs
    pair_quota = cfg.prior_rays // 4  # 2 kinds x 2 rays per pair
    want_sf = cfg.lambda_sf != 0.0 and flow_store is not None
    want_df = cfg.lambda_df != 0.0 and flow_store is not None
    sparse_recs, dense_recs = [], []
    if (want_sf or want_df) and flow_store is not None and len(flow_store):
        sparse_recs, dense_recs = _draw_prior_pairs(
            flow_store, rng,
            pair_quota if want_sf else 0,
            pair_quota if want_df else 0,
            cfg.prior_offset,
        )
    depth_recs = []
    if cfg.lambda_sd != 0.0 and depth_store is not None and len(depth_store):
        n_sd = min(pair_quota * 2, len(depth_store))
        idx = rng.choice(len(depth_store), size=n_sd, replace=False)
        depth_recs = [depth_store.records[i] for i in idx]

    # one combined batch: [photo | sfA | sfB | dfA | dfB | sd]
    seg_cam = [cam_pick]
    seg_t = [ts]
    seg_pix = [np.stack([xs, ys], axis=1).astype(np.float64)]
    for recs, side in ((sparse_recs, 0), (sparse_recs, 1),
                       (dense_recs, 0), (dense_recs, 1)):
        if side == 0:
            seg_cam.append(np.array([p.v for p in recs], dtype=np.int64))
            seg_t.append(np.array([p.t for p in recs], dtype=np.int64))
            seg_pix.append(np.array([[p.x, p.y] for p in recs],
                                    dtype=np.float64).reshape(-1, 2))
        else:
            seg_cam.append(np.array([p.u for p in recs], dtype=np.int64))
            seg_t.append(np.array([p.s for p in recs], dtype=np.int64))
            seg_pix.append(np.array([[p.xp, p.yp] for p in recs],
                                    dtype=np.float64).reshape(-1, 2))
    seg_cam.append(np.array([p.v for p in depth_recs], dtype=np.int64))
    seg_t.append(np.array([p.t for p in depth_recs], dtype=np.int64))
    seg_pix.append(np.array([[p.x, p.y] for p in depth_recs],
                            dtype=np.float64).reshape(-1, 2))
    bounds = np.cumsum([0] + [len(c) for c in seg_cam])
    sl = [slice(bounds[i], bounds[i + 1]) for i in range(len(seg_cam))]
    batch = build_ray_batch(
        dataset,
        np.concatenate(seg_cam),
        np.concatenate(seg_t),
        np.concatenate(seg_pix, axis=0),
    )

    bundle = render_rays(batch, state.fields, opts)
    l_ph, dcolor = L.photometric_loss_grad(bundle.color[sl[0]], truth)
    l_sf, dka_sf, dkb_sf = L.flow_loss_batch_grad(
        bundle.kappa[sl[1]], bundle.kappa[sl[2]]
    )
    l_df, dka_df, dkb_df = L.flow_loss_batch_grad(
        bundle.kappa[sl[3]], bundle.kappa[sl[4]]
    )
    l_sd = 0.0
    dz = None
    if depth_recs:
        prior_z = np.array([p.z for p in depth_recs])
        l_sd, dz = L.sparse_depth_loss_grad(bundle.depth[sl[5]], prior_z)

    breakdown = L.total_loss(
        l_ph, l_sf, l_df, l_sd,
        cfg.lambda_sf, cfg.lambda_df, cfg.lambda_sd,
        counts=(r, len(sparse_recs), len(dense_recs), len(depth_recs)),
    )

    total = bounds[-1]
    up_color = np.zeros((total, 3))
    up_color[sl[0]] = dcolor
    up_kappa = None
    if sparse_recs or dense_recs:
        up_kappa = np.zeros((total, 3))
        if sparse_recs:
            up_kappa[sl[1]] = cfg.lambda_sf * dka_sf
            up_kappa[sl[2]] = cfg.lambda_sf * dkb_sf
        if dense_recs:
            up_kappa[sl[3]] = cfg.lambda_df * dka_df
            up_kappa[sl[4]] = cfg.lambda_df * dkb_df
    up_depth = None
    if depth_recs:
        up_depth = np.zeros(total)
        up_depth[sl[5]] = cfg.lambda_sd * dz

    grads = {}
    render_rays_backward(bundle, state.fields, grads, dcolor=up_color,
                         ddepth=up_depth, dkappa=up_kappa)

    for term, value in (("L_ph", l_ph), ("L_sf", l_sf), ("L_df", l_df),
                        ("L_sd", l_sd), ("L_total", breakdown.total)):
        if not math.isfinite(value):
            max_grad = max(
                (float(np.max(np.abs(g))) for g in grads.values()),
                default=float("nan"),
            )
            raise NumericalAbort(it, term, max_grad)

    missing = set(state.params) - set(grads)
    if missing:
        raise AssertionError(
            f"parameters never received a gradient this step: {sorted(missing)}"
        )

    factor = lr_schedule(it, cfg.iterations, cfg.warmup_steps, cfg.lr_floor)
    for name, p in state.params.items():
        rate = cfg.lr_grids if name.startswith("G") else cfg.lr_mlps
        adam_update(
            p, grads[name], state.m[name], state.v[name],
            rate * factor, cfg.beta1, cfg.beta2, cfg.eps, it + 1,
        )
    state.iteration += 1
    return breakdown


def train_loop(dataset: VideoDataset, config: TrainConfig, out_dir=None,
               state: TrainState = None, progress=None):
    """Run the optimization; returns the final TrainState.

    When out_dir is given, writes the resolved config, a per-iteration
    loss CSV, periodic and final checkpoints, and eval renders."""
    if state is None:
        state = init_state(config, dataset)
    flow_store = dataset.flow_priors(config.train_cameras)
    depth_store = (
        dataset.depth_priors(config.train_cameras)
        if config.lambda_sd != 0.0 else None
    )
    log_f = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.json"), "w",
                  encoding="utf-8") as f:
            json.dump(config.to_json(), f, indent=1)
        log_path = os.path.join(out_dir, "loss_log.csv")
        fresh = state.iteration == 0 or not os.path.exists(log_path)
        log_f = open(log_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            log_f.write(L.LossBreakdown.CSV_HEADER + "\n")
    try:
        while state.iteration < config.iterations:
            breakdown = train_step(state, dataset, flow_store, depth_store)
            done = state.iteration
            if log_f:
                log_f.write(breakdown.csv_row(done - 1) + "\n")
            if progress and (done % 100 == 0 or done == config.iterations):
                progress(done, breakdown)
            if out_dir and config.checkpoint_every and \
                    done % config.checkpoint_every == 0 and \
                    done < config.iterations:
                checkpoint_save(
                    os.path.join(out_dir, f"ckpt_{done}.bin"), state
                )
            if out_dir and config.eval_every and \
                    done % config.eval_every == 0:
                _write_val_renders(dataset, state, out_dir, done)
    finally:
        if log_f:
            log_f.close()
    if out_dir:
        checkpoint_save(
            os.path.join(out_dir, f"ckpt_{state.iteration}.bin"), state
        )
    return state


def _write_val_renders(dataset, state, out_dir, iteration):
    val_dir = os.path.join(out_dir, "val", f"iter_{iteration}")
    os.makedirs(val_dir, exist_ok=True)
    cam = dataset.cameras[0]
    t = 1 + (iteration % dataset.n_frames)
    opts = RenderOptions(
        n_samples=state.config.n_samples, mode="uniform", seed=0
    )
    rgb, depth, _ = render_image(cam, t, state.fields, opts)
    save_color_png(
        os.path.join(val_dir, f"cam_{cam.index}_frame_{t}.png"), rgb
    )
    save_depth_f32(
        os.path.join(val_dir, f"cam_{cam.index}_frame_{t}.f32"), depth
    )
