import numpy as np
import pytest

from defield.fields import ModelConfig, build_fields
from defield.geometry import RayBatch


def tiny_model_config(dtype="float64", n_frames=12):
    """Miniature model used by gradient and unit tests."""
    return ModelConfig(
        n_frames=n_frames,
        bbox_lo=(-1.0, -1.0, -1.0),
        bbox_hi=(1.0, 1.0, 1.0),
        motion_levels=(8,),
        motion_time_levels=(6,),
        motion_feature_dim=4,
        canonical_levels=(8,),
        canonical_feature_dim=4,
        motion_mlp_width=16,
        motion_mlp_hidden=2,
        color_mlp_width=16,
        color_mlp_hidden=2,
        dtype=dtype,
    )


def perturbed_tiny_fields(seed=3, scale=0.05, dtype="float64", n_frames=12):
    """Tiny fields with all parameters jittered away from the special
    zero/one initialization, so every gradient path is live."""
    cfg = tiny_model_config(dtype=dtype, n_frames=n_frames)
    rng = np.random.default_rng(seed)
    fields = build_fields(cfg, rng)
    for p in fields.parameters().values():
        p += rng.normal(0.0, scale, p.shape).astype(p.dtype)
    return fields


def two_ray_batch():
    o = np.array([[0.0, -2.5, 0.1], [0.3, -2.5, -0.2]])
    d = np.array([[0.0, 1.0, 0.05], [-0.1, 1.0, 0.0]])
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return RayBatch(
        origins=o,
        directions=d,
        near=np.array([1.2, 1.3]),
        far=np.array([3.4, 3.2]),
        pixels=np.array([[3.0, 4.0], [5.0, 6.0]]),
        t=np.array([2, 9], dtype=np.int64),
        cam_index=np.array([1, 2], dtype=np.int64),
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A small emitted dataset shared by trainer/CLI tests."""
    from defield.synthscene import make_blob_orbit, make_arc_rig, emit_dataset

    root = tmp_path_factory.mktemp("tinydata")
    scene = make_blob_orbit(n_frames=24)
    cams = make_arc_rig(n_cameras=3, image_size=32)
    emit_dataset(
        scene, cams, str(root), render_samples=96,
        n_sparse=10, dense_stride=4, seed=0,
    )
    return str(root)
