"""Loading the on-disk dataset directory produced by the scene tools."""

import json
import os

import numpy as np

from defield.geometry import BoundingBox, load_rig
from defield.priors import load_depth_priors, load_flow_priors
from defield.renderer import load_color_png, load_depth_f32


class DatasetError(ValueError):
    pass


class VideoDataset:
    """Posed multi-camera video frames plus rig and scene metadata."""

    def __init__(self, root):
        self.root = root
        rig_path = os.path.join(root, "rig.json")
        meta_path = os.path.join(root, "meta.json")
        if not os.path.exists(rig_path):
            raise DatasetError(f"{root}: missing rig.json")
        self.cameras = load_rig(rig_path)
        if not os.path.exists(meta_path):
            raise DatasetError(f"{root}: missing meta.json")
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
        self.n_frames = int(meta["n_frames"])
        self.box = BoundingBox.from_json(meta["box"])
        self.width = int(meta["width"])
        self.height = int(meta["height"])
        self.frames = {}
        for cam in self.cameras:
            stack = np.empty(
                (self.n_frames, self.height, self.width, 3), dtype=np.float64
            )
            for t in range(1, self.n_frames + 1):
                path = os.path.join(root, f"cam_{cam.index}", f"frame_{t}.png")
                if not os.path.exists(path):
                    raise DatasetError(f"missing frame {path}")
                stack[t - 1] = load_color_png(path)
            self.frames[cam.index] = stack

    def camera(self, index: int):
        for c in self.cameras:
            if c.index == index:
                return c
        raise DatasetError(f"no camera {index} in rig")

    def colors(self, cam_index, t, xs, ys) -> np.ndarray:
        """Ground-truth colors at integer pixel coordinates; t is 1-based."""
        return self.frames[cam_index][t - 1, ys, xs]

    def gt_depth(self, cam_index: int, t: int) -> np.ndarray:
        path = os.path.join(
            self.root, "depth_gt", f"cam_{cam_index}", f"frame_{t}.f32"
        )
        return load_depth_f32(path)

    def flow_priors(self, train_cameras=None):
        """Load both prior CSVs, keeping only train-camera records."""
        stores = []
        for name in ("priors_sparse.csv", "priors_dense.csv"):
            path = os.path.join(self.root, name)
            if os.path.exists(path):
                stores.append(
                    load_flow_priors(path, self.cameras, self.n_frames)
                )
        records = [r for s in stores for r in s.records]
        if train_cameras is not None:
            keep = set(train_cameras)
            records = [r for r in records if r.v in keep and r.u in keep]
        from defield.priors import FlowPriorStore

        return FlowPriorStore(records, self.n_frames)

    def depth_priors(self, train_cameras=None):
        path = os.path.join(self.root, "priors_depth.csv")
        if not os.path.exists(path):
            from defield.priors import DepthPriorStore

            return DepthPriorStore([], self.n_frames)
        store = load_depth_priors(path, self.cameras, self.n_frames)
        if train_cameras is not None:
            keep = set(train_cameras)
            from defield.priors import DepthPriorStore

            return DepthPriorStore(
                [r for r in store.records if r.v in keep], self.n_frames
            )
        return store
