"""Image and depth quality measures: PSNR, SSIM, depth MAE."""

import csv
import glob
import json
import math
import os
import re
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0,1].

    Identical inputs return the +inf sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, window_size: int = 11,
         sigma: float = 1.5, c1: float = 0.01 ** 2,
         c2: float = 0.03 ** 2) -> float:
    """Structural similarity with an 11x11 Gaussian window, averaged
    over channels; windows are 'valid' (no padding)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    win = _gaussian_window(window_size, sigma)
    scores = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = convolve2d(x, win, mode="valid")
        mu_y = convolve2d(y, win, mode="valid")
        xx = convolve2d(x * x, win, mode="valid") - mu_x ** 2
        yy = convolve2d(y * y, win, mode="valid") - mu_y ** 2
        xy = convolve2d(x * y, win, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


def depth_mae(depth: np.ndarray, reference: np.ndarray,
              mask: np.ndarray = None) -> float:
    """Mean absolute depth error over the valid mask, scene units."""
    depth = np.asarray(depth, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if mask is None:
        mask = np.ones(depth.shape, dtype=bool)
    if not np.any(mask):
        return 0.0
    return float(np.mean(np.abs(depth[mask] - reference[mask])))


@dataclass
class FrameScore:
    cam_index: int
    t: int
    psnr: float
    ssim: float
    depth_mae: float


@dataclass
class MetricReport:
    frames: list
    psnr: float
    ssim: float
    depth_mae: float

    def to_json(self):
        return {
            "psnr": self.psnr,
            "ssim": self.ssim,
            "depth_mae": self.depth_mae,
            "n_frames": len(self.frames),
        }


def evaluate_render_dir(pred_dir, gt_dir) -> MetricReport:
    """Score every rendered frame in pred_dir against the dataset in gt_dir.

    Expects pred_dir/cam_<v>/frame_<t>.png (+ depth/cam_<v>/frame_<t>.f32)
    and the standard dataset layout on the gt side. Depth is compared
    where the ground-truth ray carried any mass."""
    from defield.renderer import load_color_png, load_depth_f32

    pattern = os.path.join(pred_dir, "cam_*", "frame_*.png")
    found = sorted(glob.glob(pattern))
    if not found:
        raise FileNotFoundError(f"no rendered frames under {pred_dir}")
    frames = []
    for path in found:
        m = re.search(r"cam_(\d+)[/\\]frame_(\d+)\.png$", path)
        if not m:
            continue
        v, t = int(m.group(1)), int(m.group(2))
        pred_rgb = load_color_png(path)
        gt_rgb = load_color_png(os.path.join(gt_dir, f"cam_{v}", f"frame_{t}.png"))
        score_psnr = psnr(pred_rgb, gt_rgb)
        score_ssim = ssim(pred_rgb, gt_rgb)
        pred_depth_path = os.path.join(pred_dir, "depth", f"cam_{v}", f"frame_{t}.f32")
        gt_depth_path = os.path.join(gt_dir, "depth_gt", f"cam_{v}", f"frame_{t}.f32")
        mae = float("nan")
        if os.path.exists(pred_depth_path) and os.path.exists(gt_depth_path):
            pred_depth = load_depth_f32(pred_depth_path)
            gt_depth = load_depth_f32(gt_depth_path)
            mae = depth_mae(pred_depth, gt_depth, mask=gt_depth > 0)
        frames.append(FrameScore(v, t, score_psnr, score_ssim, mae))
    maes = [f.depth_mae for f in frames if not math.isnan(f.depth_mae)]
    return MetricReport(
        frames=frames,
        psnr=float(np.mean([f.psnr for f in frames])),
        ssim=float(np.mean([f.ssim for f in frames])),
        depth_mae=float(np.mean(maes)) if maes else float("nan"),
    )


def write_report(report: MetricReport, json_path, csv_path=None):
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_json(), f, indent=1)
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["cam", "t", "psnr", "ssim", "depth_mae"])
            for fr in report.frames:
                writer.writerow(
                    [fr.cam_index, fr.t, f"{fr.psnr:.6g}",
                     f"{fr.ssim:.6g}", f"{fr.depth_mae:.6g}"]
                )
