"""Training objectives.

All batch losses are means (not sums) so the weighting hyperparameters
do not depend on batch size. The flow losses compare the weighted
canonical points of two matched rays; their gradient deliberately
flows through both the compositing weights and the deformed sample
points of both rays.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class LossBreakdown:
    photometric: float = 0.0
    sparse_flow: float = 0.0
    dense_flow: float = 0.0
    sparse_depth: float = 0.0
    total: float = 0.0
    n_photometric: int = 0
    n_sparse: int = 0
    n_dense: int = 0
    n_depth: int = 0

    def csv_row(self, iteration: int) -> str:
        return (
            f"{iteration},{self.photometric:.8g},{self.sparse_flow:.8g},"
            f"{self.dense_flow:.8g},{self.sparse_depth:.8g},{self.total:.8g}"
        )

    CSV_HEADER = "iter,L_ph,L_sf,L_df,L_sd,L_total"


def photometric_loss(color: np.ndarray, truth: np.ndarray) -> float:
    """Mean over the batch of the squared RGB error norm."""
    color = np.atleast_2d(color)
    truth = np.atleast_2d(truth)
    return float(np.mean(np.sum((color - truth) ** 2, axis=1)))


def photometric_loss_grad(color: np.ndarray, truth: np.ndarray):
    """(loss, dL/dcolor) for a (R,3) batch."""
    color = np.atleast_2d(color)
    truth = np.atleast_2d(truth)
    diff = color - truth
    r = color.shape[0]
    return float(np.sum(diff ** 2) / r), 2.0 * diff / r


def canonical_point(result) -> np.ndarray:
    """Weighted canonical-volume location of a rendered ray: sum_i w_i p'_i."""
    return result.weights @ result.canonical_points


def flow_loss_batch(kappa_a: np.ndarray, kappa_b: np.ndarray) -> float:
    """Mean squared distance between matched canonical points (P,3)."""
    kappa_a = np.atleast_2d(kappa_a)
    kappa_b = np.atleast_2d(kappa_b)
    if kappa_a.shape[0] == 0:
        return 0.0
    return float(np.mean(np.sum((kappa_a - kappa_b) ** 2, axis=1)))


def flow_loss_batch_grad(kappa_a: np.ndarray, kappa_b: np.ndarray):
    """(loss, dL/dkappa_a, dL/dkappa_b)."""
    kappa_a = np.atleast_2d(kappa_a)
    kappa_b = np.atleast_2d(kappa_b)
    p = kappa_a.shape[0]
    if p == 0:
        return 0.0, np.zeros_like(kappa_a), np.zeros_like(kappa_b)
    diff = kappa_a - kappa_b
    g = 2.0 * diff / p
    return float(np.sum(diff ** 2) / p), g, -g


def flow_loss(result_a, result_b) -> float:
    """Single matched pair of rendered rays."""
    ka = canonical_point(result_a)
    kb = canonical_point(result_b)
    return float(np.sum((ka - kb) ** 2))


def sparse_depth_loss(depth: np.ndarray, prior: np.ndarray,
                      mask: np.ndarray = None) -> float:
    """Mean squared depth error over supervised pixels only."""
    depth = np.atleast_1d(depth)
    prior = np.atleast_1d(prior)
    if mask is None:
        mask = np.ones(depth.shape, dtype=bool)
    m = int(np.count_nonzero(mask))
    if m == 0:
        return 0.0
    return float(np.sum((depth[mask] - prior[mask]) ** 2) / m)


def sparse_depth_loss_grad(depth: np.ndarray, prior: np.ndarray,
                           mask: np.ndarray = None):
    depth = np.atleast_1d(depth)
    prior = np.atleast_1d(prior)
    if mask is None:
        mask = np.ones(depth.shape, dtype=bool)
    m = int(np.count_nonzero(mask))
    grad = np.zeros_like(depth)
    if m == 0:
        return 0.0, grad
    diff = depth - prior
    grad[mask] = 2.0 * diff[mask] / m
    return float(np.sum(diff[mask] ** 2) / m), grad


def total_loss(photometric: float, sparse_flow: float = 0.0,
               dense_flow: float = 0.0, sparse_depth: float = 0.0,
               lambda_sf: float = 1.0, lambda_df: float = 1.0,
               lambda_sd: float = 0.0, counts=(0, 0, 0, 0)) -> LossBreakdown:
    """Weighted objective; the depth term is a baseline arm, off by default."""
    total = (
        photometric
        + lambda_sf * sparse_flow
        + lambda_df * dense_flow
        + lambda_sd * sparse_depth
    )
    return LossBreakdown(
        photometric=photometric,
        sparse_flow=sparse_flow,
        dense_flow=dense_flow,
        sparse_depth=sparse_depth,
        total=total,
        n_photometric=counts[0],
        n_sparse=counts[1],
        n_dense=counts[2],
        n_depth=counts[3],
    )
