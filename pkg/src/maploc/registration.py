"""Point-to-plane scan-to-map registration.

Residual per correspondence: r = n^T (T p - q) with p a body-frame scan
point, q a map point carrying unit normal n. Jacobian rows are taken with
respect to a left (world-frame) perturbation exp(xi) T in [rot; trans]
ordering: J = [ (T p) x n , n ].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoCorrespondences
from .geometry import Pose, SpatialIndex, compose, exp_map, orthonormalize

# Levenberg damping bounds for the inner step loop.
_DAMPING_INIT = 1e-6
_DAMPING_MAX = 1e8
_DAMPING_MIN = 1e-12


@dataclass(frozen=True)
class RegistrationParams:
    max_correspondence_distance: float = 1.0
    max_iterations: int = 30
    convergence_threshold: float = 1e-6
    kernel_width: float = 0.1  # Huber width, meters

    def validate(self):
        if self.max_correspondence_distance <= 0:
            raise ValueError("max_correspondence_distance must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.convergence_threshold <= 0 or self.kernel_width <= 0:
            raise ValueError("thresholds must be > 0")


@dataclass(frozen=True)
class Correspondences:
    """Matched pairs, struct-of-arrays, ordered by scan point index."""

    source_points: np.ndarray   # (N, 3) body frame
    target_points: np.ndarray   # (N, 3) world frame
    target_normals: np.ndarray  # (N, 3) unit
    residuals: np.ndarray       # (N,) signed point-to-plane distances

    def __len__(self):
        return self.source_points.shape[0]


@dataclass(frozen=True)
class AlignResult:
    pose: Pose
    hessian: np.ndarray           # 6x6 unit-weight Gauss-Newton Hessian at pose
    residual_rms: float
    correspondences: Correspondences
    iterations: int
    converged: bool
    # (cost_before, cost_after) per accepted step, fixed associations
    cost_trace: tuple = field(default=())


def find_correspondences(scan: np.ndarray, map_index: SpatialIndex, pose: Pose,
                         max_distance: float, workers: int = 1) -> Correspondences:
    """Nearest map point per transformed scan point, within max_distance.

    Map points without a valid normal are skipped. Raises NoCorrespondences
    when nothing matches. Output order follows scan point order.
    """
    scan = np.asarray(scan, dtype=float)
    world = pose.transform(scan)
    dist, idx = map_index.nearest(world, workers=workers)
    normals = map_index.cloud.normals
    if normals is None:
        raise ValueError("map cloud carries no normals")
    valid = (dist <= max_distance) & np.isfinite(normals[idx, 0])
    if not np.any(valid):
        raise NoCorrespondences(
            f"no scan point within {max_distance} m of a map point with a normal")
    source = scan[valid]
    target = map_index.cloud.points[idx[valid]]
    normal = normals[idx[valid]]
    residual = np.einsum("ij,ij->i", normal, world[valid] - target)
    return Correspondences(source, target, normal, residual)


def _residuals(corrs: Correspondences, pose: Pose):
    world = pose.transform(corrs.source_points)
    return np.einsum("ij,ij->i", corrs.target_normals, world - corrs.target_points)


def _jacobian(corrs: Correspondences, pose: Pose):
    world = pose.transform(corrs.source_points)
    return np.hstack([np.cross(world, corrs.target_normals), corrs.target_normals])


def _huber_cost(residuals, kernel_width):
    a = np.abs(residuals)
    quad = a <= kernel_width
    cost = np.where(quad, 0.5 * residuals ** 2,
                    kernel_width * (a - 0.5 * kernel_width))
    return float(np.sum(cost))


def _huber_weights(residuals, kernel_width):
    a = np.abs(residuals)
    w = np.ones_like(a)
    out = a > kernel_width
    w[out] = kernel_width / a[out]
    return w


def assemble_system(corrs: Correspondences, pose: Pose, kernel_width: float):
    """IRLS normal equations of the Huber point-to-plane cost.

    Returns (H, b, cost): H = sum w J^T J, b = sum w J^T r (the exact cost
    gradient), cost = sum of Huber losses. Associations stay fixed.
    """
    r = _residuals(corrs, pose)
    jac = _jacobian(corrs, pose)
    w = _huber_weights(r, kernel_width)
    jw = jac * w[:, None]
    hessian = jw.T @ jac
    hessian = 0.5 * (hessian + hessian.T)
    gradient = jac.T @ (w * r)
    return hessian, gradient, _huber_cost(r, kernel_width)


def unit_hessian(corrs: Correspondences, pose: Pose):
    """Gauss-Newton Hessian with unit weights, for degeneracy analysis."""
    jac = _jacobian(corrs, pose)
    hessian = jac.T @ jac
    return 0.5 * (hessian + hessian.T)


def reference_hessian(corrs: Correspondences):
    """Hessian of the matched map points as a self-registered scan.

    Treats the target points (already in the converged world placement) as
    the scan, so the spectrum reflects the constraint geometry the map
    offers at this location.
    """
    jac = np.hstack([np.cross(corrs.target_points, corrs.target_normals),
                     corrs.target_normals])
    hessian = jac.T @ jac
    return 0.5 * (hessian + hessian.T)


def align(scan: np.ndarray, map_index: SpatialIndex, initial_pose: Pose,
          params: RegistrationParams = RegistrationParams(),
          workers: int = 1) -> AlignResult:
    """Gauss-Newton with Levenberg damping, re-associating each iteration.

    Stops when the accepted twist update norm drops below the convergence
    threshold or max_iterations is hit. The returned Hessian is evaluated at
    the converged pose with unit weights over the final associations.
    """
    params.validate()
    pose = initial_pose
    damping = _DAMPING_INIT
    iterations = 0
    converged = False
    trace = []
    for _ in range(params.max_iterations):
        corrs = find_correspondences(scan, map_index, pose,
                                     params.max_correspondence_distance, workers)
        hessian, gradient, cost = assemble_system(corrs, pose, params.kernel_width)
        accepted = False
        while damping <= _DAMPING_MAX:
            step = np.linalg.solve(hessian + damping * np.eye(6), -gradient)
            trial = compose(exp_map(step), pose)
            trial = Pose(orthonormalize(trial.rotation), trial.translation)
            trial_cost = _huber_cost(_residuals(corrs, trial), params.kernel_width)
            if trial_cost < cost:
                pose = trial
                damping = max(damping * 0.5, _DAMPING_MIN)
                iterations += 1
                trace.append((cost, trial_cost))
                accepted = True
                if np.linalg.norm(step) < params.convergence_threshold:
                    converged = True
                break
            damping *= 10.0
        if not accepted:
            # no improving step exists at any damping: treat as converged
            converged = True
            break
        if converged:
            break
    corrs = find_correspondences(scan, map_index, pose,
                                 params.max_correspondence_distance, workers)
    residuals = _residuals(corrs, pose)
    rms = float(np.sqrt(np.mean(residuals ** 2)))
    final_corrs = Correspondences(corrs.source_points, corrs.target_points,
                                  corrs.target_normals, residuals)
    return AlignResult(pose, unit_hessian(final_corrs, pose), rms, final_corrs,
                       iterations, converged, tuple(trace))
