"""Factor residuals and analytic Jacobians for the fusion graph.

Per-node state is [rotation; translation; velocity; accel bias; gyro bias]
(15 tangent dimensions); gravity is a single shared 3-vector (unit-norm
direction) appended after all nodes. Pose perturbations are left-applied,
pose <- exp_map(xi) @ pose, so every Jacobian here is taken with respect to
that convention. Residual twist ordering is [rot; trans] throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonMonotonicTimestamps, WindowTooShort, ZeroAcceleration
from .geometry import (
    Pose,
    between,
    compose,
    exp_map,
    inverse,
    log_map,
    orthonormalize,
    se3_adjoint,
    se3_left_jacobian_inv,
    skew,
    so3_exp,
    so3_log,
    so3_left_jacobian_inv,
    so3_right_jacobian,
)

# tangent-slot layout inside one node's 15 columns
ROT = slice(0, 3)
TRANS = slice(3, 6)
VEL = slice(6, 9)
BA = slice(9, 12)
BG = slice(12, 15)
STATE_DIM = 15

# gravity factors refuse windows with basically no specific force
MIN_MEAN_ACCEL = 0.5


@dataclass(frozen=True)
class StateNode:
    pose: Pose
    velocity: np.ndarray
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    timestamp: float

    def __post_init__(self):
        for name in ("velocity", "accel_bias", "gyro_bias"):
            vec = np.ascontiguousarray(getattr(self, name), dtype=float)
            if vec.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            vec.flags.writeable = False
            object.__setattr__(self, name, vec)

    @staticmethod
    def at(pose: Pose, timestamp: float, velocity=(0.0, 0.0, 0.0)):
        return StateNode(pose, np.asarray(velocity, dtype=float), np.zeros(3),
                         np.zeros(3), float(timestamp))


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    angular_velocity: np.ndarray  # rad/s, body frame
    specific_force: np.ndarray    # m/s^2, body frame

    def __post_init__(self):
        for name in ("angular_velocity", "specific_force"):
            vec = np.ascontiguousarray(getattr(self, name), dtype=float)
            if vec.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            vec.flags.writeable = False
            object.__setattr__(self, name, vec)


@dataclass(frozen=True)
class ZuptParams:
    min_duration: float = 0.5          # s
    accel_std_threshold: float = 0.05  # m/s^2, stddev of |a|
    gyro_mean_threshold: float = 0.02  # rad/s, mean of |w|


def retract_state(state: StateNode, delta) -> StateNode:
    """Apply a 15-dim tangent step; shared by the optimizer and FD tests."""
    delta = np.asarray(delta, dtype=float)
    pose = compose(exp_map(delta[:6]), state.pose)
    pose = Pose(orthonormalize(pose.rotation), pose.translation)
    return StateNode(pose, state.velocity + delta[VEL],
                     state.accel_bias + delta[BA],
                     state.gyro_bias + delta[BG], state.timestamp)


# ---------------------------------------------------------------------------
# residual functions (spec operations)

def odometry_error(pose_i: Pose, pose_j: Pose, measured_relative: Pose):
    """r = log(measured_relative^-1 * between(pose_i, pose_j)), 6-vector."""
    return log_map(compose(inverse(measured_relative), between(pose_i, pose_j)))


def map_error(pose: Pose, map_pose: Pose, mask=()):
    """Relative-pose residual with masked translational axes removed.

    mask holds axis indices (0=x, 1=y, 2=z); the corresponding translational
    rows of log(map_pose^-1 * pose) are deleted.
    """
    full = log_map(between(map_pose, pose))
    keep = _mask_rows(mask)
    return full[keep]


def _mask_rows(mask):
    keep = [0, 1, 2] + [3 + a for a in range(3) if a not in set(mask)]
    return np.asarray(keep, dtype=int)


def gravity_error(rotation, gravity, a_mean):
    """Norm-constrained gravity residual, 4-vector [e_dir; e_mag].

    a_mean is the bias-corrected mean specific force over a stationary
    window (body frame); a stationary accelerometer measures -g, so the
    normalized world-frame specific force should cancel the gravity
    direction: e_dir = a_w/|a_w| + g, e_mag = |g| - 1.
    """
    a_mean = np.asarray(a_mean, dtype=float)
    norm = np.linalg.norm(a_mean)
    if norm < MIN_MEAN_ACCEL:
        raise ZeroAcceleration(
            f"mean specific force {norm:.3f} m/s^2 is too small for a gravity factor")
    a_w = np.asarray(rotation, dtype=float) @ a_mean
    u = np.linalg.norm(a_w)
    gravity = np.asarray(gravity, dtype=float)
    e_dir = a_w / u + gravity
    e_mag = np.linalg.norm(gravity) - 1.0
    return np.concatenate([e_dir, [e_mag]])


def zero_velocity_error(velocity):
    return np.asarray(velocity, dtype=float).copy()


def no_motion_error(pose_i: Pose, pose_j: Pose):
    """r = log(between(pose_i, pose_j)), zero iff the poses coincide."""
    return log_map(between(pose_i, pose_j))


def detect_zupt(samples, params: ZuptParams = ZuptParams()) -> bool:
    """Stationarity test over an IMU window.

    True iff stddev(|a|) < accel_std_threshold and mean(|w|) <
    gyro_mean_threshold. The window must span at least min_duration.
    """
    if len(samples) < 2:
        raise WindowTooShort("need at least 2 samples")
    times = np.array([s.timestamp for s in samples])
    if np.any(np.diff(times) <= 0):
        raise NonMonotonicTimestamps("IMU window timestamps must increase")
    if times[-1] - times[0] < params.min_duration:
        raise WindowTooShort(
            f"window spans {times[-1] - times[0]:.3f} s < {params.min_duration} s")
    accel_norms = np.array([np.linalg.norm(s.specific_force) for s in samples])
    gyro_norms = np.array([np.linalg.norm(s.angular_velocity) for s in samples])
    return bool(accel_norms.std() < params.accel_std_threshold
                and gyro_norms.mean() < params.gyro_mean_threshold)


# ---------------------------------------------------------------------------
# preintegration

@dataclass(frozen=True)
class Preintegration:
    """Midpoint-integrated IMU deltas in the frame of the first state.

    The deltas include the gravity vector passed to preintegrate (expressed
    in that same frame), which contributes exactly g*T to delta_velocity and
    g*T^2/2 to delta_position; the IMU factor removes that term and
    re-applies gravity from the shared state variable. Bias Jacobians are
    the exact derivatives of this integration scheme at the linearization
    biases.
    """

    delta_rotation: np.ndarray  # (3,3)
    delta_velocity: np.ndarray  # (3,)
    delta_position: np.ndarray  # (3,)
    covariance: np.ndarray      # (9,9), [rot; vel; pos]
    duration: float
    gravity: np.ndarray         # (3,) as passed, frame of state i
    accel_bias: np.ndarray      # linearization point
    gyro_bias: np.ndarray
    j_r_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    j_v_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    j_v_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    j_p_ba: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    j_p_bg: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))


def preintegrate(samples, accel_bias, gyro_bias, gravity,
                 sigma_gyro=1e-3, sigma_accel=1e-2) -> Preintegration:
    """Midpoint preintegration over consecutive sample pairs.

    gravity is expressed in the frame of the interval's first state and is
    integrated into the deltas. sigma_gyro / sigma_accel are per-sample
    standard deviations used for first-order covariance propagation.
    """
    if len(samples) < 2:
        raise WindowTooShort("need at least 2 IMU samples to preintegrate")
    times = np.array([s.timestamp for s in samples])
    if np.any(np.diff(times) <= 0):
        raise NonMonotonicTimestamps("IMU timestamps must strictly increase")
    accel_bias = np.asarray(accel_bias, dtype=float)
    gyro_bias = np.asarray(gyro_bias, dtype=float)
    gravity = np.asarray(gravity, dtype=float)

    d_rot = np.eye(3)
    d_vel = np.zeros(3)
    d_pos = np.zeros(3)
    cov = np.zeros((9, 9))
    j_r = np.zeros((3, 3))
    j_v_ba = np.zeros((3, 3))
    j_v_bg = np.zeros((3, 3))
    j_p_ba = np.zeros((3, 3))
    j_p_bg = np.zeros((3, 3))

    for k in range(len(samples) - 1):
        s0, s1 = samples[k], samples[k + 1]
        dt = s1.timestamp - s0.timestamp
        w_mid = 0.5 * (s0.angular_velocity + s1.angular_velocity) - gyro_bias
        step = w_mid * dt
        r_step = so3_exp(step)
        d_rot_next = d_rot @ r_step
        u0 = s0.specific_force - accel_bias
        u1 = s1.specific_force - accel_bias
        a_mid = 0.5 * (d_rot @ u0 + d_rot_next @ u1) + gravity

        # exact derivative of this scheme w.r.t. the linearization biases
        jr_step = so3_right_jacobian(step)
        j_r_next = r_step.T @ j_r - jr_step * dt
        da_dbg = -0.5 * (d_rot @ skew(u0) @ j_r + d_rot_next @ skew(u1) @ j_r_next)
        da_dba = -0.5 * (d_rot + d_rot_next)
        j_p_ba = j_p_ba + j_v_ba * dt + 0.5 * da_dba * dt * dt
        j_p_bg = j_p_bg + j_v_bg * dt + 0.5 * da_dbg * dt * dt
        j_v_ba = j_v_ba + da_dba * dt
        j_v_bg = j_v_bg + da_dbg * dt
        j_r = j_r_next

        # first-order covariance propagation, [rot; vel; pos]
        a_mat = np.eye(9)
        a_mat[0:3, 0:3] = r_step.T
        a_mat[3:6, 0:3] = -d_rot @ skew(u0) * dt
        a_mat[6:9, 0:3] = -0.5 * d_rot @ skew(u0) * dt * dt
        a_mat[6:9, 3:6] = np.eye(3) * dt
        b_gyro = np.zeros((9, 3))
        b_gyro[0:3] = jr_step * dt
        b_accel = np.zeros((9, 3))
        b_accel[3:6] = d_rot * dt
        b_accel[6:9] = 0.5 * d_rot * dt * dt
        cov = (a_mat @ cov @ a_mat.T
               + b_gyro @ b_gyro.T * sigma_gyro ** 2
               + b_accel @ b_accel.T * sigma_accel ** 2)

        d_pos = d_pos + d_vel * dt + 0.5 * a_mid * dt * dt
        d_vel = d_vel + a_mid * dt
        d_rot = d_rot_next

    return Preintegration(d_rot, d_vel, d_pos, 0.5 * (cov + cov.T),
                          float(times[-1] - times[0]), gravity,
                          accel_bias, gyro_bias,
                          j_r, j_v_ba, j_v_bg, j_p_ba, j_p_bg)


# ---------------------------------------------------------------------------
# factor classes

def _check_information(info, dim):
    info = np.ascontiguousarray(info, dtype=float)
    if info.shape != (dim, dim):
        raise ValueError(f"information must be {dim}x{dim}")
    if np.abs(info - info.T).max() > 1e-9 * max(1.0, np.abs(info).max()):
        raise ValueError("information matrix must be symmetric")
    info.flags.writeable = False
    return info


@dataclass(frozen=True)
class PriorFactor:
    kind = "prior"
    index: int
    prior: Pose
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6))

    @property
    def indices(self):
        return (self.index,)

    def residual(self, states, gravity):
        return log_map(compose(inverse(self.prior), states[self.index].pose))

    def linearize(self, states, gravity):
        r = self.residual(states, gravity)
        jac = np.zeros((6, STATE_DIM))
        jac[:, :6] = se3_left_jacobian_inv(r) @ se3_adjoint(inverse(self.prior))
        return r, {self.index: jac}, None


@dataclass(frozen=True)
class OdometryFactor:
    kind = "odometry"
    i: int
    j: int
    measurement: Pose  # relative pose of j in i
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6))

    @property
    def indices(self):
        return (self.i, self.j)

    def residual(self, states, gravity):
        return odometry_error(states[self.i].pose, states[self.j].pose,
                              self.measurement)

    def linearize(self, states, gravity):
        r = self.residual(states, gravity)
        core = se3_left_jacobian_inv(r) @ se3_adjoint(
            inverse(compose(states[self.i].pose, self.measurement)))
        jac_i = np.zeros((6, STATE_DIM))
        jac_j = np.zeros((6, STATE_DIM))
        jac_i[:, :6] = -core
        jac_j[:, :6] = core
        return r, {self.i: jac_i, self.j: jac_j}, None


@dataclass(frozen=True)
class NoMotionFactor:
    kind = "no_motion"
    i: int
    j: int
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6))

    @property
    def indices(self):
        return (self.i, self.j)

    def residual(self, states, gravity):
        return no_motion_error(states[self.i].pose, states[self.j].pose)

    def linearize(self, states, gravity):
        r = self.residual(states, gravity)
        core = se3_left_jacobian_inv(r) @ se3_adjoint(inverse(states[self.i].pose))
        jac_i = np.zeros((6, STATE_DIM))
        jac_j = np.zeros((6, STATE_DIM))
        jac_i[:, :6] = -core
        jac_j[:, :6] = core
        return r, {self.i: jac_i, self.j: jac_j}, None


@dataclass(frozen=True)
class MapFactor:
    kind = "map"
    index: int
    map_pose: Pose
    information: np.ndarray  # full 6x6 registration Hessian
    mask: tuple = ()         # degenerate translational axes to drop

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6))
        object.__setattr__(self, "mask", tuple(sorted(set(self.mask))))

    @property
    def indices(self):
        return (self.index,)

    @property
    def masked_information(self):
        keep = _mask_rows(self.mask)
        return self.information[np.ix_(keep, keep)]

    def residual(self, states, gravity):
        return map_error(states[self.index].pose, self.map_pose, self.mask)

    def linearize(self, states, gravity):
        full = log_map(between(self.map_pose, states[self.index].pose))
        jac_full = se3_left_jacobian_inv(full) @ se3_adjoint(inverse(self.map_pose))
        keep = _mask_rows(self.mask)
        jac = np.zeros((len(keep), STATE_DIM))
        jac[:, :6] = jac_full[keep]
        return full[keep], {self.index: jac}, None


@dataclass(frozen=True)
class GravityFactor:
    kind = "gravity"
    index: int
    a_mean: np.ndarray  # bias-corrected mean specific force, body frame
    information: np.ndarray

    def __post_init__(self):
        a_mean = np.ascontiguousarray(self.a_mean, dtype=float)
        a_mean.flags.writeable = False
        object.__setattr__(self, "a_mean", a_mean)
        object.__setattr__(self, "information",
                           _check_information(self.information, 4))

    @property
    def indices(self):
        return (self.index,)

    def residual(self, states, gravity):
        return gravity_error(states[self.index].pose.rotation, gravity, self.a_mean)

    def linearize(self, states, gravity):
        r = self.residual(states, gravity)
        rotation = states[self.index].pose.rotation
        a_w = rotation @ self.a_mean
        u = np.linalg.norm(a_w)
        unit = a_w / u
        d_dir_da = (np.eye(3) - np.outer(unit, unit)) / u
        jac = np.zeros((4, STATE_DIM))
        jac[:3, ROT] = d_dir_da @ (-skew(a_w))
        g_block = np.zeros((4, 3))
        g_block[:3] = np.eye(3)
        g_block[3] = gravity / np.linalg.norm(gravity)
        return r, {self.index: jac}, g_block


@dataclass(frozen=True)
class ZeroVelocityFactor:
    kind = "zero_velocity"
    index: int
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 3))

    @property
    def indices(self):
        return (self.index,)

    def residual(self, states, gravity):
        return zero_velocity_error(states[self.index].velocity)

    def linearize(self, states, gravity):
        jac = np.zeros((3, STATE_DIM))
        jac[:, VEL] = np.eye(3)
        return self.residual(states, gravity), {self.index: jac}, None


@dataclass(frozen=True)
class BiasWalkFactor:
    kind = "bias_walk"
    i: int
    j: int
    information: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 6))

    @property
    def indices(self):
        return (self.i, self.j)

    def residual(self, states, gravity):
        return np.concatenate([
            states[self.j].accel_bias - states[self.i].accel_bias,
            states[self.j].gyro_bias - states[self.i].gyro_bias,
        ])

    def linearize(self, states, gravity):
        jac_i = np.zeros((6, STATE_DIM))
        jac_j = np.zeros((6, STATE_DIM))
        jac_i[0:3, BA] = -np.eye(3)
        jac_i[3:6, BG] = -np.eye(3)
        jac_j[0:3, BA] = np.eye(3)
        jac_j[3:6, BG] = np.eye(3)
        return self.residual(states, gravity), {self.i: jac_i, self.j: jac_j}, None


@dataclass(frozen=True)
class BiasPriorFactor:
    """Absolute anchor on one state's IMU biases.

    The walk factors only chain consecutive biases; without one absolute
    prior the whole bias trajectory can drift together and trade off
    against gravity.
    """

    kind = "bias_prior"
    index: int
    accel_bias: np.ndarray
    gyro_bias: np.ndarray
    information: np.ndarray  # 6x6 over [b_a; b_g]

    def __post_init__(self):
        object.__setattr__(self, "accel_bias",
                           np.asarray(self.accel_bias, dtype=float).copy())
        object.__setattr__(self, "gyro_bias",
                           np.asarray(self.gyro_bias, dtype=float).copy())
        object.__setattr__(self, "information",
                           _check_information(self.information, 6))

    @property
    def indices(self):
        return (self.index,)

    def residual(self, states, gravity):
        state = states[self.index]
        return np.concatenate([state.accel_bias - self.accel_bias,
                               state.gyro_bias - self.gyro_bias])

    def linearize(self, states, gravity):
        jac = np.zeros((6, STATE_DIM))
        jac[0:3, BA] = np.eye(3)
        jac[3:6, BG] = np.eye(3)
        return self.residual(states, gravity), {self.index: jac}, None


@dataclass(frozen=True)
class ImuFactor:
    """Preintegrated IMU constraint between consecutive states, 9-dim.

    Residual [r_rot; r_vel; r_pos] compares the predicted motion of state j
    from state i (first-order bias-corrected deltas) against the actual
    states, with gravity taken from the shared unit direction scaled by
    gravity_magnitude.
    """

    kind = "imu"
    i: int
    j: int
    preint: Preintegration
    information: np.ndarray
    gravity_magnitude: float = 9.81

    def __post_init__(self):
        object.__setattr__(self, "information",
                           _check_information(self.information, 9))

    @property
    def indices(self):
        return (self.i, self.j)

    def _corrected(self, state_i):
        p = self.preint
        db_a = state_i.accel_bias - p.accel_bias
        db_g = state_i.gyro_bias - p.gyro_bias
        d_rot = p.delta_rotation @ so3_exp(p.j_r_bg @ db_g)
        dt = p.duration
        d_vel = p.delta_velocity - p.gravity * dt + p.j_v_ba @ db_a + p.j_v_bg @ db_g
        d_pos = (p.delta_position - 0.5 * p.gravity * dt * dt
                 + p.j_p_ba @ db_a + p.j_p_bg @ db_g)
        return d_rot, d_vel, d_pos, db_g

    def residual(self, states, gravity):
        si, sj = states[self.i], states[self.j]
        d_rot, d_vel, d_pos, _ = self._corrected(si)
        dt = self.preint.duration
        g_world = np.asarray(gravity, dtype=float) * self.gravity_magnitude
        ri = si.pose.rotation
        r_rot = so3_log(d_rot.T @ ri.T @ sj.pose.rotation)
        r_vel = ri.T @ (sj.velocity - si.velocity - g_world * dt) - d_vel
        r_pos = ri.T @ (sj.pose.translation - si.pose.translation
                        - si.velocity * dt - 0.5 * g_world * dt * dt) - d_pos
        return np.concatenate([r_rot, r_vel, r_pos])

    def linearize(self, states, gravity):
        si, sj = states[self.i], states[self.j]
        p = self.preint
        d_rot, d_vel, d_pos, db_g = self._corrected(si)
        dt = p.duration
        g_mag = self.gravity_magnitude
        g_world = np.asarray(gravity, dtype=float) * g_mag
        ri = si.pose.rotation
        rit = ri.T
        ti = si.pose.translation
        tj = sj.pose.translation

        r_rot = so3_log(d_rot.T @ rit @ sj.pose.rotation)
        w_vec = sj.velocity - si.velocity - g_world * dt
        u_vec = tj - ti - si.velocity * dt - 0.5 * g_world * dt * dt
        r_vel = rit @ w_vec - d_vel
        r_pos = rit @ u_vec - d_pos
        r = np.concatenate([r_rot, r_vel, r_pos])

        jl_inv = so3_left_jacobian_inv(r_rot)
        c_mat = (ri @ d_rot).T  # (R_i * corrected_delta)^T
        # d r_rot / d b_g through the corrected delta rotation
        bias_rot = so3_right_jacobian(p.j_r_bg @ db_g) @ p.j_r_bg

        jac_i = np.zeros((9, STATE_DIM))
        jac_j = np.zeros((9, STATE_DIM))

        jac_i[0:3, ROT] = -jl_inv @ c_mat
        jac_j[0:3, ROT] = jl_inv @ c_mat
        # corrected delta enters as E = exp(-G db) Ebar, so d r_rot/d b_g = -Jl_inv G
        jac_i[0:3, BG] = -jl_inv @ bias_rot

        jac_i[3:6, ROT] = rit @ skew(w_vec)
        jac_i[3:6, VEL] = -rit
        jac_j[3:6, VEL] = rit
        jac_i[3:6, BA] = -p.j_v_ba
        jac_i[3:6, BG] = -p.j_v_bg

        jac_i[6:9, ROT] = rit @ skew(u_vec + ti)
        jac_i[6:9, TRANS] = -rit
        jac_j[6:9, ROT] = -rit @ skew(tj)
        jac_j[6:9, TRANS] = rit
        jac_i[6:9, VEL] = -rit * dt
        jac_i[6:9, BA] = -p.j_p_ba
        jac_i[6:9, BG] = -p.j_p_bg

        g_block = np.zeros((9, 3))
        g_block[3:6] = -g_mag * dt * rit
        g_block[6:9] = -0.5 * g_mag * dt * dt * rit
        return r, {self.i: jac_i, self.j: jac_j}, g_block
