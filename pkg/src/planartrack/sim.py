"""Simulation front end: states, stepping, termination, resets, randomization.

The heavy lifting happens in the kernel backend (see kernel/); this module
owns the public state type, input checking, and everything episodic around
the physics: termination rules, reference-state resets, and the two-stage
domain randomization split into asset properties vs environment dynamics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernel
from .errors import InputValidationError, InvalidClipError, SimulationDivergedError
from .kinematics import fk, fk_state, keypoints
from .robot import RobotModel, packed

CONTROL_DT = 1.0 / 50.0
PHYSICS_DT = 1.0 / 200.0

ALIVE = "alive"
FELL_ORIENTATION = "fell_orientation"
LOST_TRACKING = "lost_tracking"

ORIENTATION_LIMIT = 0.8   # |projected gravity| = |sin(root_angle)|
TRACKING_LIMIT = 0.5      # mean keypoint distance, meters


@dataclass
class SimState:
    """Full dynamic state plus the bookkeeping the policies need.

    data is the flat kernel layout [x, z, th, vx, vz, w, q, qdot]; the named
    accessors below are views into it.
    """

    data: np.ndarray
    prev_action: np.ndarray
    time: float = 0.0
    rng_stream: int = 0

    @property
    def root_pos(self):
        return self.data[0:2]

    @property
    def root_angle(self):
        return float(self.data[2])

    @property
    def root_linvel(self):
        return self.data[3:5]

    @property
    def root_angvel(self):
        return float(self.data[5])

    @property
    def q(self):
        nj = (len(self.data) - 6) // 2
        return self.data[6:6 + nj]

    @property
    def qdot(self):
        nj = (len(self.data) - 6) // 2
        return self.data[6 + nj:]

    def copy(self) -> "SimState":
        return SimState(self.data.copy(), self.prev_action.copy(),
                        self.time, self.rng_stream)


@dataclass
class StepDiagnostics:
    torque_abs_sum: float
    slip_speed: float
    normal_force_sum: float
    contact_count: float
    foot_contact: tuple[float, ...]


def kernel_args(pm) -> tuple:
    """Positional model arguments shared by both kernel backends."""
    return (pm.parents, pm.lengths, pm.masses, pm.coms, pm.inertias,
            pm.anchors_m, pm.rest_angles, pm.path_ptr, pm.path_idx,
            pm.kp, pm.kd, pm.damping_b, pm.q_lo, pm.q_hi, pm.tau_max,
            pm.contact_link, pm.contact_dist, pm.contact_foot,
            pm.contact_stiffness, pm.contact_damping, pm.friction,
            pm.gravity, pm.base_fixed, pm.n_feet)


def make_state(model: RobotModel, root_pos=(0.0, 0.0), root_angle=0.0,
               q=None, root_linvel=(0.0, 0.0), root_angvel=0.0,
               qdot=None) -> SimState:
    nj = model.n_joints
    data = np.zeros(6 + 2 * nj)
    data[0:2] = root_pos
    data[2] = root_angle
    data[3:5] = root_linvel
    data[5] = root_angvel
    if q is not None:
        data[6:6 + nj] = q
    if qdot is not None:
        data[6 + nj:] = qdot
    return SimState(data=data, prev_action=data[6:6 + nj].copy())


def standing_state(model: RobotModel, settle=0.0) -> SimState:
    """Default pose with feet at the ground; settle lowers the root slightly
    to pre-load the contact springs."""
    pts = fk(model, np.zeros(2), 0.0, np.zeros(model.n_joints))
    lowest = pts.distal[..., 1].min()
    return make_state(model, root_pos=(0.0, -lowest - settle))


def _n_substeps(dt: float) -> int:
    return max(1, int(round(dt / PHYSICS_DT)))


def step(model: RobotModel, state: SimState, action, dt: float = CONTROL_DT,
         tau_noise=None) -> SimState:
    """One control step of dt seconds (internally substepped)."""
    new, _ = step_with_info(model, state, action, dt, tau_noise)
    return new


def step_with_info(model: RobotModel, state: SimState, action,
                   dt: float = CONTROL_DT, tau_noise=None
                   ) -> tuple[SimState, StepDiagnostics]:
    nj = model.n_joints
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (nj,):
        raise InputValidationError(f"action must have shape ({nj},)")
    if not np.all(np.isfinite(action)):
        raise InputValidationError("action contains non-finite values")
    if not dt > 0:
        raise InputValidationError("dt must be > 0")
    if tau_noise is None:
        tau_noise = np.zeros(nj)
    pm = packed(model)
    n_sub = _n_substeps(dt)
    data = state.data.copy()
    diag = np.zeros(4 + pm.n_feet)
    status = kernel.step_control(*kernel_args(pm), data, action,
                                 np.asarray(tau_noise, dtype=np.float64),
                                 dt / n_sub, n_sub, diag)
    new = SimState(data=data, prev_action=action.copy(),
                   time=state.time + dt, rng_stream=state.rng_stream)
    if status != kernel.STEP_OK:
        raise SimulationDivergedError(
            f"integration failed with kernel status {status}", state=new)
    info = StepDiagnostics(
        torque_abs_sum=float(diag[0]),
        slip_speed=float(diag[1]),
        normal_force_sum=float(diag[2]),
        contact_count=float(diag[3]),
        foot_contact=tuple(float(v) for v in diag[4:4 + pm.n_feet]),
    )
    return new, info


def forward_kinematics(model: RobotModel, root_pos, root_angle, q) -> np.ndarray:
    """Tracked keypoint positions (K, 2) for a single configuration."""
    root_pos = np.asarray(root_pos, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if not (np.all(np.isfinite(root_pos)) and np.isfinite(root_angle)
            and np.all(np.isfinite(q))):
        raise InputValidationError("forward_kinematics inputs must be finite")
    if q.shape != (model.n_joints,):
        raise InputValidationError(f"q must have shape ({model.n_joints},)")
    return keypoints(model, fk(model, root_pos, root_angle, q))


# ---------------------------------------------------------------------------
# Termination
# ---------------------------------------------------------------------------

def termination_codes(model: RobotModel, states, ref_keypoints) -> np.ndarray:
    """Vectorized termination over flat states (..., 6+2J).

    0 = alive, 1 = fell_orientation, 2 = lost_tracking. The orientation
    check wins when both trip.
    """
    states = np.asarray(states)
    pts, _ = fk_state(model, states)
    kp = keypoints(model, pts)
    dist = np.linalg.norm(kp - ref_keypoints, axis=-1).mean(axis=-1)
    fell = np.abs(np.sin(states[..., 2])) > ORIENTATION_LIMIT
    lost = dist > TRACKING_LIMIT
    return np.where(fell, 1, np.where(lost, 2, 0)).astype(np.int8)


def check_termination(model: RobotModel, state: SimState, ref_keypoints) -> str:
    code = int(termination_codes(model, state.data, np.asarray(ref_keypoints)))
    return (ALIVE, FELL_ORIENTATION, LOST_TRACKING)[code]


# ---------------------------------------------------------------------------
# Reference state initialization
# ---------------------------------------------------------------------------

def reference_state_init(clip, rng) -> tuple[int, SimState]:
    """Start an episode at a uniformly random clip frame (never the last)."""
    n = len(clip)
    if n < 2:
        raise InvalidClipError(f"clip {clip.name!r} has {n} frames, need >= 2")
    frame = int(rng.integers(0, n - 1))
    data = np.concatenate([
        clip.root_pos[frame],
        [clip.root_angle[frame]],
        clip.root_linvel[frame],
        [clip.root_angvel[frame]],
        clip.q[frame],
        clip.qdot[frame],
    ])
    return frame, SimState(data=data, prev_action=clip.q[frame].copy())


# ---------------------------------------------------------------------------
# Domain randomization, decoupled into asset vs dynamics stages
# ---------------------------------------------------------------------------

@dataclass
class RandomizationSpec:
    mode: str = "asset_only"            # none | asset_only | asset_and_dynamics
    friction_range: tuple[float, float] = (0.7, 1.3)
    mass_scale_range: tuple[float, float] = (0.9, 1.1)
    com_offset_range: tuple[float, float] = (-0.02, 0.02)
    pd_scale_range: tuple[float, float] = (0.9, 1.1)
    torque_noise_std: float = 1.0
    push_interval_s: float = 4.0
    push_magnitude_range: tuple[float, float] = (0.1, 0.5)

    def __post_init__(self):
        if self.mode not in ("none", "asset_only", "asset_and_dynamics"):
            raise InputValidationError(f"unknown randomization mode {self.mode!r}")
        for nm in ("friction_range", "mass_scale_range", "com_offset_range",
                   "pd_scale_range", "push_magnitude_range"):
            lo, hi = getattr(self, nm)
            if not lo <= hi:
                raise InputValidationError(f"{nm}: lo must be <= hi")

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in ((f, getattr(self, f))
                             for f in self.__dataclass_fields__)}


@dataclass
class PerturbationSchedule:
    """Episode-local dynamics perturbations; empty for the asset-only stage."""

    push_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    push_deltas: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    torque_noise_std: float = 0.0

    def pushes_between(self, t0: float, t1: float) -> np.ndarray:
        hits = (self.push_times >= t0) & (self.push_times < t1)
        return self.push_deltas[hits]


def randomize(model: RobotModel, spec: RandomizationSpec, rng,
              horizon_s: float = 30.0) -> tuple[RobotModel, PerturbationSchedule]:
    """Sample a per-episode model variant plus (in dynamics mode) pushes.

    Asset stage: friction, a global mass scale, per-link COM offsets.
    Dynamics stage adds PD gain scaling, torque noise, and Poisson-spaced
    root-velocity pushes.
    """
    if spec.mode == "none":
        return model, PerturbationSchedule()

    friction = float(rng.uniform(*spec.friction_range))
    mass_scale = float(rng.uniform(*spec.mass_scale_range))
    com_off = rng.uniform(*spec.com_offset_range, size=model.n_links)
    new_coms = tuple(
        float(np.clip(c + o, 0.0, l))
        for c, o, l in zip(model.link_coms, com_off, model.link_lengths))
    out = replace(
        model,
        friction_coeff=friction,
        link_masses=tuple(m * mass_scale for m in model.link_masses),
        link_coms=new_coms,
    )
    if spec.mode == "asset_only":
        return out, PerturbationSchedule()

    pd_scale = float(rng.uniform(*spec.pd_scale_range))
    out = replace(
        out,
        pd_kp=tuple(k * pd_scale for k in out.pd_kp),
        pd_kd=tuple(k * pd_scale for k in out.pd_kd),
    )
    times = []
    t = float(rng.exponential(spec.push_interval_s))
    while t < horizon_s:
        times.append(t)
        t += float(rng.exponential(spec.push_interval_s))
    mags = rng.uniform(*spec.push_magnitude_range, size=len(times))
    dirs = rng.uniform(0.0, 2.0 * math.pi, size=len(times))
    deltas = np.stack([mags * np.cos(dirs), mags * np.sin(dirs)], axis=-1) \
        if times else np.empty((0, 2))
    sched = PerturbationSchedule(
        push_times=np.asarray(times),
        push_deltas=deltas,
        torque_noise_std=spec.torque_noise_std,
    )
    return out, sched


def apply_push(state: SimState, delta) -> None:
    """Instantaneous root-velocity change, in place."""
    state.data[3:5] += delta
