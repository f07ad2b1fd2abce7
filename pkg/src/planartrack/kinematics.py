"""Batched forward kinematics on numpy arrays.

All functions broadcast over arbitrary leading batch dimensions: a single
state, a trajectory of frames, or a stack of environments all go through the
same code. The per-link loop is over the (small, fixed) tree, not the batch.

Point conventions match the physics kernel: a link is a rod from its
proximal attachment to its distal endpoint; the tracked point of the base
link is its proximal origin (the root itself), every other tracked link
contributes its distal endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .robot import PackedModel, RobotModel, packed


@dataclass
class FramePoints:
    """FK output for one batch of configurations."""

    ang: np.ndarray     # (..., L) world angle of each rod
    cos: np.ndarray     # (..., L)
    sin: np.ndarray
    prox: np.ndarray    # (..., L, 2)
    com: np.ndarray     # (..., L, 2)
    distal: np.ndarray  # (..., L, 2)


@dataclass
class FrameVelocities:
    omega: np.ndarray     # (..., L)
    v_prox: np.ndarray    # (..., L, 2)
    v_com: np.ndarray
    v_distal: np.ndarray


def _packed(model) -> PackedModel:
    return packed(model) if isinstance(model, RobotModel) else model


def fk(model, root_pos, root_angle, q) -> FramePoints:
    """Positions of every rod for root pose (..., 2), (...,) and joints (..., J)."""
    pm = _packed(model)
    root_pos = np.asarray(root_pos, dtype=np.float64)
    root_angle = np.asarray(root_angle, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    batch = np.broadcast_shapes(root_pos.shape[:-1], root_angle.shape, q.shape[:-1])
    L = pm.n_links

    ang = np.empty(batch + (L,))
    ang[..., 0] = root_angle + pm.rest_angles[0]
    for i in range(1, L):
        ang[..., i] = ang[..., pm.parents[i]] + pm.rest_angles[i] + q[..., i - 1]
    c = np.cos(ang)
    s = np.sin(ang)

    prox = np.empty(batch + (L, 2))
    prox[..., 0, :] = root_pos
    for i in range(1, L):
        p = pm.parents[i]
        d = pm.anchors_m[i]
        prox[..., i, 0] = prox[..., p, 0] + d * c[..., p]
        prox[..., i, 1] = prox[..., p, 1] + d * s[..., p]

    u = np.stack([c, s], axis=-1)
    com = prox + pm.coms[:, None] * u
    distal = prox + pm.lengths[:, None] * u
    return FramePoints(ang=ang, cos=c, sin=s, prox=prox, com=com, distal=distal)


def fk_velocities(model, pts: FramePoints, root_vel, root_omega, qd) -> FrameVelocities:
    """Velocities matching an fk() result, for root rates and joint rates."""
    pm = _packed(model)
    root_vel = np.asarray(root_vel, dtype=np.float64)
    root_omega = np.asarray(root_omega, dtype=np.float64)
    qd = np.asarray(qd, dtype=np.float64)
    L = pm.n_links
    batch = pts.ang.shape[:-1]

    w = np.empty(batch + (L,))
    w[..., 0] = root_omega
    for i in range(1, L):
        w[..., i] = w[..., pm.parents[i]] + qd[..., i - 1]

    v_prox = np.empty(batch + (L, 2))
    v_prox[..., 0, :] = root_vel
    for i in range(1, L):
        p = pm.parents[i]
        d = pm.anchors_m[i]
        v_prox[..., i, 0] = v_prox[..., p, 0] - d * w[..., p] * pts.sin[..., p]
        v_prox[..., i, 1] = v_prox[..., p, 1] + d * w[..., p] * pts.cos[..., p]

    # d/dt of the unit direction is w * (-sin, cos)
    perp = np.stack([-pts.sin, pts.cos], axis=-1)
    v_com = v_prox + (pm.coms[:, None] * w[..., None]) * perp
    v_distal = v_prox + (pm.lengths[:, None] * w[..., None]) * perp
    return FrameVelocities(omega=w, v_prox=v_prox, v_com=v_com, v_distal=v_distal)


def fk_state(model, state):
    """fk + velocities straight from flat sim state (..., 6 + 2J)."""
    pm = _packed(model)
    state = np.asarray(state, dtype=np.float64)
    nj = pm.n_joints
    pts = fk(pm, state[..., 0:2], state[..., 2], state[..., 6:6 + nj])
    vel = fk_velocities(pm, pts, state[..., 3:5], state[..., 5],
                        state[..., 6 + nj:6 + 2 * nj])
    return pts, vel


def keypoints(model, pts: FramePoints, links=None) -> np.ndarray:
    """Tracked points (..., K, 2): base link -> proximal, others -> distal."""
    pm = _packed(model)
    if links is None:
        links = getattr(model, "keypoint_links", None)
        if links is None:
            raise ValueError("packed model has no keypoint list; pass links=")
    links = np.asarray(links)
    out = pts.distal[..., links, :].copy()
    base = links == 0
    if base.any():
        out[..., base, :] = pts.prox[..., 0, :][..., None, :]
    return out


def keypoint_velocities(model, vel: FrameVelocities, links=None) -> np.ndarray:
    if links is None:
        links = getattr(model, "keypoint_links", None)
        if links is None:
            raise ValueError("packed model has no keypoint list; pass links=")
    links = np.asarray(links)
    out = vel.v_distal[..., links, :].copy()
    base = links == 0
    if base.any():
        out[..., base, :] = vel.v_prox[..., 0, :][..., None, :]
    return out


def total_energy(model, state) -> np.ndarray:
    """Kinetic + gravitational potential energy of flat states (..., 6 + 2J)."""
    pm = _packed(model)
    pts, vel = fk_state(pm, state)
    ke = (0.5 * pm.masses * (vel.v_com ** 2).sum(axis=-1)
          + 0.5 * pm.inertias * vel.omega ** 2).sum(axis=-1)
    pe = (pm.masses * pm.gravity * pts.com[..., 1]).sum(axis=-1)
    return ke + pe


def rotate_into(angle, vec):
    """World vector (..., 2) expressed in a frame rotated by angle (...,)."""
    c = np.cos(angle)
    s = np.sin(angle)
    x = vec[..., 0]
    y = vec[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1)


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a), 2.0 * np.pi)
