"""Two-stage retargeting from a source stick figure to the robot.

Stage 1 (fit_shape) scales the source skeleton's limb groups so its rest
pose matches the robot's tracked keypoints. Stage 2 (retarget_sequence)
runs gradient descent over the whole robot trajectory {root_pos_t,
root_angle_t, q_t} to track the scaled source keypoints, with smoothness
and joint-limit regularizers. Both stages use analytic gradients and
backtracking line search, so the recorded objective never increases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .clips import MotionClip, clip_from_trajectory
from .errors import InputValidationError, OptimizationError
from .kinematics import fk, keypoints as fk_keypoints
from .robot import RobotModel, packed

N_SHAPE = 4


@dataclass
class SourceSkeleton:
    """Planar stick figure: per-joint parent-relative rest offsets, a limb
    group per joint (sharing one scale), and a correspondence to the robot's
    tracked keypoints."""

    parents: tuple            # per source joint, -1 for root
    rest_offsets: np.ndarray  # (n, 2) meters, parent-relative
    limb_of: tuple            # per joint, group index in [0, N_SHAPE)
    correspondence: tuple     # pairs (source_joint, robot_keypoint_index)

    @property
    def n_source_joints(self) -> int:
        return len(self.parents)

    def validate(self) -> None:
        n = self.n_source_joints
        if self.rest_offsets.shape != (n, 2):
            raise InputValidationError("rest_offsets must be (n_joints, 2)")
        if len(self.limb_of) != n:
            raise InputValidationError("limb_of must have one entry per joint")
        if any(not 0 <= g < N_SHAPE for g in self.limb_of):
            raise InputValidationError(f"limb groups must be in [0, {N_SHAPE})")
        if self.parents[0] != -1 or any(
                not 0 <= p < i for i, p in enumerate(self.parents) if i > 0):
            raise InputValidationError("parents must be topologically ordered")
        tgt = [k for _, k in self.correspondence]
        src = [s for s, _ in self.correspondence]
        if len(set(tgt)) != len(tgt) or len(set(src)) != len(src):
            raise InputValidationError("correspondence must be injective")
        if any(not 0 <= s < n for s in src):
            raise InputValidationError("correspondence source joint out of range")

    def paths(self) -> list:
        out = []
        for j in range(self.n_source_joints):
            path, a = [], j
            while a != -1:
                path.append(a)
                a = self.parents[a]
            out.append(path[::-1])
        return out


@dataclass
class SourceMotion:
    """Pose sequence for a source skeleton."""

    root_pos: np.ndarray    # (T, 2)
    root_angle: np.ndarray  # (T,)
    theta: np.ndarray       # (T, n) parent-relative joint angles, theta[:,0]=0
    name: str = "source"

    def __len__(self):
        return self.root_pos.shape[0]


def source_positions(skeleton: SourceSkeleton, shape, root_pos, root_angle,
                     theta) -> np.ndarray:
    """World positions (T, n, 2) of every source joint."""
    shape = np.asarray(shape, dtype=np.float64)
    if shape.shape != (N_SHAPE,) or np.any(shape <= 0):
        raise InputValidationError(f"shape must be {N_SHAPE} positive scales")
    root_pos = np.atleast_2d(np.asarray(root_pos, dtype=np.float64))
    root_angle = np.atleast_1d(np.asarray(root_angle, dtype=np.float64))
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    n = skeleton.n_source_joints
    t = root_pos.shape[0]
    cum = np.empty((t, n))
    pos = np.empty((t, n, 2))
    for j in range(n):
        par = skeleton.parents[j]
        cum[:, j] = (root_angle if par == -1 else cum[:, par]) + theta[:, j]
        off = shape[skeleton.limb_of[j]] * skeleton.rest_offsets[j]
        base = root_pos if par == -1 else pos[:, par]
        c, s = np.cos(cum[:, j]), np.sin(cum[:, j])
        pos[:, j, 0] = base[:, 0] + c * off[0] - s * off[1]
        pos[:, j, 1] = base[:, 1] + s * off[0] + c * off[1]
    return pos


# ---------------------------------------------------------------------------
# Stage 1: shape fit
# ---------------------------------------------------------------------------

@dataclass
class FitResult:
    shape: np.ndarray
    objective: float
    grad_norm: float
    converged: bool
    n_iter: int
    history: list = field(default_factory=list)


def _shape_design(skeleton: SourceSkeleton):
    """Rest-pose position of each corresponding joint is A @ shape; returns
    (A stacked (K, 2, N_SHAPE), keypoint indices)."""
    paths = skeleton.paths()
    rows, kp_idx = [], []
    for sj, kj in skeleton.correspondence:
        a = np.zeros((2, N_SHAPE))
        for j in paths[sj]:
            a[:, skeleton.limb_of[j]] += skeleton.rest_offsets[j]
        rows.append(a)
        kp_idx.append(kj)
    return np.stack(rows), kp_idx


def robot_rest_keypoints(robot: RobotModel) -> np.ndarray:
    """Tracked keypoints in the rest pose, relative to the root."""
    pts = fk(robot, np.zeros(2), 0.0, np.zeros(robot.n_joints))
    return fk_keypoints(robot, pts)


def fit_shape(skeleton: SourceSkeleton, robot: RobotModel,
              max_iter: int = 2000, tol: float = 1e-5) -> FitResult:
    """Optimize limb scales so the source rest pose matches the robot's.

    Groups that never appear on a corresponding joint's path have zero
    gradient and keep their initial scale of 1.
    """
    skeleton.validate()
    if not skeleton.correspondence:
        raise InputValidationError("correspondence must be non-empty")
    a, kp_idx = _shape_design(skeleton)          # (K, 2, G)
    target = robot_rest_keypoints(robot)[kp_idx]  # (K, 2)

    def f_g(beta):
        r = a @ beta - target                     # (K, 2)
        return float(np.sum(r * r)), 2.0 * np.einsum("kdg,kd->g", a, r)

    beta = np.ones(N_SHAPE)
    val, grad = f_g(beta)
    hist = [val]
    alpha, it = 0.1, 0
    for it in range(1, max_iter + 1):
        gn = float(np.linalg.norm(grad))
        if gn < tol:
            return FitResult(beta, val, gn, True, it - 1, hist)
        while alpha > 1e-16:
            cand = beta - alpha * grad
            v2, g2 = f_g(cand)
            if v2 <= val - 1e-4 * alpha * gn * gn:
                beta, val, grad = cand, v2, g2
                alpha *= 1.2
                break
            alpha *= 0.5
        hist.append(val)
    return FitResult(beta, val, float(np.linalg.norm(grad)), False, it, hist)


# ---------------------------------------------------------------------------
# Stage 2: sequence retarget
# ---------------------------------------------------------------------------

class _TrajProblem:
    """Trajectory objective in link-world-angle coordinates.

    The decision variables stay {root_pos_t, root_angle_t, q_t} as an
    affine bijection of (root_pos, per-link world angles w): root_angle =
    w_0 - rest_0, q_j = w_{j+1} - w_parent - rest_{j+1}. Optimizing in w
    fixes the conditioning: a keypoint depends on each w through that
    segment's own lever arm, so no near-null direction couples the root
    angle to the hip joints. The objective value is identical either way.
    """

    def __init__(self, robot, kp_idx, w_smooth, w_limit):
        pm = packed(robot)
        nl, nj = pm.n_links, pm.n_joints
        self.w_smooth, self.w_limit = w_smooth, w_limit
        self.lo = np.array([l[0] for l in robot.joint_limits])
        self.hi = np.array([l[1] for l in robot.joint_limits])
        # x_ang = w @ B.T + c  maps world angles to (root_angle, q)
        b = np.zeros((1 + nj, nl))
        c = np.empty(1 + nj)
        b[0, 0] = 1.0
        c[0] = -pm.rest_angles[0]
        for j in range(nj):
            b[1 + j, j + 1] = 1.0
            b[1 + j, pm.parents[j + 1]] = -1.0
            c[1 + j] = -pm.rest_angles[j + 1]
        self.b_map, self.c_map = b, c
        # per-keypoint chains of (angle index, segment length); a keypoint is
        # root_pos plus the sum of s * u(w_a) over its chain
        self.chains = []
        for k in kp_idx:
            lk = robot.keypoint_links[k]
            segs = []
            if lk != 0:
                segs.append((lk, float(pm.lengths[lk])))
            node = lk
            while node != 0:
                par = int(pm.parents[node])
                if pm.anchors_m[node] != 0.0:
                    segs.append((par, float(pm.anchors_m[node])))
                node = par
            # a link-0 keypoint has an empty chain: it is root_pos itself
            self.chains.append(segs)
        # descent runs in lever-normalized coordinates: each angle is scaled
        # by its root-sum-square lever over all chains, so a short segment
        # (small position footprint) takes correspondingly larger angular
        # steps. A fixed diagonal change of variables, still plain gradient
        # descent; without it the step size is gated by the longest lever.
        # the ratio is capped at 10x: equalizing levers fully would let the
        # short-segment angles take steps big enough to hop into mirror
        # IK basins while the residual is still large
        s2 = np.zeros(nl)
        n_chains = 0
        for segs in self.chains:
            n_chains += 1
            for a, s in segs:
                s2[a] += s * s
        floor = max(1e-6, 0.1 * float(s2.max()))
        self.inv_s2_w = 1.0 / np.maximum(s2, floor)
        self.inv_s2_rp = 1.0 / max(n_chains, 1)

    def angles(self, w):
        return w @ self.b_map.T + self.c_map    # (T, 1+J)

    def rest_world_angles(self, pm, root_angle):
        """World angles of the q = 0 pose for a (T,) root angle array."""
        nl = pm.n_links
        base = np.empty(nl)
        base[0] = pm.rest_angles[0]
        for i in range(1, nl):
            base[i] = base[pm.parents[i]] + pm.rest_angles[i]
        return root_angle[:, None] + base[None, :]

    def value_grad(self, targets, rp, w):
        t_len, nl = w.shape
        cw, sw = np.cos(w), np.sin(w)
        kp = np.empty((t_len, len(self.chains), 2))
        for i, segs in enumerate(self.chains):
            px = rp[:, 0].copy()
            pz = rp[:, 1].copy()
            for a, s in segs:
                px += s * cw[:, a]
                pz += s * sw[:, a]
            kp[:, i, 0] = px
            kp[:, i, 1] = pz
        resid = kp - targets
        val = float(np.sum(resid * resid))
        g_rp = 2.0 * resid.sum(axis=1)
        g_w = np.zeros_like(w)
        for i, segs in enumerate(self.chains):
            rx, rz = resid[:, i, 0], resid[:, i, 1]
            for a, s in segs:
                # d(seg)/dw = s * perp(u(w)) = (-s sin, s cos)
                g_w[:, a] += 2.0 * (rx * (-s * sw[:, a]) + rz * (s * cw[:, a]))
        x_ang = self.angles(w)
        g_x = np.zeros_like(x_ang)
        if self.w_smooth > 0.0 and t_len > 1:
            d = rp[1:] - rp[:-1]
            val += self.w_smooth * float(np.sum(d * d))
            g_rp[1:] += 2.0 * self.w_smooth * d
            g_rp[:-1] -= 2.0 * self.w_smooth * d
            d = x_ang[1:] - x_ang[:-1]
            val += self.w_smooth * float(np.sum(d * d))
            g_x[1:] += 2.0 * self.w_smooth * d
            g_x[:-1] -= 2.0 * self.w_smooth * d
        if self.w_limit > 0.0:
            q = x_ang[:, 1:]
            v_hi = np.maximum(0.0, q - self.hi)
            v_lo = np.maximum(0.0, self.lo - q)
            val += self.w_limit * float(np.sum(v_hi * v_hi)
                                        + np.sum(v_lo * v_lo))
            g_x[:, 1:] += 2.0 * self.w_limit * (v_hi - v_lo)
        g_w += g_x @ self.b_map
        return val, kp, g_rp, g_w


def _source_guided_init(prob, skeleton, src, chain_src_joints, w):
    """Point each robot chain along its source polyline, in place.

    Position targets alone cannot pick a chain's elbow side (the mirror
    pose fits them exactly), so the initial pose follows the source bone
    directions: each robot segment aims along the arclength-matched span
    of the source path. Chains are visited shortest first; an angle set by
    one chain is left alone by later ones.
    """
    t_len = src.shape[0]
    rows = np.arange(t_len)
    paths = skeleton.paths()
    assigned = set()
    items = sorted(zip(prob.chains, chain_src_joints), key=lambda it: len(it[0]))
    for segs, sj in items:
        if not segs:
            continue
        path = paths[sj]
        pos = src[:, path]                        # (T, P, 2)
        if pos.shape[1] < 2:
            continue
        d = np.linalg.norm(np.diff(pos, axis=1), axis=-1)
        arc = np.concatenate([np.zeros((t_len, 1)), np.cumsum(d, axis=1)],
                             axis=1)              # (T, P)
        total = arc[:, -1]
        if np.any(total <= 0.0):
            continue
        rsegs = segs[::-1]                        # root -> distal
        lens = np.array([s for _, s in rsegs])
        cum = np.concatenate([[0.0], np.cumsum(lens)])
        if cum[-1] <= 0.0:
            continue

        def point_at(u):
            idx = np.clip(np.sum(arc[:, :-1] <= u[:, None], axis=1) - 1,
                          0, pos.shape[1] - 2)
            a0 = arc[rows, idx]
            a1 = arc[rows, idx + 1]
            tt = np.where(a1 > a0, (u - a0) / np.maximum(a1 - a0, 1e-12), 0.0)
            return pos[rows, idx] + tt[:, None] * (pos[rows, idx + 1]
                                                   - pos[rows, idx])

        for i, (a, s) in enumerate(rsegs):
            if a in assigned or s == 0.0:
                continue
            p0 = point_at(total * (cum[i] / cum[-1]))
            p1 = point_at(total * (cum[i + 1] / cum[-1]))
            v = p1 - p0
            ok = np.hypot(v[:, 0], v[:, 1]) > 1e-9
            # keep each angle on the 2*pi branch closest to its rest value;
            # the q map takes raw differences of world angles
            raw = np.arctan2(v[ok, 1], v[ok, 0])
            delta = raw - w[ok, a]
            w[ok, a] += delta - 2.0 * np.pi * np.round(delta / (2.0 * np.pi))
            assigned.add(a)


def retarget_sequence(skeleton: SourceSkeleton, shape, source_motion,
                      robot: RobotModel, reg=None, fps: float = 50.0,
                      max_iter: int = 2000, tol: float = 1e-5,
                      history=None) -> MotionClip:
    """Fit a robot trajectory to the scaled source keypoints.

    reg: {"w_smooth": float, "w_limit": float}; defaults 0.1 and 10.
    history: optional list; accepted objective values get appended to it.
    Raises OptimizationError (with the iteration index) if the objective
    turns non-finite.
    """
    if len(source_motion) == 0:
        raise InputValidationError("source_motion must be non-empty")
    reg = dict(reg or {})
    w_smooth = float(reg.get("w_smooth", 0.1))
    w_limit = float(reg.get("w_limit", 10.0))
    src = source_positions(skeleton, shape, source_motion.root_pos,
                           source_motion.root_angle, source_motion.theta)
    kp_idx = [k for _, k in skeleton.correspondence]
    src_joints = [s for s, _ in skeleton.correspondence]
    # order targets by robot keypoint column for a stable comparison layout
    order = np.argsort(kp_idx)
    kp_idx = [kp_idx[i] for i in order]
    targets = src[:, [src_joints[i] for i in order]]
    pm = packed(robot)

    prob = _TrajProblem(robot, kp_idx, w_smooth, w_limit)
    rp = source_motion.root_pos.astype(np.float64).copy()
    w = prob.rest_world_angles(pm, source_motion.root_angle.astype(np.float64))
    _source_guided_init(prob, skeleton, src,
                        [src_joints[i] for i in order], w)

    val, _, g_rp, g_w = prob.value_grad(targets, rp, w)
    alpha = 1e-2
    if history is not None:
        history.append(val)
    for it in range(1, max_iter + 1):
        if not math.isfinite(val):
            raise OptimizationError("retarget objective became non-finite",
                                    iteration=it - 1)
        d_rp = g_rp * prob.inv_s2_rp
        d_w = g_w * prob.inv_s2_w
        gdot = float(np.sum(g_rp * d_rp) + np.sum(g_w * d_w))
        if math.sqrt(gdot) < tol:
            break
        accepted = False
        while alpha > 1e-16:
            rp2 = rp - alpha * d_rp
            w2 = w - alpha * d_w
            v2, _, n_rp, n_w = prob.value_grad(targets, rp2, w2)
            if math.isfinite(v2) and v2 <= val - 1e-4 * alpha * gdot:
                rp, w = rp2, w2
                val, g_rp, g_w = v2, n_rp, n_w
                alpha *= 1.5
                accepted = True
                break
            alpha *= 0.5
        if history is not None:
            history.append(val)
        if not accepted:
            break
    x_ang = prob.angles(w)
    ra = x_ang[:, 0]
    q = np.clip(x_ang[:, 1:], prob.lo, prob.hi)
    clip = clip_from_trajectory(robot, fps, rp, ra, q,
                                name=source_motion.name, source="retargeted")
    return clip


# ---------------------------------------------------------------------------
# Robot-derived source skeletons (round-trip tooling)
# ---------------------------------------------------------------------------

def skeleton_from_robot(robot: RobotModel) -> SourceSkeleton:
    """Stick figure with one source joint per robot link (at its distal end)
    plus the root, so every bone spans exactly one rigid robot segment.
    Correspondence maps the robot's tracked keypoints onto the matching
    source joints; interior joints (e.g. ankles under toe keypoints) stay
    uncorresponded."""
    pm = packed(robot)
    pts = fk(robot, np.zeros(2), 0.0, np.zeros(robot.n_joints))
    nl = pm.n_links
    # source joint 0 is the root; joint i+1 sits at link i's distal end.
    # A link anchored at its parent's distal end hangs from that joint; one
    # anchored at the parent's proximal end hangs from wherever the parent
    # hangs (recursively), which is the same world point.
    attach = np.empty(nl, dtype=int)
    for i in range(nl):
        par = int(pm.parents[i])
        if par < 0:
            attach[i] = 0
        elif pm.anchors_m[i] != 0.0:
            attach[i] = par + 1
        else:
            attach[i] = attach[par]
    parents = (-1,) + tuple(int(attach[i]) for i in range(nl))
    pos = np.vstack([np.zeros(2), pts.distal])
    offsets = np.zeros((nl + 1, 2))
    for j in range(1, nl + 1):
        offsets[j] = pos[j] - pos[parents[j]]
    # limb groups: path-length buckets keep symmetric limbs on shared scales
    depth = np.zeros(nl + 1, dtype=int)
    for j in range(1, nl + 1):
        depth[j] = depth[parents[j]] + 1
    limb_of = (0,) + tuple(min(int(depth[j]) - 1, N_SHAPE - 1)
                           for j in range(1, nl + 1))
    corr = []
    for k, lk in enumerate(robot.keypoint_links):
        corr.append((0 if lk == 0 else lk + 1, k))
    sk = SourceSkeleton(parents=parents, rest_offsets=offsets,
                        limb_of=limb_of, correspondence=tuple(corr))
    sk.validate()
    return sk


def source_motion_from_clip(skeleton: SourceSkeleton, clip: MotionClip,
                            robot: RobotModel) -> SourceMotion:
    """Invert the robot-derived skeleton against a clip, frame by frame.

    Every bone of skeleton_from_robot spans a rigid robot segment, so the
    bone angles follow exactly from the joint world positions and the
    round trip through source_positions reproduces the clip keypoints.
    """
    pts = fk(robot, clip.root_pos, clip.root_angle, clip.q)
    pos = np.concatenate([clip.root_pos[:, None, :], pts.distal], axis=1)
    t_len, n = len(clip), skeleton.n_source_joints
    theta = np.zeros((t_len, n))
    cum = np.zeros((t_len, n))
    cum[:, 0] = clip.root_angle
    for j in range(1, n):
        par = skeleton.parents[j]
        d = pos[:, j] - pos[:, par]
        off = skeleton.rest_offsets[j]
        cum[:, j] = np.arctan2(d[:, 1], d[:, 0]) - math.atan2(off[1], off[0])
        theta[:, j] = cum[:, j] - cum[:, par]
    return SourceMotion(root_pos=clip.root_pos.copy(),
                        root_angle=clip.root_angle.copy(),
                        theta=theta, name=clip.name)
