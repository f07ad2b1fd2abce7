"""Motion clips: representation, synthetic generation, curation, file I/O.

A clip stores a kinematic reference trajectory as struct-of-arrays: root pose
and velocities, joint angles and rates, and the tracked keypoint positions
produced by forward kinematics of a reference robot. Velocities are central
differences of the stored positions, so consumers can rely on the two being
consistent.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputValidationError, InvalidClipError
from .kinematics import fk
from .kinematics import keypoints as fk_keypoints
from .robot import RobotModel, default_biped

CLIP_FORMAT_VERSION = 1
SOURCES = ("synthetic", "retargeted", "external")
CLIP_KINDS = ("walk", "squat", "wave", "kick", "turn")


@dataclass
class MotionClip:
    fps: float
    name: str
    source: str
    root_pos: np.ndarray      # (T, 2)
    root_angle: np.ndarray    # (T,)
    q: np.ndarray             # (T, J)
    keypoints: np.ndarray     # (T, K, 2)
    root_linvel: np.ndarray   # (T, 2)
    root_angvel: np.ndarray   # (T,)
    qdot: np.ndarray          # (T, J)

    def __len__(self) -> int:
        return self.root_pos.shape[0]

    @property
    def n_joints(self) -> int:
        return self.q.shape[1]

    @property
    def duration_s(self) -> float:
        return len(self) / self.fps

    def validate(self) -> None:
        if not self.fps > 0:
            raise InvalidClipError("fps must be > 0")
        if self.source not in SOURCES:
            raise InvalidClipError(f"unknown source {self.source!r}")
        t = len(self)
        shapes = {
            "root_pos": (t, 2), "root_angle": (t,), "q": (t, self.n_joints),
            "root_linvel": (t, 2), "root_angvel": (t,),
            "qdot": (t, self.n_joints),
            "keypoints": (t, self.keypoints.shape[1], 2),
        }
        for nm, want in shapes.items():
            got = getattr(self, nm).shape
            if got != want:
                raise InvalidClipError(f"{nm} has shape {got}, want {want}")
        for nm in shapes:
            if not np.all(np.isfinite(getattr(self, nm))):
                raise InvalidClipError(f"{nm} contains non-finite values")

    def velocity_consistency_error(self) -> float:
        """Max deviation of stored rates from central differences (interior
        frames). Informational: callers decide whether to reject."""
        if len(self) < 3:
            return 0.0
        err = 0.0
        for pos, vel in ((self.q, self.qdot), (self.root_pos, self.root_linvel),
                         (self.root_angle, self.root_angvel)):
            cd = (pos[2:] - pos[:-2]) * (self.fps / 2.0)
            err = max(err, float(np.abs(vel[1:-1] - cd).max()))
        return err

    def frame_state(self, i: int) -> np.ndarray:
        """Flat simulator state [x, z, th, vx, vz, w, q, qdot] at frame i."""
        return np.concatenate([
            self.root_pos[i], [self.root_angle[i]],
            self.root_linvel[i], [self.root_angvel[i]],
            self.q[i], self.qdot[i]])


def _central_diff(x: np.ndarray, fps: float) -> np.ndarray:
    v = np.empty_like(x)
    if x.shape[0] == 1:
        v[:] = 0.0
        return v
    v[1:-1] = (x[2:] - x[:-2]) * (fps / 2.0)
    v[0] = (x[1] - x[0]) * fps
    v[-1] = (x[-1] - x[-2]) * fps
    return v


def clip_from_trajectory(model: RobotModel, fps: float, root_pos, root_angle,
                         q, name: str, source: str) -> MotionClip:
    """Assemble a clip from positions only; velocities and keypoints derived."""
    root_pos = np.asarray(root_pos, dtype=np.float64)
    root_angle = np.asarray(root_angle, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    pts = fk(model, root_pos, root_angle, q)
    clip = MotionClip(
        fps=float(fps), name=name, source=source,
        root_pos=root_pos, root_angle=root_angle, q=q,
        keypoints=fk_keypoints(model, pts),
        root_linvel=_central_diff(root_pos, fps),
        root_angvel=_central_diff(root_angle, fps),
        qdot=_central_diff(q, fps),
    )
    clip.validate()
    return clip


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------
# Biped joint order: [torso, l_hip, l_knee, l_ankle, r_hip, r_knee, r_ankle].
# The leg is two 0.4 m segments; with both legs bent symmetrically by phi the
# ankle sits 0.8*cos(phi) below the hip, directly underneath it.

_STAND_Z = 0.8


def _leg_angles(phi: float) -> tuple[float, float, float]:
    """Hip/knee/ankle angles that keep the ankle below the hip and the foot
    flat, for a symmetric crouch of half-angle phi."""
    return phi, -2.0 * phi, phi


def _squat(t, p):
    amp = p.get("amplitude", 0.25)
    period = p.get("period", 2.0)
    d = amp * 0.5 * (1.0 - np.cos(2.0 * math.pi * t / period))
    phi = np.arccos(np.clip((_STAND_Z - d) / _STAND_Z, -1.0, 1.0))
    q = np.zeros(t.shape + (7,))
    hip, knee, ankle = _leg_angles(phi)
    for base in (1, 4):
        q[:, base] = hip
        q[:, base + 1] = knee
        q[:, base + 2] = ankle
    root = np.stack([np.zeros_like(t), _STAND_Z - d], axis=-1)
    return root, np.zeros_like(t), q


def _walk(t, p):
    amp = p.get("amplitude", 0.35)
    period = p.get("period", 1.0)
    speed = p.get("speed", 0.4)
    crouch = p.get("crouch", 0.25)
    w = 2.0 * math.pi / period
    q = np.zeros(t.shape + (7,))
    h0, k0, a0 = _leg_angles(crouch)
    for base, ph in ((1, 0.0), (4, math.pi)):
        swing = np.sin(w * t + ph)
        lift = 0.5 * (1.0 - np.cos(w * t + ph))      # >= 0, peaks mid-swing
        q[:, base] = h0 + amp * swing
        q[:, base + 1] = k0 - 0.5 * amp * lift
        q[:, base + 2] = a0 - 0.3 * amp * swing
    q[:, 0] = 0.05 * np.sin(2.0 * w * t)
    z = _STAND_Z * math.cos(crouch) + 0.01 * np.cos(2.0 * w * t)
    root = np.stack([speed * t, z], axis=-1)
    return root, 0.03 * np.sin(w * t), q


def _wave(t, p):
    amp = p.get("amplitude", 0.4)
    period = p.get("period", 1.5)
    w = 2.0 * math.pi / period
    q = np.zeros(t.shape + (7,))
    sway = amp * np.sin(w * t)
    q[:, 0] = sway
    for base in (1, 4):
        hip, knee, ankle = _leg_angles(0.15)
        q[:, base] = hip - 0.25 * sway
        q[:, base + 1] = knee
        q[:, base + 2] = ankle + 0.1 * sway
    root = np.stack([np.zeros_like(t),
                     np.full_like(t, _STAND_Z * math.cos(0.15))], axis=-1)
    return root, np.zeros_like(t), q


def _kick(t, p):
    amp = p.get("amplitude", 0.9)
    period = p.get("period", 2.0)
    w = 2.0 * math.pi / period
    pulse = 0.5 * (1.0 - np.cos(w * t))              # 0 -> 1 -> 0 each period
    q = np.zeros(t.shape + (7,))
    h0, k0, a0 = _leg_angles(0.2)
    # stance leg (left) stays crouched, kick leg (right) swings forward
    q[:, 1], q[:, 2], q[:, 3] = h0, k0, a0
    q[:, 4] = h0 + amp * pulse
    q[:, 5] = k0 - 0.8 * amp * pulse * (1.0 - pulse)  # tuck mid-swing
    q[:, 6] = a0 - 0.2 * amp * pulse
    q[:, 0] = -0.15 * pulse
    root = np.stack([np.zeros_like(t),
                     np.full_like(t, _STAND_Z * math.cos(0.2))], axis=-1)
    return root, -0.05 * pulse, q


def _turn(t, p):
    amp = p.get("amplitude", 0.4)
    period = p.get("period", 2.5)
    w = 2.0 * math.pi / period
    ang = amp * np.sin(w * t)
    q = np.zeros(t.shape + (7,))
    h0, k0, a0 = _leg_angles(0.2)
    for base in (1, 4):
        q[:, base] = h0 - ang                        # legs counter the lean
        q[:, base + 1] = k0
        q[:, base + 2] = a0 + ang
    q[:, 0] = -0.3 * ang
    root = np.stack([np.zeros_like(t),
                     np.full_like(t, _STAND_Z * math.cos(0.2))], axis=-1)
    return root, ang, q


_GENERATORS = {"walk": _walk, "squat": _squat, "wave": _wave,
               "kick": _kick, "turn": _turn}


def generate_clip(kind: str, params=None, fps: float = 50.0,
                  duration_s: float = 4.0, rng=None,
                  model: RobotModel | None = None) -> MotionClip:
    """Synthesize a smooth reference clip of the given kind.

    params is a dict of generator knobs (amplitude, period, speed, ...).
    rng, when given, jitters amplitude and phase by params['jitter'] percent.
    """
    if kind not in _GENERATORS:
        raise InputValidationError(
            f"unknown clip kind {kind!r}, expected one of {CLIP_KINDS}")
    n = int(round(duration_s * fps))
    if n < 2:
        raise InvalidClipError(
            f"duration {duration_s} s at {fps} fps gives {n} frames, need >= 2")
    p = dict(params or {})
    if rng is not None and p.get("jitter", 0.0) > 0.0:
        # multiplicative jitter on amplitude and period around their defaults
        j = float(p["jitter"])
        amp0 = p.get("amplitude", _AMP_DEFAULTS[kind])
        per0 = p.get("period", _PERIOD_DEFAULTS[kind])
        p["amplitude"] = amp0 * float(1.0 + j * (2.0 * rng.random() - 1.0))
        p["period"] = per0 * float(1.0 + j * (2.0 * rng.random() - 1.0))
    model = model if model is not None else default_biped()
    t = np.arange(n) / fps
    root, ang, q = _GENERATORS[kind](t, p)
    lo = np.array([lim[0] for lim in model.joint_limits])
    hi = np.array([lim[1] for lim in model.joint_limits])
    q = np.clip(q, lo, hi)
    name = p.get("name", f"{kind}_{n}f")
    return clip_from_trajectory(model, fps, root, ang, q, name, "synthetic")


_AMP_DEFAULTS = {"walk": 0.35, "squat": 0.25, "wave": 0.4,
                 "kick": 0.9, "turn": 0.4}
_PERIOD_DEFAULTS = {"walk": 1.0, "squat": 2.0, "wave": 1.5,
                    "kick": 2.0, "turn": 2.5}


# ---------------------------------------------------------------------------
# Curation
# ---------------------------------------------------------------------------

@dataclass
class CurationPolicy:
    min_frames: int = 10
    max_joint_vel: float = 12.0     # rad/s
    max_joint_acc: float = 200.0    # rad/s^2
    max_root_speed: float = 3.0     # m/s

    def __post_init__(self):
        for nm in ("min_frames", "max_joint_vel", "max_joint_acc",
                   "max_root_speed"):
            if not getattr(self, nm) > 0:
                raise InputValidationError(f"{nm} must be > 0")


@dataclass
class RejectionReport:
    entries: list = field(default_factory=list)   # (name, rule, detail)

    def render(self) -> str:
        if not self.entries:
            return "rejected: none\n"
        lines = ["rejected:"]
        for name, rule, detail in self.entries:
            lines.append(f"  {name}: {rule} ({detail})")
        return "\n".join(lines) + "\n"


def first_violation(clip: MotionClip, policy: CurationPolicy):
    """(rule, detail) of the first threshold the clip trips, else None.

    Velocity/acceleration checks use frame differences of the stored
    positions, not the stored rates, so a clip cannot pass by lying about
    its velocities.
    """
    if len(clip) < policy.min_frames:
        return "min_frames", f"{len(clip)} < {policy.min_frames}"
    dq = np.abs(np.diff(clip.q, axis=0)) * clip.fps
    if dq.size and dq.max() > policy.max_joint_vel:
        return "max_joint_vel", f"{dq.max():.3g} > {policy.max_joint_vel:.3g}"
    if len(clip) >= 3:
        ddq = np.abs(np.diff(clip.q, n=2, axis=0)) * clip.fps ** 2
        if ddq.size and ddq.max() > policy.max_joint_acc:
            return ("max_joint_acc",
                    f"{ddq.max():.3g} > {policy.max_joint_acc:.3g}")
    sp = np.linalg.norm(np.diff(clip.root_pos, axis=0), axis=-1) * clip.fps
    if sp.size and sp.max() > policy.max_root_speed:
        return ("max_root_speed",
                f"{sp.max():.3g} > {policy.max_root_speed:.3g}")
    return None


def curate(clips, policy: CurationPolicy):
    kept, report = [], RejectionReport()
    for clip in clips:
        hit = first_violation(clip, policy)
        if hit is None:
            kept.append(clip)
        else:
            report.entries.append((clip.name, hit[0], hit[1]))
    return kept, report


# ---------------------------------------------------------------------------
# File format: one JSON header line, then one JSON record per frame
# ---------------------------------------------------------------------------

def save_clip(clip: MotionClip, path) -> None:
    clip.validate()
    with open(path, "w") as f:
        header = {
            "format_version": CLIP_FORMAT_VERSION,
            "name": clip.name, "source": clip.source, "fps": clip.fps,
            "n_frames": len(clip), "n_joints": clip.n_joints,
            "n_keypoints": clip.keypoints.shape[1],
        }
        f.write(json.dumps(header) + "\n")
        for i in range(len(clip)):
            rec = {
                "root_pos": clip.root_pos[i].tolist(),
                "root_angle": float(clip.root_angle[i]),
                "q": clip.q[i].tolist(),
                "keypoints": clip.keypoints[i].tolist(),
                "root_linvel": clip.root_linvel[i].tolist(),
                "root_angvel": float(clip.root_angvel[i]),
                "qdot": clip.qdot[i].tolist(),
            }
            f.write(json.dumps(rec) + "\n")


def load_clip(path) -> MotionClip:
    with open(path) as f:
        try:
            header = json.loads(f.readline())
        except json.JSONDecodeError as e:
            raise InvalidClipError(f"{path}: bad header: {e}") from None
        if header.get("format_version") != CLIP_FORMAT_VERSION:
            raise InvalidClipError(
                f"{path}: format_version {header.get('format_version')!r}, "
                f"expected {CLIP_FORMAT_VERSION}")
        frames = []
        for line in f:
            line = line.strip()
            if line:
                frames.append(json.loads(line))
    if len(frames) != header["n_frames"]:
        raise InvalidClipError(
            f"{path}: header says {header['n_frames']} frames, "
            f"found {len(frames)}")
    def col(key):
        return np.array([fr[key] for fr in frames], dtype=np.float64)
    clip = MotionClip(
        fps=float(header["fps"]), name=header["name"],
        source=header["source"],
        root_pos=col("root_pos"), root_angle=col("root_angle"),
        q=col("q"), keypoints=col("keypoints"),
        root_linvel=col("root_linvel"), root_angvel=col("root_angvel"),
        qdot=col("qdot"),
    )
    clip.validate()
    return clip


@dataclass
class ClipBank:
    """Immutable clip collection with uniform sampling."""

    clips: tuple

    def __post_init__(self):
        if not self.clips:
            raise InvalidClipError("clip bank is empty")
        object.__setattr__(self, "clips", tuple(self.clips))

    def __len__(self):
        return len(self.clips)

    def __getitem__(self, i):
        return self.clips[i]

    def sample(self, rng) -> tuple[int, MotionClip]:
        i = int(rng.integers(0, len(self.clips)))
        return i, self.clips[i]


def standard_bank(model: RobotModel | None = None, fps: float = 50.0,
                  duration_s: float = 4.0) -> ClipBank:
    """One clip of each kind with default parameters."""
    return ClipBank(tuple(
        generate_clip(kind, None, fps, duration_s, model=model)
        for kind in CLIP_KINDS))
