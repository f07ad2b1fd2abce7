"""Robot morphology: planar floating-base kinematic trees.

A robot is a tree of thin rods. Link 0 is the base: its proximal end sits at
the root position and its direction is root_angle + rest_angles[0]. Every
other link i hangs off joint i-1, attached to its parent rod at a fractional
anchor point, with a fixed rest rotation plus the joint coordinate q[i-1].

The tracked point of the base link is its proximal origin (the root itself);
every other tracked link contributes its distal endpoint.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml

from .errors import ConfigError

ROBOT_FORMAT_VERSION = 1


@dataclass
class RobotModel:
    """Morphology, actuation and contact parameters of a planar robot."""

    name: str
    link_parents: tuple[int, ...]          # per link, -1 for the base
    link_lengths: tuple[float, ...]        # m
    link_masses: tuple[float, ...]         # kg
    link_coms: tuple[float, ...]           # m along the rod from the proximal end
    link_anchors: tuple[float, ...]        # attachment point, fraction of parent length
    rest_angles: tuple[float, ...]         # rad, relative to parent direction
    joint_limits: tuple[tuple[float, float], ...]   # rad (lo, hi) per joint
    torque_limits: tuple[float, ...]       # N*m per joint
    pd_kp: tuple[float, ...]
    pd_kd: tuple[float, ...]
    keypoint_links: tuple[int, ...]
    foot_links: tuple[int, ...] = ()
    joint_damping: tuple[float, ...] = ()  # viscous, integrated implicitly
    contact_stiffness: float = 1.0e5       # N/m
    contact_damping: float = 300.0         # N*s/m
    friction_coeff: float = 1.0
    gravity: float = 9.81                  # m/s^2, set 0 to disable
    base_fixed: bool = False

    @property
    def n_links(self) -> int:
        return len(self.link_lengths)

    @property
    def n_joints(self) -> int:
        return self.n_links - 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.joint_damping:
            object.__setattr__(self, "joint_damping", (0.0,) * self.n_joints)
        L = self.n_links
        if L < 1:
            raise ConfigError("robot needs at least a base link")
        if len(self.link_parents) != L or self.link_parents[0] != -1:
            raise ConfigError("link_parents must cover every link, base parent = -1")
        for i, p in enumerate(self.link_parents[1:], start=1):
            if not 0 <= p < i:
                raise ConfigError(f"link {i}: parent {p} must precede it in the tree")
        if any(l <= 0 for l in self.link_lengths):
            raise ConfigError("link_lengths must be > 0")
        if any(m <= 0 for m in self.link_masses):
            raise ConfigError("link_masses must be > 0")
        for i, c in enumerate(self.link_coms):
            if not 0.0 <= c <= self.link_lengths[i]:
                raise ConfigError(f"link {i}: com offset {c} outside rod")
        if any(not 0.0 <= a <= 1.0 for a in self.link_anchors):
            raise ConfigError("link_anchors must be fractions in [0, 1]")
        nj = self.n_joints
        for arr, nm in [(self.joint_limits, "joint_limits"),
                        (self.torque_limits, "torque_limits"),
                        (self.pd_kp, "pd_kp"), (self.pd_kd, "pd_kd"),
                        (self.joint_damping, "joint_damping")]:
            if len(arr) != nj:
                raise ConfigError(f"{nm} must have one entry per joint ({nj})")
        if any(b < 0 for b in self.joint_damping):
            raise ConfigError("joint_damping must be >= 0")
        for j, (lo, hi) in enumerate(self.joint_limits):
            if not lo < hi:
                raise ConfigError(f"joint {j}: limit lo {lo} must be < hi {hi}")
        if self.friction_coeff < 0:
            raise ConfigError("friction_coeff must be >= 0")
        if any(not 0 <= k < L for k in self.keypoint_links):
            raise ConfigError("keypoint_links must index valid links")
        if any(not 0 <= k < L for k in self.foot_links):
            raise ConfigError("foot_links must index valid links")

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoint_links)

    def with_overrides(self, **kw) -> "RobotModel":
        return replace(self, **kw)

    # -- inertia convention: thin rod about its own COM -------------------
    def link_inertias(self) -> np.ndarray:
        L = np.asarray(self.link_lengths)
        m = np.asarray(self.link_masses)
        return m * L * L / 12.0

    def to_dict(self) -> dict:
        return {
            "format_version": ROBOT_FORMAT_VERSION,
            "name": self.name,
            "link_parents": list(self.link_parents),
            "link_lengths": list(self.link_lengths),
            "link_masses": list(self.link_masses),
            "link_coms": list(self.link_coms),
            "link_anchors": list(self.link_anchors),
            "rest_angles": list(self.rest_angles),
            "joint_limits": [list(l) for l in self.joint_limits],
            "torque_limits": list(self.torque_limits),
            "pd_kp": list(self.pd_kp),
            "pd_kd": list(self.pd_kd),
            "joint_damping": list(self.joint_damping),
            "keypoint_links": list(self.keypoint_links),
            "foot_links": list(self.foot_links),
            "contact_stiffness": self.contact_stiffness,
            "contact_damping": self.contact_damping,
            "friction_coeff": self.friction_coeff,
            "gravity": self.gravity,
            "base_fixed": self.base_fixed,
        }


def save_robot(model: RobotModel, path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(model.to_dict(), f, sort_keys=False)


def load_robot(path) -> RobotModel:
    with open(path) as f:
        raw = yaml.safe_load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: robot file must be a mapping")
    version = raw.pop("format_version", None)
    if version != ROBOT_FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported robot format_version {version!r}")
    try:
        return RobotModel(
            name=raw["name"],
            link_parents=tuple(raw["link_parents"]),
            link_lengths=tuple(raw["link_lengths"]),
            link_masses=tuple(raw["link_masses"]),
            link_coms=tuple(raw["link_coms"]),
            link_anchors=tuple(raw["link_anchors"]),
            rest_angles=tuple(raw["rest_angles"]),
            joint_limits=tuple((float(lo), float(hi)) for lo, hi in raw["joint_limits"]),
            torque_limits=tuple(raw["torque_limits"]),
            pd_kp=tuple(raw["pd_kp"]),
            pd_kd=tuple(raw["pd_kd"]),
            joint_damping=tuple(raw.get("joint_damping", ())),
            keypoint_links=tuple(raw["keypoint_links"]),
            foot_links=tuple(raw.get("foot_links", ())),
            contact_stiffness=float(raw.get("contact_stiffness", 1.0e5)),
            contact_damping=float(raw.get("contact_damping", 300.0)),
            friction_coeff=float(raw.get("friction_coeff", 1.0)),
            gravity=float(raw.get("gravity", 9.81)),
            base_fixed=bool(raw.get("base_fixed", False)),
        )
    except KeyError as e:
        raise ConfigError(f"{path}: missing robot field {e}") from None


# ---------------------------------------------------------------------------
# Stock morphologies
# ---------------------------------------------------------------------------

def default_biped(name: str = "planar-biped-7") -> RobotModel:
    """7-joint planar biped: torso pivot, 2x (hip, knee, ankle).

    Links: 0 pelvis (base, points up), 1 torso, 2/5 thighs, 3/6 shanks,
    4/7 feet. Hips attach at the root; at q = 0 the legs hang straight down
    and the feet point forward. Keypoints: root, head, both knees, both toes.
    """
    return RobotModel(
        name=name,
        link_parents=(-1, 0, 0, 2, 3, 0, 5, 6),
        link_lengths=(0.15, 0.45, 0.40, 0.40, 0.15, 0.40, 0.40, 0.15),
        link_masses=(8.0, 14.0, 3.0, 2.0, 0.8, 3.0, 2.0, 0.8),
        link_coms=(0.075, 0.225, 0.20, 0.20, 0.075, 0.20, 0.20, 0.075),
        link_anchors=(0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0),
        rest_angles=(math.pi / 2, 0.0, math.pi, 0.0, math.pi / 2,
                     math.pi, 0.0, math.pi / 2),
        joint_limits=((-0.9, 0.9),
                      (-2.0, 2.0), (-2.4, 0.05), (-1.0, 1.0),
                      (-2.0, 2.0), (-2.4, 0.05), (-1.0, 1.0)),
        torque_limits=(60.0, 90.0, 90.0, 40.0, 90.0, 90.0, 40.0),
        pd_kp=(120.0, 220.0, 220.0, 60.0, 220.0, 220.0, 60.0),
        pd_kd=(8.0, 12.0, 12.0, 0.8, 12.0, 12.0, 0.8),
        joint_damping=(4.0, 6.0, 6.0, 1.0, 6.0, 6.0, 1.0),
        keypoint_links=(0, 1, 2, 5, 4, 7),
        foot_links=(4, 7),
        # stiff ground with near-critical damping at the contact points; the
        # kernel integrates the normal direction implicitly so neither value
        # is bounded by the explicit substep limit
        contact_stiffness=1.0e5,
        contact_damping=300.0,
    )


def serial_chain(lengths, masses=None, name: str = "chain", base_fixed: bool = False,
                 gravity: float = 9.81, kp: float = 0.0, kd: float = 0.0,
                 torque_limit: float = 0.0, joint_limit: float = 4 * math.pi) -> RobotModel:
    """Serial chain test rig: base rod plus one link per joint, all along +x at rest.

    With root at the origin and zero rest angles, (root_angle, q...) are the
    absolute and relative rod directions, so hand-computed FK is easy.
    """
    n = len(lengths)
    if masses is None:
        masses = [1.0] * n
    nj = n - 1
    return RobotModel(
        name=name,
        link_parents=tuple([-1] + list(range(n - 1))),
        link_lengths=tuple(float(l) for l in lengths),
        link_masses=tuple(float(m) for m in masses),
        link_coms=tuple(float(l) / 2 for l in lengths),
        link_anchors=tuple([0.0] + [1.0] * (n - 1)),
        rest_angles=tuple([0.0] * n),
        joint_limits=tuple((-joint_limit, joint_limit) for _ in range(nj)),
        torque_limits=tuple([torque_limit] * nj),
        pd_kp=tuple([kp] * nj),
        pd_kd=tuple([kd] * nj),
        keypoint_links=tuple(range(n)),
        foot_links=(),
        gravity=gravity,
        base_fixed=base_fixed,
    )


def pendulum(length: float = 0.4, mass: float = 1.0, gravity: float = 9.81) -> RobotModel:
    """Single rod swinging from a pinned base; q[0] measured from the base rod."""
    return RobotModel(
        name="pendulum",
        link_parents=(-1, 0),
        link_lengths=(0.05, length),
        link_masses=(1.0, mass),
        link_coms=(0.025, length / 2),
        link_anchors=(0.0, 0.0),
        rest_angles=(0.0, 0.0),
        joint_limits=((-100.0, 100.0),),
        torque_limits=(0.0,),
        pd_kp=(0.0,),
        pd_kd=(0.0,),
        keypoint_links=(0, 1),
        foot_links=(),
        contact_stiffness=0.0,   # the rod swings below z = 0; no ground here
        contact_damping=0.0,
        gravity=gravity,
        base_fixed=True,
    )


# ---------------------------------------------------------------------------
# Packed form consumed by the kernels
# ---------------------------------------------------------------------------

@dataclass
class PackedModel:
    """Flat array view of a RobotModel, shared by both kernel backends."""

    n_links: int
    n_joints: int
    parents: np.ndarray        # int32 (L,)
    lengths: np.ndarray        # f8 (L,)
    masses: np.ndarray
    coms: np.ndarray
    inertias: np.ndarray
    anchors_m: np.ndarray      # f8 (L,), meters along the parent rod
    rest_angles: np.ndarray
    path_ptr: np.ndarray       # int32 (L+1,) CSR over ancestor joints
    path_idx: np.ndarray       # int32, joint indices root->link
    kp: np.ndarray             # f8 (J,)
    kd: np.ndarray
    damping_b: np.ndarray      # f8 (J,) implicit joint viscous damping
    q_lo: np.ndarray
    q_hi: np.ndarray
    tau_max: np.ndarray
    contact_link: np.ndarray   # int32 (C,) link owning each contact point
    contact_dist: np.ndarray   # f8 (C,) distance along the rod
    contact_foot: np.ndarray   # int32 (C,) foot slot or -1
    contact_stiffness: float
    contact_damping: float
    friction: float
    gravity: float
    base_fixed: int
    n_feet: int


def pack_model(model: RobotModel) -> PackedModel:
    L = model.n_links
    parents = np.asarray(model.link_parents, dtype=np.int32)
    lengths = np.asarray(model.link_lengths, dtype=np.float64)
    anchors_m = np.zeros(L)
    for i in range(1, L):
        anchors_m[i] = model.link_anchors[i] * model.link_lengths[model.link_parents[i]]

    paths: list[list[int]] = [[] for _ in range(L)]
    for i in range(1, L):
        paths[i] = paths[model.link_parents[i]] + [i - 1]
    path_ptr = np.zeros(L + 1, dtype=np.int32)
    for i in range(L):
        path_ptr[i + 1] = path_ptr[i] + len(paths[i])
    path_idx = np.asarray([j for p in paths for j in p], dtype=np.int32)

    # Contact points: the root itself, every distal endpoint, and a heel
    # point sticking back from each foot's attachment so the support polygon
    # spans both sides of the ankle.
    foot_slot = {lk: s for s, lk in enumerate(model.foot_links)}
    c_link = [0] + list(range(L))
    c_dist = [0.0] + list(lengths)
    c_foot = [-1] + [foot_slot.get(i, -1) for i in range(L)]
    for lk in model.foot_links:
        c_link.append(lk)
        c_dist.append(-0.3 * model.link_lengths[lk])
        c_foot.append(foot_slot[lk])
    contact_link = np.asarray(c_link, dtype=np.int32)
    contact_dist = np.asarray(c_dist, dtype=np.float64)
    contact_foot = np.asarray(c_foot, dtype=np.int32)

    lims = np.asarray(model.joint_limits, dtype=np.float64).reshape(model.n_joints, 2)
    return PackedModel(
        n_links=L,
        n_joints=model.n_joints,
        parents=parents,
        lengths=lengths,
        masses=np.asarray(model.link_masses, dtype=np.float64),
        coms=np.asarray(model.link_coms, dtype=np.float64),
        inertias=model.link_inertias(),
        anchors_m=anchors_m,
        rest_angles=np.asarray(model.rest_angles, dtype=np.float64),
        path_ptr=path_ptr,
        path_idx=path_idx,
        kp=np.asarray(model.pd_kp, dtype=np.float64),
        kd=np.asarray(model.pd_kd, dtype=np.float64),
        damping_b=np.asarray(model.joint_damping, dtype=np.float64),
        q_lo=lims[:, 0].copy(),
        q_hi=lims[:, 1].copy(),
        tau_max=np.asarray(model.torque_limits, dtype=np.float64),
        contact_link=contact_link,
        contact_dist=contact_dist,
        contact_foot=contact_foot,
        contact_stiffness=model.contact_stiffness,
        contact_damping=model.contact_damping,
        friction=model.friction_coeff,
        gravity=model.gravity,
        base_fixed=int(model.base_fixed),
        n_feet=len(model.foot_links),
    )


_PACK_CACHE: dict[int, tuple[RobotModel, PackedModel]] = {}


def packed(model: RobotModel) -> PackedModel:
    """pack_model with an identity cache (models are treated as immutable)."""
    key = id(model)
    hit = _PACK_CACHE.get(key)
    if hit is not None and hit[0] is model:
        return hit[1]
    pm = pack_model(model)
    if len(_PACK_CACHE) > 256:
        _PACK_CACHE.clear()
    _PACK_CACHE[key] = (model, pm)
    return pm


def clone_model(model: RobotModel) -> RobotModel:
    return copy.deepcopy(model)
