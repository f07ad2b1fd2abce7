"""Tracking metrics, noise robustness, and the ablation grid runner.

Success rate, mean per-keypoint position error, and joint velocity and
acceleration distances, computed per clip and aggregated two ways: over
every clip and over the successful subset. Observation noise is injected
on the measured channels only (joint positions and velocities, base
angular velocity, and the gravity direction for deployable policies);
the simulator always integrates the true state.
"""

import hashlib
import json
import os

import numpy as np
from dataclasses import dataclass, replace

from . import student as stu
from . import teacher as tch
from .clips import ClipBank, MotionClip
from .errors import InputValidationError
from .kinematics import fk, keypoints
from .robot import RobotModel
from .sim import (ALIVE, CONTROL_DT, SimState, SimulationDivergedError,
                  check_termination, step_with_info)

# Per-channel Gaussian stds by noise level: joint position (rad), joint
# velocity (rad/s), base angular velocity (rad/s), gravity direction.
NOISE_LEVELS = {
    0: (0.0, 0.0, 0.0, 0.0),
    1: (0.01, 0.1, 0.05, 0.02),
    2: (0.02, 0.2, 0.1, 0.04),
}


@dataclass(frozen=True)
class NoiseSpec:
    level: int
    q_std: float
    qd_std: float
    angvel_std: float
    gravity_std: float

    @staticmethod
    def from_level(level: int) -> "NoiseSpec":
        if level not in NOISE_LEVELS:
            raise InputValidationError(f"noise level must be one of "
                                       f"{sorted(NOISE_LEVELS)}, got {level}")
        return NoiseSpec(level, *NOISE_LEVELS[level])

    @property
    def silent(self):
        return (self.q_std == 0.0 and self.qd_std == 0.0
                and self.angvel_std == 0.0 and self.gravity_std == 0.0)


# ---------------------------------------------------------------------------
# Policy adapters
# ---------------------------------------------------------------------------

class TeacherActor:
    """Oracle policy behind the shared evaluation interface.

    Noise corrupts the measured state channels (q, qdot, base angular
    velocity) before the observation is built; the gravity channel does not
    exist in the oracle view.
    """

    kinematic = False

    def __init__(self, policy, model: RobotModel, name="teacher"):
        self.policy = policy
        self.model = model
        self.name = name
        self._tables = None
        self._clip = None

    def reset(self, clip: MotionClip):
        self._clip = clip
        self._tables = tch.reference_tables(self.model, clip)

    def act(self, state: SimState, frame: int, noise: NoiseSpec, rng):
        j = self.model.n_joints
        st = state
        if not noise.silent:
            data = state.data.copy()
            data[5] += rng.normal(0.0, noise.angvel_std)
            data[6:6 + j] += rng.normal(0.0, noise.q_std, j)
            data[6 + j:] += rng.normal(0.0, noise.qd_std, j)
            st = SimState(data=data, prev_action=state.prev_action)
        obs = tch.build_oracle_obs(self.model, st, self._clip, frame,
                                   tables=self._tables)
        return self.policy.action_mean(obs.vec)


class DeployActor:
    """Deployable policies: CVAE student, MLP student, scratch PPO.

    Takes any fn(obs_vec, rng) action function plus the history/window
    sizes. Noise enters exactly where a sensor would sit: the proprio row
    pushed into the history and the angular velocity used in the goal.
    """

    kinematic = False

    def __init__(self, fn, model: RobotModel, history: int, window: int,
                 name="student"):
        self.fn = fn
        self.model = model
        self.history = history
        self.window = window
        self.name = name
        self._buf = stu.HistoryBuffer(history, stu.deploy_proprio_dim(model))
        self._tables = None
        self._clip = None

    def reset(self, clip: MotionClip):
        self._clip = clip
        self._tables = tch.reference_tables(self.model, clip)
        self._buf.reset()

    def act(self, state: SimState, frame: int, noise: NoiseSpec, rng):
        j = self.model.n_joints
        q = state.q
        qd = state.qdot
        w = state.root_angvel
        grav = stu.gravity_in_base(state.root_angle)
        if not noise.silent:
            q = q + rng.normal(0.0, noise.q_std, j)
            qd = qd + rng.normal(0.0, noise.qd_std, j)
            w = w + rng.normal(0.0, noise.angvel_std)
            grav = grav + rng.normal(0.0, noise.gravity_std, 2)
        self._buf.push(stu.proprio_row(q, qd, w, grav, state.prev_action))
        goal = stu.goal_rows(self.model, state, self._clip, frame,
                             self.window, self._tables, root_angvel=w)
        vec = np.concatenate([self._buf.rows.ravel(), goal.ravel()])
        return self.fn(vec, rng)


class ReplayActor:
    """Kinematic playback of the reference itself; the self-tracking oracle."""

    kinematic = True
    name = "replay"

    def reset(self, clip: MotionClip):
        pass

    def act(self, state, frame, noise, rng):
        return None


def student_actor(student: stu.StudentPolicy, model: RobotModel,
                  name="cvae_student") -> DeployActor:
    return DeployActor(student.act, model, student.cfg.history,
                       student.cfg.window, name=name)


def mlp_actor(ms: stu.MlpStudent, model: RobotModel,
              name="mlp_dagger") -> DeployActor:
    return DeployActor(ms.act, model, ms.history, ms.window, name=name)


def scratch_actor(policy, model: RobotModel, history: int, window: int,
                  name="scratch_ppo") -> DeployActor:
    return DeployActor(lambda v, rng=None: policy.action_mean(v), model,
                       history, window, name=name)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _central_diff(rows: np.ndarray, dt: float) -> np.ndarray:
    """(T, J) -> (T-2, J) interior-point derivative; empty for short runs."""
    if rows.shape[0] < 3:
        return np.zeros((0, rows.shape[1]))
    return (rows[2:] - rows[:-2]) / (2.0 * dt)


def tracking_metrics(kp_err_per_frame, exec_qd, ref_qd,
                     dt: float = CONTROL_DT) -> dict:
    """Metric arithmetic on already-collected trajectories.

    kp_err_per_frame: per-frame mean keypoint distance (meters); exec_qd and
    ref_qd: (T, J) joint velocities on the same frame grid, row 0 being the
    episode's initial frame.
    """
    exec_qd = np.asarray(exec_qd, dtype=np.float64)
    ref_qd = np.asarray(ref_qd, dtype=np.float64)
    if exec_qd.shape != ref_qd.shape:
        raise InputValidationError("velocity series must share a shape")
    mpkpe = float(np.mean(kp_err_per_frame)) if len(kp_err_per_frame) else 0.0
    vel = float(np.mean(np.abs(exec_qd - ref_qd))) if exec_qd.size else 0.0
    ea = _central_diff(exec_qd, dt)
    ra = _central_diff(ref_qd, dt)
    acc = float(np.mean(np.abs(ea - ra))) if ea.size else 0.0
    return {"mpkpe": mpkpe, "vel_dist": vel, "acc_dist": acc}


def evaluate_clip(actor, model: RobotModel, clip: MotionClip,
                  noise: NoiseSpec | None = None, seed: int = 0) -> dict:
    """One episode from frame 0 under the given actor and noise level.

    Success means reaching the final frame without early termination.
    Metrics run over the frames actually walked; a diverged simulation is a
    failure with its own reason.
    """
    noise = noise or NoiseSpec.from_level(0)
    rng = np.random.default_rng(seed)
    actor.reset(clip)
    st = SimState(data=clip.frame_state(0).copy(),
                  prev_action=clip.q[0].copy())
    kp_errs = []
    exec_qd = [st.qdot.copy()]
    ref_qd = [clip.qdot[0].copy()]
    frame = 0
    success = True
    reason = ""
    while frame + 1 < len(clip):
        if actor.kinematic:
            st = SimState(data=clip.frame_state(frame + 1).copy(),
                          prev_action=clip.q[frame + 1].copy())
        else:
            act = actor.act(st, frame, noise, rng)
            try:
                st, _ = step_with_info(model, st, act)
            except SimulationDivergedError:
                success = False
                reason = "diverged"
                break
        frame += 1
        kp = keypoints(model, fk(model, st.root_pos, st.root_angle, st.q))
        kp_errs.append(float(np.mean(np.linalg.norm(
            kp - clip.keypoints[frame], axis=-1))))
        exec_qd.append(st.qdot.copy())
        ref_qd.append(clip.qdot[frame].copy())
        term = check_termination(model, st, clip.keypoints[frame])
        if term != ALIVE:
            success = False
            reason = term
            break
    row = {"clip": clip.name, "success": success,
           "termination_reason": reason, "frames": frame,
           "noise_level": noise.level, "seed": seed}
    row.update(tracking_metrics(kp_errs, np.stack(exec_qd),
                                np.stack(ref_qd)))
    return row


def _subset_mean(rows, key, flag=None):
    vals = [r[key] for r in rows if flag is None or r[flag]]
    return float(np.mean(vals)) if vals else float("nan")


@dataclass
class TrackingReport:
    """Per-clip rows plus identity; aggregates recompute from the rows."""

    rows: list
    policy_id: str = ""
    noise_level: int = 0
    seed: int = 0

    @property
    def aggregate(self) -> dict:
        n = len(self.rows)
        wins = sum(1 for r in self.rows if r["success"])
        agg = {"n_clips": n, "sr": 100.0 * wins / n if n else float("nan")}
        for key in ("mpkpe", "vel_dist", "acc_dist"):
            agg[f"{key}_all"] = _subset_mean(self.rows, key)
            agg[f"{key}_successful"] = _subset_mean(self.rows, key, "success")
        return agg

    def to_dict(self):
        return {"policy_id": self.policy_id, "noise_level": self.noise_level,
                "seed": self.seed, "rows": self.rows,
                "aggregate": self.aggregate}


def save_report(path, report: TrackingReport):
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=1, sort_keys=True)


def load_report(path) -> TrackingReport:
    with open(path) as f:
        d = json.load(f)
    return TrackingReport(rows=d["rows"], policy_id=d["policy_id"],
                          noise_level=int(d["noise_level"]),
                          seed=int(d["seed"]))


def evaluate_suite(actor, model: RobotModel, bank: ClipBank,
                   noise: NoiseSpec | None = None, seed: int = 0
                   ) -> TrackingReport:
    """Evaluate every clip; per-clip seeds derive from the suite seed."""
    if len(bank.clips) == 0:
        raise InputValidationError("empty clip set")
    noise = noise or NoiseSpec.from_level(0)
    rows = [evaluate_clip(actor, model, clip, noise, seed=seed + 1000 * i)
            for i, clip in enumerate(bank.clips)]
    return TrackingReport(rows=rows, policy_id=getattr(actor, "name", "?"),
                          noise_level=noise.level, seed=seed)


# ---------------------------------------------------------------------------
# Noise calibration
# ---------------------------------------------------------------------------

def measure_noise_std(model: RobotModel, clip: MotionClip, noise: NoiseSpec,
                      n: int = 4000, seed: int = 0) -> dict:
    """Empirical std of (noisy - clean) proprio channels via the real path.

    Builds the observation through DeployActor repeatedly on a frozen state
    and measures what actually lands in each channel block, so a wiring bug
    (wrong slice, wrong std) shows up here and not just in downstream SR.
    """
    rng = np.random.default_rng(seed)
    j = model.n_joints
    actor = DeployActor(lambda v, r=None: np.zeros(j), model,
                        history=1, window=1, name="probe")
    actor.reset(clip)
    st = SimState(data=clip.frame_state(0).copy(),
                  prev_action=clip.q[0].copy())
    clean_actor = DeployActor(lambda v, r=None: np.zeros(j), model,
                              history=1, window=1, name="probe0")
    clean_actor.reset(clip)
    clean_actor.act(st, 0, NoiseSpec.from_level(0), rng)
    clean = clean_actor._buf.rows[-1].copy()
    rows = np.empty((n, clean.size))
    for i in range(n):
        actor.act(st, 0, noise, rng)
        rows[i] = actor._buf.rows[-1]
    d = rows - clean
    return {"q": float(np.std(d[:, :j])),
            "qd": float(np.std(d[:, j:2 * j])),
            "angvel": float(np.std(d[:, 2 * j])),
            "gravity": float(np.std(d[:, 2 * j + 1:2 * j + 3]))}


def robustness_sweep(actors: dict, model: RobotModel, bank: ClipBank,
                     levels=(0, 1, 2), seed: int = 0) -> list:
    """SR and MPKPE per policy per noise level, one row per pair."""
    if list(levels) != sorted(levels):
        raise InputValidationError("noise levels must be ordered")
    rows = []
    for name, actor in actors.items():
        for lv in levels:
            rep = evaluate_suite(actor, model, bank,
                                 NoiseSpec.from_level(lv), seed=seed)
            agg = rep.aggregate
            rows.append({"policy": name, "noise_level": lv, "sr": agg["sr"],
                         "mpkpe_all": agg["mpkpe_all"],
                         "mpkpe_successful": agg["mpkpe_successful"]})
    return rows


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

def config_hash(d: dict) -> str:
    return hashlib.sha256(
        json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class AblationGrid:
    """One axis varies per section; everything else stays at the base.

    Sections mirror the structure of the source study: a method comparison
    followed by single-axis sweeps.
    """

    base: stu.DistillConfig
    kl_residual: tuple = (True, False)
    kl_coef: tuple = (1.0, 0.1, 0.01, 0.001)
    window: tuple = (1, 5, 10, 20)
    latent: tuple = (32, 64, 128, 256)
    explicit_ref: tuple = (False, True)
    latent_mode: tuple = ("deterministic", "stochastic")
    include_methods: bool = True
    scratch_iterations: int = 0   # 0 reuses base.iterations

    def cells(self) -> list:
        """(section, label, DistillConfig or method tag) triples."""
        out = []
        if self.include_methods:
            out.append(("methods", "oracle_teacher", "teacher"))
            out.append(("methods", "cvae_student", self.base))
            out.append(("methods", "mlp_dagger", "mlp"))
            out.append(("methods", "scratch_ppo", "scratch"))
        b = self.base
        for v in self.explicit_ref:
            cfg = replace(b, student=replace(b.student, explicit_ref=v))
            out.append(("explicit_ref", f"explicit_ref={v}", cfg))
        for v in self.kl_residual:
            cfg = replace(b, student=replace(b.student, kl_residual=v))
            out.append(("kl_residual", f"kl_residual={v}", cfg))
        for v in self.kl_coef:
            out.append(("kl_coef", f"beta={v}", replace(b, beta=v)))
        for v in self.window:
            cfg = replace(b, student=replace(b.student, window=v))
            out.append(("window", f"window={v}", cfg))
        for v in self.latent:
            cfg = replace(b, student=replace(b.student, latent_dim=v))
            out.append(("latent", f"latent={v}", cfg))
        for v in self.latent_mode:
            cfg = replace(b, student=replace(b.student, latent_mode=v))
            out.append(("latent_mode", v, cfg))
        return out


def _train_cell(model, bank, teacher_policy, cfg: stu.DistillConfig,
                cache_dir):
    """Train a student for one grid cell, reusing the cache when possible."""
    tag = config_hash(cfg.to_dict())
    path = os.path.join(cache_dir, f"student_{tag}.ckpt") if cache_dir else None
    if path and os.path.exists(path):
        return stu.load_student(path)
    student, _ = stu.train_student(model, bank, teacher_policy, cfg)
    if path:
        stu.save_student(path, student, meta={"config_hash": tag})
    return student


def run_ablation(model: RobotModel, bank: ClipBank, teacher_policy,
                 grid: AblationGrid, eval_seed: int = 0, cache_dir=None,
                 eval_bank: ClipBank | None = None) -> list:
    """Train and evaluate every cell; failures are rows, not crashes.

    Returns one dict per cell with both aggregate column groups. Identical
    cell configs share checkpoints through the cache, so the same
    configuration always reports the same numbers.
    """
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
    eval_on = eval_bank or bank
    rows = []
    for section, label, cell in grid.cells():
        try:
            if cell == "teacher":
                actor = TeacherActor(teacher_policy, model)
            elif cell == "mlp":
                cfg = grid.base
                ms, _ = stu.train_mlp_dagger(model, bank, teacher_policy, cfg)
                actor = mlp_actor(ms, model)
            elif cell == "scratch":
                b = grid.base
                iters = grid.scratch_iterations or b.iterations
                tc = tch.TeacherConfig(
                    seed=b.seed, iterations=iters, n_envs=b.n_envs,
                    horizon=b.horizon, hidden=tuple(b.student.hidden),
                    randomization=b.randomization)
                pol, _ = stu.train_scratch_ppo(model, bank, tc,
                                               history=b.student.history,
                                               window=b.student.window)
                actor = scratch_actor(pol, model, b.student.history,
                                      b.student.window)
            else:
                student = _train_cell(model, bank, teacher_policy, cell,
                                      cache_dir)
                actor = student_actor(student, model)
            rep = evaluate_suite(actor, model, eval_on, seed=eval_seed)
            agg = rep.aggregate
            row = {"section": section, "label": label, **agg}
        except Exception as err:   # cell failure must not kill the grid
            row = {"section": section, "label": label, "error": str(err)}
        rows.append(row)
    return rows


ABLATION_COLUMNS = ("sr", "mpkpe_all", "vel_dist_all", "acc_dist_all",
                    "mpkpe_successful", "vel_dist_successful",
                    "acc_dist_successful")


def format_ablation_table(rows) -> str:
    """Fixed-width text table grouped by section, both column groups."""
    head = (f"{'section':<14} {'method':<24} {'SR':>6} "
            f"{'MPKPE':>8} {'Vel':>8} {'Acc':>9} "
            f"{'MPKPE*':>8} {'Vel*':>8} {'Acc*':>9}")
    lines = [head, "-" * len(head)]
    last = None
    for r in rows:
        if last is not None and r["section"] != last:
            lines.append("-" * len(head))
        last = r["section"]
        if "error" in r:
            lines.append(f"{r['section']:<14} {r['label']:<24} "
                         f"FAILED: {r['error']}")
            continue
        vals = [r[c] for c in ABLATION_COLUMNS]
        lines.append(
            f"{r['section']:<14} {r['label']:<24} {vals[0]:>6.1f} "
            f"{vals[1]:>8.4f} {vals[2]:>8.4f} {vals[3]:>9.4f} "
            f"{vals[4]:>8.4f} {vals[5]:>8.4f} {vals[6]:>9.4f}")
    lines.append("-" * len(head))
    lines.append("columns marked * aggregate over successful clips only")
    return "\n".join(lines)
