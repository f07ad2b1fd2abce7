"""Deployable student policy distilled from the oracle teacher.

The student sees only signals measurable on hardware: joint positions and
velocities, base angular velocity, the gravity direction in the base frame,
its own previous action, and a short preview of the reference motion. A
conditional prior proposes a latent from that deployable view alone; during
training a residual encoder corrects the latent using the oracle state, and
a decoder maps proprioception plus latent to joint position targets. The
whole thing trains online: the student drives the simulator, the frozen
teacher labels every visited state, and the loss is squared action error
plus a KL pulling encoder and prior together.
"""

import math

import numpy as np
from dataclasses import dataclass, field

from . import nets
from .clips import ClipBank, MotionClip
from .errors import InputValidationError, OptimizationError
from .kinematics import rotate_into, wrap_angle
from .robot import RobotModel, packed
from .sim import (ALIVE, CONTROL_DT, RandomizationSpec, SimState,
                  SimulationDivergedError, apply_push, check_termination,
                  randomize, reference_state_init, step_with_info)
from .teacher import (REASON_CLIP_END, REASON_DIVERGED, REASON_FELL,
                      REASON_LOST, RewardWeights, RolloutBatch, TeacherConfig,
                      TeacherPolicy, build_oracle_obs, compute_reward,
                      make_teacher, oracle_obs_dim, ppo_update,
                      reference_tables, rollout_tracking)

GRAVITY_DIR = np.array([0.0, -1.0])


# ---------------------------------------------------------------------------
# Deployable observation
# ---------------------------------------------------------------------------

def deploy_proprio_dim(model: RobotModel) -> int:
    # q, qdot, base angular velocity, gravity direction (2), previous action
    return 3 * model.n_joints + 3


def deploy_goal_dim(model: RobotModel) -> int:
    # height gap, root angle gap, reference root velocity (2), angular
    # velocity gap, keypoint offsets in the reference pose frame
    return 5 + 2 * len(model.keypoint_links)


def deploy_obs_dim(model: RobotModel, history: int = 25,
                   window: int = 5) -> int:
    return history * deploy_proprio_dim(model) + window * deploy_goal_dim(model)


def gravity_in_base(root_angle):
    """Unit gravity direction expressed in the base frame."""
    return rotate_into(np.asarray(root_angle, dtype=np.float64), GRAVITY_DIR)


def proprio_row(q, qdot, root_angvel, gravity, prev_action) -> np.ndarray:
    """One history row from raw channel values.

    Split out from the state-based builder so noise studies can corrupt the
    channels before assembly.
    """
    return np.concatenate([
        np.asarray(q, dtype=np.float64),
        np.asarray(qdot, dtype=np.float64),
        [float(root_angvel)],
        np.asarray(gravity, dtype=np.float64),
        np.asarray(prev_action, dtype=np.float64),
    ])


def deploy_proprio_row(model: RobotModel, state: SimState) -> np.ndarray:
    return proprio_row(state.q, state.qdot, state.root_angvel,
                       gravity_in_base(state.root_angle), state.prev_action)


def goal_rows(model: RobotModel, state: SimState, clip: MotionClip,
              frame: int, window: int = 5, tables=None,
              root_angle=None, root_angvel=None) -> np.ndarray:
    """Reference preview for frames frame+1 .. frame+window, clamped at
    the clip end.

    Pose-relative terms sit in the current base frame; keypoint offsets sit
    in the reference pose's own frame, so nothing here depends on where the
    pair (robot, reference) is placed in the world. root_angle/root_angvel
    override the state's values when an observation model corrupts them.
    """
    if tables is None:
        tables = reference_tables(model, clip)
    th = state.root_angle if root_angle is None else float(root_angle)
    w = state.root_angvel if root_angvel is None else float(root_angvel)
    z = state.root_pos[1]
    n = len(clip)
    rows = []
    for k in range(1, window + 1):
        f = min(frame + k, n - 1)
        dh = tables["root_pos"][f][1] - z
        dth = float(wrap_angle(tables["root_angle"][f] - th))
        v_loc = rotate_into(th, clip.root_linvel[f])
        dw = tables["root_angvel"][f] - w
        off = rotate_into(tables["root_angle"][f],
                          tables["kp"][f] - tables["root_pos"][f])
        rows.append(np.concatenate([[dh, dth], v_loc, [dw], off.ravel()]))
    return np.stack(rows)


@dataclass
class DeployObs:
    """History-stacked proprioception plus a future reference window."""

    proprio_history: np.ndarray      # (H, P), oldest row first
    goal: np.ndarray                 # (W, G)

    @property
    def vec(self):
        return np.concatenate([self.proprio_history.ravel(),
                               self.goal.ravel()])


def build_deploy_obs(model: RobotModel, state_history, clip: MotionClip,
                     frame: int, history: int = 25, window: int = 5,
                     tables=None) -> DeployObs:
    """Observation at `frame` given the episode's states so far.

    state_history lists SimStates oldest first and must end with the current
    state; rows before the episode start are zero.
    """
    if len(state_history) == 0:
        raise InputValidationError("state_history must hold at least the "
                                   "current state")
    p = deploy_proprio_dim(model)
    hist = np.zeros((history, p))
    recent = state_history[-history:]
    for i, st in enumerate(recent):
        hist[history - len(recent) + i] = deploy_proprio_row(model, st)
    goal = goal_rows(model, state_history[-1], clip, frame, window, tables)
    return DeployObs(proprio_history=hist, goal=goal)


class HistoryBuffer:
    """Fixed-depth proprioception stack, zeroed at episode boundaries."""

    def __init__(self, history: int, dim: int):
        self.rows = np.zeros((history, dim))

    def reset(self):
        self.rows[:] = 0.0

    def push(self, row):
        self.rows[:-1] = self.rows[1:]
        self.rows[-1] = row


# ---------------------------------------------------------------------------
# CVAE policy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StudentConfig:
    history: int = 25
    window: int = 5
    latent_dim: int = 64
    hidden: tuple = (128, 128)
    activation: str = "tanh"
    explicit_ref: bool = False       # ablation wiring: decoder also sees goal
    kl_residual: bool = True         # encoder mean rides on the prior mean
    latent_mode: str = "deterministic"   # deployment latent: mean vs sample

    def __post_init__(self):
        if self.latent_mode not in ("deterministic", "stochastic"):
            raise InputValidationError(
                f"unknown latent_mode {self.latent_mode!r}")
        if self.history < 1 or self.window < 1 or self.latent_dim < 1:
            raise InputValidationError("history, window and latent_dim must "
                                       "be positive")

    def to_dict(self):
        return {"history": self.history, "window": self.window,
                "latent_dim": self.latent_dim, "hidden": list(self.hidden),
                "activation": self.activation,
                "explicit_ref": self.explicit_ref,
                "kl_residual": self.kl_residual,
                "latent_mode": self.latent_mode}

    @staticmethod
    def from_dict(d) -> "StudentConfig":
        return StudentConfig(
            history=int(d["history"]), window=int(d["window"]),
            latent_dim=int(d["latent_dim"]), hidden=tuple(d["hidden"]),
            activation=d["activation"], explicit_ref=bool(d["explicit_ref"]),
            kl_residual=bool(d.get("kl_residual", True)),
            latent_mode=d["latent_mode"])


@dataclass
class StudentPolicy:
    """Prior, residual encoder and decoder with their wiring sizes.

    hist_dim/goal_dim describe how a flat deployable observation splits;
    the decoder input is [history (, goal when explicit_ref), latent].
    """

    cfg: StudentConfig
    prior_spec: nets.MlpSpec
    encoder_spec: nets.MlpSpec
    decoder_spec: nets.MlpSpec
    prior: list
    encoder: list
    decoder: list
    hist_dim: int
    goal_dim: int
    act_dim: int

    def params(self) -> list:
        return self.prior + self.encoder + self.decoder

    def copy(self) -> "StudentPolicy":
        return StudentPolicy(
            self.cfg, self.prior_spec, self.encoder_spec, self.decoder_spec,
            [p.copy() for p in self.prior], [p.copy() for p in self.encoder],
            [p.copy() for p in self.decoder], self.hist_dim, self.goal_dim,
            self.act_dim)

    def decoder_sees_goal(self) -> bool:
        """Dimension accounting for the information bottleneck check."""
        base = self.hist_dim + self.cfg.latent_dim
        return self.decoder_spec.in_dim > base

    def _split(self, obs_vec):
        obs_vec = np.asarray(obs_vec, dtype=np.float64)
        hist = obs_vec[..., :self.hist_dim]
        goal = obs_vec[..., self.hist_dim:]
        return hist, goal

    def decoder_input(self, obs_vec, z):
        hist, goal = self._split(obs_vec)
        parts = [hist, goal, z] if self.cfg.explicit_ref else [hist, z]
        return np.concatenate(parts, axis=-1)

    def act(self, obs_vec, rng=None):
        """Deployment action under the configured latent mode."""
        mode = ("deploy_prior_mean" if self.cfg.latent_mode == "deterministic"
                else "deploy_prior_sample")
        a, _, _ = student_forward(self, obs_vec, mode=mode, rng=rng)
        return a


def make_student(model: RobotModel, cfg: StudentConfig, seed=0,
                 ) -> StudentPolicy:
    p = deploy_proprio_dim(model) * cfg.history
    g = deploy_goal_dim(model) * cfg.window
    o = oracle_obs_dim(model)
    j = model.n_joints
    lat = cfg.latent_dim
    dec_in = p + lat + (g if cfg.explicit_ref else 0)
    prior_spec = nets.MlpSpec((p + g, *cfg.hidden, 2 * lat),
                              activation=cfg.activation, seed=seed)
    encoder_spec = nets.MlpSpec((o, *cfg.hidden, 2 * lat),
                                activation=cfg.activation, seed=seed + 1)
    decoder_spec = nets.MlpSpec((dec_in, *cfg.hidden, 2 * j),
                                activation=cfg.activation, seed=seed + 2)
    return StudentPolicy(
        cfg=cfg, prior_spec=prior_spec, encoder_spec=encoder_spec,
        decoder_spec=decoder_spec, prior=nets.mlp_init(prior_spec),
        encoder=nets.mlp_init(encoder_spec), decoder=nets.mlp_init(decoder_spec),
        hist_dim=p, goal_dim=g, act_dim=j)


def save_student(path, student: StudentPolicy, meta=None):
    arrays = nets.params_to_arrays("prior", student.prior)
    arrays.update(nets.params_to_arrays("encoder", student.encoder))
    arrays.update(nets.params_to_arrays("decoder", student.decoder))
    m = {"config": student.cfg.to_dict(),
         "prior_spec": student.prior_spec.to_dict(),
         "encoder_spec": student.encoder_spec.to_dict(),
         "decoder_spec": student.decoder_spec.to_dict(),
         "hist_dim": student.hist_dim, "goal_dim": student.goal_dim,
         "act_dim": student.act_dim}
    m.update(meta or {})
    nets.save_arrays(path, "student_cvae", arrays, m)


def load_student(path) -> StudentPolicy:
    kind, arrays, meta = nets.load_arrays(path)
    if kind != "student_cvae":
        raise InputValidationError(f"{path} holds a {kind!r} checkpoint")
    return StudentPolicy(
        cfg=StudentConfig.from_dict(meta["config"]),
        prior_spec=nets.MlpSpec.from_dict(meta["prior_spec"]),
        encoder_spec=nets.MlpSpec.from_dict(meta["encoder_spec"]),
        decoder_spec=nets.MlpSpec.from_dict(meta["decoder_spec"]),
        prior=nets.arrays_to_params("prior", arrays),
        encoder=nets.arrays_to_params("encoder", arrays),
        decoder=nets.arrays_to_params("decoder", arrays),
        hist_dim=int(meta["hist_dim"]), goal_dim=int(meta["goal_dim"]),
        act_dim=int(meta["act_dim"]))


def _gauss_split(out, n):
    mean = out[..., :n]
    raw = out[..., n:]
    log_std = nets.clamp_log_std(raw)
    return mean, raw, log_std, np.exp(log_std)


def student_forward(student: StudentPolicy, obs, oracle_obs=None,
                    mode: str = "deploy_prior_mean", rng=None):
    """Run the CVAE. Returns (action, z, heads).

    train: z is a reparameterized encoder sample (residual mean on top of
    the prior); deploy_prior_mean: z is the prior mean; deploy_prior_sample:
    z is a prior sample. The decoder input never includes the goal unless
    the explicit_ref ablation wiring is on.
    """
    if mode not in ("train", "deploy_prior_mean", "deploy_prior_sample"):
        raise InputValidationError(f"unknown student mode {mode!r}")
    vec = obs.vec if isinstance(obs, DeployObs) else np.asarray(
        obs, dtype=np.float64)
    lat = student.cfg.latent_dim
    prior_out, _ = nets.mlp_forward(student.prior, student.prior_spec, vec)
    mu_r, _, ls_r, s_r = _gauss_split(prior_out, lat)
    heads = {"prior": nets.GaussianHead(mu_r, ls_r)}
    if mode == "train":
        if oracle_obs is None:
            raise InputValidationError("train mode needs the oracle "
                                       "observation")
        if rng is None:
            raise InputValidationError("train mode samples z, pass rng")
        ovec = oracle_obs.vec if hasattr(oracle_obs, "vec") else np.asarray(
            oracle_obs, dtype=np.float64)
        enc_out, _ = nets.mlp_forward(student.encoder, student.encoder_spec,
                                      ovec)
        dmu, _, ls_e, s_e = _gauss_split(enc_out, lat)
        mu_e = mu_r + dmu if student.cfg.kl_residual else dmu
        heads["encoder"] = nets.GaussianHead(mu_e, ls_e)
        z = mu_e + s_e * rng.standard_normal(mu_e.shape)
    elif mode == "deploy_prior_mean":
        z = mu_r
    else:
        if rng is None:
            raise InputValidationError("deploy_prior_sample needs rng")
        z = mu_r + s_r * rng.standard_normal(mu_r.shape)
    dec_out, _ = nets.mlp_forward(student.decoder, student.decoder_spec,
                                  student.decoder_input(vec, z))
    mu_d, _, ls_d, _ = _gauss_split(dec_out, student.act_dim)
    heads["decoder"] = nets.GaussianHead(mu_d, ls_d)
    return mu_d, z, heads


# ---------------------------------------------------------------------------
# Distillation loss and update
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistillLoss:
    l_action: float
    l_kl: float
    beta: float

    @property
    def total(self):
        return self.l_action + self.beta * self.l_kl


def distill_grads(student: StudentPolicy, deploy, oracle, labels, beta, xi
                  ) -> tuple:
    """Loss and exact parameter gradients for one batch, given the latent
    noise xi. Returns (DistillLoss, grads) with grads in params() order.

    Backprop is by hand: the action term reaches the encoder through the
    reparameterized z and the prior through the residual mean composition;
    the KL term hits all four Gaussian heads. The decoder's log_std head
    is carried but gets no gradient, matching a loss written on the mean.
    """
    deploy = np.asarray(deploy, dtype=np.float64)
    oracle = np.asarray(oracle, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = deploy.shape[0]
    lat = student.cfg.latent_dim
    j = student.act_dim

    prior_out, cp = nets.mlp_forward(student.prior, student.prior_spec,
                                     deploy)
    mu_r, raw_r, ls_r, s_r = _gauss_split(prior_out, lat)
    enc_out, ce = nets.mlp_forward(student.encoder, student.encoder_spec,
                                   oracle)
    dmu, raw_e, ls_e, s_e = _gauss_split(enc_out, lat)
    residual = student.cfg.kl_residual
    mu_e = mu_r + dmu if residual else dmu
    z = mu_e + s_e * xi
    dec_in = student.decoder_input(deploy, z)
    dec_out, cd = nets.mlp_forward(student.decoder, student.decoder_spec,
                                   dec_in)
    mu_d = dec_out[:, :j]

    l_action = float(np.mean(np.sum((mu_d - labels) ** 2, axis=1)))
    l_kl = float(np.mean(nets.kl_diag_gauss(mu_e, s_e, mu_r, s_r)))

    g_dec = np.zeros_like(dec_out)
    g_dec[:, :j] = 2.0 * (mu_d - labels) / n
    gdec, gin = nets.mlp_backward(student.decoder, student.decoder_spec, cd,
                                  g_dec)
    gz = gin[:, -lat:]

    k = beta / n
    d_mu1, d_s1, d_mu2, d_s2 = nets.kl_diag_gauss_grads(mu_e, s_e, mu_r, s_r)
    g_mu_e = gz + k * d_mu1
    g_s_e = gz * xi + k * d_s1
    # clamped log_std: zero slope outside the clip band
    in_band = lambda raw: ((raw > nets.LOG_STD_MIN)
                           & (raw < nets.LOG_STD_MAX)).astype(np.float64)
    g_enc = np.concatenate([g_mu_e, g_s_e * s_e * in_band(raw_e)], axis=1)
    genc, _ = nets.mlp_backward(student.encoder, student.encoder_spec, ce,
                                g_enc)
    # residual composition feeds the action gradient back into the prior;
    # with the residual ablated the prior only learns from the KL term
    g_mu_r = (g_mu_e if residual else 0.0) + k * d_mu2
    g_s_r = k * d_s2
    g_pri = np.concatenate([g_mu_r, g_s_r * s_r * in_band(raw_r)], axis=1)
    gpri, _ = nets.mlp_backward(student.prior, student.prior_spec, cp, g_pri)

    return (DistillLoss(l_action=l_action, l_kl=l_kl, beta=beta),
            gpri + genc + gdec)


def distill_step(student: StudentPolicy, deploy, oracle, labels, beta, lr,
                 adam: nets.AdamState, rng, max_grad_norm: float = 1.0
                 ) -> DistillLoss:
    """One Adam step on the distillation loss; see distill_grads."""
    xi = rng.standard_normal((np.asarray(deploy).shape[0],
                              student.cfg.latent_dim))
    loss, grads = distill_grads(student, deploy, oracle, labels, beta, xi)
    nets.clip_global_norm(grads, max_grad_norm)
    nets.adam_step(student.params(), grads, adam, lr=lr)
    return loss


# ---------------------------------------------------------------------------
# Student-driven environments
# ---------------------------------------------------------------------------

@dataclass
class _DeploySlot:
    model: RobotModel
    schedule: object
    clip_idx: int
    clip: MotionClip
    tables: dict
    frame: int
    sim: SimState
    hist: HistoryBuffer
    ep_return: float = 0.0


class DeployEngine:
    """Lockstep episodic environments observed through the deployable view.

    Serves every student flavor: the DAgger loops act through it and read
    both observation kinds, the scratch PPO baseline also asks for rewards.
    Slot resets consume the engine rng in a fixed order, so a seed pins the
    whole collection.
    """

    def __init__(self, model: RobotModel, bank: ClipBank, n_envs: int, rng,
                 randomization: RandomizationSpec | None = None,
                 history: int = 25, window: int = 5,
                 allow_pushes: bool = True):
        self.base_model = model
        self.bank = bank
        self.rng = rng
        self.randomization = randomization or RandomizationSpec(mode="none")
        self.history = history
        self.window = window
        self.allow_pushes = allow_pushes
        self.pm = packed(model)
        self.proprio_dim = deploy_proprio_dim(model)
        self.deploy_dim = deploy_obs_dim(model, history, window)
        self._tables = {}
        self.slots = [self._fresh_slot() for _ in range(n_envs)]

    def tables_for(self, idx: int, clip: MotionClip) -> dict:
        if idx not in self._tables:
            self._tables[idx] = reference_tables(self.base_model, clip)
        return self._tables[idx]

    def _fresh_slot(self) -> _DeploySlot:
        idx, clip = self.bank.sample(self.rng)
        m, sched = randomize(self.base_model, self.randomization, self.rng,
                             horizon_s=clip.duration_s + 1.0)
        frame, st = reference_state_init(clip, self.rng)
        hist = HistoryBuffer(self.history, self.proprio_dim)
        hist.push(deploy_proprio_row(m, st))
        return _DeploySlot(model=m, schedule=sched, clip_idx=idx, clip=clip,
                           tables=self.tables_for(idx, clip), frame=frame,
                           sim=st, hist=hist)

    def _deploy_vec(self, s: _DeploySlot) -> np.ndarray:
        goal = goal_rows(s.model, s.sim, s.clip, s.frame, self.window,
                         s.tables)
        return np.concatenate([s.hist.rows.ravel(), goal.ravel()])

    def deploy_matrix(self) -> np.ndarray:
        return np.stack([self._deploy_vec(s) for s in self.slots])

    def oracle_matrix(self) -> np.ndarray:
        rows = []
        for s in self.slots:
            o = build_oracle_obs(s.model, s.sim, s.clip, s.frame,
                                 tables=s.tables)
            rows.append(o.vec)
        return np.stack(rows)

    def step_all(self, actions, weights: RewardWeights | None = None,
                 progress: float = 1.0):
        """Advance every slot one control step; reset finished slots.

        Rewards are only computed when weights are given (the PPO path).
        Returns (rewards, dones, reasons, trunc_obs, finished_returns) with
        trunc_obs holding the final deployable observation of episodes that
        ran out of clip.
        """
        n = len(self.slots)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        reasons = np.zeros(n, dtype=np.int8)
        trunc_obs = {}
        finished = []
        for i, s in enumerate(self.slots):
            act = np.asarray(actions[i], dtype=np.float64)
            if self.allow_pushes:
                for delta in s.schedule.pushes_between(
                        s.sim.time, s.sim.time + CONTROL_DT):
                    apply_push(s.sim, delta)
            tau_noise = None
            if s.schedule.torque_noise_std > 0.0:
                tau_noise = self.rng.normal(
                    0.0, s.schedule.torque_noise_std, s.model.n_joints)
            try:
                new, diag = step_with_info(s.model, s.sim, act,
                                           tau_noise=tau_noise)
            except SimulationDivergedError:
                dones[i] = True
                reasons[i] = REASON_DIVERGED
                finished.append(s.ep_return)
                self.slots[i] = self._fresh_slot()
                continue
            nxt = s.frame + 1
            if weights is not None:
                r, _ = compute_reward(s.model, s.sim, new, act, s.clip, nxt,
                                      weights, progress, diag=diag)
                rewards[i] = r
                s.ep_return += r
            s.sim = new
            s.frame = nxt
            s.hist.push(deploy_proprio_row(s.model, new))
            term = check_termination(s.model, new, s.clip.keypoints[nxt])
            if term != ALIVE:
                dones[i] = True
                reasons[i] = (REASON_FELL if term == "fell_orientation"
                              else REASON_LOST)
            elif nxt == len(s.clip) - 1:
                dones[i] = True
                reasons[i] = REASON_CLIP_END
                trunc_obs[i] = self._deploy_vec(s)
            if dones[i]:
                finished.append(s.ep_return)
                self.slots[i] = self._fresh_slot()
        return rewards, dones, reasons, trunc_obs, finished


def collect_distill_batch(teacher_policy: TeacherPolicy, actor_fn,
                          engine: DeployEngine, horizon: int):
    """Student-driven rollout with teacher labels at every visited state.

    actor_fn maps a deployable observation matrix to the actions that are
    actually executed, which is what makes this DAgger rather than behavior
    cloning. Non-finite teacher labels drop the sample and are counted.
    """
    n = len(engine.slots)
    deploy = np.zeros((horizon, n, engine.deploy_dim))
    oracle = np.zeros((horizon, n, teacher_policy.actor_spec.in_dim))
    labels = np.zeros((horizon, n, engine.pm.n_joints))
    keep = np.ones((horizon, n), dtype=bool)
    lo = engine.pm.q_lo - 0.5
    hi = engine.pm.q_hi + 0.5
    for t in range(horizon):
        dp = engine.deploy_matrix()
        oc = engine.oracle_matrix()
        lab = teacher_policy.action_mean(oc)
        bad = ~np.all(np.isfinite(lab), axis=-1)
        if np.any(bad):
            keep[t, bad] = False
            lab = np.where(bad[:, None], 0.0, lab)
        deploy[t] = dp
        oracle[t] = oc
        labels[t] = lab
        acts = np.clip(actor_fn(dp), lo, hi)
        engine.step_all(acts)
    mask = keep.reshape(-1)
    batch = {
        "deploy": deploy.reshape(-1, engine.deploy_dim)[mask],
        "oracle": oracle.reshape(-1, oracle.shape[-1])[mask],
        "labels": labels.reshape(-1, labels.shape[-1])[mask],
    }
    stats = {"skipped_nonfinite": int((~keep).sum()),
             "executed_by": "student"}
    return batch, stats


# ---------------------------------------------------------------------------
# Evaluation plumbing shared by the student flavors
# ---------------------------------------------------------------------------

def deploy_act_fn(fn, model: RobotModel, clip: MotionClip, history: int,
                  window: int, tables=None):
    """Wrap a deploy-obs action function for rollout_tracking.

    Keeps its own history buffer, so use one instance per episode.
    """
    if tables is None:
        tables = reference_tables(model, clip)
    buf = HistoryBuffer(history, deploy_proprio_dim(model))

    def act(state, frame):
        buf.push(deploy_proprio_row(model, state))
        goal = goal_rows(model, state, clip, frame, window, tables)
        return fn(np.concatenate([buf.rows.ravel(), goal.ravel()]))
    return act


def eval_deploy_policy(fn, model: RobotModel, bank: ClipBank, history: int,
                       window: int):
    """(success rate %, mean MPKPE) for a deploy-obs action function."""
    ok, err = [], []
    for clip in bank.clips:
        act = deploy_act_fn(fn, model, clip, history, window)
        s, e, _ = rollout_tracking(None, model, clip, act_fn=act)
        ok.append(s)
        err.append(e)
    return 100.0 * float(np.mean(ok)), float(np.mean(err))


def eval_student(student: StudentPolicy, model: RobotModel, bank: ClipBank):
    return eval_deploy_policy(lambda v: student.act(v), model, bank,
                              student.cfg.history, student.cfg.window)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistillConfig:
    seed: int
    iterations: int = 150
    n_envs: int = 32
    horizon: int = 64
    lr: float = 1e-3
    beta: float = 0.1
    epochs: int = 2
    minibatches: int = 8
    max_grad_norm: float = 1.0
    student: StudentConfig = field(default_factory=StudentConfig)
    randomization: RandomizationSpec = field(
        default_factory=lambda: RandomizationSpec(mode="asset_and_dynamics"))
    push_during_rollouts: bool = True
    eval_every: int = 50

    def to_dict(self):
        return {"seed": self.seed, "iterations": self.iterations,
                "n_envs": self.n_envs, "horizon": self.horizon,
                "lr": self.lr, "beta": self.beta, "epochs": self.epochs,
                "minibatches": self.minibatches,
                "max_grad_norm": self.max_grad_norm,
                "student": self.student.to_dict(),
                "randomization": self.randomization.to_dict(),
                "push_during_rollouts": self.push_during_rollouts,
                "eval_every": self.eval_every}


def _minibatch_slices(n, k, rng):
    idx = rng.permutation(n)
    return [idx[s] for s in np.array_split(np.arange(n), k) if len(s)]


def train_student(model: RobotModel, bank: ClipBank,
                  teacher_policy: TeacherPolicy, cfg: DistillConfig):
    """Online DAgger distillation. Returns (student, log).

    The teacher is frozen throughout; divergence hands back the last
    finite-loss student like the teacher trainer does.
    """
    rng = np.random.default_rng(cfg.seed)
    student = make_student(model, cfg.student, seed=cfg.seed)
    engine = DeployEngine(model, bank, cfg.n_envs, rng,
                          randomization=cfg.randomization,
                          history=cfg.student.history,
                          window=cfg.student.window,
                          allow_pushes=cfg.push_during_rollouts)
    adam = nets.adam_init(student.params())
    log = []
    last_good = student.copy()
    for it in range(cfg.iterations):
        batch, stats = collect_distill_batch(
            teacher_policy, lambda dp: student_forward(
                student, dp, mode="deploy_prior_mean")[0],
            engine, cfg.horizon)
        if len(batch["deploy"]) == 0:
            log.append({"iteration": it, "diverged": True,
                        "error": "no finite teacher labels"})
            return last_good, log
        la, lk = [], []
        for _ in range(cfg.epochs):
            for sl in _minibatch_slices(len(batch["deploy"]),
                                        cfg.minibatches, rng):
                loss = distill_step(student, batch["deploy"][sl],
                                    batch["oracle"][sl], batch["labels"][sl],
                                    cfg.beta, cfg.lr, adam, rng,
                                    cfg.max_grad_norm)
                la.append(loss.l_action)
                lk.append(loss.l_kl)
        rec = {"iteration": it, "l_action": float(np.mean(la)),
               "l_kl": float(np.mean(lk)),
               "skipped_nonfinite": stats["skipped_nonfinite"],
               "executed_by": stats["executed_by"]}
        if not (math.isfinite(rec["l_action"]) and math.isfinite(rec["l_kl"])):
            log.append({"iteration": it, "diverged": True})
            return last_good, log
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            sr, mpkpe = eval_student(student, model, bank)
            rec["sr"] = sr
            rec["mpkpe"] = mpkpe
        log.append(rec)
        last_good = student.copy()
    return student, log


# ---------------------------------------------------------------------------
# Baseline 1: plain MLP trained with the same DAgger loop
# ---------------------------------------------------------------------------

@dataclass
class MlpStudent:
    """No latent, no encoder: deployable observation straight to action."""

    spec: nets.MlpSpec
    net: list
    history: int
    window: int

    def params(self):
        return self.net

    def copy(self) -> "MlpStudent":
        return MlpStudent(self.spec, [p.copy() for p in self.net],
                          self.history, self.window)

    def act(self, obs_vec, rng=None):
        out, _ = nets.mlp_forward(self.net, self.spec, obs_vec)
        return out


def make_mlp_student(model: RobotModel, history=25, window=5,
                     hidden=(128, 128), activation="tanh", seed=0
                     ) -> MlpStudent:
    spec = nets.MlpSpec((deploy_obs_dim(model, history, window), *hidden,
                         model.n_joints), activation=activation, seed=seed)
    return MlpStudent(spec=spec, net=nets.mlp_init(spec), history=history,
                      window=window)


def save_mlp_student(path, ms: MlpStudent, meta=None):
    m = {"spec": ms.spec.to_dict(), "history": ms.history,
         "window": ms.window}
    m.update(meta or {})
    nets.save_arrays(path, "student_mlp", nets.params_to_arrays("net", ms.net),
                     m)


def load_mlp_student(path) -> MlpStudent:
    kind, arrays, meta = nets.load_arrays(path)
    if kind != "student_mlp":
        raise InputValidationError(f"{path} holds a {kind!r} checkpoint")
    return MlpStudent(spec=nets.MlpSpec.from_dict(meta["spec"]),
                      net=nets.arrays_to_params("net", arrays),
                      history=int(meta["history"]),
                      window=int(meta["window"]))


def mlp_dagger_step(ms: MlpStudent, deploy, labels, lr,
                    adam: nets.AdamState, max_grad_norm: float = 1.0
                    ) -> float:
    deploy = np.asarray(deploy, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    out, cache = nets.mlp_forward(ms.net, ms.spec, deploy)
    l2 = float(np.mean(np.sum((out - labels) ** 2, axis=1)))
    g = 2.0 * (out - labels) / deploy.shape[0]
    grads, _ = nets.mlp_backward(ms.net, ms.spec, cache, g)
    nets.clip_global_norm(grads, max_grad_norm)
    nets.adam_step(ms.net, grads, adam, lr=lr)
    return l2


def train_mlp_dagger(model: RobotModel, bank: ClipBank,
                     teacher_policy: TeacherPolicy, cfg: DistillConfig):
    """Same data flow as train_student, loss reduced to the action term."""
    rng = np.random.default_rng(cfg.seed)
    ms = make_mlp_student(model, history=cfg.student.history,
                          window=cfg.student.window,
                          hidden=tuple(cfg.student.hidden),
                          activation=cfg.student.activation, seed=cfg.seed)
    engine = DeployEngine(model, bank, cfg.n_envs, rng,
                          randomization=cfg.randomization,
                          history=cfg.student.history,
                          window=cfg.student.window,
                          allow_pushes=cfg.push_during_rollouts)
    adam = nets.adam_init(ms.params())
    log = []
    last_good = ms.copy()
    for it in range(cfg.iterations):
        batch, stats = collect_distill_batch(teacher_policy, ms.act, engine,
                                             cfg.horizon)
        if len(batch["deploy"]) == 0:
            log.append({"iteration": it, "diverged": True,
                        "error": "no finite teacher labels"})
            return last_good, log
        la = []
        for _ in range(cfg.epochs):
            for sl in _minibatch_slices(len(batch["deploy"]),
                                        cfg.minibatches, rng):
                la.append(mlp_dagger_step(ms, batch["deploy"][sl],
                                          batch["labels"][sl], cfg.lr, adam,
                                          cfg.max_grad_norm))
        rec = {"iteration": it, "l_action": float(np.mean(la)), "l_kl": 0.0,
               "skipped_nonfinite": stats["skipped_nonfinite"],
               "executed_by": stats["executed_by"]}
        if not math.isfinite(rec["l_action"]):
            log.append({"iteration": it, "diverged": True})
            return last_good, log
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            sr, mpkpe = eval_deploy_policy(ms.act, model, bank, ms.history,
                                           ms.window)
            rec["sr"] = sr
            rec["mpkpe"] = mpkpe
        log.append(rec)
        last_good = ms.copy()
    return ms, log


# ---------------------------------------------------------------------------
# Baseline 2: PPO from scratch on the deployable observation
# ---------------------------------------------------------------------------

def collect_deploy_rollouts(policy: TeacherPolicy, engine: DeployEngine,
                            horizon: int, weights: RewardWeights,
                            progress: float, rng) -> RolloutBatch:
    n = len(engine.slots)
    act_dim = policy.log_std.shape[0]
    obs = np.zeros((horizon, n, engine.deploy_dim))
    actions = np.zeros((horizon, n, act_dim))
    log_probs = np.zeros((horizon, n))
    rewards = np.zeros((horizon, n))
    values = np.zeros((horizon, n))
    dones = np.zeros((horizon, n), dtype=bool)
    bootstrap = np.zeros((horizon, n))
    reasons = np.zeros((horizon, n), dtype=np.int8)
    ep_returns = []
    lo = engine.pm.q_lo - 0.5
    hi = engine.pm.q_hi + 0.5
    for t in range(horizon):
        ot = engine.deploy_matrix()
        mean = policy.action_mean(ot)
        at = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape)
        log_probs[t] = nets.gauss_log_prob(mean, policy.log_std, at)
        values[t] = policy.value(ot)
        obs[t] = ot
        actions[t] = at
        r, d, why, trunc, fin = engine.step_all(np.clip(at, lo, hi),
                                                weights=weights,
                                                progress=progress)
        rewards[t], dones[t], reasons[t] = r, d, why
        ep_returns.extend(fin)
        for i, vec in trunc.items():
            bootstrap[t, i] = policy.value(vec)
    live = ~dones[horizon - 1]
    if np.any(live):
        tail = engine.deploy_matrix()
        bootstrap[horizon - 1, live] = policy.value(tail[live])
    batch = RolloutBatch(obs=obs, actions=actions, log_probs=log_probs,
                         rewards=rewards, values=values, dones=dones,
                         bootstrap=bootstrap, reasons=reasons,
                         ep_returns=ep_returns)
    batch.validate()
    return batch


def train_scratch_ppo(model: RobotModel, bank: ClipBank, cfg: TeacherConfig,
                      history: int = 25, window: int = 5):
    """PPO with the deployable observation and no teacher. Returns
    (policy, log); the policy is an ordinary actor-critic over deploy obs.
    """
    rng = np.random.default_rng(cfg.seed)
    policy = make_teacher(deploy_obs_dim(model, history, window),
                          model.n_joints, hidden=cfg.hidden,
                          activation=cfg.activation, init=cfg.init,
                          seed=cfg.seed, init_log_std=cfg.init_log_std)
    engine = DeployEngine(model, bank, cfg.n_envs, rng,
                          randomization=cfg.randomization, history=history,
                          window=window)
    adam = nets.adam_init(policy.params())
    log = []
    last_good = policy.copy()
    for it in range(cfg.iterations):
        progress = it / max(cfg.iterations - 1, 1)
        lr_scale = 1.0 - (1.0 - cfg.ppo.anneal_floor) * progress
        try:
            batch = collect_deploy_rollouts(policy, engine, cfg.horizon,
                                            cfg.reward, progress, rng)
            mean_ret = (float(np.mean(batch.ep_returns)) if batch.ep_returns
                        else float("nan"))
            stats = ppo_update(policy, batch, cfg.ppo, adam, rng,
                               lr_scale=lr_scale)
        except (OptimizationError, InputValidationError) as err:
            log.append({"iteration": it, "diverged": True, "error": str(err)})
            return last_good, log
        rec = {"iteration": it,
               "mean_step_reward": float(np.mean(batch.rewards)),
               "mean_ep_return": mean_ret,
               "episodes": len(batch.ep_returns), **stats}
        if not all(math.isfinite(v) for k, v in rec.items()
                   if isinstance(v, float) and k != "mean_ep_return"):
            log.append({"iteration": it, "diverged": True})
            return last_good, log
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            sr, mpkpe = eval_deploy_policy(policy.action_mean, model, bank,
                                           history, window)
            rec["sr"] = sr
            rec["mpkpe"] = mpkpe
        log.append(rec)
        last_good = policy.copy()
    return policy, log
