"""Oracle-policy training.

Local-frame oracle observations, exponential-kernel tracking reward with a
penalty curriculum, GAE, and PPO over a bank of parallel simulated episodes.
Sampling episodes start at random reference frames and end early on the
simulator's termination rules, so the batch stays on recoverable states.
"""

import math

import numpy as np
from dataclasses import dataclass, field

from . import nets
from .clips import ClipBank, MotionClip
from .errors import InputValidationError, OptimizationError
from .kinematics import (fk, fk_state, fk_velocities, keypoints,
                         keypoint_velocities, rotate_into, wrap_angle)
from .robot import RobotModel, packed
from .sim import (ALIVE, CONTROL_DT, RandomizationSpec, SimState,
                  SimulationDivergedError, apply_push, check_termination,
                  randomize, reference_state_init, step_with_info)

REASON_NONE = 0
REASON_FELL = 1
REASON_LOST = 2
REASON_CLIP_END = 3
REASON_DIVERGED = 4

REASON_NAMES = ("", "fell_orientation", "lost_tracking", "clip_end",
                "diverged")


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

@dataclass
class OracleObs:
    """Proprioception and one-frame-difference goal, both root-frame local."""

    proprio: np.ndarray
    goal: np.ndarray

    @property
    def vec(self):
        return np.concatenate([self.proprio, self.goal])


def oracle_obs_dim(model: RobotModel) -> int:
    k = len(model.keypoint_links)
    j = model.n_joints
    n_l = j + 1
    proprio = 2 * k + j + n_l + 2 * k + j + 1 + j
    goal = 2 * k + j + n_l + 2 * k + 1 + 2 + 1
    return proprio + goal


def reference_tables(model: RobotModel, clip: MotionClip) -> dict:
    """Per-frame reference quantities the oracle observation needs.

    Geometry only (angles, points, their velocities), so the tables stay
    valid for mass/friction-randomized copies of the model.
    """
    pts = fk(model, clip.root_pos, clip.root_angle, clip.q)
    vel = fk_velocities(model, pts, clip.root_linvel, clip.root_angvel,
                        clip.qdot)
    return {
        "kp": np.ascontiguousarray(clip.keypoints),
        "kv": keypoint_velocities(model, vel),
        "link_ang": pts.ang,
        "q": clip.q,
        "root_pos": clip.root_pos,
        "root_angle": clip.root_angle,
        "root_angvel": clip.root_angvel,
    }


def _oracle_rows(model, data, prev_action, ref, idx):
    """Vectorized observation math shared by the single and batch paths.

    data: (..., 6+2J) flat states; prev_action: (..., J); idx: reference row
    indices into the tables, same leading shape.
    """
    pm = packed(model)
    nj = pm.n_joints
    pts, vel = fk_state(model, data)
    kp = keypoints(model, pts)
    kv = keypoint_velocities(model, vel)
    th = data[..., 2]
    root = data[..., 0:2]
    q = data[..., 6:6 + nj]
    qd = data[..., 6 + nj:]
    w = data[..., 5:6]

    loc = lambda v: rotate_into(th[..., None], v)
    flat = lambda a: a.reshape(a.shape[:-2] + (-1,))
    proprio = np.concatenate([
        flat(loc(kp - root[..., None, :])),
        q,
        wrap_angle(pts.ang - th[..., None]),
        flat(loc(kv)),
        qd,
        w,
        prev_action,
    ], axis=-1)

    r_kp = ref["kp"][idx]
    r_kv = ref["kv"][idx]
    goal = np.concatenate([
        flat(loc(r_kp - kp)),
        ref["q"][idx] - q,
        wrap_angle(ref["link_ang"][idx] - pts.ang),
        flat(loc(r_kv - kv)),
        ref["root_angvel"][idx][..., None] - w,
        rotate_into(th, ref["root_pos"][idx] - root),
        wrap_angle(ref["root_angle"][idx] - th)[..., None],
    ], axis=-1)
    return proprio, goal


def build_oracle_obs(model: RobotModel, state: SimState, clip: MotionClip,
                     frame: int, tables=None, clamp: bool = False
                     ) -> OracleObs:
    """Observation of `state` tracking `clip`, targeting frame + 1.

    clamp=True holds the final frame as the target instead of raising when
    frame + 1 runs past the clip (used to bootstrap truncated episodes).
    """
    nxt = frame + 1
    if frame < 0 or nxt >= len(clip):
        if not (clamp and 0 <= frame < len(clip)):
            raise InputValidationError(
                f"frame {frame} has no successor in a {len(clip)}-frame clip")
        nxt = len(clip) - 1
    if tables is None:
        tables = reference_tables(model, clip)
    proprio, goal = _oracle_rows(model, state.data, state.prev_action,
                                 tables, nxt)
    return OracleObs(proprio=proprio, goal=goal)


# ---------------------------------------------------------------------------
# Reward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RewardWeights:
    """Task kernels plus curriculum-gated penalties.

    Task terms are w * exp(-err^2 / sigma^2) with mean-square errors, so each
    lies in (0, 1] and the task total is bounded by the weight sum.
    """

    w_kp: float = 1.0
    w_jpos: float = 0.8
    w_jvel: float = 0.2
    w_linvel: float = 0.5
    sigma_kp: float = 0.3
    sigma_jpos: float = 0.5
    sigma_jvel: float = 3.0
    sigma_linvel: float = 1.0
    w_action_rate: float = 0.1
    w_torque: float = 1e-4
    w_slip: float = 0.3
    penalty_ramp: float = 0.5   # progress at which penalties reach full scale

    def __post_init__(self):
        for name in ("w_kp", "w_jpos", "w_jvel", "w_linvel", "w_action_rate",
                     "w_torque", "w_slip"):
            if getattr(self, name) < 0:
                raise InputValidationError(f"{name} must be >= 0")
        for name in ("sigma_kp", "sigma_jpos", "sigma_jvel", "sigma_linvel"):
            if not getattr(self, name) > 0:
                raise InputValidationError(f"{name} must be > 0")
        if not 0.0 <= self.penalty_ramp <= 1.0:
            raise InputValidationError("penalty_ramp must be in [0, 1]")

    def curriculum(self, progress: float) -> float:
        p = min(max(float(progress), 0.0), 1.0)
        if self.penalty_ramp == 0.0:
            return 1.0
        return min(1.0, p / self.penalty_ramp)

    def task_total(self) -> float:
        return self.w_kp + self.w_jpos + self.w_jvel + self.w_linvel

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def compute_reward(model: RobotModel, state_before: SimState,
                   state_after: SimState, action, clip: MotionClip,
                   ref_frame: int, weights: RewardWeights, progress: float,
                   diag=None):
    """Tracking reward of state_after against clip[ref_frame].

    Returns (r, breakdown); breakdown values are signed contributions and
    sum to r. diag, when given, supplies the substep-averaged |torque| and
    loaded-contact slip from the simulator; otherwise both are recomputed
    from state_after (PD torque estimate, kinematic contact test).
    """
    pm = packed(model)
    action = np.asarray(action, dtype=np.float64)
    kp_now = keypoints(model, fk(model, state_after.root_pos,
                                 state_after.root_angle, state_after.q))
    e_kp = float(np.mean(np.sum((kp_now - clip.keypoints[ref_frame]) ** 2,
                                axis=-1)))
    e_jpos = float(np.mean((state_after.q - clip.q[ref_frame]) ** 2))
    e_jvel = float(np.mean((state_after.qdot - clip.qdot[ref_frame]) ** 2))
    e_lin = float(np.mean((state_after.root_linvel
                           - clip.root_linvel[ref_frame]) ** 2))
    w = weights
    task = {
        "kp": w.w_kp * math.exp(-e_kp / w.sigma_kp ** 2),
        "jpos": w.w_jpos * math.exp(-e_jpos / w.sigma_jpos ** 2),
        "jvel": w.w_jvel * math.exp(-e_jvel / w.sigma_jvel ** 2),
        "linvel": w.w_linvel * math.exp(-e_lin / w.sigma_linvel ** 2),
    }

    if diag is not None:
        tau_l1 = diag.torque_abs_sum
        slip = diag.slip_speed
    else:
        tau = np.clip(pm.kp * (action - state_after.q)
                      - pm.kd * state_after.qdot, -pm.tau_max, pm.tau_max)
        tau_l1 = float(np.sum(np.abs(tau)))
        slip = 0.0
        pts, vel = fk_state(model, state_after.data)
        for c in range(len(pm.contact_link)):
            li = pm.contact_link[c]
            d = pm.contact_dist[c]
            u = np.array([pts.cos[li], pts.sin[li]])
            p = pts.prox[li] + d * u
            if p[1] <= 0.0:
                v = (vel.v_prox[li]
                     + vel.omega[li] * d * np.array([-u[1], u[0]]))
                slip += abs(float(v[0]))

    scale = w.curriculum(progress)
    rate = float(np.linalg.norm(action - state_before.prev_action))
    pen = {
        "action_rate": -scale * w.w_action_rate * rate,
        "torque": -scale * w.w_torque * tau_l1,
        "slip": -scale * w.w_slip * slip,
    }
    breakdown = {**task, **pen}
    return float(sum(breakdown.values())), breakdown


# ---------------------------------------------------------------------------
# GAE
# ---------------------------------------------------------------------------

def gae(rewards, values, dones, bootstrap, gamma=0.99, lam=0.95):
    """Generalized advantage estimation over (T, N) arrays.

    dones[t] marks an episode boundary after step t (any reason).
    bootstrap[t] is the successor-state value used where the chain is cut:
    0 for true terminations, V(s_{t+1}) for truncations, and at t = T-1 the
    value of the final state when the episode is still running.
    """
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    dones = np.atleast_2d(np.asarray(dones))
    bootstrap = np.atleast_2d(np.asarray(bootstrap, dtype=np.float64))
    t_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    carry = np.zeros(rewards.shape[1])
    for t in reversed(range(t_len)):
        cont = ~dones[t]
        nxt = bootstrap[t] if t == t_len - 1 else \
            np.where(cont, values[t + 1], bootstrap[t])
        delta = rewards[t] + gamma * nxt - values[t]
        carry = delta + gamma * lam * cont * carry
        adv[t] = carry
    return adv, adv + values


# ---------------------------------------------------------------------------
# Policy container
# ---------------------------------------------------------------------------

@dataclass
class TeacherPolicy:
    actor_spec: nets.MlpSpec
    critic_spec: nets.MlpSpec
    actor: list
    critic: list
    log_std: np.ndarray   # state-independent, learned

    def action_mean(self, obs):
        out, _ = nets.mlp_forward(self.actor, self.actor_spec, obs)
        return out

    def value(self, obs):
        out, _ = nets.mlp_forward(self.critic, self.critic_spec, obs)
        return out[..., 0]

    def params(self) -> list:
        return self.actor + [self.log_std] + self.critic

    def copy(self) -> "TeacherPolicy":
        return TeacherPolicy(self.actor_spec, self.critic_spec,
                             [p.copy() for p in self.actor],
                             [p.copy() for p in self.critic],
                             self.log_std.copy())


def make_teacher(obs_dim: int, act_dim: int, hidden=(256, 256),
                 activation="tanh", init="orthogonal", seed=0,
                 init_log_std=-1.0) -> TeacherPolicy:
    ss = np.random.SeedSequence(seed).generate_state(2)
    a_spec = nets.MlpSpec((obs_dim,) + tuple(hidden) + (act_dim,),
                          activation, init, int(ss[0]))
    c_spec = nets.MlpSpec((obs_dim,) + tuple(hidden) + (1,),
                          activation, init, int(ss[1]))
    return TeacherPolicy(a_spec, c_spec, nets.mlp_init(a_spec),
                         nets.mlp_init(c_spec),
                         np.full(act_dim, float(init_log_std)))


def save_teacher(path, policy: TeacherPolicy, meta=None):
    arrays = nets.params_to_arrays("actor", policy.actor)
    arrays.update(nets.params_to_arrays("critic", policy.critic))
    arrays["log_std"] = policy.log_std
    m = {"actor_spec": policy.actor_spec.to_dict(),
         "critic_spec": policy.critic_spec.to_dict()}
    m.update(meta or {})
    nets.save_arrays(path, "teacher", arrays, m)


def load_teacher(path) -> TeacherPolicy:
    kind, arrays, meta = nets.load_arrays(path)
    if kind != "teacher":
        raise InputValidationError(f"{path} holds a {kind!r} checkpoint")
    return TeacherPolicy(
        nets.MlpSpec.from_dict(meta["actor_spec"]),
        nets.MlpSpec.from_dict(meta["critic_spec"]),
        nets.arrays_to_params("actor", arrays),
        nets.arrays_to_params("critic", arrays),
        np.array(arrays["log_std"], dtype=np.float64))


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    obs: np.ndarray          # (T, N, D)
    actions: np.ndarray      # (T, N, A)
    log_probs: np.ndarray    # (T, N)
    rewards: np.ndarray      # (T, N)
    values: np.ndarray       # (T, N)
    dones: np.ndarray        # (T, N) bool
    bootstrap: np.ndarray    # (T, N)
    reasons: np.ndarray      # (T, N) int8
    ep_returns: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def validate(self):
        if not np.all(np.isfinite(self.rewards)):
            raise InputValidationError("rollout rewards contain non-finite "
                                       "values")
        if np.any(self.dones & (self.reasons == REASON_NONE)):
            raise InputValidationError("done steps must carry a reason")


@dataclass
class _Slot:
    model: RobotModel
    schedule: object
    clip_idx: int
    clip: MotionClip
    tables: dict
    frame: int
    sim: SimState
    ep_return: float = 0.0


class RolloutEngine:
    """Fixed set of episodic tracking environments stepped in lockstep.

    Parameters are treated as a read-only snapshot for the whole collection
    phase; resets draw clips, start frames and model randomizations from the
    engine rng in a fixed order, so collection is deterministic per seed.
    """

    def __init__(self, model: RobotModel, bank: ClipBank, n_envs: int,
                 rng, randomization: RandomizationSpec | None = None,
                 action_noise=None):
        self.base_model = model
        self.bank = bank
        self.rng = rng
        self.randomization = randomization or RandomizationSpec(mode="none")
        self.action_noise = action_noise
        self._tables = {}
        self.pm = packed(model)
        self.slots = [self._fresh_slot() for _ in range(n_envs)]

    def tables_for(self, idx: int, clip: MotionClip) -> dict:
        if idx not in self._tables:
            self._tables[idx] = reference_tables(self.base_model, clip)
        return self._tables[idx]

    def _fresh_slot(self) -> _Slot:
        idx, clip = self.bank.sample(self.rng)
        m, sched = randomize(self.base_model, self.randomization, self.rng,
                             horizon_s=clip.duration_s + 1.0)
        frame, st = reference_state_init(clip, self.rng)
        return _Slot(model=m, schedule=sched, clip_idx=idx, clip=clip,
                     tables=self.tables_for(idx, clip), frame=frame, sim=st)

    def obs_matrix(self, clamp=False) -> np.ndarray:
        rows = []
        for s in self.slots:
            o = build_oracle_obs(s.model, s.sim, s.clip, s.frame,
                                 tables=s.tables, clamp=clamp)
            rows.append(o.vec)
        return np.stack(rows)

    def step_all(self, actions, weights: RewardWeights, progress: float):
        """Advance every slot one control step.

        Returns (rewards, dones, reasons, trunc_obs) where trunc_obs maps
        slot index -> final observation for truncated episodes so the caller
        can bootstrap; slots that finished are reset in place.
        """
        n = len(self.slots)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        reasons = np.zeros(n, dtype=np.int8)
        trunc_obs = {}
        finished_returns = []
        for i, s in enumerate(self.slots):
            act = np.asarray(actions[i], dtype=np.float64)
            for delta in s.schedule.pushes_between(s.sim.time,
                                                   s.sim.time + CONTROL_DT):
                apply_push(s.sim, delta)
            tau_noise = None
            if s.schedule.torque_noise_std > 0.0:
                tau_noise = self.rng.normal(
                    0.0, s.schedule.torque_noise_std, s.model.n_joints)
            try:
                new, diag = step_with_info(s.model, s.sim, act,
                                           tau_noise=tau_noise)
            except SimulationDivergedError:
                rewards[i] = 0.0
                dones[i] = True
                reasons[i] = REASON_DIVERGED
                finished_returns.append(s.ep_return)
                self.slots[i] = self._fresh_slot()
                continue
            nxt = s.frame + 1
            r, _ = compute_reward(s.model, s.sim, new, act, s.clip, nxt,
                                  weights, progress, diag=diag)
            s.sim = new
            s.frame = nxt
            s.ep_return += r
            rewards[i] = r
            term = check_termination(s.model, new,
                                     s.clip.keypoints[nxt])
            if term != ALIVE:
                dones[i] = True
                reasons[i] = (REASON_FELL if term == "fell_orientation"
                              else REASON_LOST)
            elif nxt == len(s.clip) - 1:
                dones[i] = True
                reasons[i] = REASON_CLIP_END
                o = build_oracle_obs(s.model, new, s.clip, nxt,
                                     tables=s.tables, clamp=True)
                trunc_obs[i] = o.vec
            if dones[i]:
                finished_returns.append(s.ep_return)
                self.slots[i] = self._fresh_slot()
        return rewards, dones, reasons, trunc_obs, finished_returns


def collect_rollouts(policy: TeacherPolicy, engine: RolloutEngine,
                     horizon: int, weights: RewardWeights, progress: float,
                     rng) -> RolloutBatch:
    n = len(engine.slots)
    act_dim = policy.log_std.shape[0]
    obs_dim = policy.actor_spec.in_dim
    obs = np.zeros((horizon, n, obs_dim))
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
        ot = engine.obs_matrix()
        mean = policy.action_mean(ot)
        noise = rng.standard_normal(mean.shape)
        at = mean + np.exp(policy.log_std) * noise
        log_probs[t] = nets.gauss_log_prob(mean, policy.log_std, at)
        values[t] = policy.value(ot)
        obs[t] = ot
        actions[t] = at
        r, d, why, trunc, fin = engine.step_all(np.clip(at, lo, hi),
                                                weights, progress)
        rewards[t], dones[t], reasons[t] = r, d, why
        ep_returns.extend(fin)
        for i, vec in trunc.items():
            bootstrap[t, i] = policy.value(vec)
    # value of the still-running tail states
    live = ~dones[horizon - 1]
    if np.any(live):
        tail = engine.obs_matrix(clamp=True)
        bootstrap[horizon - 1, live] = policy.value(tail[live])
    batch = RolloutBatch(obs=obs, actions=actions, log_probs=log_probs,
                         rewards=rewards, values=values, dones=dones,
                         bootstrap=bootstrap, reasons=reasons,
                         ep_returns=ep_returns)
    batch.validate()
    return batch


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    # Linearly scale the step size from lr down to lr * anneal_floor across
    # training; 1.0 disables annealing.
    anneal_floor: float = 1.0

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def ppo_update(policy: TeacherPolicy, batch: RolloutBatch, cfg: PpoConfig,
               adam_state: nets.AdamState, rng, lr_scale: float = 1.0) -> dict:
    """Clipped-surrogate update over the flattened batch. Mutates policy."""
    adv, rets = gae(batch.rewards, batch.values, batch.dones,
                    batch.bootstrap, cfg.gamma, cfg.lam)
    batch.advantages, batch.returns = adv, rets
    b_obs = batch.obs.reshape(-1, batch.obs.shape[-1])
    b_act = batch.actions.reshape(-1, batch.actions.shape[-1])
    b_logp = batch.log_probs.reshape(-1)
    b_adv = adv.reshape(-1)
    b_ret = rets.reshape(-1)
    b_adv = (b_adv - b_adv.mean()) / (b_adv.std() + 1e-8)
    n = b_obs.shape[0]
    n_actor = len(policy.actor)

    stats = {k: 0.0 for k in ("policy_loss", "value_loss", "entropy",
                              "kl_approx", "clip_frac")}
    stats["ratio_dev_epoch0"] = 0.0
    count = 0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for chunk in np.array_split(perm, cfg.minibatches):
            mo, ma = b_obs[chunk], b_act[chunk]
            madv, mret, mlogp = b_adv[chunk], b_ret[chunk], b_logp[chunk]
            m = len(chunk)

            mean, a_cache = nets.mlp_forward(policy.actor,
                                             policy.actor_spec, mo)
            logp = nets.gauss_log_prob(mean, policy.log_std, ma)
            ratio = np.exp(logp - mlogp)
            if epoch == 0 and count == 0:
                stats["ratio_dev_epoch0"] = float(np.max(np.abs(ratio - 1.0)))
            clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
            surr = np.minimum(ratio * madv, clipped * madv)
            policy_loss = -float(np.mean(surr))
            # gradient flows only where the unclipped branch is active
            g_logp = -(madv * ratio * (ratio * madv <= clipped * madv)) / m

            std = np.exp(policy.log_std)
            z = (ma - mean) / std
            g_mean = g_logp[:, None] * z / std
            g_log_std = np.sum(g_logp[:, None] * (z * z - 1.0), axis=0)
            g_log_std -= cfg.entropy_coef
            a_grads, _ = nets.mlp_backward(policy.actor, policy.actor_spec,
                                           a_cache, g_mean)

            v, c_cache = nets.mlp_forward(policy.critic, policy.critic_spec,
                                          mo)
            v = v[:, 0]
            value_loss = float(np.mean((v - mret) ** 2))
            c_grads, _ = nets.mlp_backward(
                policy.critic, policy.critic_spec, c_cache,
                (cfg.value_coef * 2.0 * (v - mret) / m)[:, None])

            ent = float(nets.gauss_entropy(policy.log_std))
            total = (policy_loss + cfg.value_coef * value_loss
                     - cfg.entropy_coef * ent)
            if not math.isfinite(total):
                raise OptimizationError(
                    f"ppo minibatch loss non-finite (policy {policy_loss}, "
                    f"value {value_loss})")

            grads = a_grads + [g_log_std] + c_grads
            nets.clip_global_norm(grads, cfg.max_grad_norm)
            nets.adam_step(policy.params(), grads, adam_state,
                           lr=cfg.lr * lr_scale)
            policy.log_std[:] = nets.clamp_log_std(policy.log_std)

            stats["policy_loss"] += policy_loss
            stats["value_loss"] += value_loss
            stats["entropy"] += ent
            stats["kl_approx"] += float(np.mean(mlogp - logp))
            stats["clip_frac"] += float(np.mean(np.abs(ratio - 1.0)
                                                > cfg.clip_eps))
            count += 1
    for k in ("policy_loss", "value_loss", "entropy", "kl_approx",
              "clip_frac"):
        stats[k] /= max(count, 1)
    return stats


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TeacherConfig:
    seed: int
    iterations: int = 300
    n_envs: int = 64
    horizon: int = 64
    hidden: tuple = (256, 256)
    activation: str = "tanh"
    init: str = "orthogonal"
    init_log_std: float = -1.0
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    randomization: RandomizationSpec = field(
        default_factory=lambda: RandomizationSpec(mode="asset_only"))
    eval_every: int = 50

    def to_dict(self):
        return {"seed": self.seed, "iterations": self.iterations,
                "n_envs": self.n_envs, "horizon": self.horizon,
                "hidden": list(self.hidden), "activation": self.activation,
                "init": self.init, "init_log_std": self.init_log_std,
                "ppo": self.ppo.to_dict(), "reward": self.reward.to_dict(),
                "randomization": self.randomization.to_dict(),
                "eval_every": self.eval_every}


def rollout_tracking(policy, model: RobotModel, clip: MotionClip,
                     tables=None, act_fn=None):
    """Deterministic episode from frame 0; returns (success, mpkpe, frames).

    act_fn(state, frame) overrides the policy's mean action when given
    (lets other policy kinds reuse the same evaluation walk).
    """
    if tables is None:
        tables = reference_tables(model, clip)
    st = SimState(data=clip.frame_state(0).copy(),
                  prev_action=clip.q[0].copy())
    frame = 0
    errs = []
    while frame + 1 < len(clip):
        if act_fn is not None:
            act = act_fn(st, frame)
        else:
            act = policy.action_mean(
                build_oracle_obs(model, st, clip, frame, tables=tables).vec)
        try:
            st, _ = step_with_info(model, st, act)
        except SimulationDivergedError:
            return False, float(np.mean(errs)) if errs else np.inf, frame
        frame += 1
        kp = keypoints(model, fk(model, st.root_pos, st.root_angle, st.q))
        errs.append(float(np.mean(np.linalg.norm(
            kp - clip.keypoints[frame], axis=-1))))
        if check_termination(model, st, clip.keypoints[frame]) != ALIVE:
            return False, float(np.mean(errs)), frame
    return True, float(np.mean(errs)), frame


def quick_eval(policy, model: RobotModel, bank: ClipBank, act_fn=None):
    """(success rate %, mean MPKPE) over the bank, deterministic policy."""
    ok, err = [], []
    for clip in bank.clips:
        s, e, _ = rollout_tracking(policy, model, clip, act_fn=act_fn)
        ok.append(s)
        err.append(e)
    return 100.0 * float(np.mean(ok)), float(np.mean(err))


def train_teacher(model: RobotModel, bank: ClipBank, cfg: TeacherConfig):
    """Returns (policy, log). Halts on divergence with the last good policy.

    The log is a list of per-iteration records; eval snapshots add sr/mpkpe
    fields every cfg.eval_every iterations.
    """
    if len(bank.clips) == 0:
        raise InputValidationError("empty clip bank")
    rng = np.random.default_rng(cfg.seed)
    policy = make_teacher(oracle_obs_dim(model), model.n_joints,
                          hidden=cfg.hidden, activation=cfg.activation,
                          init=cfg.init, seed=cfg.seed,
                          init_log_std=cfg.init_log_std)
    engine = RolloutEngine(model, bank, cfg.n_envs, rng,
                           randomization=cfg.randomization)
    adam = nets.adam_init(policy.params())
    log = []
    last_good = policy.copy()
    for it in range(cfg.iterations):
        progress = it / max(cfg.iterations - 1, 1)
        lr_scale = 1.0 - (1.0 - cfg.ppo.anneal_floor) * progress
        try:
            batch = collect_rollouts(policy, engine, cfg.horizon, cfg.reward,
                                     progress, rng)
            mean_ret = (float(np.mean(batch.ep_returns)) if batch.ep_returns
                        else float("nan"))
            mean_rew = float(np.mean(batch.rewards))
            stats = ppo_update(policy, batch, cfg.ppo, adam, rng,
                               lr_scale=lr_scale)
        except (OptimizationError, InputValidationError) as err:
            log.append({"iteration": it, "diverged": True,
                        "error": str(err)})
            return last_good, log
        rec = {"iteration": it, "mean_step_reward": mean_rew,
               "mean_ep_return": mean_ret,
               "episodes": len(batch.ep_returns), **stats,
               "std_mean": float(np.mean(np.exp(policy.log_std)))}
        if not all(math.isfinite(v) for k, v in rec.items()
                   if isinstance(v, float) and k != "mean_ep_return"):
            log.append({"iteration": it, "diverged": True})
            return last_good, log
        if cfg.eval_every and (it + 1) % cfg.eval_every == 0:
            sr, mpkpe = quick_eval(policy, model, bank)
            rec["sr"] = sr
            rec["mpkpe"] = mpkpe
        log.append(rec)
        last_good = policy.copy()
    return policy, log
