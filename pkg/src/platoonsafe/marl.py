"""Multi-agent PPO with the safety QP as a differentiable last layer.

Both CAVs share one Gaussian actor over local observations and one
centralized critic over the global state.  During rollouts the sampled
nominal action is passed through the cooperative safety filter and the
corrected action is executed.  For updates, the policy is modeled as a
Gaussian centered on the *filtered* mean action; the filter enters the
gradient through the QP solution map, so the chain rule picks up
(1 + du_safe/du_rl) on the actor path and du_safe/dgamma on the barrier
gains, which are trained jointly with the networks.  Within one update
phase the filter is linearized around the collection-time solution, which
keeps the gradients exact at the old parameters without re-solving QPs in
every minibatch pass.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._mlp import Adam, Mlp
from .dynamics import PlatoonConfig, PlatoonState, equilibrium_state, step
from .qpcore import differentiate, solve
from .safety import CooperativeSafetyFilter, Estimates, SafetyLayerParams, cbf_value

__all__ = [
    "ObsSpec",
    "RewardWeights",
    "ActorCritic",
    "TrainConfig",
    "PlatoonEnv",
    "efficiency_reward",
    "safety_reward",
    "global_reward",
    "local_reward",
    "total_reward",
    "gaussian_logp",
    "ppo_clip_loss",
    "critic_loss",
    "gae_advantages",
    "backprop_through_safety",
    "filtered_action_with_sens",
    "safety_grad_check",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
GAMMA_MIN = 0.05
GAMMA_MAX = 8.0


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class ObsSpec:
    """Local observation layout: (spacing, velocity) slots for the window of
    vehicles around the agent, front to back, each with a validity bit,
    plus the head vehicle's velocity and its own validity bit.  Values are
    centered on the nominal operating point and scaled to O(1)."""

    comm_range: int = 7
    s_ref: float = 20.0
    v_ref: float = 15.0
    scale: float = 10.0

    @property
    def window(self) -> int:
        return 2 * self.comm_range + 1

    @property
    def dim(self) -> int:
        return 3 * self.window + 2

    def build(self, state: PlatoonState, j: int, cfg: PlatoonConfig) -> np.ndarray:
        out = np.zeros(self.dim)
        pos = 0
        for i in range(j - self.comm_range, j + self.comm_range + 1):
            if 1 <= i <= state.n:
                out[pos] = (state.s(i) - self.s_ref) / self.scale
                out[pos + 1] = (state.v(i) - self.v_ref) / self.scale
                out[pos + 2] = 1.0
            pos += 3
        if j - self.comm_range <= 0:
            out[pos] = (state.head_velocity - self.v_ref) / self.scale
            out[pos + 1] = 1.0
        return out

    def critic_input(self, state: PlatoonState) -> np.ndarray:
        out = np.empty(2 * state.n + 1)
        out[0] = (state.head_velocity - self.v_ref) / self.scale
        out[1::2] = (state.spacing - self.s_ref) / self.scale
        out[2::2] = (state.velocity - self.v_ref) / self.scale
        return out


# ---------------------------------------------------------------------------
# rewards


@dataclass(frozen=True)
class RewardWeights:
    w_global: float = 0.1
    w_local: float = 0.9
    w_efficiency: float = 1.0
    w_safety: float = 1.0
    k_stability: float = 1.0

    def __post_init__(self):
        if abs(self.w_global + self.w_local - 1.0) > 1e-9:
            raise ValueError("global and local weights must sum to 1")
        if min(self.w_global, self.w_local, self.w_efficiency, self.w_safety) < 0:
            raise ValueError("weights must be nonnegative")
        if self.k_stability > 1.0:
            raise ValueError("stability coefficients must not exceed 1")


def efficiency_reward(s: float, v: float) -> float:
    """-1 when the time headway s/v reaches 2.5 s (traffic too sparse for
    high flow), else 0.  Nonpositive speeds count as infinite headway."""
    if v <= 0.0:
        return -1.0
    return -1.0 if s / v >= 2.5 else 0.0


def safety_reward(s: float, v: float, v_prev: float) -> float:
    """log(TTC/4) when the time-to-collision is within 4 s, else 0.

    TTC = -s/(v_prev - v) is positive only while closing in on the leader;
    an exact zero (s = 0) is floored to keep the value finite.
    """
    if v_prev == v:
        return 0.0
    ttc = -s / (v_prev - v)
    if 0.0 <= ttc <= 4.0:
        return math.log(max(ttc, 1e-6) / 4.0)
    return 0.0


def global_reward(state: PlatoonState, cfg: PlatoonConfig, k_stability: float = 1.0) -> float:
    """Velocity-oscillation penalty against the vehicle ahead of the first
    CAV, over the first CAV and every HDV behind it."""
    first = min(cfg.cav_indices)
    v_ref = state.v_prev(first)
    total = -((state.v(first) - v_ref) ** 2)
    for j in cfg.hdv_indices:
        if j > first:
            total -= k_stability * (state.v(j) - v_ref) ** 2
    return total


def local_reward(state: PlatoonState, j: int, weights: RewardWeights) -> float:
    return weights.w_efficiency * efficiency_reward(state.s(j), state.v(j)) + (
        weights.w_safety * safety_reward(state.s(j), state.v(j), state.v_prev(j))
    )


def total_reward(state: PlatoonState, weights: RewardWeights, cfg: PlatoonConfig) -> float:
    local = sum(local_reward(state, j, weights) for j in cfg.cav_indices)
    return weights.w_global * global_reward(state, cfg, weights.k_stability) + (
        weights.w_local * local
    )


# ---------------------------------------------------------------------------
# actor/critic


class ActorCritic:
    """Shared Gaussian actor (mean and log-std heads), centralized critic,
    and the trainable barrier gains theta_cbf."""

    def __init__(self, actor: Mlp, critic: Mlp, gamma_cav: dict, gamma_hdv: dict):
        self.actor = actor
        self.critic = critic
        self.gamma_cav = {int(k): float(v) for k, v in gamma_cav.items()}
        self.gamma_hdv = {int(k): float(v) for k, v in gamma_hdv.items()}

    @classmethod
    def create(
        cls,
        obs_dim: int,
        state_dim: int,
        params: SafetyLayerParams,
        hidden: int = 64,
        seed: int = 0,
    ) -> "ActorCritic":
        rng = np.random.default_rng(seed)
        actor = Mlp([obs_dim, hidden, hidden, 2], rng)
        actor.weights[-1] *= 0.01  # start near zero-mean actions
        actor.biases[-1][1] = -0.5  # initial exploration std ~0.6 m/s^2
        critic = Mlp([state_dim, hidden, hidden, 1], rng)
        return cls(actor, critic, dict(params.gamma_cav), dict(params.gamma_hdv))

    # --- policy heads -----------------------------------------------------

    def actor_heads(self, obs: np.ndarray):
        """(mean, log_std, cache) for a batch of observations."""
        out, cache = self.actor.forward_cached(obs)
        mean = out[:, 0]
        log_std = np.clip(out[:, 1], LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, cache

    def value(self, state_vec: np.ndarray) -> np.ndarray:
        return self.critic.forward(state_vec)[:, 0]

    def theta_vector(self, labels) -> np.ndarray:
        out = np.empty(len(labels))
        for k, (kind, idx) in enumerate(labels):
            out[k] = self.gamma_cav[idx] if kind == "CAV" else self.gamma_hdv[idx]
        return out

    def apply_theta(self, params: SafetyLayerParams):
        params.gamma_cav.update(self.gamma_cav)
        params.gamma_hdv.update(self.gamma_hdv)


def gaussian_logp(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) / np.exp(log_std)
    return -0.5 * z**2 - log_std - 0.5 * math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# losses


def ppo_clip_loss(new_logp, old_logp, advantages, eps_clip: float = 0.2):
    """Clipped-surrogate loss (negated for minimization) and its gradient in
    the new log-probabilities."""
    ratio = np.exp(new_logp - old_logp)
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - eps_clip, 1.0 + eps_clip) * advantages
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    take_unclipped = unclipped <= clipped
    in_band = (ratio > 1.0 - eps_clip) & (ratio < 1.0 + eps_clip)
    dobj_dratio = np.where(take_unclipped, advantages, np.where(in_band, advantages, 0.0))
    dloss_dlogp = -dobj_dratio * ratio / new_logp.shape[0]
    return loss, dloss_dlogp


def critic_loss(rewards, values, next_values, gamma: float, dones=None):
    """Mean squared one-step TD error with a detached bootstrap target.

    Returns (loss, dloss_dvalues).
    """
    rewards = np.asarray(rewards, dtype=float)
    mask = 1.0 - np.asarray(dones, dtype=float) if dones is not None else 1.0
    target = rewards + gamma * next_values * mask
    delta = target - values
    loss = float(np.mean(delta**2))
    return loss, -2.0 * delta / delta.shape[0]


def gae_advantages(rewards, values, last_value, gamma: float, lam: float, done_last: bool):
    """Generalized advantage estimates and value targets for one episode."""
    T = len(rewards)
    adv = np.zeros(T)
    running = 0.0
    next_v = 0.0 if done_last else last_value
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * next_v - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_v = values[t]
    return adv, adv + np.asarray(values)


def backprop_through_safety(dl_du, sens_u, sens_gamma):
    """Chain-rule composition through the safety layer for one transition:
    dl/du_rl = dl/du * (1 + du_safe/du_rl), dl/dgamma = dl/du * du_safe/dgamma.
    """
    return dl_du * (1.0 + sens_u), dl_du * np.asarray(sens_gamma)


# ---------------------------------------------------------------------------
# filtered actions and their sensitivities


def filtered_action_with_sens(
    filt: CooperativeSafetyFilter,
    ego: int,
    state: PlatoonState,
    u_rl: dict[int, float],
    estimates: Estimates,
):
    """Solve ego's QP at the given nominal inputs and differentiate it.

    Returns (u_exec_ego, u_safe_ego, sens_u, sens_gamma, labels, degenerate, status).
    sens_u is du_safe_ego/du_rl_ego; sens_gamma is du_safe_ego/dgamma over
    the QP's gain labels.
    """
    problem = filt.build_qp(ego, state, u_rl, estimates, with_jacobians=True)
    sol = solve(problem)
    layout = filt.layout(ego)
    labels = filt.theta_labels(ego)
    if sol.status != "optimal":
        a_min, a_max = filt.params.a_min, filt.params.a_max
        u_exec = float(np.clip(u_rl[ego], a_min, a_max))
        zeros = np.zeros(len(labels))
        return u_exec, u_exec - u_rl[ego], 0.0, zeros, labels, True, sol.status
    k = layout.u_index(ego)
    u_safe = float(sol.w[k])
    sens = differentiate(problem, sol)
    ego_col = list(layout.cav_order).index(ego)
    sens_u = float(sens.dw_du_rl[k, ego_col])
    sens_gamma = np.asarray(sens.dw_dtheta[k, :])
    return (
        u_rl[ego] + u_safe,
        u_safe,
        sens_u,
        sens_gamma,
        labels,
        sens.degenerate,
        sol.status,
    )


def safety_grad_check(
    filt: CooperativeSafetyFilter,
    ego: int,
    state: PlatoonState,
    u_rl: dict[int, float],
    estimates: Estimates,
    fd_step: float = 1e-5,
    target: float = 0.0,
):
    """Finite-difference check of the composite gradients through the
    safety layer for the probe loss l = 0.5 (u_exec - target)^2.

    Returns (err_u_rl, err_gamma): max relative errors of dl/du_rl and
    dl/dgamma against central differences of the full filter pipeline.
    """
    u_exec, _, sens_u, sens_gamma, labels, degen, status = filtered_action_with_sens(
        filt, ego, state, u_rl, estimates
    )
    if status != "optimal":
        raise ValueError("probe state has a failed QP")
    dl_du = u_exec - target
    g_url, g_gam = backprop_through_safety(dl_du, sens_u, sens_gamma)

    def loss_at(u_rl_probe, params_probe: SafetyLayerParams):
        f = CooperativeSafetyFilter(
            filt.cfg, params_probe, conformal_c=filt.conformal_c, hdv_rows=filt.hdv_rows
        )
        p = f.build_qp(ego, state, u_rl_probe, estimates, with_jacobians=False)
        s = solve(p)
        u = u_rl_probe[ego] + float(s.w[f.layout(ego).u_index(ego)])
        return 0.5 * (u - target) ** 2

    hi = dict(u_rl)
    lo = dict(u_rl)
    hi[ego] += fd_step
    lo[ego] -= fd_step
    fd_u = (loss_at(hi, filt.params) - loss_at(lo, filt.params)) / (2 * fd_step)
    err_u = abs(g_url - fd_u) / max(1.0, abs(fd_u))

    errs_g = []
    from dataclasses import replace as _dc_replace

    for k, (kind, idx) in enumerate(labels):
        p_hi = _dc_replace(
            filt.params,
            gamma_cav=dict(filt.params.gamma_cav),
            gamma_hdv=dict(filt.params.gamma_hdv),
        )
        p_lo = _dc_replace(
            filt.params,
            gamma_cav=dict(filt.params.gamma_cav),
            gamma_hdv=dict(filt.params.gamma_hdv),
        )
        d_hi = p_hi.gamma_cav if kind == "CAV" else p_hi.gamma_hdv
        d_lo = p_lo.gamma_cav if kind == "CAV" else p_lo.gamma_hdv
        d_hi[idx] += fd_step
        d_lo[idx] -= fd_step
        fd_g = (loss_at(u_rl, p_hi) - loss_at(u_rl, p_lo)) / (2 * fd_step)
        errs_g.append(abs(g_gam[k] - fd_g) / max(1.0, abs(fd_g)))
    return err_u, max(errs_g), degen


# ---------------------------------------------------------------------------
# environment


@dataclass
class TrainConfig:
    episodes: int = 50
    steps_per_episode: int = 200
    gamma_rl: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_gamma: float = 1e-2
    epochs_per_update: int = 4
    minibatch: int = 64
    seed: int = 0
    noise_std: float = 0.2  # head-velocity disturbance per step (m/s)
    disturbance_pool: int = 10  # episodes cycle through this many disturbance seeds
    collision_penalty: float = -100.0


class PlatoonEnv:
    """Training environment: platoon dynamics, team reward, and the safety
    filter applied to every executed action."""

    def __init__(
        self,
        cfg: PlatoonConfig,
        params: SafetyLayerParams,
        weights: RewardWeights,
        obs_spec: ObsSpec | None = None,
        safety_filter: CooperativeSafetyFilter | None = None,
        estimator=None,  # None -> oracle estimates; else a BehaviorPredictor
        steps: int = 200,
        noise_std: float = 0.2,
        collision_penalty: float = -100.0,
    ):
        self.cfg = cfg
        self.params = params
        self.weights = weights
        self.obs_spec = obs_spec or ObsSpec(comm_range=cfg.comm_range)
        self.filter = safety_filter
        self.estimator = estimator
        self.steps = steps
        self.noise_std = noise_std
        self.collision_penalty = collision_penalty
        self.state: PlatoonState | None = None
        self._rng = None
        self._t = 0
        self._prev_state = None
        self._prev_accel = None
        self._prev_exec = None

    def reset(self, seed: int) -> PlatoonState:
        self.state = equilibrium_state(self.cfg)
        self._rng = np.random.default_rng(seed)
        self._t = 0
        self._prev_state = None
        self._prev_accel = np.zeros(self.cfg.n)
        self._prev_exec = {j: 0.0 for j in self.cfg.cav_indices}
        return self.state

    def estimates(self) -> Estimates:
        if self.estimator is None:
            return Estimates.oracle(self.state, self.cfg, self._prev_exec)
        if self._prev_state is None:
            return self.estimator.estimates(self.state, self._prev_accel, self.cfg)
        return self.estimator.estimates(self._prev_state, self._prev_accel, self.cfg)

    def step_env(self, u_exec: dict[int, float]):
        """Advance dynamics under the executed CAV inputs; returns
        (next_state, reward, done)."""
        u = np.array([u_exec[j] for j in self.cfg.cav_indices])
        head_accel = self._rng.normal(0.0, self.noise_std) / self.cfg.dt
        nxt = step(self.state, u, head_accel, self.cfg)
        self._prev_accel = (nxt.velocity - self.state.velocity) / self.cfg.dt
        self._prev_state = self.state
        self._prev_exec = dict(u_exec)
        self.state = nxt
        self._t += 1
        collided = bool(nxt.min_spacing() <= 0.0)
        reward = total_reward(nxt, self.weights, self.cfg)
        if collided:
            reward += self.collision_penalty
        done = collided or self._t >= self.steps
        return nxt, reward, done


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    actor_critic: ActorCritic
    episode_rewards: np.ndarray
    losses: list = field(default_factory=list)
    theta_grad_norms: list = field(default_factory=list)
    gamma_history: list = field(default_factory=list)
    safety_activations: int = 0


def _theta_slot(ac: ActorCritic, label) -> tuple[dict, int]:
    kind, idx = label
    return (ac.gamma_cav if kind == "CAV" else ac.gamma_hdv), idx


def train(env: PlatoonEnv, cfg: TrainConfig, ac: ActorCritic | None = None) -> TrainResult:
    """Toy-scale MAPPO with the safety layer inside the interaction loop.

    Episode disturbances cycle through a fixed seed pool so the reward
    trend reflects policy change rather than disturbance luck.  Gains are
    updated from the QP sensitivities and clipped to a positive range.
    """
    if env.filter is None:
        raise ValueError("training expects a safety filter in the loop")
    rng = np.random.default_rng(cfg.seed)
    obs_spec = env.obs_spec
    state_dim = 2 * env.cfg.n + 1
    if ac is None:
        ac = ActorCritic.create(obs_spec.dim, state_dim, env.params, seed=cfg.seed)
    opt_actor = Adam(ac.actor.params(), lr=cfg.lr_actor)
    opt_critic = Adam(ac.critic.params(), lr=cfg.lr_critic)

    result = TrainResult(actor_critic=ac, episode_rewards=np.zeros(cfg.episodes))
    cavs = env.cfg.cav_indices

    for ep in range(cfg.episodes):
        ac.apply_theta(env.params)
        ep_seed = int(cfg.seed * 1000 + (ep % max(cfg.disturbance_pool, 1)))
        state = env.reset(ep_seed)

        # --- collect one episode ------------------------------------------
        traj = {
            "obs": [],
            "u_exec": [],
            "mean_old": [],
            "logp_old": [],
            "psi_old": [],
            "sens_u": [],
            "sens_gamma": [],
            "labels": [],
            "state_vec": [],
            "reward": [],
            "done": [],
        }
        ep_reward = 0.0
        done = False
        while not done:
            est = env.estimates()
            obs = {j: obs_spec.build(state, j, env.cfg) for j in cavs}
            obs_mat = np.vstack([obs[j] for j in cavs])
            mean, log_std, _ = ac.actor_heads(obs_mat)
            noise = rng.normal(size=len(cavs))
            u_rl_sample = {
                j: float(mean[k] + math.exp(log_std[k]) * noise[k])
                for k, j in enumerate(cavs)
            }
            u_rl_mean = {j: float(mean[k]) for k, j in enumerate(cavs)}

            # executed action: filter the sampled nominal
            fr = env.filter.filter_step(state, u_rl_sample, est)
            if np.any(np.abs(fr.u_safe) > 1e-9):
                result.safety_activations += 1

            # policy center: filter the mean nominal, with sensitivities
            step_rows = []
            for k, j in enumerate(cavs):
                u_exec_j = float(fr.u_exec[k])
                psi_j, _, s_u, s_g, labels, _, _ = filtered_action_with_sens(
                    env.filter, j, state, u_rl_mean, est
                )
                lp_old = gaussian_logp(
                    np.array([u_exec_j]), np.array([psi_j]), np.array([log_std[k]])
                )[0]
                step_rows.append((j, obs[j], u_exec_j, mean[k], lp_old, psi_j, s_u, s_g, labels))

            sv = obs_spec.critic_input(state)
            nxt, reward, done = env.step_env({j: float(fr.u_exec[k]) for k, j in enumerate(cavs)})
            ep_reward += reward
            for row in step_rows:
                j, ob, u_exec_j, m_old, lp_old, psi_j, s_u, s_g, labels = row
                traj["obs"].append(ob)
                traj["u_exec"].append(u_exec_j)
                traj["mean_old"].append(m_old)
                traj["logp_old"].append(lp_old)
                traj["psi_old"].append(psi_j)
                traj["sens_u"].append(s_u)
                traj["sens_gamma"].append(s_g)
                traj["labels"].append(labels)
                traj["state_vec"].append(sv)
                traj["reward"].append(reward)
                traj["done"].append(done)
            state = nxt
        result.episode_rewards[ep] = ep_reward

        # --- advantages over the per-step (team) reward --------------------
        n_agents = len(cavs)
        rewards_t = np.asarray(traj["reward"][::n_agents])
        svecs = np.vstack(traj["state_vec"][::n_agents])
        values_t = ac.value(svecs)
        last_v = float(ac.value(obs_spec.critic_input(state)[None, :])[0])
        adv_t, returns_t = gae_advantages(
            rewards_t, values_t, last_v, cfg.gamma_rl, cfg.gae_lambda, bool(traj["done"][-1])
        )
        adv = np.repeat(adv_t, n_agents)
        if adv.std() > 1e-8:
            adv_n = (adv - adv.mean()) / adv.std()
        else:
            adv_n = adv - adv.mean()

        obs_all = np.vstack(traj["obs"])
        u_exec_all = np.asarray(traj["u_exec"])
        mean_old_all = np.asarray(traj["mean_old"])
        logp_old_all = np.asarray(traj["logp_old"])
        psi_old_all = np.asarray(traj["psi_old"])
        sens_u_all = np.asarray(traj["sens_u"])
        returns_all = np.repeat(returns_t, n_agents)
        svecs_all = np.vstack(traj["state_vec"])
        N = obs_all.shape[0]

        frac = 1.0 - ep / max(cfg.episodes, 1)
        lr_a = cfg.lr_actor * frac
        lr_c = cfg.lr_critic * frac

        gamma_old = {("CAV", j): ac.gamma_cav[j] for j in ac.gamma_cav}
        gamma_old.update({("HDV", i): ac.gamma_hdv[i] for i in ac.gamma_hdv})

        for _ in range(cfg.epochs_per_update):
            order = rng.permutation(N)
            for start in range(0, N, cfg.minibatch):
                idx = order[start : start + cfg.minibatch]
                mean, log_std, cache = ac.actor_heads(obs_all[idx])
                # linearized filtered mean around the collection-time QP
                dgam = np.zeros(len(idx))
                for rr, ii in enumerate(idx):
                    s_g = traj["sens_gamma"][ii]
                    labels = traj["labels"][ii]
                    for kk, lab in enumerate(labels):
                        dct, vid = _theta_slot(ac, lab)
                        dgam[rr] += s_g[kk] * (dct[vid] - gamma_old[lab])
                mu_filt = (
                    psi_old_all[idx]
                    + (1.0 + sens_u_all[idx]) * (mean - mean_old_all[idx])
                    + dgam
                )
                logp = gaussian_logp(u_exec_all[idx], mu_filt, log_std)
                loss, dl_dlogp = ppo_clip_loss(logp, logp_old_all[idx], adv_n[idx], cfg.clip)
                if not np.isfinite(loss):
                    raise RuntimeError(f"PPO loss diverged at episode {ep}")
                result.losses.append(loss)

                # d logp / d mu and d logp / d log_std
                std = np.exp(log_std)
                z = (u_exec_all[idx] - mu_filt) / std
                dlogp_dmu = z / std
                dlogp_dlogstd = z**2 - 1.0
                dl_dmu = dl_dlogp * dlogp_dmu  # gradient w.r.t. filtered mean
                dl_dmean = dl_dmu * (1.0 + sens_u_all[idx])
                dl_dlogstd = dl_dlogp * dlogp_dlogstd
                head = np.column_stack([dl_dmean, dl_dlogstd])
                gw, gb, _ = ac.actor.backward(cache, head)
                opt_actor.step(gw + gb, lr=lr_a)

                # barrier-gain gradients through the QP layer
                theta_grads: dict = {}
                for rr, ii in enumerate(idx):
                    _, dgrad = backprop_through_safety(
                        dl_dmu[rr], traj["sens_u"][ii], traj["sens_gamma"][ii]
                    )
                    for kk, lab in enumerate(traj["labels"][ii]):
                        theta_grads[lab] = theta_grads.get(lab, 0.0) + dgrad[kk]
                gnorm = math.sqrt(sum(g * g for g in theta_grads.values()))
                result.theta_grad_norms.append(gnorm)
                for lab, g in theta_grads.items():
                    dct, vid = _theta_slot(ac, lab)
                    dct[vid] = float(np.clip(dct[vid] - cfg.lr_gamma * g, GAMMA_MIN, GAMMA_MAX))

                # critic on GAE returns
                v, vcache = ac.critic.forward_cached(svecs_all[idx])
                verr = v[:, 0] - returns_all[idx]
                closs = float(np.mean(verr**2))
                if not np.isfinite(closs):
                    raise RuntimeError(f"critic loss diverged at episode {ep}")
                gwc, gbc, _ = ac.critic.backward(vcache, (2.0 * verr / len(idx))[:, None])
                opt_critic.step(gwc + gbc, lr=lr_c)

        ac.apply_theta(env.params)
        result.gamma_history.append(
            {"CAV": dict(ac.gamma_cav), "HDV": dict(ac.gamma_hdv)}
        )
    return result


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(ac: ActorCritic, path):
    doc = {
        "format": "platoonsafe-checkpoint",
        "version": 1,
        "actor": ac.actor.to_dict(),
        "critic": ac.critic.to_dict(),
        "gamma_cav": {str(k): v for k, v in ac.gamma_cav.items()},
        "gamma_hdv": {str(k): v for k, v in ac.gamma_hdv.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_checkpoint(path) -> ActorCritic:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "platoonsafe-checkpoint" or doc.get("version") != 1:
        raise ValueError(f"unrecognized checkpoint document at {path}")
    return ActorCritic(
        actor=Mlp.from_dict(doc["actor"]),
        critic=Mlp.from_dict(doc["critic"]),
        gamma_cav={int(k): v for k, v in doc["gamma_cav"].items()},
        gamma_hdv={int(k): v for k, v in doc["gamma_hdv"].items()},
    )
