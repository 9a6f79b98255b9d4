"""Two-stage constrained actor-critic with softmax policies.

Stage one trains an independent advantage actor-critic per auxiliary
response.  Stage two trains the main policy by regression toward the
closed-form optimum of "maximize main advantage subject to KL balls
around the auxiliary policies": each logged action is reweighted by

    prod_i (pi_aux_i(a|s) / pi_main(a|s)) ** (lambda_i / sum(lambda))
        * exp(A_main / sum(lambda))

with the product clipped for variance control, and one ascent step is
taken on the weighted log-likelihood.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import approximator as ap
from .core import Trajectory, check_discounts
from .seeding import derive_seed, rng_for
from .sim import SessionSimulator, run_episode


class TrainingDiverged(RuntimeError):
    """Raised when the critic loss stays above the divergence threshold."""


@dataclass
class StochasticPolicy:
    """Softmax policy over a discrete item set.  ``response_index`` names the
    response this policy was trained to optimize (0 = main)."""

    spec: ap.ApproxSpec
    params: np.ndarray
    response_index: int = 0

    @property
    def n_items(self) -> int:
        return self.spec.output_dim

    def probs(self, features) -> np.ndarray:
        return ap.forward(self.spec, self.params, features)

    def sample(self, features, rng: np.random.Generator) -> tuple[int, float]:
        p = self.probs(features)
        item = int(rng.choice(p.size, p=p))
        return item, float(p[item])

    def greedy(self, features) -> int:
        return int(np.argmax(self.probs(features)))


@dataclass
class CriticV:
    spec: ap.ApproxSpec
    params: np.ndarray
    response_index: int
    gamma: float

    def value(self, features):
        out = ap.forward(self.spec, self.params, features)
        return out[..., 0] if out.ndim > 1 else float(out[0])


def make_policy(state_dim, n_items, hidden, seed, response_index=0) -> StochasticPolicy:
    spec = ap.ApproxSpec(state_dim, tuple(hidden), n_items, "softmax", seed)
    return StochasticPolicy(spec, ap.init_params(spec), response_index)


def make_critic(state_dim, hidden, seed, response_index, gamma) -> CriticV:
    spec = ap.ApproxSpec(state_dim, tuple(hidden), 1, "linear", seed)
    return CriticV(spec, ap.init_params(spec), response_index, float(gamma))


@dataclass
class PolicySet:
    """Main actor-critic pair plus one frozen-at-stage-two pair per auxiliary
    response, with the Lagrange multipliers tying them together."""

    main: tuple[StochasticPolicy, CriticV]
    auxiliaries: list[tuple[StochasticPolicy, CriticV]]
    lambdas: np.ndarray
    discounts: np.ndarray

    def __post_init__(self):
        self.lambdas = validate_lambdas(self.lambdas, len(self.auxiliaries))
        self.discounts = check_discounts(self.discounts, len(self.auxiliaries) + 1)


def validate_lambdas(lambdas, n_aux: int | None = None) -> np.ndarray:
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.ndim != 1:
        raise ValueError("lambdas must be a 1-D vector")
    if n_aux is not None and lam.size != n_aux:
        raise ValueError(f"need {n_aux} multipliers, got {lam.size}")
    if np.any(lam < 0):
        raise ValueError("Lagrange multipliers must be nonnegative")
    return lam


def build_policy_set(state_dim, n_items, m, lambdas, gammas, hidden, seed) -> PolicySet:
    main = (make_policy(state_dim, n_items, hidden, derive_seed(seed, "actor", 0), 0),
            make_critic(state_dim, hidden, derive_seed(seed, "critic", 0), 0, gammas[0]))
    aux = [(make_policy(state_dim, n_items, hidden, derive_seed(seed, "actor", i), i),
            make_critic(state_dim, hidden, derive_seed(seed, "critic", i), i, gammas[i]))
           for i in range(1, m)]
    return PolicySet(main, aux, np.asarray(lambdas, dtype=np.float64),
                     np.asarray(gammas, dtype=np.float64))


# ---------------------------------------------------------------------------
# batch plumbing
# ---------------------------------------------------------------------------

def batch_arrays(batch):
    """Stack a list of Transitions into (S, a_idx, R, S_next, done) arrays."""
    if not batch:
        raise ValueError("empty batch")
    s = np.stack([tr.state.features for tr in batch])
    a = np.array([tr.action_index for tr in batch], dtype=np.intp)
    r = np.stack([tr.response for tr in batch])
    s2 = np.stack([tr.next_state.features for tr in batch])
    done = np.array([tr.done for tr in batch], dtype=bool)
    return s, a, r, s2, done


def td_errors(critic: CriticV, s, r_i, s2, done):
    """TD residuals with V(s') from the critic's current (frozen) parameters."""
    v = ap.forward(critic.spec, critic.params, s)[:, 0]
    v2 = ap.forward(critic.spec, critic.params, s2)[:, 0]
    target = r_i + critic.gamma * np.where(done, 0.0, v2)
    return v, target


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def critic_update(critic: CriticV, batch, opt: ap.OptState):
    """One step on the squared Bellman error; V(s') is bootstrapped from a
    frozen copy of the pre-update parameters.  A non-finite loss skips the
    step and is reported to the caller via the returned loss."""
    s, _, r, s2, done = batch_arrays(batch)
    r_i = r[:, critic.response_index]
    v, target = td_errors(critic, s, r_i, s2, done)
    err = v - target
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        return critic, opt, loss
    upstream = (2.0 * err / err.size)[:, None]
    grads = ap.gradient(critic.spec, critic.params, s, upstream)
    new_params, opt = ap.optimizer_step(critic.params, grads, opt, "minimize")
    return CriticV(critic.spec, new_params, critic.response_index, critic.gamma), opt, loss


def _policy_loglik_grad(policy: StochasticPolicy, s, a_idx, weights):
    """Gradient of mean_b weights_b * log pi(a_b | s_b) wrt policy params."""
    p = ap.forward(policy.spec, policy.params, s)
    chosen = p[np.arange(a_idx.size), a_idx]
    upstream = np.zeros_like(p)
    upstream[np.arange(a_idx.size), a_idx] = weights / (a_idx.size * chosen)
    return ap.gradient(policy.spec, policy.params, s, upstream), chosen


def actor_update_aux(policy: StochasticPolicy, critic: CriticV, batch, opt: ap.OptState,
                     normalize_advantages: bool = False):
    """Ascent on mean(A_i * log pi(a|s)); the advantage comes from the current
    critic and is treated as a constant."""
    s, a_idx, r, s2, done = batch_arrays(batch)
    v, target = td_errors(critic, s, r[:, critic.response_index], s2, done)
    adv = target - v
    keep = np.isfinite(adv)
    if not np.all(keep):
        s, a_idx, adv = s[keep], a_idx[keep], adv[keep]
        if a_idx.size == 0:
            return policy, opt, {"objective": float("nan"), "mean_adv": float("nan")}
    if normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    grads, chosen = _policy_loglik_grad(policy, s, a_idx, adv)
    objective = float(np.mean(adv * np.log(chosen)))
    new_params, opt = ap.optimizer_step(policy.params, grads, opt, "maximize")
    return (StochasticPolicy(policy.spec, new_params, policy.response_index), opt,
            {"objective": objective, "mean_adv": float(adv.mean())})


def constrained_weight(aux_probs, cur_prob: float, lambdas, advantage: float,
                       clip_max: float) -> float:
    """Closed-form reweighting factor for one logged action:

        min(clip_max, prod_i (aux_i / cur) ** (lambda_i / sum(lambda))
                        * exp(advantage / sum(lambda)))

    Requires sum(lambda) > 0; with lambda_i = 0 the factor is independent of
    auxiliary i.  Computed in log space; always strictly positive.
    """
    aux_probs = np.asarray(aux_probs, dtype=np.float64)
    lam = validate_lambdas(lambdas, aux_probs.size)
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("sum of Lagrange multipliers must be positive; "
                         "use the unconstrained update when all are zero")
    if cur_prob <= 0.0 or np.any(aux_probs <= 0.0):
        raise ValueError("probabilities must be positive")
    log_w = float(np.dot(lam / total, np.log(aux_probs) - np.log(cur_prob))
                  + advantage / total)
    if log_w > 700.0:  # exp would overflow; the clip binds anyway
        return float(clip_max)
    return float(min(np.exp(log_w), clip_max))


def constrained_weights_batch(aux_probs, cur_probs, lambdas, advantages,
                              clip_max, floor=0.0) -> np.ndarray:
    """Vectorized constrained_weight over a batch; aux_probs has shape
    (n_aux, batch).  ``floor`` optionally raises tiny weights to a positive
    constant (variance control; 0 disables it)."""
    lam = validate_lambdas(lambdas, aux_probs.shape[0])
    total = lam.sum()
    if total <= 0.0:
        raise ValueError("sum of Lagrange multipliers must be positive")
    log_w = (lam / total) @ (np.log(aux_probs) - np.log(cur_probs)[None, :])
    log_w = log_w + advantages / total
    w = np.minimum(np.exp(np.minimum(log_w, 700.0)), clip_max)
    if floor > 0.0:
        w = np.maximum(w, floor)
    return w


def actor_update_main(policy_set: PolicySet, batch, opt: ap.OptState,
                      clip_max: float = 20.0, weight_floor: float = 0.0,
                      normalize_advantages: bool = False):
    """One constrained ascent step for the main policy.  Auxiliary policies
    are frozen; the current main probabilities enter the weights as constants."""
    policy, critic = policy_set.main
    s, a_idx, r, s2, done = batch_arrays(batch)
    v, target = td_errors(critic, s, r[:, 0], s2, done)
    adv = target - v
    keep = np.isfinite(adv)
    s, a_idx, adv = s[keep], a_idx[keep], adv[keep]
    if a_idx.size == 0:
        return policy, opt, {"objective": float("nan"), "mean_weight": float("nan")}
    if normalize_advantages:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

    rows = np.arange(a_idx.size)
    cur = ap.forward(policy.spec, policy.params, s)[rows, a_idx]
    aux = np.stack([ap.forward(p.spec, p.params, s)[rows, a_idx]
                    for p, _ in policy_set.auxiliaries])
    w = constrained_weights_batch(aux, cur, policy_set.lambdas, adv, clip_max, weight_floor)

    grads, chosen = _policy_loglik_grad(policy, s, a_idx, w)
    objective = float(np.mean(w * np.log(chosen)))
    new_params, opt = ap.optimizer_step(policy.params, grads, opt, "maximize")
    return (StochasticPolicy(policy.spec, new_params, 0), opt,
            {"objective": objective, "mean_weight": float(w.mean())})


def policy_kl(p_policy: StochasticPolicy, q_policy: StochasticPolicy, states) -> float:
    """Mean over states of KL(p || q), computed exactly per state."""
    p = ap.forward(p_policy.spec, p_policy.params, states)
    q = ap.forward(q_policy.spec, q_policy.params, states)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


# ---------------------------------------------------------------------------
# the two-stage loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwoStageConfig:
    stage1_iters: int = 300
    stage2_iters: int = 300
    episodes_per_iter: int = 8
    critic_steps: int = 2
    actor_lr: float = 5e-3
    critic_lr: float = 1e-2
    hidden: tuple[int, ...] = (32,)
    clip_max: float = 20.0
    weight_floor: float = 0.05
    entropy_coef: float = 0.0
    normalize_advantages: bool = False
    divergence_threshold: float = 1e6
    divergence_patience: int = 20


def collect_batch(sim: SessionSimulator, policy: StochasticPolicy,
                  rng: np.random.Generator, n_episodes: int,
                  episode_seeds) -> tuple[list, np.ndarray]:
    """Fresh on-policy episodes; returns transitions plus per-episode
    cumulative reward vectors."""
    transitions = []
    totals = np.zeros((n_episodes, sim.config.m))
    for e in range(n_episodes):
        traj = run_episode(sim, lambda f: policy.sample(f, rng), episode_seeds[e])
        transitions.extend(traj.transitions)
        totals[e] = np.sum([tr.response for tr in traj.transitions], axis=0)
    return transitions, totals.mean(axis=0)


def _entropy_ascent(policy, s, coef, opt):
    p = ap.forward(policy.spec, policy.params, s)
    upstream = -coef * (np.log(p) + 1.0) / s.shape[0]
    grads = ap.gradient(policy.spec, policy.params, s, upstream)
    new_params, opt = ap.optimizer_step(policy.params, grads, opt, "maximize")
    return StochasticPolicy(policy.spec, new_params, policy.response_index), opt


class _DivergenceWatch:
    def __init__(self, threshold, patience):
        self.threshold, self.patience, self.run = threshold, patience, 0

    def check(self, loss, where):
        self.run = self.run + 1 if (not np.isfinite(loss) or loss > self.threshold) else 0
        if self.run >= self.patience:
            raise TrainingDiverged(
                f"critic loss above {self.threshold} for {self.run} consecutive "
                f"iterations during {where} (last loss {loss})")


def train_stage_one(sim: SessionSimulator, response_index: int, gamma: float,
                    cfg: TwoStageConfig, master_seed: int,
                    metrics: list | None = None):
    """Advantage actor-critic for one auxiliary response.  Returns the trained
    (policy, critic) pair."""
    c = sim.config
    policy = make_policy(c.state_dim, c.n_items, cfg.hidden,
                         derive_seed(master_seed, "s1-actor", response_index), response_index)
    critic = make_critic(c.state_dim, cfg.hidden,
                         derive_seed(master_seed, "s1-critic", response_index),
                         response_index, gamma)
    a_opt = ap.init_opt_state(policy.params.size, cfg.actor_lr)
    c_opt = ap.init_opt_state(critic.params.size, cfg.critic_lr)
    rng = rng_for(master_seed, "s1-actions", response_index)
    watch = _DivergenceWatch(cfg.divergence_threshold, cfg.divergence_patience)

    for it in range(cfg.stage1_iters):
        seeds = [derive_seed(master_seed, "s1-ep", response_index, it, e)
                 for e in range(cfg.episodes_per_iter)]
        batch, mean_rewards = collect_batch(sim, policy, rng, cfg.episodes_per_iter, seeds)
        loss = float("nan")
        for _ in range(cfg.critic_steps):
            critic, c_opt, loss = critic_update(critic, batch, c_opt)
        watch.check(loss, f"stage one (response {response_index})")
        policy, a_opt, info = actor_update_aux(policy, critic, batch, a_opt,
                                               cfg.normalize_advantages)
        if cfg.entropy_coef > 0.0:
            s = np.stack([tr.state.features for tr in batch])
            policy, a_opt = _entropy_ascent(policy, s, cfg.entropy_coef, a_opt)
        if metrics is not None:
            row = {"iteration": it, "stage": 1, "response": response_index,
                   "critic_loss": loss, "actor_objective": info["objective"],
                   "mean_weight": ""}
            for i in range(c.m):
                row[f"reward_{i}"] = mean_rewards[i]
            metrics.append(row)
    return policy, critic


def train_two_stage(sim: SessionSimulator, lambdas, gammas, cfg: TwoStageConfig,
                    master_seed: int, pretrained_aux=None,
                    metrics: list | None = None) -> PolicySet:
    """Full two-stage run on a simulator.

    Stage one fits one actor-critic pair per auxiliary response (skipped if
    ``pretrained_aux`` supplies them, e.g. when sweeping multipliers that
    only affect stage two).  Stage two trains the main pair with auxiliaries
    frozen, logging per-iteration rewards, losses, mean constrained weight,
    and the KL from the main policy to each auxiliary.
    """
    c = sim.config
    gammas = check_discounts(gammas, c.m)
    lam = validate_lambdas(lambdas, c.m - 1)

    if pretrained_aux is None:
        aux_pairs = [train_stage_one(sim, i, gammas[i], cfg, master_seed, metrics)
                     for i in range(1, c.m)]
    else:
        if len(pretrained_aux) != c.m - 1:
            raise ValueError("pretrained_aux must supply one pair per auxiliary response")
        aux_pairs = list(pretrained_aux)

    policy = make_policy(c.state_dim, c.n_items, cfg.hidden,
                         derive_seed(master_seed, "s2-actor"), 0)
    critic = make_critic(c.state_dim, cfg.hidden, derive_seed(master_seed, "s2-critic"),
                         0, gammas[0])
    pset = PolicySet((policy, critic), aux_pairs, lam, gammas)
    a_opt = ap.init_opt_state(policy.params.size, cfg.actor_lr)
    c_opt = ap.init_opt_state(critic.params.size, cfg.critic_lr)
    rng = rng_for(master_seed, "s2-actions")
    watch = _DivergenceWatch(cfg.divergence_threshold, cfg.divergence_patience)

    for it in range(cfg.stage2_iters):
        seeds = [derive_seed(master_seed, "s2-ep", it, e)
                 for e in range(cfg.episodes_per_iter)]
        batch, mean_rewards = collect_batch(sim, pset.main[0], rng,
                                            cfg.episodes_per_iter, seeds)
        loss = float("nan")
        for _ in range(cfg.critic_steps):
            critic, c_opt, loss = critic_update(pset.main[1], batch, c_opt)
            pset.main = (pset.main[0], critic)
        watch.check(loss, "stage two")
        policy, a_opt, info = actor_update_main(pset, batch, a_opt,
                                                cfg.clip_max, cfg.weight_floor,
                                                cfg.normalize_advantages)
        pset.main = (policy, pset.main[1])
        if metrics is not None:
            s = np.stack([tr.state.features for tr in batch])
            row = {"iteration": it, "stage": 2, "response": 0,
                   "critic_loss": loss, "actor_objective": info["objective"],
                   "mean_weight": info["mean_weight"]}
            for i in range(c.m):
                row[f"reward_{i}"] = mean_rewards[i]
            for j, (aux_p, _) in enumerate(pset.auxiliaries, start=1):
                row[f"kl_aux_{j}"] = policy_kl(policy, aux_p, s)
            metrics.append(row)
    return pset
