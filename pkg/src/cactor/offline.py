"""Debiased offline policy learning and off-policy evaluation.

Offline actor updates correct the distribution mismatch between the logged
behavior policy and the policy being optimized with importance ratios:
either the full trajectory product (unbiased, high variance) or its
single-step first-order approximation.  Policies are scored on logged data
with normalized capped importance sampling (NCIS): per response,
sum(w * r) / sum(w) with w = min(pi(a|s) / pi_beta(a|s), cap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import approximator as ap
from .core import ReplayDataset, Trajectory, check_discounts, discounted_returns
from .seeding import derive_seed
from .stochastic import (CriticV, PolicySet, StochasticPolicy,
                         _policy_loglik_grad, constrained_weights_batch,
                         make_critic, td_errors)


@dataclass(frozen=True)
class ISConfig:
    mode: str = "first_order"
    ratio_clip: float = 10.0
    min_behavior_prob: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("first_order", "full_product"):
            raise ValueError(f"unknown importance-sampling mode {self.mode!r}")
        if self.ratio_clip < 1.0:
            raise ValueError("ratio_clip must be >= 1")
        if not (0.0 < self.min_behavior_prob <= 1.0):
            raise ValueError("min_behavior_prob must lie in (0, 1]")


@dataclass(frozen=True)
class NCISConfig:
    cap: float = 10.0
    score_responses: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.cap <= 0.0:
            raise ValueError("cap must be positive")


def _behavior_prob(tr, cfg: ISConfig) -> float:
    if tr.behavior_prob is None:
        raise ValueError("transition is missing behavior_prob; debiased learning "
                         "requires logged action probabilities")
    if tr.behavior_prob < cfg.min_behavior_prob:
        raise ValueError(f"behavior_prob {tr.behavior_prob} below the "
                         f"{cfg.min_behavior_prob} floor")
    return tr.behavior_prob


def full_trajectory_ratio(traj: Trajectory, t: int, policy: StochasticPolicy,
                          cfg: ISConfig) -> float:
    """Product of per-step pi(a|s)/pi_beta(a|s) over steps 0..t, clipped."""
    if not (0 <= t < len(traj)):
        raise ValueError(f"step {t} outside trajectory of length {len(traj)}")
    prod = 1.0
    for tr in traj.transitions[: t + 1]:
        p = float(policy.probs(tr.state.features)[tr.action_index])
        prod *= p / _behavior_prob(tr, cfg)
    return min(prod, cfg.ratio_clip)


def first_order_ratio(transition, policy: StochasticPolicy, cfg: ISConfig) -> float:
    """Single-step pi(a|s)/pi_beta(a|s), clipped."""
    p = float(policy.probs(transition.state.features)[transition.action_index])
    return min(p / _behavior_prob(transition, cfg), cfg.ratio_clip)


def _batch_refs_arrays(batch_refs):
    """batch_refs is a list of (Trajectory, t) pairs so full-product ratios
    can see their prefixes."""
    if not batch_refs:
        raise ValueError("empty batch")
    trs = [traj.transitions[t] for traj, t in batch_refs]
    s = np.stack([tr.state.features for tr in trs])
    a = np.array([tr.action_index for tr in trs], dtype=np.intp)
    r = np.stack([tr.response for tr in trs])
    s2 = np.stack([tr.next_state.features for tr in trs])
    done = np.array([tr.done for tr in trs], dtype=bool)
    return trs, s, a, r, s2, done


def _ratios(batch_refs, policy, cfg: ISConfig) -> np.ndarray:
    if cfg.mode == "full_product":
        return np.array([full_trajectory_ratio(traj, t, policy, cfg)
                         for traj, t in batch_refs])
    return np.array([first_order_ratio(traj.transitions[t], policy, cfg)
                     for traj, t in batch_refs])


def offline_actor_update_aux(policy: StochasticPolicy, critic: CriticV, batch_refs,
                             is_cfg: ISConfig, opt: ap.OptState):
    """Ascent on mean(ratio * A_i * log pi(a|s)).  With behavior equal to the
    current policy the ratios are exactly 1 and this reproduces the online
    update bit for bit."""
    trs, s, a_idx, r, s2, done = _batch_refs_arrays(batch_refs)
    v, target = td_errors(critic, s, r[:, critic.response_index], s2, done)
    adv = target - v
    ratios = _ratios(batch_refs, policy, is_cfg)
    w = ratios * adv
    keep = np.isfinite(w)
    s, a_idx, w = s[keep], a_idx[keep], w[keep]
    if a_idx.size == 0:
        return policy, opt, {"objective": float("nan")}
    grads, chosen = _policy_loglik_grad(policy, s, a_idx, w)
    new_params, opt = ap.optimizer_step(policy.params, grads, opt, "maximize")
    info = {"objective": float(np.mean(w * np.log(chosen))),
            "mean_ratio": float(ratios.mean())}
    return StochasticPolicy(policy.spec, new_params, policy.response_index), opt, info


def offline_actor_update_main(policy_set: PolicySet, batch_refs, is_cfg: ISConfig,
                              opt: ap.OptState, clip_max: float = 20.0,
                              weight_floor: float = 0.0):
    """Debiased constrained update: the logged behavior probability replaces
    the current-policy probability in the ratio product,

        prod_i (pi_aux_i(a|s) / pi_beta(a|s)) ** (lambda_i/sum) * exp(A_0/sum).
    """
    policy, critic = policy_set.main
    trs, s, a_idx, r, s2, done = _batch_refs_arrays(batch_refs)
    v, target = td_errors(critic, s, r[:, 0], s2, done)
    adv = target - v
    bp = np.array([_behavior_prob(tr, is_cfg) for tr in trs])
    rows = np.arange(a_idx.size)
    aux = np.stack([ap.forward(p.spec, p.params, s)[rows, a_idx]
                    for p, _ in policy_set.auxiliaries])
    w = constrained_weights_batch(aux, bp, policy_set.lambdas, adv,
                                  clip_max, weight_floor)
    keep = np.isfinite(w)
    s, a_idx, w = s[keep], a_idx[keep], w[keep]
    if a_idx.size == 0:
        return policy, opt, {"objective": float("nan")}
    grads, chosen = _policy_loglik_grad(policy, s, a_idx, w)
    new_params, opt = ap.optimizer_step(policy.params, grads, opt, "maximize")
    info = {"objective": float(np.mean(w * np.log(chosen))),
            "mean_weight": float(w.mean())}
    return StochasticPolicy(policy.spec, new_params, 0), opt, info


# ---------------------------------------------------------------------------
# multi-critic training on a shared offline dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MultiCriticConfig:
    iters: int = 3000
    batch_size: int = 64
    lr: float = 5e-3
    hidden: tuple[int, ...] = (32,)
    share_bottom: bool = False


def _value_step(critic: CriticV, s, r_scalar, s2, done, opt):
    v = ap.forward(critic.spec, critic.params, s)[:, 0]
    v2 = ap.forward(critic.spec, critic.params, s2)[:, 0]
    target = r_scalar + critic.gamma * np.where(done, 0.0, v2)
    err = v - target
    loss = float(np.mean(err * err))
    upstream = (2.0 * err / err.size)[:, None]
    grads = ap.gradient(critic.spec, critic.params, s, upstream)
    return grads, loss


def multi_critic_train(dataset: ReplayDataset, gammas, mode: str,
                       cfg: MultiCriticConfig, master_seed: int,
                       shared_gamma: float = 0.95):
    """Train critics on one shared offline dataset.

    mode="separate": one critic per response, each on its own reward and
    discount; zeroing response j's rewards provably touches only critic j
    (unless share_bottom couples their first layers).
    mode="single_summed": one critic on sum_i r_i with one shared discount.
    Returns a list of critics (length m, or 1 for single_summed).
    """
    if mode not in ("separate", "single_summed"):
        raise ValueError(f"unknown mode {mode!r}")
    transitions = dataset.all_transitions()
    if not transitions:
        raise ValueError("dataset has no transitions")
    state_dim = transitions[0].state.features.size
    s_all = np.stack([tr.state.features for tr in transitions])
    r_all = np.stack([tr.response for tr in transitions])
    s2_all = np.stack([tr.next_state.features for tr in transitions])
    done_all = np.array([tr.done for tr in transitions], dtype=bool)
    rng = np.random.Generator(np.random.PCG64(derive_seed(master_seed, "mc-batches")))

    if mode == "single_summed":
        check_discounts([shared_gamma], 1)
        critic = make_critic(state_dim, cfg.hidden, derive_seed(master_seed, "mc", 0),
                             -1, shared_gamma)
        opt = ap.init_opt_state(critic.params.size, cfg.lr)
        for _ in range(cfg.iters):
            idx = rng.integers(len(transitions), size=cfg.batch_size)
            grads, loss = _value_step(critic, s_all[idx], r_all[idx].sum(axis=1),
                                      s2_all[idx], done_all[idx], opt)
            if not np.isfinite(loss):
                continue
            params, opt = ap.optimizer_step(critic.params, grads, opt, "minimize")
            critic = CriticV(critic.spec, params, -1, critic.gamma)
        return [critic]

    gammas = check_discounts(gammas, dataset.m)
    critics = [make_critic(state_dim, cfg.hidden, derive_seed(master_seed, "mc", i),
                           i, gammas[i])
               for i in range(dataset.m)]
    opts = [ap.init_opt_state(c.params.size, cfg.lr) for c in critics]

    fl = ap.first_layer_size(critics[0].spec)
    if cfg.share_bottom:
        # one owner for the first layer: critic 0's block, updated on the
        # summed first-layer gradient with its own optimizer state
        shared = critics[0].params[:fl].copy()
        for i, c in enumerate(critics):
            params = c.params.copy()
            params[:fl] = shared
            critics[i] = CriticV(c.spec, params, c.response_index, c.gamma)
        shared_opt = ap.init_opt_state(fl, cfg.lr)
        opts = [ap.init_opt_state(c.params.size - fl, cfg.lr) for c in critics]

    for _ in range(cfg.iters):
        idx = rng.integers(len(transitions), size=cfg.batch_size)
        s, r, s2, done = s_all[idx], r_all[idx], s2_all[idx], done_all[idx]
        if not cfg.share_bottom:
            for i, critic in enumerate(critics):
                grads, loss = _value_step(critic, s, r[:, i], s2, done, opts[i])
                if not np.isfinite(loss):
                    continue
                params, opts[i] = ap.optimizer_step(critic.params, grads, opts[i],
                                                    "minimize")
                critics[i] = CriticV(critic.spec, params, i, critic.gamma)
        else:
            shared_grad = np.zeros(fl)
            for i, critic in enumerate(critics):
                grads, loss = _value_step(critic, s, r[:, i], s2, done, opts[i])
                if not np.isfinite(loss):
                    continue
                shared_grad += grads[:fl]
                tail, opts[i] = ap.optimizer_step(critic.params[fl:], grads[fl:],
                                                  opts[i], "minimize")
                critics[i] = CriticV(critic.spec,
                                     np.concatenate([critic.params[:fl], tail]),
                                     i, critic.gamma)
            shared, shared_opt = ap.optimizer_step(critics[0].params[:fl], shared_grad,
                                                   shared_opt, "minimize")
            for i, critic in enumerate(critics):
                params = critic.params.copy()
                params[:fl] = shared
                critics[i] = CriticV(critic.spec, params, i, critic.gamma)
    return critics


def pearson(x, y) -> float | None:
    """Pearson correlation; None when either side has zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sx, sy = x.std(), y.std()
    if sx == 0.0 or sy == 0.0:
        return None
    return float(np.mean((x - x.mean()) * (y - y.mean())) / (sx * sy))


def critic_return_correlation(critics, dataset: ReplayDataset, discounts,
                              responses=None) -> dict[int, float | None]:
    """Pearson correlation between predicted state values and realized
    Monte Carlo discounted returns, per response.

    ``critics`` is either a list with one critic per response (separate
    mode) or a single critic whose predictions are compared against every
    requested response's return (single_summed mode).  Zero-variance
    predictions yield None, not 0.
    """
    gammas = check_discounts(discounts, dataset.m)
    responses = list(range(dataset.m)) if responses is None else list(responses)
    states = []
    returns = []
    for traj in dataset.trajectories:
        states.append(np.stack([tr.state.features for tr in traj.transitions]))
        returns.append(discounted_returns(traj, gammas))
    s = np.vstack(states)
    ret = np.vstack(returns)

    single = isinstance(critics, CriticV)
    out = {}
    for i in responses:
        critic = critics if single else critics[i]
        pred = ap.forward(critic.spec, critic.params, s)[:, 0]
        out[i] = pearson(pred, ret[:, i])
    return out


def summed_value_correlation(critics, dataset: ReplayDataset, discounts) -> float | None:
    """Correlation of the summed separate-critic prediction (V_sep = sum_i V_i)
    with the Monte Carlo return of the summed reward."""
    gammas = check_discounts(discounts, dataset.m)
    states, totals = [], []
    for traj in dataset.trajectories:
        states.append(np.stack([tr.state.features for tr in traj.transitions]))
        totals.append(discounted_returns(traj, gammas).sum(axis=1))
    s = np.vstack(states)
    mc = np.concatenate(totals)
    pred = np.zeros(s.shape[0])
    for critic in critics:
        pred += ap.forward(critic.spec, critic.params, s)[:, 0]
    return pearson(pred, mc)


# ---------------------------------------------------------------------------
# NCIS evaluation
# ---------------------------------------------------------------------------

def ncis_from_weights(weights, rewards) -> np.ndarray:
    """sum(w * r) / sum(w) per response column; invariant to rescaling w."""
    weights = np.asarray(weights, dtype=np.float64)
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    total = weights.sum()
    if total <= 0.0:
        raise ValueError("weights must have positive sum")
    return weights @ rewards / total


def ncis_evaluate(prob_fn, dataset: ReplayDataset, cfg: NCISConfig,
                  behavior_prob_fn=None) -> dict:
    """Normalized capped importance sampling over all logged transitions.

    prob_fn(states) -> (batch, n_actions) action probabilities of the policy
    under evaluation.  Behavior probabilities come from the log, or from
    behavior_prob_fn when the log carries none.  Returns per-response scores
    plus weight diagnostics (mean, max, effective sample size).
    """
    transitions = dataset.all_transitions()
    if not transitions:
        raise ValueError("cannot evaluate on an empty dataset")
    s = np.stack([tr.state.features for tr in transitions])
    a = np.array([tr.action_index for tr in transitions], dtype=np.intp)
    r = np.stack([tr.response for tr in transitions])
    p = np.asarray(prob_fn(s))[np.arange(a.size), a]
    if behavior_prob_fn is not None:
        bp = np.asarray(behavior_prob_fn(s))[np.arange(a.size), a]
    else:
        if any(tr.behavior_prob is None for tr in transitions):
            raise ValueError("dataset lacks behavior probabilities; "
                             "pass behavior_prob_fn")
        bp = np.array([tr.behavior_prob for tr in transitions])
    if np.any(bp <= 0.0):
        raise ValueError("behavior probabilities must be positive")
    w = np.minimum(p / bp, cfg.cap)
    scores = ncis_from_weights(w, r)
    idx = (list(range(dataset.m)) if cfg.score_responses is None
           else list(cfg.score_responses))
    return {
        "scores": {i: float(scores[i]) for i in idx},
        "mean_weight": float(w.mean()),
        "max_weight": float(w.max()),
        "ess": float(w.sum() ** 2 / np.sum(w * w)),
        "n": int(w.size),
    }


def stochastic_prob_fn(policy: StochasticPolicy):
    return lambda states: ap.forward(policy.spec, policy.params, states)
