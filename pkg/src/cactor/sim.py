"""Synthetic environments: a short-session simulator with one dense and
several sparse responses, and a review-corpus generator/loader.

The session simulator models the asymmetry that motivates everything else
in this package: response 0 (the dense one, a watch-time analog) is
observed on essentially every step, while responses 1..m-1 (interaction
analogs) are Bernoulli events firing on a small fraction of steps.  Item
choice trades off immediate appeal against a hidden per-item quality that
drives the user's engagement level up or down, so far-sighted policies
genuinely outperform myopic ones on the dense response.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ReplayDataset, State, Trajectory, Transition, terminal_state
from .seeding import derive_seed

REVIEW_M = 8
# Review file column order; internally responses are reordered main-first,
# i.e. ("overall", "service", ..., "location").
REVIEW_ASPECTS = ("service", "business", "cleanliness", "checkin",
                  "value", "rooms", "location", "overall")
_REVIEW_HEADER = "# cactor-reviews 1"


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class SimConfig:
    n_items: int = 30
    state_dim: int = 10
    embed_dim: int = 4
    m: int = 4
    sparse_prob_scale: float = 0.5
    session_length_range: tuple[int, int] = (12, 20)
    seed: int = 0
    dense_noise_std: float = 0.1
    dense_base: float = 1.0
    sparse_slope: float = 8.0
    sparse_offset: float = 6.0
    engagement_gain: float = 0.2
    appeal_quality_tradeoff: float = 0.8

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("need at least one auxiliary response (m >= 2)")
        if not (0.0 < self.sparse_prob_scale <= 1.0):
            raise ValueError("sparse_prob_scale must lie in (0, 1]")
        lo, hi = self.session_length_range
        if not (0 < lo <= hi):
            raise ValueError("session_length_range must satisfy 0 < min <= max")
        if self.state_dim < 4:
            raise ValueError("state_dim must be at least 4")
        if self.dense_noise_std < 0:
            raise ValueError("dense_noise_std must be nonnegative")


class SessionSimulator:
    """One user session at a time.  All draws come from a stream fully
    determined by (config.seed, episode_seed); independent instances are
    required for concurrent episodes."""

    def __init__(self, config: SimConfig):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "sim-tables")))
        c = config
        k = c.state_dim - 2  # core features; slots -2/-1 hold engagement and progress
        self._core_dim = k
        self.item_embed = rng.normal(size=(c.m, c.n_items, c.embed_dim)) / np.sqrt(c.embed_dim)
        self.pref_maps = rng.normal(size=(c.m, c.embed_dim, c.state_dim)) / np.sqrt(c.state_dim)
        self.appeal = rng.normal(scale=0.6, size=c.n_items)
        self.sparse_bias = rng.normal(scale=1.0, size=(c.m - 1, c.n_items))
        # quality anti-correlates with immediate appeal: chasing appeal erodes engagement
        rho = c.appeal_quality_tradeoff
        noise = rng.normal(size=c.n_items)
        z = (self.appeal - self.appeal.mean()) / max(self.appeal.std(), 1e-12)
        self.quality = np.tanh(-rho * z + np.sqrt(max(1.0 - rho * rho, 0.0)) * noise)
        self.fold_map = rng.normal(size=(k, c.embed_dim)) / np.sqrt(c.embed_dim)
        self.fold_resp = rng.normal(scale=1.0, size=k)

        self._episode_rng = None
        self._features = None
        self._t = 0
        self._length = 0

    # -- episode control ---------------------------------------------------

    def reset(self, episode_seed: int) -> State:
        cfg = self.config
        self._episode_rng = np.random.Generator(
            np.random.PCG64(derive_seed(cfg.seed, "episode", episode_seed)))
        lo, hi = cfg.session_length_range
        self._length = int(self._episode_rng.integers(lo, hi + 1))
        self._t = 0
        core = self._episode_rng.normal(size=self._core_dim)
        self._features = np.concatenate([core, [1.0], [0.0]])
        return State(self._features.copy())

    def step(self, item: int) -> tuple[State, np.ndarray, bool]:
        cfg = self.config
        if self._features is None:
            raise RuntimeError("reset() must be called before step()")
        if self._t >= self._length:
            raise RuntimeError("stepping a terminal state")
        if not (0 <= item < cfg.n_items):
            raise ValueError(f"item index {item} out of range [0, {cfg.n_items})")

        dense_mean, sparse_p = self.response_probs(self._features, item)
        noise = self._episode_rng.normal(0.0, cfg.dense_noise_std) if cfg.dense_noise_std > 0 else 0.0
        g = self._features[-2]
        dense = g * max(0.0, cfg.dense_base + self._dense_affinity(self._features, item) + noise)
        fires = (self._episode_rng.random(cfg.m - 1) < sparse_p).astype(np.float64)
        response = np.concatenate([[dense], fires])

        core = self._features[:self._core_dim]
        new_core = np.tanh(0.85 * core
                           + 0.4 * self.fold_map @ self.item_embed[0, item]
                           + 0.1 * response.sum() * self.fold_resp)
        new_g = float(np.clip(g + cfg.engagement_gain * self.quality[item], 0.25, 2.0))
        self._t += 1
        done = self._t >= self._length
        self._features = np.concatenate([new_core, [new_g], [self._t / self._length]])
        return State(self._features.copy(), terminal=done), response, done

    # -- analytic pieces (used by tests and oracles) -------------------------

    def _dense_affinity(self, features, item) -> float:
        pref = self.pref_maps[0] @ features
        return float(np.tanh(pref @ self.item_embed[0, item] + self.appeal[item]))

    def response_probs(self, features, item) -> tuple[float, np.ndarray]:
        """Expected dense response and sparse fire probabilities at (state, item)."""
        cfg = self.config
        g = features[-2]
        dense_mean = g * max(0.0, cfg.dense_base + self._dense_affinity(features, item))
        sparse = np.empty(cfg.m - 1)
        for i in range(1, cfg.m):
            pref = self.pref_maps[i] @ features
            x = np.tanh(pref @ self.item_embed[i, item] + self.sparse_bias[i - 1, item])
            sparse[i - 1] = cfg.sparse_prob_scale * _sigmoid(cfg.sparse_slope * x - cfg.sparse_offset)
        return dense_mean, sparse


class UniformRandomPolicy:
    """Behavior policy assigning 1/n to every item."""

    def __init__(self, n_items: int):
        self.n_items = n_items

    def probs(self, features) -> np.ndarray:
        return np.full(self.n_items, 1.0 / self.n_items)


def run_episode(sim: SessionSimulator, select, episode_seed: int,
                session_id: str | None = None) -> Trajectory:
    """Roll one session.  ``select(features) -> (item, behavior_prob | None)``.

    The terminal next_state is canonicalized to a zero feature vector (its
    value is never bootstrapped), which keeps the text format round trip
    exact.
    """
    state = sim.reset(episode_seed)
    dim = state.features.size
    transitions = []
    done = False
    while not done:
        item, prob = select(state.features)
        if prob is not None and prob <= 0.0:
            raise ValueError(f"behavior policy assigned probability {prob} to item {item}")
        next_state, response, done = sim.step(item)
        action = np.zeros(sim.config.n_items)
        action[item] = 1.0
        transitions.append(Transition(
            state=state,
            action=action,
            response=response,
            next_state=terminal_state(dim) if done else next_state,
            done=done,
            action_index=item,
            behavior_prob=prob,
        ))
        state = next_state
    return Trajectory(transitions, session_id=session_id or f"ep-{episode_seed}")


def generate_offline_dataset(config, behavior=None, n_trajectories: int = 0) -> ReplayDataset:
    """Log sessions under a stochastic behavior policy.

    With a SimConfig the behavior must put positive probability on every
    item; each transition records the probability the behavior assigned to
    the logged action.  With a ReviewDatasetConfig the built-in reviewer
    model is the behavior and the other arguments are ignored.
    """
    if isinstance(config, ReviewDatasetConfig):
        return generate_review_dataset(config)
    if behavior is None:
        raise ValueError("a behavior policy is required for simulator datasets")
    sim = SessionSimulator(config)
    action_rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "behavior-actions")))

    def select(features):
        p = behavior.probs(features)
        if np.any(p <= 0.0):
            bad = int(np.argmin(p))
            raise ValueError(f"behavior policy assigns zero probability to item {bad}")
        item = int(action_rng.choice(config.n_items, p=p))
        return item, float(p[item])

    trajectories = [run_episode(sim, select, episode_seed=k, session_id=f"sim-{k}")
                    for k in range(n_trajectories)]
    meta = {"state_dim": config.state_dim, "n_items": config.n_items, "source": "sim"}
    return ReplayDataset(trajectories, m=config.m, metadata=meta)


# ---------------------------------------------------------------------------
# Review-style corpus: users score items on 7 aspects plus an overall rating.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReviewDatasetConfig:
    n_users: int = 40
    n_items: int = 25
    n_reviews: int = 2400
    min_trajectory_length: int = 20
    history_window: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_reviews) < 1:
            raise ValueError("n_users, n_items and n_reviews must be positive")
        if self.min_trajectory_length < 1 or self.history_window < 1:
            raise ValueError("min_trajectory_length and history_window must be positive")


def review_state_dim(config: ReviewDatasetConfig) -> int:
    return 1 + config.history_window * (1 + REVIEW_M)


def generate_reviews(config: ReviewDatasetConfig) -> list[tuple[int, int, np.ndarray, float]]:
    """Raw (user, item, aspect-ordered scores, behavior_prob) records.

    Aspect scores are integers in 1..5; "business" and "checkin" are missing
    with some probability and encoded as -1, which is why their corpus means
    come out negative.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "reviews")))
    d = 4
    users = rng.normal(size=(config.n_users, d))
    harshness = rng.normal(scale=0.3, size=config.n_users)
    items = rng.normal(size=(config.n_items, d))
    quality = rng.normal(scale=0.7, size=config.n_items)
    aspect_dev = rng.normal(scale=0.4, size=(config.n_items, REVIEW_M - 1))

    affinity = users @ items.T / np.sqrt(d)
    logits = 1.5 * (affinity + quality)
    shifted = logits - logits.max(axis=1, keepdims=True)
    choice_probs = np.exp(shifted)
    choice_probs /= choice_probs.sum(axis=1, keepdims=True)

    records = []
    for _ in range(config.n_reviews):
        u = int(rng.integers(config.n_users))
        h = int(rng.choice(config.n_items, p=choice_probs[u]))
        base = 3.4 + quality[h] + 0.35 * affinity[u, h] - harshness[u]
        scores = np.empty(REVIEW_M)
        for i in range(REVIEW_M - 1):
            scores[i] = np.clip(round(base + aspect_dev[h, i] + rng.normal(scale=0.4)), 1, 5)
        scores[REVIEW_M - 1] = np.clip(
            round(base + 0.5 * aspect_dev[h].mean() + rng.normal(scale=0.3)), 1, 5)
        for i, name in enumerate(REVIEW_ASPECTS[:-1]):
            if name in ("business", "checkin") and rng.random() < 0.55:
                scores[i] = -1.0
        records.append((u, h, scores, float(choice_probs[u, h])))
    return records


def save_review_file(path, config: ReviewDatasetConfig,
                     records: list[tuple[int, int, np.ndarray, float]]) -> None:
    lines = [_REVIEW_HEADER, f"# n_users={config.n_users} n_items={config.n_items}"]
    for u, h, scores, prob in records:
        s = ",".join(f"{v:.17g}" for v in scores)
        lines.append(f"{u},{h},{s},{prob:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _reviews_to_dataset(records, n_users, n_items, min_len, window) -> ReplayDataset:
    by_user: dict[int, list] = {}
    order = []
    for rec in records:
        if rec[0] not in by_user:
            by_user[rec[0]] = []
            order.append(rec[0])
        by_user[rec[0]].append(rec)

    state_dim = 1 + window * (1 + REVIEW_M)
    trajectories = []
    for u in order:
        recs = by_user[u]
        if len(recs) < min_len:
            continue
        # state: user id plus the last `window` reviewed items and their scores
        history: list[tuple[int, np.ndarray]] = []

        def build_state(hist):
            feats = np.zeros(state_dim)
            feats[0] = u / n_users
            for slot, (iid, sc) in enumerate(hist[-window:]):
                off = 1 + slot * (1 + REVIEW_M)
                feats[off] = iid / n_items
                feats[off + 1 : off + 1 + REVIEW_M] = sc / 5.0
            return feats

        transitions = []
        for t, (_, h, scores, prob) in enumerate(recs):
            feats = build_state(history)
            history.append((h, scores))
            done = t == len(recs) - 1
            nxt = terminal_state(state_dim) if done else State(build_state(history))
            # responses are stored main-first: overall rating, then the aspects
            response = np.concatenate([[scores[-1]], scores[:-1]])
            action = np.zeros(n_items)
            action[h] = 1.0
            transitions.append(Transition(
                state=State(feats), action=action, response=response,
                next_state=nxt, done=done, action_index=h, behavior_prob=prob,
            ))
        trajectories.append(Trajectory(transitions, session_id=f"user-{u}"))
    meta = {"state_dim": state_dim, "n_items": n_items, "n_users": n_users,
            "source": "reviews",
            "response_names": "overall," + ",".join(REVIEW_ASPECTS[:-1])}
    return ReplayDataset(trajectories, m=REVIEW_M, metadata=meta)


def generate_review_dataset(config: ReviewDatasetConfig) -> ReplayDataset:
    return _reviews_to_dataset(generate_reviews(config), config.n_users, config.n_items,
                               config.min_trajectory_length, config.history_window)


def load_review_dataset(path, min_trajectory_length: int = 20,
                        history_window: int = 3) -> ReplayDataset:
    """Parse a review file and assemble trajectories, dropping short ones."""
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != _REVIEW_HEADER:
        raise ValueError(f"{path}: missing review-file header")
    fields = dict(part.split("=", 1) for part in lines[1].lstrip("# ").split())
    n_users, n_items = int(fields["n_users"]), int(fields["n_items"])

    records = []
    for lineno, ln in enumerate(lines[2:], start=3):
        parts = ln.split(",")
        if len(parts) not in (2 + REVIEW_M, 3 + REVIEW_M):
            raise ValueError(f"{path}:{lineno}: got {len(parts)} fields, "
                             f"expected {2 + REVIEW_M} or {3 + REVIEW_M}")
        try:
            u, h = int(parts[0]), int(parts[1])
            scores = np.array([float(v) for v in parts[2 : 2 + REVIEW_M]])
            prob = float(parts[2 + REVIEW_M]) if len(parts) == 3 + REVIEW_M else None
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
        if not (0 <= u < n_users and 0 <= h < n_items):
            raise ValueError(f"{path}:{lineno}: user or item id out of range")
        records.append((u, h, scores, prob))
    return _reviews_to_dataset(records, n_users, n_items,
                               min_trajectory_length, history_window)
