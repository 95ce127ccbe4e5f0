"""Policy-gradient adaptive control for both sides of the game.

A small Gaussian policy (two tanh hidden layers, learnable per-dimension
log-spread, tanh squashing into per-dimension bounds) controls either the
attack knobs or the defense radius. Training is score-function gradient
ascent on discounted returns against a moving-average baseline, one update
per batch of episodes, against a frozen opponent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import InvalidInputError, InvalidSpecError

LOG_STD_MIN, LOG_STD_MAX = -4.0, 1.0
IMPROVEMENT_WINDOW = 50
MOVING_AVG_WINDOW = 20
QUERIES_TO_BETTER_CAP = 50


class GaussianPolicy:
    """Feed-forward Gaussian policy with bounded, squashed actions.

    The network emits a pre-squash mean per action dimension; a draw
    ``z ~ N(mean, exp(log_std))`` is mapped through tanh into the declared
    bounds, so emitted actions can never leave them. Log-likelihoods are
    taken in the pre-squash space, which is the space the score-function
    gradient needs.
    """

    def __init__(self, obs_dim, bounds, rng, hidden=32, gamma=0.95):
        bounds = np.asarray(bounds, dtype=np.float64)
        if bounds.ndim != 2 or bounds.shape[1] != 2:
            raise InvalidInputError("bounds must be (act_dim, 2)")
        if np.any(bounds[:, 1] <= bounds[:, 0]):
            raise InvalidInputError("upper bounds must exceed lower bounds")
        self.obs_dim = int(obs_dim)
        self.bounds = bounds
        self.act_dim = len(bounds)
        self.gamma = float(gamma)
        self.net = nm.make_dense_net(rng, obs_dim, [hidden, hidden],
                                     self.act_dim, hidden_activation="tanh")
        self.log_std = np.full(self.act_dim, -1.0)

    # -- parameter plumbing -------------------------------------------------
    def parameters(self):
        return self.net.parameters() + [self.log_std]

    def copy(self):
        clone = GaussianPolicy.__new__(GaussianPolicy)
        clone.obs_dim = self.obs_dim
        clone.bounds = self.bounds.copy()
        clone.act_dim = self.act_dim
        clone.gamma = self.gamma
        clone.net = self.net.copy()
        clone.log_std = self.log_std.copy()
        return clone

    def save(self, path):
        nm.save_weights(path, self.parameters())

    def load(self, path):
        nm.load_weights(path, self.parameters())
        return self

    # -- acting -------------------------------------------------------------
    def _squash(self, z):
        mid = 0.5 * (self.bounds[:, 0] + self.bounds[:, 1])
        half = 0.5 * (self.bounds[:, 1] - self.bounds[:, 0])
        return mid + half * np.tanh(z)

    def raw_mean(self, obs):
        return nm.forward(self.net, np.asarray(obs, dtype=np.float64))

    def mean_action(self, obs):
        return self._squash(self.raw_mean(obs))

    def sample(self, obs, rng):
        """Draw an action; returns (squashed action, raw draw, log-lik)."""
        mu = self.raw_mean(obs)
        std = np.exp(np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX))
        z = mu + std * rng.standard_normal(self.act_dim)
        logp = float(
            -0.5 * np.sum(((z - mu) / std) ** 2)
            - np.sum(np.log(std)) - 0.5 * self.act_dim * math.log(2 * math.pi))
        return self._squash(z), z, logp


@dataclass
class EpisodeBatchItem:
    """One rollout: per-step observations, raw draws, and rewards."""

    observations: np.ndarray  # (T, obs_dim)
    draws: np.ndarray  # (T, act_dim)
    rewards: np.ndarray  # (T,)


def discounted_returns(rewards, gamma):
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def policy_objective_and_grad(policy, episodes, baseline=0.0):
    """Mean advantage-weighted log-likelihood and its parameter gradient.

    The objective is ``(1/N) sum_i sum_t A_t log pi(z_t | o_t)`` with
    ``A_t = G_t - baseline`` held constant; its exact gradient is the
    REINFORCE ascent direction.
    """
    if not episodes:
        raise InvalidInputError("need at least one episode")
    total = 0.0
    grads = [np.zeros_like(p) for p in policy.parameters()]
    std = np.exp(np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX))
    var = std ** 2
    n = len(episodes)
    for ep in episodes:
        adv = discounted_returns(ep.rewards, policy.gamma) - baseline
        cache = []
        mu = nm.forward(policy.net, ep.observations, cache)
        diff = ep.draws - mu
        logp = (-0.5 * (diff ** 2 / var).sum()
                - len(ep.rewards) * (np.log(std).sum()
                                     + 0.5 * policy.act_dim * math.log(2 * math.pi)))
        total += float((adv * _per_step_logp(diff, std)).sum())
        dmu = adv[:, None] * diff / var
        net_grads, _ = nm.backward(policy.net, cache, dmu)
        flat = []
        for g in net_grads:
            flat.extend(g)
        for acc, g in zip(grads, flat):
            acc += g
        dlog_std = (adv[:, None] * (diff ** 2 / var - 1.0)).sum(axis=0)
        grads[-1] += dlog_std
        del logp
    for g in grads:
        g /= n
    return total / n, grads


def _per_step_logp(diff, std):
    return (-0.5 * (diff ** 2 / std ** 2).sum(axis=1)
            - np.log(std).sum() - 0.5 * len(std) * math.log(2 * math.pi))


@dataclass
class ReinforceTrainer:
    """One-step REINFORCE updates with a moving-average return baseline."""

    lr: float = 0.01
    baseline: float = 0.0
    baseline_beta: float = 0.1
    initialized: bool = False
    skipped: int = 0

    def update(self, policy, episodes):
        returns = [discounted_returns(ep.rewards, policy.gamma) for ep in episodes]
        mean_return = float(np.mean([r[0] for r in returns]))
        if not self.initialized:
            self.baseline = mean_return
            self.initialized = True
        _, grads = policy_objective_and_grad(policy, episodes, self.baseline)
        if any(not np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            return {"skipped": True, "mean_return": mean_return}
        for p, g in zip(policy.parameters(), grads):
            p += self.lr * g
        np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)
        self.baseline = ((1 - self.baseline_beta) * self.baseline
                         + self.baseline_beta * mean_return)
        return {"skipped": False, "mean_return": mean_return}


def reinforce_update(policy, episodes, lr, trainer=None):
    """Single gradient-ascent step on a batch of rollouts."""
    trainer = trainer or ReinforceTrainer(lr=lr)
    trainer.lr = lr
    return trainer.update(policy, episodes)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------


@dataclass
class ProgressTracker:
    """Running episode statistics feeding the attacker observation."""

    budget: int
    g: float
    dim: int
    attack_kind: str
    queries: int = 0
    psi_positive: int = 0
    d: float = 0.0
    location_window: list = field(default_factory=list)
    reduction_window: list = field(default_factory=list)
    improvement_window: list = field(default_factory=list)
    last_reduction: float = 0.0
    last_jumps: int = 1
    last_eval_count: int = 0

    def __post_init__(self):
        self.d = self.g

    def note_queries(self, count, positives, improvements):
        self.queries += count
        self.psi_positive += positives
        self.improvement_window.extend(improvements)
        del self.improvement_window[:-IMPROVEMENT_WINDOW]

    def note_iteration(self, d_after, reduction, jumps=1, eval_count=0):
        self.d = d_after
        self.last_reduction = reduction
        self.last_jumps = max(jumps, 1)
        self.last_eval_count = eval_count
        self.location_window.append(d_after / self.g if self.g > 0 else 0.0)
        del self.location_window[:-MOVING_AVG_WINDOW]
        self.reduction_window.append(reduction / self.g if self.g > 0 else 0.0)
        del self.reduction_window[:-MOVING_AVG_WINDOW]


def build_adversary_observation(tracker):
    """8-dim attacker observation, every field clamped into [0, 1]."""
    g_norm = tracker.g / math.sqrt(tracker.dim)
    d_norm = tracker.d / math.sqrt(tracker.dim)
    i = tracker.queries / tracker.budget if tracker.budget else 0.0
    a = tracker.psi_positive / tracker.queries if tracker.queries else 0.0
    location = tracker.d / tracker.g if tracker.g > 0 else 0.0
    moving = (np.mean(tracker.location_window)
              if tracker.location_window else location)
    slope = moving - location
    if tracker.attack_kind == "hsja":
        freq = 1.0 / max(tracker.last_jumps, 1)
        reduction = tracker.last_reduction / tracker.g if tracker.g > 0 else 0.0
    else:
        freq = (np.mean(tracker.improvement_window)
                if tracker.improvement_window else 0.0)
        reduction = (np.mean(tracker.reduction_window)
                     if tracker.reduction_window else 0.0)
    obs = np.array([i, a, g_norm, d_norm, location, slope, freq, reduction])
    return np.clip(obs, 0.0, 1.0)


# ---------------------------------------------------------------------------
# rewards
# ---------------------------------------------------------------------------

REWARD_VARIANTS = {
    ("adversary", "bags"): {"R1", "R2", "R3", "R4", "R5", "R6", "R7"},
    ("adversary", "hsja"): {"R1", "R2", "R3", "R4", "R5", "R6", "R7", "R8"},
    ("defender", "bags"): {"R1", "R2", "R3", "R4", "R5"},
    ("defender", "hsja"): {"R1", "R2", "R3", "R4", "R5"},
}

DEFAULT_VARIANTS = {
    ("adversary", "bags"): "R7",
    ("adversary", "hsja"): "R7",
    ("defender", "bags"): "R5",
    ("defender", "hsja"): "R2",
}


@dataclass
class RewardSpec:
    side: str
    attack_kind: str
    variant: str = ""

    def __post_init__(self):
        key = (self.side, self.attack_kind)
        if key not in REWARD_VARIANTS:
            raise InvalidSpecError(f"unknown side/attack pair {key}")
        if not self.variant:
            self.variant = DEFAULT_VARIANTS[key]
        if self.variant not in REWARD_VARIANTS[key]:
            raise InvalidSpecError(
                f"variant {self.variant} invalid for {key}")


@dataclass
class RewardContext:
    """Step context; only the fields the chosen variant needs must be set."""

    n: float | None = None  # perturbation reduction this step
    g: float | None = None  # initial gap
    d: float | None = None  # current best distance
    x: float | None = None  # queries since the last improvement, capped
    i: float | None = None  # queries used so far
    t: float | None = None  # query budget
    a: float | None = None  # fraction of positive answers so far
    e: float | None = None  # estimation queries last iteration
    j: float | None = None  # jump trials last iteration
    h: float | None = None  # defender action (radius)
    z: float | None = None  # normalized embedding distance to k0
    psi_t: float | None = None  # +/-1 answer of the last query
    psi_bs: float | None = None  # mean +/-1 over binary-search queries
    s_t: float | None = None  # average step size between recent queries
    dist_gb: float | None = None  # |x_g - x_b|
    dist_gt: float | None = None  # |x_g - x_t|
    benign: bool = False
    correct: bool | None = None


def _need(ctx, *names):
    vals = []
    for name in names:
        v = getattr(ctx, name)
        if v is None:
            raise InvalidSpecError(f"reward context missing field {name!r}")
        vals.append(v)
    return vals


def compute_reward(spec, ctx):
    """Evaluate the selected reward variant on a step context."""
    if ctx.benign:
        h, = _need(ctx, "h")
        if ctx.correct is None:
            raise InvalidSpecError("benign reward needs the correct flag")
        return (1.0 - h) if ctx.correct else -1.0
    if spec.side == "adversary" and spec.attack_kind == "bags":
        return _bags_adversary(spec.variant, ctx)
    if spec.side == "adversary" and spec.attack_kind == "hsja":
        return _hsja_adversary(spec.variant, ctx)
    if spec.side == "defender" and spec.attack_kind == "bags":
        return _bags_defender(spec.variant, ctx)
    return _hsja_defender(spec.variant, ctx)


def _bags_adversary(variant, ctx):
    if variant == "R1":
        n, x, g = _need(ctx, "n", "x", "g")
        return n * min(max(x, 1.0), QUERIES_TO_BETTER_CAP) / g if n > 0 else 0.0
    if variant == "R2":
        n, x, g = _need(ctx, "n", "x", "g")
        return n / (g * (min(max(x, 1.0), QUERIES_TO_BETTER_CAP) + 1.0)) if n > 0 else 0.0
    if variant == "R3":
        d, g, n = _need(ctx, "d", "g", "n")
        before = (1.0 - math.sqrt(min((d + n) / g, 1.0))) ** 2
        after = (1.0 - math.sqrt(min(d / g, 1.0))) ** 2
        return after - before
    if variant == "R4":
        i, = _need(ctx, "i")
        return math.sqrt(i) * _bags_adversary("R2", ctx)
    if variant == "R5":
        i, t, d, g = _need(ctx, "i", "t", "d", "g")
        return abs(math.log(max(d / g, 1e-12))) if i >= t else 0.0
    if variant == "R6":
        i, a = _need(ctx, "i", "a")
        return i ** 0.25 * a
    if variant == "R7":
        return _bags_adversary("R4", ctx) + _bags_adversary("R6", ctx)
    raise InvalidSpecError(f"unknown bags adversary variant {variant}")


def _hsja_adversary(variant, ctx):
    if variant == "R1":
        n, = _need(ctx, "n")
        return 2.0 * n
    if variant == "R2":
        e, = _need(ctx, "e")
        return -e / 1000.0 + _hsja_adversary("R1", ctx)
    if variant == "R3":
        n, d = _need(ctx, "n", "d")
        return 10.0 * n / max(d, 1e-9)
    if variant == "R4":
        d, = _need(ctx, "d")
        return 1.0 / max(d, 1e-9)
    if variant == "R5":
        i, t, g, d = _need(ctx, "i", "t", "g", "d")
        return 2.0 * (g - d) / g if i >= t else 0.0
    if variant == "R6":
        a, j = _need(ctx, "a", "j")
        b = j / 20.0 if j < 3 else 0.0
        return 2.0 * (0.5 - abs(a - 0.5)) + b
    if variant == "R7":
        return _hsja_adversary("R3", ctx) + _hsja_adversary("R6", ctx)
    if variant == "R8":
        return _hsja_adversary("R5", ctx) + _hsja_adversary("R6", ctx)
    raise InvalidSpecError(f"unknown hsja adversary variant {variant}")


def _bags_defender(variant, ctx):
    if variant == "R1":
        g, dist_gb = _need(ctx, "g", "dist_gb")
        return abs(math.log(max(0.1 * g + dist_gb, 1e-12))) * 0.1
    if variant == "R2":
        s_t, = _need(ctx, "s_t")
        return abs(math.log10(max(s_t, 1e-12)))
    if variant == "R3":
        g, dist_gt = _need(ctx, "g", "dist_gt")
        return g / max(dist_gt, 1e-9)
    if variant == "R4":
        psi_t, = _need(ctx, "psi_t")
        return -psi_t
    if variant == "R5":
        h, z = _need(ctx, "h", "z")
        return h - z
    raise InvalidSpecError(f"unknown bags defender variant {variant}")


def _hsja_defender(variant, ctx):
    if variant == "R1":
        g, dist_gb = _need(ctx, "g", "dist_gb")
        return 1.0 - 2.0 * (dist_gb / g)
    if variant == "R2":
        h, z = _need(ctx, "h", "z")
        return h - z
    if variant == "R3":
        psi_bs, = _need(ctx, "psi_bs")
        return _hsja_defender("R2", ctx) - 2.0 * psi_bs
    if variant == "R4":
        psi_bs, = _need(ctx, "psi_bs")
        return -abs(psi_bs)
    if variant == "R5":
        psi_t, = _need(ctx, "psi_t")
        base = _hsja_defender("R2", ctx)
        return base if psi_t > 0 else 2.0 * base
    raise InvalidSpecError(f"unknown hsja defender variant {variant}")


def evasion_reward(alphas):
    """Episode evasion score: one point per unflagged adversarial query."""
    alphas = np.asarray(alphas)
    return float(np.sum(1 - alphas))


def interception_reward(alphas):
    """Defender mirror of the evasion score: one point per flagged query."""
    alphas = np.asarray(alphas)
    return float(np.sum(alphas))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    batches: int = 20
    episodes_per_batch: int = 6
    lr: float = 0.01
    val_every: int = 5
    val_episodes: int = 4
    seed: int = 0


def train_agent(env, policy, schedule, progress=None):
    """Best-response training against the frozen opponent inside ``env``.

    ``env.rollout(policy, rng, stochastic)`` must return an
    :class:`EpisodeBatchItem` whose step rewards are only finalized once the
    opponent's answers to that step are known. Validation uses the
    deterministic mean policy; the best-validation snapshot is returned.
    """
    rng = np.random.default_rng(schedule.seed)
    trainer = ReinforceTrainer(lr=schedule.lr)
    best_policy = policy.copy()
    best_val = -np.inf
    curve = []
    for batch_idx in range(schedule.batches):
        episodes = [env.rollout(policy, rng, stochastic=True)
                    for _ in range(schedule.episodes_per_batch)]
        info = trainer.update(policy, episodes)
        curve.append(info["mean_return"])
        if (batch_idx + 1) % schedule.val_every == 0 \
                or batch_idx == schedule.batches - 1:
            val_rng = np.random.default_rng(schedule.seed + 7919)
            vals = [env.rollout(policy, val_rng, stochastic=False).rewards.sum()
                    for _ in range(schedule.val_episodes)]
            val = float(np.mean(vals))
            if val > best_val:
                best_val = val
                best_policy = policy.copy()
            if progress is not None:
                progress(batch_idx, info["mean_return"], val)
    return best_policy, {"curve": curve, "best_val": best_val}
