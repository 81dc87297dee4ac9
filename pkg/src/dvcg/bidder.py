"""VSP-side bidding strategies.

Truthful bidders report their own utility at the slice they expect (the
previous round's award).  Scripted deviators scale the truthful bid by a
round-indexed factor for incentive probes.  Learned and collusive bidders
run a small deterministic-policy actor-critic on the net profit signal;
the collusive variant emits every coalition member's bid from one joint
actor trained on the coalition's summed profit.

Strategies are independent per VSP and can act in parallel within a
round; a collusive bidder is a single sequential decision point for its
coalition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .env import VspProfile, utility

# Fixed conditioning constants for learner inputs/targets (documented,
# not tuned per profile: the learner must not see private parameters).
OBS_MONEY_SCALE = 300.0
PROFIT_SCALE = 300.0


@dataclass
class BidObs:
    """What one VSP can see when placing a bid."""

    prev_slice: np.ndarray  # own previous award, 3-vector
    prev_tax: float = 0.0
    prev_loan: float = 0.0
    prev_interest: float = 0.0

    def features(self) -> np.ndarray:
        return np.concatenate([
            self.prev_slice,
            [self.prev_tax / OBS_MONEY_SCALE,
             self.prev_loan / OBS_MONEY_SCALE,
             self.prev_interest / OBS_MONEY_SCALE],
        ])


@dataclass
class BidFeedback:
    """Per-round outcome handed back to a strategy after settlement."""

    net_profit: float
    tax: float
    loan: float
    interest: float
    awarded_slice: np.ndarray


@dataclass
class BidderConfig:
    gamma: float = 0.0  # reward is the current round's net profit
    learning_rate: float = 1e-3
    hidden: tuple = (32, 32)
    batch_size: int = 64
    buffer_size: int = 5000
    noise_start: float = 0.3
    noise_end: float = 0.03
    noise_anneal_frac: float = 0.6
    cap_factor: float = 1.5  # bid cap = cap_factor * beta
    update_steps: int = 1


def truthful_bid(profile: VspProfile, expected_slice: np.ndarray) -> float:
    """The VSP's true utility at the slice it expects to be awarded."""
    return utility(profile, expected_slice)


@dataclass(frozen=True)
class DeviationSchedule:
    """Piecewise bid scaling: x1 before round_a, factor_a until round_b,
    factor_b afterwards."""

    round_a: int = 400
    factor_a: float = 1.2
    round_b: int = 650
    factor_b: float = 0.8

    def factor(self, round_index: int) -> float:
        if round_index < self.round_a:
            return 1.0
        if round_index < self.round_b:
            return self.factor_a
        return self.factor_b


def scripted_deviation_bid(base: float, round_index: int,
                           schedule: DeviationSchedule | None = None) -> float:
    """Truthful bid scaled by the schedule's factor for this round."""
    schedule = schedule or DeviationSchedule()
    return base * schedule.factor(round_index)


class Bidder:
    """Base strategy: owns one or more VSP ids and produces their bids."""

    members: tuple[int, ...]

    def bids(self, obs: dict[int, BidObs], round_index: int) -> dict[int, float]:
        raise NotImplementedError

    def feedback(self, fb: dict[int, BidFeedback], round_index: int) -> None:
        pass


class TruthfulBidder(Bidder):
    def __init__(self, profile: VspProfile):
        self.profile = profile
        self.members = (profile.id,)

    def bids(self, obs, round_index):
        return {self.profile.id: truthful_bid(self.profile, obs[self.profile.id].prev_slice)}


class ScriptedDeviationBidder(Bidder):
    def __init__(self, profile: VspProfile, schedule: DeviationSchedule | None = None):
        self.profile = profile
        self.schedule = schedule or DeviationSchedule()
        self.members = (profile.id,)

    def bids(self, obs, round_index):
        base = truthful_bid(self.profile, obs[self.profile.id].prev_slice)
        return {self.profile.id: scripted_deviation_bid(base, round_index, self.schedule)}


class _DdpgCore:
    """Tiny deterministic-policy actor-critic on a replay of
    (observation, raw action, reward) tuples."""

    def __init__(self, obs_dim: int, n_actions: int, config: BidderConfig,
                 horizon: int, rng: np.random.Generator):
        self.config = config
        self.horizon = max(1, horizon)
        self.rng = rng
        self.actor = nn.Mlp([obs_dim, *config.hidden, n_actions],
                            output_activation="sigmoid", rng=rng)
        self.critic = nn.Mlp([obs_dim + n_actions, *config.hidden, 1], rng=rng)
        self.actor_opt = nn.Adam(self.actor, lr=config.learning_rate)
        self.critic_opt = nn.Adam(self.critic, lr=config.learning_rate)
        self.buffer: list[tuple[np.ndarray, np.ndarray, float]] = []

    def noise_sigma(self, round_index: int) -> float:
        cfg = self.config
        frac = min(round_index / max(1, int(self.horizon * cfg.noise_anneal_frac)), 1.0)
        return cfg.noise_start + frac * (cfg.noise_end - cfg.noise_start)

    def raw_action(self, features: np.ndarray, round_index: int,
                   explore: bool = True) -> np.ndarray:
        raw = self.actor.forward(features)
        if explore:
            raw = raw + self.rng.normal(0.0, self.noise_sigma(round_index), size=raw.shape)
        return np.clip(raw, 0.0, 1.0)

    def record(self, features: np.ndarray, raw: np.ndarray, reward: float) -> None:
        if not np.isfinite(reward):
            return  # skip updates on non-finite rewards
        self.buffer.append((features, raw, reward / PROFIT_SCALE))
        if len(self.buffer) > self.config.buffer_size:
            del self.buffer[0]

    def train(self) -> None:
        cfg = self.config
        if len(self.buffer) < cfg.batch_size:
            return
        for _ in range(cfg.update_steps):
            picks = self.rng.integers(0, len(self.buffer), size=cfg.batch_size)
            feats = np.stack([self.buffer[p][0] for p in picks])
            raws = np.stack([self.buffer[p][1] for p in picks])
            rews = np.array([self.buffer[p][2] for p in picks])
            b = len(picks)

            # Critic regression on immediate reward (gamma = 0 by default).
            x = np.concatenate([feats, raws], axis=1)
            q, cache = self.critic.forward_cached(x)
            err = q[:, 0] - rews
            grads, _ = self.critic.backward(cache, (2.0 * err / b)[:, None])
            self.critic_opt.step(grads)

            # Actor ascends the critic at its own actions.
            raw_pi, actor_cache = self.actor.forward_cached(feats)
            xq = np.concatenate([feats, raw_pi], axis=1)
            _, qcache = self.critic.forward_cached(xq)
            _, dx = self.critic.backward(qcache, np.full((b, 1), 1.0 / b))
            dact = dx[:, feats.shape[1]:]
            actor_grads, _ = self.actor.backward(actor_cache, -dact)
            self.actor_opt.step(actor_grads)


class LearnedBidder(Bidder):
    """Single-VSP learner: continuous bid in [0, cap], reward = net profit."""

    def __init__(self, profile: VspProfile, horizon: int,
                 rng: np.random.Generator, config: BidderConfig | None = None):
        self.profile = profile
        self.members = (profile.id,)
        self.config = config or BidderConfig()
        self.cap = self.config.cap_factor * profile.beta
        self.core = _DdpgCore(6, 1, self.config, horizon, rng)
        self._pending: tuple[np.ndarray, np.ndarray] | None = None
        self.explore = True

    def bids(self, obs, round_index):
        feats = obs[self.profile.id].features()
        raw = self.core.raw_action(feats, round_index, explore=self.explore)
        self._pending = (feats, raw)
        return {self.profile.id: float(raw[0] * self.cap)}

    def feedback(self, fb, round_index):
        if self._pending is None:
            return
        feats, raw = self._pending
        self._pending = None
        self.core.record(feats, raw, fb[self.profile.id].net_profit)
        self.core.train()


class CollusiveBidder(Bidder):
    """A coalition sharing one joint actor, trained on summed profit."""

    def __init__(self, profiles: list[VspProfile], horizon: int,
                 rng: np.random.Generator, config: BidderConfig | None = None):
        ids = [p.id for p in profiles]
        if len(set(ids)) != len(ids):
            raise ValueError("coalition members must be distinct")
        if len(ids) < 1:
            raise ValueError("coalition must have at least one member")
        self.profiles = profiles
        self.members = tuple(ids)
        self.config = config or BidderConfig()
        self.caps = np.array([self.config.cap_factor * p.beta for p in profiles])
        self.core = _DdpgCore(6 * len(ids), len(ids), self.config, horizon, rng)
        self._pending = None
        self.explore = True

    def bids(self, obs, round_index):
        feats = np.concatenate([obs[i].features() for i in self.members])
        raw = self.core.raw_action(feats, round_index, explore=self.explore)
        self._pending = (feats, raw)
        return {i: float(r * c) for i, r, c in zip(self.members, raw, self.caps)}

    def feedback(self, fb, round_index):
        if self._pending is None:
            return
        feats, raw = self._pending
        self._pending = None
        total = sum(fb[i].net_profit for i in self.members)
        self.core.record(feats, raw, total)
        self.core.train()


def collusion_fixed_point(true_vois: np.ndarray, coalition: tuple[int, ...]) -> np.ndarray:
    """Diagnostic: the unique solution of the coalition's best-response system.

    Each member's profit-maximizing bid, holding the absolute-value term of
    its expected payoff at zero, satisfies a linear system that is full
    rank for positive values; its solution coincides with truthful bids.
    """
    u = np.asarray(true_vois, dtype=float)
    m = list(coalition)
    total = u.sum()
    outside = total - u[m].sum()
    k = len(m)
    a = np.zeros((k, k))
    b = np.zeros(k)
    for row, i in enumerate(m):
        a[row, row] = total - u[i]
        for col, j in enumerate(m):
            if j != i:
                a[row, col] = -u[i]
        b[row] = u[i] * outside
    return np.linalg.solve(a, b)
