"""Mean-field multi-agent actor-critic for the slice allocator.

Each agent owns online/target actor and critic pairs plus a VoI estimator
net.  Three critic wirings are supported: a mean-field embedding of the
other agents (input size independent of N), a joint-input variant (input
affine in N), and a fully independent variant (own observation and action
only).  Actors emit three 7-way categorical heads over multiplicative
adjustment levels; the environment executes sampled or greedy levels while
the actor gradient flows through the softmax relaxation.

Per-agent updates inside one training step are independent given the
sampled batch; the environment step and bill append form a sequential
barrier between steps.  Single-threaded runs are bit-reproducible for a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import N_RESOURCES, normalize
from .mechanism import Bill, ColdStartError

ACTION_LEVELS = (-0.3, -0.2, -0.1, 0.0, 0.1, 0.2, 0.3)
N_LEVELS = len(ACTION_LEVELS)
NOOP_LEVEL = ACTION_LEVELS.index(0.0)

VARIANTS = ("mean_field", "maddpg", "independent")

ACTION_ONE_HOT_DIM = N_RESOURCES * N_LEVELS          # 21
MEAN_FIELD_DIM = ACTION_ONE_HOT_DIM + N_RESOURCES    # 24


class NumericsError(RuntimeError):
    """A training round produced a non-finite quantity."""


@dataclass
class MdpConfig:
    """Hyperparameters; the defaults are the lab's standard setting."""

    gamma: float = 0.99
    learning_rate: float = 0.001
    episodes: int = 1000
    batch_size: int = 128
    buffer_size: int = 10000
    tau: float = 0.005
    action_levels: tuple = ACTION_LEVELS
    temp_start: float = 1.0
    temp_end: float = 0.05
    temp_anneal_frac: float = 0.6
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)
    voi_hidden: tuple = (32,)
    eps_floor: float = 0.01
    grad_steps: int = 1
    utility_scale: float = 150.0  # numeric conditioning only; interfaces stay raw

    def temperature(self, episode: int) -> float:
        """Linear anneal from temp_start to temp_end over the first
        temp_anneal_frac of episodes, then constant."""
        horizon = max(1, int(self.episodes * self.temp_anneal_frac))
        frac = min(episode / horizon, 1.0)
        return self.temp_start + frac * (self.temp_end - self.temp_start)


@dataclass
class ReturnScaling:
    """Affine conditioning between raw VC-unit returns and net outputs.

    Nets predict q_tilde = (1 - gamma) * Q / scale so that targets stay
    O(1) under the standard learning rate; all mechanism-facing values are
    converted back to raw units.
    """

    scale: float
    gamma: float

    def internal_reward(self, reward: float | np.ndarray):
        return (1.0 - self.gamma) * np.asarray(reward, dtype=float) / self.scale

    def q_from_net(self, q_tilde: float | np.ndarray):
        return np.asarray(q_tilde, dtype=float) * self.scale / (1.0 - self.gamma)


# ---------------------------------------------------------------------------
# Observation / action plumbing
# ---------------------------------------------------------------------------

def observe(prev_alloc: np.ndarray, agent: int) -> tuple[np.ndarray, np.ndarray]:
    """Own previous slice column and the mean of all other columns."""
    prev_alloc = np.asarray(prev_alloc, dtype=float)
    o_i = prev_alloc[:, agent].copy()
    n = prev_alloc.shape[1]
    if n == 1:
        return o_i, np.zeros(N_RESOURCES)
    others = np.delete(prev_alloc, agent, axis=1)
    return o_i, others.mean(axis=1)


def mean_others(alloc: np.ndarray) -> np.ndarray:
    """All agents' neighbor-mean observations at once: (N, 3)."""
    alloc = np.asarray(alloc, dtype=float)
    n = alloc.shape[1]
    if n == 1:
        return np.zeros((1, N_RESOURCES))
    total = alloc.sum(axis=1, keepdims=True)
    return ((total - alloc) / (n - 1)).T


def apply_actions(prev: np.ndarray, levels: np.ndarray, eps_floor: float = 0.01,
                  semantics: str = "multiplicative") -> np.ndarray:
    """Adjust the previous allocation by per-entry levels, then renormalize.

    Multiplicative semantics: entry * (1 + level), floored at eps_floor so
    zero allocations stay reachable.  Additive semantics: entry + level
    (levels are proportions of the total resource), clipped at zero by the
    normalization; share-space steps cannot silt up in corner states the
    way proportional rescaling can, which is why the training loop defaults
    to them (see MdpConfig.action_semantics).
    """
    prev = np.asarray(prev, dtype=float)
    levels = np.asarray(levels, dtype=float)
    if semantics == "multiplicative":
        adjusted = np.maximum(prev * (1.0 + levels.T), eps_floor)
    elif semantics == "additive":
        adjusted = prev + levels.T
    else:
        raise ValueError(f"unknown action semantics {semantics!r}")
    return normalize(adjusted)


def reward(bids) -> float:
    """Shared allocator reward: the round's total bid sum."""
    bids = np.asarray(bids, dtype=float)
    if np.any(bids < 0):
        raise ValueError("bids must be >= 0")
    return float(bids.sum())


def one_hot_actions(level_idx: np.ndarray) -> np.ndarray:
    """(..., 3) level indices -> (..., 21) concatenated per-head one-hots."""
    level_idx = np.asarray(level_idx, dtype=int)
    out = np.zeros(level_idx.shape[:-1] + (N_RESOURCES, N_LEVELS))
    np.put_along_axis(out, level_idx[..., None], 1.0, axis=-1)
    return out.reshape(level_idx.shape[:-1] + (ACTION_ONE_HOT_DIM,))


def greedy_levels(logits: np.ndarray) -> np.ndarray:
    """Per-head argmax with a centered tie-break.

    Among tied maxima the index closest to the no-op level wins (then the
    smaller index), so an all-zero-logits actor holds the allocation still.
    """
    heads = logits.reshape(-1, N_RESOURCES, N_LEVELS)
    best = heads.max(axis=-1, keepdims=True)
    tied = heads >= best - 1e-12
    distance = np.abs(np.arange(N_LEVELS) - NOOP_LEVEL) * 2.0
    distance = distance + (np.arange(N_LEVELS) > NOOP_LEVEL) * 0.5  # prefer lower on equal distance
    pick = np.where(tied, distance, np.inf).argmin(axis=-1)
    return pick.reshape(logits.shape[:-1] + (N_RESOURCES,))


def softmax_heads(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    heads = logits.reshape(logits.shape[:-1] + (N_RESOURCES, N_LEVELS)) / temperature
    heads = heads - heads.max(axis=-1, keepdims=True)
    p = np.exp(heads)
    p /= p.sum(axis=-1, keepdims=True)
    return p.reshape(logits.shape)


def sample_levels(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> np.ndarray:
    """Temperature-scaled categorical draw per head; greedy at temperature 0."""
    if temperature <= 0:
        return greedy_levels(logits)
    probs = softmax_heads(logits, temperature).reshape(-1, N_RESOURCES, N_LEVELS)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (probs.cumsum(axis=-1) > u).argmax(axis=-1)
    return idx.reshape(logits.shape[:-1] + (N_RESOURCES,))


def mean_field_embed(obs: np.ndarray, level_idx: np.ndarray, agent: int) -> np.ndarray:
    """Average the one-hot actions and observations of all other agents.

    Returns a 24-vector: three 7-bin blocks (each summing to 1) followed by
    the mean neighbor observation.  With a single agent the embedding is
    all zeros (degenerate neighborhood).
    """
    obs = np.asarray(obs, dtype=float)
    n = obs.shape[1]
    if n == 1:
        return np.zeros(MEAN_FIELD_DIM)
    onehots = one_hot_actions(level_idx)  # (N, 21)
    mask = np.ones(n, dtype=bool)
    mask[agent] = False
    return np.concatenate([onehots[mask].mean(axis=0), obs[:, mask].mean(axis=1)])


def _mean_field_embed_batch(obs: np.ndarray, onehots: np.ndarray, agent: int) -> np.ndarray:
    """Batched embedding: obs (B, 3, N), onehots (B, N, 21) -> (B, 24)."""
    n = obs.shape[2]
    if n == 1:
        return np.zeros((obs.shape[0], MEAN_FIELD_DIM))
    mask = np.ones(n, dtype=bool)
    mask[agent] = False
    return np.concatenate(
        [onehots[:, mask, :].mean(axis=1), obs[:, :, mask].mean(axis=2)], axis=1
    )


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

@dataclass
class AgentNets:
    """Online/target actor-critic pair plus the VoI estimator for one agent."""

    agent_id: int
    actor_online: nn.Mlp
    actor_target: nn.Mlp
    critic_online: nn.Mlp
    critic_target: nn.Mlp
    voi_net: nn.Mlp
    actor_opt: nn.Adam = field(repr=False, default=None)
    critic_opt: nn.Adam = field(repr=False, default=None)
    voi_opt: nn.Adam = field(repr=False, default=None)


def critic_input_dim(variant: str, n_agents: int) -> int:
    if variant == "mean_field":
        return N_RESOURCES + ACTION_ONE_HOT_DIM + MEAN_FIELD_DIM
    if variant == "maddpg":
        return (N_RESOURCES + ACTION_ONE_HOT_DIM) * n_agents
    if variant == "independent":
        return N_RESOURCES + ACTION_ONE_HOT_DIM
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class ReplayBatch:
    """Uniform sample of completed transitions joined across bill records."""

    obs: np.ndarray        # (B, 3, N) previous allocations
    level_idx: np.ndarray  # (B, N, 3)
    rewards: np.ndarray    # (B,)
    next_obs: np.ndarray   # (B, 3, N)
    utilities: np.ndarray  # (B, N) realized utilities for (obs, action)


def sample_replay(bill: Bill, batch_size: int, rng: np.random.Generator,
                  initial_alloc: np.ndarray) -> ReplayBatch:
    """Draw transitions uniformly from the bill's replay window.

    A transition for round t joins record t-1 (previous allocation),
    record t (actions, resulting allocation) and record t+1, which carries
    both the delayed utility report for round t and the bid sum that
    values round t's allocation: bids respond to the published slices one
    round later, so the reward credited to a_t is the t+1 bid sum.  The
    oldest window entry uses the scenario's initial allocation as its
    observation.
    """
    records = bill.records
    if len(records) < 2:
        raise ColdStartError("bill too short to sample transitions")
    # Position 0 is only usable while the window still starts at round 0
    # (otherwise its predecessor has been evicted).
    start = 0 if records[0].round == 0 else 1
    if len(records) - 1 <= start:
        raise ColdStartError("bill too short to sample transitions")
    positions = rng.integers(start, len(records) - 1, size=batch_size)
    obs, idx, rew, nxt, util = [], [], [], [], []
    for p in positions:
        rec = records[p]
        prev_alloc = records[p - 1].allocation if p > 0 else initial_alloc
        obs.append(prev_alloc)
        idx.append(rec.actions)
        rew.append(records[p + 1].reward)
        nxt.append(rec.allocation)
        util.append(records[p + 1].report_utilities)
    return ReplayBatch(
        obs=np.stack(obs),
        level_idx=np.stack(idx),
        rewards=np.array(rew),
        next_obs=np.stack(nxt),
        utilities=np.stack(util),
    )


class MarlAllocator:
    """The NSP/bank learning stack: N agents plus shared plumbing."""

    def __init__(self, n_agents: int, variant: str, config: MdpConfig,
                 rng: np.random.Generator):
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.n_agents = n_agents
        self.variant = variant
        self.config = config
        self.rng = rng
        self.scaling = ReturnScaling(
            scale=config.utility_scale * n_agents, gamma=config.gamma
        )
        actor_dims = [2 * N_RESOURCES, *config.actor_hidden, ACTION_ONE_HOT_DIM]
        critic_dims = [critic_input_dim(variant, n_agents), *config.critic_hidden, 1]
        voi_dims = [N_RESOURCES + ACTION_ONE_HOT_DIM, *config.voi_hidden, 1]
        self.agents: list[AgentNets] = []
        for i in range(n_agents):
            actor = nn.Mlp(actor_dims, rng=rng)
            critic = nn.Mlp(critic_dims, rng=rng)
            voi = nn.Mlp(voi_dims, rng=rng)
            agent = AgentNets(
                agent_id=i,
                actor_online=actor,
                actor_target=actor.copy(),
                critic_online=critic,
                critic_target=critic.copy(),
                voi_net=voi,
            )
            agent.actor_opt = nn.Adam(actor, lr=config.learning_rate)
            agent.critic_opt = nn.Adam(critic, lr=config.learning_rate)
            agent.voi_opt = nn.Adam(voi, lr=config.learning_rate)
            self.agents.append(agent)

    # -- acting ------------------------------------------------------------

    def act(self, agent: AgentNets, o_i: np.ndarray, o_bar_i: np.ndarray,
            temperature: float) -> np.ndarray:
        """Action levels for one agent; greedy when temperature is 0."""
        logits = agent.actor_online.forward(np.concatenate([o_i, o_bar_i]))
        if temperature <= 0:
            idx = greedy_levels(logits)
        else:
            idx = sample_levels(logits, temperature, self.rng)
        return np.array(self.config.action_levels)[idx]

    def decide(self, prev_alloc: np.ndarray, temperature: float) -> np.ndarray:
        """All agents' action level indices for the round: (N, 3)."""
        o_bars = mean_others(prev_alloc)
        idx = np.zeros((self.n_agents, N_RESOURCES), dtype=int)
        for i, agent in enumerate(self.agents):
            x = np.concatenate([prev_alloc[:, i], o_bars[i]])
            logits = agent.actor_online.forward(x)
            if temperature <= 0:
                idx[i] = greedy_levels(logits)
            else:
                idx[i] = sample_levels(logits, temperature, self.rng)
        return idx

    def propose(self, prev_alloc: np.ndarray, level_idx: np.ndarray) -> np.ndarray:
        """Intended allocation from the chosen adjustment levels."""
        levels = np.array(self.config.action_levels)[level_idx]
        return apply_actions(prev_alloc, levels, self.config.eps_floor)

    def estimate_utilities(self, prev_alloc: np.ndarray, level_idx: np.ndarray) -> np.ndarray:
        """VoI-net utility estimates for every agent, clipped at zero."""
        onehots = one_hot_actions(level_idx)
        out = np.zeros(self.n_agents)
        for i, agent in enumerate(self.agents):
            x = np.concatenate([prev_alloc[:, i], onehots[i]])
            out[i] = agent.voi_net.forward(x)[0] * self.config.utility_scale
        return np.clip(out, 0.0, None)

    # -- critic input assembly ----------------------------------------------

    def _critic_input(self, i: int, obs: np.ndarray, onehots: np.ndarray,
                      own_action: np.ndarray | None = None) -> np.ndarray:
        """Batch critic input for agent i.

        obs (B, 3, N); onehots (B, N, 21); own_action optionally overrides
        agent i's one-hot block (used for the actor's relaxed gradient).
        """
        o_i = obs[:, :, i]
        a_i = onehots[:, i, :] if own_action is None else own_action
        if self.variant == "mean_field":
            embed = _mean_field_embed_batch(obs, onehots, i)
            return np.concatenate([o_i, a_i, embed], axis=1)
        if self.variant == "maddpg":
            b = obs.shape[0]
            if own_action is not None:
                joint_a = onehots.copy()
                joint_a[:, i, :] = own_action
            else:
                joint_a = onehots
            return np.concatenate(
                [obs.reshape(b, -1), joint_a.reshape(b, -1)], axis=1
            )
        return np.concatenate([o_i, a_i], axis=1)

    def _target_actions(self, alloc_batch: np.ndarray) -> np.ndarray:
        """Greedy target-actor one-hots for every agent: (B, N, 21)."""
        b = alloc_batch.shape[0]
        o_bars = _batched_mean_others(alloc_batch)
        onehots = np.zeros((b, self.n_agents, ACTION_ONE_HOT_DIM))
        for j, agent in enumerate(self.agents):
            x = np.concatenate([alloc_batch[:, :, j], o_bars[:, j, :]], axis=1)
            logits = agent.actor_target.forward(x)
            onehots[:, j, :] = one_hot_actions(greedy_levels(logits))
        return onehots

    # -- counterfactual welfare estimate -------------------------------------

    def counterfactual_sw_without(self, i: int, obs: np.ndarray,
                                  next_obs: np.ndarray, bill: Bill) -> float:
        """Estimated optimal welfare of the others if agent i got nothing.

        Evaluates the target critic at counterfactual states with agent i's
        observation zeroed and its action held at no-op, then clamps the
        one-step difference into the bill's historical welfare bounds.
        """
        return float(self.counterfactual_all(obs, next_obs, bill)[i])

    def counterfactual_all(self, obs: np.ndarray, next_obs: np.ndarray,
                           bill: Bill) -> np.ndarray:
        """Clamped counterfactual estimates for every agent at once."""
        q1 = self._counterfactual_q_all(obs, first_term=True)
        q2 = self._counterfactual_q_all(next_obs, first_term=False)
        raw = self.scaling.q_from_net(q1) - self.config.gamma * self.scaling.q_from_net(q2)
        out = np.zeros(self.n_agents)
        for i in range(self.n_agents):
            lo, hi = bill.welfare_bounds(i)
            out[i] = min(hi, max(float(raw[i]), lo))
        return out

    def _counterfactual_q_all(self, alloc: np.ndarray, first_term: bool) -> np.ndarray:
        """Target-critic values at the agent-i-gets-nothing states.

        Row i of the internal batch zeroes agent i's observation column;
        every agent's target actor is evaluated once on all N variants.
        For the first Bellman term agent i's own probe action is the no-op;
        for the second it is its target action at the zeroed observation.
        """
        alloc = np.asarray(alloc, dtype=float)
        n = self.n_agents
        obs0 = np.repeat(alloc[None], n, axis=0)  # (variant i, 3, agent j)
        for i in range(n):
            obs0[i, :, i] = 0.0
        if n == 1:
            o_bars = np.zeros((1, 1, N_RESOURCES))
        else:
            totals = obs0.sum(axis=2, keepdims=True)
            o_bars = np.transpose((totals - obs0) / (n - 1), (0, 2, 1))
        idx = np.zeros((n, n, N_RESOURCES), dtype=int)
        for j, agent in enumerate(self.agents):
            x = np.concatenate([obs0[:, :, j], o_bars[:, j, :]], axis=1)
            idx[:, j, :] = greedy_levels(agent.actor_target.forward(x))
        if first_term:
            for i in range(n):
                idx[i, i] = NOOP_LEVEL  # "no adjustment" probe action
        out = np.zeros(n)
        for i in range(n):
            onehots = one_hot_actions(idx[i])
            x = self._critic_input(i, obs0[i][None], onehots[None])
            out[i] = self.agents[i].critic_target.forward(x)[0, 0]
        return out

    # -- training -------------------------------------------------------------

    def train_step(self, batch: ReplayBatch) -> dict:
        """One gradient step for every agent's critic, actor and VoI net.

        Raises NumericsError if any loss goes non-finite.
        """
        cfg = self.config
        b = batch.obs.shape[0]
        onehots = one_hot_actions(batch.level_idx)            # (B, N, 21)
        next_onehots = self._target_actions(batch.next_obs)   # (B, N, 21)
        r_internal = self.scaling.internal_reward(batch.rewards)
        losses = {"critic": [], "actor": [], "voi": []}

        for i, agent in enumerate(self.agents):
            # Critic: TD target from the target networks.
            x_next = self._critic_input(i, batch.next_obs, next_onehots)
            q_next = agent.critic_target.forward(x_next)[:, 0]
            y = r_internal + cfg.gamma * q_next
            x_now = self._critic_input(i, batch.obs, onehots)
            q_now, cache = agent.critic_online.forward_cached(x_now)
            td = q_now[:, 0] - y
            critic_loss = float(np.mean(td**2))
            grads, _ = agent.critic_online.backward(cache, (2.0 * td / b)[:, None])
            agent.critic_opt.step(grads)

            # Actor: ascend the critic through the softmax relaxation.
            o_i = batch.obs[:, :, i]
            o_bar_i = _batched_mean_others(batch.obs)[:, i, :]
            actor_in = np.concatenate([o_i, o_bar_i], axis=1)
            logits, actor_cache = agent.actor_online.forward_cached(actor_in)
            probs = softmax_heads(logits)
            x_actor = self._critic_input(i, batch.obs, onehots, own_action=probs)
            q_val, critic_cache = agent.critic_online.forward_cached(x_actor)
            actor_obj = float(np.mean(q_val))
            _, dx = agent.critic_online.backward(
                critic_cache, np.full((b, 1), 1.0 / b)
            )
            dprobs = self._own_action_grad(i, dx)
            dlogits = _softmax_backward(probs, dprobs)
            actor_grads, _ = agent.actor_online.backward(actor_cache, -dlogits)
            agent.actor_opt.step(actor_grads)

            # VoI net: regress realized utilities on (observation, action).
            voi_in = np.concatenate([o_i, onehots[:, i, :]], axis=1)
            pred, voi_cache = agent.voi_net.forward_cached(voi_in)
            target = batch.utilities[:, i] / cfg.utility_scale
            err = pred[:, 0] - target
            voi_loss = float(np.mean(err**2))
            voi_grads, _ = agent.voi_net.backward(voi_cache, (2.0 * err / b)[:, None])
            agent.voi_opt.step(voi_grads)

            if not (np.isfinite(critic_loss) and np.isfinite(actor_obj)
                    and np.isfinite(voi_loss)):
                raise NumericsError(
                    f"non-finite loss for agent {i}: critic={critic_loss} "
                    f"actor={actor_obj} voi={voi_loss}"
                )
            losses["critic"].append(critic_loss)
            losses["actor"].append(actor_obj)
            losses["voi"].append(voi_loss)

        for agent in self.agents:
            nn.soft_update(agent.actor_target, agent.actor_online, cfg.tau)
            nn.soft_update(agent.critic_target, agent.critic_online, cfg.tau)
        return {k: float(np.mean(v)) for k, v in losses.items()}

    def _own_action_grad(self, i: int, dx: np.ndarray) -> np.ndarray:
        """Slice the critic input gradient down to agent i's action block."""
        if self.variant == "maddpg":
            start = self.n_agents * N_RESOURCES + i * ACTION_ONE_HOT_DIM
        else:
            start = N_RESOURCES
        return dx[:, start:start + ACTION_ONE_HOT_DIM]


def _batched_mean_others(alloc_batch: np.ndarray) -> np.ndarray:
    """(B, 3, N) -> (B, N, 3) neighbor means per agent."""
    n = alloc_batch.shape[2]
    if n == 1:
        return np.zeros((alloc_batch.shape[0], 1, N_RESOURCES))
    total = alloc_batch.sum(axis=2, keepdims=True)
    return np.transpose((total - alloc_batch) / (n - 1), (0, 2, 1))


def _softmax_backward(probs: np.ndarray, dprobs: np.ndarray) -> np.ndarray:
    """Jacobian-vector product of the per-head softmax."""
    p = probs.reshape(-1, N_RESOURCES, N_LEVELS)
    g = dprobs.reshape(-1, N_RESOURCES, N_LEVELS)
    inner = (p * g).sum(axis=-1, keepdims=True)
    return (p * (g - inner)).reshape(probs.shape)
