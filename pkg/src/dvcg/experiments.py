"""Scenario runners: the full auction loop and the five experiment families.

One DvcgSimulation owns the ground-truth profiles, the learning allocator,
the bank state (pool, bill, profit-rate estimates) and the bidder
strategies, and advances them one auction round at a time.  Runner
functions on top reproduce the lab's experiment protocols: convergence
curves, welfare sweeps, the incentive probe, collusion runs, the
interest-ablation comparison, and information-exchange accounting.

Every runner is a pure function of its arguments in deterministic mode;
independent seeds can run in parallel processes, while the round loop
inside one scenario is sequential.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import bidder as bidder_mod
from . import marl, mechanism
from .env import (
    VspProfile,
    continuous_optimal_welfare,
    gross_profit,
    sample_profiles,
    social_welfare,
    uniform_allocation,
    utility,
)
from .mechanism import (
    Bill,
    BillRecord,
    ColdStartError,
    RoundOutcome,
    WARMUP_ALPHA,
    compute_impact,
    grant_loans,
    issue_currency,
    overbid_noise_scale,
    perturbed_allocation,
)
from .qvcg import build_truthful_tensor, qvcg_allocate, scale_tensor

DEFAULT_SEEDS = (101, 211, 307, 401, 503)

DVCG_VARIANTS = ("mean_field", "maddpg", "independent")

# Public algorithm labels for reports and series files.
VARIANT_LABELS = {
    "mean_field": "DVCG-MFMARL",
    "maddpg": "DVCG-MADDPG",
    "independent": "DVCG-MARL",
}

# Trailing window for smoothed welfare-threshold statistics.
SMOOTH_WINDOW = 25


@dataclass
class MechanismConfig:
    """Bank/NSP-side knobs."""

    warmup_rounds: int = 50
    include_interest: bool = True  # the no-interest ablation switches this off
    # Reference welfare for the overbid-noise trigger: the allocator's
    # estimate alone ("estimate"), or that estimate floored by the best
    # reported welfare in the bill (default), which keeps estimator noise
    # from tripping the punishment on truthful rounds.
    delta_reference: str = "estimate_or_historical"
    bill_capacity: int = 10000


@dataclass
class RoundMetrics:
    round: int
    welfare: float
    reward: float
    pool: float
    sw_star: float
    delta: float
    loss_critic: float
    loss_actor: float
    loss_voi: float
    bids: np.ndarray
    taxes: np.ndarray
    net_profits: np.ndarray
    truthful_values: np.ndarray  # each VSP's true utility at its prior slice


@dataclass
class MetricsSeries:
    """Per-round records plus cumulative counters for one run."""

    rounds: list[RoundMetrics] = field(default_factory=list)
    floats_exchanged: int = 0
    wall_time: float = 0.0  # informational; excluded from determinism checks

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rounds])

    def vsp_column(self, name: str, vsp: int) -> np.ndarray:
        return np.array([getattr(r, name)[vsp] for r in self.rounds])


class DvcgSimulation:
    """The dual-currency auction loop over one scenario."""

    def __init__(
        self,
        profiles: list[VspProfile],
        variant: str,
        bidders: list[bidder_mod.Bidder],
        seed: int,
        mdp_config: marl.MdpConfig | None = None,
        mech_config: MechanismConfig | None = None,
        bill_sink=None,
    ):
        self.profiles = profiles
        self.n = len(profiles)
        self.variant = variant
        self.mdp = mdp_config or marl.MdpConfig()
        self.mech = mech_config or MechanismConfig()
        self._check_partition(bidders)
        self.bidders = bidders

        seq = np.random.SeedSequence(seed)
        net_seed, explore_seed, env_seed, perturb_seed, replay_seed = seq.spawn(5)
        self.allocator = marl.MarlAllocator(
            self.n, variant, self.mdp, np.random.default_rng(net_seed)
        )
        # Rebind so network init and exploration use independent streams.
        self.allocator.rng = np.random.default_rng(explore_seed)
        self.env_rng = np.random.default_rng(env_seed)
        self.perturb_rng = np.random.default_rng(perturb_seed)
        self.replay_rng = np.random.default_rng(replay_seed)

        self.bill = Bill(capacity=self.mech.bill_capacity, sink=bill_sink)
        self.initial_alloc = uniform_allocation(self.n)
        self.prev_alloc = self.initial_alloc.copy()
        self.prev_report: tuple[np.ndarray, np.ndarray] | None = None
        self.alpha_hat = np.full(self.n, WARMUP_ALPHA)
        self.last_outcome: RoundOutcome | None = None
        self.round_index = 0
        self.train_enabled = True
        self.eval_mode = False
        self._last_losses = {"critic": float("nan"), "actor": float("nan"),
                             "voi": float("nan")}
        self._last_pool = 0.0
        self._last_sw_star = 0.0
        self._last_delta = 0.0

    def _check_partition(self, bidders: list[bidder_mod.Bidder]) -> None:
        covered = sorted(i for b in bidders for i in b.members)
        if covered != list(range(self.n)):
            raise ValueError(
                f"bidder members {covered} must partition 0..{self.n - 1}"
            )

    def swap_bidders(self, bidders: list[bidder_mod.Bidder]) -> None:
        """Replace the strategy roster mid-run (e.g. coalition switch-on)."""
        self._check_partition(bidders)
        self.bidders = bidders

    def freeze_for_eval(self) -> None:
        """Stop training and exploration; subsequent rounds are greedy."""
        self.train_enabled = False
        self.eval_mode = True
        for b in self.bidders:
            if hasattr(b, "explore"):
                b.explore = False

    # -- per-round pipeline --------------------------------------------------

    def _collect_bids(self) -> np.ndarray:
        obs = {}
        for i in range(self.n):
            if self.last_outcome is None:
                obs[i] = bidder_mod.BidObs(prev_slice=self.prev_alloc[:, i].copy())
            else:
                out = self.last_outcome
                obs[i] = bidder_mod.BidObs(
                    prev_slice=self.prev_alloc[:, i].copy(),
                    prev_tax=float(out.taxes[i]),
                    prev_loan=float(out.loans[i]),
                    prev_interest=float(out.interests[i]),
                )
        bids = np.zeros(self.n)
        for b in self.bidders:
            for i, x in b.bids(obs, self.round_index).items():
                if not np.isfinite(x) or x < 0:
                    raise marl.NumericsError(
                        f"round {self.round_index}: VSP {i} bid {x} is invalid"
                    )
                bids[i] = x
        return bids

    def step(self) -> RoundOutcome:
        t = self.round_index
        warm = t < self.mech.warmup_rounds
        n = self.n

        bids = self._collect_bids()

        if warm:
            level_idx = np.full((n, 3), marl.NOOP_LEVEL, dtype=int)
        else:
            temp = 0.0 if self.eval_mode else self.mdp.temperature(t)
            level_idx = self.allocator.decide(self.prev_alloc, temp)
        s_star = self.allocator.propose(self.prev_alloc, level_idx)
        u_star = self.allocator.estimate_utilities(self.prev_alloc, level_idx)
        sw_star = float(u_star.sum())

        pool = issue_currency(u_star, t)
        loans = grant_loans(pool, bids)

        reference = sw_star
        if (
            self.mech.delta_reference == "estimate_or_historical"
            and self.bill.max_reported_welfare is not None
        ):
            reference = max(sw_star, self.bill.max_reported_welfare)
        delta = overbid_noise_scale(bids, reference, n)
        s_tilde = perturbed_allocation(s_star, bids, reference, self.perturb_rng)

        interests = np.abs(loans - u_star)
        impacts = np.zeros(n)
        if not warm:
            try:
                estimates = self.allocator.counterfactual_all(
                    self.prev_alloc, s_tilde, self.bill
                )
                for i in range(n):
                    impacts[i] = compute_impact(estimates[i], sw_star - u_star[i])
            except ColdStartError:
                pass  # no reports yet; impact-free round

        if warm:
            taxes = np.zeros(n)
        else:
            interest_part = interests if self.mech.include_interest else np.zeros(n)
            taxes = self.alpha_hat * (impacts + interest_part)

        u_true = np.array(
            [utility(p, s_tilde[:, i]) for i, p in enumerate(self.profiles)]
        )
        g = np.array(
            [gross_profit(p, u_true[i], self.env_rng)
             for i, p in enumerate(self.profiles)]
        )
        deploy = np.array([p.deploy_cost for p in self.profiles])
        net = g - taxes - deploy
        rew = marl.reward(bids)

        record = BillRecord(
            round=t,
            allocation=s_tilde,
            bids=bids,
            loans=loans,
            estimated_utilities=u_star,
            interests=interests,
            impacts=impacts,
            taxes=taxes,
            pool=pool.amount,
            sw_star=sw_star,
            actions=level_idx,
            reward=rew,
            report_round=t - 1 if self.prev_report is not None else -1,
            report_utilities=None if self.prev_report is None else self.prev_report[0],
            report_gross_profits=None if self.prev_report is None else self.prev_report[1],
        )
        self.bill.append(record)

        fb = {
            i: bidder_mod.BidFeedback(
                net_profit=float(net[i]),
                tax=float(taxes[i]),
                loan=float(loans[i]),
                interest=float(interests[i]),
                awarded_slice=s_tilde[:, i].copy(),
            )
            for i in range(n)
        }
        for b in self.bidders:
            b.feedback(fb, t)

        if self.train_enabled and not warm and len(self.bill) >= 3:
            for _ in range(self.mdp.grad_steps):
                batch = marl.sample_replay(
                    self.bill, self.mdp.batch_size, self.replay_rng,
                    self.initial_alloc,
                )
                self._last_losses = self.allocator.train_step(batch)

        # Refresh the bank's profit-rate estimates for the next round.
        for i in range(n):
            try:
                self.alpha_hat[i] = mechanism.estimate_alpha(self.bill, i)
            except ColdStartError:
                self.alpha_hat[i] = WARMUP_ALPHA

        outcome = RoundOutcome(
            allocation=s_tilde,
            bids=bids,
            loans=loans,
            estimated_utilities=u_star,
            interests=interests,
            impacts=impacts,
            taxes=taxes,
            gross_profits=g,
            net_profits=net,
            realized_welfare=float(u_true.sum()),
            realized_utilities=u_true,
        )
        outcome.validate()

        self.prev_alloc = s_tilde
        self.prev_report = (u_true, g)
        self.last_outcome = outcome
        self.round_index += 1
        self._last_pool = pool.amount
        self._last_sw_star = sw_star
        self._last_delta = delta
        return outcome

    def run(self, n_rounds: int, metrics: MetricsSeries | None = None) -> MetricsSeries:
        metrics = metrics if metrics is not None else MetricsSeries()
        start = time.perf_counter()
        for _ in range(n_rounds):
            truthful_values = np.array(
                [utility(p, self.prev_alloc[:, i])
                 for i, p in enumerate(self.profiles)]
            )
            out = self.step()
            metrics.floats_exchanged += self.n  # one bid float per VSP per round
            metrics.rounds.append(
                RoundMetrics(
                    round=self.round_index - 1,
                    welfare=out.realized_welfare,
                    reward=float(out.bids.sum()),
                    pool=self._last_pool,
                    sw_star=self._last_sw_star,
                    delta=self._last_delta,
                    loss_critic=self._last_losses["critic"],
                    loss_actor=self._last_losses["actor"],
                    loss_voi=self._last_losses["voi"],
                    bids=out.bids.copy(),
                    taxes=out.taxes.copy(),
                    net_profits=out.net_profits.copy(),
                    truthful_values=truthful_values,
                )
            )
        metrics.wall_time += time.perf_counter() - start
        return metrics


# ---------------------------------------------------------------------------
# Bidder wiring
# ---------------------------------------------------------------------------

def build_bidders(
    profiles: list[VspProfile],
    seed: int,
    kinds: dict[int, str] | str = "truthful",
    coalition: tuple[int, ...] = (),
    horizon: int = 1000,
    schedule: bidder_mod.DeviationSchedule | None = None,
    config: bidder_mod.BidderConfig | None = None,
) -> list[bidder_mod.Bidder]:
    """Instantiate one strategy per VSP; coalition members share one learner.

    kinds is a single kind for everyone or a per-VSP map; valid kinds are
    truthful, scripted_deviation and learned.
    """
    n = len(profiles)
    if isinstance(kinds, str):
        kinds = {i: kinds for i in range(n)}
    seq = np.random.SeedSequence(seed).spawn(n + 1)
    bidders: list[bidder_mod.Bidder] = []
    if coalition:
        members = [profiles[i] for i in coalition]
        bidders.append(
            bidder_mod.CollusiveBidder(
                members, horizon, np.random.default_rng(seq[n]), config
            )
        )
    for i, p in enumerate(profiles):
        if i in coalition:
            continue
        kind = kinds.get(i, "truthful")
        if kind == "truthful":
            bidders.append(bidder_mod.TruthfulBidder(p))
        elif kind == "scripted_deviation":
            bidders.append(bidder_mod.ScriptedDeviationBidder(p, schedule))
        elif kind == "learned":
            bidders.append(
                bidder_mod.LearnedBidder(
                    p, horizon, np.random.default_rng(seq[i]), config
                )
            )
        else:
            raise ValueError(f"unknown bidder kind {kind!r} for VSP {i}")
    return bidders


# ---------------------------------------------------------------------------
# Curve statistics
# ---------------------------------------------------------------------------

def smoothed(series: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing mean over at most `window` entries ending at each round."""
    series = np.asarray(series, dtype=float)
    out = np.empty_like(series)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    for t in range(len(series)):
        lo = max(0, t - window + 1)
        out[t] = (csum[t + 1] - csum[lo]) / (t + 1 - lo)
    return out


def episodes_to_ratio(welfare: np.ndarray, optimum: float, ratio: float,
                      window: int = SMOOTH_WINDOW) -> float:
    """First episode whose smoothed welfare reaches ratio*optimum (inf if never)."""
    sm = smoothed(welfare, window)
    hits = np.nonzero(sm >= ratio * optimum)[0]
    return float(hits[0]) if hits.size else float("inf")


# ---------------------------------------------------------------------------
# Convergence experiment (training curves per variant)
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceResult:
    variant: str
    seed: int
    metrics: MetricsSeries
    optimum: float
    best_smoothed_ratio: float
    episodes_to_90: float


def run_convergence_single(
    profiles: list[VspProfile],
    variant: str,
    seed: int,
    episodes: int = 1000,
    bidder_kinds: str = "learned",
    mdp_config: marl.MdpConfig | None = None,
    mech_config: MechanismConfig | None = None,
    optimum: float | None = None,
) -> ConvergenceResult:
    mdp = mdp_config or marl.MdpConfig(episodes=episodes)
    bidders = build_bidders(profiles, seed=seed + 1, kinds=bidder_kinds,
                            horizon=episodes)
    sim = DvcgSimulation(profiles, variant, bidders, seed=seed,
                         mdp_config=mdp, mech_config=mech_config)
    metrics = sim.run(episodes)
    if optimum is None:
        _, optimum = continuous_optimal_welfare(profiles)
    welfare = metrics.column("welfare")
    sm = smoothed(welfare)
    return ConvergenceResult(
        variant=variant,
        seed=seed,
        metrics=metrics,
        optimum=optimum,
        best_smoothed_ratio=float(sm.max() / optimum),
        episodes_to_90=episodes_to_ratio(welfare, optimum, 0.90),
    )


def run_convergence(
    n_vsps: int = 10,
    variants: tuple[str, ...] = DVCG_VARIANTS,
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
    episodes: int = 1000,
    profile_seed: int = 42,
    bidder_kinds: str = "learned",
    mdp_config: marl.MdpConfig | None = None,
    mech_config: MechanismConfig | None = None,
) -> dict[str, list[ConvergenceResult]]:
    """Training curves for each variant over paired seeds."""
    profiles = sample_profiles(n_vsps, profile_seed)
    _, optimum = continuous_optimal_welfare(profiles)
    results: dict[str, list[ConvergenceResult]] = {}
    for variant in variants:
        results[variant] = [
            run_convergence_single(
                profiles, variant, seed, episodes, bidder_kinds,
                mdp_config, mech_config, optimum,
            )
            for seed in seeds
        ]
    return results


# ---------------------------------------------------------------------------
# Welfare sweep across population sizes
# ---------------------------------------------------------------------------

@dataclass
class SweepCell:
    label: str
    n_vsps: int
    cumulative_welfare: float
    normalized: float           # vs the continuous optimum bound
    floats_exchanged: int
    welfare_series: np.ndarray  # per evaluation round


def run_welfare_sweep(
    ns: tuple[int, ...] = (10, 20, 30, 40, 50),
    seed: int = DEFAULT_SEEDS[0],
    profile_seed: int = 42,
    episodes: int = 1000,
    eval_rounds: int = 500,
    qvcg_units: tuple[int, ...] = (20, 100),
    bidder_kinds: str = "learned",
    mdp_config: marl.MdpConfig | None = None,
    mech_config: MechanismConfig | None = None,
) -> list[SweepCell]:
    """Cumulative post-training welfare per algorithm and population size."""
    cells: list[SweepCell] = []
    for n in ns:
        profiles = sample_profiles(n, profile_seed)
        _, optimum = continuous_optimal_welfare(profiles)
        for variant in DVCG_VARIANTS:
            mdp = mdp_config or marl.MdpConfig(episodes=episodes)
            bidders = build_bidders(profiles, seed=seed + 1, kinds=bidder_kinds,
                                    horizon=episodes + eval_rounds)
            sim = DvcgSimulation(profiles, variant, bidders, seed=seed,
                                 mdp_config=mdp, mech_config=mech_config)
            sim.run(episodes)
            sim.freeze_for_eval()
            eval_metrics = sim.run(eval_rounds)
            welfare = eval_metrics.column("welfare")
            cells.append(SweepCell(
                label=VARIANT_LABELS[variant],
                n_vsps=n,
                cumulative_welfare=float(welfare.sum()),
                normalized=float(welfare.mean() / optimum),
                floats_exchanged=info_exchange(variant, n, episodes + eval_rounds),
                welfare_series=welfare,
            ))
        for m_units in qvcg_units:
            tensors = [build_truthful_tensor(p, m_units) for p in profiles]
            outcome = qvcg_allocate(tensors, method="auto")
            w = social_welfare(profiles, outcome.shares)
            cells.append(SweepCell(
                label=f"QVCG-{1 / m_units:g}",
                n_vsps=n,
                cumulative_welfare=float(w * eval_rounds),
                normalized=float(w / optimum),
                floats_exchanged=info_exchange("qvcg", n, eval_rounds, m_units),
                welfare_series=np.full(eval_rounds, w),
            ))
    return cells


# ---------------------------------------------------------------------------
# Incentive probe: scripted deviations by one VSP
# ---------------------------------------------------------------------------

@dataclass
class DsicSeedStats:
    seed: int
    mean_truthful: float
    mean_overbid: float
    mean_underbid: float
    margin_overbid: float   # (truthful - overbid) / pooled SE
    margin_underbid: float
    metrics: MetricsSeries


def _phase_mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(x.mean()), float(x.var(ddof=1) / len(x))


def run_dsic(
    n_vsps: int = 5,
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
    rounds: int = 1000,
    profile_seed: int = 42,
    deviator: int = 1,
    schedule: bidder_mod.DeviationSchedule | None = None,
    variant: str = "mean_field",
    mdp_config: marl.MdpConfig | None = None,
    mech_config: MechanismConfig | None = None,
) -> dict:
    """Train with one scripted deviator; compare its per-phase net profit.

    The truthful phase starts after warm-up (warm-up rounds are untaxed and
    would flatter the truthful mean).  The verdict takes per-seed margins
    in pooled-standard-error units and asserts their medians are >= 1.
    """
    schedule = schedule or bidder_mod.DeviationSchedule()
    profiles = sample_profiles(n_vsps, profile_seed)
    mech = mech_config or MechanismConfig()
    per_seed: list[DsicSeedStats] = []
    for seed in seeds:
        kinds = {i: "truthful" for i in range(n_vsps)}
        kinds[deviator] = "scripted_deviation"
        bidders = build_bidders(profiles, seed=seed + 1, kinds=kinds,
                                horizon=rounds, schedule=schedule)
        mdp = mdp_config or marl.MdpConfig(episodes=rounds)
        sim = DvcgSimulation(profiles, variant, bidders, seed=seed,
                             mdp_config=mdp, mech_config=mech)
        metrics = sim.run(rounds)
        profit = metrics.vsp_column("net_profits", deviator)
        truthful = profit[mech.warmup_rounds:schedule.round_a]
        overbid = profit[schedule.round_a:schedule.round_b]
        underbid = profit[schedule.round_b:]
        m_t, v_t = _phase_mean_se(truthful)
        m_a, v_a = _phase_mean_se(overbid)
        m_b, v_b = _phase_mean_se(underbid)
        per_seed.append(DsicSeedStats(
            seed=seed,
            mean_truthful=m_t,
            mean_overbid=m_a,
            mean_underbid=m_b,
            margin_overbid=(m_t - m_a) / np.sqrt(v_t + v_a),
            margin_underbid=(m_t - m_b) / np.sqrt(v_t + v_b),
            metrics=metrics,
        ))
    med_over = float(np.median([s.margin_overbid for s in per_seed]))
    med_under = float(np.median([s.margin_underbid for s in per_seed]))
    return {
        "per_seed": per_seed,
        "median_margin_overbid": med_over,
        "median_margin_underbid": med_under,
        "truthful_dominates_overbid": med_over >= 1.0,
        "truthful_dominates_underbid": med_under >= 1.0,
        "passed": med_over >= 1.0 and med_under >= 1.0,
    }


# ---------------------------------------------------------------------------
# Collusion under the learned mechanism
# ---------------------------------------------------------------------------

@dataclass
class CollusionSeedStats:
    seed: int
    bid_ratio: float            # mean coalition bid / true value over the window
    coalition_profit: float
    truthful_profit: float      # paired control with a truthful coalition
    welfare: float
    truthful_welfare: float
    metrics: MetricsSeries


def _collusion_run_once(
    profiles: list[VspProfile],
    seed: int,
    coalition: tuple[int, ...],
    collude: bool,
    pretrain: int,
    cotrain: int,
    eval_window: int,
    variant: str,
    mdp_config: marl.MdpConfig | None,
    mech_config: MechanismConfig | None,
) -> tuple[MetricsSeries, DvcgSimulation]:
    """Mechanism pre-trains against truthful bidders, then the coalition
    either switches to the joint learner or stays truthful (control)."""
    horizon = pretrain + cotrain
    mdp = mdp_config or marl.MdpConfig(episodes=horizon)
    bidders = build_bidders(profiles, seed=seed + 1, kinds="truthful",
                            horizon=horizon)
    sim = DvcgSimulation(profiles, variant, bidders, seed=seed,
                         mdp_config=mdp, mech_config=mech_config)
    metrics = sim.run(pretrain)
    if collude:
        swapped = build_bidders(profiles, seed=seed + 2, kinds="truthful",
                                coalition=coalition, horizon=cotrain)
        sim.swap_bidders(swapped)
    sim.run(cotrain - eval_window, metrics)
    sim.freeze_for_eval()
    sim.run(eval_window, metrics)
    return metrics, sim


def run_collusion_dvcg(
    n_vsps: int = 5,
    coalition: tuple[int, ...] = (0, 1),
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
    profile_seed: int = 42,
    pretrain: int = 600,
    cotrain: int = 2400,
    eval_window: int = 300,
    include_interest: bool = True,
    variant: str = "mean_field",
    mdp_config: marl.MdpConfig | None = None,
    mech_config: MechanismConfig | None = None,
) -> dict:
    """Joint coalition learner vs a paired truthful control on each seed."""
    profiles = sample_profiles(n_vsps, profile_seed)
    mech = mech_config or MechanismConfig(include_interest=include_interest)
    per_seed: list[CollusionSeedStats] = []
    for seed in seeds:
        metrics, _ = _collusion_run_once(
            profiles, seed, coalition, True, pretrain, cotrain, eval_window,
            variant, mdp_config, mech,
        )
        control, _ = _collusion_run_once(
            profiles, seed, coalition, False, pretrain, cotrain, eval_window,
            variant, mdp_config, mech,
        )
        window = slice(len(metrics.rounds) - eval_window, len(metrics.rounds))
        ratios = []
        for i in coalition:
            bids = metrics.vsp_column("bids", i)[window]
            truth = metrics.vsp_column("truthful_values", i)[window]
            ratios.append(bids / np.maximum(truth, 1e-9))
        profit = sum(metrics.vsp_column("net_profits", i)[window].mean()
                     for i in coalition)
        profit_ctrl = sum(control.vsp_column("net_profits", i)[window].mean()
                          for i in coalition)
        per_seed.append(CollusionSeedStats(
            seed=seed,
            bid_ratio=float(np.mean(ratios)),
            coalition_profit=float(profit),
            truthful_profit=float(profit_ctrl),
            welfare=float(metrics.column("welfare")[window].mean()),
            truthful_welfare=float(control.column("welfare")[window].mean()),
            metrics=metrics,
        ))
    med_ratio = float(np.median([s.bid_ratio for s in per_seed]))
    med_gain = float(np.median([
        (s.coalition_profit - s.truthful_profit) / abs(s.truthful_profit)
        for s in per_seed
    ]))
    med_welfare_drop = float(np.median([
        (s.truthful_welfare - s.welfare) / s.truthful_welfare for s in per_seed
    ]))
    return {
        "per_seed": per_seed,
        "median_bid_ratio": med_ratio,
        "median_profit_gain": med_gain,
        "median_welfare_drop": med_welfare_drop,
        "bids_near_truthful": 0.9 <= med_ratio <= 1.1,
        "no_profitable_collusion": med_gain <= 0.02,
        "passed": (0.9 <= med_ratio <= 1.1) and med_gain <= 0.02,
    }


def run_ablation_nvi(
    n_vsps: int = 5,
    coalition: tuple[int, ...] = (0, 1),
    seeds: tuple[int, ...] = DEFAULT_SEEDS,
    profile_seed: int = 42,
    pretrain: int = 600,
    cotrain: int = 2400,
    eval_window: int = 300,
    variant: str = "mean_field",
    dvcg_result: dict | None = None,
    mdp_config: marl.MdpConfig | None = None,
) -> dict:
    """Paired-seed comparison with the VC-interest term removed from the tax."""
    if dvcg_result is None:
        dvcg_result = run_collusion_dvcg(
            n_vsps, coalition, seeds, profile_seed, pretrain, cotrain,
            eval_window, include_interest=True, variant=variant,
            mdp_config=mdp_config,
        )
    nvi_result = run_collusion_dvcg(
        n_vsps, coalition, seeds, profile_seed, pretrain, cotrain,
        eval_window, include_interest=False, variant=variant,
        mdp_config=mdp_config,
    )
    profit_deltas = [
        nvi.coalition_profit - dv.coalition_profit
        for nvi, dv in zip(nvi_result["per_seed"], dvcg_result["per_seed"])
    ]
    welfare_deltas = [
        nvi.welfare - dv.welfare
        for nvi, dv in zip(nvi_result["per_seed"], dvcg_result["per_seed"])
    ]
    med_profit_delta = float(np.median(profit_deltas))
    med_welfare_delta = float(np.median(welfare_deltas))
    return {
        "dvcg": dvcg_result,
        "nvi": nvi_result,
        "median_profit_delta": med_profit_delta,
        "median_welfare_delta": med_welfare_delta,
        "coalition_gains_without_interest": med_profit_delta > 0.0,
        "welfare_drops_without_interest": med_welfare_delta < 0.0,
        "passed": med_profit_delta > 0.0 and med_welfare_delta < 0.0,
    }


# ---------------------------------------------------------------------------
# Collusion under the quantized baseline: exhaustive misreport search
# ---------------------------------------------------------------------------

def run_collusion_qvcg(
    n_vsps: int = 5,
    m_units: int = 5,
    coalition: tuple[int, ...] = (0, 1),
    profile_seed: int = 42,
    factors: tuple[float, ...] = (0.6, 0.8, 1.0, 1.2, 1.4),
) -> dict:
    """Search per-member tensor scalings for a profitable joint misreport.

    Profits use expected values (zero-mean profit noise): for member i,
    alpha_i * (true utility at the award - pivot payment).  Returns the
    best deviation as a witness when one strictly beats truthful reporting.
    """
    profiles = sample_profiles(n_vsps, profile_seed)
    truthful = [build_truthful_tensor(p, m_units) for p in profiles]

    def evaluate(scalings: dict[int, float]) -> dict:
        tensors = [
            scale_tensor(t, scalings[i]) if i in scalings else t
            for i, t in enumerate(truthful)
        ]
        outcome = qvcg_allocate(tensors, method="exact")
        welfare = social_welfare(profiles, outcome.shares)
        profit = sum(
            profiles[i].alpha
            * (utility(profiles[i], outcome.shares[:, i]) - outcome.payments[i])
            for i in coalition
        )
        return {"scalings": dict(scalings), "welfare": float(welfare),
                "coalition_profit": float(profit)}

    baseline = evaluate({i: 1.0 for i in coalition})
    evaluations = []
    for f0 in factors:
        for f1 in factors:
            scal = {coalition[0]: f0, coalition[1]: f1}
            evaluations.append(evaluate(scal))

    best = max(evaluations, key=lambda e: e["coalition_profit"])
    profitable = best["coalition_profit"] > baseline["coalition_profit"] + 1e-9
    harmful = best["welfare"] < baseline["welfare"] - 1e-9
    return {
        "baseline": baseline,
        "evaluations": evaluations,
        "witness": best if (profitable and harmful) else None,
        "profitable_deviation_exists": profitable,
        "welfare_strictly_drops": harmful,
        "passed": profitable and harmful,
    }


# ---------------------------------------------------------------------------
# Information-exchange accounting
# ---------------------------------------------------------------------------

def info_exchange(variant: str, n_vsps: int, rounds: int,
                  m_units: int | None = None) -> int:
    """Floats exchanged between VSPs and NSP for one run.

    Dual-currency variants send one bid per VSP per round.  The quantized
    baseline sends each VSP's M^3 bid increments once, independent of the
    round count (the cumulative tensor's zero boundary carries no
    information, hence M^3 rather than (M+1)^3).
    """
    if variant in DVCG_VARIANTS or variant in VARIANT_LABELS.values():
        return n_vsps * rounds
    if variant == "qvcg" or variant.startswith("QVCG"):
        if m_units is None:
            raise ValueError("QVCG info exchange needs m_units")
        return n_vsps * m_units**3
    raise ValueError(f"unknown variant {variant!r}")


def table2(
    ns: tuple[int, ...] = (10, 20, 30, 40, 50),
    rounds: int = 500,
    quantizations: tuple[float, ...] = (0.05, 0.01),
) -> dict[str, list[int]]:
    """Information-exchange volumes (floats) per algorithm and N."""
    rows: dict[str, list[int]] = {
        "DVCG-MFMARL": [info_exchange("mean_field", n, rounds) for n in ns]
    }
    for q in quantizations:
        m_units = round(1.0 / q)
        rows[f"QVCG-{q:g}"] = [
            info_exchange("qvcg", n, rounds, m_units) for n in ns
        ]
    return rows
