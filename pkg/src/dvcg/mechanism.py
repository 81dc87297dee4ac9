"""Dual-currency auction mechanism: bank and NSP side operations.

The bank issues virtual currency (VC, denominated in value-of-information
units), grants bid-proportional loans, charges VC interest on the gap
between a loan and the estimated utility, and converts welfare impact plus
interest into a real-currency tax.  Every round is appended to a public
bill that doubles as the learning replay buffer.

Bank and NSP state are mutated only between the phases of a round; the
round pipeline itself is sequential.  Reading the bill while no round is
in flight is safe from any thread.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from .env import VspProfile, normalize

LOAN_BUDGET_TOL = 1e-9

# Records whose reported utility falls below this are excluded from the
# profit-rate estimator (the ratio G/U blows up near zero utility).
ALPHA_UTILITY_FLOOR = 0.1

WARMUP_ALPHA = 1.0


class ColdStartError(RuntimeError):
    """Raised when an estimate is requested before the bill has any usable data."""


@dataclass(frozen=True)
class VcPool:
    """The bank's per-round reserve of issuable VC."""

    amount: float
    round: int

    def __post_init__(self):
        if self.amount < 0:
            raise ValueError(f"pool amount must be >= 0, got {self.amount}")


def issue_currency(voi_estimates: Sequence[float], round_index: int = 0) -> VcPool:
    """Form the round's VC pool from the per-VSP value estimates.

    Negative estimates are clipped at zero; the pool equals the allocator's
    current total-welfare estimate.
    """
    est = np.clip(np.asarray(voi_estimates, dtype=float), 0.0, None)
    return VcPool(amount=float(est.sum()), round=round_index)


def grant_loans(pool: VcPool, bids: Sequence[float]) -> np.ndarray:
    """Split the pool across VSPs in proportion to their bids.

    Budget-exact: the loans sum to the pool amount (within 1e-9) whenever
    any bid is positive.  All-zero bids yield zero loans.
    """
    bids = np.asarray(bids, dtype=float)
    if np.any(bids < 0):
        raise ValueError("bids must be >= 0")
    total = bids.sum()
    if total <= 0:
        return np.zeros_like(bids)
    return pool.amount * bids / total


def overbid_noise_scale(bids: Sequence[float], sw_star: float, n_vsps: int) -> float:
    """Per-entry noise scale triggered when total bids exceed the welfare estimate."""
    return max(float(np.sum(bids)) - sw_star, 0.0) / n_vsps


def perturbed_allocation(
    s_star: np.ndarray,
    bids: Sequence[float],
    sw_star: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Publish the round's allocation, adding overbid-triggered noise.

    When total bids stay at or below the welfare estimate the result is
    exactly normalize(s_star) and no random numbers are drawn.  Otherwise
    i.i.d. Gaussian noise with the overbid scale is added to every entry
    before renormalizing.
    """
    s_star = np.asarray(s_star, dtype=float)
    delta = overbid_noise_scale(bids, sw_star, s_star.shape[1])
    if delta == 0.0:
        return normalize(s_star)
    return normalize(s_star + rng.normal(0.0, delta, size=s_star.shape))


def compute_interest(loan: float, u_star: float) -> float:
    """VC interest owed for mis-estimating one's own value: |loan - U*|."""
    return abs(loan - u_star)


def compute_impact(sw_minus_i_opt: float, sw_minus_i_realized: float) -> float:
    """Welfare loss imposed on the other VSPs, floored at zero.

    The floor keeps taxes nonnegative when learning error makes the
    realized counterfactual exceed the estimated optimum.
    """
    return max(sw_minus_i_opt - sw_minus_i_realized, 0.0)


def compute_tax(alpha_hat: float, impact: float, interest: float) -> float:
    """Real-currency tax: estimated profit rate times (impact + interest)."""
    if alpha_hat <= 0:
        raise ValueError(f"alpha_hat must be > 0, got {alpha_hat}")
    return alpha_hat * (impact + interest)


# ---------------------------------------------------------------------------
# The bill: append-only public ledger, bounded replay window
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BillRecord:
    """One auction round's public ledger entry.

    The financial report carried here is the previous round's (one-round
    reporting delay), so a record is complete at append time and is never
    mutated afterwards.
    """

    round: int
    allocation: np.ndarray          # published slices, 3 x N
    bids: np.ndarray                # VC
    loans: np.ndarray               # VC
    estimated_utilities: np.ndarray  # U*, VC
    interests: np.ndarray           # VC
    impacts: np.ndarray             # VC
    taxes: np.ndarray               # currency
    pool: float                     # VC issued this round
    sw_star: float                  # allocator welfare estimate
    actions: np.ndarray             # N x 3 action level indices
    reward: float                   # total bids
    report_round: int               # round the financial report refers to (-1 if none)
    report_utilities: np.ndarray | None  # U from the delayed report
    report_gross_profits: np.ndarray | None  # G from the delayed report

    def to_dict(self) -> dict:
        """Plain-type view for the line-delimited export (documented field order)."""
        return {
            "round": self.round,
            "allocation": self.allocation.tolist(),
            "bids": self.bids.tolist(),
            "loans": self.loans.tolist(),
            "estimated_utilities": self.estimated_utilities.tolist(),
            "interests": self.interests.tolist(),
            "impacts": self.impacts.tolist(),
            "taxes": self.taxes.tolist(),
            "pool": self.pool,
            "sw_star": self.sw_star,
            "actions": self.actions.tolist(),
            "reward": self.reward,
            "report_round": self.report_round,
            "report_utilities": None if self.report_utilities is None
            else self.report_utilities.tolist(),
            "report_gross_profits": None if self.report_gross_profits is None
            else self.report_gross_profits.tolist(),
        }


class Bill:
    """Append-only round history with a bounded in-memory replay window.

    Eviction from the replay window is strictly FIFO; an optional sink
    callback receives every appended record so the full history can be
    streamed to disk for audit regardless of the window size.
    """

    def __init__(self, capacity: int = 10000, sink=None):
        self.capacity = capacity
        self._records: deque[BillRecord] = deque(maxlen=capacity)
        self._sink = sink
        self._next_round = 0
        # Historical maxima of reported total welfare, with and without
        # each VSP, maintained from the delayed financial reports.
        self.max_reported_welfare: float | None = None
        self.max_reported_welfare_excluding: np.ndarray | None = None
        # Running sums for the per-VSP profit-rate estimator.
        self._ratio_sums: np.ndarray | None = None
        self._ratio_counts: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self._records)

    @property
    def records(self) -> tuple[BillRecord, ...]:
        return tuple(self._records)

    def append(self, record: BillRecord) -> None:
        if record.round != self._next_round:
            raise ValueError(
                f"records must be appended in round order; expected "
                f"{self._next_round}, got {record.round}"
            )
        self._next_round += 1
        self._records.append(record)
        if self._sink is not None:
            self._sink(record)
        if record.report_utilities is not None:
            u = record.report_utilities
            g = record.report_gross_profits
            total = float(u.sum())
            without = total - u
            if self.max_reported_welfare is None:
                self.max_reported_welfare = total
                self.max_reported_welfare_excluding = without.copy()
                self._ratio_sums = np.zeros(len(u))
                self._ratio_counts = np.zeros(len(u), dtype=int)
            else:
                self.max_reported_welfare = max(self.max_reported_welfare, total)
                np.maximum(self.max_reported_welfare_excluding, without,
                           out=self.max_reported_welfare_excluding)
            usable = u > ALPHA_UTILITY_FLOOR
            self._ratio_sums[usable] += g[usable] / u[usable]
            self._ratio_counts[usable] += 1

    def welfare_bounds(self, vsp: int) -> tuple[float, float]:
        """Historical (max welfare excluding vsp, max total welfare)."""
        if self.max_reported_welfare is None:
            raise ColdStartError("no financial reports in the bill yet")
        return (
            float(self.max_reported_welfare_excluding[vsp]),
            float(self.max_reported_welfare),
        )

    def alpha_ratio_stats(self, vsp: int) -> tuple[float, int]:
        if self._ratio_counts is None:
            return 0.0, 0
        return float(self._ratio_sums[vsp]), int(self._ratio_counts[vsp])


def estimate_alpha(bill: Bill, vsp: int) -> float:
    """Least-squares profit rate for one VSP: the mean of reported G/U.

    Records with utility at or below ALPHA_UTILITY_FLOOR are excluded.
    Raises ColdStartError when no qualifying record exists; callers fall
    back to the warm-up default of 1.
    """
    ratio_sum, count = bill.alpha_ratio_stats(vsp)
    if count == 0:
        raise ColdStartError(f"no qualifying financial reports for VSP {vsp}")
    return ratio_sum / count


def export_bill_jsonl(records: Sequence[BillRecord], path) -> None:
    """Write bill records as one JSON object per line (audit artifact)."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_bill_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class RoundOutcome:
    """Full result of one auction round."""

    allocation: np.ndarray
    bids: np.ndarray
    loans: np.ndarray
    estimated_utilities: np.ndarray
    interests: np.ndarray
    impacts: np.ndarray
    taxes: np.ndarray
    gross_profits: np.ndarray
    net_profits: np.ndarray
    realized_welfare: float
    realized_utilities: np.ndarray = field(default=None)

    def validate(self) -> None:
        n = len(self.bids)
        for name in ("loans", "estimated_utilities", "interests", "impacts",
                     "taxes", "gross_profits", "net_profits"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has wrong length")
        if np.any(self.taxes < 0):
            raise ValueError("taxes must be >= 0")
