"""Quantized-VCG baseline: full value-tensor bids over 1/M resource units.

Each bidder reports its cumulative value for every unit bundle
(m0, m1, m2), the auctioneer maximizes reported welfare over integer unit
allocations, and winners pay the classic pivot price (the externality they
impose on everyone else).

Winner determination is exact dynamic programming over agents with a
3-D remaining-units state.  The exact path is guarded: beyond desk scale
(the guard below) callers must opt into the documented greedy-plus-swaps
search, which is used for the large-M welfare sweeps together with an
upper bound from the continuous relaxation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Callable, Sequence

import numpy as np

from .env import N_RESOURCES, VspProfile

# Exact DP does N * (M+1)^6 slice work; this cap keeps it at desk scale
# (N=5, M=20 passes; M=100 does not).
EXACT_DP_GUARD = 2 * 10**9


@dataclass(frozen=True)
class QvcgBidTensor:
    """One bidder's cumulative value report over the unit grid.

    entries[m0, m1, m2] is the reported value of holding m_r units of each
    resource; it must be 0 at the origin and nondecreasing along each axis.
    """

    owner: int
    m_units: int
    entries: np.ndarray

    def validate(self) -> None:
        m = self.m_units
        if self.entries.shape != (m + 1,) * N_RESOURCES:
            raise ValueError(
                f"tensor shape {self.entries.shape} != {(m + 1,) * N_RESOURCES}"
            )
        if abs(self.entries[0, 0, 0]) > 1e-12:
            raise ValueError("value at the zero bundle must be 0")
        for axis in range(N_RESOURCES):
            if np.any(np.diff(self.entries, axis=axis) < -1e-9):
                raise ValueError(f"entries decrease along axis {axis}")


def build_truthful_tensor(
    profile: VspProfile,
    m_units: int,
    value_fn: Callable[[Sequence[float]], float] | None = None,
) -> QvcgBidTensor:
    """Evaluate the bidder's true utility on every unit bundle.

    value_fn can inject a different value function (used by tests); it
    defaults to the profile's own utility.
    """
    if m_units < 1:
        raise ValueError("m_units must be >= 1")
    grid = np.arange(m_units + 1) / m_units
    if value_fn is None:
        exponent = (
            profile.xi[0] * grid[:, None, None]
            + profile.xi[1] * grid[None, :, None]
            + profile.xi[2] * grid[None, None, :]
        )
        entries = profile.beta * -np.expm1(-exponent)
    else:
        entries = np.empty((m_units + 1,) * N_RESOURCES)
        for m0, m1, m2 in product(range(m_units + 1), repeat=N_RESOURCES):
            entries[m0, m1, m2] = value_fn((grid[m0], grid[m1], grid[m2]))
    tensor = QvcgBidTensor(owner=profile.id, m_units=m_units, entries=entries)
    tensor.validate()
    return tensor


def scale_tensor(tensor: QvcgBidTensor, factor: float) -> QvcgBidTensor:
    """Misreport family used in collusion searches: scale all values."""
    if factor < 0:
        raise ValueError("scale factor must be >= 0")
    return QvcgBidTensor(tensor.owner, tensor.m_units, tensor.entries * factor)


@dataclass(frozen=True)
class QvcgOutcome:
    """Result of winner determination plus pivot payments."""

    units: np.ndarray        # (N, 3) integer units per bidder
    shares: np.ndarray       # (3, N) fractional allocation, units / M
    reported_welfare: float  # sum of reported values at the chosen units
    payments: np.ndarray     # (N,) pivot payments in value units
    exact: bool


def _solve_exact(entries: list[np.ndarray], m_units: int) -> tuple[np.ndarray, float]:
    """DP over agents; state = remaining units per resource (at-most semantics)."""
    shape = (m_units + 1,) * N_RESOURCES
    tables = []  # f_k over states, kept for backtracking
    f_prev = np.zeros(shape)
    for v in entries:
        f_new = np.full(shape, -np.inf)
        for m0, m1, m2 in product(range(m_units + 1), repeat=N_RESOURCES):
            val = v[m0, m1, m2]
            region = f_new[m0:, m1:, m2:]
            np.maximum(
                region,
                val + f_prev[: shape[0] - m0, : shape[1] - m1, : shape[2] - m2],
                out=region,
            )
        tables.append(f_new)
        f_prev = f_new

    best = float(f_prev[m_units, m_units, m_units])
    # Backtrack, preferring the lexicographically smallest bundle per agent.
    units = np.zeros((len(entries), N_RESOURCES), dtype=int)
    remaining = [m_units] * N_RESOURCES
    for k in range(len(entries) - 1, -1, -1):
        target = tables[k][tuple(remaining)]
        prev = tables[k - 1] if k > 0 else np.zeros(shape)
        found = False
        for m0, m1, m2 in product(
            range(remaining[0] + 1), range(remaining[1] + 1), range(remaining[2] + 1)
        ):
            cand = entries[k][m0, m1, m2] + prev[
                remaining[0] - m0, remaining[1] - m1, remaining[2] - m2
            ]
            if np.isclose(cand, target, rtol=0, atol=1e-9):
                units[k] = (m0, m1, m2)
                remaining = [remaining[0] - m0, remaining[1] - m1, remaining[2] - m2]
                found = True
                break
        if not found:
            raise RuntimeError("DP backtracking failed")
    return units, best


def _solve_greedy(entries: list[np.ndarray], m_units: int) -> tuple[np.ndarray, float]:
    """Greedy unit-by-unit assignment followed by single-unit transfer search.

    Not guaranteed optimal for arbitrary tensors; on the concave value
    families used here it lands within a fraction of a percent of the
    continuous upper bound (asserted in the acceptance suite).
    """
    n = len(entries)
    units = np.zeros((n, N_RESOURCES), dtype=int)

    def value(i: int) -> float:
        return entries[i][tuple(units[i])]

    for r in range(N_RESOURCES):
        for _ in range(m_units):
            best_gain, best_i = -np.inf, -1
            for i in range(n):
                bundle = units[i].copy()
                bundle[r] += 1
                gain = entries[i][tuple(bundle)] - value(i)
                if gain > best_gain + 1e-12:
                    best_gain, best_i = gain, i
            units[best_i][r] += 1

    improved = True
    sweeps = 0
    while improved and sweeps < 200:
        improved = False
        sweeps += 1
        for r in range(N_RESOURCES):
            for i in range(n):
                if units[i][r] == 0:
                    continue
                drop = units[i].copy()
                drop[r] -= 1
                loss = value(i) - entries[i][tuple(drop)]
                for j in range(n):
                    if j == i:
                        continue
                    add = units[j].copy()
                    add[r] += 1
                    gain = entries[j][tuple(add)] - value(j)
                    if gain - loss > 1e-9:
                        units[i][r] -= 1
                        units[j][r] += 1
                        improved = True
                        break
    welfare = float(sum(value(i) for i in range(n)))
    return units, welfare


def winner_determination(
    tensors: Sequence[QvcgBidTensor], method: str = "exact"
) -> tuple[np.ndarray, float, bool]:
    """Maximize reported welfare over unit allocations.

    method: "exact" (guarded DP), "greedy", or "auto" (exact when the
    guard allows, greedy otherwise).
    """
    if not tensors:
        raise ValueError("need at least one tensor")
    m_units = tensors[0].m_units
    if any(t.m_units != m_units for t in tensors):
        raise ValueError("all tensors must share the same unit count")
    entries = [np.asarray(t.entries, dtype=float) for t in tensors]
    cost = len(tensors) * (m_units + 1) ** (2 * N_RESOURCES)
    if method == "auto":
        method = "exact" if cost <= EXACT_DP_GUARD else "greedy"
    if method == "exact":
        if cost > EXACT_DP_GUARD:
            raise ValueError(
                f"exact winner determination cost {cost:.2e} exceeds guard "
                f"{EXACT_DP_GUARD:.0e}; pass method='greedy'"
            )
        units, welfare = _solve_exact(entries, m_units)
        return units, welfare, True
    if method == "greedy":
        units, welfare = _solve_greedy(entries, m_units)
        return units, welfare, False
    raise ValueError(f"unknown method {method!r}")


def qvcg_allocate(
    tensors: Sequence[QvcgBidTensor], method: str = "exact"
) -> QvcgOutcome:
    """Winner determination plus standard pivot payments.

    payment_i = (best reported welfare of the others with i absent)
              - (the others' reported welfare at the chosen allocation).
    Under truthful reporting no bidder pays more than its value for its
    awarded bundle.
    """
    n = len(tensors)
    m_units = tensors[0].m_units
    units, welfare, exact = winner_determination(tensors, method=method)
    own_values = np.array(
        [tensors[i].entries[tuple(units[i])] for i in range(n)]
    )
    payments = np.zeros(n)
    for i in range(n):
        others = [t for j, t in enumerate(tensors) if j != i]
        if not others:
            break
        _, welfare_without, _ = winner_determination(others, method=method)
        others_at_chosen = welfare - own_values[i]
        payments[i] = welfare_without - others_at_chosen
    shares = units.T / m_units
    return QvcgOutcome(
        units=units,
        shares=shares,
        reported_welfare=welfare,
        payments=payments,
        exact=exact,
    )
