"""Ground-truth world model for the slice-allocation lab.

Holds the private parameters of each vehicle service provider (VSP), the
saturating utility family, the utility-to-profit mapping, feasibility rules
for 3-resource allocations (bandwidth, compute, cache), and two welfare
oracles used by the test and experiment layers: an exhaustive grid search
and a concave-program solve of the continuous relaxation.

All functions here are pure given an explicit RNG; profiles are immutable,
so everything in this module is safe to call from multiple threads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from math import comb
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

N_RESOURCES = 3

# Slack tolerated on per-resource capacity checks.
FEASIBILITY_EPS = 1e-9

# Grid oracle refuses instances whose joint enumeration exceeds this.
ORACLE_STATE_GUARD = 10**8


@dataclass(frozen=True)
class VspProfile:
    """Private ground truth of one VSP.

    beta scales the utility ceiling, xi holds the three per-resource
    sensitivities, alpha converts utility into gross profit, and
    (noise_mean, noise_std) parameterize the per-round profit noise.
    deploy_cost is a fixed per-round real-currency cost.
    """

    id: int
    beta: float
    xi: tuple[float, float, float]
    alpha: float
    noise_mean: float = 0.0
    noise_std: float = 5.0
    deploy_cost: float = 0.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError(f"profile {self.id}: beta must be > 0, got {self.beta}")
        if len(self.xi) != N_RESOURCES:
            raise ValueError(f"profile {self.id}: xi must have {N_RESOURCES} entries")
        if any(x < 0 for x in self.xi):
            raise ValueError(f"profile {self.id}: xi components must be >= 0")
        if self.alpha <= 0:
            raise ValueError(f"profile {self.id}: alpha must be > 0")
        if self.noise_std < 0:
            raise ValueError(f"profile {self.id}: noise_std must be >= 0")
        if self.deploy_cost < 0:
            raise ValueError(f"profile {self.id}: deploy_cost must be >= 0")


def utility(profile: VspProfile, slice_shares: Sequence[float]) -> float:
    """Utility of one VSP for a 3-vector of resource shares.

    Saturating exponential: beta * (1 - exp(-(xi . s))).  Strictly
    increasing in every component with positive sensitivity, bounded
    above by beta.
    """
    s = np.asarray(slice_shares, dtype=float)
    if s.shape != (N_RESOURCES,):
        raise ValueError(f"slice must be a {N_RESOURCES}-vector, got shape {s.shape}")
    if np.any(s < 0):
        raise ValueError(f"negative slice component in {s}")
    exponent = float(np.dot(profile.xi, s))
    return profile.beta * -math.expm1(-exponent)


def gross_profit(profile: VspProfile, utility_value: float, rng: np.random.Generator) -> float:
    """Gross profit realized from a utility level: alpha * U + noise.

    Draws the noise term once from Normal(noise_mean, noise_std^2);
    deterministic for a given generator state.
    """
    if utility_value < 0:
        raise ValueError(f"utility must be >= 0, got {utility_value}")
    w = profile.noise_mean
    if profile.noise_std > 0:
        w = rng.normal(profile.noise_mean, profile.noise_std)
    return profile.alpha * utility_value + w


def social_welfare(profiles: Sequence[VspProfile], alloc: np.ndarray) -> float:
    """Sum of all VSPs' true utilities at an allocation (columns = VSPs)."""
    alloc = np.asarray(alloc, dtype=float)
    if alloc.shape != (N_RESOURCES, len(profiles)):
        raise ValueError(
            f"allocation shape {alloc.shape} does not match "
            f"({N_RESOURCES}, {len(profiles)}) for {len(profiles)} profiles"
        )
    return sum(utility(p, alloc[:, i]) for i, p in enumerate(profiles))


def check_allocation(alloc: np.ndarray, n_vsps: int | None = None) -> None:
    """Raise if an allocation violates the feasibility invariants."""
    alloc = np.asarray(alloc, dtype=float)
    if alloc.ndim != 2 or alloc.shape[0] != N_RESOURCES:
        raise ValueError(f"allocation must be {N_RESOURCES}xN, got shape {alloc.shape}")
    if n_vsps is not None and alloc.shape[1] != n_vsps:
        raise ValueError(f"expected {n_vsps} columns, got {alloc.shape[1]}")
    if np.any(alloc < 0) or np.any(alloc > 1):
        raise ValueError("allocation entries must lie in [0, 1]")
    sums = alloc.sum(axis=1)
    if np.any(sums > 1 + FEASIBILITY_EPS):
        raise ValueError(f"per-resource sums exceed capacity: {sums}")


def normalize(raw: np.ndarray) -> np.ndarray:
    """Clip a raw 3xN matrix at zero and scale overfull resource rows back.

    Each row is divided by max(1, row sum), so already-feasible rows are
    unchanged and an all-zero row stays all-zero.  Idempotent.
    """
    out = np.clip(np.asarray(raw, dtype=float), 0.0, None)
    sums = out.sum(axis=1, keepdims=True)
    out = out / np.maximum(1.0, sums)
    return out


def uniform_allocation(n_vsps: int) -> np.ndarray:
    """Every VSP gets 1/N of every resource."""
    return np.full((N_RESOURCES, n_vsps), 1.0 / n_vsps)


# ---------------------------------------------------------------------------
# Scenario profile sampling and serialization
# ---------------------------------------------------------------------------

def sample_profiles(
    n_vsps: int,
    seed: int,
    beta_range: tuple[float, float] = (100.0, 200.0),
    xi_range: tuple[float, float] = (0.0, 10.0),
    alpha_range: tuple[float, float] = (1.0, 3.0),
    noise_mean: float = 0.0,
    noise_std: float = 5.0,
    deploy_cost: float = 0.0,
) -> list[VspProfile]:
    """Draw one scenario's ground-truth profiles from a named seed.

    beta ~ U(100, 200) and xi ~ U(0, 10) per resource by default; alpha is
    drawn per VSP from alpha_range.  Profiles should be persisted with the
    run so scenarios stay reproducible and diffable.
    """
    rng = np.random.default_rng(seed)
    profiles = []
    for i in range(n_vsps):
        beta = float(rng.uniform(*beta_range))
        xi = tuple(float(v) for v in rng.uniform(*xi_range, size=N_RESOURCES))
        alpha = float(rng.uniform(*alpha_range))
        profiles.append(
            VspProfile(
                id=i,
                beta=beta,
                xi=xi,
                alpha=alpha,
                noise_mean=noise_mean,
                noise_std=noise_std,
                deploy_cost=deploy_cost,
            )
        )
    return profiles


def profiles_to_json(profiles: Sequence[VspProfile]) -> str:
    """Serialize profiles to the documented JSON scenario format."""
    return json.dumps([asdict(p) for p in profiles], indent=2)


def profiles_from_json(text: str) -> list[VspProfile]:
    """Inverse of profiles_to_json."""
    records = json.loads(text)
    return [
        VspProfile(
            id=int(r["id"]),
            beta=float(r["beta"]),
            xi=tuple(float(v) for v in r["xi"]),
            alpha=float(r["alpha"]),
            noise_mean=float(r.get("noise_mean", 0.0)),
            noise_std=float(r.get("noise_std", 5.0)),
            deploy_cost=float(r.get("deploy_cost", 0.0)),
        )
        for r in records
    ]


# ---------------------------------------------------------------------------
# Welfare oracles
# ---------------------------------------------------------------------------

def _compositions(total: int, parts: int):
    """All nonnegative integer tuples of length `parts` summing to `total`,
    in lexicographically ascending order."""
    if parts == 1:
        yield (total,)
        return
    for head in range(total + 1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


def oracle_enumeration_size(n_vsps: int, grid_units: int) -> int:
    """Joint state count of the grid oracle: (compositions per resource)^3."""
    per_resource = comb(grid_units + n_vsps - 1, n_vsps - 1)
    return per_resource**N_RESOURCES


def oracle_optimal_allocation(
    profiles: Sequence[VspProfile], grid_step: float = 0.05
) -> tuple[np.ndarray, float]:
    """Exhaustive grid search for the welfare-maximizing allocation.

    Enumerates every allocation whose rows are full-budget compositions on
    the 1/grid_step grid (utilities are nondecreasing, so some maximizer
    always spends the whole budget).  Ties break toward the
    lexicographically smallest flattened allocation, which makes the result
    independent of any internal parallelism.

    Raises ValueError when the joint enumeration would exceed
    ORACLE_STATE_GUARD states; use a coarser grid in that case.
    """
    n = len(profiles)
    if n == 0:
        raise ValueError("need at least one profile")
    units = round(1.0 / grid_step)
    if not math.isclose(units * grid_step, 1.0, rel_tol=1e-9):
        raise ValueError(f"grid_step {grid_step} must evenly divide 1")
    size = oracle_enumeration_size(n, units)
    if size > ORACLE_STATE_GUARD:
        raise ValueError(
            f"grid enumeration of {size:.2e} states exceeds guard "
            f"{ORACLE_STATE_GUARD:.0e}; use a coarser grid"
        )

    comps = np.array(list(_compositions(units, n)), dtype=float) / units
    betas = np.array([p.beta for p in profiles])
    xis = np.array([p.xi for p in profiles])  # (N, 3)
    # Per-resource exponent contribution of each composition row: (K, N).
    contrib = [comps * xis[:, r] for r in range(N_RESOURCES)]

    best_welfare = -np.inf
    best_combo = None
    k = comps.shape[0]
    for k0 in range(k):
        base0 = contrib[0][k0]
        for k1 in range(k):
            # Welfare for all k2 at once: (K, N) exponent matrix.
            expo = base0 + contrib[1][k1] + contrib[2]
            welf = (betas * -np.expm1(-expo)).sum(axis=1)
            k2 = int(np.argmax(welf))
            w = float(welf[k2])
            if w > best_welfare:
                best_welfare = w
                best_combo = (k0, k1, k2)

    alloc = np.stack([comps[i] for i in best_combo])
    return alloc, best_welfare


def continuous_optimal_welfare(
    profiles: Sequence[VspProfile], n_starts: int = 4, seed: int = 0
) -> tuple[np.ndarray, float]:
    """Globally optimal welfare of the continuous relaxation.

    The objective is concave and the feasible set is a product of
    simplices, so any KKT point found by SLSQP is a global maximum; a few
    extra starts guard against early termination.  The returned value upper
    bounds every grid-restricted allocation's welfare.
    """
    n = len(profiles)
    betas = np.array([p.beta for p in profiles])
    xis = np.array([p.xi for p in profiles])  # (N, 3)

    def neg_welfare(flat: np.ndarray) -> float:
        s = flat.reshape(N_RESOURCES, n)
        expo = (xis.T * s).sum(axis=0)  # xi_ri * s_ri summed over r
        return -float((betas * -np.expm1(-expo)).sum())

    def neg_grad(flat: np.ndarray) -> np.ndarray:
        s = flat.reshape(N_RESOURCES, n)
        expo = (xis.T * s).sum(axis=0)
        du = betas * np.exp(-expo)  # d utility_i / d exponent_i
        return -(xis.T * du).reshape(-1)

    constraints = [
        {
            "type": "ineq",
            "fun": (lambda flat, r=r: 1.0 - flat.reshape(N_RESOURCES, n)[r].sum()),
            "jac": (
                lambda flat, r=r: -np.eye(N_RESOURCES)[:, r].repeat(n).reshape(-1)
            ),
        }
        for r in range(N_RESOURCES)
    ]
    bounds = [(0.0, 1.0)] * (N_RESOURCES * n)

    rng = np.random.default_rng(seed)
    starts = [uniform_allocation(n).reshape(-1)]
    for _ in range(n_starts - 1):
        raw = rng.random((N_RESOURCES, n))
        starts.append(normalize(raw).reshape(-1))

    best_val = -np.inf
    best_alloc = None
    for x0 in starts:
        res = minimize(
            neg_welfare,
            x0,
            jac=neg_grad,
            method="SLSQP",
            bounds=bounds,
            constraints=constraints,
            options={"maxiter": 500, "ftol": 1e-12},
        )
        val = -res.fun
        if val > best_val:
            best_val = val
            best_alloc = res.x.reshape(N_RESOURCES, n)
    return normalize(best_alloc), float(best_val)
