"""Local-DP accounting for releasing forward-diffused samples.

A client releases ``sqrt(ab) x + sqrt(1 - ab) z`` once per training point,
which is a Gaussian mechanism with l2-sensitivity ``2 sqrt(ab) C`` and noise
variance ``1 - ab`` (``ab`` is ``alpha_bar`` at the split step ``t0``).  Its
RDP curve is ``gamma * tau`` with ``tau = 2 ab C^2 / (1 - ab)``; converting
with the optimal order gives ``eps = tau + 2 sqrt(tau log(1/delta))``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

MODES = ("per_sample", "per_coordinate")


@dataclass(frozen=True)
class PrivacyQuery:
    t0: int
    schedule: object
    bound: float
    mode: str = "per_sample"
    delta: float = 1e-5
    group_size: int = 1

    def __post_init__(self):
        self.schedule.check_step(self.t0)
        if self.bound < 0:
            raise ValueError("bound must be nonnegative")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if int(self.group_size) != self.group_size or self.group_size < 1:
            raise ValueError("group_size must be a positive integer")


@dataclass(frozen=True)
class PrivacyReport:
    tau: float
    gamma_star: float
    epsilon: float
    epsilon1: float
    epsilon2: float
    alpha_bar: float
    query: PrivacyQuery

    def summary(self) -> str:
        q = self.query
        rows = [
            ("t0", f"{q.t0} of T={q.schedule.T}"),
            ("alpha_bar_t0", f"{self.alpha_bar:.6g}"),
            ("C (l2 per sample)" if q.mode == "per_sample" else "c (per coordinate)", f"{q.bound:g}"),
            ("delta", f"{q.delta:g}"),
            ("group size k", str(q.group_size)),
            ("tau", f"{self.tau:.6g}"),
            ("gamma*", f"{self.gamma_star:.6g}"),
            ("epsilon1", f"{self.epsilon1:.6g}"),
            ("epsilon2", f"{self.epsilon2:.6g}"),
            ("epsilon", f"{self.epsilon:.6g}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}} = {v}" for k, v in rows)


def rdp_tau(t0, bound, schedule) -> float:
    """RDP rate ``tau`` such that the release is ``(gamma, gamma * tau)``-RDP."""
    ab = float(schedule.alpha_bar(schedule.check_step(t0)))
    if bound == 0 or ab == 0.0:
        return 0.0
    return 2.0 * ab * bound * bound / (1.0 - ab)


def rdp_to_dp(gamma, rho, delta) -> float:
    """``(gamma, rho)``-RDP implies ``(rho + log(1/delta)/(gamma-1), delta)``-DP."""
    if not gamma > 1:
        raise ValueError("RDP order gamma must exceed 1")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return rho + math.log(1.0 / delta) / (gamma - 1.0)


def optimal_gamma(tau, delta) -> float:
    """Minimiser of ``gamma * tau + log(1/delta) / (gamma - 1)``; ``inf`` when tau is 0."""
    if tau == 0:
        return math.inf
    return 1.0 + math.sqrt(math.log(1.0 / delta) / tau)


def _constituents(query):
    ab = float(query.schedule.alpha_bar(query.t0))
    tau = rdp_tau(query.t0, query.bound, query.schedule)
    eps2 = math.sqrt(8.0 * query.bound**2 * ab / (1.0 - ab)) if ab < 1 else math.inf
    return ab, tau, eps2


def theorem1_epsilon(query: PrivacyQuery) -> PrivacyReport:
    """Closed-form epsilon of a single release at ``t0``."""
    if query.group_size != 1:
        raise ValueError("use group_epsilon for group_size > 1")
    ab, tau, eps2 = _constituents(query)
    log_inv = math.log(1.0 / query.delta)
    eps = tau + 2.0 * math.sqrt(tau * log_inv)
    return PrivacyReport(tau, optimal_gamma(tau, query.delta), eps, tau, eps2, ab, query)


def group_epsilon(query: PrivacyQuery) -> PrivacyReport:
    """Epsilon for ``k`` coordinates jointly: ``k e1 + k e2 sqrt(5 + k (e1 + e2))``.

    The formula is applied as stated for every ``k``; at ``k = 1`` it is not
    the single-coordinate value.
    """
    if query.mode != "per_coordinate":
        raise ValueError("group privacy is defined over coordinates; use mode='per_coordinate'")
    ab, tau, eps2 = _constituents(query)
    k = query.group_size
    eps1 = tau
    eps = k * eps1 + k * eps2 * math.sqrt(5.0 + k * (eps1 + eps2))
    return PrivacyReport(tau, optimal_gamma(tau, query.delta), eps, eps1, eps2, ab, query)


def account(query: PrivacyQuery) -> PrivacyReport:
    return theorem1_epsilon(query) if query.group_size == 1 else group_epsilon(query)


def epsilon_curve(schedule, bound, delta) -> np.ndarray:
    """Vectorised epsilon for every ``t0`` in ``1..T``."""
    ab = schedule.alpha_bars
    tau = 2.0 * ab * bound * bound / (1.0 - ab)
    return tau + 2.0 * np.sqrt(tau * math.log(1.0 / delta))


def min_t0_for_epsilon(target, bound, delta, schedule) -> Optional[int]:
    """Smallest ``t0`` whose epsilon is at most ``target``; ``None`` if even ``t0 = T`` fails."""
    if not target > 0:
        raise ValueError("target epsilon must be positive")

    def eps(t0):
        return theorem1_epsilon(PrivacyQuery(t0, schedule, bound, delta=delta)).epsilon

    lo, hi = 1, schedule.T
    if eps(hi) > target:
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if eps(mid) <= target:
            hi = mid
        else:
            lo = mid + 1
    return lo


SWEEP_HEADER = ("t0", "alpha_bar", "tau", "gamma_star", "epsilon")


def budget_sweep(schedule, bound, delta, mode="per_sample"):
    """One report per ``t0`` in ``1..T``."""
    return [theorem1_epsilon(PrivacyQuery(t0, schedule, bound, mode, delta)) for t0 in range(1, schedule.T + 1)]


def sweep_csv(reports) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(SWEEP_HEADER)
    for r in reports:
        writer.writerow([r.query.t0, repr(r.alpha_bar), repr(r.tau), repr(r.gamma_star), repr(r.epsilon)])
    return out.getvalue()
