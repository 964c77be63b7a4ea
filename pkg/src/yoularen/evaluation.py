"""Test-cost evaluation, oracle baselines, distribution shift and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .lti import dlqr
from .plant import (
    NoDisturbance,
    Scenario,
    UncertainPlant,
    make_scenarios,
    sample_scenario,
    _child_seed,
)
from .ren import DT
from .train import QuadraticCost, closed_loop_rollout, stage_cost

__all__ = [
    "EvalReport",
    "test_cost",
    "test_cost_details",
    "lqr_oracle_cost",
    "robust_baseline_cost",
    "shifted_eval",
    "contraction_diagnostic",
    "performance_gap",
    "build_report",
]


def test_cost(plant, policy, M, T, seed, cost, dist=None) -> float:
    """Empirical cost on the fixed seeded test scenario set."""
    return test_cost_details(plant, policy, M, T, seed, cost, dist)[0]


def test_cost_details(plant, policy, M, T, seed, cost, dist=None):
    """(cost, divergence count, scenarios) on the fixed seeded test set."""
    dist = dist if dist is not None else NoDisturbance()
    scenarios = make_scenarios(plant, dist, T, seed=seed, count=M, stream=0)
    with torch.no_grad():
        ell, diverged, _ = closed_loop_rollout(plant, policy, scenarios, T, cost)
    return float(ell.mean()), int(diverged.sum()), scenarios


def _linear_gain_cost(plant: UncertainPlant, scenarios, gains, cost) -> float:
    """Average cost of per-scenario linear state feedback u = -K_i x (numpy
    simulation, same divergence sentinel as the torch rollouts)."""
    ells = []
    for s, K in zip(scenarios, gains):
        Ad, Bd = plant.realize(s.rho)
        T = s.T
        xs = np.empty((T + 1, plant.n_x))
        us = np.empty(T + 1)
        x = s.x0.copy()
        diverged = False
        for t in range(T + 1):
            u = float(-(K @ x)[0])
            xs[t] = x
            us[t] = u
            if t == T:
                break
            drive = u if plant.channel != "input" else u + float(s.w[t, 0])
            x_next = Ad @ x + Bd[:, 0] * drive
            if plant.channel == "state":
                x_next = x_next + s.w[t]
            if np.linalg.norm(x_next) > 1e8:
                diverged = True
                break
            x = x_next
        if diverged:
            ells.append(float("inf"))
            continue
        c = stage_cost(cost,
                       torch.as_tensor(xs, dtype=DT),
                       torch.as_tensor(us[:, None], dtype=DT))
        ells.append(float(c.mean()))
    return float(np.mean(ells))


def lqr_oracle_cost(plant: UncertainPlant, scenarios, cost) -> float:
    """Average cost of the per-scenario LQR controller designed at the true rho
    (a lower bound for any causal policy on quadratic regulation tasks)."""
    if not isinstance(cost, QuadraticCost):
        raise ValueError("the known-rho LQR oracle is defined for quadratic cost only")
    gains = []
    for s in scenarios:
        Ad, Bd = plant.realize(s.rho)
        K, _ = dlqr(Ad, Bd, cost.Q, np.array([[cost.R]]))
        gains.append(K)
    return _linear_gain_cost(plant, scenarios, gains, cost)


def robust_baseline_cost(plant: UncertainPlant, K, scenarios, cost) -> float:
    """Average cost of the fixed robust gain with zero augmentation (v = 0)."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    return _linear_gain_cost(plant, scenarios, [K] * len(scenarios), cost)


def _stratified_scenarios(plant, dist, T, seed, M, n_bins, shift):
    """Scenario set with rho stratified over equal-width bins and the initial
    state box translated by ``shift``."""
    if M < 3 * n_bins:
        raise ValueError(f"need at least {3 * n_bins} scenarios for {n_bins} bins")
    shift = np.zeros(4) if shift is None else np.asarray(shift, dtype=float).reshape(4)
    edges = np.linspace(plant.rho_min, plant.rho_max, n_bins + 1)
    scenarios, bins = [], []
    for i in range(M):
        b = i % n_bins
        child = _child_seed(seed, 1, i)
        rng = np.random.default_rng(child)
        s = sample_scenario(plant, dist, T, rng, seed=child)
        # re-draw rho inside the bin and translate x0, preserving determinism
        rng2 = np.random.default_rng(_child_seed(seed, 2, i))
        s.rho = float(rng2.uniform(edges[b], edges[b + 1]))
        s.x0 = s.x0 + shift
        scenarios.append(s)
        bins.append(b)
    return scenarios, np.asarray(bins), edges


def shifted_eval(plant, policy, shift, M, T, seed, cost,
                 n_bins: int = 10, dist=None):
    """Cost binned by rho under a translated initial-state distribution.

    Returns a list of (bin_center_rho, mean_cost) pairs covering the rho range.
    """
    dist = dist if dist is not None else NoDisturbance()
    scenarios, bins, edges = _stratified_scenarios(
        plant, dist, T, seed, M, n_bins, shift)
    with torch.no_grad():
        ell, _, _ = closed_loop_rollout(plant, policy, scenarios, T, cost)
    ell = ell.numpy()
    curve = []
    for b in range(n_bins):
        center = 0.5 * (edges[b] + edges[b + 1])
        curve.append((float(center), float(np.mean(ell[bins == b]))))
    return curve


def contraction_diagnostic(plant, policy, n_pairs, T, seed, dist=None):
    """Fit exponential decay rates of closed-loop state differences.

    For each pair: draw rho and two initial states, share the disturbance,
    simulate both closed loops and fit log||dX_t|| ~ log c + t log lam over the
    segment where the difference exceeds 1e-12 (dX stacks plant, nominal-model
    and augmentation states).  Pairs with identical initial states are skipped.
    Returns a list of (c, lam) fits.
    """
    dist = dist if dist is not None else NoDisturbance()
    scen_a, scen_b = [], []
    for i in range(n_pairs):
        rng = np.random.default_rng(_child_seed(seed, 3, i))
        rho = float(rng.uniform(plant.rho_min, plant.rho_max))
        x0a = rng.uniform(plant.x0_box[:, 0], plant.x0_box[:, 1])
        x0b = rng.uniform(plant.x0_box[:, 0], plant.x0_box[:, 1])
        w = dist.sample(rng, T, plant.n_w)
        scen_a.append(Scenario(rho=rho, x0=x0a, w=w, seed=i))
        scen_b.append(Scenario(rho=rho, x0=x0b, w=w.copy(), seed=i))
    with torch.no_grad():
        _, _, traj = closed_loop_rollout(
            plant, policy, scen_a + scen_b, T, QuadraticCost(),
            record_state=True)
    states = traj["state"]
    delta = states[:n_pairs] - states[n_pairs:]          # (P, T+1, n_state)
    norms = delta.norm(dim=2).numpy()
    fits = []
    for p in range(n_pairs):
        seq = norms[p]
        keep = seq > 1e-12
        if keep.sum() < 2 or seq[0] <= 1e-12:
            continue  # identical initial states
        t = np.nonzero(keep)[0]
        logn = np.log(seq[keep])
        slope, intercept = np.polyfit(t, logn, 1)
        fits.append((float(np.exp(intercept)), float(np.exp(slope))))
    return fits


def performance_gap(J: float, J_opt: float) -> float:
    """(J - J_opt) / J_opt."""
    if J_opt <= 0:
        raise ValueError("oracle cost must be positive to define a gap")
    return (J - J_opt) / J_opt


@dataclass
class EvalReport:
    """Evaluation summary for one trained policy."""

    J_test: float
    J_robust: float
    J_lqr_oracle: Optional[float] = None
    gap: Optional[float] = None
    divergence_count: int = 0
    per_rho_curve: list = field(default_factory=list)
    contraction_fits: list = field(default_factory=list)
    shifted_curve: Optional[list] = None

    def to_dict(self) -> dict:
        return {
            "J_test": self.J_test,
            "J_robust": self.J_robust,
            "J_lqr_oracle": self.J_lqr_oracle,
            "gap": self.gap,
            "divergence_count": self.divergence_count,
            "per_rho_curve": [[r, c] for r, c in self.per_rho_curve],
            "contraction_fits": [[c, lam] for c, lam in self.contraction_fits],
            "shifted_curve": None if self.shifted_curve is None
            else [[r, c] for r, c in self.shifted_curve],
        }


def build_report(plant, policy, K_base, cost, M, T, seed, dist=None,
                 shift=None, n_bins: int = 10,
                 contraction_pairs: int = 20) -> EvalReport:
    """Assemble the full evaluation report used by the experiment runner."""
    J_test, div_count, scenarios = test_cost_details(
        plant, policy, M, T, seed, cost, dist)
    J_robust = robust_baseline_cost(plant, K_base, scenarios, cost)
    J_lqr = None
    gap = None
    if isinstance(cost, QuadraticCost):
        J_lqr = lqr_oracle_cost(plant, scenarios, cost)
        if J_lqr > 0:
            gap = performance_gap(J_test, J_lqr)
    curve = shifted_eval(plant, policy, None, M, T, seed, cost,
                         n_bins=n_bins, dist=dist)
    shifted = None
    if shift is not None and np.any(np.asarray(shift) != 0):
        shifted = shifted_eval(plant, policy, shift, M, T, seed, cost,
                               n_bins=n_bins, dist=dist)
    fits = contraction_diagnostic(plant, policy, contraction_pairs,
                                  min(T, 300), seed, dist=dist)
    return EvalReport(
        J_test=J_test,
        J_robust=J_robust,
        J_lqr_oracle=J_lqr,
        gap=gap,
        divergence_count=div_count,
        per_rho_curve=curve,
        contraction_fits=fits,
        shifted_curve=shifted,
    )
