"""Stabilizing policy classes built around a robust linear base controller.

The Youla policy runs a nominal model in parallel with the plant and feeds the
innovation (measured state minus nominal state) through a gain-bounded
dynamic augmentation Q.  As long as Q's incremental l2-gain stays below the
reciprocal of the model-discrepancy gain alpha, the closed loop is contracting
for every admissible plant parameter (incremental small gain).

The "natural" Ctrl policy feeds the raw state through the augmentation
instead; its budget is the reciprocal of the closed-loop gain beta, which is
typically an order of magnitude smaller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
import torch

from .errors import NumericalError
from .lti import StateSpace, hinf_norm, spectral_radius, dlqr
from .plant import UncertainPlant
from .ren import DT

__all__ = [
    "CARTPOLE_ROBUST_GAIN",
    "BaseController",
    "PolicyState",
    "YoulaPolicy",
    "CtrlPolicy",
    "youla_step",
    "ctrl_step",
    "gdelta_realization",
    "compute_alpha",
    "gamma_from_alpha",
    "thm1_check",
    "verify_base_controller",
    "derive_base_controller",
]

# Robust state-feedback gain for the uncertain cart-pole benchmark (u = -Kx + v).
CARTPOLE_ROBUST_GAIN = np.array([[-7.40, -14.96, -125.82, -27.73]])


def _as_gain(K) -> np.ndarray:
    if isinstance(K, BaseController):
        return K.K
    K = np.asarray(K, dtype=float)
    if K.ndim == 1:
        K = K[None, :]
    if K.ndim != 2 or K.shape[0] != 1:
        raise ValueError(f"expected a 1xn state-feedback gain, got shape {K.shape}")
    return K


@dataclass(frozen=True)
class BaseController:
    """Robust linear state-feedback gain, u = -Kx + v."""

    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "K", _as_gain(self.K))


@dataclass
class PolicyState:
    """Per-rollout mutable state: nominal model state plus augmentation state."""

    x_hat: Optional[torch.Tensor]
    q_state: Any


class YoulaPolicy:
    """Base gain + nominal model + gain-bounded Q acting on the innovation.

    Args:
        plant: uncertain plant supplying the nominal realization.
        q_model: augmentation mapping the innovation (optionally concatenated
            with a reference) to the auxiliary input v; must expose
            ``prepare()``, ``init_state(batch)`` and a ``step`` on the
            prepared object.
        base: robust gain; defaults to the benchmark constant.
        rho_hat: nominal parameter; defaults to the midpoint of the range.
        gamma: recorded gain budget of ``q_model`` (informational).
        n_ref: width of the optional reference channel appended to the
            innovation before it enters ``q_model``.
        xhat0: nominal-model initialization. "zero" starts the model at the
            origin, so the innovation carries the initial condition and the
            augmentation can shape the regulation transient at every rho;
            "observe" copies the measured initial state, zeroing the initial
            innovation (the augmentation then only reacts to model mismatch
            and disturbances).
    """

    kind = "youla"

    def __init__(self, plant: UncertainPlant, q_model, base: BaseController | None = None,
                 rho_hat: float | None = None, gamma: float | None = None,
                 n_ref: int = 0, xhat0: str = "zero"):
        self.plant = plant
        self.base = base if base is not None else BaseController(CARTPOLE_ROBUST_GAIN)
        self.rho_hat = float(rho_hat) if rho_hat is not None \
            else 0.5 * (plant.rho_min + plant.rho_max)
        self.q_model = q_model
        self.gamma = gamma
        self.n_ref = n_ref
        if xhat0 not in ("zero", "observe"):
            raise ValueError(f"unknown xhat0 mode {xhat0!r}")
        self.xhat0 = xhat0
        A_hat, B_hat = plant.realize(self.rho_hat)
        self._K = torch.as_tensor(self.base.K, dtype=DT)
        self._A_cl = torch.as_tensor(A_hat - B_hat @ self.base.K, dtype=DT)
        self._B_hat = torch.as_tensor(B_hat.copy(), dtype=DT)

    @property
    def trainable(self) -> torch.nn.Module:
        return self.q_model

    def prepare(self) -> "_PreparedYoula":
        return _PreparedYoula(self, self.q_model.prepare())

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "K": self.base.K.tolist(),
            "rho_hat": self.rho_hat,
            "gamma": self.gamma,
            "n_ref": self.n_ref,
            "xhat0": self.xhat0,
        }


class _PreparedYoula:
    def __init__(self, policy: YoulaPolicy, q_prepared):
        self.policy = policy
        self.q = q_prepared

    def init_state(self, x0: torch.Tensor) -> PolicyState:
        x_hat = x0.clone() if self.policy.xhat0 == "observe" else torch.zeros_like(x0)
        return PolicyState(
            x_hat=x_hat,
            q_state=self.policy.q_model.init_state(x0.shape[0]),
        )

    def step(self, ps: PolicyState, x: torch.Tensor, r: torch.Tensor | None = None):
        pol = self.policy
        x_tilde = x - ps.x_hat
        q_in = x_tilde if pol.n_ref == 0 else torch.cat(
            [x_tilde, _as_reference(r, x.shape[0], pol.n_ref)], dim=1)
        q_state, v = self.q.step(ps.q_state, q_in)
        u = -(x @ pol._K.T) + v
        x_hat_next = ps.x_hat @ pol._A_cl.T + v @ pol._B_hat.T
        return PolicyState(x_hat=x_hat_next, q_state=q_state), u

    def state_vector(self, ps: PolicyState, x: torch.Tensor) -> torch.Tensor:
        """Full closed-loop state (plant, nominal model, augmentation) stacked
        per batch row; used by contraction diagnostics."""
        parts = [x, ps.x_hat]
        parts.extend(_flatten_q_state(ps.q_state))
        return torch.cat(parts, dim=1)


def _as_reference(r, batch: int, n_ref: int) -> torch.Tensor:
    if r is None:
        return torch.zeros((batch, n_ref), dtype=DT)
    if not torch.is_tensor(r):
        r = torch.as_tensor(np.asarray(r, dtype=float), dtype=DT)
    return r.reshape(batch, n_ref)


def _flatten_q_state(q_state):
    if q_state is None:
        return []
    if torch.is_tensor(q_state):
        return [q_state] if q_state.numel() else []
    return [t for t in q_state if t.numel()]


class CtrlPolicy:
    """Base gain plus an augmentation acting directly on the measured state."""

    kind = "ctrl"

    def __init__(self, plant: UncertainPlant, c_model, base: BaseController | None = None,
                 beta: float | None = None):
        self.plant = plant
        self.base = base if base is not None else BaseController(CARTPOLE_ROBUST_GAIN)
        self.c_model = c_model
        self.beta = beta
        self._K = torch.as_tensor(self.base.K, dtype=DT)

    @property
    def trainable(self) -> torch.nn.Module:
        return self.c_model

    def prepare(self) -> "_PreparedCtrl":
        return _PreparedCtrl(self, self.c_model.prepare())

    def to_config(self) -> dict:
        return {"kind": self.kind, "K": self.base.K.tolist(), "beta": self.beta}


class _PreparedCtrl:
    def __init__(self, policy: CtrlPolicy, c_prepared):
        self.policy = policy
        self.c = c_prepared

    def init_state(self, x0: torch.Tensor) -> PolicyState:
        return PolicyState(
            x_hat=None, q_state=self.policy.c_model.init_state(x0.shape[0]))

    def step(self, ps: PolicyState, x: torch.Tensor, r=None):
        c_state, v = self.c.step(ps.q_state, x)
        u = -(x @ self.policy._K.T) + v
        return PolicyState(x_hat=None, q_state=c_state), u

    def state_vector(self, ps: PolicyState, x: torch.Tensor) -> torch.Tensor:
        parts = [x]
        parts.extend(_flatten_q_state(ps.q_state))
        return torch.cat(parts, dim=1)


def youla_step(policy: YoulaPolicy, ps: PolicyState, x_t, r_t=None):
    """Single policy update (convenience wrapper; rollouts should reuse
    ``policy.prepare()`` so weight construction stays out of the time loop)."""
    x_t = x_t if torch.is_tensor(x_t) else torch.as_tensor(
        np.asarray(x_t, dtype=float), dtype=DT)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = x_t[None, :]
    ps_next, u = policy.prepare().step(ps, x_t, r_t)
    return ps_next, (u[0] if squeeze else u)


def ctrl_step(policy: CtrlPolicy, ps: PolicyState, x_t):
    x_t = x_t if torch.is_tensor(x_t) else torch.as_tensor(
        np.asarray(x_t, dtype=float), dtype=DT)
    squeeze = x_t.ndim == 1
    if squeeze:
        x_t = x_t[None, :]
    ps_next, u = policy.prepare().step(ps, x_t)
    return ps_next, (u[0] if squeeze else u)


# ---------------------------------------------------------------------------
# stability-budget computations
# ---------------------------------------------------------------------------


def gdelta_realization(plant: UncertainPlant, K, rho: float, rho_hat: float) -> StateSpace:
    """Discrepancy system from the auxiliary input v to the innovation x - x_hat.

    Stacks the true closed loop at rho and the nominal closed loop at rho_hat;
    the realization vanishes identically when rho == rho_hat.
    """
    K = _as_gain(K)
    Ad, Bd = plant.realize(rho)
    Adh, Bdh = plant.realize(rho_hat)
    A_true = Ad - Bd @ K
    A_nom = Adh - Bdh @ K
    for label, M, r in (("rho", A_true, rho), ("rho_hat", A_nom, rho_hat)):
        if spectral_radius(M) >= 1.0:
            raise NumericalError(
                f"closed loop unstable at {label}={r}: K does not stabilize"
            )
    n = plant.n_x
    A = np.block([[A_true, np.zeros((n, n))], [np.zeros((n, n)), A_nom]])
    B = np.vstack([Bd, Bdh])
    C = np.hstack([np.eye(n), -np.eye(n)])
    D = np.zeros((n, B.shape[1]))
    return StateSpace(A, B, C, D, ts=plant.ts)


def compute_alpha(
    plant: UncertainPlant,
    K,
    rho_hat: float | None = None,
    grid_size: int = 50,
    tol: float = 1e-6,
) -> float:
    """Worst-case incremental l2-gain of the discrepancy system over a rho grid."""
    K = _as_gain(K)
    rho_hat = rho_hat if rho_hat is not None \
        else 0.5 * (plant.rho_min + plant.rho_max)
    alpha = 0.0
    for rho in plant.rho_grid(grid_size):
        try:
            sys_d = gdelta_realization(plant, K, rho, rho_hat)
        except NumericalError as exc:
            raise NumericalError(f"alpha sweep failed at rho={rho}: {exc}") from exc
        if abs(rho - rho_hat) < 1e-12:
            continue
        alpha = max(alpha, hinf_norm(sys_d, method="bisect", tol=tol))
    return alpha


def gamma_from_alpha(alpha: float, margin: float = 1.0 - 1e-6) -> float:
    """Admissible augmentation gain gamma = margin / alpha (small-gain budget)."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not 0 < margin < 1:
        raise ValueError(f"margin must lie in (0, 1), got {margin}")
    return margin / alpha


def _sym(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = M[None, None]
    return 0.5 * (M + M.T)


def thm1_check(plant_iqc, q_iqc):
    """Stability condition for the interconnection of the discrepancy system and
    the augmentation.

    ``plant_iqc``: (Q_xx, Q_zz, S_vx, S_wz, R_vv, R_ww) block-diagonal IQC of
    the discrepancy system; ``q_iqc``: (Q_bar, S_bar, R_bar) of the
    augmentation.  Returns ``(holds, margin)`` where margin is the largest
    eigenvalue of the coupling matrix (negative means the closed loop is
    contracting with a finite disturbance-to-performance Lipschitz bound).
    """
    Q_xx, Q_zz, S_vx, S_wz, R_vv, R_ww = plant_iqc
    Q_bar, S_bar, R_bar = q_iqc
    Q_xx, Q_zz, R_vv, R_ww = map(_sym, (Q_xx, Q_zz, R_vv, R_ww))
    Q_bar, R_bar = _sym(Q_bar), _sym(R_bar)
    S_vx = np.atleast_2d(np.asarray(S_vx, dtype=float))
    S_bar = np.atleast_2d(np.asarray(S_bar, dtype=float))

    for name, M in (("Q_xx", Q_xx), ("Q_zz", Q_zz), ("Q_bar", Q_bar)):
        if M.size and np.max(np.linalg.eigvalsh(M)) > 1e-10 * max(1.0, np.linalg.norm(M)):
            raise ValueError(f"{name} must be negative semidefinite")
    for name, M in (("R_vv", R_vv), ("R_ww", R_ww), ("R_bar", R_bar)):
        if M.size and np.min(np.linalg.eigvalsh(M)) < -1e-10 * max(1.0, np.linalg.norm(M)):
            raise ValueError(f"{name} must be positive semidefinite")

    n_x = Q_xx.shape[0]
    n_v = R_vv.shape[0]
    if R_bar.shape != (n_x, n_x):
        raise ValueError(
            f"R_bar must match the innovation dimension {n_x}, got {R_bar.shape}")
    if Q_bar.shape != (n_v, n_v):
        raise ValueError(
            f"Q_bar must match the augmentation output dimension {n_v}, "
            f"got {Q_bar.shape}")
    if S_vx.shape[-2:] != (n_v, n_x) or S_bar.shape[-2:] != (n_x, n_v):
        raise ValueError("cross-term blocks S_vx / S_bar have inconsistent shapes")

    if n_v == 0:
        M = Q_xx + R_bar
    else:
        M = np.block([
            [Q_xx + R_bar, S_vx.T + S_bar],
            [S_vx + S_bar.T, R_vv + Q_bar],
        ])
    margin = float(np.max(np.linalg.eigvalsh(_sym(M))))
    return margin < 0.0, margin


@dataclass
class BaseVerification:
    """Grid report for a candidate robust gain."""

    rhos: np.ndarray
    spectral_radii: np.ndarray
    schur_ok: np.ndarray
    beta_achieved: float

    @property
    def all_stable(self) -> bool:
        return bool(np.all(self.schur_ok))

    @property
    def unstable_rhos(self) -> list:
        return [float(r) for r in self.rhos[~self.schur_ok]]


def verify_base_controller(plant: UncertainPlant, K, grid_size: int = 50) -> BaseVerification:
    """Check Schur stability of A_d(rho) - B_d K over a rho grid and measure the
    achieved closed-loop gain from v to x (infinite if any point is unstable)."""
    K = _as_gain(K)
    rhos = plant.rho_grid(grid_size)
    radii = np.empty(grid_size)
    beta = 0.0
    for i, rho in enumerate(rhos):
        Ad, Bd = plant.realize(rho)
        A_cl = Ad - Bd @ K
        radii[i] = spectral_radius(A_cl)
        if radii[i] < 1.0:
            sys_cl = StateSpace(A_cl, Bd, np.eye(plant.n_x),
                                np.zeros((plant.n_x, 1)), ts=plant.ts)
            beta = max(beta, hinf_norm(sys_cl, method="bisect", tol=1e-6))
    ok = radii < 1.0
    return BaseVerification(
        rhos=rhos,
        spectral_radii=radii,
        schur_ok=ok,
        beta_achieved=beta if bool(np.all(ok)) else float("inf"),
    )


def derive_base_controller(
    plant: UncertainPlant,
    Q=None,
    R=None,
    rho_design: float | None = None,
    grid_size: int = 50,
) -> BaseController:
    """Fallback LQR-based robust gain for plants where the shipped constant does
    not apply; verified on the rho grid before being returned."""
    rho_design = rho_design if rho_design is not None \
        else 0.5 * (plant.rho_min + plant.rho_max)
    Q = np.eye(plant.n_x) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(1) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    Ad, Bd = plant.realize(rho_design)
    K, _ = dlqr(Ad, Bd, Q, R)
    report = verify_base_controller(plant, K, grid_size)
    if not report.all_stable:
        raise NumericalError(
            "LQR fallback gain is not robustly stabilizing; unstable at rho in "
            f"{report.unstable_rhos}"
        )
    return BaseController(K)
