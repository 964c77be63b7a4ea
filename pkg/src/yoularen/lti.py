"""Core linear-system numerics: discretization, LQR, spectral tests, H-infinity norms.

These routines back the gain-budget computations used elsewhere: the H-infinity
norm of a discrete LTI system equals its incremental l2-gain, which is how the
admissible Lipschitz bound of a stable augmentation is sized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import NumericalError

__all__ = [
    "StateSpace",
    "zoh_discretize",
    "spectral_radius",
    "dlqr",
    "hinf_norm",
]


def _as_matrix(M, name: str) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {M.shape}")
    return M


@dataclass(frozen=True)
class StateSpace:
    """State-space model x' = Ax + Bu, y = Cx + Du.

    ``ts`` is the sampling time in seconds for discrete-time systems and
    ``None`` for continuous-time ones.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    ts: float | None = None

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        D = _as_matrix(self.D, "D")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise ValueError(f"B has {B.shape[0]} rows, expected {n}")
        if C.shape[1] != n:
            raise ValueError(f"C has {C.shape[1]} columns, expected {n}")
        if D.shape != (C.shape[0], B.shape[1]):
            raise ValueError(f"D must be {C.shape[0]}x{B.shape[1]}, got {D.shape}")
        if self.ts is not None and not self.ts > 0:
            raise ValueError(f"sampling time must be positive, got {self.ts}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def is_discrete(self) -> bool:
        return self.ts is not None


def zoh_discretize(sys: StateSpace, ts: float) -> StateSpace:
    """Exact zero-order-hold discretization of a continuous-time system.

    Computes A_d = exp(A ts) and B_d = (int_0^ts exp(A tau) dtau) B through the
    matrix exponential of the augmented matrix [[A, B], [0, 0]].  C and D are
    unchanged.
    """
    if sys.is_discrete:
        raise ValueError("zoh_discretize expects a continuous-time system")
    if not ts > 0:
        raise ValueError(f"sampling time must be positive, got {ts}")
    n, m = sys.n, sys.m
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = sys.A
    aug[:n, n:] = sys.B
    E = sla.expm(aug * ts)
    return StateSpace(E[:n, :n], E[:n, n:], sys.C, sys.D, ts=ts)


def spectral_radius(A) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    A = _as_matrix(A, "A")
    if A.shape[0] != A.shape[1]:
        raise ValueError(f"spectral_radius expects a square matrix, got {A.shape}")
    if A.shape[0] == 0:
        return 0.0
    try:
        eig = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue solver failed: {exc}") from exc
    return float(np.max(np.abs(eig)))


def dlqr(A, B, Q, R, tol: float = 1e-12, max_iter: int = 200_000):
    """Discrete-time LQR gain via fixed-point iteration of the Riccati recursion.

    Returns ``(K, P)`` where P solves the discrete algebraic Riccati equation
    (iterated until the relative change drops below ``tol``) and
    K = (R + B'PB)^{-1} B'PA.  The closed loop A - BK is verified Schur-stable.
    """
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    Q = _as_matrix(Q, "Q")
    R = _as_matrix(R, "R")
    n = A.shape[0]
    if B.shape[0] != n or Q.shape != (n, n) or R.shape != (B.shape[1], B.shape[1]):
        raise ValueError("dlqr dimension mismatch")
    Q = 0.5 * (Q + Q.T)
    R = 0.5 * (R + R.T)
    try:
        np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise ValueError("R must be positive definite") from exc
    if np.min(np.linalg.eigvalsh(Q)) < -1e-10 * max(1.0, np.linalg.norm(Q)):
        raise ValueError("Q must be positive semidefinite")

    P = Q.copy()
    for _ in range(max_iter):
        BtPB = R + B.T @ P @ B
        K = np.linalg.solve(BtPB, B.T @ P @ A)
        P_next = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        if np.linalg.norm(P_next - P) <= tol * max(1.0, np.linalg.norm(P_next)):
            P = P_next
            break
        P = P_next
    else:
        raise NumericalError(
            f"Riccati recursion did not converge within {max_iter} iterations"
        )
    K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    if spectral_radius(A - B @ K) >= 1.0:
        raise NumericalError("dlqr produced an unstable closed loop; (A, B) stabilizable?")
    return K, P


def _sigma_max_response(sys: StateSpace, omegas: np.ndarray) -> float:
    n = sys.n
    I = np.eye(n)
    best = 0.0
    for w in omegas:
        G = sys.C @ np.linalg.solve(np.exp(1j * w) * I - sys.A, sys.B) + sys.D
        s = np.linalg.svd(G, compute_uv=False)
        if s.size and s[0] > best:
            best = float(s[0])
    return best


def _has_unit_circle_eig(sys: StateSpace, gamma: float, circle_tol: float = 1e-8) -> bool:
    """Bounded-real test: gamma is attained as a singular value of the frequency
    response at some frequency iff the symplectic pencil has a unit-circle
    eigenvalue."""
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    n, m = sys.n, sys.m
    R = gamma**2 * np.eye(m) - D.T @ D
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0.0:
        # gamma at or below the feedthrough gain is certainly not an upper bound
        return True
    Rinv = np.linalg.inv(R)
    Ahat = A + B @ Rinv @ D.T @ C
    Qhat = C.T @ (np.eye(sys.p) + D @ Rinv @ D.T) @ C
    Ap = np.block([[Ahat, B @ Rinv @ B.T], [np.zeros((n, n)), -np.eye(n)]])
    Bp = np.block([[np.eye(n), np.zeros((n, n))], [-Qhat, -Ahat.T]])
    lam = sla.eig(Ap, Bp, right=False)
    lam = lam[np.isfinite(lam)]
    if lam.size == 0:
        return False
    return bool(np.any(np.abs(np.abs(lam) - 1.0) < circle_tol))


def hinf_norm(
    sys: StateSpace,
    method: str = "bisect",
    n_freq: int = 4096,
    tol: float = 1e-6,
) -> float:
    """H-infinity norm of a Schur-stable discrete-time system.

    method="grid"    max over ``n_freq`` frequencies in [0, pi] of the largest
                     singular value of the frequency response.
    method="bisect"  bisection on gamma using the discrete bounded-real test
                     (the symplectic pencil has a unit-circle eigenvalue iff
                     gamma is exceeded), to relative width ``tol``.
    """
    if not sys.is_discrete:
        raise ValueError("hinf_norm expects a discrete-time system")
    if spectral_radius(sys.A) >= 1.0:
        raise NumericalError("hinf_norm requires a Schur-stable A matrix")

    if method == "grid":
        return _sigma_max_response(sys, np.linspace(0.0, np.pi, n_freq))
    if method != "bisect":
        raise ValueError(f"unknown method {method!r}; expected 'grid' or 'bisect'")

    sd = np.linalg.svd(sys.D, compute_uv=False)
    lower = max(
        float(sd[0]) if sd.size else 0.0,
        _sigma_max_response(sys, np.linspace(0.0, np.pi, 128)),
    )
    if lower == 0.0:
        # zero transfer function (B = 0 or C = 0, D = 0)
        return 0.0
    upper = 2.0 * lower
    for _ in range(64):
        if not _has_unit_circle_eig(sys, upper):
            break
        upper *= 2.0
    else:
        raise NumericalError(
            f"hinf bisection bracket failure: no upper bound found below {upper:g}"
        )
    while (upper - lower) > tol * lower:
        mid = 0.5 * (lower + upper)
        if _has_unit_circle_eig(sys, mid):
            lower = mid
        else:
            upper = mid
    return 0.5 * (lower + upper)
