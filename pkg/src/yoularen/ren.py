"""Recurrent equilibrium networks with built-in incremental-IQC certificates.

A REN is the dynamical system

    x+ = A x + B1 w + B2 u + bx
    v  = C1 x + D11 w + D12 u + bv,   w = relu(v)   (implicit neuron layer)
    y  = C2 x + D21 w + D22 u + by

``direct_construct`` maps an unconstrained real vector theta onto weights plus
a certificate (P, Lambda) that satisfies the incremental-IQC matrix inequality
with a strict margin, for every finite theta.  Training therefore needs no
projection or constraint handling: any gradient step stays inside the
certified model class.

The construction completes a positive-definite matrix H = X'X + eps*I over the
(x, w, x+) channels and solves the inequality blockwise in implicit
coordinates (E, F, ...); input/output maps are free and their IQC-dependent
coupling terms are absorbed into H through exact Schur complements, so the
cancellation holds identically in theta.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import NumericalError

__all__ = [
    "RenDims",
    "IqcSpec",
    "RenFreeParams",
    "RenWeights",
    "theta_layout",
    "theta_length",
    "init_theta",
    "direct_construct",
    "lmi_certificate",
    "equilibrium_solve",
    "ren_step",
    "empirical_gain",
    "Ren",
]

DT = torch.float64
LMI_EPS = 1e-6  # construction margin for the certificate inequality


@dataclass(frozen=True)
class RenDims:
    n_x: int
    n_v: int
    n_u: int
    n_y: int

    def __post_init__(self):
        for name in ("n_x", "n_v", "n_u", "n_y"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True, eq=False)
class IqcSpec:
    """Incremental IQC supply rate, parameterized by (Q, S, R).

    kind="lipschitz"   Q=-I/gamma, S=0, R=gamma*I  (incremental l2-gain gamma)
    kind="passive"     Q=0, S=I, R=0 (requires n_u == n_y, feedthrough built in)
    kind="two_channel" Q=-I/gamma, S=0, R=diag(gamma*I_n1, eta*I) for a split
                       input (the second channel gets the loose budget eta)
    kind="general"     explicit matrices, Q <= 0 and R >= 0
    """

    kind: str
    gamma: Optional[float] = None
    eta: Optional[float] = None
    n1: Optional[int] = None
    Q: Optional[np.ndarray] = None
    S: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None

    @classmethod
    def lipschitz(cls, gamma: float) -> "IqcSpec":
        if gamma <= 0:
            raise ValueError("Lipschitz bound gamma must be positive")
        return cls(kind="lipschitz", gamma=float(gamma))

    @classmethod
    def passive(cls) -> "IqcSpec":
        return cls(kind="passive")

    @classmethod
    def two_channel_lipschitz(cls, gamma: float, eta: float, n1: int) -> "IqcSpec":
        if gamma <= 0 or eta <= 0:
            raise ValueError("both channel gains must be positive")
        if n1 < 1:
            raise ValueError("first channel width n1 must be at least 1")
        return cls(kind="two_channel", gamma=float(gamma), eta=float(eta), n1=int(n1))

    @classmethod
    def general(cls, Q, S, R) -> "IqcSpec":
        Q = np.asarray(Q, dtype=float)
        S = np.asarray(S, dtype=float)
        R = np.asarray(R, dtype=float)
        tolq = 1e-10 * max(1.0, np.linalg.norm(Q))
        tolr = 1e-10 * max(1.0, np.linalg.norm(R))
        if Q.size and np.max(np.linalg.eigvalsh(0.5 * (Q + Q.T))) > tolq:
            raise ValueError("general IQC requires Q <= 0")
        if R.size and np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) < -tolr:
            raise ValueError("general IQC requires R >= 0")
        return cls(kind="general", Q=Q, S=S, R=R)

    def qsr(self, dims: RenDims):
        """Materialize (Q, S, R) for the given model dimensions."""
        n_u, n_y = dims.n_u, dims.n_y
        if self.kind == "lipschitz":
            return (
                -np.eye(n_y) / self.gamma,
                np.zeros((n_u, n_y)),
                self.gamma * np.eye(n_u),
            )
        if self.kind == "passive":
            if n_u != n_y:
                raise ValueError("passive IQC requires n_u == n_y")
            return np.zeros((n_y, n_y)), np.eye(n_u), np.zeros((n_u, n_u))
        if self.kind == "two_channel":
            if self.n1 >= n_u:
                raise ValueError(
                    f"channel split n1={self.n1} must leave room in n_u={n_u}"
                )
            r = np.concatenate(
                [np.full(self.n1, self.gamma), np.full(n_u - self.n1, self.eta)]
            )
            return -np.eye(n_y) / self.gamma, np.zeros((n_u, n_y)), np.diag(r)
        if self.kind == "general":
            if self.Q.shape != (n_y, n_y) or self.S.shape != (n_u, n_y) \
                    or self.R.shape != (n_u, n_u):
                raise ValueError("general IQC matrices do not match model dims")
            return self.Q, self.S, self.R
        raise ValueError(f"unknown IQC kind {self.kind!r}")

    def to_config(self) -> dict:
        out = {"kind": self.kind}
        if self.gamma is not None:
            out["gamma"] = self.gamma
        if self.eta is not None:
            out["eta"] = self.eta
        if self.n1 is not None:
            out["n1"] = self.n1
        if self.kind == "general":
            out["Q"] = self.Q.tolist()
            out["S"] = self.S.tolist()
            out["R"] = self.R.tolist()
        return out

    @classmethod
    def from_config(cls, cfg: dict) -> "IqcSpec":
        kind = cfg["kind"]
        if kind == "lipschitz":
            return cls.lipschitz(cfg["gamma"])
        if kind == "passive":
            return cls.passive()
        if kind == "two_channel":
            return cls.two_channel_lipschitz(cfg["gamma"], cfg["eta"], cfg["n1"])
        if kind == "general":
            return cls.general(cfg["Q"], cfg["S"], cfg["R"])
        raise ValueError(f"unknown IQC kind {kind!r}")


@dataclass
class RenFreeParams:
    """Unconstrained parameter vector plus the structure it encodes."""

    theta: np.ndarray | torch.Tensor
    dims: RenDims
    iqc: IqcSpec
    acyclic: bool = True


@dataclass
class RenWeights:
    """Explicit REN weights plus the certificate (P, Lam) they carry."""

    A: torch.Tensor
    B1: torch.Tensor
    B2: torch.Tensor
    C1: torch.Tensor
    D11: torch.Tensor
    D12: torch.Tensor
    C2: torch.Tensor
    D21: torch.Tensor
    D22: torch.Tensor
    bx: torch.Tensor
    bv: torch.Tensor
    by: torch.Tensor
    P: torch.Tensor
    Lam: torch.Tensor  # diagonal entries, length n_v
    acyclic: bool = True

    @property
    def dims(self) -> RenDims:
        return RenDims(
            n_x=self.A.shape[0],
            n_v=self.D11.shape[0],
            n_u=self.B2.shape[1] if self.A.shape[0] else self.D22.shape[1],
            n_y=self.C2.shape[0],
        )


def theta_layout(dims: RenDims, iqc: IqcSpec, acyclic: bool = True):
    """Ordered (name, shape) blocks of the free parameter vector."""
    nx, nv, nu, ny = dims.n_x, dims.n_v, dims.n_u, dims.n_y
    m = 2 * nx + nv
    blocks = [
        ("X", (m, m)),
        ("Y1", (nx, nx)),
        ("B2t", (nx, nu)),
        ("C2", (ny, nx)),
        ("D21", (ny, nv)),
        ("D12i", (nv, nu)),
    ]
    if not acyclic:
        blocks += [("d_lam", (nv,)), ("Z", (nv, nv))]
    if iqc.kind == "passive":
        blocks += [("X3", (ny, ny)), ("Y3", (ny, ny))]
    blocks += [("bx", (nx,)), ("bv", (nv,)), ("by", (ny,))]
    return blocks


def theta_length(dims: RenDims, iqc: IqcSpec, acyclic: bool = True) -> int:
    return sum(int(np.prod(shape)) for _, shape in theta_layout(dims, iqc, acyclic))


def _split_theta(theta: torch.Tensor, layout):
    expected = sum(int(np.prod(shape)) for _, shape in layout)
    if theta.numel() != expected:
        raise ValueError(
            f"theta has {theta.numel()} entries, layout expects {expected}"
        )
    views = {}
    offset = 0
    for name, shape in layout:
        size = int(np.prod(shape))
        views[name] = theta[offset:offset + size].reshape(shape)
        offset += size
    return views


# Output-side blocks scaled down at initialization so a freshly seeded policy
# starts close to the plain robust baseline.
_OUTPUT_BLOCKS = ("C2", "D21", "by")


def init_theta(
    dims: RenDims,
    iqc: IqcSpec,
    acyclic: bool = True,
    rng: np.random.Generator | None = None,
    output_scale: float = 0.1,
) -> np.ndarray:
    """Random theta: per-block N(0, 1/fan_in) entries, zero biases."""
    rng = rng if rng is not None else np.random.default_rng(0)
    parts = []
    for name, shape in theta_layout(dims, iqc, acyclic):
        if name in ("bx", "bv", "by", "d_lam"):
            parts.append(np.zeros(int(np.prod(shape))))
            continue
        fan_in = shape[-1] if shape[-1] > 0 else 1
        block = rng.standard_normal(int(np.prod(shape))) / np.sqrt(fan_in)
        if name in _OUTPUT_BLOCKS:
            block *= output_scale
        parts.append(block)
    return np.concatenate(parts) if parts else np.zeros(0)


def _skew(M: torch.Tensor) -> torch.Tensor:
    return 0.5 * (M - M.T)


def _construct_d22(views, dims: RenDims, iqc: IqcSpec) -> torch.Tensor:
    if iqc.kind == "passive":
        # positive-definite symmetric part keeps R + S D22 + D22' S' invertible
        X3, Y3 = views["X3"], views["Y3"]
        return X3.T @ X3 + LMI_EPS * torch.eye(dims.n_y, dtype=DT) + _skew(Y3)
    return torch.zeros((dims.n_y, dims.n_u), dtype=DT)


def direct_construct(params: RenFreeParams) -> RenWeights:
    """Build certified weights from an unconstrained theta.

    Differentiable almost everywhere in theta; the returned certificate
    satisfies ``lmi_certificate(weights, iqc) > 0`` for every finite theta.
    """
    dims, iqc, acyclic = params.dims, params.iqc, params.acyclic
    theta = params.theta
    if not torch.is_tensor(theta):
        theta = torch.as_tensor(np.asarray(theta, dtype=float), dtype=DT)
    if theta.dtype != DT:
        theta = theta.to(DT)
    if not bool(torch.all(torch.isfinite(theta))):
        raise ValueError("theta must be finite")
    nx, nv, nu, ny = dims.n_x, dims.n_v, dims.n_u, dims.n_y
    m = 2 * nx + nv
    views = _split_theta(theta, theta_layout(dims, iqc, acyclic))

    Qn, Sn, Rn = iqc.qsr(dims)
    Q = torch.as_tensor(Qn, dtype=DT)
    S = torch.as_tensor(Sn, dtype=DT)
    R = torch.as_tensor(Rn, dtype=DT)
    D22 = _construct_d22(views, dims, iqc)

    Rhat = R + S @ D22 + D22.T @ S.T + D22.T @ Q @ D22
    Rhat = 0.5 * (Rhat + Rhat.T)
    try:
        torch.linalg.cholesky(Rhat)
    except Exception as exc:
        raise ValueError(
            "IQC input block R + S D22 + D22'S' + D22'Q D22 must be positive "
            "definite for the direct parameterization (with D22 = 0 this means "
            "R > 0)"
        ) from exc

    C2, D21, D12i, B2t = views["C2"], views["D21"], views["D12i"], views["B2t"]
    Gy = S.T + Q @ D22  # output-side coupling into the input channel
    G2 = torch.cat([C2.T @ Gy, D21.T @ Gy - D12i, B2t], dim=0)      # (m, nu)
    Lq = torch.cat([C2.T, D21.T, torch.zeros((nx, ny), dtype=DT)], dim=0)

    X = views["X"]
    H = X.T @ X + LMI_EPS * torch.eye(m, dtype=DT) \
        - Lq @ Q @ Lq.T + G2 @ torch.linalg.solve(Rhat, G2.T)

    H11 = H[:nx, :nx]
    H12 = H[:nx, nx:nx + nv]
    H13 = H[:nx, nx + nv:]
    H22 = H[nx:nx + nv, nx:nx + nv]
    H23 = H[nx:nx + nv, nx + nv:]
    H33 = H[nx + nv:, nx + nv:]

    P_impl = H33
    E = 0.5 * (H11 + P_impl + _skew(views["Y1"]) * 2.0)
    F = H13.T
    B1t = H23.T
    C1i = -H12.T
    if acyclic:
        lam = 0.5 * torch.diagonal(H22)
        D11i = -torch.tril(H22, diagonal=-1)
    else:
        lam = torch.exp(views["d_lam"])
        D11i = torch.diag(lam) - 0.5 * H22 + _skew(views["Z"])

    if nx:
        A = torch.linalg.solve(E, F)
        B1 = torch.linalg.solve(E, B1t)
        B2 = torch.linalg.solve(E, B2t)
        P = E.T @ torch.linalg.solve(P_impl, E)
        P = 0.5 * (P + P.T)
    else:
        A = torch.zeros((0, 0), dtype=DT)
        B1 = torch.zeros((0, nv), dtype=DT)
        B2 = torch.zeros((0, nu), dtype=DT)
        P = torch.zeros((0, 0), dtype=DT)
    if nv:
        inv_lam = (1.0 / lam)[:, None]
        C1 = inv_lam * C1i
        D11 = inv_lam * D11i
        D12 = inv_lam * D12i
    else:
        C1 = torch.zeros((0, nx), dtype=DT)
        D11 = torch.zeros((0, 0), dtype=DT)
        D12 = torch.zeros((0, nu), dtype=DT)

    return RenWeights(
        A=A, B1=B1, B2=B2, C1=C1, D11=D11, D12=D12,
        C2=C2, D21=D21, D22=D22,
        bx=views["bx"], bv=views["bv"], by=views["by"],
        P=P, Lam=lam if nv else torch.zeros(0, dtype=DT),
        acyclic=acyclic,
    )


def lmi_certificate(weights: RenWeights, iqc: IqcSpec) -> float:
    """Smallest eigenvalue of the certificate matrix inequality; positive means
    the incremental IQC holds for all trajectory pairs.

    The output term enters as + [C2 D21 D22]' Q [C2 D21 D22] with Q <= 0, so
    larger output maps tighten the inequality (a static map D22 is certified
    iff its largest singular value stays below the Lipschitz budget).
    """
    w = {k: np.asarray(getattr(weights, k).detach().numpy(), dtype=float)
         for k in ("A", "B1", "B2", "C1", "D11", "D12", "C2", "D21", "D22", "P")}
    lam = np.asarray(weights.Lam.detach().numpy(), dtype=float)
    dims = weights.dims
    nx, nv, nu, ny = dims.n_x, dims.n_v, dims.n_u, dims.n_y
    Q, S, R = iqc.qsr(dims)
    if w["C2"].shape != (ny, nx) or w["D22"].shape != (ny, nu):
        raise ValueError("weights and IQC dimensions are inconsistent")
    Lam = np.diag(lam) if nv else np.zeros((0, 0))
    Wmid = 2 * Lam - Lam @ w["D11"] - w["D11"].T @ Lam
    T = np.block([
        [w["P"], -w["C1"].T @ Lam, w["C2"].T @ S.T],
        [-Lam @ w["C1"], Wmid, w["D21"].T @ S.T - Lam @ w["D12"]],
        [S @ w["C2"], S @ w["D21"] - w["D12"].T @ Lam,
         R + S @ w["D22"] + w["D22"].T @ S.T],
    ])
    J = np.hstack([w["A"], w["B1"], w["B2"]])
    L = np.hstack([w["C2"], w["D21"], w["D22"]])
    M = T - J.T @ w["P"] @ J + L.T @ Q @ L
    M = 0.5 * (M + M.T)
    return float(np.linalg.eigvalsh(M).min())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


class _FixedPointLayer(torch.autograd.Function):
    """Damped Picard solve of w = relu(D11 w + b) with implicit-function
    gradients at the fixed point."""

    @staticmethod
    def forward(ctx, d11, b):
        with torch.no_grad():
            w = torch.zeros_like(b)
            for _ in range(500):
                w_new = 0.5 * w + 0.5 * torch.relu(w @ d11.T + b)
                if torch.max(torch.abs(w_new - w)) < 1e-10:
                    w = w_new
                    break
                w = w_new
            else:
                raise NumericalError(
                    "equilibrium fixed-point iteration did not converge within "
                    "500 steps; weights are likely uncertified"
                )
            resid = torch.max(torch.abs(w - torch.relu(w @ d11.T + b)))
            if resid >= 1e-8:
                raise NumericalError(
                    f"equilibrium solve stalled at residual {float(resid):.2e}"
                )
        active = (w @ d11.T + b) > 0
        ctx.save_for_backward(d11, w, active)
        return w

    @staticmethod
    def backward(ctx, grad_w):
        d11, w, active = ctx.saved_tensors
        nv = d11.shape[0]
        act = active.to(d11.dtype)  # (batch, nv)
        # (I - D11' diag(act))^{-1} applied per batch element
        lhs = torch.eye(nv, dtype=d11.dtype) - d11.T[None, :, :] * act[:, None, :]
        t = torch.linalg.solve(lhs, grad_w[..., None])[..., 0]
        lam = act * t
        grad_b = lam
        grad_d11 = torch.einsum("bi,bj->ij", lam, w)
        return grad_d11, grad_b


def equilibrium_solve(d11, b, acyclic: bool = True):
    """Solve the implicit neuron layer w = relu(D11 w + b).

    Acyclic (strictly lower-triangular D11): one forward-substitution pass.
    General case: damped fixed-point iteration (differentiable through the
    implicit function theorem).  ``b`` may carry leading batch dimensions.
    """
    d11 = torch.as_tensor(d11, dtype=DT) if not torch.is_tensor(d11) else d11
    b = torch.as_tensor(b, dtype=DT) if not torch.is_tensor(b) else b
    nv = d11.shape[0]
    if d11.shape != (nv, nv) or b.shape[-1] != nv:
        raise ValueError("D11 and b dimensions are inconsistent")
    if nv == 0:
        return b[..., :0].clone()
    if acyclic:
        if bool(torch.any(torch.triu(d11) != 0)):
            raise ValueError("acyclic solve requires strictly lower-triangular D11")
        eye = torch.eye(nv, dtype=d11.dtype)
        w = torch.zeros_like(b)
        for i in range(nv):
            v_i = b[..., i] + w @ d11[i]
            w = w + torch.relu(v_i)[..., None] * eye[i]
        return w
    return _FixedPointLayer.apply(d11, b)


def ren_step(weights: RenWeights, state: torch.Tensor, u: torch.Tensor):
    """One REN update; ``state`` and ``u`` may carry a leading batch dimension."""
    b_w = state @ weights.C1.T + u @ weights.D12.T + weights.bv
    w = equilibrium_solve(weights.D11, b_w, acyclic=weights.acyclic)
    state_next = state @ weights.A.T + w @ weights.B1.T + u @ weights.B2.T + weights.bx
    y = state @ weights.C2.T + w @ weights.D21.T + u @ weights.D22.T + weights.by
    return state_next, y


def empirical_gain(
    weights: RenWeights,
    n_pairs: int,
    T: int,
    rng: np.random.Generator,
    input_scale: float = 1.0,
) -> float:
    """Largest observed ratio ||y1 - y2|| / ||u1 - u2|| over random input-sequence
    pairs started from a shared random initial state.

    For a certified Lipschitz REN the result never exceeds the prescribed gain.
    """
    dims = weights.dims
    nx, nu = dims.n_x, dims.n_u
    x0 = torch.as_tensor(rng.standard_normal((n_pairs, nx)), dtype=DT)
    u1 = torch.as_tensor(
        input_scale * rng.standard_normal((T, n_pairs, nu)), dtype=DT)
    u2 = torch.as_tensor(
        input_scale * rng.standard_normal((T, n_pairs, nu)), dtype=DT)
    with torch.no_grad():
        state = torch.cat([x0, x0], dim=0)
        sq_dy = torch.zeros(n_pairs, dtype=DT)
        sq_du = torch.zeros(n_pairs, dtype=DT)
        for t in range(T):
            u = torch.cat([u1[t], u2[t]], dim=0)
            state, y = ren_step(weights, state, u)
            dy = y[:n_pairs] - y[n_pairs:]
            du = u1[t] - u2[t]
            sq_dy += (dy**2).sum(dim=1)
            sq_du += (du**2).sum(dim=1)
    mask = sq_du > 1e-24
    if not bool(mask.any()):
        raise ValueError("all input pairs were identical; nothing to estimate")
    ratios = torch.sqrt(sq_dy[mask] / sq_du[mask])
    return float(ratios.max())


# ---------------------------------------------------------------------------
# torch module wrapper
# ---------------------------------------------------------------------------


class Ren(torch.nn.Module):
    """REN with a single flat trainable parameter vector.

    Args:
        dims: model dimensions.
        iqc: certificate class the constructed weights satisfy.
        acyclic: strictly lower-triangular D11 (explicit one-pass solve).
        theta: optional initial parameter vector; drawn via ``init_theta``
            from ``seed`` when omitted.
        output_scale: scale of the output maps at initialization.
    """

    kind = "ren"

    def __init__(self, dims: RenDims, iqc: IqcSpec, acyclic: bool = True,
                 theta: np.ndarray | None = None, seed: int | None = 0,
                 output_scale: float = 0.1):
        super().__init__()
        self.dims = dims
        self.iqc = iqc
        self.acyclic = acyclic
        if theta is None:
            theta = init_theta(dims, iqc, acyclic,
                               np.random.default_rng(seed), output_scale)
        expected = theta_length(dims, iqc, acyclic)
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != expected:
            raise ValueError(f"theta has {theta.size} entries, expected {expected}")
        self.theta = torch.nn.Parameter(torch.as_tensor(theta, dtype=DT))

    def weights(self) -> RenWeights:
        return direct_construct(
            RenFreeParams(self.theta, self.dims, self.iqc, self.acyclic))

    def certificate_margin(self) -> float:
        return lmi_certificate(self.weights(), self.iqc)

    def prepare(self) -> "_PreparedRen":
        return _PreparedRen(self.weights())

    def init_state(self, batch: int) -> torch.Tensor:
        return torch.zeros((batch, self.dims.n_x), dtype=DT)

    def to_config(self) -> dict:
        return {
            "dims": {"n_x": self.dims.n_x, "n_v": self.dims.n_v,
                     "n_u": self.dims.n_u, "n_y": self.dims.n_y},
            "iqc": self.iqc.to_config(),
            "acyclic": self.acyclic,
        }


class _PreparedRen:
    """Weights frozen for one rollout; keeps construction out of the time loop."""

    def __init__(self, weights: RenWeights):
        self.weights = weights

    def step(self, state, u):
        return ren_step(self.weights, state, u)
