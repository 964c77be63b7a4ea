"""Differentiable closed-loop rollouts, stage costs, gradients and training.

Gradients are exact reverse-mode derivatives of the empirical cost through the
unrolled closed loop, the model step maps and the certificate-preserving
weight construction.  Kinks (relu, absolute values) use the zero-subgradient
convention.  Scenario reduction order is fixed (ascending index within one
batched evaluation), so repeated runs are bitwise identical.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import NumericalError
from .plant import NoDisturbance, Scenario, UncertainPlant, make_scenarios
from .ren import DT, Ren

__all__ = [
    "QuadraticCost",
    "SoftInputCost",
    "EconomicCost",
    "WeightedL1Cost",
    "BENCHMARK_Q",
    "BENCHMARK_R",
    "stage_cost",
    "Rollout",
    "rollout",
    "closed_loop_rollout",
    "empirical_cost",
    "grad",
    "optimizer_step",
    "TrainConfig",
    "Trainer",
    "train",
]

DIVERGENCE_NORM = 1e8

BENCHMARK_Q = np.diag([10.0, 0.1, 10.0, 0.1])
BENCHMARK_R = 0.01


@dataclass(frozen=True)
class QuadraticCost:
    """c(x, u) = x'Qx + R u^2."""

    Q: np.ndarray = field(default_factory=lambda: BENCHMARK_Q.copy())
    R: float = BENCHMARK_R
    kind: str = "quadratic"

    def __post_init__(self):
        Q = np.asarray(self.Q, dtype=float)
        if Q.shape != (4, 4):
            raise ValueError("Q must be 4x4")
        if self.R <= 0:
            raise ValueError("R must be positive")
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))


@dataclass(frozen=True)
class SoftInputCost:
    """Quadratic cost plus eta * max(|u| - u_bar, 0)."""

    Q: np.ndarray = field(default_factory=lambda: BENCHMARK_Q.copy())
    R: float = BENCHMARK_R
    u_bar: float = 5.0
    eta: float = 50.0
    kind: str = "soft_input"

    def __post_init__(self):
        object.__setattr__(self, "Q", 0.5 * (np.asarray(self.Q, dtype=float)
                                             + np.asarray(self.Q, dtype=float).T))
        if self.R <= 0 or self.eta < 0 or self.u_bar < 0:
            raise ValueError("SoftInputCost parameters out of range")


@dataclass(frozen=True)
class EconomicCost:
    """c(x, u) = u^2 (pure input effort; the unconstrained optimum is the
    unstable u = 0 policy)."""

    kind: str = "economic"


@dataclass(frozen=True)
class WeightedL1Cost:
    """c(x, u) = ||W1 x||_1 + ||W2 u||_1."""

    W1: np.ndarray = field(
        default_factory=lambda: np.array([[20.0, 0.1, 5.0, 0.1]]))
    W2: float = 0.5
    kind: str = "weighted_l1"

    def __post_init__(self):
        W1 = np.atleast_2d(np.asarray(self.W1, dtype=float))
        if W1.shape[1] != 4:
            raise ValueError("W1 must have 4 columns")
        object.__setattr__(self, "W1", W1)


def stage_cost(spec, x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Batched stage cost; ``x`` is (B, 4) and ``u`` is (B, 1)."""
    u1 = u[..., 0]
    if isinstance(spec, QuadraticCost):
        Q = torch.as_tensor(spec.Q, dtype=DT)
        return ((x @ Q) * x).sum(dim=-1) + spec.R * u1**2
    if isinstance(spec, SoftInputCost):
        Q = torch.as_tensor(spec.Q, dtype=DT)
        quad = ((x @ Q) * x).sum(dim=-1) + spec.R * u1**2
        return quad + spec.eta * torch.relu(torch.abs(u1) - spec.u_bar)
    if isinstance(spec, EconomicCost):
        return u1**2
    if isinstance(spec, WeightedL1Cost):
        W1 = torch.as_tensor(spec.W1, dtype=DT)
        return torch.abs(x @ W1.T).sum(dim=-1) + torch.abs(spec.W2 * u1)
    raise ValueError(f"unknown cost spec {type(spec).__name__}")


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------


@dataclass
class Rollout:
    """Closed-loop trajectory with its average stage cost."""

    x: np.ndarray  # (T+1, 4)
    u: np.ndarray  # (T+1,)
    w: np.ndarray  # (T+1, n_w)
    ell: float
    diverged: bool = False


def _scenario_tensors(plant: UncertainPlant, scenarios: list[Scenario], T: int):
    M = len(scenarios)
    A = np.empty((M, plant.n_x, plant.n_x))
    B = np.empty((M, plant.n_x))
    for i, s in enumerate(scenarios):
        Ad, Bd = plant.realize(s.rho)
        A[i] = Ad
        B[i] = Bd[:, 0]
    x0 = np.stack([s.x0 for s in scenarios])
    w = np.stack([s.w[: T + 1] for s in scenarios])
    return (
        torch.as_tensor(A, dtype=DT),
        torch.as_tensor(B, dtype=DT),
        torch.as_tensor(x0, dtype=DT),
        torch.as_tensor(w, dtype=DT),
    )


def closed_loop_rollout(
    plant: UncertainPlant,
    policy,
    scenarios: list[Scenario],
    T: int,
    cost,
    record: bool = False,
    record_state: bool = False,
):
    """Simulate the closed loop over a batch of scenarios.

    Returns ``(ell, diverged, traj)`` where ``ell`` is the per-scenario average
    stage cost (+inf for trajectories whose norm crossed the divergence
    sentinel, which are frozen rather than propagated), ``diverged`` is a bool
    tensor, and ``traj`` holds stacked (x, u) histories when ``record`` is set
    (plus full closed-loop state vectors when ``record_state`` is set).

    Build the surrounding autograd context yourself: wrap in ``torch.no_grad()``
    for evaluation, or leave gradients enabled for training.
    """
    for s in scenarios:
        if s.T < T:
            raise ValueError(
                f"scenario horizon {s.T} shorter than requested T={T}")
    M = len(scenarios)
    A, B, x, w = _scenario_tensors(plant, scenarios, T)
    prep = policy.prepare()
    ps = prep.init_state(x)
    ell = torch.zeros(M, dtype=DT)
    alive = torch.ones(M, dtype=torch.bool)
    diverged = torch.zeros(M, dtype=torch.bool)
    xs, us, states = [], [], []
    for t in range(T + 1):
        ps, u = prep.step(ps, x)
        c = stage_cost(cost, x, u)
        ell = ell + torch.where(alive, c, torch.zeros((), dtype=DT))
        if record:
            xs.append(x)
            us.append(u[:, 0])
        if record_state:
            states.append(prep.state_vector(ps, x))
        if t == T:
            break
        drive = u if plant.channel != "input" else u + w[:, t, :1]
        x_next = torch.einsum("bij,bj->bi", A, x) + B * drive
        if plant.channel == "state":
            x_next = x_next + w[:, t, :]
        blown = x_next.norm(dim=1) > DIVERGENCE_NORM
        diverged = diverged | (blown & alive)
        alive = alive & ~blown
        x = torch.where(alive[:, None], x_next, torch.zeros_like(x_next))
    ell = ell / (T + 1)
    ell = torch.where(diverged, torch.full_like(ell, float("inf")), ell)
    traj = {}
    if record:
        traj["x"] = torch.stack(xs, dim=1)  # (M, T+1, 4)
        traj["u"] = torch.stack(us, dim=1)  # (M, T+1)
    if record_state:
        traj["state"] = torch.stack(states, dim=1)
    return ell, diverged, traj


def rollout(plant: UncertainPlant, policy, scenario: Scenario, T: int, cost) -> Rollout:
    """Single-scenario closed-loop simulation (no gradients)."""
    with torch.no_grad():
        ell, diverged, traj = closed_loop_rollout(
            plant, policy, [scenario], T, cost, record=True)
    return Rollout(
        x=traj["x"][0].numpy(),
        u=traj["u"][0].numpy(),
        w=scenario.w[: T + 1].copy(),
        ell=float(ell[0]),
        diverged=bool(diverged[0]),
    )


def empirical_cost(plant, policy, scenarios, T, cost) -> float:
    """Mean average stage cost over the scenario set (+inf if any diverged)."""
    if not scenarios:
        raise ValueError("need at least one scenario")
    with torch.no_grad():
        ell, _, _ = closed_loop_rollout(plant, policy, scenarios, T, cost)
    return float(ell.mean())


def _trainable_parameters(policy):
    return list(policy.trainable.parameters())


def get_flat_params(policy) -> np.ndarray:
    return np.concatenate(
        [p.detach().numpy().ravel() for p in _trainable_parameters(policy)])


def set_flat_params(policy, vec: np.ndarray) -> None:
    offset = 0
    with torch.no_grad():
        for p in _trainable_parameters(policy):
            size = p.numel()
            chunk = torch.as_tensor(vec[offset:offset + size], dtype=DT)
            p.copy_(chunk.reshape(p.shape))
            offset += size
    if offset != vec.size:
        raise ValueError(f"flat vector has {vec.size} entries, expected {offset}")


def grad(plant, policy, scenarios, T, cost):
    """Empirical cost and its exact reverse-mode gradient in the trainable
    parameters.  Returns ``(J, None)`` when a rollout diverged (J = +inf)."""
    params = _trainable_parameters(policy)
    for p in params:
        p.grad = None
    ell, _, _ = closed_loop_rollout(plant, policy, scenarios, T, cost)
    J = ell.mean()
    if not torch.isfinite(J):
        return float(J.detach()), None
    J.backward()
    pieces = []
    for name, p in policy.trainable.named_parameters():
        g = p.grad
        if g is None:
            g = torch.zeros_like(p)
        if not bool(torch.all(torch.isfinite(g))):
            raise NumericalError(
                f"non-finite gradient in parameter block {name!r}")
        pieces.append(g.detach().numpy().ravel())
    return float(J.detach()), np.concatenate(pieces)


def optimizer_step(kind: str, theta: np.ndarray, g: np.ndarray, opt_state: dict,
                   lr: float):
    """One update of the flat parameter vector; pure in all arguments."""
    if theta.shape != g.shape:
        raise ValueError("theta and gradient shapes differ")
    if kind == "sgd":
        return theta - lr * g, dict(opt_state)
    if kind == "adam":
        beta1 = opt_state.get("beta1", 0.9)
        beta2 = opt_state.get("beta2", 0.999)
        eps = opt_state.get("eps", 1e-8)
        t = opt_state.get("t", 0) + 1
        m = beta1 * opt_state.get("m", np.zeros_like(theta)) + (1 - beta1) * g
        v = beta2 * opt_state.get("v", np.zeros_like(theta)) + (1 - beta2) * g**2
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta_next = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        return theta_next, {"m": m, "v": v, "t": t,
                            "beta1": beta1, "beta2": beta2, "eps": eps}
    raise ValueError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer schedule, horizons and seeds for one training run.

    ``lr_schedule`` is a piecewise-constant list of (value, start_epoch)
    pairs, first entry starting at epoch 0.
    """

    epochs: int = 150
    lr_schedule: tuple = ((1e-3, 0),)
    M_train: int = 10
    T_train: int = 60
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10
    eval_M: int = 50
    eval_T: int = 100
    eval_seed: Optional[int] = None
    check_certificate: bool = True
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if self.epochs < 0 or self.M_train < 1 or self.T_train < 1:
            raise ValueError("epochs/M_train/T_train out of range")
        sched = tuple((float(lr), int(start)) for lr, start in self.lr_schedule)
        if not sched or sched[0][1] != 0:
            raise ValueError("lr_schedule must start at epoch 0")
        starts = [s for _, s in sched]
        if starts != sorted(starts):
            raise ValueError("lr_schedule switch epochs must be increasing")
        if any(lr <= 0 for lr, _ in sched):
            raise ValueError("learning rates must be positive")
        object.__setattr__(self, "lr_schedule", sched)

    def lr_at(self, epoch: int) -> float:
        lr = self.lr_schedule[0][0]
        for value, start in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    @property
    def resolved_eval_seed(self) -> int:
        return self.eval_seed if self.eval_seed is not None \
            else self.seed + 1_000_000_007


class Trainer:
    """Policy-gradient training loop over sampled scenarios.

    Follows the estimator convention of ``fit()`` returning ``self`` with the
    learning record in ``history_``; one row per epoch with keys
    (epoch, train_cost, test_cost, grad_norm, lr, wall_ms).
    """

    def __init__(self, plant: UncertainPlant, policy, cost,
                 config: TrainConfig, dist=None, checkpoint_dir=None):
        self.plant = plant
        self.policy = policy
        self.cost = cost
        self.config = config
        self.dist = dist if dist is not None else NoDisturbance()
        self.checkpoint_dir = checkpoint_dir
        self.history_: list[dict] = []
        self.cert_margins_: list[float] = []
        self.skipped_epochs_: list[int] = []
        self._test_scenarios = None

    def test_set(self):
        """Fixed seeded evaluation scenario set (created once, then reused)."""
        if self._test_scenarios is None:
            self._test_scenarios = make_scenarios(
                self.plant, self.dist, self.config.eval_T,
                seed=self.config.resolved_eval_seed,
                count=self.config.eval_M, stream=0)
        return self._test_scenarios

    def test_cost(self) -> float:
        return empirical_cost(self.plant, self.policy, self.test_set(),
                              self.config.eval_T, self.cost)

    def fit(self) -> "Trainer":
        cfg = self.config
        opt_state = {"beta1": cfg.beta1, "beta2": cfg.beta2, "eps": cfg.eps}
        for epoch in range(cfg.epochs):
            start = time.perf_counter()
            scenarios = make_scenarios(
                self.plant, self.dist, cfg.T_train,
                seed=cfg.seed, count=cfg.M_train, stream=epoch + 1)
            J, g = grad(self.plant, self.policy, scenarios, cfg.T_train, self.cost)
            lr = cfg.lr_at(epoch)
            if g is not None:
                theta = get_flat_params(self.policy)
                theta, opt_state = optimizer_step(
                    cfg.optimizer, theta, g, opt_state, lr)
                set_flat_params(self.policy, theta)
                grad_norm = float(np.linalg.norm(g))
            else:
                # divergence is a recorded finding, not a crash; hold parameters
                self.skipped_epochs_.append(epoch)
                grad_norm = float("nan")
            if cfg.check_certificate and isinstance(
                    getattr(self.policy, "trainable", None), Ren):
                self.cert_margins_.append(
                    self.policy.trainable.certificate_margin())
            do_eval = (cfg.eval_every > 0
                       and (epoch % cfg.eval_every == cfg.eval_every - 1
                            or epoch == cfg.epochs - 1))
            test_cost = self.test_cost() if do_eval else None
            if (cfg.checkpoint_every and self.checkpoint_dir is not None
                    and epoch % cfg.checkpoint_every == cfg.checkpoint_every - 1):
                from .checkpoint import save_policy_bundle

                save_policy_bundle(
                    Path(self.checkpoint_dir) / f"checkpoint_epoch{epoch}.bin",
                    self.policy)
            self.history_.append({
                "epoch": epoch,
                "train_cost": J,
                "test_cost": test_cost,
                "grad_norm": grad_norm,
                "lr": lr,
                "wall_ms": (time.perf_counter() - start) * 1e3,
            })
        return self

    def history_csv(self) -> str:
        lines = ["epoch,train_cost,test_cost,grad_norm,lr,wall_ms"]
        for row in self.history_:
            tc = "" if row["test_cost"] is None else repr(row["test_cost"])
            lines.append(
                f"{row['epoch']},{row['train_cost']!r},{tc},"
                f"{row['grad_norm']!r},{row['lr']!r},{row['wall_ms']:.3f}"
            )
        return "\n".join(lines) + "\n"


def train(plant, policy, cost, config: TrainConfig, dist=None) -> list[dict]:
    """Run the training loop and return its per-epoch history."""
    return Trainer(plant, policy, cost, config, dist).fit().history_
