"""Uncertain linearized cart-pole plant, scenario sampling and disturbance models.

The plant is the 4-state linearized inverted pendulum on a cart with uncertain
pole mass rho.  It is open-loop unstable for every admissible rho, which is
what makes the stability guarantees of the learned policies meaningful.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .lti import StateSpace, zoh_discretize

__all__ = [
    "CartPoleConfig",
    "UncertainPlant",
    "Scenario",
    "NoDisturbance",
    "ConstantDisturbance",
    "SinusoidDisturbance",
    "IidUniformDisturbance",
    "cartpole_ct",
    "build_plant",
    "sample_scenario",
    "make_scenarios",
    "plant_step",
    "scenarios_to_json",
    "scenarios_from_json",
]

# Initial-state boxes used by the regulation and the constrained/disturbance
# experiment families.
X0_BOX_WIDE = np.array([[-10.0, 10.0], [-0.5, 0.5], [-2.0, 2.0], [-0.5, 0.5]])
X0_BOX_NARROW = np.array([[-5.0, 5.0], [-0.1, 0.1], [-1.0, 1.0], [-0.1, 0.1]])


@dataclass(frozen=True)
class CartPoleConfig:
    """Physical parameters; the pole mass rho ranges over [mp_min, mp_max]."""

    mp_min: float = 0.2
    mp_max: float = 2.0
    mc: float = 1.0
    ell: float = 1.0
    g: float = 9.81
    ts: float = 0.05

    def __post_init__(self):
        if not (0 < self.mp_min <= self.mp_max):
            raise ValueError("pole-mass range must satisfy 0 < mp_min <= mp_max")
        if self.mc <= 0 or self.ell <= 0:
            raise ValueError("cart mass and pole length must be positive")
        if self.ts <= 0:
            raise ValueError("sampling time must be positive")


def cartpole_ct(rho: float, cfg: CartPoleConfig = CartPoleConfig()) -> StateSpace:
    """Continuous-time cart-pole linearized at the upright position.

    State (p_x, p_x_dot, psi, psi_dot); input is the horizontal force on the
    cart; rho is the pole mass.
    """
    if rho <= 0:
        raise ValueError(f"pole mass must be positive, got {rho}")
    A = np.zeros((4, 4))
    A[0, 1] = 1.0
    A[1, 2] = -rho * cfg.g / cfg.mc
    A[2, 3] = 1.0
    A[3, 2] = (cfg.mc + rho) * cfg.g / (cfg.mc * cfg.ell)
    B = np.array([[0.0], [1.0 / cfg.mc], [0.0], [-1.0 / cfg.mc]])
    return StateSpace(A, B, np.eye(4), np.zeros((4, 1)))


@lru_cache(maxsize=4096)
def _realize_cached(cfg: CartPoleConfig, rho: float):
    sys_d = zoh_discretize(cartpole_ct(rho, cfg), cfg.ts)
    Ad = sys_d.A
    Bd = sys_d.B
    Ad.setflags(write=False)
    Bd.setflags(write=False)
    return Ad, Bd


@dataclass(frozen=True)
class UncertainPlant:
    """Discrete-time uncertain plant rho -> (A_d(rho), B_d) with a disturbance channel.

    channel="state": x+ = A_d x + B_d u + w,  w in R^4
    channel="input": x+ = A_d x + B_d (u + w),  w in R
    """

    cfg: CartPoleConfig = CartPoleConfig()
    channel: str = "state"
    x0_box: np.ndarray = field(default_factory=lambda: X0_BOX_WIDE.copy())

    def __post_init__(self):
        if self.channel not in ("state", "input"):
            raise ValueError(f"unknown disturbance channel {self.channel!r}")
        box = np.asarray(self.x0_box, dtype=float)
        if box.shape != (4, 2) or np.any(box[:, 0] > box[:, 1]):
            raise ValueError("x0_box must be a 4x2 array of [low, high] rows")
        object.__setattr__(self, "x0_box", box)

    @property
    def rho_min(self) -> float:
        return self.cfg.mp_min

    @property
    def rho_max(self) -> float:
        return self.cfg.mp_max

    @property
    def n_x(self) -> int:
        return 4

    @property
    def n_w(self) -> int:
        return 4 if self.channel == "state" else 1

    @property
    def ts(self) -> float:
        return self.cfg.ts

    def realize(self, rho: float):
        """Discretized system matrices (A_d(rho), B_d) at the given pole mass."""
        if not (self.rho_min <= rho <= self.rho_max):
            raise ValueError(
                f"rho={rho} outside the admissible range "
                f"[{self.rho_min}, {self.rho_max}]"
            )
        return _realize_cached(self.cfg, float(rho))

    def rho_grid(self, size: int) -> np.ndarray:
        return np.linspace(self.rho_min, self.rho_max, size)


def build_plant(
    cfg: CartPoleConfig | None = None,
    channel: str = "state",
    x0_box=None,
) -> UncertainPlant:
    cfg = cfg if cfg is not None else CartPoleConfig()
    box = X0_BOX_WIDE if x0_box is None else np.asarray(x0_box, dtype=float)
    return UncertainPlant(cfg=cfg, channel=channel, x0_box=box)


# ---------------------------------------------------------------------------
# disturbance models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoDisturbance:
    kind: str = "none"

    def sample(self, rng: np.random.Generator, T: int, n_w: int) -> np.ndarray:
        return np.zeros((T + 1, n_w))


@dataclass(frozen=True)
class ConstantDisturbance:
    """w_t = w_0 for all t, with w_0 uniform on [low, high] per component."""

    low: float = -5.0
    high: float = 5.0
    kind: str = "constant"

    def sample(self, rng: np.random.Generator, T: int, n_w: int) -> np.ndarray:
        w0 = rng.uniform(self.low, self.high, size=n_w)
        return np.tile(w0, (T + 1, 1))


@dataclass(frozen=True)
class SinusoidDisturbance:
    """w_t = A sin(omega t + phi) with amplitude/frequency/phase drawn once per
    scenario (independently per component)."""

    amp_low: float = 0.0
    amp_high: float = 10.0
    omega_low: float = 0.05 * math.pi
    omega_high: float = 0.5 * math.pi
    phase_low: float = -math.pi / 2
    phase_high: float = math.pi / 2
    kind: str = "sinusoid"

    def sample(self, rng: np.random.Generator, T: int, n_w: int) -> np.ndarray:
        amp = rng.uniform(self.amp_low, self.amp_high, size=n_w)
        omega = rng.uniform(self.omega_low, self.omega_high, size=n_w)
        phase = rng.uniform(self.phase_low, self.phase_high, size=n_w)
        t = np.arange(T + 1)[:, None]
        return amp * np.sin(omega * t + phase)


@dataclass(frozen=True)
class IidUniformDisturbance:
    """w_t drawn i.i.d. uniform on [low, high] per component and time step."""

    low: float = -1.0
    high: float = 1.0
    kind: str = "iid"

    def sample(self, rng: np.random.Generator, T: int, n_w: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(T + 1, n_w))


DISTURBANCE_KINDS = {
    "none": NoDisturbance,
    "constant": ConstantDisturbance,
    "sinusoid": SinusoidDisturbance,
    "iid": IidUniformDisturbance,
}


# ---------------------------------------------------------------------------
# scenarios
# ---------------------------------------------------------------------------


@dataclass
class Scenario:
    """One sampled (rho, x0, w) experiment setup, reproducible from its seed."""

    rho: float
    x0: np.ndarray
    w: np.ndarray
    seed: int

    @property
    def T(self) -> int:
        return self.w.shape[0] - 1


def sample_scenario(
    plant: UncertainPlant,
    dist,
    T: int,
    rng: np.random.Generator,
    seed: int = -1,
) -> Scenario:
    """Draw rho ~ U(P), x0 ~ U(X) componentwise and a disturbance sequence.

    The draw order (rho, then x0, then disturbance parameters) is fixed so a
    scenario is bitwise-reproducible from the generator state.
    """
    if T < 1:
        raise ValueError(f"horizon must be at least 1, got {T}")
    rho = float(rng.uniform(plant.rho_min, plant.rho_max))
    x0 = rng.uniform(plant.x0_box[:, 0], plant.x0_box[:, 1])
    w = dist.sample(rng, T, plant.n_w)
    return Scenario(rho=rho, x0=x0, w=w, seed=seed)


def _child_seed(seed: int, stream: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), int(stream), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def make_scenarios(
    plant: UncertainPlant,
    dist,
    T: int,
    seed: int,
    count: int,
    stream: int = 0,
) -> list[Scenario]:
    """Independent scenarios with per-index child seeds derived from ``seed``.

    Scenario i owns the generator ``default_rng(child_seed(seed, stream, i))``,
    so sets can be regenerated (and individual scenarios replayed) from
    recorded seeds alone.
    """
    out = []
    for i in range(count):
        child = _child_seed(seed, stream, i)
        rng = np.random.default_rng(child)
        out.append(sample_scenario(plant, dist, T, rng, seed=child))
    return out


def plant_step(plant: UncertainPlant, rho: float, x, u, w=None) -> np.ndarray:
    """One exact linear update of the plant under the configured channel."""
    x = np.asarray(x, dtype=float).reshape(4)
    u = float(np.asarray(u).reshape(()))
    if w is None:
        w = np.zeros(plant.n_w)
    w = np.asarray(w, dtype=float).reshape(plant.n_w)
    if not (np.all(np.isfinite(x)) and np.isfinite(u) and np.all(np.isfinite(w))):
        raise ValueError("plant_step requires finite x, u, w")
    Ad, Bd = plant.realize(rho)
    if plant.channel == "state":
        return Ad @ x + Bd[:, 0] * u + w
    return Ad @ x + Bd[:, 0] * (u + float(w[0]))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def scenarios_to_json(scenarios: list[Scenario]) -> str:
    payload = {
        "schema_version": 1,
        "scenarios": [
            {
                "rho": s.rho,
                "x0": s.x0.tolist(),
                "w": s.w.tolist(),
                "seed": s.seed,
            }
            for s in scenarios
        ],
    }
    return json.dumps(payload, sort_keys=True)


def scenarios_from_json(text: str) -> list[Scenario]:
    payload = json.loads(text)
    return [
        Scenario(
            rho=float(item["rho"]),
            x0=np.asarray(item["x0"], dtype=float),
            w=np.asarray(item["w"], dtype=float),
            seed=int(item["seed"]),
        )
        for item in payload["scenarios"]
    ]


def save_scenarios(path, scenarios: list[Scenario]) -> None:
    Path(path).write_text(scenarios_to_json(scenarios), encoding="utf-8")


def load_scenarios(path) -> list[Scenario]:
    return scenarios_from_json(Path(path).read_text(encoding="utf-8"))
