"""RNN and LSTM baseline models with the same step interface as the REN.

These carry no certificate; they exist to show what happens without one.
"""

from __future__ import annotations

import numpy as np
import torch

from .ren import DT, Ren

__all__ = ["RnnCell", "LstmCell", "rnn_step", "lstm_step", "param_count"]


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    """Deterministic orthogonal matrix from a seeded generator."""
    M = rng.standard_normal((n, n))
    Qm, Rm = np.linalg.qr(M)
    return Qm * np.sign(np.diag(Rm))


def _tensor(arr) -> torch.nn.Parameter:
    return torch.nn.Parameter(torch.as_tensor(np.asarray(arr, dtype=float), dtype=DT))


class RnnCell(torch.nn.Module):
    """Elman cell h' = act(W_h h + W_u u + b), y = W_y h' + b_y.

    Recurrent weights start orthogonal scaled by 0.9, biases at zero; the
    output map is shrunk by ``output_scale`` so the initial response is small.
    """

    kind = "rnn"

    def __init__(self, n_u: int, n_y: int, hidden: int, activation: str = "relu",
                 seed: int | None = 0, output_scale: float = 0.1):
        super().__init__()
        if hidden < 1:
            raise ValueError("hidden width must be at least 1")
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.n_u, self.n_y, self.hidden = n_u, n_y, hidden
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.W_h = _tensor(0.9 * _orthogonal(rng, hidden))
        self.W_u = _tensor(rng.standard_normal((hidden, n_u)) / np.sqrt(n_u))
        self.b = _tensor(np.zeros(hidden))
        self.W_y = _tensor(
            output_scale * rng.standard_normal((n_y, hidden)) / np.sqrt(hidden))
        self.b_y = _tensor(np.zeros(n_y))

    def _act(self, v):
        return torch.relu(v) if self.activation == "relu" else torch.tanh(v)

    def step(self, h, u):
        h_next = self._act(h @ self.W_h.T + u @ self.W_u.T + self.b)
        y = h_next @ self.W_y.T + self.b_y
        return h_next, y

    def prepare(self):
        return self

    def init_state(self, batch: int):
        return torch.zeros((batch, self.hidden), dtype=DT)

    def to_config(self) -> dict:
        return {"n_u": self.n_u, "n_y": self.n_y, "hidden": self.hidden,
                "activation": self.activation}


class LstmCell(torch.nn.Module):
    """Standard LSTM cell with gate order (input, forget, cell, output) and a
    linear output map y = W_y h' + b_y."""

    kind = "lstm"

    def __init__(self, n_u: int, n_y: int, hidden: int,
                 seed: int | None = 0, output_scale: float = 0.1):
        super().__init__()
        if hidden < 1:
            raise ValueError("hidden width must be at least 1")
        self.n_u, self.n_y, self.hidden = n_u, n_y, hidden
        rng = np.random.default_rng(seed)
        W_hh = np.concatenate([0.9 * _orthogonal(rng, hidden) for _ in range(4)])
        self.W_ih = _tensor(rng.standard_normal((4 * hidden, n_u)) / np.sqrt(n_u))
        self.W_hh = _tensor(W_hh)
        self.b = _tensor(np.zeros(4 * hidden))
        self.W_y = _tensor(
            output_scale * rng.standard_normal((n_y, hidden)) / np.sqrt(hidden))
        self.b_y = _tensor(np.zeros(n_y))

    def step(self, state, u):
        h, c = state
        gates = u @ self.W_ih.T + h @ self.W_hh.T + self.b
        i, f, g, o = torch.split(gates, self.hidden, dim=-1)
        c_next = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_next = torch.sigmoid(o) * torch.tanh(c_next)
        y = h_next @ self.W_y.T + self.b_y
        return (h_next, c_next), y

    def prepare(self):
        return self

    def init_state(self, batch: int):
        zeros = torch.zeros((batch, self.hidden), dtype=DT)
        return (zeros, zeros.clone())

    def to_config(self) -> dict:
        return {"n_u": self.n_u, "n_y": self.n_y, "hidden": self.hidden}


def rnn_step(cell: RnnCell, h, u):
    return cell.step(h, u)


def lstm_step(cell: LstmCell, state, u):
    return cell.step(state, u)


def param_count(model) -> int:
    """Exact number of trainable scalars."""
    if isinstance(model, Ren):
        return int(model.theta.numel())
    return int(sum(p.numel() for p in model.parameters()))
