"""Checkpoint container: one JSON header line + little-endian float64 payload.

The same container stores REN, RNN and LSTM parameters (the header carries a
model-kind tag) and, for policies, a policy header line prepended to the model
record.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .baselines import LstmCell, RnnCell
from .ren import IqcSpec, Ren, RenDims
from .train import get_flat_params, set_flat_params

__all__ = [
    "FORMAT_VERSION",
    "save_checkpoint",
    "load_checkpoint",
    "save_model",
    "load_model",
    "save_policy_bundle",
    "load_policy_bundle",
]

FORMAT_VERSION = 1


def _header_bytes(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"


def save_checkpoint(path, model_kind: str, config: dict, theta: np.ndarray) -> None:
    theta = np.asarray(theta, dtype=float).ravel()
    header = {
        "format_version": FORMAT_VERSION,
        "model_kind": model_kind,
        "n_params": int(theta.size),
        "config": config,
    }
    with open(path, "wb") as fh:
        fh.write(_header_bytes(header))
        fh.write(theta.astype("<f8").tobytes())


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format version {header.get('format_version')}")
    theta = np.frombuffer(raw[nl + 1:], dtype="<f8").copy()
    if theta.size != header["n_params"]:
        raise ValueError(
            f"checkpoint payload has {theta.size} values, header says "
            f"{header['n_params']}")
    return header, theta


class _FlatWrapper:
    """Adapts the flat-parameter helpers to bare torch modules."""

    def __init__(self, module):
        self.trainable = module


def save_model(path, model) -> None:
    if isinstance(model, Ren):
        save_checkpoint(path, "ren", model.to_config(),
                        model.theta.detach().numpy())
        return
    if isinstance(model, (RnnCell, LstmCell)):
        save_checkpoint(path, model.kind, model.to_config(),
                        get_flat_params(_FlatWrapper(model)))
        return
    raise ValueError(f"cannot checkpoint model of type {type(model).__name__}")


def load_model(path):
    header, theta = load_checkpoint(path)
    kind = header["model_kind"]
    cfg = header["config"]
    if kind == "ren":
        dims = RenDims(**cfg["dims"])
        model = Ren(dims, IqcSpec.from_config(cfg["iqc"]),
                    acyclic=cfg["acyclic"], theta=theta)
        return model
    if kind == "rnn":
        model = RnnCell(**cfg)
    elif kind == "lstm":
        model = LstmCell(**cfg)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    set_flat_params(_FlatWrapper(model), theta)
    return model


def save_policy_bundle(path, policy) -> None:
    """Policy header (kind, gain, nominal parameter, budget) followed by the
    augmentation model's checkpoint record."""
    model = policy.trainable
    if isinstance(model, Ren):
        kind, cfg, theta = "ren", model.to_config(), model.theta.detach().numpy()
    elif isinstance(model, (RnnCell, LstmCell)):
        kind, cfg, theta = model.kind, model.to_config(), get_flat_params(policy)
    else:
        raise ValueError(f"cannot checkpoint model of type {type(model).__name__}")
    theta = np.asarray(theta, dtype=float).ravel()
    policy_header = {"format_version": FORMAT_VERSION, "policy": policy.to_config()}
    model_header = {
        "format_version": FORMAT_VERSION,
        "model_kind": kind,
        "n_params": int(theta.size),
        "config": cfg,
    }
    with open(path, "wb") as fh:
        fh.write(_header_bytes(policy_header))
        fh.write(_header_bytes(model_header))
        fh.write(theta.astype("<f8").tobytes())


def load_policy_bundle(path):
    """Returns (policy_config, model); the caller rebuilds the policy around
    its plant."""
    raw = Path(path).read_bytes()
    first = raw.index(b"\n")
    policy_header = json.loads(raw[:first].decode("utf-8"))
    second = raw.index(b"\n", first + 1)
    model_header = json.loads(raw[first + 1:second].decode("utf-8"))
    theta = np.frombuffer(raw[second + 1:], dtype="<f8").copy()
    if theta.size != model_header["n_params"]:
        raise ValueError("policy bundle payload size mismatch")
    kind = model_header["model_kind"]
    cfg = model_header["config"]
    if kind == "ren":
        model = Ren(RenDims(**cfg["dims"]), IqcSpec.from_config(cfg["iqc"]),
                    acyclic=cfg["acyclic"], theta=theta)
    elif kind == "rnn":
        model = RnnCell(**cfg)
        set_flat_params(_FlatWrapper(model), theta)
    elif kind == "lstm":
        model = LstmCell(**cfg)
        set_flat_params(_FlatWrapper(model), theta)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return policy_header["policy"], model
