"""Self-describing checkpoint files for the two networks.

Each checkpoint carries its architecture profile, training step, and
optimizer state, so any consuming command can rebuild the exact network.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .descriptor import DescriptorNetwork, DescriptorState
from .detector import DetectorNetwork, DetectorState

CHECKPOINT_SCHEMA = 1


def save_descriptor(path: str | Path, state: DescriptorState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "schema_version": CHECKPOINT_SCHEMA,
            "kind": "descriptor",
            "profile": state.profile,
            "step": state.step,
            "model_state": state.network.state_dict(),
            "optimizer_state": state.optimizer_state,
        },
        path,
    )


def load_descriptor(path: str | Path) -> DescriptorState:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("kind") != "descriptor":
        raise ValueError(f"{path} is not a descriptor checkpoint")
    network = DescriptorNetwork.from_profile(payload["profile"])
    network.load_state_dict(payload["model_state"])
    network.eval()
    return DescriptorState(
        network,
        step=int(payload.get("step", 0)),
        optimizer_state=payload.get("optimizer_state"),
    )


def save_detector(path: str | Path, state: DetectorState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "schema_version": CHECKPOINT_SCHEMA,
            "kind": "detector",
            "profile": state.profile,
            "target_kind": state.target_kind,
            "input_size": state.input_size,
            "step": state.step,
            "model_state": state.network.state_dict(),
            "optimizer_state": state.optimizer_state,
        },
        path,
    )


def load_detector(path: str | Path) -> DetectorState:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    if payload.get("kind") != "detector":
        raise ValueError(f"{path} is not a detector checkpoint")
    network = DetectorNetwork.from_profile(payload["profile"])
    network.load_state_dict(payload["model_state"])
    network.eval()
    return DetectorState(
        network,
        target_kind=payload["target_kind"],
        input_size=int(payload["input_size"]),
        step=int(payload.get("step", 0)),
        optimizer_state=payload.get("optimizer_state"),
    )
