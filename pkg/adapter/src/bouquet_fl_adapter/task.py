"""Demo local-training task: a tiny MLP on the bundled data shard.

Deliberately small so integration runs finish in seconds; the point is the
bridging (parameters in, restricted training, parameters out), not the model.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from .env import AdapterEnv
from .limits import dataloader_workers, select_device

INPUT_DIM = 64
HIDDEN_DIM = 32
NUM_CLASSES = 3


def build_model() -> nn.Module:
    return nn.Sequential(
        nn.Linear(INPUT_DIM, HIDDEN_DIM),
        nn.ReLU(),
        nn.Linear(HIDDEN_DIM, NUM_CLASSES),
    )


def param_names() -> list[str]:
    return list(build_model().state_dict().keys())


def initial_parameters(seed: int = 0) -> dict[str, np.ndarray]:
    torch.manual_seed(seed)
    model = build_model()
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def shard_path() -> Path:
    return Path(str(resources.files("bouquet_fl_adapter").joinpath("data/demo_shard.npz")))


def load_shard() -> tuple[np.ndarray, np.ndarray]:
    with np.load(shard_path()) as shard:
        return shard["x"], shard["y"]


class ModelMismatch(Exception):
    """Incoming parameters do not fit the demo model."""


def train(
    params: dict[str, np.ndarray],
    *,
    epochs: int,
    seed: int,
    env: AdapterEnv,
    batch_size: int = 32,
) -> dict[str, np.ndarray]:
    """Run local epochs starting from `params`; returns updated parameters in
    model state order. Zero epochs is the identity on the inputs."""
    model = build_model()
    expected = list(model.state_dict().keys())
    if list(params.keys()) != expected:
        raise ModelMismatch(
            f"parameter names {list(params.keys())} do not match model {expected}"
        )
    if epochs == 0:
        return dict(params)

    state = {}
    for name, reference in model.state_dict().items():
        array = params[name]
        if tuple(array.shape) != tuple(reference.shape):
            raise ModelMismatch(
                f"tensor {name!r} has shape {tuple(array.shape)}, "
                f"model expects {tuple(reference.shape)}"
            )
        state[name] = torch.from_numpy(np.ascontiguousarray(array)).to(reference.dtype)
    model.load_state_dict(state)

    torch.manual_seed(seed)
    device = select_device(env)
    model.to(device)
    x, y = load_shard()
    dataset = TensorDataset(torch.from_numpy(x), torch.from_numpy(y))
    generator = torch.Generator().manual_seed(seed)
    loader = DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=True,
        generator=generator,
        num_workers=dataloader_workers(env),
    )
    optimizer = torch.optim.SGD(model.parameters(), lr=0.05)
    loss_fn = nn.CrossEntropyLoss()
    model.train()
    for _ in range(epochs):
        for batch_x, batch_y in loader:
            batch_x = batch_x.to(device)
            batch_y = batch_y.to(device)
            optimizer.zero_grad()
            loss_fn(model(batch_x), batch_y).backward()
            optimizer.step()
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
