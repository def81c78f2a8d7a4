"""
Checkpoints: the training config, every learnable tensor, batch-norm running
statistics, optimizer buffers, the RNG state and the epoch counter, stored in
the tensor container (see ``storage``).
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from core.network import UnrolledNetwork, build_network
from core.tensor import Tensor
from errors import ContainerFormatError, DimensionError
from models import TrainConfig
from services.optimizers import Optimizer, build_optimizer
from services.training_service import TrainingResult
from storage import Container, read_container, write_container

logger = logging.getLogger(__name__)

KIND = "checkpoint"


@dataclass
class Checkpoint:
    network: UnrolledNetwork
    config: TrainConfig
    epoch: int
    rng: np.random.Generator
    optimizer: Optimizer

    def as_training_state(self) -> TrainingResult:
        """Состояние для продолжения обучения"""
        return TrainingResult(
            network=self.network, config=self.config, optimizer=self.optimizer, rng=self.rng, epoch=self.epoch
        )


def save_checkpoint(
    net: UnrolledNetwork,
    path: Union[str, Path],
    config: TrainConfig,
    epoch: int = 0,
    rng: Optional[np.random.Generator] = None,
    optimizer: Optional[Optimizer] = None,
) -> None:
    """Сохранение весов, статистик BN, состояния оптимизатора и RNG"""
    tensors = {name: tensor.data for name, tensor in net.parameters()}
    batches = {}
    for i, norm in net.norms():
        if norm.initialized:
            tensors[f"layers.{i}.bn.running_mean"] = norm.running_mean
            tensors[f"layers.{i}.bn.running_var"] = norm.running_var
            batches[str(i)] = norm.num_batches
    if optimizer is not None:
        tensors.update({f"optimizer.{name}": value for name, value in optimizer.state().items()})

    metadata = {
        "config": config.model_dump(mode="json"),
        "epoch": epoch,
        "bn_batches": batches,
        "optimizer": None if optimizer is None else {"kind": optimizer.kind, "steps": optimizer.steps},
        # PCG64 state holds 128-bit integers; kept as a JSON string so they survive exactly
        "rng_state": None if rng is None else json.dumps(rng.bit_generator.state),
    }
    write_container(path, Container(kind=KIND, metadata=metadata, tensors=tensors))
    logger.info("saved checkpoint (epoch %d) to %s", epoch, path)


def _restore_rng(state: Optional[str], seed: int) -> np.random.Generator:
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = json.loads(state)
    return rng


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Загрузка чекпоинта"""
    container = read_container(path, kind=KIND)
    meta = container.metadata
    try:
        config = TrainConfig.model_validate(meta["config"])
    except (KeyError, ValueError) as exc:
        raise ContainerFormatError(f"checkpoint config is unreadable: {exc}", str(path)) from exc

    net = build_network(
        config.model,
        config.dataset,
        config.solver(),
        np.random.default_rng(config.seed),
        config.tied,
        config.bn_in_recurrence,
        config.init_gain,
    )
    tensors = container.tensors
    for name, _ in net.parameters():
        if name not in tensors:
            raise ContainerFormatError(f"checkpoint lacks tensor {name!r}", str(path))
        try:
            net.set_parameter(name, Tensor(tensors[name]))
        except DimensionError as exc:
            raise ContainerFormatError(f"tensor {name!r} does not fit the network: {exc}", str(path)) from exc

    for i, norm in net.norms():
        mean_key, var_key = f"layers.{i}.bn.running_mean", f"layers.{i}.bn.running_var"
        if mean_key in tensors:
            norm.running_mean = tensors[mean_key]
            norm.running_var = tensors[var_key]
            norm.num_batches = int(meta.get("bn_batches", {}).get(str(i), 0))

    optimizer = build_optimizer(config)
    saved = meta.get("optimizer")
    if saved is not None:
        prefix = "optimizer."
        optimizer.load_state(
            {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}, int(saved["steps"])
        )

    return Checkpoint(
        network=net,
        config=config,
        epoch=int(meta.get("epoch", 0)),
        rng=_restore_rng(meta.get("rng_state"), config.seed),
        optimizer=optimizer,
    )
