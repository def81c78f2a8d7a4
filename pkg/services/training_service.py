import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from core import tensor as T
from core.network import DATASET_GEOMETRY, UnrolledNetwork, build_network, compute_gradients, forward
from core.sparse_coding import code_sparsity, stability_margin
from core.tensor import Tensor
from errors import DeadStartError, DimensionError, EmptyDatasetError, TrainingDivergedError
from models import METRICS_COLUMNS, EpochMetrics, EvalResult, TrainConfig
from services.dataset_service import Dataset, DatasetService
from services.optimizers import Optimizer, build_optimizer

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 256


@dataclass
class TrainingResult:
    network: UnrolledNetwork
    config: TrainConfig
    optimizer: Optimizer
    rng: np.random.Generator
    epoch: int = 0
    metrics: List[EpochMetrics] = field(default_factory=list)


def parameter_norms(net: UnrolledNetwork) -> Dict[str, float]:
    return {name: float(np.linalg.norm(tensor.data)) for name, tensor in net.parameters()}


def network_stability_margin(net: UnrolledNetwork, iters: int = 20, seed: int = 0) -> float:
    """Largest alpha * sigma_max(W^T W) over the distinct banks"""
    return max(
        stability_margin(bank, net.solver.alpha, net.input_shape, iters, seed) for _, bank in net.unique_banks()
    )


def write_metrics_csv(metrics: List[EpochMetrics], path: Union[str, Path]) -> None:
    """Запись метрик по эпохам в CSV"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_COLUMNS)
        writer.writeheader()
        for row in metrics:
            writer.writerow(row.model_dump())


class TrainingService:
    def __init__(self, datasets: Optional[DatasetService] = None):
        self.datasets = datasets

    def _datasets_for(self, cfg: TrainConfig) -> DatasetService:
        return self.datasets or DatasetService(cfg.data_dir)

    def load_splits(self, cfg: TrainConfig):
        """Загрузка обучающей и тестовой выборок"""
        service = self._datasets_for(cfg)
        train_set = service.load(cfg.dataset, "train", cfg.seed).head(cfg.train_limit)
        test_set = service.load(cfg.eval_dataset or cfg.dataset, "test", cfg.seed).head(cfg.test_limit)
        return train_set, test_set

    def train(
        self,
        cfg: TrainConfig,
        train_set: Optional[Dataset] = None,
        test_set: Optional[Dataset] = None,
        resume: Optional[TrainingResult] = None,
    ) -> TrainingResult:
        """
        Обучение модели cfg.model в течение cfg.epochs эпох.
        Без обучающей выборки обе выборки читаются из cfg.data_dir; без тестовой test_acc равен NaN.
        """
        if train_set is None:
            loaded_train, loaded_test = self.load_splits(cfg)
            train_set = loaded_train
            test_set = test_set if test_set is not None else loaded_test

        expected = DATASET_GEOMETRY[cfg.dataset][:3]
        if train_set.sample_shape != expected:
            raise DimensionError(f"{cfg.dataset} networks expect samples of {expected}, got {train_set.sample_shape}")

        if resume is None:
            rng = np.random.default_rng(cfg.seed)
            net = build_network(
                cfg.model, cfg.dataset, cfg.solver(), rng, cfg.tied, cfg.bn_in_recurrence, cfg.init_gain
            )
            result = TrainingResult(network=net, config=cfg, optimizer=build_optimizer(cfg), rng=rng)
        else:
            result = resume
            result.config = cfg

        if result.epoch >= cfg.epochs:
            return result
        if len(train_set) == 0:
            raise EmptyDatasetError("training set is empty")

        logger.info(
            "training %s on %s: %d samples, %d epochs, batch %d",
            cfg.model, cfg.dataset, len(train_set), cfg.epochs, cfg.batch_size,
        )
        for epoch in range(result.epoch + 1, cfg.epochs + 1):
            metrics = self._run_epoch(result, train_set, test_set, epoch)
            result.metrics.append(metrics)
            result.epoch = epoch
        return result

    def _run_epoch(self, state: TrainingResult, train_set: Dataset, test_set: Dataset, epoch: int) -> EpochMetrics:
        net, cfg = state.network, state.config
        order = state.rng.permutation(len(train_set))
        total_loss = total_sparsity = 0.0
        correct = 0
        batches_per_epoch = -(-len(train_set) // cfg.batch_size)

        for b, start in enumerate(range(0, len(train_set), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            labels = train_set.labels[idx]
            step = compute_gradients(net, Tensor(train_set.images[idx]), labels)
            batch_index = (epoch - 1) * batches_per_epoch + b

            if batch_index == 0 and not np.any(step.codes[0]):
                self._dead_start(net, cfg, train_set.images[idx])
            finite = np.isfinite(step.loss) and all(np.all(np.isfinite(g)) for g in step.gradients.values())
            if not finite:
                raise TrainingDivergedError("loss became non-finite", batch_index, parameter_norms(net))

            params = {name: tensor.data for name, tensor in net.parameters()}
            for name, value in state.optimizer.step(params, step.gradients).items():
                net.set_parameter(name, Tensor(value))

            total_loss += step.loss * len(idx)
            correct += int(np.sum(np.argmax(step.logits, axis=1) == labels))
            total_sparsity += float(np.count_nonzero(step.codes[-1] == 0.0)) / step.codes[-1].size * len(idx)

        for _, bank in net.unique_banks():
            bank.check_orbit()

        margin = network_stability_margin(net, cfg.power_iterations, cfg.seed)
        test_acc = self.evaluate(net, test_set).accuracy if test_set is not None and len(test_set) else float("nan")
        metrics = EpochMetrics(
            epoch=epoch,
            train_loss=total_loss / len(train_set),
            train_acc=correct / len(train_set),
            test_acc=test_acc,
            sparsity=total_sparsity / len(train_set),
            stability_margin=margin,
        )
        logger.info(
            "epoch %d: loss %.4f, train acc %.4f, test acc %.4f, sparsity %.3f, margin %.3f",
            metrics.epoch, metrics.train_loss, metrics.train_acc, metrics.test_acc,
            metrics.sparsity, metrics.stability_margin,
        )
        return metrics

    @staticmethod
    def _dead_start(net: UnrolledNetwork, cfg: TrainConfig, images: np.ndarray) -> None:
        """Нулевые коды на старте: ошибка, либо предупреждение при allow_dead_start"""
        bank = net.layers[0].bank
        largest = float(np.abs(net.solver.alpha * bank.analyze(Tensor(images)).data).max())
        message = (
            f"first-layer codes are all zero on the first batch: largest |alpha W^T x| is {largest:.4g}, "
            f"threshold is {net.solver.threshold:.4g}; filters and batch norm get no gradient "
            f"(use threshold_mode=scaled, or allow_dead_start to train anyway)"
        )
        if not cfg.allow_dead_start:
            raise DeadStartError(message, net.solver.threshold, largest)
        logger.warning(message)

    @staticmethod
    def evaluate(net: UnrolledNetwork, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> EvalResult:
        """Точность, средний loss и разреженность кодов последнего слоя в режиме eval"""
        if len(dataset) == 0:
            raise EmptyDatasetError("cannot evaluate on an empty dataset")
        if dataset.sample_shape != tuple(net.input_shape):
            raise DimensionError(f"network expects samples of {tuple(net.input_shape)}, dataset has {dataset.sample_shape}")
        total_loss = total_sparsity = 0.0
        correct = 0
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            labels = dataset.labels[start:start + batch_size]
            logits, codes = forward(net, Tensor(images), training=False)
            total_loss += T.cross_entropy(logits, labels).item() * len(labels)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            total_sparsity += code_sparsity(codes[-1]) * len(labels)
        return EvalResult(
            accuracy=correct / len(dataset),
            mean_loss=total_loss / len(dataset),
            mean_sparsity=total_sparsity / len(dataset),
            count=len(dataset),
        )
