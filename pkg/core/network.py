"""
Unrolled sparse-coding classifiers.

A network is L unrolled proximal-gradient layers over the same input x, each
with its own filter bank (untied) or one shared bank (tied). Batch norm follows
every layer except the last. By default the normalized code is what the next
layer continues from (``bn_in_recurrence``); with the flag off, batch norm only
produces the reported per-layer codes and the recurrence runs on raw codes.

The classifier head global-average-pools the final code per channel and
applies one linear layer.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from core import tensor as T
from core.filterbank import FilterBank
from core.rotation import CyclicGroup, make_rotation
from core.sparse_coding import FistaMomentum, ista_step
from core.tensor import GradTape, Tensor
from errors import DimensionError, GroupError, LabelError, UninitializedStatisticsError
from models import ParameterBreakdown, SolverConfig

logger = logging.getLogger(__name__)

NUM_CLASSES = 10
CONV_ATOMS = 60
DENSE_ATOMS = 256

# (channels, height, width, conv kernel)
DATASET_GEOMETRY: Dict[str, Tuple[int, int, int, int]] = {
    "mnist": (1, 28, 28, 7),
    "rot-mnist": (1, 28, 28, 7),
    "cifar10": (3, 32, 32, 8),
}

# (operator, group order)
ARCHITECTURES: Dict[str, Tuple[str, int]] = {
    "baseline": ("conv", 1),
    "r90": ("conv", 4),
    "r60": ("conv", 6),
    "dense-baseline": ("dense", 1),
    "dense-r90": ("dense", 4),
    "dense-r60": ("dense", 6),
}

# published CIFAR-10 totals, shown next to ours for comparison only
REPORTED_CIFAR10_TOTALS: Dict[str, int] = {"baseline": 56_290, "r90": 21_730, "r60": 17_890}


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    eps: float = 1e-5
    momentum: float = 0.1
    num_batches: int = 0

    @classmethod
    def create(cls, channels: int) -> "BatchNormState":
        return cls(gamma=T.ones((channels,)), beta=T.zeros((channels,)))

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            out, mu, var = T.batch_norm_train(x, self.gamma, self.beta, self.eps)
            self._update_running(mu, var, x.size // x.shape[1])
            return out
        if not self.initialized:
            raise UninitializedStatisticsError("batch norm has no running statistics; train first")
        return T.batch_norm_eval(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)

    def _update_running(self, mu: np.ndarray, var: np.ndarray, count: int) -> None:
        unbiased = var * count / max(count - 1, 1)
        if self.running_mean is None:
            self.running_mean = np.zeros_like(mu)
            self.running_var = np.ones_like(var)
        self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mu
        self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * unbiased
        self.num_batches += 1


@dataclass
class ClassifierHead:
    weight: Tensor  # [classes, features]
    bias: Tensor  # [classes]

    @classmethod
    def initialize(cls, features: int, rng: np.random.Generator, classes: int = NUM_CLASSES) -> "ClassifierHead":
        weight = rng.standard_normal((classes, features)) / np.sqrt(features)
        return cls(Tensor(weight), T.zeros((classes,)))

    @classmethod
    def zeros(cls, features: int, classes: int = NUM_CLASSES) -> "ClassifierHead":
        return cls(T.zeros((classes, features)), T.zeros((classes,)))

    def __call__(self, features: Tensor) -> Tensor:
        if features.ndim != 2 or features.shape[1] != self.weight.shape[1]:
            raise DimensionError(f"head expects [B, {self.weight.shape[1]}] features, got {features.shape}")
        return T.add_bias(T.matmul(features, T.transpose(self.weight)), self.bias)


@dataclass
class NetworkLayer:
    bank: FilterBank
    norm: Optional[BatchNormState] = None


@dataclass
class UnrolledNetwork:
    layers: List[NetworkLayer]
    solver: SolverConfig
    head: ClassifierHead
    input_shape: Tuple[int, int, int]
    mode: str = "conv"
    tied: bool = False
    bn_in_recurrence: bool = True
    model_name: Optional[str] = None
    dataset_name: Optional[str] = None

    def unique_banks(self) -> List[Tuple[int, FilterBank]]:
        seen, banks = set(), []
        for i, layer in enumerate(self.layers):
            if id(layer.bank) not in seen:
                seen.add(id(layer.bank))
                banks.append((i, layer.bank))
        return banks

    def parameters(self) -> List[Tuple[str, Tensor]]:
        params = [(f"layers.{i}.basis", bank.basis) for i, bank in self.unique_banks()]
        for i, layer in enumerate(self.layers):
            if layer.norm is not None:
                params.append((f"layers.{i}.bn.gamma", layer.norm.gamma))
                params.append((f"layers.{i}.bn.beta", layer.norm.beta))
        params.append(("head.weight", self.head.weight))
        params.append(("head.bias", self.head.bias))
        return params

    def set_parameter(self, name: str, value: Tensor) -> None:
        parts = name.split(".")
        if parts[0] == "head":
            current = getattr(self.head, parts[1])
            if value.shape != current.shape:
                raise DimensionError(f"{name}: expected {current.shape}, got {value.shape}")
            setattr(self.head, parts[1], value)
            return
        layer = self.layers[int(parts[1])]
        if parts[2] == "basis":
            layer.bank.update_basis(value)
            return
        current = getattr(layer.norm, parts[3])
        if value.shape != current.shape:
            raise DimensionError(f"{name}: expected {current.shape}, got {value.shape}")
        setattr(layer.norm, parts[3], value)

    def norms(self) -> List[Tuple[int, BatchNormState]]:
        return [(i, layer.norm) for i, layer in enumerate(self.layers) if layer.norm is not None]

    def forward(self, batch: Tensor, training: bool = False) -> Tuple[Tensor, List[Tensor]]:
        return forward(self, batch, training)


def forward(net: UnrolledNetwork, batch: Tensor, training: bool = False) -> Tuple[Tensor, List[Tensor]]:
    """Logits [B, classes] and the per-layer codes (post batch norm where applied)"""
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(net.input_shape):
        raise DimensionError(f"network expects batches of {net.input_shape}, got {batch.shape}")
    atoms = {id(bank): bank.expand() for _, bank in net.unique_banks()}

    z = T.zeros(net.layers[0].bank.code_shape(batch.shape))
    previous = z
    momentum = FistaMomentum()
    codes = []
    for layer in net.layers:
        y = momentum.extrapolate(z, previous) if net.solver.acceleration == "fista" else z
        raw = ista_step(y, batch, layer.bank, net.solver, atoms[id(layer.bank)])
        tap = raw if layer.norm is None else layer.norm(raw, training)
        previous, z = z, (tap if net.bn_in_recurrence else raw)
        codes.append(tap)

    features = T.mean(codes[-1], axis=(2, 3))
    return net.head(features), codes


@dataclass
class GradientResult:
    loss: float
    gradients: Dict[str, np.ndarray]
    logits: np.ndarray
    codes: List[np.ndarray] = field(repr=False)


def _check_labels(labels: np.ndarray, batch: Tensor) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch.shape[0],):
        raise DimensionError(f"{labels.shape} labels for a batch of {batch.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
        raise LabelError(f"labels must lie in [0, {NUM_CLASSES}), got range [{labels.min()}, {labels.max()}]")
    return labels


def compute_gradients(net: UnrolledNetwork, batch: Tensor, labels: np.ndarray) -> GradientResult:
    """Loss, градиенты, логиты и коды на одном обучающем батче"""
    labels = _check_labels(labels, batch)
    params = net.parameters()
    with GradTape() as tape:
        tape.watch(*(tensor for _, tensor in params))
        logits, codes = forward(net, batch, training=True)
        loss = T.cross_entropy(logits, labels)
    grads = T.backward(tape, loss)
    return GradientResult(
        loss=loss.item(),
        gradients={name: grads[tensor] for name, tensor in params},
        logits=logits.data,
        codes=[code.data for code in codes],
    )


def loss_and_grads(net: UnrolledNetwork, batch: Tensor, labels: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean cross-entropy and its gradient for every learnable parameter"""
    result = compute_gradients(net, batch, labels)
    return result.loss, result.gradients


# ---------------------------------------------------------------------------
# Equivariance checks
# ---------------------------------------------------------------------------

def rotation_equivariance_deviation(bank: FilterBank, x: Tensor, cfg: Optional[SolverConfig] = None) -> float:
    """
    Single thresholding layer z(x) = S(alpha W^T x), no batch norm.

    Compares z(R x) against R z(x) with channels shifted by one inside every
    k-block. Exact for quarter turns with odd filters; for other angles the
    value measures interpolation error.
    """
    cfg = cfg or SolverConfig(num_layers=1)
    xb = x if x.ndim == 4 else Tensor(x.data[None])
    k = bank.order
    generator = bank.group.generator
    image_op = make_rotation(
        generator.angle_degrees, xb.shape[-2:], kind="quarter_turn" if bank.group.exact else "bilinear"
    )

    def encode(signal: Tensor) -> np.ndarray:
        return ista_step(T.zeros(bank.code_shape(signal.shape)), signal, bank, cfg).data

    codes = encode(xb)
    rotated_codes = encode(Tensor(image_op.forward(xb.data)))

    spatial = codes if bank.operator == "dense" else make_rotation(
        generator.angle_degrees, codes.shape[-2:], kind=image_op.kind
    ).forward(codes)
    blocks = spatial.reshape(spatial.shape[0], bank.num_basis, k, *spatial.shape[2:])
    expected = np.roll(blocks, 1, axis=2).reshape(spatial.shape)

    deviation = float(np.max(np.abs(rotated_codes - expected)))
    if not bank.group.exact:
        logger.info("equivariance deviation at %.1f degrees: %.3e", generator.angle_degrees, deviation)
    return deviation


def check_r90_equivariance(bank: FilterBank, x: Tensor, cfg: Optional[SolverConfig] = None) -> float:
    """Проверка точной эквивариантности к повороту на 90°"""
    if bank.order != 4 or not bank.group.exact:
        raise GroupError(f"needs an exact quarter-turn group of order 4, got order {bank.order}")
    h, w = bank.kernel_hw
    if bank.operator == "conv" and bank.padding == "same" and (h % 2 == 0 or w % 2 == 0):
        # even kernels pad one extra row/column bottom/right, which a quarter turn moves
        raise GroupError(f"exact quarter-turn equivariance needs odd conv kernels, got {h}x{w}")
    return rotation_equivariance_deviation(bank, x, cfg)


# ---------------------------------------------------------------------------
# Construction and accounting
# ---------------------------------------------------------------------------

def build_network(
    model: str,
    dataset: str,
    solver: Optional[SolverConfig] = None,
    rng: Optional[np.random.Generator] = None,
    tied: bool = False,
    bn_in_recurrence: bool = True,
    init_gain: float = 1.0,
) -> UnrolledNetwork:
    """Сборка модели: baseline / R90 / R60, свёрточная или полносвязная"""
    if model not in ARCHITECTURES:
        raise ValueError(f"unknown model {model!r}")
    if dataset not in DATASET_GEOMETRY:
        raise ValueError(f"unknown dataset {dataset!r}")
    solver = solver or SolverConfig()
    rng = rng or np.random.default_rng(0)
    operator, order = ARCHITECTURES[model]
    channels, height, width, kernel = DATASET_GEOMETRY[dataset]

    if operator == "conv":
        num_basis, kernel_hw, padding = CONV_ATOMS // order, (kernel, kernel), "same"
    else:
        num_basis, kernel_hw, padding = int(round(DENSE_ATOMS / order)), (height, width), "valid"
    group = CyclicGroup.of_order(order, kernel_hw)

    def new_bank() -> FilterBank:
        return FilterBank.initialize(num_basis, channels, kernel_hw, group, rng, operator, padding, init_gain)

    shared = new_bank() if tied else None
    layers = []
    for i in range(solver.num_layers):
        bank = shared if tied else new_bank()
        norm = BatchNormState.create(bank.num_atoms) if i < solver.num_layers - 1 else None
        layers.append(NetworkLayer(bank, norm))

    head = ClassifierHead.initialize(layers[0].bank.num_atoms, rng)
    net = UnrolledNetwork(
        layers=layers,
        solver=solver,
        head=head,
        input_shape=(channels, height, width),
        mode=operator,
        tied=tied,
        bn_in_recurrence=bn_in_recurrence,
        model_name=model,
        dataset_name=dataset,
    )
    logger.debug("built %s for %s: %d x %d atoms of %s", model, dataset, num_basis, order, kernel_hw)
    return net


def count_parameters(net: UnrolledNetwork) -> ParameterBreakdown:
    """Подсчёт обучаемых параметров; скользящие статистики BN не учитываются"""
    filters = sum(bank.count_trainable() for _, bank in net.unique_banks())
    batchnorm = sum(norm.gamma.size + norm.beta.size for _, norm in net.norms())
    head = net.head.weight.size + net.head.bias.size if net.layers else 0
    reported = None
    if net.dataset_name == "cifar10":
        reported = REPORTED_CIFAR10_TOTALS.get(net.model_name)
    return ParameterBreakdown(
        filters=filters, batchnorm=batchnorm, head=head, total=filters + batchnorm + head, reported_total=reported
    )
