"""
Proximal-gradient sparse coding on a filter-bank dictionary.

One layer computes ``S(y + alpha * W^T (x - W y))`` where y is the current code
(ISTA) or its momentum extrapolation (FISTA). The threshold is
``SolverConfig.threshold``: λ itself in "literal" mode, α·λ in "scaled" mode.
In literal mode the fixed points are lasso minimizers for the penalty λ/α, not
λ; ``SolverConfig.effective_penalty`` gives that value for objective checks.

Every code starts from z^(0) = 0. All per-layer codes are returned so callers
can interleave other operations (batch norm) between layers.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core import tensor as T
from core.filterbank import FilterBank
from core.tensor import Tensor
from models import SolverConfig

logger = logging.getLogger(__name__)

Banks = Union[FilterBank, Sequence[FilterBank]]


def soft_threshold(u: Tensor, lam: float) -> Tensor:
    """Мягкий порог S_lam поэлементно"""
    if lam < 0:
        raise ValueError(f"threshold must be non-negative, got {lam}")
    return T.soft_shrink(u, lam)


def gradient_step(y: Tensor, x: Tensor, bank: FilterBank, alpha: float, atoms: Optional[Tensor] = None) -> Tensor:
    """y + alpha * W^T (x - W y)"""
    atoms = bank.expand() if atoms is None else atoms
    residual = T.sub(x, bank.synthesize(y, x.shape, atoms))
    return T.add(y, T.scale(bank.analyze(residual, atoms), alpha))


def ista_step(z: Tensor, x: Tensor, bank: FilterBank, cfg: SolverConfig, atoms: Optional[Tensor] = None) -> Tensor:
    """Один шаг ISTA"""
    return soft_threshold(gradient_step(z, x, bank, cfg.alpha, atoms), cfg.threshold)


def residual_form_step(
    z: Tensor, x: Tensor, bank: FilterBank, cfg: SolverConfig, atoms: Optional[Tensor] = None
) -> Tensor:
    """S(W_z z + W_x x) with W_z = I - alpha W^T W and W_x = alpha W^T"""
    atoms = bank.expand() if atoms is None else atoms
    w_z = T.sub(z, T.scale(bank.analyze(bank.synthesize(z, x.shape, atoms), atoms), cfg.alpha))
    w_x = T.scale(bank.analyze(x, atoms), cfg.alpha)
    return soft_threshold(T.add(w_z, w_x), cfg.threshold)


class FistaMomentum:
    """
    Scalar sequence t_1 = 1, t_{l+1} = (1 + sqrt(1 + 4 t_l^2)) / 2 and the
    extrapolation y = z + ((t_l - 1) / t_{l+1}) (z - z_prev).
    One instance per unroll; a single sequence runs across all layers.
    """

    def __init__(self):
        self.t = 1.0

    def extrapolate(self, current: Tensor, previous: Tensor) -> Tensor:
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * self.t * self.t)) / 2.0
        coefficient = (self.t - 1.0) / t_next
        self.t = t_next
        if coefficient == 0.0:
            return current
        return T.add(current, T.scale(T.sub(current, previous), coefficient))


def _per_layer(banks: Banks, num_layers: int) -> List[FilterBank]:
    if isinstance(banks, FilterBank):
        return [banks] * num_layers
    banks = list(banks)
    if len(banks) != num_layers:
        raise ValueError(f"{len(banks)} banks given for {num_layers} layers")
    return banks


def unroll(x: Tensor, banks: Banks, cfg: SolverConfig) -> List[Tensor]:
    """L layers of ISTA or FISTA (per ``cfg.acceleration``) from a zero code"""
    layers = _per_layer(banks, cfg.num_layers)
    z = T.zeros(layers[0].code_shape(x.shape))
    previous = z
    momentum = FistaMomentum()
    codes = []
    for bank in layers:
        y = momentum.extrapolate(z, previous) if cfg.acceleration == "fista" else z
        previous, z = z, ista_step(y, x, bank, cfg)
        codes.append(z)
    return codes


def fista_unroll(x: Tensor, banks: Banks, cfg: SolverConfig) -> List[Tensor]:
    return unroll(x, banks, cfg.model_copy(update={"acceleration": "fista"}))


def lasso_objective(z: Tensor, x: Tensor, bank: FilterBank, lam: float) -> float:
    """0.5 * ||x - W z||^2 + lam * ||z||_1"""
    residual = x.data - bank.synthesize(z, x.shape).data
    return float(0.5 * np.vdot(residual, residual) + lam * np.abs(z.data).sum())


def code_sparsity(code: Tensor) -> float:
    """Fraction of exactly-zero entries"""
    return float(np.count_nonzero(code.data == 0.0)) / code.size


def stability_margin(
    bank: FilterBank, alpha: float, signal_shape: Tuple[int, ...], iters: int = 20, seed: int = 0
) -> float:
    """alpha * sigma_max(W^T W); ISTA is only guaranteed to descend when this is <= 1"""
    margin = bank.stability_margin(alpha, signal_shape, iters, seed)
    if margin > 1.0:
        logger.warning("step size outside the stability region: alpha * sigma_max = %.3f", margin)
    return margin
