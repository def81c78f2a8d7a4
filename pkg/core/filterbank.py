"""
Filter banks tied by a cyclic rotation group.

A bank holds m learnable basis filters ``[m, C_in, h, w]`` and materializes the
m*k dictionary atoms as their group orbits. Layout is basis-major: the k
rotations of basis filter i sit in slots i*k ... i*k + k - 1.

The bank also acts as the dictionary of one unrolled layer. ``operator``
selects how the atoms act on a signal:

* ``conv``: atoms are convolution filters; analysis is correlation (W^T),
  synthesis the transposed correlation (W). Codes are [B, m*k, H', W'].
* ``dense``: atoms are full-signal vectors; analysis/synthesis are matmuls
  against the flattened atoms. Codes are [B, m*k, 1, 1], so both modes share
  the same code layout downstream.
"""

import logging
from typing import Literal, Optional, Tuple

import numpy as np

from core import tensor as T
from core.rotation import CyclicGroup
from core.tensor import Padding, Tensor
from errors import DimensionError, OrbitConsistencyError

logger = logging.getLogger(__name__)

OperatorKind = Literal["conv", "dense"]


class FilterBank:
    def __init__(
        self,
        basis: Tensor,
        group: CyclicGroup,
        operator: OperatorKind = "conv",
        padding: Padding = "same",
    ):
        if basis.ndim != 4:
            raise DimensionError(f"basis must be [m, C_in, h, w], got {basis.shape}")
        if tuple(basis.shape[-2:]) != tuple(group.grid_size):
            raise DimensionError(f"basis grid {basis.shape[-2:]} differs from group grid {group.grid_size}")
        if operator not in ("conv", "dense"):
            raise ValueError(f"unknown operator kind {operator!r}")
        self.group = group
        self.operator = operator
        self.padding = padding
        self._basis = basis
        self._expanded = self._materialize(basis.data)

    @classmethod
    def initialize(
        cls,
        num_basis: int,
        in_channels: int,
        kernel_hw: Tuple[int, int],
        group: CyclicGroup,
        rng: np.random.Generator,
        operator: OperatorKind = "conv",
        padding: Padding = "same",
        gain: float = 1.0,
    ) -> "FilterBank":
        """Zero-mean Gaussian basis scaled by gain / sqrt(C_in * h * w)"""
        fan_in = in_channels * kernel_hw[0] * kernel_hw[1]
        basis = rng.standard_normal((num_basis, in_channels, *kernel_hw)) * (gain / np.sqrt(fan_in))
        return cls(Tensor(basis), group, operator, padding)

    @classmethod
    def from_matrix(cls, atoms: np.ndarray) -> "FilterBank":
        """Dense bank whose columns of ``atoms`` [n_features, n_atoms] are the dictionary"""
        atoms = np.asarray(atoms, dtype=np.float64)
        n_features, n_atoms = atoms.shape
        basis = atoms.T.reshape(n_atoms, 1, 1, n_features)
        return cls(Tensor(basis), CyclicGroup.of_order(1, (1, n_features)), operator="dense", padding="valid")

    # -- parameters -------------------------------------------------------

    @property
    def basis(self) -> Tensor:
        return self._basis

    @property
    def num_basis(self) -> int:
        return self._basis.shape[0]

    @property
    def order(self) -> int:
        return self.group.order

    @property
    def num_atoms(self) -> int:
        return self.num_basis * self.order

    @property
    def in_channels(self) -> int:
        return self._basis.shape[1]

    @property
    def kernel_hw(self) -> Tuple[int, int]:
        return tuple(self._basis.shape[-2:])

    def update_basis(self, basis: Tensor) -> None:
        """Replaces the basis and re-expands the orbit immediately"""
        if basis.shape != self._basis.shape:
            raise DimensionError(f"new basis {basis.shape} differs from {self._basis.shape}")
        self._basis = basis
        self._expanded = self._materialize(basis.data)

    # -- orbit ------------------------------------------------------------

    def _materialize(self, basis: np.ndarray) -> np.ndarray:
        m, k = basis.shape[0], self.group.order
        out = np.empty((m * k,) + basis.shape[1:])
        for j, element in enumerate(self.group.elements):
            out[j::k] = element.forward(basis)
        return out

    def accumulate_basis_gradient(self, grad_expanded: np.ndarray) -> np.ndarray:
        """dL/d basis[i] = sum_j R_j^T (dL/d expanded[i*k + j])"""
        grad_expanded = np.asarray(grad_expanded)
        expected = (self.num_atoms,) + self._basis.shape[1:]
        if grad_expanded.shape != expected:
            raise DimensionError(f"expanded gradient {grad_expanded.shape} does not match {expected}")
        k = self.group.order
        grad = np.zeros(self._basis.shape)
        for j, element in enumerate(self.group.elements):
            grad += element.adjoint(grad_expanded[j::k])
        return grad

    def expand(self) -> Tensor:
        """
        The m*k atoms. Under an active tape that tracks the basis the cached
        expansion is recorded with ``accumulate_basis_gradient`` as its adjoint.
        """
        return T.linear_map(
            self._basis,
            self._materialize,
            self.accumulate_basis_gradient,
            name="expand_bank",
            precomputed=self._expanded,
        )

    def check_orbit(self) -> None:
        fresh = self._materialize(self._basis.data)
        if not np.array_equal(fresh, self._expanded):
            raise OrbitConsistencyError("cached expansion differs from the rotations of the basis")

    def count_trainable(self) -> int:
        return int(self._basis.size)

    # -- dictionary -------------------------------------------------------

    def code_shape(self, signal_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Shape of the codes for a signal batch [B, C, H, W]"""
        batch, channels = signal_shape[0], signal_shape[1]
        if channels != self.in_channels:
            raise DimensionError(f"bank expects {self.in_channels} channels, signal has {channels}")
        if self.operator == "dense":
            return (batch, self.num_atoms, 1, 1)
        h, w = self.kernel_hw
        if self.padding == "same":
            return (batch, self.num_atoms) + tuple(signal_shape[2:])
        return (batch, self.num_atoms, signal_shape[2] - h + 1, signal_shape[3] - w + 1)

    def _dense_atoms(self, atoms: Tensor) -> Tensor:
        return T.reshape(atoms, (self.num_atoms, -1))

    def analyze(self, signal: Tensor, atoms: Optional[Tensor] = None) -> Tensor:
        """W^T x"""
        atoms = self.expand() if atoms is None else atoms
        if self.operator == "conv":
            return T.conv2d_correlate(signal, atoms, self.padding)
        if tuple(signal.shape[1:]) != tuple(atoms.shape[1:]):
            raise DimensionError(f"dense atoms {atoms.shape[1:]} do not match signal {signal.shape[1:]}")
        flat = T.reshape(signal, (signal.shape[0], -1))
        codes = T.matmul(flat, T.transpose(self._dense_atoms(atoms)))
        return T.reshape(codes, (signal.shape[0], self.num_atoms, 1, 1))

    def synthesize(self, codes: Tensor, signal_shape: Tuple[int, ...], atoms: Optional[Tensor] = None) -> Tensor:
        """W z, shaped like the signal batch ``signal_shape``"""
        atoms = self.expand() if atoms is None else atoms
        if self.operator == "conv":
            return T.conv2d_transpose(codes, atoms, self.padding, output_hw=tuple(signal_shape[-2:]))
        flat = T.reshape(codes, (codes.shape[0], self.num_atoms))
        signal = T.matmul(flat, self._dense_atoms(atoms))
        return T.reshape(signal, tuple(signal_shape))

    def stability_margin(self, alpha: float, signal_shape: Tuple[int, ...], iters: int = 20, seed: int = 0) -> float:
        """alpha * sigma_max(W^T W) for one signal of shape [C, H, W]"""
        batch_shape = (1,) + tuple(signal_shape)
        atoms = self._expanded
        if self.operator == "dense":
            matrix = atoms.reshape(self.num_atoms, -1)
            estimate = T.power_iteration_sigma_max(
                lambda v: v @ matrix, lambda s: s @ matrix.T, (self.num_atoms,), iters, seed
            )
        else:
            estimate = T.power_iteration_sigma_max(
                lambda z: T._transpose_arrays(z, atoms, self.padding),
                lambda x: T._correlate_arrays(x, atoms, self.padding),
                self.code_shape(batch_shape),
                iters,
                seed,
            )
        return alpha * estimate.value
