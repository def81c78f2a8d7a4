"""
Rotation operators on filter grids.

Angles are in degrees, positive = counter-clockwise as the grid is displayed
(row 0 at the top), so a 90 degree turn matches ``np.rot90``. Rotation is about
the grid center ((h-1)/2, (w-1)/2).

Two kinds of operator exist:

* ``quarter_turn``: multiples of 90 degrees on square grids, a pure pixel
  permutation, exact and lossless.
* ``bilinear``: everything else; a precomputed sparse table mapping each
  target pixel to at most four source pixels. Samples that fall outside the
  grid contribute zero, so per-target weights sum to at most 1.
"""

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Tuple

import numpy as np
from scipy import sparse

from core.tensor import Tensor, conv2d_correlate, linear_map
from errors import DimensionError, GroupError

logger = logging.getLogger(__name__)

RotationKind = Literal["quarter_turn", "bilinear"]

# coordinates this close to an integer are treated as exact grid points
_SNAP = 1e-9


@dataclass(frozen=True, eq=False)
class RotationOperator:
    angle_degrees: float
    grid_size: Tuple[int, int]
    kind: RotationKind
    quarter_turns: int = 0
    coefficients: Optional[sparse.csr_matrix] = field(default=None, repr=False)

    def _check_grid(self, x: np.ndarray) -> None:
        if x.ndim < 2 or tuple(x.shape[-2:]) != tuple(self.grid_size):
            raise DimensionError(
                f"rotation built for a {self.grid_size} grid, got trailing dims {x.shape[-2:]}"
            )

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check_grid(x)
        if self.kind == "quarter_turn":
            return np.rot90(x, k=self.quarter_turns, axes=(-2, -1)).copy()
        flat = x.reshape(-1, self.grid_size[0] * self.grid_size[1])
        return np.asarray((self.coefficients @ flat.T).T).reshape(x.shape)

    def adjoint(self, g: np.ndarray) -> np.ndarray:
        self._check_grid(g)
        if self.kind == "quarter_turn":
            return np.rot90(g, k=-self.quarter_turns, axes=(-2, -1)).copy()
        flat = g.reshape(-1, self.grid_size[0] * self.grid_size[1])
        return np.asarray((self.coefficients.T @ flat.T).T).reshape(g.shape)

    def matrix(self) -> np.ndarray:
        """Dense [h*w, h*w] matrix of the operator (row = target pixel)"""
        size = self.grid_size[0] * self.grid_size[1]
        if self.kind == "bilinear":
            return self.coefficients.toarray()
        basis = np.eye(size).reshape(size, *self.grid_size)
        return self.forward(basis).reshape(size, size).T

    def power(self, n: int) -> "RotationOperator":
        """The operator applied n times"""
        angle = (self.angle_degrees * n) % 360.0
        if self.kind == "quarter_turn":
            return RotationOperator(angle, self.grid_size, "quarter_turn", (self.quarter_turns * n) % 4)
        size = self.grid_size[0] * self.grid_size[1]
        result = sparse.identity(size, format="csr")
        for _ in range(n):
            result = (self.coefficients @ result).tocsr()
        return RotationOperator(angle, self.grid_size, "bilinear", coefficients=result)


def _bilinear_coefficients(angle_degrees: float, grid_size: Tuple[int, int]) -> sparse.csr_matrix:
    h, w = grid_size
    theta = np.deg2rad(angle_degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    y, x = rows - cy, cols - cx
    # inverse map: where each target pixel samples the source
    src_r = x * sin + y * cos + cy
    src_c = x * cos - y * sin + cx
    src_r = np.where(np.abs(src_r - np.round(src_r)) < _SNAP, np.round(src_r), src_r)
    src_c = np.where(np.abs(src_c - np.round(src_c)) < _SNAP, np.round(src_c), src_c)

    r0, c0 = np.floor(src_r), np.floor(src_c)
    fr, fc = src_r - r0, src_c - c0
    targets = (rows * w + cols).ravel()

    tgt_idx, src_idx, weights = [], [], []
    for dr, dc, weight in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = (r0 + dr).astype(np.int64).ravel()
        cc = (c0 + dc).astype(np.int64).ravel()
        weight = weight.ravel()
        keep = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w) & (weight != 0.0)
        tgt_idx.append(targets[keep])
        src_idx.append(rr[keep] * w + cc[keep])
        weights.append(weight[keep])

    return sparse.csr_matrix(
        (np.concatenate(weights), (np.concatenate(tgt_idx), np.concatenate(src_idx))),
        shape=(h * w, h * w),
    )


def make_rotation(
    angle_degrees: float, grid_size: Tuple[int, int], kind: Optional[RotationKind] = None
) -> RotationOperator:
    """
    Rotation by ``angle_degrees`` on an (h, w) grid.

    The exact quarter-turn kind is picked automatically for multiples of 90 on
    square grids; pass ``kind="bilinear"`` to force interpolation.
    """
    angle = float(angle_degrees)
    if not 0.0 <= angle < 360.0:
        raise GroupError(f"angle must lie in [0, 360), got {angle}")
    h, w = (int(v) for v in grid_size)
    if h < 1 or w < 1:
        raise GroupError(f"grid extents must be >= 1, got {grid_size}")

    exact = angle % 90.0 == 0.0 and h == w
    if kind is None:
        kind = "quarter_turn" if exact else "bilinear"
    if kind == "quarter_turn":
        if not exact:
            raise GroupError(f"quarter-turn rotation needs a multiple of 90 on a square grid ({angle}, {grid_size})")
        return RotationOperator(angle, (h, w), "quarter_turn", int(angle // 90))
    if kind != "bilinear":
        raise GroupError(f"unknown rotation kind {kind!r}")
    return RotationOperator(angle, (h, w), "bilinear", coefficients=_bilinear_coefficients(angle, (h, w)))


def apply(op: RotationOperator, x: Tensor) -> Tensor:
    """Rotates the trailing (h, w) grid of ``x``; leading dims are rotated independently"""
    op._check_grid(x.data)
    return linear_map(x, op.forward, op.adjoint, name="rotate")


def apply_adjoint(op: RotationOperator, grad: Tensor) -> Tensor:
    op._check_grid(grad.data)
    return linear_map(grad, op.adjoint, op.forward, name="rotate_adjoint")


@dataclass(frozen=True, eq=False)
class CyclicGroup:
    """{e, g, ..., g^(k-1)} for a rotation generator g with k * angle == 360"""

    generator: RotationOperator
    order: int
    elements: Tuple[RotationOperator, ...] = field(repr=False)

    @classmethod
    def of_order(cls, order: int, grid_size: Tuple[int, int]) -> "CyclicGroup":
        if order < 1:
            raise GroupError(f"group order must be >= 1, got {order}")
        generator = make_rotation(360.0 / order if order > 1 else 0.0, grid_size)
        return cls.from_generator(generator, order)

    @classmethod
    def from_generator(cls, generator: RotationOperator, order: int) -> "CyclicGroup":
        angle = generator.angle_degrees
        if order == 1:
            if angle != 0.0:
                raise GroupError(f"the trivial group needs a 0 degree generator, got {angle}")
        elif not np.isclose(angle * order, 360.0, rtol=0.0, atol=1e-9):
            raise GroupError(f"{order} rotations of {angle} degrees do not close the circle")
        elements = tuple(generator.power(i) for i in range(order))
        return cls(generator, order, elements)

    @property
    def grid_size(self) -> Tuple[int, int]:
        return self.generator.grid_size

    @property
    def exact(self) -> bool:
        return self.generator.kind == "quarter_turn"

    def element(self, i: int) -> RotationOperator:
        return self.elements[i % self.order]

    def group_law_deviation(self, i: int, j: int) -> float:
        """max |element(i) o element(j) - element((i+j) mod k)| over matrix entries"""
        composed = self.element(i).matrix() @ self.element(j).matrix()
        deviation = float(np.max(np.abs(composed - self.element(i + j).matrix())))
        if not self.exact:
            logger.info("group law deviation for (%d, %d) at %.1f degrees: %.3e",
                        i, j, self.generator.angle_degrees, deviation)
        return deviation


def check_conv_rotation_relation(x: Tensor, h: Tensor, op: RotationOperator) -> float:
    """
    Max deviation between R(x) * h and R(x * R^-1(h)) under "same" correlation.

    ``x`` is [C,H,W] on ``op``'s grid; ``h`` is one filter [C,h,w] or a bank
    [C_out,C,h,w]. Quarter turns with odd filters agree to roundoff; bilinear
    rotations report their interpolation error.
    """
    filters = h if h.ndim == 4 else Tensor(h.data[None])
    kind = op.kind
    op_filter_inv = make_rotation((360.0 - op.angle_degrees) % 360.0, filters.shape[-2:], kind=kind)

    lhs = conv2d_correlate(apply(op, x), filters, "same")
    rhs = apply(op, conv2d_correlate(x, apply(op_filter_inv, filters), "same"))
    deviation = float(np.max(np.abs(lhs.data - rhs.data)))
    if kind == "bilinear":
        logger.info("convolution/rotation relation at %.1f degrees deviates by %.3e",
                    op.angle_degrees, deviation)
    return deviation
