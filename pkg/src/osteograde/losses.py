"""Grade-distance-weighted ordinal loss and plain cross-entropy.

The ordinal loss charges each class's probability mass by a penalty that
grows with the distance between that class and the true grade, so a
far-off misprediction costs more than a near miss. Entry ``[u][v]`` of the
penalty matrix weighs predicting grade ``u`` when the truth is ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError

NUM_GRADES = 5

_DEFAULT_PENALTY = (
    (1, 3, 6, 7, 9),
    (4, 1, 4, 5, 7),
    (6, 4, 1, 3, 5),
    (9, 7, 4, 1, 4),
    (11, 9, 7, 5, 1),
)


@dataclass(frozen=True)
class PenaltyMatrix:
    """Validated n x n grid of misclassification weights.

    Diagonal entries must be 1 and, within each column, weights may not
    decrease as the prediction moves further from the truth.
    """

    values: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        arr = self.as_array()
        n = arr.shape[0]
        if arr.ndim != 2 or arr.shape != (n, n) or n < 2:
            raise ConfigError(f"penalty matrix must be square, got shape {arr.shape}")
        if np.any(arr < 0):
            raise ConfigError("penalty matrix entries must be non-negative")
        if not np.all(np.diag(arr) == 1):
            raise ConfigError("penalty matrix diagonal must be all ones")
        for v in range(n):
            col = arr[:, v]
            for u in range(n):
                for u2 in range(n):
                    if abs(u - v) > abs(u2 - v) and col[u] < col[u2]:
                        raise ConfigError(
                            f"penalty matrix column {v} not monotone in grade distance "
                            f"(entry [{u}][{v}]={col[u]} < [{u2}][{v}]={col[u2]})"
                        )

    @property
    def n(self) -> int:
        return len(self.values)

    def as_array(self, dtype=np.float64) -> np.ndarray:
        return np.asarray(self.values, dtype=dtype)

    @staticmethod
    def from_rows(rows) -> "PenaltyMatrix":
        return PenaltyMatrix(tuple(tuple(float(x) for x in row) for row in rows))


def default_penalty_matrix() -> PenaltyMatrix:
    """The standard 5x5 grade-distance penalty grid."""
    return PenaltyMatrix.from_rows(_DEFAULT_PENALTY)


def _check_grade(v: int, n: int) -> int:
    if not isinstance(v, (int, np.integer)) or not 0 <= int(v) < n:
        raise DataError(f"true grade {v!r} outside 0..{n - 1}")
    return int(v)


def ordinal_loss(p: Tensor, v: int, penalty: PenaltyMatrix) -> Tensor:
    """Weighted ordinal loss of a probability vector against true grade v.

    Equals sum_u c[u][v] * q_u with q_u = p_u off the truth and 1 - p_v at
    it; zero exactly when p is one-hot at v. Differentiable in p.
    """
    n = penalty.n
    v = _check_grade(v, n)
    if p.shape != (n,):
        raise DataError(f"probability vector has shape {p.shape}, expected ({n},)")
    col = penalty.as_array(p.data.dtype)[:, v]
    coeffs = col.copy()
    coeffs[v] = -col[v]  # c_vv * (1 - p_v) folded into an affine form
    weighted = ad.tensor_sum(ad.mul(p, ad.constant(coeffs, dtype=p.data.dtype)))
    return ad.add(weighted, ad.constant(np.asarray(col[v], dtype=p.data.dtype)))


def cross_entropy_loss(p: Tensor, v: int) -> Tensor:
    """Negative log-probability of the true grade, log clamped at 1e-12."""
    n = p.shape[0]
    v = _check_grade(v, n)
    onehot = np.zeros(n, dtype=p.data.dtype)
    onehot[v] = 1
    p_true = ad.tensor_sum(ad.mul(p, ad.constant(onehot, dtype=p.data.dtype)))
    return ad.neg(ad.safe_log(p_true, floor=1e-12))


LOSS_KINDS = ("ordinal", "cross_entropy")


def loss_for(kind: str, p: Tensor, v: int, penalty: PenaltyMatrix) -> Tensor:
    if kind == "ordinal":
        return ordinal_loss(p, v, penalty)
    if kind == "cross_entropy":
        return cross_entropy_loss(p, v)
    raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
