"""
Similarity between two weight-update matrices: top-k singular subspace
overlap on either side and relative Euclidean distance.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np

from errors import InvalidInputError
from tensor_core import DenseTensor, svd_topk


logger = logging.getLogger(__name__)

SIDES = ("left", "right")
NORMS = ("frobenius", "spectral")


@dataclass(frozen=True)
class GeometryReport:
    d_left: float
    d_right: float
    d_euclid: float
    k: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _check_pair(w1: DenseTensor, w2: DenseTensor) -> None:
    if w1.ndim != 2 or w1.shape != w2.shape:
        raise InvalidInputError(f"Expected two matrices of equal shape, got {w1.shape} and {w2.shape}")


def singular_similarity(w1: DenseTensor, w2: DenseTensor, k: int, side: str = "left") -> float:
    """
    (1/sqrt(k)) * ||U1_k^T U2_k||_F over the top-k singular vectors.

    Args:
        w1 (DenseTensor): First matrix
        w2 (DenseTensor): Second matrix, same shape
        k (int): Number of leading singular vectors
        side (str): 'left' uses U, 'right' uses V

    Returns:
        float: 1 for identical subspaces, 0 for orthogonal ones
    """
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    _check_pair(w1, w2)
    if side not in SIDES:
        raise InvalidInputError(f"side must be one of {SIDES}, got {side!r}")
    u1, _, v1 = svd_topk(w1, k)
    u2, _, v2 = svd_topk(w2, k)
    a, b = (u1, u2) if side == "left" else (v1, v2)
    return float(np.linalg.norm(a.T @ b, 'fro') / math.sqrt(k))


def euclidean_distance(w1: DenseTensor, w2: DenseTensor, norm: str = "frobenius") -> float:
    """||W1 - W2|| / ||W1||, with W1 as the reference."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    _check_pair(w1, w2)
    if norm not in NORMS:
        raise InvalidInputError(f"norm must be one of {NORMS}, got {norm!r}")
    if norm == "frobenius":
        ref = float(np.linalg.norm(w1, 'fro'))
        diff = float(np.linalg.norm(w1 - w2, 'fro'))
    else:
        ref = float(svd_topk(w1, 1)[1][0])
        diff = float(svd_topk(w1 - w2, 1)[1][0])
    if ref == 0.0:
        raise InvalidInputError("Relative distance is undefined: the reference matrix has zero norm")
    return diff / ref


def analyze(w1: DenseTensor, w2: DenseTensor, k: int = 5, norm: str = "frobenius") -> GeometryReport:
    report = GeometryReport(
        d_left=singular_similarity(w1, w2, k, "left"),
        d_right=singular_similarity(w1, w2, k, "right"),
        d_euclid=euclidean_distance(w1, w2, norm),
        k=k,
    )
    logger.info(f"Geometry k={k}: d_L={report.d_left:.6f} d_R={report.d_right:.6f} d_E={report.d_euclid:.6f}")
    return report
