"""
Dense tensor algebra used by every other module.

A DenseTensor is a C-contiguous float64 numpy array (row-major, last index
fastest). Operations never mutate their arguments.
"""

import logging
import math
import struct
from typing import Sequence, Tuple, Union

import numpy as np

from errors import FormatError, InvalidInputError, NumericalError, VersionError


logger = logging.getLogger(__name__)

DenseTensor = np.ndarray
Shape = Tuple[int, ...]

SLTF_MAGIC = b'SLTF'
SLTF_VERSION = 1
_SLTF_HEADER = struct.Struct('<4sII')


def as_shape(dims: Union[int, Sequence[int]]) -> Shape:
    """
    Validate and normalize a shape.

    Args:
        dims (int | Sequence[int]): Extents

    Returns:
        Shape: Tuple of positive ints
    """
    if isinstance(dims, (int, np.integer)):
        dims = (int(dims),)
    shape = tuple(int(d) for d in dims)
    if any(d < 1 for d in shape):
        raise InvalidInputError(f"All extents must be >= 1, got {shape}")
    return shape


def element_count(shape: Sequence[int]) -> int:
    # python ints: no overflow
    return math.prod(int(d) for d in shape)


def reshape(t: DenseTensor, new_shape: Union[int, Sequence[int]]) -> DenseTensor:
    """
    Change shape metadata; the row-major flat sequence is untouched.

    Args:
        t (DenseTensor): Input tensor
        new_shape (Sequence[int]): Target extents

    Returns:
        DenseTensor: Tensor with the same flat data
    """
    shape = as_shape(new_shape)
    if element_count(shape) != t.size:
        raise InvalidInputError(
            f"Cannot reshape {t.shape} ({t.size} elements) to {shape} ({element_count(shape)} elements)")
    return np.ascontiguousarray(t, dtype=np.float64).reshape(shape)


def vectorize(t: DenseTensor) -> DenseTensor:
    return np.ascontiguousarray(t, dtype=np.float64).reshape(-1)


def mode_product(core: DenseTensor, factor: DenseTensor, mode: int) -> DenseTensor:
    """
    Mode-m tensor product ``core x_m factor``.

    Args:
        core (DenseTensor): Tensor of order M with extent r at ``mode``
        factor (DenseTensor): Matrix of shape (d, r)
        mode (int): Contracted mode, 0 <= mode < M

    Returns:
        DenseTensor: core's shape with extent d at ``mode``
    """
    if factor.ndim != 2:
        raise InvalidInputError(f"mode_product factor must be 2-D, got shape {factor.shape}")
    if not 0 <= mode < core.ndim:
        raise InvalidInputError(f"mode {mode} out of range for order-{core.ndim} core")
    if core.shape[mode] != factor.shape[1]:
        raise InvalidInputError(
            f"Dimension mismatch at mode {mode}: core extent {core.shape[mode]} "
            f"vs factor columns {factor.shape[1]}")
    out = np.tensordot(factor, core, axes=([1], [mode]))
    # tensordot puts the new axis first
    return np.ascontiguousarray(np.moveaxis(out, 0, mode))


def kronecker(a: DenseTensor, b: DenseTensor) -> DenseTensor:
    """Kronecker product of two matrices: ``out[i*p+k, j*q+l] = a[i,j] * b[k,l]``."""
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInputError(f"kronecker expects 2-D inputs, got {a.shape} and {b.shape}")
    return np.ascontiguousarray(np.kron(a, b), dtype=np.float64)


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def fwht(v: DenseTensor) -> DenseTensor:
    """
    Orthonormal fast Walsh-Hadamard transform.

    Each butterfly stage is scaled by 1/sqrt(2), so the transform equals
    multiplication by the symmetric orthogonal matrix H_2^{(x)N}; it is its own inverse.

    Args:
        v (DenseTensor): 1-D tensor whose length is a power of two

    Returns:
        DenseTensor: Transformed copy
    """
    if v.ndim != 1:
        raise InvalidInputError(f"fwht expects a 1-D tensor, got shape {v.shape}")
    n = v.shape[0]
    if not is_power_of_two(n):
        raise InvalidInputError(f"fwht length must be a power of two, got {n}")

    y = np.array(v, dtype=np.float64, copy=True)
    scale = 1.0 / math.sqrt(2.0)
    h = 1
    while h < n:
        blocks = y.reshape(-1, 2, h)
        a = blocks[:, 0, :].copy()
        b = blocks[:, 1, :]
        blocks[:, 0, :] = (a + b) * scale
        blocks[:, 1, :] = (a - b) * scale
        h *= 2
    return y


def _orthonormal_completion(basis: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns flagged not ``good`` by an orthonormal completion of the good ones."""
    rows, cols = basis.shape
    if good.all():
        return basis
    kept = basis[:, good]
    q, _ = np.linalg.qr(np.hstack([kept, np.eye(rows)]))
    fill = q[:, kept.shape[1]:kept.shape[1] + int((~good).sum())]
    out = basis.copy()
    out[:, ~good] = fill
    return out


def svd_topk(m: DenseTensor, k: int, tol: float = 1e-14,
             max_sweeps: int = 100) -> Tuple[DenseTensor, DenseTensor, DenseTensor]:
    """
    Top-k singular triplets by one-sided (Hestenes) Jacobi rotations.

    Args:
        m (DenseTensor): Finite matrix
        k (int): Number of triplets, k <= min(rows, cols)
        tol (float): Orthogonality threshold between column pairs
        max_sweeps (int): Iteration cap

    Returns:
        Tuple: U (rows x k), s (k, descending), V (cols x k)
    """
    if m.ndim != 2:
        raise InvalidInputError(f"svd_topk expects a 2-D matrix, got shape {m.shape}")
    rows, cols = m.shape
    if not 1 <= k <= min(rows, cols):
        raise InvalidInputError(f"k={k} must be in [1, {min(rows, cols)}] for a {rows}x{cols} matrix")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError("svd_topk input contains NaN or Inf")

    transposed = rows < cols
    work = np.array(m.T if transposed else m, dtype=np.float64, copy=True)
    n = work.shape[1]
    v = np.eye(n)

    off = 0.0
    for sweep in range(max_sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                up = work[:, p]
                uq = work[:, q]
                alpha = up @ up
                beta = uq @ uq
                gamma = up @ uq
                if alpha == 0.0 or beta == 0.0:
                    continue
                ratio = abs(gamma) / math.sqrt(alpha * beta)
                if ratio <= tol:
                    continue
                off = max(off, ratio)
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * up - s * uq
                new_q = s * up + c * uq
                work[:, p] = new_p
                work[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off <= tol:
            logger.debug(f"Jacobi SVD converged after {sweep + 1} sweeps")
            break
    else:
        if off > 1e-12:
            raise NumericalError(
                f"Jacobi SVD did not converge in {max_sweeps} sweeps (residual {off:.3e})",
                residual=off)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind='stable')
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    scale = sigma[0] if sigma[0] > 0 else 1.0
    good = sigma > scale * 1e-13
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / sigma[good]
    u = _orthonormal_completion(u, good)
    sigma = np.where(good, sigma, 0.0)

    u, s, vk = u[:, :k], sigma[:k], v[:, :k]
    if transposed:
        u, vk = vk, u
    return np.ascontiguousarray(u), np.ascontiguousarray(s), np.ascontiguousarray(vk)


def encode_sltf(t: DenseTensor) -> bytes:
    """Serialize a tensor to the SLTF binary layout."""
    data = np.ascontiguousarray(t, dtype='<f8')
    header = _SLTF_HEADER.pack(SLTF_MAGIC, SLTF_VERSION, data.ndim)
    extents = struct.pack(f'<{data.ndim}Q', *data.shape)
    return header + extents + data.tobytes(order='C')


def decode_sltf(buffer: bytes, offset: int = 0) -> Tuple[DenseTensor, int]:
    """
    Parse one SLTF record.

    Args:
        buffer (bytes): Source bytes
        offset (int): Start of the record

    Returns:
        Tuple[DenseTensor, int]: Tensor and the offset just past the record
    """
    end_header = offset + _SLTF_HEADER.size
    if len(buffer) < end_header:
        raise FormatError(f"Truncated SLTF header at offset {offset}")
    magic, version, ndim = _SLTF_HEADER.unpack_from(buffer, offset)
    if magic != SLTF_MAGIC:
        raise FormatError(f"Bad SLTF magic {magic!r} at offset {offset}")
    if version > SLTF_VERSION:
        raise VersionError(f"SLTF version {version} is newer than supported version {SLTF_VERSION}")
    if version < 1:
        raise FormatError(f"Invalid SLTF version {version}")
    end_dims = end_header + 8 * ndim
    if len(buffer) < end_dims:
        raise FormatError(f"Truncated SLTF extents at offset {offset}")
    shape = struct.unpack_from(f'<{ndim}Q', buffer, end_header)
    count = element_count(shape)
    end_data = end_dims + 8 * count
    if len(buffer) < end_data:
        raise FormatError(f"Truncated SLTF payload: need {8 * count} bytes, have {len(buffer) - end_dims}")
    data = np.frombuffer(buffer, dtype='<f8', count=count, offset=end_dims)
    return np.array(data, dtype=np.float64).reshape(shape), end_data


def write_sltf(path: str, t: DenseTensor) -> None:
    with open(path, 'wb') as f:
        f.write(encode_sltf(t))
    logger.info(f"Wrote SLTF tensor {tuple(t.shape)} to {path}")


def read_sltf(path: str) -> DenseTensor:
    with open(path, 'rb') as f:
        buffer = f.read()
    t, end = decode_sltf(buffer)
    if end != len(buffer):
        raise FormatError(f"{path}: {len(buffer) - end} trailing bytes after SLTF record")
    return t
