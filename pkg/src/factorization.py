"""
Factorized group updates: Tucker/CP splits combined by Kronecker products.

A split is ``C x_1 A_1 x_2 ... x_M A_M``; a group is the left-folded Kronecker
product of its splits. Backward passes (adjoints) are provided for training.
"""

import logging
import string
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import InvalidInputError
from tensor_core import DenseTensor, Shape, as_shape, element_count, kronecker, mode_product


logger = logging.getLogger(__name__)

CORE_KINDS = ("identity", "diagonal", "full")
INIT_SCHEMES = ("zero-product", "normal")


@dataclass(frozen=True)
class CoreSpec:
    """
    Core tensor structure of one split.

    Args:
        kind (str): 'identity' (superdiagonal ones), 'diagonal' (trainable superdiagonal, CP form)
            or 'full' (dense trainable Tucker core)
        ranks (Tuple[int, ...]): Rank per mode r_m
    """
    kind: str
    ranks: Tuple[int, ...]

    def __post_init__(self):
        if self.kind not in CORE_KINDS:
            raise InvalidInputError(f"Unknown core kind {self.kind!r}, expected one of {CORE_KINDS}")
        ranks = tuple(int(r) for r in self.ranks)
        if not ranks or any(r < 1 for r in ranks):
            raise InvalidInputError(f"Core ranks must be positive, got {self.ranks}")
        if self.kind != "full" and len(set(ranks)) != 1:
            raise InvalidInputError(f"{self.kind} core requires equal ranks across modes, got {ranks}")
        object.__setattr__(self, 'ranks', ranks)

    @property
    def order(self) -> int:
        return len(self.ranks)

    def value_count(self) -> int:
        if self.kind == "identity":
            return 0
        if self.kind == "diagonal":
            return self.ranks[0]
        return element_count(self.ranks)

    def value_shape(self) -> Shape:
        if self.kind == "identity":
            return (0,)
        if self.kind == "diagonal":
            return (self.ranks[0],)
        return self.ranks


@dataclass(frozen=True)
class SplitSpec:
    """
    Descriptor of one split, without values.

    A ``dense`` split is a single trainable 2-D block of shape ``out_shape``
    (the core is ignored and carries rank 1).
    """
    core: CoreSpec
    out_shape: Shape
    dense: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'out_shape', as_shape(self.out_shape))
        if self.dense:
            if len(self.out_shape) != 2:
                raise InvalidInputError(f"Dense split must be 2-D, got {self.out_shape}")
        elif self.core.order != len(self.out_shape):
            raise InvalidInputError(
                f"Core order {self.core.order} does not match output order {len(self.out_shape)}")

    def plane_shapes(self) -> List[Shape]:
        if self.dense:
            return [self.out_shape]
        return [(d, r) for d, r in zip(self.out_shape, self.core.ranks)]


@dataclass
class SplitFactors:
    """
    Trainable values of one split.

    Args:
        spec (SplitSpec): Structure
        core_values (DenseTensor): Empty for identity, length-r for diagonal, r_1 x ... x r_M for full
        planes (List[DenseTensor]): Plane factors A_m of shape (d_m, r_m), or the dense block
    """
    spec: SplitSpec
    core_values: DenseTensor
    planes: List[DenseTensor] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    @property
    def out_shape(self) -> Shape:
        return self.spec.out_shape

    def validate(self) -> None:
        expected = self.spec.plane_shapes()
        if len(self.planes) != len(expected):
            raise InvalidInputError(f"Expected {len(expected)} plane factors, got {len(self.planes)}")
        for m, (plane, shape) in enumerate(zip(self.planes, expected)):
            if tuple(plane.shape) != tuple(shape):
                raise InvalidInputError(f"Plane {m} has shape {plane.shape}, expected {shape}")
        if not self.spec.dense and tuple(self.core_values.shape) != self.spec.core.value_shape():
            raise InvalidInputError(
                f"Core values have shape {self.core_values.shape}, expected {self.spec.core.value_shape()}")

    def trainable_arrays(self) -> List[DenseTensor]:
        """Trainable arrays in core-then-planes order (identity cores contribute nothing)."""
        arrays = []
        if not self.spec.dense and self.spec.core.kind != "identity":
            arrays.append(self.core_values)
        arrays.extend(self.planes)
        return arrays

    def count_values(self) -> int:
        return sum(int(a.size) for a in self.trainable_arrays())


@dataclass
class FactorizedGroup:
    """Ordered list of K splits combined by Kronecker products."""
    splits: List[SplitFactors]

    def __post_init__(self):
        if not self.splits:
            raise InvalidInputError("A factorized group needs at least one split")
        if len(self.splits) > 1:
            for k, split in enumerate(self.splits):
                if len(split.out_shape) != 2:
                    raise InvalidInputError(
                        f"Kronecker composition needs 2-D splits; split {k} has shape {split.out_shape}")

    @property
    def out_shape(self) -> Shape:
        if len(self.splits) == 1:
            return self.splits[0].out_shape
        rows = int(np.prod([s.out_shape[0] for s in self.splits]))
        cols = int(np.prod([s.out_shape[1] for s in self.splits]))
        return (rows, cols)

    def trainable_arrays(self) -> List[DenseTensor]:
        arrays = []
        for split in self.splits:
            arrays.extend(split.trainable_arrays())
        return arrays


def _cp_weights(split: SplitFactors) -> DenseTensor:
    if split.spec.core.kind == "identity":
        return np.ones(split.spec.core.ranks[0])
    return split.core_values


def _cp_subscripts(order: int) -> Tuple[str, str]:
    """Letters for the M output modes and the shared rank index."""
    letters = string.ascii_lowercase[:order]
    return letters, 'z'


def materialize_split(split: SplitFactors) -> DenseTensor:
    """
    Evaluate ``C x_1 A_1 ... x_M A_M`` with shape ``out_shape``.

    Identity and diagonal cores are evaluated in CP form
    ``sum_j w_j a_1j o ... o a_Mj`` without building a dense core.
    """
    spec = split.spec
    if spec.dense:
        return np.array(split.planes[0], dtype=np.float64, copy=True)
    if spec.core.kind == "full":
        out = split.core_values
        for m, plane in enumerate(split.planes):
            out = mode_product(out, plane, m)
        return out
    letters, rank = _cp_subscripts(spec.core.order)
    operands = ','.join([rank] + [f"{c}{rank}" for c in letters])
    out = np.einsum(f"{operands}->{letters}", _cp_weights(split), *split.planes, optimize=True)
    return np.ascontiguousarray(out, dtype=np.float64)


def materialize_group(group: FactorizedGroup, parts: Optional[Sequence[DenseTensor]] = None) -> DenseTensor:
    """
    Left-fold Kronecker product of the split outputs, in list order.

    Args:
        group (FactorizedGroup): Group to evaluate
        parts (Sequence[DenseTensor], optional): Already materialized split outputs

    Returns:
        DenseTensor: Group tensor
    """
    if parts is None:
        parts = [materialize_split(s) for s in group.splits]
    out = parts[0]
    for part in parts[1:]:
        out = kronecker(out, part)
    if len(parts) == 1:
        return np.array(out, dtype=np.float64, copy=True)
    return out


def count_split(spec: SplitSpec) -> int:
    """
    Trainable scalars of a split.

    identity: sum_m d_m r_m; diagonal: r + sum_m d_m r_m; full: prod_m r_m + sum_m d_m r_m;
    dense: rows * cols.
    """
    if spec.dense:
        return element_count(spec.out_shape)
    planes = sum(d * r for d, r in zip(spec.out_shape, spec.core.ranks))
    return spec.core.value_count() + planes


def init_factors(spec: SplitSpec, seed: int, scheme: str = "zero-product",
                 zero_plane: bool = True) -> SplitFactors:
    """
    Draw initial factor values.

    Args:
        spec (SplitSpec): Split structure
        seed (int): Philox key; identical seeds give bitwise-identical factors
        scheme (str): 'zero-product' zeroes the last plane when ``zero_plane`` is set,
            'normal' draws every factor
        zero_plane (bool): Whether this split carries the zeroed plane

    Returns:
        SplitFactors: Fresh factors
    """
    if scheme not in INIT_SCHEMES:
        raise InvalidInputError(f"Unknown init scheme {scheme!r}, expected one of {INIT_SCHEMES}")
    rng = np.random.Generator(np.random.Philox(seed))
    zeroed = scheme == "zero-product" and zero_plane

    core_shape = spec.core.value_shape()
    if spec.dense or spec.core.kind == "identity":
        core_values = np.zeros((0,))
    else:
        core_values = rng.standard_normal(core_shape) / np.sqrt(spec.core.ranks[0])

    planes = []
    shapes = spec.plane_shapes()
    for m, shape in enumerate(shapes):
        if zeroed and m == len(shapes) - 1:
            planes.append(np.zeros(shape))
        else:
            planes.append(rng.standard_normal(shape) / np.sqrt(shape[0]))
    return SplitFactors(spec=spec, core_values=core_values, planes=planes)


def _other_modes(order: int, m: int) -> List[int]:
    return [n for n in range(order) if n != m]


def split_backward(split: SplitFactors, grad_out: DenseTensor) -> List[DenseTensor]:
    """
    Gradients of a scalar loss with respect to ``split.trainable_arrays()``.

    Args:
        split (SplitFactors): Split evaluated in the forward pass
        grad_out (DenseTensor): dLoss/d(split output), shape ``out_shape``

    Returns:
        List[DenseTensor]: One gradient per trainable array, same order and shapes
    """
    spec = split.spec
    if tuple(grad_out.shape) != tuple(spec.out_shape):
        raise InvalidInputError(f"Gradient shape {grad_out.shape} does not match split output {spec.out_shape}")
    if spec.dense:
        return [np.array(grad_out, dtype=np.float64, copy=True)]

    order = spec.core.order
    grads: List[DenseTensor] = []
    if spec.core.kind == "full":
        # core gradient: project the output gradient back through every plane
        core_grad = grad_out
        for m, plane in enumerate(split.planes):
            core_grad = mode_product(core_grad, plane.T, m)
        grads.append(core_grad)
        for m in range(order):
            partial = split.core_values
            for n in _other_modes(order, m):
                partial = mode_product(partial, split.planes[n], n)
            axes = _other_modes(order, m)
            grads.append(np.tensordot(grad_out, partial, axes=(axes, axes)))
        return grads

    letters, rank = _cp_subscripts(order)
    weights = _cp_weights(split)
    if spec.core.kind == "diagonal":
        operands = ','.join([letters] + [f"{c}{rank}" for c in letters])
        grads.append(np.einsum(f"{operands}->{rank}", grad_out, *split.planes, optimize=True))
    for m in range(order):
        others = _other_modes(order, m)
        operands = ','.join([letters, rank] + [f"{letters[n]}{rank}" for n in others])
        planes = [split.planes[n] for n in others]
        grads.append(np.einsum(f"{operands}->{letters[m]}{rank}", grad_out, weights, *planes, optimize=True))
    return grads


def kronecker_backward(grad: DenseTensor, parts: Sequence[DenseTensor]) -> List[DenseTensor]:
    """
    Gradients with respect to each factor of ``parts[0] (x) parts[1] (x) ...``.

    The product is viewed as the 2K-way tensor R[i_1..i_K, j_1..j_K] = prod_k P_k[i_k, j_k]
    (row-major mixed radix), so each factor gradient is a block contraction of the
    incoming gradient with the other factors.
    """
    if len(parts) == 1:
        return [grad]
    rows = [p.shape[0] for p in parts]
    cols = [p.shape[1] for p in parts]
    k = len(parts)
    g = grad.reshape(tuple(rows) + tuple(cols))
    row_idx = string.ascii_lowercase[:k]
    col_idx = string.ascii_uppercase[:k]
    full = row_idx + col_idx
    grads = []
    for target in range(k):
        others = [n for n in range(k) if n != target]
        operands = ','.join([full] + [f"{row_idx[n]}{col_idx[n]}" for n in others])
        out = f"{row_idx[target]}{col_idx[target]}"
        grads.append(np.einsum(f"{operands}->{out}", g, *[parts[n] for n in others], optimize=True))
    return grads


def group_backward(group: FactorizedGroup, parts: Sequence[DenseTensor],
                   grad_out: DenseTensor) -> List[DenseTensor]:
    """Gradients with respect to ``group.trainable_arrays()`` given dLoss/d(group output)."""
    split_grads = kronecker_backward(grad_out, parts)
    grads: List[DenseTensor] = []
    for split, grad in zip(group.splits, split_grads):
        grads.extend(split_backward(split, grad))
    return grads
