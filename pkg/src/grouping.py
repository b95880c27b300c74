"""
Grouping: map named 2-D weight updates to G contiguous groups over the
concatenated row-major update vector, and choose regular tensor shapes.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import InfeasibleConfigError, InvalidInputError
from tensor_core import DenseTensor, Shape, as_shape, element_count, vectorize


logger = logging.getLogger(__name__)

GROUP_MODES = ("weight-wise", "group-wise")
DEFAULT_MAX_RATIO = 4.0


@dataclass
class WeightManifest:
    """
    Ordered named 2-D weight shapes: the adaptation target.

    Args:
        entries (List[Tuple[str, Shape]]): (name, (rows, cols)) in concatenation order
    """
    entries: List[Tuple[str, Shape]] = field(default_factory=list)

    def __post_init__(self):
        normalized = []
        seen = set()
        for name, shape in self.entries:
            shape = as_shape(shape)
            if len(shape) != 2:
                raise InvalidInputError(f"Weight {name!r} must be 2-D, got {shape}")
            if name in seen:
                raise InvalidInputError(f"Duplicate weight name {name!r} in manifest")
            seen.add(name)
            normalized.append((str(name), shape))
        if not normalized:
            raise InvalidInputError("Manifest must contain at least one weight")
        self.entries = normalized

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    def shape_of(self, name: str) -> Shape:
        for entry_name, shape in self.entries:
            if entry_name == name:
                return shape
        raise InvalidInputError(f"Weight {name!r} is not in the manifest")

    @property
    def total_elements(self) -> int:
        return sum(element_count(shape) for _, shape in self.entries)

    def offsets(self) -> List[int]:
        """Start offset of every entry, plus the total as the final element."""
        out = [0]
        for _, shape in self.entries:
            out.append(out[-1] + element_count(shape))
        return out

    def to_list(self) -> List[Dict]:
        return [{"name": name, "shape": list(shape)} for name, shape in self.entries]

    @classmethod
    def from_list(cls, items: Sequence[Mapping]) -> 'WeightManifest':
        if not isinstance(items, list):
            raise InvalidInputError("Manifest JSON must be an array of {name, shape} objects")
        entries = []
        for i, item in enumerate(items):
            if not isinstance(item, dict) or set(item) != {"name", "shape"}:
                raise InvalidInputError(f"Manifest entry {i} must have exactly the keys 'name' and 'shape'")
            entries.append((item["name"], tuple(item["shape"])))
        return cls(entries)

    @classmethod
    def load(cls, path: str) -> 'WeightManifest':
        with open(path, 'r', encoding='utf-8') as f:
            manifest = cls.from_list(json.load(f))
        logger.info(f"Loaded manifest {path}: {len(manifest)} weights, {manifest.total_elements} elements")
        return manifest

    def save(self, path: str) -> None:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(self.to_list(), f, indent=2)


@dataclass(frozen=True)
class GroupRange:
    """One group: flat range [start, end), materialized shape and factorized element count."""
    start: int
    end: int
    target_shape: Shape
    lora_elements: int

    @property
    def length(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class GroupPlan:
    groups: Tuple[GroupRange, ...]
    mode: str
    order: int
    total_elements: int

    def __len__(self) -> int:
        return len(self.groups)

    def padding_elements(self) -> int:
        """Elements produced by the factorization and discarded before projection."""
        return sum(element_count(g.target_shape) - g.lora_elements for g in self.groups)


def _smallest_divisor_at_least_root(n: int, m: int) -> int:
    """Smallest divisor d of n with d**m >= n."""
    if m == 1:
        return n
    best = n
    limit = math.isqrt(n)
    for small in range(1, limit + 1):
        if n % small:
            continue
        for d in (small, n // small):
            if d ** m >= n and d < best:
                best = d
    return best


def _greedy_dims(target: int, order: int) -> Shape:
    dims = [0] * order
    remaining = target
    for m in range(order, 0, -1):
        d = _smallest_divisor_at_least_root(remaining, m)
        dims[m - 1] = d
        remaining //= d
    return tuple(dims)


def regular_dims(n: int, order: int, max_ratio: float = DEFAULT_MAX_RATIO) -> Shape:
    """
    Balanced M-tuple whose product p satisfies n <= p < 2n.

    The target is the smallest p >= n whose greedy factorization (for m = M..1 take
    the smallest divisor of the remainder that is >= remainder^(1/m)) has
    max/min <= max_ratio. Powers of two always qualify, which bounds the search.

    Args:
        n (int): Required element count
        order (int): Number of modes M
        max_ratio (float): Largest accepted max(d)/min(d)

    Returns:
        Shape: (d_1, ..., d_M)
    """
    if n < 1 or order < 1:
        raise InvalidInputError(f"regular_dims needs n >= 1 and M >= 1, got n={n}, M={order}")
    if order == 1:
        return (n,)
    target = n
    while True:
        dims = _greedy_dims(target, order)
        if max(dims) <= max_ratio * min(dims):
            return dims
        # powers of two factor into extents within a factor of 2
        if target & (target - 1) == 0:
            return dims
        target += 1


def _near_equal_ranges(total: int, groups: int) -> List[Tuple[int, int]]:
    base, extra = divmod(total, groups)
    ranges = []
    start = 0
    for g in range(groups):
        end = start + base + (1 if g < extra else 0)
        ranges.append((start, end))
        start = end
    return ranges


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _stacked_shape(manifest: WeightManifest, start: int, end: int, g: int) -> Shape:
    offsets = manifest.offsets()
    covered = [shape for (_, shape), lo, hi in zip(manifest.entries, offsets[:-1], offsets[1:])
               if lo >= start and hi <= end]
    cols = {shape[1] for shape in covered}
    if len(cols) != 1:
        raise InfeasibleConfigError(
            f"Group {g} stacks weights with different column counts {sorted(cols)}; enable reshape")
    return (sum(shape[0] for shape in covered), cols.pop())


def build_group_plan(manifest: WeightManifest, groups: int, order: int, reshape: bool,
                     rho: float, mode: str = "group-wise",
                     max_ratio: float = DEFAULT_MAX_RATIO) -> GroupPlan:
    """
    Split the concatenated update vector into groups and pick group tensor shapes.

    Args:
        manifest (WeightManifest): Adaptation target
        groups (int): Number of groups G
        order (int): Tensor order M of the factorization
        reshape (bool): Fold each group into a regular tensor
        rho (float): Projection ratio in (0, 1]
        mode (str): 'weight-wise' (G must equal the entry count) or 'group-wise'
        max_ratio (float): Regular shape threshold

    Returns:
        GroupPlan: Immutable plan
    """
    if mode not in GROUP_MODES:
        raise InvalidInputError(f"Unknown group mode {mode!r}, expected one of {GROUP_MODES}")
    if groups < 1 or order < 1:
        raise InvalidInputError(f"G and M must be >= 1, got G={groups}, M={order}")
    if not 0.0 < rho <= 1.0:
        raise InvalidInputError(f"rho must be in (0, 1], got {rho}")
    total = manifest.total_elements
    offsets = manifest.offsets()

    if mode == "weight-wise":
        if groups != len(manifest):
            raise InvalidInputError(
                f"Weight-wise grouping needs G == {len(manifest)} (number of weights), got {groups}")
        ranges = list(zip(offsets[:-1], offsets[1:]))
    else:
        if groups > total:
            raise InvalidInputError(f"G={groups} exceeds the {total} elements to adapt")
        ranges = _near_equal_ranges(total, groups)

    boundaries = set(offsets)
    planned = []
    for g, (start, end) in enumerate(ranges):
        length = end - start
        lora = max(1, _round_half_up(rho * length))
        if reshape:
            target = regular_dims(lora, order, max_ratio)
        else:
            if rho != 1.0:
                raise InfeasibleConfigError(
                    f"Group {g}: a non-reshaped plan needs rho == 1 (got {rho}); enable reshape")
            if start not in boundaries or end not in boundaries:
                raise InfeasibleConfigError(
                    f"Group {g} range [{start}, {end}) crosses weight boundaries; enable reshape")
            if order == 1:
                target = (length,)
            elif order == 2:
                target = _stacked_shape(manifest, start, end, g)
            else:
                raise InfeasibleConfigError(f"Order M={order} > 2 requires reshape")
        planned.append(GroupRange(start=start, end=end, target_shape=target, lora_elements=lora))
        logger.debug(f"Group {g}: [{start}, {end}) lora={lora} target={target}")

    plan = GroupPlan(groups=tuple(planned), mode=mode, order=order, total_elements=total)
    waste = plan.padding_elements()
    if waste > 0.25 * sum(g.lora_elements for g in planned):
        logger.warning(f"Regular shapes pad {waste} elements beyond the factorization targets")
    return plan


def gather(manifest: WeightManifest, deltas: Mapping[str, DenseTensor]) -> DenseTensor:
    """Concatenate the row-major flattening of every delta, in manifest order."""
    parts = []
    for name, shape in manifest.entries:
        if name not in deltas:
            raise InvalidInputError(f"Missing delta for weight {name!r}")
        delta = np.asarray(deltas[name])
        if tuple(delta.shape) != tuple(shape):
            raise InvalidInputError(f"Delta {name!r} has shape {delta.shape}, expected {shape}")
        parts.append(vectorize(delta))
    return np.concatenate(parts)


def scatter(group_tensors: Sequence[DenseTensor], plan: GroupPlan,
            manifest: WeightManifest) -> Dict[str, DenseTensor]:
    """
    Truncate each group tensor to its range, concatenate and cut back into named weights.

    Args:
        group_tensors (Sequence[DenseTensor]): One tensor per group, at least range-length elements
        plan (GroupPlan): Plan the tensors were produced for
        manifest (WeightManifest): Adaptation target

    Returns:
        Dict[str, DenseTensor]: Per-weight deltas, in manifest order
    """
    if len(group_tensors) != len(plan.groups):
        raise InvalidInputError(f"Expected {len(plan.groups)} group tensors, got {len(group_tensors)}")
    pieces = []
    for g, (tensor, group) in enumerate(zip(group_tensors, plan.groups)):
        flat = vectorize(np.asarray(tensor))
        if flat.size < group.length:
            raise InvalidInputError(
                f"Group {g} tensor has {flat.size} elements, smaller than its range of {group.length}")
        pieces.append(flat[:group.length])
    full = np.concatenate(pieces)
    offsets = manifest.offsets()
    return {
        name: full[lo:hi].reshape(shape).copy()
        for (name, shape), lo, hi in zip(manifest.entries, offsets[:-1], offsets[1:])
    }


def load_manifest(path: str) -> WeightManifest:
    return WeightManifest.load(path)


def bundled_manifest_path(name: str, config_dir: Optional[str] = None) -> str:
    """Path of a manifest shipped in ``config/manifests`` (``vit_base_qv``, ``unet_qv``)."""
    if config_dir is None:
        config_dir = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'config')
    stem = name[:-5] if name.endswith('.json') else name
    return os.path.join(config_dir, 'manifests', f'{stem}.json')
