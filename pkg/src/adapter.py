"""
Adapter lifecycle: configuration, variant classification, initialization,
materialization of per-weight deltas, application to base weights and the
SLAD adapter file format.
"""

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from errors import ChecksumError, FormatError, InfeasibleConfigError, InvalidInputError, VersionError
from factorization import (CORE_KINDS, INIT_SCHEMES, CoreSpec, FactorizedGroup, SplitSpec,
                           count_split, init_factors, materialize_group, materialize_split)
from grouping import (DEFAULT_MAX_RATIO, GROUP_MODES, GroupPlan, WeightManifest,
                      build_group_plan, scatter)
from projection import (NONLINEAR_MODES, PROJECTION_MODES, ProjectionSpec, ProjectionState,
                        apply_linear, make_projection, tanhshrink)
from tensor_core import DenseTensor, Shape, decode_sltf, encode_sltf, vectorize


logger = logging.getLogger(__name__)

SCALE_MODES = ("alpha_over_r", "alpha")

SLAD_MAGIC = b'SLAD'
SLAD_VERSION = 1
_U32 = struct.Struct('<I')


@dataclass
class SuperLoraConfig:
    """
    Hyperparameters of one adapter.

    Args:
        groups (int, optional): Number of groups G; None means one per weight
            (weight-wise) or a single group (group-wise)
        group_mode (str): 'weight-wise' or 'group-wise'
        order (int): Tensor order M of every split
        splits (int): Number of Kronecker splits K
        rank (int | List[int]): Rank r, or one rank per mode
        core (str): 'identity', 'diagonal' or 'full'
        reshape (bool): Fold groups into regular tensors
        projection (str): Projection mode
        projection_seed (int): Seed of the fixed projection operators
        rho (float): Compression ratio in (0, 1]
        alpha (float): Delta scale numerator
        dense_split_dim (int, optional): Side of a dense leading Kronecker block
        scale_mode (str): 'alpha_over_r' or 'alpha'
        shared_projection (bool): Share one projection across equal-sized groups
        init_scheme (str): 'zero-product' or 'normal'
    """
    groups: Optional[int] = None
    group_mode: str = "weight-wise"
    order: int = 2
    splits: int = 1
    rank: Union[int, List[int]] = 1
    core: str = "identity"
    reshape: bool = False
    projection: str = "identity"
    projection_seed: int = 0
    rho: float = 1.0
    alpha: float = 1.0
    dense_split_dim: Optional[int] = None
    scale_mode: str = "alpha_over_r"
    shared_projection: bool = True
    init_scheme: str = "zero-product"

    def __post_init__(self):
        if self.group_mode not in GROUP_MODES:
            raise InvalidInputError(f"group_mode must be one of {GROUP_MODES}, got {self.group_mode!r}")
        if self.core not in CORE_KINDS:
            raise InvalidInputError(f"core must be one of {CORE_KINDS}, got {self.core!r}")
        if self.projection not in PROJECTION_MODES:
            raise InvalidInputError(f"projection must be one of {PROJECTION_MODES}, got {self.projection!r}")
        if self.scale_mode not in SCALE_MODES:
            raise InvalidInputError(f"scale_mode must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if self.init_scheme not in INIT_SCHEMES:
            raise InvalidInputError(f"init_scheme must be one of {INIT_SCHEMES}, got {self.init_scheme!r}")
        if self.groups is not None and self.groups < 1:
            raise InvalidInputError(f"groups must be >= 1, got {self.groups}")
        if self.order < 1 or self.splits < 1:
            raise InvalidInputError(f"order and splits must be >= 1, got M={self.order}, K={self.splits}")
        if not 0.0 < self.rho <= 1.0:
            raise InvalidInputError(f"rho must be in (0, 1], got {self.rho}")
        if not self.alpha > 0:
            raise InvalidInputError(f"alpha must be > 0, got {self.alpha}")
        if isinstance(self.rank, (list, tuple)):
            if len(self.rank) != self.order:
                raise InvalidInputError(f"rank list {list(self.rank)} must have one entry per mode (M={self.order})")
            self.rank = [int(r) for r in self.rank]
        if any(r < 1 for r in self.ranks):
            raise InvalidInputError(f"ranks must be >= 1, got {self.rank}")
        if self.order == 1 and self.max_rank != 1:
            raise InvalidInputError(f"order 1 is a dense update and takes rank 1, got {self.rank}")
        if self.core != "full" and len(set(self.ranks)) != 1:
            raise InvalidInputError(f"per-mode ranks {self.ranks} need core 'full'")
        if self.splits > 1 and self.order != 2:
            raise InvalidInputError(f"Kronecker splits (K={self.splits}) need matrix splits (M=2), got M={self.order}")
        if self.projection in ("identity", "shuffle") and self.rho != 1.0:
            raise InvalidInputError(f"{self.projection} projection keeps the size; rho must be 1, got {self.rho}")
        if self.dense_split_dim is not None:
            if self.splits < 2:
                raise InvalidInputError("dense_split_dim needs at least two Kronecker splits")
            if self.dense_split_dim < 2:
                raise InvalidInputError(f"dense_split_dim must be >= 2, got {self.dense_split_dim}")

    @property
    def ranks(self) -> Tuple[int, ...]:
        if isinstance(self.rank, (list, tuple)):
            return tuple(int(r) for r in self.rank)
        return (int(self.rank),) * self.order

    @property
    def max_rank(self) -> int:
        return max(self.ranks)

    def resolved_groups(self, manifest: Optional[WeightManifest] = None) -> int:
        if self.groups is not None:
            return self.groups
        if self.group_mode == "group-wise":
            return 1
        if manifest is None:
            raise InvalidInputError("Weight-wise groups=null needs a manifest to resolve G")
        return len(manifest)

    def delta_scale(self) -> float:
        if self.scale_mode == "alpha":
            return float(self.alpha)
        return float(self.alpha) / self.max_rank

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'SuperLoraConfig':
        if not isinstance(data, dict):
            raise InvalidInputError("Adapter config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidInputError(f"Unknown adapter config keys: {unknown}")
        return cls(**data)


def load_config(path: str) -> SuperLoraConfig:
    with open(path, 'r', encoding='utf-8') as f:
        config = SuperLoraConfig.from_dict(json.load(f))
    logger.info(f"Loaded adapter config {path}: {classify_variant(config)}")
    return config


def classify_variant(config: SuperLoraConfig) -> str:
    """
    Name of the LoRA variant a configuration reduces to.

    Rows are checked in order; the first match wins, so a single-group
    higher-order tensor reports as LoTR before LoRTA.
    """
    if config.projection == "identity":
        weight_wise = config.group_mode == "weight-wise"
        group_wise = config.group_mode == "group-wise"
        plain_core = config.core == "identity"
        k, m = config.splits, config.order
        if weight_wise and k == 1 and plain_core and m == 1:
            return "dense FT"
        if weight_wise and k == 1 and plain_core and m == 2:
            return "LoRA"
        if weight_wise and k == 2 and plain_core and m == 2:
            return "LoKr"
        if group_wise and config.resolved_groups() == 1 and m > 2:
            return "LoTR"
        if group_wise and k > 2 and plain_core and m == 2:
            return "LoNKr"
        if group_wise and k == 1 and m > 2:
            return "LoRTA"
    return "SuperLoRA (general)"


def _divisors(n: int) -> List[int]:
    small = [d for d in range(1, int(n ** 0.5) + 1) if n % d == 0]
    return sorted(set(small + [n // d for d in small]))


def _balanced_factors(n: int, k: int) -> Optional[Tuple[int, ...]]:
    """k factors, each >= 2, with product n and minimal max/min; descending."""
    best: Optional[Tuple[int, ...]] = None

    def search(remaining: int, left: int, upper: int, prefix: Tuple[int, ...]):
        nonlocal best
        if left == 1:
            if 2 <= remaining <= upper:
                cand = prefix + (remaining,)
                if best is None or (cand[0] / cand[-1], cand) < (best[0] / best[-1], best):
                    best = cand
            return
        for d in _divisors(remaining):
            if d < 2 or d > upper or d ** left < remaining:
                continue
            search(remaining // d, left - 1, d, prefix + (d,))

    search(n, k, n, ())
    return best


def split_plan(config: SuperLoraConfig, dims: Shape, group_index: int = 0) -> List[SplitSpec]:
    """
    Assign the group tensor extents to K splits.

    Args:
        config (SuperLoraConfig): Adapter hyperparameters
        dims (Shape): Group target shape
        group_index (int): Group being planned, for error messages

    Returns:
        List[SplitSpec]: One descriptor per split, Kronecker order
    """
    core = CoreSpec(config.core, config.ranks)
    k = config.splits
    if k == 1:
        return [SplitSpec(core, tuple(dims))]
    if len(dims) != 2:
        raise InfeasibleConfigError(f"Group {group_index}: Kronecker splits need a matrix, got shape {dims}")
    rows, cols = dims
    specs = []
    if config.dense_split_dim is not None:
        s = config.dense_split_dim
        if rows % s or cols % s:
            raise InfeasibleConfigError(
                f"Group {group_index}: dense block {s}x{s} does not divide shape {dims}")
        specs.append(SplitSpec(CoreSpec("identity", (1, 1)), (s, s), dense=True))
        rows, cols = rows // s, cols // s
        k -= 1
    row_factors = _balanced_factors(rows, k)
    col_factors = _balanced_factors(cols, k)
    if row_factors is None or col_factors is None:
        raise InfeasibleConfigError(
            f"Group {group_index}: shape {dims} cannot be split into {config.splits} Kronecker factors >= 2")
    specs.extend(SplitSpec(core, (p, q)) for p, q in zip(row_factors, col_factors))
    return specs


def derive_seed(*words: int) -> int:
    """Independent 64-bit key for a (seed, group, split) tuple."""
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1, np.uint64)[0])


@dataclass
class AdapterState:
    config: SuperLoraConfig
    manifest: WeightManifest
    plan: GroupPlan
    groups: List[FactorizedGroup]
    projections: List[ProjectionState]
    base_seed: int
    max_ratio: float = DEFAULT_MAX_RATIO

    def trainable_arrays(self) -> List[DenseTensor]:
        """Every trainable array in group -> split -> core-then-planes order."""
        arrays: List[DenseTensor] = []
        for group in self.groups:
            arrays.extend(group.trainable_arrays())
        return arrays

    def param_count(self) -> int:
        return sum(int(a.size) for a in self.trainable_arrays())

    def summary(self) -> Dict[str, Any]:
        return {
            "variant": classify_variant(self.config),
            "params": self.param_count(),
            "groups": len(self.groups),
            "per_group_dims": [list(g.target_shape) for g in self.plan.groups],
        }


def init_adapter(config: SuperLoraConfig, manifest: WeightManifest, seed: int,
                 max_ratio: float = DEFAULT_MAX_RATIO) -> AdapterState:
    """
    Build the group plan, factor descriptors, initial factors and projections.

    Args:
        config (SuperLoraConfig): Adapter hyperparameters
        manifest (WeightManifest): Adaptation target
        seed (int): Base seed of the factor values
        max_ratio (float): Regular shape threshold

    Returns:
        AdapterState: Fresh adapter; with zero-product init its deltas are all zero
    """
    plan = build_group_plan(manifest, config.resolved_groups(manifest), config.order,
                            config.reshape, config.rho, config.group_mode, max_ratio)
    groups = []
    for g, group_range in enumerate(plan.groups):
        specs = split_plan(config, group_range.target_shape, g)
        splits = [
            init_factors(spec, derive_seed(seed, g, k), config.init_scheme, zero_plane=(k == len(specs) - 1))
            for k, spec in enumerate(specs)
        ]
        groups.append(FactorizedGroup(splits))

    projections = _make_projections(config, plan)
    state = AdapterState(config=config, manifest=manifest, plan=plan, groups=groups,
                         projections=projections, base_seed=seed, max_ratio=max_ratio)
    logger.info(f"Initialized {classify_variant(config)} adapter: {len(groups)} groups, "
                f"{state.param_count()} trainable parameters")
    return state


def _make_projections(config: SuperLoraConfig, plan: GroupPlan) -> List[ProjectionState]:
    sizes = {(g.lora_elements, g.length) for g in plan.groups}
    if config.shared_projection and len(sizes) == 1:
        (n_in, n_out), = sizes
        shared = make_projection(ProjectionSpec(config.projection, config.projection_seed, n_in, n_out))
        return [shared] * len(plan.groups)
    if config.shared_projection:
        logger.debug(f"Groups have {len(sizes)} distinct sizes; using one projection per group")
    return [
        make_projection(ProjectionSpec(config.projection, derive_seed(config.projection_seed, g),
                                       group.lora_elements, group.length))
        for g, group in enumerate(plan.groups)
    ]


@dataclass
class GroupCache:
    """Intermediate values of one group's forward pass, kept for the backward pass."""
    parts: List[DenseTensor]
    pre_activation: Optional[DenseTensor]


def forward_groups(state: AdapterState) -> Tuple[Dict[str, DenseTensor], List[GroupCache]]:
    """
    Materialize every delta and keep the per-group intermediates.

    Returns:
        Tuple: per-weight deltas (manifest order) and one GroupCache per group
    """
    scale = state.config.delta_scale()
    caches = []
    vectors = []
    for group, group_range, projection in zip(state.groups, state.plan.groups, state.projections):
        parts = [materialize_split(s) for s in group.splits]
        x = vectorize(materialize_group(group, parts))[:group_range.lora_elements]
        z = apply_linear(projection, x)
        if projection.mode in NONLINEAR_MODES:
            y = tanhshrink(z)
            pre = z
        else:
            y = z
            pre = None
        caches.append(GroupCache(parts=parts, pre_activation=pre))
        vectors.append(y * scale)
    deltas = scatter(vectors, state.plan, state.manifest)
    return deltas, caches


def materialize_deltas(state: AdapterState) -> Dict[str, DenseTensor]:
    """Per-weight delta matrices, scaled by alpha / r (or alpha)."""
    deltas, _ = forward_groups(state)
    return deltas


def apply_to_base(base: Mapping[str, DenseTensor], deltas: Mapping[str, DenseTensor]) -> Dict[str, DenseTensor]:
    """W' = W + dW for every named weight; inputs are not modified."""
    if set(base) != set(deltas):
        missing = sorted(set(base) ^ set(deltas))
        raise InvalidInputError(f"Base and delta weight names differ: {missing}")
    adapted = {}
    for name, weight in base.items():
        delta = deltas[name]
        if tuple(np.shape(weight)) != tuple(np.shape(delta)):
            raise InvalidInputError(
                f"Weight {name!r}: base shape {np.shape(weight)} vs delta shape {np.shape(delta)}")
        adapted[name] = np.asarray(weight, dtype=np.float64) + delta
    return adapted


def count_params(config: SuperLoraConfig, manifest: WeightManifest,
                 max_ratio: float = DEFAULT_MAX_RATIO) -> int:
    """Trainable parameter total, computed from descriptors without allocating factors."""
    plan = build_group_plan(manifest, config.resolved_groups(manifest), config.order,
                            config.reshape, config.rho, config.group_mode, max_ratio)
    return sum(count_split(spec)
               for g, group in enumerate(plan.groups)
               for spec in split_plan(config, group.target_shape, g))


def _pack_block(payload: bytes) -> bytes:
    return _U32.pack(len(payload)) + payload


def save_adapter(state: AdapterState, path: str) -> None:
    """
    Write the adapter as SLAD: magic, version, JSON header block, manifest block,
    tensor count, SLTF tensors, CRC32 trailer. Projections are not stored.
    """
    header = json.dumps({"config": state.config.to_dict(), "base_seed": state.base_seed,
                         "max_ratio": state.max_ratio}, sort_keys=True).encode('utf-8')
    manifest = json.dumps(state.manifest.to_list()).encode('utf-8')
    arrays = state.trainable_arrays()
    body = bytearray()
    body += SLAD_MAGIC + _U32.pack(SLAD_VERSION)
    body += _pack_block(header)
    body += _pack_block(manifest)
    body += _U32.pack(len(arrays))
    for array in arrays:
        body += encode_sltf(array)
    body += _U32.pack(zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, 'wb') as f:
        f.write(bytes(body))
    logger.info(f"Saved adapter ({len(arrays)} tensors, {state.param_count()} parameters) to {path}")


def _read_block(buffer: bytes, offset: int, what: str) -> Tuple[bytes, int]:
    if len(buffer) < offset + 4:
        raise FormatError(f"Truncated adapter file: missing {what} length")
    (length,) = _U32.unpack_from(buffer, offset)
    start = offset + 4
    if len(buffer) < start + length:
        raise FormatError(f"Truncated adapter file: {what} block needs {length} bytes")
    return buffer[start:start + length], start + length


def load_adapter(path: str) -> AdapterState:
    """
    Read a SLAD file; projections are regenerated from the stored seeds.

    Raises:
        FormatError: bad magic or truncated file
        VersionError: newer format version
        ChecksumError: CRC32 mismatch
    """
    with open(path, 'rb') as f:
        buffer = f.read()
    if len(buffer) < 12:
        raise FormatError(f"{path}: file too short for an adapter ({len(buffer)} bytes)")
    if buffer[:4] != SLAD_MAGIC:
        raise FormatError(f"{path}: bad adapter magic {buffer[:4]!r}")
    (version,) = _U32.unpack_from(buffer, 4)
    if version > SLAD_VERSION:
        raise VersionError(f"{path}: adapter version {version} is newer than supported version {SLAD_VERSION}")
    if version < 1:
        raise FormatError(f"{path}: invalid adapter version {version}")
    (stored_crc,) = _U32.unpack_from(buffer, len(buffer) - 4)
    body = buffer[:-4]
    actual_crc = zlib.crc32(body) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise ChecksumError(f"{path}: checksum mismatch (stored {stored_crc:08x}, computed {actual_crc:08x})")

    header_bytes, offset = _read_block(body, 8, "header")
    manifest_bytes, offset = _read_block(body, offset, "manifest")
    try:
        header = json.loads(header_bytes.decode('utf-8'))
        manifest = WeightManifest.from_list(json.loads(manifest_bytes.decode('utf-8')))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: unreadable adapter header: {e}") from e
    try:
        config = SuperLoraConfig.from_dict(header["config"])
        base_seed = int(header["base_seed"])
        max_ratio = float(header.get("max_ratio", DEFAULT_MAX_RATIO))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise FormatError(f"{path}: incomplete adapter header: {e!r}") from e
    state = init_adapter(config, manifest, base_seed, max_ratio)

    if len(body) < offset + 4:
        raise FormatError(f"{path}: truncated tensor count")
    (count,) = _U32.unpack_from(body, offset)
    offset += 4
    arrays = state.trainable_arrays()
    if count != len(arrays):
        raise FormatError(f"{path}: holds {count} tensors, configuration expects {len(arrays)}")
    for i, target in enumerate(arrays):
        tensor, offset = decode_sltf(body, offset)
        if tensor.shape != target.shape:
            raise FormatError(f"{path}: tensor {i} has shape {tensor.shape}, expected {target.shape}")
        target[...] = tensor
    if offset != len(body):
        raise FormatError(f"{path}: {len(body) - offset} unexpected bytes before the checksum")
    logger.info(f"Loaded adapter from {path}: {state.param_count()} parameters")
    return state

