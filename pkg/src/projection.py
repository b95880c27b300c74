"""
Fixed seed-deterministic projections from the factorized group output to the group delta.

Modes: identity, shuffle, and the fastfood family (linear, linear_v2, nonlinear,
nonlinear_v2). The fastfood chain on a vector is
pad -> FWHT -> diag(G) -> permute -> FWHT -> truncate -> diag(B), optionally
followed by tanhshrink.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from errors import InvalidInputError
from tensor_core import DenseTensor, fwht


logger = logging.getLogger(__name__)

PROJECTION_MODES = ("identity", "shuffle", "linear", "linear_v2", "nonlinear", "nonlinear_v2")
FASTFOOD_MODES = ("linear", "linear_v2", "nonlinear", "nonlinear_v2")
NONLINEAR_MODES = ("nonlinear", "nonlinear_v2")


@dataclass(frozen=True)
class ProjectionSpec:
    """
    Args:
        mode (str): One of PROJECTION_MODES
        seed (int): Philox key the state is rebuilt from
        n_in (int): Factorized element count
        n_out (int): Group delta element count
    """
    mode: str
    seed: int
    n_in: int
    n_out: int

    def __post_init__(self):
        if self.mode not in PROJECTION_MODES:
            raise InvalidInputError(f"Unknown projection mode {self.mode!r}, expected one of {PROJECTION_MODES}")
        if self.n_in < 1 or self.n_out < 1:
            raise InvalidInputError(f"Projection sizes must be positive, got n_in={self.n_in}, n_out={self.n_out}")
        if self.mode in ("identity", "shuffle") and self.n_in != self.n_out:
            raise InvalidInputError(
                f"{self.mode} projection needs n_in == n_out, got {self.n_in} and {self.n_out}")
        if self.n_in > self.n_out:
            raise InvalidInputError(f"Projection cannot shrink: n_in={self.n_in} > n_out={self.n_out}")

    @property
    def exponent(self) -> int:
        return max(0, math.ceil(math.log2(max(self.n_in, self.n_out))))


@dataclass(frozen=True)
class ProjectionState:
    """Frozen random operators of one projection; regenerated from the seed, never stored."""
    spec: ProjectionSpec
    permutation: np.ndarray
    gauss: np.ndarray
    right_diag: np.ndarray
    exponent: int

    @property
    def mode(self) -> str:
        return self.spec.mode

    @property
    def padded_size(self) -> int:
        return 1 << self.exponent


def make_projection(spec: ProjectionSpec) -> ProjectionState:
    """
    Draw the projection operators from ``spec.seed``.

    Draw order on one Philox stream: permutation of [0, 2^N), G (2^N normals),
    then B (n_out Rademacher signs) or G' (n_out normals) for v2 modes.
    """
    exponent = spec.exponent
    size = 1 << exponent
    empty = np.zeros(0)
    if spec.mode == "identity":
        return ProjectionState(spec, np.arange(0, dtype=np.int64), empty, empty, exponent)

    rng = np.random.Generator(np.random.Philox(spec.seed))
    permutation = rng.permutation(size).astype(np.int64)
    if spec.mode == "shuffle":
        # restrict the permutation of [0, 2^N) to the first n positions, order kept
        restricted = permutation[permutation < spec.n_in]
        return ProjectionState(spec, restricted, empty, empty, exponent)

    gauss = rng.standard_normal(size)
    if spec.mode.endswith("_v2"):
        right_diag = rng.standard_normal(spec.n_out)
    else:
        right_diag = rng.integers(0, 2, size=spec.n_out).astype(np.float64) * 2.0 - 1.0
    logger.debug(f"Projection {spec.mode} n_in={spec.n_in} n_out={spec.n_out} N={exponent}")
    return ProjectionState(spec, permutation, gauss, right_diag, exponent)


def tanhshrink(z: DenseTensor) -> DenseTensor:
    return z - np.tanh(z)


def tanhshrink_grad(z: DenseTensor) -> DenseTensor:
    t = np.tanh(z)
    return t * t


def _check_length(x: DenseTensor, n: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != n:
        raise InvalidInputError(f"Projection {what} must be 1-D of length {n}, got shape {x.shape}")
    return x


def apply_linear(state: ProjectionState, x: DenseTensor) -> DenseTensor:
    """The projection without its output nonlinearity (the pre-activation for nonlinear modes)."""
    spec = state.spec
    x = _check_length(x, spec.n_in, "input")
    if spec.mode == "identity":
        return x.copy()
    if spec.mode == "shuffle":
        return x[state.permutation]
    padded = np.zeros(state.padded_size)
    padded[:spec.n_in] = x
    z = fwht(padded)
    z *= state.gauss
    z = z[state.permutation]
    z = fwht(z)
    return z[:spec.n_out] * state.right_diag


def apply(state: ProjectionState, x: DenseTensor) -> DenseTensor:
    """
    Map a length-n_in vector to length n_out.

    Args:
        state (ProjectionState): Projection operators
        x (DenseTensor): Flattened factorized output

    Returns:
        DenseTensor: Group delta vector
    """
    z = apply_linear(state, x)
    if state.mode in NONLINEAR_MODES:
        return tanhshrink(z)
    return z


def apply_adjoint(state: ProjectionState, g: DenseTensor,
                  pre_activation: Optional[DenseTensor] = None) -> DenseTensor:
    """
    Transpose of the projection applied to an output-space vector.

    For nonlinear modes the tanhshrink Jacobian tanh(z)^2 at the cached
    pre-activation ``z`` is applied first, then the linear chain's transpose:
    diag(B), pad, FWHT, inverse permutation, diag(G), FWHT, truncate.

    Args:
        state (ProjectionState): Projection operators
        g (DenseTensor): Vector of length n_out
        pre_activation (DenseTensor, optional): ``apply_linear`` output, required for nonlinear modes

    Returns:
        DenseTensor: Vector of length n_in
    """
    spec = state.spec
    g = _check_length(g, spec.n_out, "gradient")
    if spec.mode in NONLINEAR_MODES:
        if pre_activation is None:
            raise InvalidInputError(f"{spec.mode} projection adjoint needs the cached pre-activation")
        g = g * tanhshrink_grad(_check_length(pre_activation, spec.n_out, "pre-activation"))
    if spec.mode == "identity":
        return g.copy()
    if spec.mode == "shuffle":
        out = np.zeros(spec.n_in)
        out[state.permutation] = g
        return out
    padded = np.zeros(state.padded_size)
    padded[:spec.n_out] = g * state.right_diag
    z = fwht(padded)
    unpermuted = np.zeros(state.padded_size)
    unpermuted[state.permutation] = z
    unpermuted *= state.gauss
    z = fwht(unpermuted)
    return z[:spec.n_in]
