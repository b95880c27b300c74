"""
Reverse-mode gradients through the adapter pipeline and plain SGD training.

Backward order: model backward -> gather per-weight delta gradients ->
per-group scale -> projection adjoint -> Kronecker adjoint -> Tucker/CP adjoints.
"""

import logging
import math
from dataclasses import dataclass, fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from adapter import AdapterState, derive_seed, forward_groups
from errors import InvalidInputError, NumericalError, SuperLoraError
from factorization import group_backward
from grouping import gather
from Libs.log import JsonLinesWriter
from projection import apply_adjoint
from tensor_core import DenseTensor, element_count
from .toy_model import Batch, SyntheticTask, ToyModel


logger = logging.getLogger(__name__)

GRAD_CHECK_TOLERANCE = 1e-6


@dataclass
class TrainConfig:
    """
    Args:
        steps (int): Number of SGD steps
        batch_size (int): Samples per step, drawn without replacement
        learning_rate (float): SGD step size (0 freezes the adapter)
        grad_check_interval (int): Steps between sampled gradient checks, 0 disables
        eval_interval (int): Steps between eval accuracy measurements
        target_loss_ratio (float): Convergence check: final loss <= ratio * initial loss
        seed (int): Batch sampling seed
    """
    steps: int = 500
    batch_size: int = 32
    learning_rate: float = 0.2
    grad_check_interval: int = 0
    eval_interval: int = 25
    target_loss_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1 or self.eval_interval < 1:
            raise InvalidInputError(
                f"steps, batch_size and eval_interval must be positive, got "
                f"{self.steps}, {self.batch_size}, {self.eval_interval}")
        if self.learning_rate < 0 or not math.isfinite(self.learning_rate):
            raise InvalidInputError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.grad_check_interval < 0:
            raise InvalidInputError(f"grad_check_interval must be >= 0, got {self.grad_check_interval}")
        if self.target_loss_ratio <= 0:
            raise InvalidInputError(f"target_loss_ratio must be > 0, got {self.target_loss_ratio}")

    @classmethod
    def from_settings(cls, settings: Mapping[str, Any], seed: int) -> 'TrainConfig':
        known = {f.name for f in fields(cls)} - {"seed"}
        unknown = sorted(set(settings) - known)
        if unknown:
            raise InvalidInputError(f"Unknown train settings: {unknown}")
        return cls(seed=seed, **settings)


def loss_and_grads(state: AdapterState, model: ToyModel, batch: Batch) -> Tuple[float, List[DenseTensor]]:
    """
    Loss and its gradient with respect to every trainable array of the adapter.

    Returns:
        Tuple[float, List[DenseTensor]]: Loss and gradients aligned with ``state.trainable_arrays()``
    """
    deltas, caches = forward_groups(state)
    loss, model_cache = model.forward(deltas, batch)
    delta_grads = model.backward(model_cache)
    flat = gather(state.manifest, delta_grads)
    scale = state.config.delta_scale()

    grads: List[DenseTensor] = []
    for group, group_range, projection, cache in zip(state.groups, state.plan.groups,
                                                     state.projections, caches):
        grad_y = flat[group_range.start:group_range.end] * scale
        grad_x = apply_adjoint(projection, grad_y, cache.pre_activation)
        # elements past lora_elements were truncated away and receive no gradient
        padded = np.zeros(element_count(group_range.target_shape))
        padded[:grad_x.size] = grad_x
        grads.extend(group_backward(group, cache.parts, padded.reshape(group_range.target_shape)))
    return loss, grads


def gradient_check(state: AdapterState, model: ToyModel, batch: Batch, eps: float = 1e-5,
                   floor: float = 1e-2,
                   indices: Optional[Sequence[Tuple[int, int]]] = None) -> float:
    """
    Largest relative error between analytic and central-difference gradients.

    The relative error of one scalar is |a - n| / max(|a|, |n|, floor).

    Args:
        state (AdapterState): Adapter, restored bitwise after every perturbation
        model (ToyModel): Frozen model
        batch (Batch): Data the loss is evaluated on
        eps (float): Central difference step
        floor (float): Magnitude floor of the denominator
        indices (Sequence[Tuple[int, int]], optional): (array index, flat index) pairs; all scalars when None

    Returns:
        float: Maximum relative error
    """
    _, analytic = loss_and_grads(state, model, batch)
    arrays = state.trainable_arrays()
    if indices is None:
        indices = [(a, i) for a, array in enumerate(arrays) for i in range(array.size)]

    worst = 0.0
    for a, i in indices:
        flat = arrays[a].reshape(-1)
        original = flat[i]
        flat[i] = original + eps
        plus, _ = model.forward(forward_groups(state)[0], batch)
        flat[i] = original - eps
        minus, _ = model.forward(forward_groups(state)[0], batch)
        flat[i] = original
        numeric = (plus - minus) / (2.0 * eps)
        exact = float(analytic[a].reshape(-1)[i])
        error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
        worst = max(worst, error)
    logger.debug(f"Gradient check over {len(indices)} scalars: max relative error {worst:.3e}")
    return worst


def _sample_indices(state: AdapterState, rng: np.random.Generator, count: int) -> List[Tuple[int, int]]:
    arrays = state.trainable_arrays()
    sizes = np.array([a.size for a in arrays])
    picks = rng.choice(int(sizes.sum()), size=min(count, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for p in sorted(int(x) for x in picks):
        a = int(np.searchsorted(bounds, p, side='right'))
        start = int(bounds[a - 1]) if a else 0
        out.append((a, p - start))
    return out


def evaluate(state: AdapterState, model: ToyModel, batch: Batch) -> Tuple[float, float]:
    """Loss and accuracy of the adapted model on a batch."""
    deltas, _ = forward_groups(state)
    loss, cache = model.forward(deltas, batch)
    accuracy = float((cache["logits"].argmax(axis=1) == batch.labels).mean())
    return loss, accuracy


def train(state: AdapterState, model: ToyModel, task: SyntheticTask, config: TrainConfig,
          metrics_path: Optional[str] = None) -> List[Dict[str, Any]]:
    """
    Plain SGD on the adapter factors; the model and projections stay frozen.

    Each record holds the full training-set loss before that step's update and,
    every ``eval_interval`` steps and at the last step, the eval accuracy.

    Args:
        state (AdapterState): Adapter, updated in place
        model (ToyModel): Frozen model
        task (SyntheticTask): Training and evaluation data
        config (TrainConfig): Optimizer settings
        metrics_path (str, optional): JSON-lines output of the records

    Returns:
        List[Dict[str, Any]]: One ``{step, loss, eval_acc}`` record per step

    Raises:
        NumericalError: Non-finite loss, with the failing step
    """
    if model.adaptation_manifest().to_list() != state.manifest.to_list():
        raise InvalidInputError("Adapter manifest does not match the model's query/value projections")
    frozen = model.checksum()
    rng = np.random.Generator(np.random.Philox(derive_seed(config.seed, 1)))
    check_rng = np.random.Generator(np.random.Philox(derive_seed(config.seed, 2)))
    batch_size = min(config.batch_size, len(task.train))

    history: List[Dict[str, Any]] = []
    writer = JsonLinesWriter(metrics_path) if metrics_path else None
    try:
        for step in range(config.steps):
            loss, _ = evaluate(state, model, task.train)
            if not math.isfinite(loss):
                raise NumericalError(f"Loss diverged to {loss} at step {step}", step=step)

            eval_acc = None
            if step % config.eval_interval == 0 or step == config.steps - 1:
                _, eval_acc = evaluate(state, model, task.eval)

            if config.grad_check_interval and step % config.grad_check_interval == 0:
                check_batch = task.train.subset(np.arange(min(8, len(task.train))))
                error = gradient_check(state, model, check_batch, indices=_sample_indices(state, check_rng, 16))
                if error > GRAD_CHECK_TOLERANCE:
                    logger.warning(f"Step {step}: gradient check relative error {error:.3e}")

            batch = task.train.subset(np.sort(rng.choice(len(task.train), size=batch_size, replace=False)))
            _, grads = loss_and_grads(state, model, batch)
            for array, grad in zip(state.trainable_arrays(), grads):
                array -= config.learning_rate * grad

            record = {"step": step, "loss": loss, "eval_acc": eval_acc}
            history.append(record)
            if writer:
                writer.write(record)
            if eval_acc is not None:
                logger.info(f"Step {step}: loss {loss:.6f}, eval accuracy {eval_acc:.4f}")
    finally:
        if writer:
            writer.close()

    if model.checksum() != frozen:
        raise SuperLoraError("Frozen model weights changed during training")
    return history


def converged(history: Sequence[Mapping[str, Any]], target_loss_ratio: float) -> bool:
    """Whether the last recorded loss is within ``target_loss_ratio`` of the first."""
    if not history:
        return False
    return history[-1]["loss"] <= target_loss_ratio * history[0]["loss"]
