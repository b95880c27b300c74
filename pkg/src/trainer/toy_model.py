"""
Toy multi-layer single-head attention classifier with frozen weights and
adaptable query/value projections, plus the synthetic transfer task it is
trained on.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np

from errors import InvalidInputError
from grouping import WeightManifest
from tensor_core import DenseTensor


logger = logging.getLogger(__name__)

ADAPTED_PROJECTIONS = ("q", "v")


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class Batch:
    tokens: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.labels.shape != (self.tokens.shape[0],):
            raise InvalidInputError(
                f"Batch needs tokens (B, T) and labels (B,), got {self.tokens.shape} and {self.labels.shape}")

    def __len__(self) -> int:
        return int(self.tokens.shape[0])

    def subset(self, index: np.ndarray) -> 'Batch':
        return Batch(self.tokens[index], self.labels[index])


class ToyModel:
    """
    Frozen attention classifier.

    Per layer: H1 = H + softmax(Q K^T / sqrt(d)) V Wo, H2 = H1 + tanh(H1 W1) W2,
    with Q, K, V = H Wq, H Wk, H Wv. Mean pooling over the sequence feeds the head.
    Only the query and value projections receive deltas.
    """

    def __init__(self, layers: int, width: int, classes: int, vocab: int, seq_len: int,
                 ffn_width: int, head_scale: float = 1.0, seed: int = 0):
        if min(layers, width, classes, vocab, seq_len, ffn_width) < 1:
            raise InvalidInputError("Toy model sizes must all be positive")
        self.layers = layers
        self.width = width
        self.classes = classes
        self.vocab = vocab
        self.seq_len = seq_len
        self.ffn_width = ffn_width
        self.logger = logging.getLogger(__name__)

        rng = np.random.Generator(np.random.Philox(seed))
        d = width
        self.weights: Dict[str, DenseTensor] = {
            "embed": rng.standard_normal((vocab, d)),
            "pos": rng.standard_normal((seq_len, d)) * 0.5,
        }
        for layer in range(layers):
            for proj in ("q", "k", "v", "o"):
                self.weights[f"layer{layer}.attn.{proj}"] = rng.standard_normal((d, d)) / math.sqrt(d)
            self.weights[f"layer{layer}.mlp.fc1"] = rng.standard_normal((d, ffn_width)) / math.sqrt(d)
            self.weights[f"layer{layer}.mlp.fc2"] = rng.standard_normal((ffn_width, d)) / math.sqrt(ffn_width)
        self.weights["head"] = rng.standard_normal((d, classes)) * head_scale / math.sqrt(d)
        for w in self.weights.values():
            w.setflags(write=False)

    @classmethod
    def from_settings(cls, model: Mapping[str, Any], task: Mapping[str, Any], seed: int) -> 'ToyModel':
        return cls(layers=int(model["layers"]), width=int(model["width"]), classes=int(model["classes"]),
                   vocab=int(task["vocab"]), seq_len=int(task["seq_len"]),
                   ffn_width=int(model["ffn_width"]), head_scale=float(model.get("head_scale", 1.0)),
                   seed=seed)

    def adaptation_manifest(self) -> WeightManifest:
        """Query and value projections in layer order."""
        return WeightManifest([
            (f"layer{layer}.attn.{proj}", (self.width, self.width))
            for layer in range(self.layers) for proj in ADAPTED_PROJECTIONS
        ])

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.weights):
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(self.weights[name]).tobytes())
        return digest.hexdigest()

    def _weight(self, name: str, deltas: Optional[Mapping[str, DenseTensor]]) -> DenseTensor:
        w = self.weights[name]
        if deltas is not None and name in deltas:
            delta = deltas[name]
            if delta.shape != w.shape:
                raise InvalidInputError(f"Delta {name!r} has shape {delta.shape}, expected {w.shape}")
            return w + delta
        return w

    def logits(self, deltas: Optional[Mapping[str, DenseTensor]], tokens: np.ndarray) -> Tuple[np.ndarray, Dict]:
        """Forward pass to the class logits, returning the activation cache."""
        if tokens.ndim != 2 or tokens.shape[1] != self.seq_len:
            raise InvalidInputError(f"tokens must be (B, {self.seq_len}), got {tokens.shape}")
        if deltas is not None:
            unknown = set(deltas) - set(self.adaptation_manifest().names)
            if unknown:
                raise InvalidInputError(f"Deltas for non-adaptable weights: {sorted(unknown)}")
        scale = 1.0 / math.sqrt(self.width)
        h = self.weights["embed"][tokens] + self.weights["pos"]
        layer_caches = []
        for layer in range(self.layers):
            prefix = f"layer{layer}"
            wq = self._weight(f"{prefix}.attn.q", deltas)
            wk = self.weights[f"{prefix}.attn.k"]
            wv = self._weight(f"{prefix}.attn.v", deltas)
            wo = self.weights[f"{prefix}.attn.o"]
            q = h @ wq
            k = h @ wk
            v = h @ wv
            p = _softmax(np.einsum('btd,bsd->bts', q, k) * scale)
            a = p @ v
            h1 = h + a @ wo
            act = np.tanh(h1 @ self.weights[f"{prefix}.mlp.fc1"])
            h2 = h1 + act @ self.weights[f"{prefix}.mlp.fc2"]
            layer_caches.append({"h": h, "q": q, "k": k, "v": v, "p": p, "a": a, "h1": h1, "act": act,
                                 "wq": wq, "wv": wv})
            h = h2
        pooled = h.mean(axis=1)
        out = pooled @ self.weights["head"]
        return out, {"layers": layer_caches, "pooled": pooled, "logits": out}

    def forward(self, deltas: Optional[Mapping[str, DenseTensor]], batch: Batch) -> Tuple[float, Dict]:
        """
        Mean cross-entropy of the adapted model.

        Args:
            deltas (Mapping[str, DenseTensor], optional): Query/value deltas by weight name
            batch (Batch): Tokens and labels

        Returns:
            Tuple[float, Dict]: Loss and the cache for ``backward``
        """
        logits, cache = self.logits(deltas, batch.tokens)
        log_probs = logits - logits.max(axis=1, keepdims=True)
        log_probs = log_probs - np.log(np.exp(log_probs).sum(axis=1, keepdims=True))
        loss = float(-log_probs[np.arange(len(batch)), batch.labels].mean())
        cache["probs"] = np.exp(log_probs)
        cache["labels"] = batch.labels
        return loss, cache

    def backward(self, cache: Dict) -> Dict[str, DenseTensor]:
        """Gradients of the mean loss with respect to every query/value delta."""
        probs = cache["probs"]
        batch_size = probs.shape[0]
        dlogits = probs.copy()
        dlogits[np.arange(batch_size), cache["labels"]] -= 1.0
        dlogits /= batch_size
        dpooled = dlogits @ self.weights["head"].T
        dh = np.repeat(dpooled[:, None, :] / self.seq_len, self.seq_len, axis=1)

        scale = 1.0 / math.sqrt(self.width)
        grads: Dict[str, DenseTensor] = {}
        for layer in reversed(range(self.layers)):
            c = cache["layers"][layer]
            prefix = f"layer{layer}"
            # MLP block
            dact = dh @ self.weights[f"{prefix}.mlp.fc2"].T
            dh1 = dh + (dact * (1.0 - c["act"] ** 2)) @ self.weights[f"{prefix}.mlp.fc1"].T
            # attention block
            da = dh1 @ self.weights[f"{prefix}.attn.o"].T
            dp = da @ np.swapaxes(c["v"], 1, 2)
            dv = np.swapaxes(c["p"], 1, 2) @ da
            ds = c["p"] * (dp - (dp * c["p"]).sum(axis=-1, keepdims=True))
            dq = ds @ c["k"] * scale
            dk = np.swapaxes(ds, 1, 2) @ c["q"] * scale
            grads[f"{prefix}.attn.q"] = np.einsum('btd,bte->de', c["h"], dq)
            grads[f"{prefix}.attn.v"] = np.einsum('btd,bte->de', c["h"], dv)
            dh = (dh1 + dq @ c["wq"].T + dk @ self.weights[f"{prefix}.attn.k"].T
                  + dv @ c["wv"].T)
        return {name: grads[name] for name in self.adaptation_manifest().names}

    def accuracy(self, deltas: Optional[Mapping[str, DenseTensor]], batch: Batch) -> float:
        logits, _ = self.logits(deltas, batch.tokens)
        return float((logits.argmax(axis=1) == batch.labels).mean())


@dataclass
class SyntheticTask:
    """
    Source and target labelings of random token sequences.

    The source labeler is the frozen model itself; the target labeler adds fixed
    random low-rank deltas to its query/value projections.
    """
    train: Batch
    eval: Batch
    source_train_labels: np.ndarray
    target_deltas: Dict[str, DenseTensor]

    @property
    def source_train(self) -> Batch:
        """Training tokens with the frozen model's own labels."""
        return Batch(self.train.tokens, self.source_train_labels)

    @classmethod
    def generate(cls, model: ToyModel, task: Mapping[str, Any], seed: int) -> 'SyntheticTask':
        rng = np.random.Generator(np.random.Philox(seed))
        n_train = int(task["train_samples"])
        n_eval = int(task["eval_samples"])
        rank = int(task.get("shift_rank", 1))
        shift_scale = float(task.get("shift_scale", 1.0))
        tokens = rng.integers(0, model.vocab, size=(n_train + n_eval, model.seq_len))

        target_deltas: Dict[str, DenseTensor] = {}
        for name, (rows, cols) in model.adaptation_manifest().entries:
            left = rng.standard_normal((rows, rank))
            right = rng.standard_normal((cols, rank))
            target_deltas[name] = shift_scale * (left @ right.T) / math.sqrt(rows * rank)

        source_logits, _ = model.logits(None, tokens)
        target_logits, _ = model.logits(target_deltas, tokens)
        source = source_logits.argmax(axis=1)
        target = target_logits.argmax(axis=1)
        agreement = float((source == target).mean())
        if agreement == 1.0:
            raise InvalidInputError("Source and target labelers agree on every sample; raise shift_scale")
        logger.info(f"Synthetic task: {n_train} train / {n_eval} eval samples, "
                    f"source/target label agreement {agreement:.2%}")
        return cls(train=Batch(tokens[:n_train], target[:n_train]),
                   eval=Batch(tokens[n_train:], target[n_train:]),
                   source_train_labels=source[:n_train],
                   target_deltas=target_deltas)
