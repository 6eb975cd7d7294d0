"""Training objectives: plain MLE, selective EOS supervision, and their mix.

The selective objective drops the EOS logit from the softmax partition
function at every position whose label is not EOS. The EOS logit is removed
from the computation graph there (not masked to -inf afterwards), so its
gradient is zero by construction and the model's tendency to stop is never
penalized for being right too early. At EOS-labeled positions the term is
ordinary MLE, which is what teaches the model where sequences end.
"""

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ConfigError

KINDS = ("mle", "selective", "combined")


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "mle"
    combine_ratio: float = 1.0  # selective : mle, used by kind="combined"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.combine_ratio <= 0:
            raise ConfigError("combine_ratio must be > 0")


@dataclass
class Loss:
    """Scalar loss with its graph node and per-position terms."""

    value: float
    node: ag.Tensor
    per_position: np.ndarray


def selective_for_ordinal(ordinal, ratio=1.0):
    """Deterministic alternation with long-run selective:mle proportion
    ratio:1, spread evenly over ordinals (Bresenham-style)."""
    f = ratio / (1.0 + ratio)
    return int(np.floor((ordinal + 1) * f)) > int(np.floor(ordinal * f))


def allowed_mask(labels, eos_index, vocab_size, selective_positions):
    """Per-position softmax support: full vocab, or vocab minus EOS where
    `selective_positions` is set and the label is not EOS."""
    labels = np.asarray(labels)
    mask = np.ones(labels.shape + (vocab_size,), dtype=bool)
    drop = np.asarray(selective_positions, dtype=bool) & (labels != eos_index)
    mask[drop, eos_index] = False
    return mask


def _loss(trace, labels, eos_index, selective_positions):
    labels = np.asarray(labels)
    logits = trace.logits_node
    n = labels.shape[0]
    if logits.data.shape[-2] != n:
        raise ConfigError(f"labels length {n} does not match trace positions {logits.data.shape[-2]}")
    vocab_size = logits.data.shape[-1]
    mask = allowed_mask(labels, eos_index, vocab_size, selective_positions)
    weights = np.full(n, 1.0 / n)
    node = ag.masked_cross_entropy(logits, labels[None, :], mask[None, :, :], weights[None, :])
    per_position = ag.nll_terms(logits.data[0], labels, mask)
    return Loss(value=node.item(), node=node, per_position=per_position)


def mle_loss(trace, labels, eos_index=0):
    """Mean over positions of -log softmax(z)[label] over the full vocab."""
    labels = np.asarray(labels)
    return _loss(trace, labels, eos_index, np.zeros(labels.shape[0], dtype=bool))


def selective_loss(trace, labels, eos_index):
    """MLE at EOS-labeled positions; EOS-free partition everywhere else."""
    labels = np.asarray(labels)
    return _loss(trace, labels, eos_index, np.ones(labels.shape[0], dtype=bool))


def combined_loss(trace, labels, eos_index, ratio=1.0, ordinal=0):
    """Per-example alternation between the two objectives, keyed on the
    example's ordinal so the split is reproducible and each example keeps
    its constituent's exact gradients."""
    if ratio <= 0:
        raise ConfigError("combine_ratio must be > 0")
    if selective_for_ordinal(ordinal, ratio):
        return selective_loss(trace, labels, eos_index)
    return mle_loss(trace, labels, eos_index)


def evaluate(spec, trace, labels, eos_index, ordinal=0):
    if spec.kind == "mle":
        return mle_loss(trace, labels, eos_index)
    if spec.kind == "selective":
        return selective_loss(trace, labels, eos_index)
    return combined_loss(trace, labels, eos_index, spec.combine_ratio, ordinal)


def selective_positions_for_batch(spec, labels, ordinals, eos_index):
    """Boolean [B, T] matrix marking positions trained with the restricted
    partition, honoring per-example alternation for the combined kind."""
    labels = np.asarray(labels)
    if spec.kind == "mle":
        return np.zeros_like(labels, dtype=bool)
    if spec.kind == "selective":
        return np.ones_like(labels, dtype=bool)
    rows = np.array([selective_for_ordinal(o, spec.combine_ratio) for o in ordinals], dtype=bool)
    return np.broadcast_to(rows[:, None], labels.shape).copy()


def restricted_softmax(logits, eos_index):
    """softmax over the vocabulary without EOS; the EOS entry is exactly 0."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.ones(logits.shape, dtype=bool)
    mask[..., eos_index] = False
    z = np.where(mask, logits, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)
