"""Cross-modal grounding head.

Entity representations (the text hidden state at each phrase's last
token) act as queries, object hidden states as keys; their scaled dot
products are the correspondence scores. Training treats each
(entity, object) pair as an independent binary decision, so one entity
can match several objects without the positives competing; ranking just
sorts the raw scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor, bce_with_logits, matmul, parameter, take_rows
from .encoder import LinearParams

__all__ = [
    "PhraseSpan",
    "GroundingLogits",
    "HeadParams",
    "init_head",
    "extract_entity_states",
    "cross_modal_logits",
    "per_entity_bce",
    "grounding_loss",
    "rank_objects",
]


@dataclass
class PhraseSpan:
    """One annotated phrase: a token span, an entity type tag, and the
    ground-truth boxes it refers to (possibly several)."""

    first_token: int
    last_token: int
    entity_type: str
    gt_boxes: np.ndarray  # [num_boxes, 4] pixel rectangles

    def __post_init__(self):
        if not 0 <= self.first_token <= self.last_token:
            raise ValueError(
                f"invalid span ({self.first_token}, {self.last_token})"
            )
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if self.gt_boxes.shape[0] == 0:
            raise ValueError("phrase needs at least one ground-truth box")

    def __eq__(self, other):
        if not isinstance(other, PhraseSpan):
            return NotImplemented
        return (self.first_token == other.first_token
                and self.last_token == other.last_token
                and self.entity_type == other.entity_type
                and np.array_equal(self.gt_boxes, other.gt_boxes))


@dataclass
class GroundingLogits:
    """Entity x object score matrix for one sample. Columns of masked
    (padded) objects are never read by the loss or the ranking."""

    scores: Tensor                # [entities, objects]
    object_mask: np.ndarray       # [objects] bool
    entity_count: int = field(init=False)

    def __post_init__(self):
        self.object_mask = np.asarray(self.object_mask, dtype=bool)
        if self.scores.shape[1] != self.object_mask.shape[0]:
            raise ValueError(
                f"score columns {self.scores.shape[1]} do not match mask size {self.object_mask.shape[0]}"
            )
        self.entity_count = self.scores.shape[0]


@dataclass
class HeadParams:
    """Learned projections into the shared scoring space."""

    query: LinearParams  # d_text -> d_joint
    key: LinearParams    # d_image -> d_joint

    def __post_init__(self):
        if self.query.weight.shape[1] != self.key.weight.shape[1]:
            raise ValueError("query and key must project into the same joint dimension")

    @property
    def d_joint(self) -> int:
        return self.query.weight.shape[1]


def init_head(d_text: int, d_image: int, d_joint: int, rng: np.random.Generator,
              dtype=np.float32, std: float = 0.02) -> HeadParams:
    def lin(fan_in):
        return LinearParams(weight=parameter(rng.normal(0.0, std, (fan_in, d_joint)), dtype=dtype),
                            bias=parameter(np.zeros(d_joint), dtype=dtype))

    return HeadParams(query=lin(d_text), key=lin(d_image))


def extract_entity_states(text_hidden: Tensor, spans: Sequence[PhraseSpan]) -> Tensor:
    """Row i is the hidden state at spans[i].last_token (last-subword rule)."""
    seq_len = text_hidden.shape[0]
    last = np.asarray([s.last_token for s in spans], dtype=np.intp)
    if last.size and last.max() >= seq_len:
        raise ValueError(
            f"span last token {int(last.max())} out of range for sequence of length {seq_len}"
        )
    return take_rows(text_hidden, last)


def cross_modal_logits(entities: Tensor, objects: Tensor, object_mask,
                       params: HeadParams) -> GroundingLogits:
    """Scaled dot products between projected entities and projected objects."""
    object_mask = np.asarray(object_mask, dtype=bool)
    if not object_mask.any():
        raise ValueError("no valid objects to score against")
    q = matmul(entities, params.query.weight) + params.query.bias
    k = matmul(objects, params.key.weight) + params.key.bias
    scores = matmul(q, k.swap_last_axes()) * (1.0 / math.sqrt(params.d_joint))
    return GroundingLogits(scores=scores, object_mask=object_mask)


def per_entity_bce(logits: GroundingLogits, targets) -> Tensor:
    """Mean binary cross entropy over each entity's valid objects -> [entities]."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.scores.shape:
        raise ValueError(
            f"targets shape {targets.shape} does not match scores {logits.scores.shape}"
        )
    mask = logits.object_mask.astype(logits.scores.dtype)
    if ((targets > 0) & ~logits.object_mask).any():
        raise ValueError("positive target on a masked object")
    elementwise = bce_with_logits(logits.scores, targets * mask)
    count = float(logits.object_mask.sum())
    return (elementwise * mask).sum(axis=1) * (1.0 / count)


def grounding_loss(logits: GroundingLogits, targets) -> Tensor:
    """Per-entity mean BCE, averaged over entities. Entities with no
    positive object still contribute all-negative rows."""
    if logits.entity_count == 0:
        raise ValueError("no entities to ground")
    return per_entity_bce(logits, targets).mean()


def rank_objects(logits: GroundingLogits, entity: int) -> list[int]:
    """Valid object indices by descending score; ties broken by ascending index."""
    if not 0 <= entity < logits.entity_count:
        raise IndexError(f"entity {entity} out of range ({logits.entity_count} entities)")
    row = logits.scores.values[entity]
    valid = np.flatnonzero(logits.object_mask)
    order = sorted(valid.tolist(), key=lambda o: (-row[o], o))
    return order
