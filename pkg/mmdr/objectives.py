"""Training losses: bidirectional in-batch contrastive, joint cross-modal and intent BCE."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from mmdr.autodiff import (
    Tensor,
    add,
    bce_with_logits,
    constant,
    cosine_sim_matrix,
    div_scalar,
    softmax_cross_entropy_rows,
    transpose,
)
from mmdr.encoders import IntentHeadParams, intent_logits
from mmdr.errors import DataError, DegenerateInputError, DimensionError

UNIT_NORM_TOL = 1e-6
MASKED_LOGIT = -1e9


@dataclass
class ContrastiveBatch:
    """Row i of ``context_embs`` is paired with row i of ``response_embs``.

    ``response_ids`` is only needed when ``mask_duplicates`` is set: off-diagonal
    entries whose response id equals the row's gold id are dropped from both
    softmax denominators.
    """

    context_embs: Tensor
    response_embs: Tensor
    temperature: float = 0.01
    response_ids: Sequence[str] | None = None
    mask_duplicates: bool = False

    def __post_init__(self) -> None:
        if self.context_embs.data.ndim != 2 or self.response_embs.data.ndim != 2:
            raise DimensionError(
                f"contrastive batch needs matrices, got {self.context_embs.shape} and {self.response_embs.shape}"
            )
        if self.context_embs.shape != self.response_embs.shape:
            raise DimensionError(
                f"context and response batches differ: {self.context_embs.shape} vs {self.response_embs.shape}"
            )
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        for label, emb in (("context", self.context_embs), ("response", self.response_embs)):
            norms = np.linalg.norm(emb.data, axis=1)
            if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
                raise DegenerateInputError(f"{label} embeddings must be unit-norm rows")
        if self.mask_duplicates and (self.response_ids is None or len(self.response_ids) != self.size):
            raise DimensionError("mask_duplicates needs one response id per row")

    @property
    def size(self) -> int:
        return self.context_embs.shape[0]

    def duplicate_mask(self) -> np.ndarray | None:
        if not self.mask_duplicates or self.response_ids is None:
            return None
        ids = np.asarray(self.response_ids, dtype=object)
        same = ids[:, None] == ids[None, :]
        np.fill_diagonal(same, False)
        if not same.any():
            return None
        return np.where(same, MASKED_LOGIT, 0.0)


@dataclass
class IntentBatch:
    context_embs: Tensor
    labels: Sequence[int]

    def __post_init__(self) -> None:
        if any(label not in (0, 1) for label in self.labels):
            raise DataError("intent labels must be 0 (text) or 1 (image)")
        if self.context_embs.data.ndim != 2 or self.context_embs.shape[0] != len(self.labels):
            raise DimensionError(f"{len(self.labels)} intent labels for embeddings of shape {self.context_embs.shape}")


def contrastive_loss(batch: ContrastiveBatch) -> Tensor:
    """Context->response plus response->context cross entropy over the scaled score matrix."""
    if batch.size == 0:
        raise DegenerateInputError("contrastive loss on an empty batch")
    scores = div_scalar(cosine_sim_matrix(batch.context_embs, batch.response_embs), batch.temperature)
    mask = batch.duplicate_mask()
    if mask is not None:
        scores = add(scores, constant(mask))
    targets = np.arange(batch.size)
    return add(softmax_cross_entropy_rows(scores, targets), softmax_cross_entropy_rows(transpose(scores), targets))


def joint_loss(batch: ContrastiveBatch) -> Tensor:
    """Contrastive loss over a batch whose responses mix text and image embeddings.

    The modality mix is invisible here; each response row must already come
    from its own modality's encoder.
    """
    return contrastive_loss(batch)


def intent_loss(batch: IntentBatch, head: IntentHeadParams) -> Tensor:
    """Mean BCE of the intent head; label 1 marks an image response."""
    return bce_with_logits(intent_logits(head, batch.context_embs), batch.labels)
