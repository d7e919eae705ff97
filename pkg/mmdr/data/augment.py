"""Training-set transforms: context-prefix expansion and intent-label corruption."""

import zlib
from collections.abc import Sequence

import numpy as np

from mmdr.models import DialogueExample


def prefix_augment(examples: Sequence[DialogueExample]) -> list[DialogueExample]:
    """One example per context prefix length 1..l, all keeping the original gold response.

    Ids get a ``-p<n>`` suffix; the response id stays that of the dialogue.
    """
    augmented = []
    for ex in examples:
        for n in range(1, len(ex.context) + 1):
            augmented.append(ex.model_copy(update={"id": f"{ex.id}-p{n}", "context": ex.context[:n]}))
    return augmented


def intent_label_flips(examples: Sequence[DialogueExample], rate: float, seed: int) -> dict[str, bool]:
    """Whether each example's intent label is flipped.

    The decision is drawn once per dialogue from ``(seed, crc32(dialogue id))``,
    so every prefix of a dialogue agrees and the outcome does not depend on
    example order.
    """
    if not 0.0 <= rate <= 0.5:
        raise ValueError(f"intent label noise must be in [0, 0.5], got {rate}")
    flips = {}
    for ex in examples:
        if rate == 0.0:
            flips[ex.id] = False
            continue
        key = zlib.crc32(ex.dialogue_id.encode("utf-8"))
        flips[ex.id] = bool(np.random.default_rng([seed, key]).random() < rate)
    return flips


def intent_labels(examples: Sequence[DialogueExample], flips: dict[str, bool] | None = None) -> list[int]:
    labels = [ex.gold_modality.intent_label for ex in examples]
    if flips:
        labels = [1 - y if flips.get(ex.id, False) else y for ex, y in zip(examples, labels, strict=True)]
    return labels
