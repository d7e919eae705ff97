"""Per-objective batch streams with a seeded shuffle per epoch."""

from __future__ import annotations

from collections.abc import Iterator, Sequence

import numpy as np

from mmdr.errors import DataError, StructuralError
from mmdr.models import DialogueExample, Modality, Objective, Regime

_OBJECTIVE_SLOT = {Objective.INTENT: 0, Objective.TEXT: 1, Objective.IMAGE: 2, Objective.JOINT: 3}


def filter_for(examples: Sequence[DialogueExample], objective: Objective) -> list[DialogueExample]:
    """Text and image objectives keep their modality; intent and joint keep everything."""
    if objective == Objective.TEXT:
        return [ex for ex in examples if ex.gold_modality == Modality.TEXT]
    if objective == Objective.IMAGE:
        return [ex for ex in examples if ex.gold_modality == Modality.IMAGE]
    return list(examples)


def _stratified_order(
    rng: np.random.Generator, examples: list[DialogueExample], image_ratio: float | None
) -> list[DialogueExample]:
    """Interleave shuffled text and image examples so every prefix of k holds round(k * p) images."""
    texts = [ex for ex in examples if ex.gold_modality == Modality.TEXT]
    images = [ex for ex in examples if ex.gold_modality == Modality.IMAGE]
    rng.shuffle(texts)  # type: ignore[arg-type]
    rng.shuffle(images)  # type: ignore[arg-type]
    p = len(images) / len(examples) if image_ratio is None else image_ratio
    order: list[DialogueExample] = []
    ti = ii = 0
    for k in range(1, len(examples) + 1):
        take_image = ii < round(k * p)
        if (take_image and ii < len(images)) or ti >= len(texts):
            order.append(images[ii])
            ii += 1
        else:
            order.append(texts[ti])
            ti += 1
    return order


def make_batches(
    examples: Sequence[DialogueExample],
    regime: Regime,
    objective: Objective,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    image_ratio: float | None = None,
) -> list[list[DialogueExample]]:
    """One epoch of batches for ``objective``; the final short batch is kept.

    Args:
        examples: Training examples (already prefix-augmented if wanted)
        regime: Regime consuming the stream; MDR only trains the joint objective
        objective: Which filter and ordering to apply
        batch_size: Examples per batch
        seed: Base seed; each (epoch, objective) pair gets its own shuffle
        epoch: Epoch index
        image_ratio: Image share for joint batches; None follows the data
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if (objective == Objective.JOINT) != (regime == Regime.MDR):
        raise StructuralError(f"{regime.value} does not train the {objective.value} objective")

    selected = filter_for(examples, objective)
    if not selected:
        raise DataError(f"no training examples left for the {objective.value} objective")

    rng = np.random.default_rng([seed, epoch, _OBJECTIVE_SLOT[objective]])
    if objective == Objective.JOINT:
        ordered = _stratified_order(rng, selected, image_ratio)
    else:
        ordered = [selected[i] for i in rng.permutation(len(selected))]
    return [ordered[i : i + batch_size] for i in range(0, len(ordered), batch_size)]


def batch_stream(
    examples: Sequence[DialogueExample],
    regime: Regime,
    objective: Objective,
    batch_size: int,
    seed: int,
    image_ratio: float | None = None,
) -> Iterator[tuple[int, list[DialogueExample]]]:
    """Endless (epoch, batch) pairs, reshuffling at every epoch boundary."""
    epoch = 0
    while True:
        for batch in make_batches(examples, regime, objective, batch_size, seed, epoch, image_ratio):
            yield epoch, batch
        epoch += 1
