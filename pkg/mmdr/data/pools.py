"""Candidate store and frozen evaluation pools."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from mmdr.errors import DataError
from mmdr.models import CandidatePool, DialogueExample, ImageResponse, Modality


@dataclass
class CandidateStore:
    """Every response of a split, keyed by candidate id, in first-seen order."""

    split: str
    text: dict[str, list[int]] = field(default_factory=dict)
    image: dict[str, ImageResponse] = field(default_factory=dict)

    def ids(self, modality: Modality) -> list[str]:
        return list(self.text if modality == Modality.TEXT else self.image)

    def tokens(self, candidate_id: str, modality: Modality) -> list[int]:
        """Token view of a candidate: text tokens, or an image's object labels."""
        if modality == Modality.TEXT:
            return self.text[candidate_id]
        return self.image[candidate_id].labels


def candidate_store(split: str, examples: Sequence[DialogueExample]) -> CandidateStore:
    store = CandidateStore(split=split)
    for ex in examples:
        if ex.text_response is not None:
            store.text.setdefault(ex.response_id, ex.text_response)
        if ex.image_response is not None:
            store.image.setdefault(ex.response_id, ex.image_response)
    return store


def _per_example_pool(
    rng: np.random.Generator, ids: list[str], gold_index: int | None, pool_size: int
) -> list[str]:
    if gold_index is None:
        return [ids[i] for i in rng.choice(len(ids), size=pool_size, replace=False)]
    others = np.delete(np.arange(len(ids)), gold_index)
    picked = [ids[i] for i in rng.choice(others, size=pool_size - 1, replace=False)]
    picked.insert(int(rng.integers(pool_size)), ids[gold_index])
    return picked


def build_pools(
    split: str,
    examples: Sequence[DialogueExample],
    seed: int,
    pool_size: int = 50,
    shared: bool = False,
) -> CandidatePool:
    """Fix ``pool_size`` text and image candidates per example.

    The gold response sits once in its own modality's list at a seeded
    position, next to distinct distractors. With ``shared`` every example
    gets the same base list per modality, the gold substituted into the last
    slot when absent. The result depends only on the examples and the seed.
    """
    store = candidate_store(split, examples)
    ids = {m: store.ids(m) for m in Modality}
    for modality, available in ids.items():
        if len(available) < pool_size:
            raise DataError(
                f"split {split!r} has {len(available)} {modality.value} responses; pools need {pool_size} "
                f"(text={len(ids[Modality.TEXT])}, image={len(ids[Modality.IMAGE])})"
            )

    rng = np.random.default_rng(seed)
    position = {m: {cid: i for i, cid in enumerate(ids[m])} for m in Modality}
    pool = CandidatePool(split=split, seed=seed, pool_size=pool_size, shared=shared)
    tables = {Modality.TEXT: pool.text, Modality.IMAGE: pool.image}

    if shared:
        base = {m: [ids[m][i] for i in rng.choice(len(ids[m]), size=pool_size, replace=False)] for m in Modality}
        for ex in examples:
            for modality in Modality:
                candidates = list(base[modality])
                if ex.gold_modality == modality and ex.response_id not in candidates:
                    candidates[-1] = ex.response_id
                tables[modality][ex.id] = candidates
        return pool

    for ex in examples:
        for modality in Modality:
            gold_index = position[modality][ex.response_id] if ex.gold_modality == modality else None
            tables[modality][ex.id] = _per_example_pool(rng, ids[modality], gold_index, pool_size)
    return pool
