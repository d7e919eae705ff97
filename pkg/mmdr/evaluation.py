"""R@k evaluation over frozen candidate pools and best-checkpoint selection.

Protocols:
    text        examples whose gold is text, ranked in their 50 text candidates
                (intent bypassed, as if the intent predictor were an oracle)
    image       the image counterpart
    multimodal  every example; gated regimes rank only the predicted modality's
                pool, MDR ranks both pools together
"""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from mmdr.autodiff import constant, sigmoid
from mmdr.data.pools import CandidateStore, candidate_store
from mmdr.encoders import encode_contexts, encode_image_responses, encode_text_responses, intent_logits
from mmdr.errors import DataError
from mmdr.models import (
    CandidatePool,
    DialogueExample,
    EvalReport,
    Modality,
    Objective,
    Protocol,
    RecallScores,
    Regime,
)
from mmdr.regimes import ModelBundle, rank_gated, rank_joint, score_pool

KS = (1, 5, 10)
ENCODE_CHUNK = 256


def recall_at_k(ranked_ids: Sequence[str] | None, gold_id: str, k: int) -> int:
    """1 if the gold id is among the first k ranked ids; ``None`` means the gold was unreachable."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if ranked_ids is None:
        return 0
    return int(gold_id in ranked_ids[:k])


@dataclass
class CandidateEmbeddings:
    ids: list[str]
    matrix: np.ndarray
    index: dict[str, int]

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return self.matrix[[self.index[cid] for cid in ids]]


@dataclass
class SplitEmbeddings:
    """Eval-mode embeddings of every context and candidate of a split."""

    text_context: np.ndarray
    image_context: np.ndarray
    intent_probability: np.ndarray | None
    text: CandidateEmbeddings
    image: CandidateEmbeddings


def _chunks(items: Sequence, size: int = ENCODE_CHUNK):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _encode_context_rows(encoder, contexts: Sequence[Sequence[Sequence[int]]]) -> np.ndarray:
    return np.concatenate([encode_contexts(encoder, chunk).data for chunk in _chunks(contexts)])


def embed_split(bundle: ModelBundle, examples: Sequence[DialogueExample], store: CandidateStore) -> SplitEmbeddings:
    contexts = [ex.context for ex in examples]
    text_ctx = _encode_context_rows(bundle.text_context_encoder, contexts)
    if bundle.image_context_encoder is bundle.text_context_encoder:
        image_ctx = text_ctx
    else:
        image_ctx = _encode_context_rows(bundle.image_context_encoder, contexts)

    probability = None
    if bundle.regime.gated:
        encoder, head = bundle.intent_predictor()
        intent_ctx = text_ctx if encoder is bundle.text_context_encoder else _encode_context_rows(encoder, contexts)
        logits = np.concatenate(
            [intent_logits(head, constant(chunk)).data.reshape(-1) for chunk in _chunks(intent_ctx)]
        )
        probability = sigmoid(logits)

    text_ids = store.ids(Modality.TEXT)
    image_ids = store.ids(Modality.IMAGE)
    text_matrix = (
        np.concatenate(
            [
                encode_text_responses(bundle.text_response_encoder, [store.text[c] for c in chunk]).data
                for chunk in _chunks(text_ids)
            ]
        )
        if text_ids
        else np.zeros((0, bundle.model_config.resolved_dims.d_joint))
    )
    image_matrix = (
        np.concatenate(
            [
                encode_image_responses(bundle.image_encoder, [store.image[c] for c in chunk]).data
                for chunk in _chunks(image_ids)
            ]
        )
        if image_ids
        else np.zeros((0, bundle.model_config.resolved_dims.d_joint))
    )
    return SplitEmbeddings(
        text_context=text_ctx,
        image_context=image_ctx,
        intent_probability=probability,
        text=CandidateEmbeddings(text_ids, text_matrix, {c: i for i, c in enumerate(text_ids)}),
        image=CandidateEmbeddings(image_ids, image_matrix, {c: i for i, c in enumerate(image_ids)}),
    )


@dataclass
class ExampleOutcome:
    """Per-example hits for each k, per protocol, plus whether the intent was right."""

    gold_modality: Modality
    unimodal_hits: tuple[int, ...]
    multimodal_hits: tuple[int, ...]
    intent_correct: bool | None


def _outcome(
    regime: Regime,
    emb: SplitEmbeddings,
    example: DialogueExample,
    i: int,
    pools: CandidatePool,
) -> ExampleOutcome:
    text_ids = pools.for_example(example.id, Modality.TEXT)
    image_ids = pools.for_example(example.id, Modality.IMAGE)
    text_cands = score_pool(Modality.TEXT, text_ids, emb.text.rows(text_ids) @ emb.text_context[i])
    image_cands = score_pool(Modality.IMAGE, image_ids, emb.image.rows(image_ids) @ emb.image_context[i])
    gold = example.response_id

    own = text_cands if example.gold_modality == Modality.TEXT else image_cands
    unimodal = [c.response_id for c in rank_joint(own)]

    intent_correct = None
    if regime.gated:
        assert emb.intent_probability is not None
        probability = float(emb.intent_probability[i])
        intent_correct = (probability > 0.5) == (example.gold_modality == Modality.IMAGE)
        ranked = rank_gated(probability, text_cands, image_cands)
        multimodal: list[str] | None = [c.response_id for c in ranked] if intent_correct else None
    else:
        multimodal = [c.response_id for c in rank_joint(text_cands + image_cands)]

    return ExampleOutcome(
        gold_modality=example.gold_modality,
        unimodal_hits=tuple(recall_at_k(unimodal, gold, k) for k in KS),
        multimodal_hits=tuple(recall_at_k(multimodal, gold, k) for k in KS),
        intent_correct=intent_correct,
    )


def _scores(hits: list[tuple[int, ...]]) -> RecallScores:
    if not hits:
        return RecallScores(r_at_1=0.0, r_at_5=0.0, r_at_10=0.0)
    means = np.asarray(hits, dtype=np.float64).mean(axis=0)
    return RecallScores(r_at_1=float(means[0]), r_at_5=float(means[1]), r_at_10=float(means[2]))


def evaluate_embeddings(
    regime: Regime,
    emb: SplitEmbeddings,
    examples: Sequence[DialogueExample],
    pools: CandidatePool,
    protocols: Sequence[Protocol] = tuple(Protocol),
    workers: int = 1,
) -> EvalReport:
    """Score every example and reduce in example order."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda i: _outcome(regime, emb, examples[i], i, pools), range(len(examples))))
    else:
        outcomes = [_outcome(regime, emb, ex, i, pools) for i, ex in enumerate(examples)]

    report_protocols: dict[Protocol, RecallScores] = {}
    counts: dict[Protocol, int] = {}
    for protocol in protocols:
        if protocol == Protocol.MULTIMODAL:
            selected = [o.multimodal_hits for o in outcomes]
        else:
            modality = Modality.TEXT if protocol == Protocol.TEXT else Modality.IMAGE
            selected = [o.unimodal_hits for o in outcomes if o.gold_modality == modality]
        report_protocols[protocol] = _scores(selected)
        counts[protocol] = len(selected)

    intent_accuracy = None
    cascade_misses = None
    intent_count = 0
    if regime.gated and outcomes:
        correct = [o.intent_correct for o in outcomes]
        intent_count = len(correct)
        intent_accuracy = sum(bool(c) for c in correct) / intent_count
        cascade_misses = intent_count - sum(bool(c) for c in correct)

    return EvalReport(
        regime=regime,
        split=pools.split,
        protocols=report_protocols,
        counts=counts,
        intent_accuracy=intent_accuracy,
        intent_count=intent_count,
        cascade_misses=cascade_misses,
    )


def evaluate(
    bundle: ModelBundle,
    examples: Sequence[DialogueExample],
    pools: CandidatePool,
    protocols: Sequence[Protocol] = tuple(Protocol),
    workers: int = 1,
) -> EvalReport:
    """Evaluate a bundle on a split; a pure function of (bundle, examples, pools)."""
    if not examples:
        raise DataError(f"split {pools.split!r} has no examples to evaluate")
    store = candidate_store(pools.split, examples)
    return evaluate_embeddings(bundle.regime, embed_split(bundle, examples, store), examples, pools, protocols, workers)


# Checkpoint selection


@dataclass
class TrailEntry:
    step: int
    report: EvalReport
    subtask: Objective | None = None


def selection_key(report: EvalReport, metric: Objective | None = None) -> tuple[float, ...]:
    """Dev metric tuple to maximize.

    ``None`` or JOINT ranks by multimodal R@1, then R@5, then R@10; DR subtasks
    rank by intent accuracy or by their own unimodal recall.
    """
    if metric == Objective.INTENT:
        return (report.intent_accuracy or 0.0,)
    protocol = Protocol.MULTIMODAL
    if metric == Objective.TEXT:
        protocol = Protocol.TEXT
    elif metric == Objective.IMAGE:
        protocol = Protocol.IMAGE
    scores = report.protocols.get(protocol)
    if scores is None:
        return (0.0, 0.0, 0.0)
    return (scores.r_at_1, scores.r_at_5, scores.r_at_10)


def select_checkpoint(trail: Sequence[TrailEntry], metric: Objective | None = None) -> TrailEntry:
    """Best entry by ``selection_key``; exact ties go to the earliest step."""
    if not trail:
        raise DataError("cannot select a checkpoint from an empty trail")
    return max(trail, key=lambda entry: (selection_key(entry.report, metric), -entry.step))


# Sweep statistics


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_correlation(x: Sequence[float], y: Sequence[float]) -> float:
    """Rank correlation with tied values sharing their average rank; NaN when undefined."""
    if len(x) != len(y) or len(x) < 2:
        return float("nan")
    rx = _average_ranks(np.asarray(x, dtype=np.float64))
    ry = _average_ranks(np.asarray(y, dtype=np.float64))
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = float(np.sqrt((dx * dx).sum() * (dy * dy).sum()))
    if denom == 0.0:
        return float("nan")
    return float((dx * dy).sum() / denom)

