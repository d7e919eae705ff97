"""The three integration architectures: their sharing topology, inference rules and sizes.

DR   three context encoders (text retrieval, image retrieval, intent) plus an
     intent head; inference is gated on the intent probability.
SDR  one context encoder serving all three roles; gated inference.
MDR  one context encoder, no intent head; text and image candidates are ranked
     together.

In every regime the text-retrieval context encoder doubles as the text-response
encoder (same parameter object).
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from mmdr.autodiff import Tensor
from mmdr.config import ModelConfig
from mmdr.encoders import (
    ImageResponseEncoderParams,
    IntentHeadParams,
    TextEncoderParams,
    encode_context,
    encode_contexts,
    encode_image_responses,
    encode_text_responses,
    intent_logits,
    intent_probability,
)
from mmdr.errors import DegenerateInputError, StructuralError
from mmdr.models import ImageResponse, Modality, Objective, ParameterCount, Regime

INTENT_THRESHOLD = 0.5

Component = TextEncoderParams | ImageResponseEncoderParams | IntentHeadParams


@dataclass
class ModelBundle:
    """All parameters of one regime.

    For SDR and MDR the three context roles point at one ``TextEncoderParams``
    object; for DR they are three distinct objects.
    """

    regime: Regime
    model_config: ModelConfig
    vocab_size: int
    image_dims: tuple[int, int, int]
    text_context_encoder: TextEncoderParams
    image_context_encoder: TextEncoderParams
    intent_context_encoder: TextEncoderParams | None
    image_encoder: ImageResponseEncoderParams
    intent_head: IntentHeadParams | None
    seed: int = 0

    @property
    def text_response_encoder(self) -> TextEncoderParams:
        return self.text_context_encoder

    @property
    def temperature(self) -> float:
        return self.model_config.temperature

    def intent_predictor(self) -> tuple[TextEncoderParams, IntentHeadParams]:
        if self.intent_head is None or self.intent_context_encoder is None:
            raise StructuralError(f"{self.regime.value} bundle has no intent predictor")
        return self.intent_context_encoder, self.intent_head

    def context_encoder_for(self, objective: Objective) -> TextEncoderParams:
        if objective == Objective.INTENT:
            return self.intent_predictor()[0]
        if objective == Objective.IMAGE:
            return self.image_context_encoder
        return self.text_context_encoder

    def components(self) -> dict[str, Component]:
        """Named components in a fixed order, each object listed once."""
        if self.regime == Regime.DR:
            named: list[tuple[str, Component | None]] = [
                ("text_context_encoder", self.text_context_encoder),
                ("image_context_encoder", self.image_context_encoder),
                ("intent_context_encoder", self.intent_context_encoder),
                ("image_encoder", self.image_encoder),
                ("intent_head", self.intent_head),
            ]
        else:
            named = [
                ("context_encoder", self.text_context_encoder),
                ("image_encoder", self.image_encoder),
                ("intent_head", self.intent_head),
            ]
        return {name: comp for name, comp in named if comp is not None}

    def components_for(self, objective: Objective) -> list[str]:
        """Component names whose parameters receive gradient from ``objective``."""
        ctx = "context_encoder" if self.regime != Regime.DR else f"{objective.value}_context_encoder"
        if objective == Objective.INTENT:
            self.intent_predictor()
            return [ctx, "intent_head"]
        if objective == Objective.TEXT:
            return [ctx]
        if objective == Objective.IMAGE:
            return [ctx, "image_encoder"]
        if self.regime != Regime.MDR:
            raise StructuralError(f"joint objective needs an MDR bundle, got {self.regime.value}")
        return [ctx, "image_encoder"]

    def named_parameters(self, components: Iterable[str] | None = None) -> dict[str, Tensor]:
        """Parameters keyed ``component.param``."""
        available = self.components()
        wanted = list(available) if components is None else list(dict.fromkeys(components))
        params: dict[str, Tensor] = {}
        for comp_name in wanted:
            if comp_name not in available:
                raise StructuralError(f"{self.regime.value} bundle has no component {comp_name!r}")
            for name, tensor in available[comp_name].parameters().items():
                params[f"{comp_name}.{name}"] = tensor
        return params


def _text_encoder(rng: np.random.Generator, cfg: ModelConfig, vocab_size: int) -> TextEncoderParams:
    dims = cfg.resolved_dims
    return TextEncoderParams.init(rng, vocab_size, dims.d_tok, dims.d_h, dims.d_joint, cfg.dropout, cfg.max_len)


def build_model(
    regime: Regime,
    model_config: ModelConfig,
    seed: int,
    vocab_size: int,
    image_dims: tuple[int, int, int] = (8, 8, 3),
) -> ModelBundle:
    """Initialize a bundle with the regime's sharing topology.

    Each component slot draws from its own child of ``SeedSequence(seed)``, so
    the image encoder starts from the same values in every regime.
    """
    dims = model_config.resolved_dims
    text_rng, image_ctx_rng, intent_ctx_rng, image_rng, head_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(5)
    )
    text_ctx = _text_encoder(text_rng, model_config, vocab_size)
    image_encoder = ImageResponseEncoderParams.init(
        image_rng,
        vocab_size=vocab_size,
        channels=image_dims[2],
        patch_size=model_config.patch_size,
        d_tok=dims.d_tok,
        d_h=dims.d_h,
        d_vis=dims.d_vis,
        d_lab=dims.d_lab,
        d_joint=dims.d_joint,
        dropout_rate=model_config.dropout,
        max_len=model_config.max_len,
    )

    if regime == Regime.DR:
        image_ctx = _text_encoder(image_ctx_rng, model_config, vocab_size)
        intent_ctx: TextEncoderParams | None = _text_encoder(intent_ctx_rng, model_config, vocab_size)
    elif regime == Regime.SDR:
        image_ctx = intent_ctx = text_ctx
    else:
        image_ctx, intent_ctx = text_ctx, None

    head = IntentHeadParams.init(head_rng, dims.d_joint) if regime.gated else None
    return ModelBundle(
        regime=regime,
        model_config=model_config,
        vocab_size=vocab_size,
        image_dims=image_dims,
        text_context_encoder=text_ctx,
        image_context_encoder=image_ctx,
        intent_context_encoder=intent_ctx,
        image_encoder=image_encoder,
        intent_head=head,
        seed=seed,
    )


def count_parameters(bundle: ModelBundle) -> ParameterCount:
    counts = {
        name: sum(t.size for t in comp.parameters().values()) for name, comp in bundle.components().items()
    }
    return ParameterCount(regime=bundle.regime, components=counts, total=sum(counts.values()))


# Ranking


@dataclass(frozen=True)
class RankedCandidate:
    response_id: str
    modality: Modality
    score: float
    pool_index: int


def _rank_key(c: RankedCandidate) -> tuple[float, int, int]:
    return (-c.score, 0 if c.modality == Modality.TEXT else 1, c.pool_index)


def score_pool(modality: Modality, ids: Sequence[str], scores: np.ndarray) -> list[RankedCandidate]:
    if len(ids) != len(scores):
        raise DegenerateInputError(f"{len(ids)} candidate ids for {len(scores)} scores")
    return [RankedCandidate(cid, modality, float(s), i) for i, (cid, s) in enumerate(zip(ids, scores, strict=True))]


def rank_joint(candidates: Iterable[RankedCandidate]) -> list[RankedCandidate]:
    """Score descending; ties go text before image, then lower pool index."""
    return sorted(candidates, key=_rank_key)


def rank_gated(
    probability: float,
    text: Sequence[RankedCandidate],
    image: Sequence[RankedCandidate],
) -> list[RankedCandidate]:
    """Rank only the modality the intent probability selects (image iff p > 0.5)."""
    chosen = image if probability > INTENT_THRESHOLD else text
    return rank_joint(chosen)


@dataclass
class Retrieval:
    ranked: list[RankedCandidate]
    intent_probability: float | None = None

    @property
    def modality(self) -> Modality | None:
        return self.ranked[0].modality if self.ranked else None


def _check_pools(text_pool: Mapping[str, Sequence[int]], image_pool: Sequence[ImageResponse]) -> None:
    if not text_pool or not image_pool:
        raise DegenerateInputError(
            f"both candidate pools must be non-empty (text={len(text_pool)}, image={len(image_pool)})"
        )


def _pool_scores(
    context_encoder: TextEncoderParams,
    bundle: ModelBundle,
    utterances: Sequence[Sequence[int]],
    modality: Modality,
    text_pool: Mapping[str, Sequence[int]],
    image_pool: Sequence[ImageResponse],
) -> list[RankedCandidate]:
    ctx = encode_context(context_encoder, utterances).data
    if modality == Modality.TEXT:
        embs = encode_text_responses(bundle.text_response_encoder, list(text_pool.values())).data
        return score_pool(modality, list(text_pool), embs @ ctx)
    embs = encode_image_responses(bundle.image_encoder, image_pool).data
    return score_pool(modality, [img.id for img in image_pool], embs @ ctx)


def context_intent_probabilities(bundle: ModelBundle, contexts: Sequence[Sequence[Sequence[int]]]) -> np.ndarray:
    encoder, head = bundle.intent_predictor()
    logits = intent_logits(head, encode_contexts(encoder, contexts)).data.reshape(-1)
    return np.array([intent_probability(z) for z in logits])


def infer_gated(
    bundle: ModelBundle,
    utterances: Sequence[Sequence[int]],
    text_pool: Mapping[str, Sequence[int]],
    image_pool: Sequence[ImageResponse],
) -> Retrieval:
    """Predict the modality, then rank only that modality's pool."""
    bundle.intent_predictor()
    _check_pools(text_pool, image_pool)
    probability = float(context_intent_probabilities(bundle, [utterances])[0])
    modality = Modality.IMAGE if probability > INTENT_THRESHOLD else Modality.TEXT
    encoder = bundle.context_encoder_for(Objective.IMAGE if modality == Modality.IMAGE else Objective.TEXT)
    ranked = rank_joint(_pool_scores(encoder, bundle, utterances, modality, text_pool, image_pool))
    return Retrieval(ranked=ranked, intent_probability=probability)


def infer_joint(
    bundle: ModelBundle,
    utterances: Sequence[Sequence[int]],
    text_pool: Mapping[str, Sequence[int]],
    image_pool: Sequence[ImageResponse],
) -> Retrieval:
    """Rank text and image candidates together by cosine with one context embedding."""
    _check_pools(text_pool, image_pool)
    encoder = bundle.text_context_encoder
    candidates = _pool_scores(encoder, bundle, utterances, Modality.TEXT, text_pool, image_pool)
    candidates += _pool_scores(encoder, bundle, utterances, Modality.IMAGE, text_pool, image_pool)
    return Retrieval(ranked=rank_joint(candidates))


def infer(
    bundle: ModelBundle,
    utterances: Sequence[Sequence[int]],
    text_pool: Mapping[str, Sequence[int]],
    image_pool: Sequence[ImageResponse],
) -> Retrieval:
    if bundle.regime.gated:
        return infer_gated(bundle, utterances, text_pool, image_pool)
    return infer_joint(bundle, utterances, text_pool, image_pool)
