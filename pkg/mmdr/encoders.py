"""Desk-scale encoders mapping contexts, text responses and images into one joint space.

Text side: embedding lookup -> masked mean-pool -> tanh MLP -> l2 normalize.
The context encoder and the text-response encoder are the same parameter
object, so ``encode_text_response(p, t)`` equals ``encode_context(p, [t])``.

Image side: non-overlapping P x P x C patches -> linear embed -> mean-pool ->
MLP gives visual features; object labels go through a separate text-shaped
encoder; both are concatenated, projected and normalized.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from mmdr.autodiff import (
    Tensor,
    add,
    concat,
    constant,
    dropout,
    embedding_lookup,
    l2_normalize,
    matmul,
    mean_pool_masked,
    parameter,
    reshape,
    sigmoid,
    stack,
    tanh,
)
from mmdr.config import PAD_ID, SEP_ID
from mmdr.errors import DegenerateInputError, DimensionError
from mmdr.models import ImageResponse

TokenSeq = Sequence[int]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class TextEncoderParams:
    embedding: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor
    dropout_rate: float = 0.2
    max_len: int = 128

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        vocab_size: int,
        d_tok: int,
        d_h: int,
        d_out: int,
        dropout_rate: float = 0.2,
        max_len: int = 128,
    ) -> TextEncoderParams:
        return cls(
            embedding=parameter(glorot_uniform(rng, vocab_size, d_tok, (vocab_size, d_tok)), "embedding"),
            mlp_w1=parameter(glorot_uniform(rng, d_tok, d_h, (d_tok, d_h)), "mlp_w1"),
            mlp_b1=parameter(np.zeros(d_h), "mlp_b1"),
            mlp_w2=parameter(glorot_uniform(rng, d_h, d_out, (d_h, d_out)), "mlp_w2"),
            mlp_b2=parameter(np.zeros(d_out), "mlp_b2"),
            dropout_rate=dropout_rate,
            max_len=max_len,
        )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def out_dim(self) -> int:
        return self.mlp_w2.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {
            "embedding": self.embedding,
            "mlp_w1": self.mlp_w1,
            "mlp_b1": self.mlp_b1,
            "mlp_w2": self.mlp_w2,
            "mlp_b2": self.mlp_b2,
        }


@dataclass
class ImageResponseEncoderParams:
    patch_proj: Tensor
    patch_w1: Tensor
    patch_b1: Tensor
    patch_w2: Tensor
    patch_b2: Tensor
    label_encoder: TextEncoderParams
    fusion_proj: Tensor
    patch_size: int = 4
    dropout_rate: float = 0.2

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        vocab_size: int,
        channels: int,
        patch_size: int,
        d_tok: int,
        d_h: int,
        d_vis: int,
        d_lab: int,
        d_joint: int,
        dropout_rate: float = 0.2,
        max_len: int = 128,
    ) -> ImageResponseEncoderParams:
        patch_dim = patch_size * patch_size * channels
        return cls(
            patch_proj=parameter(glorot_uniform(rng, patch_dim, d_h, (patch_dim, d_h)), "patch_proj"),
            patch_w1=parameter(glorot_uniform(rng, d_h, d_h, (d_h, d_h)), "patch_w1"),
            patch_b1=parameter(np.zeros(d_h), "patch_b1"),
            patch_w2=parameter(glorot_uniform(rng, d_h, d_vis, (d_h, d_vis)), "patch_w2"),
            patch_b2=parameter(np.zeros(d_vis), "patch_b2"),
            label_encoder=TextEncoderParams.init(rng, vocab_size, d_tok, d_h, d_lab, dropout_rate, max_len),
            fusion_proj=parameter(glorot_uniform(rng, d_vis + d_lab, d_joint, (d_vis + d_lab, d_joint)), "fusion_proj"),
            patch_size=patch_size,
            dropout_rate=dropout_rate,
        )

    @property
    def out_dim(self) -> int:
        return self.fusion_proj.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        params = {
            "patch_proj": self.patch_proj,
            "patch_w1": self.patch_w1,
            "patch_b1": self.patch_b1,
            "patch_w2": self.patch_w2,
            "patch_b2": self.patch_b2,
            "fusion_proj": self.fusion_proj,
        }
        params.update({f"label_encoder.{name}": t for name, t in self.label_encoder.parameters().items()})
        return params


@dataclass
class IntentHeadParams:
    w: Tensor
    b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_joint: int) -> IntentHeadParams:
        return cls(
            w=parameter(glorot_uniform(rng, d_joint, 1, (d_joint, 1)), "w"),
            b=parameter(np.zeros(1), "b"),
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


# Text pipeline


def join_context(utterances: Sequence[TokenSeq], max_len: int) -> list[int]:
    """Join utterances with the separator and keep the most recent ``max_len`` tokens."""
    if not utterances:
        raise DegenerateInputError("empty context")
    tokens: list[int] = []
    for i, utterance in enumerate(utterances):
        if i:
            tokens.append(SEP_ID)
        tokens.extend(int(tok) for tok in utterance)
    if not tokens:
        raise DegenerateInputError("context has no tokens")
    return tokens[-max_len:]


def _mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, rate: float, train_mode: bool, rng) -> Tensor:
    hidden = tanh(add(matmul(x, w1), b1))
    hidden = dropout(hidden, rate, train_mode, rng)
    return add(matmul(hidden, w2), b2)


def pool_tokens(table: Tensor, sequences: Sequence[TokenSeq]) -> Tensor:
    """Masked mean of token embeddings per sequence; PAD positions are excluded."""
    rows = []
    for seq in sequences:
        ids = np.asarray(seq, dtype=np.int64)
        if ids.size == 0:
            raise DegenerateInputError("cannot encode an empty token sequence")
        rows.append(mean_pool_masked(embedding_lookup(table, ids), (ids != PAD_ID).astype(np.float64)))
    return stack(rows)


def text_features(
    p: TextEncoderParams,
    sequences: Sequence[TokenSeq],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Unnormalized MLP output per token sequence, [B x out_dim]."""
    pooled = pool_tokens(p.embedding, [list(seq)[-p.max_len :] for seq in sequences])
    return _mlp(pooled, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2, p.dropout_rate, train_mode, rng)


def encode_contexts(
    p: TextEncoderParams,
    contexts: Sequence[Sequence[TokenSeq]],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Unit-norm context embeddings, one row per context."""
    if not contexts:
        raise DegenerateInputError("no contexts to encode")
    joined = [join_context(utterances, p.max_len) for utterances in contexts]
    return l2_normalize(text_features(p, joined, train_mode, rng))


def encode_context(
    p: TextEncoderParams,
    utterances: Sequence[TokenSeq],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return reshape(encode_contexts(p, [utterances], train_mode, rng), (p.out_dim,))


def encode_text_responses(
    p: TextEncoderParams,
    responses: Sequence[TokenSeq],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return encode_contexts(p, [[tokens] for tokens in responses], train_mode, rng)


def encode_text_response(
    p: TextEncoderParams,
    tokens: TokenSeq,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return reshape(encode_text_responses(p, [tokens], train_mode, rng), (p.out_dim,))


# Image pipeline


def patchify(grid: np.ndarray, patch_size: int) -> np.ndarray:
    """Split an H x W x C grid into row-major non-overlapping patches, [n_patches x P*P*C]."""
    if grid.ndim != 3:
        raise DimensionError(f"image grid must be H x W x C, got shape {grid.shape}")
    h, w, c = grid.shape
    if h % patch_size or w % patch_size:
        raise DimensionError(f"image {h}x{w} is not divisible into {patch_size}x{patch_size} patches")
    blocks = grid.reshape(h // patch_size, patch_size, w // patch_size, patch_size, c)
    return blocks.transpose(0, 2, 1, 3, 4).reshape(-1, patch_size * patch_size * c)


def visual_features(
    p: ImageResponseEncoderParams,
    images: Sequence[ImageResponse],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Patch-embed, mean-pool and MLP each grid, [B x d_vis]."""
    rows = []
    for image in images:
        patches = patchify(image.array(), p.patch_size)
        if patches.shape[1] != p.patch_proj.shape[0]:
            raise DimensionError(
                f"image {image.id}: patch size {patches.shape[1]} does not match projection {p.patch_proj.shape}"
            )
        embedded = matmul(constant(patches), p.patch_proj)
        rows.append(mean_pool_masked(embedded, np.ones(patches.shape[0])))
    return _mlp(stack(rows), p.patch_w1, p.patch_b1, p.patch_w2, p.patch_b2, p.dropout_rate, train_mode, rng)


def encode_image_responses(
    p: ImageResponseEncoderParams,
    images: Sequence[ImageResponse],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Unit-norm image embeddings, one row per image."""
    if not images:
        raise DegenerateInputError("no images to encode")
    for image in images:
        if not image.labels:
            raise DegenerateInputError(f"image {image.id} has no object labels")
    visual = visual_features(p, images, train_mode, rng)
    labels = text_features(p.label_encoder, [image.labels for image in images], train_mode, rng)
    return l2_normalize(matmul(concat([visual, labels], axis=1), p.fusion_proj))


def encode_image_response(
    p: ImageResponseEncoderParams,
    image: ImageResponse,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    return reshape(encode_image_responses(p, [image], train_mode, rng), (p.out_dim,))


# Intent head


def intent_logits(h: IntentHeadParams, context_embeddings: Tensor) -> Tensor:
    """One logit per context row, [B x 1]; positive means an image response."""
    if context_embeddings.data.ndim != 2 or context_embeddings.shape[1] != h.w.shape[0]:
        raise DimensionError(f"intent head expects [B x {h.w.shape[0]}], got {context_embeddings.shape}")
    return add(matmul(context_embeddings, h.w), h.b)


def intent_logit(h: IntentHeadParams, context_embedding: Tensor) -> Tensor:
    if context_embedding.shape != (h.w.shape[0],):
        raise DimensionError(f"intent head expects a {h.w.shape[0]}-vector, got {context_embedding.shape}")
    return reshape(intent_logits(h, reshape(context_embedding, (1, h.w.shape[0]))), ())


def intent_probability(logit: float | np.ndarray) -> float:
    return float(sigmoid(logit))
