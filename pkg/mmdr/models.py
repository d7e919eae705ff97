"""Pydantic models for dialogue examples, candidate pools and evaluation reports."""

from enum import Enum

import numpy as np
from pydantic import BaseModel, Field, model_validator


class Modality(str, Enum):
    """Modality of a response."""

    TEXT = "text"
    IMAGE = "image"

    @property
    def opposite(self) -> "Modality":
        return Modality.IMAGE if self == Modality.TEXT else Modality.TEXT

    @property
    def intent_label(self) -> int:
        """Binary intent target: 1 for image responses, 0 for text."""
        return 1 if self == Modality.IMAGE else 0


class Regime(str, Enum):
    """Integration architecture.

    DR trains three separate models and gates at inference, SDR shares one
    context encoder across all subtasks, MDR drops the intent predictor and
    ranks both modalities jointly.
    """

    DR = "dr"
    SDR = "sdr"
    MDR = "mdr"

    @property
    def gated(self) -> bool:
        """Whether inference goes through an intent predictor."""
        return self != Regime.MDR


class Objective(str, Enum):
    """Training objectives and the batch streams they consume."""

    INTENT = "intent"
    TEXT = "text"
    IMAGE = "image"
    JOINT = "joint"


class Protocol(str, Enum):
    """Evaluation protocols (text-only and image-only assume an oracle intent)."""

    TEXT = "text"
    IMAGE = "image"
    MULTIMODAL = "multimodal"


class ImageResponse(BaseModel):
    """A synthetic image: an H x W x C float grid plus its object-label tokens."""

    id: str = Field(description="Image id, unique within a split's image store")
    dims: tuple[int, int, int] = Field(description="(H, W, C)")
    grid: list[float] = Field(description="Row-major flattened H x W x C values")
    labels: list[int] = Field(description="Object-label token ids (non-empty)")

    @model_validator(mode="after")
    def _check_shape(self) -> "ImageResponse":
        h, w, c = self.dims
        if min(h, w, c) <= 0:
            raise ValueError(f"image dims must be positive, got {self.dims}")
        if len(self.grid) != h * w * c:
            raise ValueError(f"grid has {len(self.grid)} values, dims {self.dims} need {h * w * c}")
        if not self.labels:
            raise ValueError("every image carries at least one object label")
        return self

    def array(self) -> np.ndarray:
        return np.asarray(self.grid, dtype=np.float64).reshape(self.dims)


class DialogueExample(BaseModel):
    """A dialogue context with its gold response in exactly one modality."""

    id: str = Field(description="Example id (prefix-augmented examples carry a '-p<n>' suffix)")
    context: list[list[int]] = Field(description="Utterances as token-id lists, oldest first")
    gold_modality: Modality
    text_response: list[int] | None = Field(default=None, description="Gold text response tokens")
    image_response: ImageResponse | None = Field(default=None, description="Gold image response")
    topic: int | None = Field(default=None, description="Generator metadata; never shown to models")

    @model_validator(mode="after")
    def _check_response(self) -> "DialogueExample":
        if not self.context:
            raise ValueError("context needs at least one utterance")
        if (self.text_response is None) == (self.image_response is None):
            raise ValueError("exactly one of text_response / image_response must be present")
        if self.gold_modality == Modality.TEXT and self.text_response is None:
            raise ValueError("gold_modality is text but text_response is missing")
        if self.gold_modality == Modality.IMAGE and self.image_response is None:
            raise ValueError("gold_modality is image but image_response is missing")
        if self.text_response is not None and not self.text_response:
            raise ValueError("text_response must not be empty")
        return self

    @property
    def response_id(self) -> str:
        """Candidate id of the gold response (image ids may be shared by several contexts)."""
        if self.image_response is not None:
            return self.image_response.id
        return f"{self.dialogue_id}:text"

    @property
    def dialogue_id(self) -> str:
        base, sep, suffix = self.id.rpartition("-p")
        return base if sep and suffix.isdigit() else self.id


class CandidatePool(BaseModel):
    """Frozen per-example candidate lists for one split.

    Each list holds ``pool_size`` candidate response ids with the gold response
    of that modality included exactly once.
    """

    split: str
    seed: int
    pool_size: int = 50
    shared: bool = False
    text: dict[str, list[str]] = Field(default_factory=dict, description="example id -> text candidate ids")
    image: dict[str, list[str]] = Field(default_factory=dict, description="example id -> image candidate ids")

    def for_example(self, example_id: str, modality: Modality) -> list[str]:
        table = self.text if modality == Modality.TEXT else self.image
        return table[example_id]


class RecallScores(BaseModel):
    """R@1/R@5/R@10 for one protocol."""

    r_at_1: float = Field(ge=0.0, le=1.0)
    r_at_5: float = Field(ge=0.0, le=1.0)
    r_at_10: float = Field(ge=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_monotone(self) -> "RecallScores":
        if not self.r_at_1 <= self.r_at_5 <= self.r_at_10:
            raise ValueError(f"recall must be monotone in k: {self.r_at_1}, {self.r_at_5}, {self.r_at_10}")
        return self

    def at(self, k: int) -> float:
        return {1: self.r_at_1, 5: self.r_at_5, 10: self.r_at_10}[k]


class ParameterCount(BaseModel):
    """Trainable scalars per component; objects shared between roles are counted once."""

    regime: Regime
    components: dict[str, int]
    total: int


class EvalReport(BaseModel):
    """Recall per protocol plus intent accuracy and diagnostic counters."""

    regime: Regime
    split: str
    protocols: dict[Protocol, RecallScores] = Field(default_factory=dict)
    counts: dict[Protocol, int] = Field(default_factory=dict)
    intent_accuracy: float | None = Field(default=None, ge=0.0, le=1.0, description="Absent for MDR")
    intent_count: int = 0
    cascade_misses: int | None = Field(
        default=None, description="Examples whose gold became unreachable through a wrong intent prediction"
    )

    @model_validator(mode="after")
    def _check_cascade_bound(self) -> "EvalReport":
        multimodal = self.protocols.get(Protocol.MULTIMODAL)
        if self.regime.gated and multimodal is not None and self.intent_accuracy is not None:
            for k in (1, 5, 10):
                if multimodal.at(k) > self.intent_accuracy:
                    raise ValueError(
                        f"multimodal R@{k}={multimodal.at(k)} exceeds intent accuracy {self.intent_accuracy}"
                    )
        return self

    def recall(self, protocol: Protocol, k: int) -> float | None:
        scores = self.protocols.get(protocol)
        return None if scores is None else scores.at(k)
