"""Synthetic multimodal dialogues with topic-conditioned vocabulary.

Token ids 0 and 1 are PAD and SEP. The rest of the vocabulary is cut into one
shard per topic, and every shard into a context half and a response half paired
index by index. Each dialogue owns a unique set of anchor tokens from its
topic's context half: the context is built from the anchors, the text response
and the image labels from the anchors' response-half partners. An untrained
dual encoder therefore sits at chance, while an oracle that knows the pairing
separates the data perfectly when ``alignment_noise`` is 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mmdr.config import RESERVED_IDS, SyntheticGenConfig
from mmdr.errors import ConfigError
from mmdr.models import DialogueExample, ImageResponse, Modality

SPLITS = ("train", "dev", "test")

MAX_ANCHOR_ATTEMPTS = 200


@dataclass(frozen=True)
class VocabLayout:
    n_topics: int
    half: int

    @classmethod
    def from_config(cls, config: SyntheticGenConfig) -> VocabLayout:
        half = (config.vocab_size - RESERVED_IDS) // config.n_topics // 2
        if half < config.label_tokens[1]:
            raise ConfigError(
                f"vocab_size {config.vocab_size} is too small for {config.n_topics} topics: "
                f"each topic needs at least {2 * config.label_tokens[1]} ids"
            )
        return cls(n_topics=config.n_topics, half=half)

    def _start(self, topic: int) -> int:
        return RESERVED_IDS + topic * 2 * self.half

    def context_tokens(self, topic: int) -> np.ndarray:
        return np.arange(self._start(topic), self._start(topic) + self.half)

    def response_tokens(self, topic: int) -> np.ndarray:
        return np.arange(self._start(topic) + self.half, self._start(topic) + 2 * self.half)

    def pair(self, tokens: np.ndarray | list[int]) -> np.ndarray:
        """Context-half token -> its response-half partner."""
        return np.asarray(tokens, dtype=np.int64) + self.half

    def unpair(self, tokens: np.ndarray | list[int]) -> np.ndarray:
        return np.asarray(tokens, dtype=np.int64) - self.half

    def topic_of(self, token: int) -> int | None:
        offset = token - RESERVED_IDS
        if offset < 0 or offset >= self.n_topics * 2 * self.half:
            return None
        return offset // (2 * self.half)

    def is_context_token(self, token: int) -> bool:
        return self.topic_of(token) is not None and (token - RESERVED_IDS) % (2 * self.half) < self.half


class DialogueGenerator:
    """Draws every split from one seeded stream so a config fully determines the output."""

    def __init__(self, config: SyntheticGenConfig) -> None:
        if config.alignment_noise > 0 and config.n_topics < 2:
            raise ConfigError("alignment_noise needs at least two topics to draw off-topic tokens from")
        self.config = config
        self.layout = VocabLayout.from_config(config)
        self.rng = np.random.default_rng(config.seed)
        self.patterns = self.rng.uniform(-1.0, 1.0, size=(config.n_topics, *config.image_dims))
        self._used_anchors: set[tuple[int, ...]] = set()

    def generate(self) -> dict[str, list[DialogueExample]]:
        counts = {
            "train": self.config.train_dialogues,
            "dev": self.config.dev_dialogues,
            "test": self.config.test_dialogues,
        }
        return {split: self.generate_split(split, counts[split]) for split in SPLITS}

    def generate_split(self, split: str, n_dialogues: int) -> list[DialogueExample]:
        cfg = self.config
        bank = self._image_bank(split) if cfg.image_bank_size is not None else None
        n_images = 0
        examples = []
        for n in range(n_dialogues):
            topic = int(self.rng.integers(cfg.n_topics))
            wants_image = bool(self.rng.random() < cfg.intent_probability(topic))
            if self.rng.random() < cfg.intent_ambiguity:
                wants_image = not wants_image

            image: ImageResponse | None = None
            text: list[int] | None = None
            if wants_image and bank is not None:
                image = bank[topic][int(self.rng.integers(len(bank[topic])))]
                anchors = self.layout.unpair(image.labels)
            else:
                anchors = self._unique_anchors(topic)
                if wants_image:
                    image = self._image(f"{split}-img-{n_images:05d}", topic, anchors)
                    n_images += 1
                else:
                    text = self._text_response(topic, anchors)

            examples.append(
                DialogueExample(
                    id=f"{split}-{n:05d}",
                    context=self._context(topic, anchors),
                    gold_modality=Modality.IMAGE if wants_image else Modality.TEXT,
                    text_response=text,
                    image_response=image,
                    topic=topic,
                )
            )
        return examples

    def _image_bank(self, split: str) -> list[list[ImageResponse]]:
        assert self.config.image_bank_size is not None
        bank: list[list[ImageResponse]] = [[] for _ in range(self.config.n_topics)]
        for i in range(self.config.image_bank_size):
            topic = i % self.config.n_topics
            bank[topic].append(self._image(f"{split}-img-{i:05d}", topic, self._unique_anchors(topic)))
        return bank

    def _unique_anchors(self, topic: int) -> np.ndarray:
        lo, hi = self.config.label_tokens
        pool = self.layout.context_tokens(topic)
        for _ in range(MAX_ANCHOR_ATTEMPTS):
            k = int(self.rng.integers(lo, hi + 1))
            anchors = tuple(sorted(int(t) for t in self.rng.choice(pool, size=k, replace=False)))
            if anchors not in self._used_anchors:
                self._used_anchors.add(anchors)
                return np.array(anchors, dtype=np.int64)
        raise ConfigError(
            f"ran out of distinct anchor sets for topic {topic}; increase vocab_size or reduce dialogue counts"
        )

    def _noisy(self, tokens: np.ndarray, topic: int, response_half: bool) -> np.ndarray:
        """Replace each token, with probability sigma, by a token of another topic's matching half."""
        sigma = self.config.alignment_noise
        if sigma == 0:
            return tokens
        out = tokens.copy()
        for i in np.flatnonzero(self.rng.random(len(tokens)) < sigma):
            other = (topic + int(self.rng.integers(1, self.config.n_topics))) % self.config.n_topics
            half = self.layout.response_tokens(other) if response_half else self.layout.context_tokens(other)
            out[i] = int(self.rng.choice(half))
        return out

    def _context(self, topic: int, anchors: np.ndarray) -> list[list[int]]:
        lo, hi = self.config.context_utterances
        n_utterances = int(self.rng.integers(lo, hi + 1))
        lengths = self.rng.integers(self.config.utterance_tokens[0], self.config.utterance_tokens[1] + 1, n_utterances)
        total = int(lengths.sum())
        if total < len(anchors):
            lengths[-1] += len(anchors) - total
            total = len(anchors)
        tokens = self.rng.choice(anchors, size=total)
        tokens[self.rng.choice(total, size=len(anchors), replace=False)] = anchors
        tokens = self._noisy(tokens, topic, response_half=False)
        bounds = np.cumsum(lengths)[:-1]
        return [chunk.tolist() for chunk in np.split(tokens, bounds)]

    def _text_response(self, topic: int, anchors: np.ndarray) -> list[int]:
        lo, hi = self.config.utterance_tokens
        length = max(int(self.rng.integers(lo, hi + 1)), len(anchors))
        partners = self.layout.pair(anchors)
        tokens = np.concatenate([partners, self.rng.choice(partners, size=length - len(partners))])
        self.rng.shuffle(tokens)
        return self._noisy(tokens, topic, response_half=True).tolist()

    def _image(self, image_id: str, topic: int, anchors: np.ndarray) -> ImageResponse:
        grid = self.patterns[topic] + self.rng.normal(0.0, self.config.alignment_noise, self.config.image_dims)
        labels = self.layout.pair(anchors)
        self.rng.shuffle(labels)
        return ImageResponse(
            id=image_id,
            dims=self.config.image_dims,
            grid=grid.ravel().tolist(),
            labels=labels.tolist(),
        )


def generate(config: SyntheticGenConfig) -> dict[str, list[DialogueExample]]:
    """Generate the train/dev/test splits for ``config``."""
    return DialogueGenerator(config).generate()


def modality_counts(examples: list[DialogueExample]) -> dict[str, int]:
    counts = {m.value: 0 for m in Modality}
    for ex in examples:
        counts[ex.gold_modality.value] += 1
    return counts
