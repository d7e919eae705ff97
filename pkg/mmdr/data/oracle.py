"""Retrieval and intent oracle that reads the generator's vocabulary layout."""

from __future__ import annotations

from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

from mmdr.config import SyntheticGenConfig
from mmdr.data.generator import VocabLayout
from mmdr.data.pools import CandidateStore
from mmdr.models import CandidatePool, DialogueExample, Modality


@dataclass
class OracleScores:
    intent_accuracy: float
    r_at_1: float


class TopicOracle:
    """Knows which shard every token belongs to and how context and response halves pair up.

    Used to check what the best possible model could reach on a generated split.
    """

    def __init__(self, config: SyntheticGenConfig) -> None:
        self.config = config
        self.layout = VocabLayout.from_config(config)

    def topic_of(self, utterances: Sequence[Sequence[int]]) -> int | None:
        """Majority topic among the context-half tokens (ties go to the lower topic id)."""
        votes = Counter(
            self.layout.topic_of(tok) for utt in utterances for tok in utt if self.layout.is_context_token(tok)
        )
        if not votes:
            return None
        return min(votes, key=lambda topic: (-votes[topic], topic))

    def intent_probability(self, utterances: Sequence[Sequence[int]]) -> float:
        topic = self.topic_of(utterances)
        return 0.5 if topic is None else self.config.intent_probability(topic)

    def anchors(self, utterances: Sequence[Sequence[int]]) -> set[int]:
        topic = self.topic_of(utterances)
        if topic is None:
            return set()
        return {
            tok
            for utt in utterances
            for tok in utt
            if self.layout.topic_of(tok) == topic and self.layout.is_context_token(tok)
        }

    def score(self, utterances: Sequence[Sequence[int]], response_tokens: Sequence[int]) -> float:
        """Jaccard overlap between the anchors' partners and the response's token set."""
        expected = {int(t) for t in self.layout.pair(sorted(self.anchors(utterances)))}
        observed = set(response_tokens)
        union = expected | observed
        return len(expected & observed) / len(union) if union else 0.0

    def gold_rank(self, example: DialogueExample, pool: CandidatePool, store: CandidateStore) -> int:
        """1-based rank of the gold inside its own modality's pool; ties count against the gold."""
        modality = example.gold_modality
        ids = pool.for_example(example.id, modality)
        scores = [self.score(example.context, store.tokens(cid, modality)) for cid in ids]
        gold_index = ids.index(example.response_id)
        gold = scores[gold_index]
        return 1 + sum(1 for i, s in enumerate(scores) if s > gold or (s == gold and i < gold_index))

    def evaluate(self, examples: Sequence[DialogueExample], pool: CandidatePool, store: CandidateStore) -> OracleScores:
        correct_intent = sum(
            (self.intent_probability(ex.context) > 0.5) == (ex.gold_modality == Modality.IMAGE) for ex in examples
        )
        hits = sum(self.gold_rank(ex, pool, store) == 1 for ex in examples)
        n = max(len(examples), 1)
        return OracleScores(intent_accuracy=correct_intent / n, r_at_1=hits / n)
