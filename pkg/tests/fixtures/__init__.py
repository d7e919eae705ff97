"""Tiny configs, datasets and bundles shared by the test suites."""

from functools import lru_cache
from typing import Any

from mmdr.config import DimsConfig, EvalConfig, ModelConfig, RunConfig, SyntheticGenConfig, TrainConfig
from mmdr.data import build_pools, generate
from mmdr.models import CandidatePool, DialogueExample, Regime
from mmdr.regimes import ModelBundle, build_model

TINY_POOL = 10
TINY_IMAGE_DIMS = (4, 4, 3)


def tiny_data_config(**overrides: Any) -> SyntheticGenConfig:
    """Four topics of 24 ids each; 60 dialogues per split so both modalities fill a 10-candidate pool."""
    fields: dict[str, Any] = {
        "n_topics": 4,
        "vocab_size": 98,
        "train_dialogues": 80,
        "dev_dialogues": 60,
        "test_dialogues": 60,
        "context_utterances": (2, 4),
        "utterance_tokens": (2, 5),
        "label_tokens": (2, 3),
        "image_dims": TINY_IMAGE_DIMS,
        "alignment_noise": 0.05,
        "seed": 0,
    }
    fields.update(overrides)
    return SyntheticGenConfig(**fields)


def tiny_model_config(**overrides: Any) -> ModelConfig:
    fields: dict[str, Any] = {
        "dims": DimsConfig(d_tok=8, d_h=8, d_joint=8, d_vis=8, d_lab=8),
        "temperature": 0.1,
        "dropout": 0.1,
        "max_len": 32,
        "patch_size": 2,
    }
    fields.update(overrides)
    return ModelConfig(**fields)


def tiny_run_config(**train_overrides: Any) -> RunConfig:
    train: dict[str, Any] = {
        "batch_size": 16,
        "max_steps": 6,
        "eval_every": 3,
        "log_every": 1,
        "base_lr": 1e-2,
    }
    train.update(train_overrides)
    return RunConfig(
        data=tiny_data_config(),
        model=tiny_model_config(),
        train=TrainConfig(**train),
        eval=EvalConfig(pool_size=TINY_POOL),
    )


@lru_cache(maxsize=4)
def _splits(seed: int) -> dict[str, tuple[DialogueExample, ...]]:
    return {split: tuple(examples) for split, examples in generate(tiny_data_config(seed=seed)).items()}


def tiny_splits(seed: int = 0) -> dict[str, list[DialogueExample]]:
    """Generated once per seed; callers get fresh lists."""
    return {split: list(examples) for split, examples in _splits(seed).items()}


def tiny_pools(split: str = "dev", seed: int = 0, shared: bool = False) -> CandidatePool:
    return build_pools(split, tiny_splits()[split], seed, TINY_POOL, shared)


def tiny_bundle(regime: Regime, seed: int = 0, **model_overrides: Any) -> ModelBundle:
    config = tiny_data_config()
    return build_model(regime, tiny_model_config(**model_overrides), seed, config.vocab_size, config.image_dims)
