"""Synthetic data, augmentation, batching, candidate pools and dataset files."""

from mmdr.data.augment import intent_label_flips, intent_labels, prefix_augment
from mmdr.data.batching import batch_stream, filter_for, make_batches
from mmdr.data.generator import SPLITS, DialogueGenerator, VocabLayout, generate, modality_counts
from mmdr.data.pools import CandidateStore, build_pools, candidate_store
from mmdr.data.storage import load_jsonl, load_splits, save_jsonl, split_path

__all__ = [
    "SPLITS",
    "CandidateStore",
    "DialogueGenerator",
    "VocabLayout",
    "batch_stream",
    "build_pools",
    "candidate_store",
    "filter_for",
    "generate",
    "intent_label_flips",
    "intent_labels",
    "load_jsonl",
    "load_splits",
    "make_batches",
    "modality_counts",
    "prefix_augment",
    "save_jsonl",
    "split_path",
]
