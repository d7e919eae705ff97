"""Tests for the synthetic generator, augmentation, batching, pools and dataset files."""

import numpy as np
import pytest

from mmdr.config import SyntheticGenConfig
from mmdr.data import (
    VocabLayout,
    batch_stream,
    build_pools,
    candidate_store,
    filter_for,
    generate,
    intent_label_flips,
    intent_labels,
    load_jsonl,
    load_splits,
    make_batches,
    modality_counts,
    prefix_augment,
    save_jsonl,
    split_path,
)
from mmdr.data.oracle import TopicOracle
from mmdr.errors import ConfigError, DataError, StructuralError
from mmdr.models import DialogueExample, ImageResponse, Modality, Objective, Regime
from tests.fixtures import TINY_POOL, tiny_data_config, tiny_pools, tiny_splits


def text_example(i: int, utterances: int = 1) -> DialogueExample:
    return DialogueExample(
        id=f"train-{i:05d}",
        context=[[2 + u, 3] for u in range(utterances)],
        gold_modality=Modality.TEXT,
        text_response=[4, 5],
    )


def image_example(i: int) -> DialogueExample:
    image = ImageResponse(id=f"train-img-{i:05d}", dims=(1, 1, 1), grid=[0.0], labels=[6])
    return DialogueExample(id=f"train-i{i:05d}", context=[[2]], gold_modality=Modality.IMAGE, image_response=image)


class TestGenerator:
    def test_split_sizes(self):
        splits = tiny_splits()
        assert [len(splits[s]) for s in ("train", "dev", "test")] == [80, 60, 60]

    def test_ids(self):
        dev = tiny_splits()["dev"]
        assert dev[0].id == "dev-00000"
        image_ids = [ex.response_id for ex in dev if ex.gold_modality == Modality.IMAGE]
        assert image_ids[0] == "dev-img-00000"
        assert len(set(image_ids)) == len(image_ids)

    def test_same_seed_same_data(self):
        assert generate(tiny_data_config()) == generate(tiny_data_config())

    def test_different_seed_different_data(self):
        assert generate(tiny_data_config(seed=1))["train"] != generate(tiny_data_config())["train"]

    def test_default_intent_follows_topic_parity(self):
        for ex in tiny_splits()["train"]:
            assert (ex.gold_modality == Modality.IMAGE) == (ex.topic % 2 == 0)

    def test_full_ambiguity_flips_every_intent(self):
        splits = generate(tiny_data_config(intent_ambiguity=1.0))
        for ex in splits["train"]:
            assert (ex.gold_modality == Modality.IMAGE) == (ex.topic % 2 == 1)

    def test_intent_prior(self):
        splits = generate(tiny_data_config(intent_prior=[1.0, 1.0, 1.0, 1.0]))
        assert modality_counts(splits["dev"]) == {"text": 0, "image": 60}

    def test_noise_free_tokens_stay_in_their_halves(self):
        config = tiny_data_config(alignment_noise=0.0)
        layout = VocabLayout.from_config(config)
        for ex in generate(config)["train"]:
            context_tokens = {t for utt in ex.context for t in utt}
            assert context_tokens <= set(layout.context_tokens(ex.topic).tolist())
            response = ex.text_response if ex.text_response is not None else ex.image_response.labels
            assert set(response) <= set(layout.response_tokens(ex.topic).tolist())
            assert set(layout.pair(sorted(context_tokens)).tolist()) == set(response)

    def test_image_grid_shape(self):
        ex = next(e for e in tiny_splits()["dev"] if e.gold_modality == Modality.IMAGE)
        assert ex.image_response.array().shape == (4, 4, 3)

    def test_context_lengths(self):
        for ex in tiny_splits()["train"]:
            assert 2 <= len(ex.context) <= 4

    def test_image_bank_shares_images(self):
        splits = generate(tiny_data_config(image_bank_size=8))
        image_ids = {ex.response_id for ex in splits["train"] if ex.gold_modality == Modality.IMAGE}
        images = sum(ex.gold_modality == Modality.IMAGE for ex in splits["train"])
        assert len(image_ids) <= 8 < images
        assert all(cid.startswith("train-img-") for cid in image_ids)

    def test_vocabulary_too_small(self):
        with pytest.raises(ConfigError):
            generate(tiny_data_config(vocab_size=12))

    def test_noise_needs_two_topics(self):
        with pytest.raises(ConfigError):
            generate(SyntheticGenConfig(n_topics=1, vocab_size=40, alignment_noise=0.1))

    def test_modality_counts(self):
        counts = modality_counts(tiny_splits()["dev"])
        assert counts["text"] + counts["image"] == 60
        assert counts["text"] >= TINY_POOL
        assert counts["image"] >= TINY_POOL


class TestOracle:
    def test_noise_free_data_is_separable(self):
        config = tiny_data_config(alignment_noise=0.0)
        dev = generate(config)["dev"]
        pool = build_pools("dev", dev, seed=0, pool_size=TINY_POOL)
        scores = TopicOracle(config).evaluate(dev, pool, candidate_store("dev", dev))
        assert scores.intent_accuracy == 1.0
        assert scores.r_at_1 == 1.0

    def test_recall_falls_as_alignment_noise_grows(self):
        recalls = []
        for sigma in (0.0, 0.05, 0.2, 0.5):
            config = tiny_data_config(alignment_noise=sigma, dev_dialogues=300)
            dev = generate(config)["dev"]
            pool = build_pools("dev", dev, seed=0, pool_size=TINY_POOL)
            recalls.append(TopicOracle(config).evaluate(dev, pool, candidate_store("dev", dev)).r_at_1)
        assert recalls[0] == 1.0
        assert all(later <= earlier + 0.02 for earlier, later in zip(recalls, recalls[1:], strict=False))
        assert recalls[-1] < recalls[0]

    def test_no_context_tokens_gives_even_odds(self):
        assert TopicOracle(tiny_data_config()).intent_probability([[0, 1]]) == 0.5


class TestPrefixAugment:
    def test_one_example_per_prefix(self):
        ex = text_example(0, utterances=3)
        augmented = prefix_augment([ex])
        assert [a.id for a in augmented] == ["train-00000-p1", "train-00000-p2", "train-00000-p3"]
        assert [len(a.context) for a in augmented] == [1, 2, 3]
        assert all(a.context == ex.context[: len(a.context)] for a in augmented)

    def test_gold_response_is_kept(self):
        augmented = prefix_augment([text_example(4, utterances=2), image_example(1)])
        assert [a.response_id for a in augmented] == ["train-00004:text"] * 2 + ["train-img-00001"]

    def test_total_count(self):
        train = tiny_splits()["train"]
        assert len(prefix_augment(train)) == sum(len(ex.context) for ex in train)


class TestIntentLabelFlips:
    def test_zero_rate_flips_nothing(self):
        flips = intent_label_flips(tiny_splits()["train"], 0.0, seed=0)
        assert not any(flips.values())

    def test_rate_is_respected(self):
        examples = [text_example(i) for i in range(2000)]
        flips = intent_label_flips(examples, 0.3, seed=1)
        assert abs(sum(flips.values()) / 2000 - 0.3) < 0.05

    def test_prefixes_of_one_dialogue_agree(self):
        augmented = prefix_augment([text_example(i, utterances=3) for i in range(50)])
        flips = intent_label_flips(augmented, 0.5, seed=2)
        for i in range(50):
            assert len({flips[f"train-{i:05d}-p{n}"] for n in (1, 2, 3)}) == 1

    def test_independent_of_order(self):
        examples = [text_example(i) for i in range(40)]
        assert intent_label_flips(examples, 0.4, seed=3) == intent_label_flips(examples[::-1], 0.4, seed=3)

    @pytest.mark.parametrize("rate", [-0.1, 0.6])
    def test_rate_range(self, rate):
        with pytest.raises(ValueError):
            intent_label_flips([text_example(0)], rate, seed=0)

    def test_labels_apply_flips(self):
        examples = [text_example(0), image_example(0)]
        assert intent_labels(examples) == [0, 1]
        assert intent_labels(examples, {examples[1].id: True}) == [0, 0]


class TestBatching:
    def test_final_short_batch_is_kept(self):
        examples = [text_example(i) for i in range(130)]
        batches = make_batches(examples, Regime.SDR, Objective.TEXT, 64, seed=0)
        assert [len(b) for b in batches] == [64, 64, 2]
        assert sorted(ex.id for b in batches for ex in b) == sorted(ex.id for ex in examples)

    def test_objective_filters_modality(self):
        examples = [text_example(i) for i in range(5)] + [image_example(i) for i in range(3)]
        assert len(filter_for(examples, Objective.IMAGE)) == 3
        assert len(filter_for(examples, Objective.TEXT)) == 5
        assert len(filter_for(examples, Objective.INTENT)) == 8

    def test_joint_is_mdr_only(self):
        examples = [text_example(0), image_example(0)]
        with pytest.raises(StructuralError):
            make_batches(examples, Regime.SDR, Objective.JOINT, 2, seed=0)
        with pytest.raises(StructuralError):
            make_batches(examples, Regime.MDR, Objective.TEXT, 2, seed=0)

    def test_no_examples_for_objective(self):
        with pytest.raises(DataError):
            make_batches([text_example(0)], Regime.DR, Objective.IMAGE, 4, seed=0)

    def test_shuffle_is_seeded_per_epoch(self):
        examples = [text_example(i) for i in range(40)]

        def order(seed: int, epoch: int) -> list[str]:
            return [ex.id for b in make_batches(examples, Regime.DR, Objective.TEXT, 8, seed, epoch) for ex in b]

        assert order(0, 0) == order(0, 0)
        assert order(0, 0) != order(0, 1)
        assert order(0, 0) != order(1, 0)

    def test_joint_batches_are_stratified(self):
        examples = [text_example(i) for i in range(30)] + [image_example(i) for i in range(10)]
        batches = make_batches(examples, Regime.MDR, Objective.JOINT, 4, seed=0)
        assert [sum(ex.gold_modality == Modality.IMAGE for ex in b) for b in batches] == [1] * 10

    def test_joint_image_ratio_override(self):
        examples = [text_example(i) for i in range(20)] + [image_example(i) for i in range(20)]
        first = make_batches(examples, Regime.MDR, Objective.JOINT, 10, seed=0, image_ratio=0.2)[0]
        assert sum(ex.gold_modality == Modality.IMAGE for ex in first) == 2

    def test_stream_crosses_epochs(self):
        examples = [text_example(i) for i in range(10)]
        stream = batch_stream(examples, Regime.SDR, Objective.INTENT, 4, seed=0)
        epochs = [next(stream)[0] for _ in range(4)]
        assert epochs == [0, 0, 0, 1]

    def test_invalid_batch_size(self):
        with pytest.raises(ValueError):
            make_batches([text_example(0)], Regime.DR, Objective.TEXT, 0, seed=0)


class TestPools:
    def test_gold_appears_once_in_its_modality(self):
        dev = tiny_splits()["dev"]
        pool = tiny_pools("dev")
        for ex in dev:
            for modality in Modality:
                candidates = pool.for_example(ex.id, modality)
                assert len(candidates) == TINY_POOL
                assert len(set(candidates)) == TINY_POOL
                expected = 1 if modality == ex.gold_modality else 0
                assert candidates.count(ex.response_id) == expected

    def test_pools_are_deterministic(self):
        assert tiny_pools("dev", seed=3) == tiny_pools("dev", seed=3)
        assert tiny_pools("dev", seed=3) != tiny_pools("dev", seed=4)

    def test_gold_position_varies(self):
        dev = tiny_splits()["dev"]
        pool = tiny_pools("dev")
        positions = {pool.for_example(ex.id, ex.gold_modality).index(ex.response_id) for ex in dev}
        assert len(positions) > 1

    def test_shared_pool(self):
        dev = tiny_splits()["dev"]
        pool = tiny_pools("dev", shared=True)
        text_lists = [pool.for_example(ex.id, Modality.TEXT) for ex in dev if ex.gold_modality == Modality.IMAGE]
        assert all(lst == text_lists[0] for lst in text_lists)
        for ex in dev:
            assert ex.response_id in pool.for_example(ex.id, ex.gold_modality)

    def test_too_few_responses(self):
        with pytest.raises(DataError, match="pools need"):
            build_pools("dev", tiny_splits()["dev"], seed=0, pool_size=1000)

    def test_store_keeps_first_seen_order(self):
        dev = tiny_splits()["dev"]
        store = candidate_store("dev", dev)
        texts = [ex for ex in dev if ex.gold_modality == Modality.TEXT]
        assert store.ids(Modality.TEXT) == [ex.response_id for ex in texts]
        assert store.tokens(texts[0].response_id, Modality.TEXT) == texts[0].text_response


class TestStorage:
    def test_round_trip(self, tmp_path):
        dev = tiny_splits()["dev"]
        path = tmp_path / "dev.jsonl"
        assert save_jsonl(dev, path) == 60
        assert load_jsonl(path) == dev

    def test_grid_values_survive_exactly(self, tmp_path):
        ex = next(e for e in tiny_splits()["dev"] if e.gold_modality == Modality.IMAGE)
        save_jsonl([ex], tmp_path / "one.jsonl")
        loaded = load_jsonl(tmp_path / "one.jsonl")[0]
        assert np.array_equal(loaded.image_response.array(), ex.image_response.array())

    def test_bad_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        save_jsonl([text_example(0)], path)
        with open(path, "a", encoding="utf-8") as f:
            f.write('{"id": "x"}\n')
        with pytest.raises(DataError, match=":2:"):
            load_jsonl(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(DataError, match=":1:"):
            load_jsonl(path)

    def test_invalid_utf8_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        save_jsonl([text_example(0), text_example(1)], path)
        with open(path, "ab") as f:
            f.write(b'{"id": "\xff\xfe"}\n')
        with pytest.raises(DataError, match=":3: invalid UTF-8"):
            load_jsonl(path)

    def test_empty_file_has_no_examples(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_bytes(b"")
        assert load_jsonl(path) == []

    def test_missing_split(self, tmp_path):
        save_jsonl([text_example(0)], split_path(tmp_path, "train"))
        with pytest.raises(DataError, match="dev.jsonl"):
            load_splits(tmp_path)
