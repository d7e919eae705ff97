"""JSONL dataset files: one DialogueExample per line."""

import json
from collections.abc import Iterable, Sequence
from pathlib import Path

from pydantic import ValidationError

from mmdr.data.generator import SPLITS
from mmdr.errors import DataError
from mmdr.models import DialogueExample


def save_jsonl(examples: Iterable[DialogueExample], path: Path) -> int:
    """Write examples to ``path``, returning the number of lines written."""
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(json.dumps(ex.model_dump(mode="json", exclude_none=True), separators=(",", ":")) + "\n")
            n += 1
    return n


def load_jsonl(path: Path) -> list[DialogueExample]:
    """Read a dataset file; a malformed line raises DataError naming its line number."""
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    examples = []
    with open(path, "rb") as f:
        for lineno, raw in enumerate(f, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid UTF-8") from e
            if not line.strip():
                continue
            try:
                examples.append(DialogueExample.model_validate(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON ({e.msg})") from e
            except ValidationError as e:
                raise DataError(f"{path}:{lineno}: {e.errors()[0]['loc']} {e.errors()[0]['msg']}") from e
    return examples


def split_path(data_dir: Path, split: str) -> Path:
    return data_dir / f"{split}.jsonl"


def load_splits(data_dir: Path, splits: Sequence[str] = SPLITS) -> dict[str, list[DialogueExample]]:
    missing = [str(split_path(data_dir, s)) for s in splits if not split_path(data_dir, s).exists()]
    if missing:
        raise DataError(f"missing dataset split(s): {', '.join(missing)}")
    return {split: load_jsonl(split_path(data_dir, split)) for split in splits}
