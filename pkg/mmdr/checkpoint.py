"""Checkpoint container: JSON manifest plus a raw little-endian float64 payload.

Layout::

    b"MMDRCKPT" | u64 LE manifest length | manifest (UTF-8 JSON) | payload

The manifest lists every stored array with its shape and byte offset in the
payload and records the payload's sha256. Files are written to a temporary
name and moved into place, so a reader never sees a half-written checkpoint.

DR runs store one checkpoint per subtask plus a ``composition.json`` that
names them.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from mmdr.config import ModelConfig
from mmdr.errors import ChecksumError, DataError
from mmdr.models import EvalReport, Regime
from mmdr.optim import AdamState
from mmdr.regimes import ModelBundle, build_model

MAGIC = b"MMDRCKPT"
FORMAT_VERSION = 1
COMPOSITION_FORMAT = "mmdr-composition"
_DTYPE = np.dtype("<f8")


class ArrayEntry(BaseModel):
    name: str
    shape: list[int]
    offset: int = Field(description="Byte offset into the payload")
    length: int = Field(description="Number of float64 values")


class OptimizerEntry(BaseModel):
    step: int
    beta1: float
    beta2: float
    eps: float


class CheckpointManifest(BaseModel):
    format_version: int = FORMAT_VERSION
    regime: Regime
    run: str | None = Field(default=None, description="Training run that produced it (DR subtask name)")
    components: list[str]
    model: ModelConfig
    vocab_size: int
    image_dims: tuple[int, int, int]
    seed: int
    step: int
    dev_report: EvalReport | None = None
    parameters: list[ArrayEntry]
    optimizer: OptimizerEntry | None = None
    optimizer_arrays: list[ArrayEntry] = Field(default_factory=list)
    payload_sha256: str


class CompositionManifest(BaseModel):
    format: str = COMPOSITION_FORMAT
    regime: Regime = Regime.DR
    parts: dict[str, str] = Field(description="subtask name -> checkpoint file name, relative to this file")


@dataclass
class LoadedModel:
    bundle: ModelBundle
    manifests: dict[str, CheckpointManifest] = field(default_factory=dict)

    @property
    def dev_reports(self) -> dict[str, EvalReport]:
        return {name: m.dev_report for name, m in self.manifests.items() if m.dev_report is not None}


def _pack(arrays: list[tuple[str, np.ndarray]], offset: int = 0) -> tuple[list[ArrayEntry], list[bytes]]:
    entries, chunks = [], []
    for name, arr in arrays:
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append(ArrayEntry(name=name, shape=list(arr.shape), offset=offset, length=int(arr.size)))
        chunks.append(raw)
        offset += len(raw)
    return entries, chunks


def save_checkpoint(
    path: Path,
    bundle: ModelBundle,
    components: list[str] | None = None,
    optimizer: AdamState | None = None,
    step: int = 0,
    dev_report: EvalReport | None = None,
    run: str | None = None,
) -> Path:
    """Write ``components`` of ``bundle`` (all by default) and optionally their Adam moments."""
    names = list(bundle.components()) if components is None else components
    params = bundle.named_parameters(names)
    entries, chunks = _pack([(name, p.data) for name, p in params.items()])

    optimizer_entry = None
    optimizer_arrays: list[ArrayEntry] = []
    if optimizer is not None:
        optimizer_entry = OptimizerEntry(
            step=optimizer.step, beta1=optimizer.beta1, beta2=optimizer.beta2, eps=optimizer.eps
        )
        moments = [(f"m.{n}", optimizer.m[n]) for n in params if n in optimizer.m]
        moments += [(f"v.{n}", optimizer.v[n]) for n in params if n in optimizer.v]
        optimizer_arrays, moment_chunks = _pack(moments, offset=sum(len(c) for c in chunks))
        chunks += moment_chunks

    payload = b"".join(chunks)
    manifest = CheckpointManifest(
        regime=bundle.regime,
        run=run,
        components=names,
        model=bundle.model_config,
        vocab_size=bundle.vocab_size,
        image_dims=bundle.image_dims,
        seed=bundle.seed,
        step=step,
        dev_report=dev_report,
        parameters=entries,
        optimizer=optimizer_entry,
        optimizer_arrays=optimizer_arrays,
        payload_sha256=hashlib.sha256(payload).hexdigest(),
    )
    header = manifest.model_dump_json().encode("utf-8")

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: Path) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns the manifest and every stored array by name."""
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path} is not an mmdr checkpoint")
    (length,) = struct.unpack("<Q", blob[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        manifest = CheckpointManifest.model_validate_json(blob[start : start + length])
    except ValidationError as e:
        raise DataError(f"{path}: unreadable checkpoint manifest: {e}") from e
    if manifest.format_version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint format {manifest.format_version}")

    payload = blob[start + length :]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != manifest.payload_sha256:
        raise ChecksumError(f"{path}: payload checksum {digest[:12]} does not match manifest")

    arrays = {}
    for entry in [*manifest.parameters, *manifest.optimizer_arrays]:
        end = entry.offset + entry.length * _DTYPE.itemsize
        if end > len(payload):
            raise DataError(f"{path}: array {entry.name} runs past the payload")
        arrays[entry.name] = np.frombuffer(payload[entry.offset : end], dtype=_DTYPE).reshape(entry.shape).copy()
    return manifest, arrays


def optimizer_state(manifest: CheckpointManifest, arrays: dict[str, np.ndarray]) -> AdamState | None:
    if manifest.optimizer is None:
        return None
    opt = manifest.optimizer
    return AdamState(
        step=opt.step,
        m={name[2:]: arr for name, arr in arrays.items() if name.startswith("m.")},
        v={name[2:]: arr for name, arr in arrays.items() if name.startswith("v.")},
        beta1=opt.beta1,
        beta2=opt.beta2,
        eps=opt.eps,
    )


def _apply(bundle: ModelBundle, manifest: CheckpointManifest, arrays: dict[str, np.ndarray], path: Path) -> None:
    params = bundle.named_parameters(manifest.components)
    for entry in manifest.parameters:
        if entry.name not in params:
            raise DataError(f"{path}: parameter {entry.name} does not exist in a {bundle.regime.value} bundle")
        target = params[entry.name]
        if target.shape != tuple(entry.shape):
            raise DataError(f"{path}: {entry.name} has shape {tuple(entry.shape)}, model expects {target.shape}")
        target.data[...] = arrays[entry.name]


def _bundle_for(manifest: CheckpointManifest) -> ModelBundle:
    return build_model(
        manifest.regime, manifest.model, manifest.seed, manifest.vocab_size, manifest.image_dims
    )


def save_composition(path: Path, parts: dict[str, str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(CompositionManifest(parts=parts).model_dump_json(indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def load_model(path: Path) -> LoadedModel:
    """Rebuild a bundle from a checkpoint file or from a DR composition manifest."""
    if path.suffix == ".json":
        try:
            composition = CompositionManifest.model_validate_json(path.read_text(encoding="utf-8"))
        except (OSError, ValidationError) as e:
            raise DataError(f"{path}: unreadable composition manifest: {e}") from e
        loaded: dict[str, tuple[CheckpointManifest, dict[str, np.ndarray], Path]] = {}
        for name, rel in composition.parts.items():
            part = path.parent / rel
            manifest, arrays = read_checkpoint(part)
            loaded[name] = (manifest, arrays, part)
        if not loaded:
            raise DataError(f"{path}: composition names no checkpoints")
        first = next(iter(loaded.values()))[0]
        bundle = _bundle_for(first)
        for manifest, arrays, part in loaded.values():
            _apply(bundle, manifest, arrays, part)
        return LoadedModel(bundle=bundle, manifests={name: m for name, (m, _, _) in loaded.items()})

    manifest, arrays = read_checkpoint(path)
    bundle = _bundle_for(manifest)
    _apply(bundle, manifest, arrays, path)
    return LoadedModel(bundle=bundle, manifests={manifest.run or manifest.regime.value: manifest})


def manifest_json(manifest: CheckpointManifest) -> dict:
    return json.loads(manifest.model_dump_json())
