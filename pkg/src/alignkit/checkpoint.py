"""Binary checkpoints for parameter vectors.

Layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"ALGNCKPT"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header:
                    kind            "policy" | "generator"
                    config          model configuration object
                    config_sha256   hex digest of the canonical config JSON
                    segments        [{"name", "offset", "shape"}, ...] in value order
                    payload_sha256  hex digest of the value block
                    meta            free-form provenance (stage, step, seed, ...)
    16+H    8*N   N float64 values, little-endian, in segment order

Loading re-derives the config hash and the segment table from the stored
config and refuses files where either disagrees.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .diffusion import GeneratorConfig, ToyGenerator, generator_layout
from .numkit import ParamVector
from .policy import PolicyConfig, ToyPolicy, layout as policy_layout

MAGIC = b"ALGNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed or inconsistent with its configuration."""


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def checkpoint_name(stage: str, step: int) -> str:
    return f"{stage}-{step}.ckpt"


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: ParamVector
    meta: dict = field(default_factory=dict)


def _segments(pv: ParamVector) -> list[dict]:
    return [{"name": s.name, "offset": s.offset, "shape": list(s.shape)} for s in pv.layout]


def save_checkpoint(path: Path, kind: str, config: dict, params: ParamVector, meta: Optional[dict] = None) -> Path:
    payload = np.asarray(params.array(), dtype="<f8").tobytes()
    header = {
        "kind": kind,
        "config": config,
        "config_sha256": config_hash(config),
        "segments": _segments(params),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        fh.write(payload)
    return path


def _layout_for(kind: str, config: dict) -> list[tuple[str, tuple[int, ...]]]:
    if kind == "policy":
        return policy_layout(PolicyConfig(**config))
    if kind == "generator":
        return generator_layout(GeneratorConfig(**config))
    raise CheckpointError(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path: Path, expect_kind: Optional[str] = None) -> Checkpoint:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    kind, config = header["kind"], header["config"]
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    if config_hash(config) != header["config_sha256"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    payload = data[16 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: parameter payload is corrupted")
    try:
        expected = ParamVector.zeros(_layout_for(kind, config))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid stored config: {exc}") from exc
    if _segments(expected) != header["segments"]:
        raise CheckpointError(f"{path}: segment table does not match the configuration")
    values = np.frombuffer(payload, dtype="<f8")
    if values.size != len(expected):
        raise CheckpointError(f"{path}: expected {len(expected)} values, found {values.size}")
    return Checkpoint(kind, config, expected.with_values([float(v) for v in values]), header.get("meta", {}))


def save_policy(path: Path, policy: ToyPolicy, meta: Optional[dict] = None) -> Path:
    return save_checkpoint(path, "policy", policy.config.to_dict(), policy.params, meta)


def load_policy(path: Path) -> ToyPolicy:
    ck = load_checkpoint(path, "policy")
    return ToyPolicy(PolicyConfig(**ck.config), ck.params)


def save_generator(path: Path, gen: ToyGenerator, meta: Optional[dict] = None) -> Path:
    return save_checkpoint(path, "generator", gen.config.to_dict(), gen.params, meta)


def load_generator(path: Path) -> ToyGenerator:
    ck = load_checkpoint(path, "generator")
    return ToyGenerator(GeneratorConfig(**ck.config), ck.params)
