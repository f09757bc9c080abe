"""Synthetic benchmark generation and line-delimited dataset I/O.

The synthetic world draws a latent ``z = (content[3], motion)`` per item.  A
public decoder turns latents into frame-feature videos (content is constant
over frames; motion moves features along a fixed direction, so its sign is
only visible when frame order is respected).  A hidden oracle maps latents to
per-dimension quality; labels are derived from it through biased annotators.
Only acceptance and ``eval`` paths read the oracle file.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .numkit import Rng
from .records import TIE, AnnotationRecord, SyntheticVideo, TaskKind

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CONTENT_DIMS = 3
LATENT_DIM = CONTENT_DIMS + 1
QUESTIONS = ("is the motion pattern in this video reasonable", "is the content in this video clear")


class DatasetError(ValueError):
    """Raised when a dataset file fails validation."""

    def __init__(self, message: str, errors: Optional[list[tuple[int, str]]] = None) -> None:
        super().__init__(message)
        self.errors = errors or []


@dataclass
class WorldConfig:
    world_seed: int = 1234
    frame_dim: int = 8
    prompt_dim: int = 4
    n_frames: int = 4
    frame_noise: float = 0.1
    motion_amplitude: float = 1.0
    tie_margin: float = 0.05
    mos_scale: tuple[float, float] = (1.0, 5.0)
    # (scale, offset) per annotator in normalized units, plus uniform jitter half-width
    annotators: tuple[tuple[float, float], ...] = ((1.0, 0.0), (0.9, 0.06), (1.1, -0.06))
    jitter: float = 0.03

    def __post_init__(self) -> None:
        self.mos_scale = tuple(float(v) for v in self.mos_scale)
        self.annotators = tuple(tuple(float(v) for v in a) for a in self.annotators)
        if self.n_frames < 2:
            raise ValueError("videos need at least two frames")


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


class Decoder:
    """Public latent-to-video map shared by the dataset and the toy generator."""

    def __init__(self, cfg: WorldConfig) -> None:
        self.cfg = cfg
        rng = Rng(cfg.world_seed).spawn("decoder")
        mix = rng.normal((cfg.frame_dim, CONTENT_DIMS + 1))
        q, _ = np.linalg.qr(mix)
        # orthonormal columns keep content and motion separable
        self.content = q[:, :CONTENT_DIMS] * math.sqrt(cfg.frame_dim / CONTENT_DIMS)
        self.motion = q[:, CONTENT_DIMS] * math.sqrt(cfg.frame_dim)

    def frames(self, z: np.ndarray, rng: Optional[Rng] = None) -> np.ndarray:
        cfg = self.cfg
        z = np.asarray(z, dtype=float)
        base = self.content @ z[:CONTENT_DIMS]
        offsets = np.linspace(-1.0, 1.0, cfg.n_frames)
        out = base[None, :] + cfg.motion_amplitude * z[CONTENT_DIMS] * offsets[:, None] * self.motion[None, :] / 2.0
        if rng is not None and cfg.frame_noise > 0:
            out = out + rng.normal(out.shape, cfg.frame_noise)
        return out

    def video(self, z, prompt, rng: Optional[Rng] = None) -> SyntheticVideo:
        return SyntheticVideo.from_lists(self.frames(z, rng), prompt)

    def image(self, z, rng: Optional[Rng] = None) -> SyntheticVideo:
        z = np.array(z, dtype=float)
        z[CONTENT_DIMS] = 0.0
        feats = self.content @ z[:CONTENT_DIMS]
        if rng is not None and self.cfg.frame_noise > 0:
            feats = feats + rng.normal(feats.shape, self.cfg.frame_noise)
        return SyntheticVideo.image(feats)

    def to_json(self) -> dict:
        return {"world": _world_json(self.cfg), "content": self.content.tolist(), "motion": self.motion.tolist()}


class QualityOracle:
    """Hidden map from latent (and prompt) to spatial, temporal and alignment quality.

    Spatial quality is an even function of content, so a freshly initialized
    (odd) policy carries no information about it.
    """

    def __init__(self, cfg: WorldConfig) -> None:
        self.cfg = cfg
        rng = Rng(cfg.world_seed).spawn("oracle")
        basis, _ = np.linalg.qr(rng.normal((CONTENT_DIMS, CONTENT_DIMS)))
        self.w_primary = basis[:, 0]
        self.w_secondary = basis[:, 1]
        self.align = rng.normal((cfg.prompt_dim, CONTENT_DIMS)) / math.sqrt(cfg.prompt_dim * CONTENT_DIMS)

    def spatial(self, z) -> float:
        c = np.asarray(z, dtype=float)[:CONTENT_DIMS]
        s1 = float(self.w_primary @ c)
        return math.erf(abs(s1) / math.sqrt(2.0))

    def temporal(self, z) -> float:
        return _sigmoid(2.0 * float(z[CONTENT_DIMS]))

    def alignment(self, z, prompt) -> float:
        c = np.asarray(z, dtype=float)[:CONTENT_DIMS]
        return _sigmoid(1.0 * float(np.asarray(prompt) @ self.align @ c))

    def dims(self, z, prompt) -> tuple[float, float, float]:
        return (self.spatial(z), self.temporal(z), self.alignment(z, prompt))

    def overall(self, z, prompt) -> float:
        return float(np.mean(self.dims(z, prompt)))

    def natural(self, z) -> float:
        return 0.5 * (self.spatial(z) + self.temporal(z))

    def answer(self, question_id: int, z) -> str:
        if question_id == 0:
            return "yes" if z[CONTENT_DIMS] > 0 else "no"
        return "yes" if self.spatial(z) > 0.5 else "no"

    def pair_label(self, gap: float) -> str:
        if gap > self.cfg.tie_margin:
            return "A"
        if gap < -self.cfg.tie_margin:
            return "B"
        return TIE

    def to_json(self) -> dict:
        return {
            "w_primary": self.w_primary.tolist(),
            "w_secondary": self.w_secondary.tolist(),
            "align": self.align.tolist(),
        }


def annotate(quality: float, profile: tuple[float, float], jitter: float, rng: Rng) -> float:
    """Biased rater: scale*q + offset + U(-jitter, jitter), clipped to [0, 1]."""
    scale, offset = profile
    return min(1.0, max(0.0, scale * quality + offset + float(rng.uniform(-jitter, jitter))))


@dataclass
class SyntheticWorld:
    cfg: WorldConfig = field(default_factory=WorldConfig)

    def __post_init__(self) -> None:
        self.decoder = Decoder(self.cfg)
        self.oracle = QualityOracle(self.cfg)

    def sample_latent(self, rng: Rng) -> np.ndarray:
        return rng.normal(LATENT_DIM)

    def sample_prompt(self, rng: Rng) -> np.ndarray:
        return rng.normal(self.cfg.prompt_dim)

    def _raw(self, norm: float) -> float:
        lo, hi = self.cfg.mos_scale
        return lo + norm * (hi - lo)

    def make_item(self, kind: TaskKind, item_id: str, rng: Rng) -> tuple[AnnotationRecord, dict]:
        """One labelled record plus its hidden oracle entry."""
        cfg, oracle, dec = self.cfg, self.oracle, self.decoder
        z = self.sample_latent(rng)
        prompt = self.sample_prompt(rng)
        annotator = rng.integers(0, len(cfg.annotators))
        profile = cfg.annotators[annotator]
        entry: dict = {"id": item_id, "kind": kind.value, "latent": z.tolist(), "prompt": prompt.tolist()}
        if kind is TaskKind.IMAGE_SCORE:
            q = oracle.spatial(z)
            entry["quality"] = q
            rec = AnnotationRecord(item_id, kind, dec.image(z, rng), mos=self._raw(annotate(q, profile, cfg.jitter, rng)),
                                   scale=cfg.mos_scale, annotator=annotator)
        elif kind is TaskKind.NATURAL_VIDEO_SCORE:
            q = oracle.natural(z)
            entry["quality"] = q
            rec = AnnotationRecord(item_id, kind, dec.video(z, np.zeros(cfg.prompt_dim), rng),
                                   mos=self._raw(annotate(q, profile, cfg.jitter, rng)),
                                   scale=cfg.mos_scale, annotator=annotator)
        elif kind is TaskKind.VIDEO_MULTIDIM:
            qs = oracle.dims(z, prompt)
            entry["quality"] = list(qs)
            mos = tuple(self._raw(annotate(q, profile, cfg.jitter, rng)) for q in qs)
            rec = AnnotationRecord(item_id, kind, dec.video(z, prompt, rng), mos=mos,
                                   scale=cfg.mos_scale, annotator=annotator)
        elif kind is TaskKind.VQA:
            qid = rng.integers(0, len(QUESTIONS))
            entry["question_id"] = qid
            entry["quality"] = list(oracle.dims(z, prompt))
            rec = AnnotationRecord(item_id, kind, dec.video(z, prompt, rng), label=oracle.answer(qid, z),
                                   question_id=qid)
        elif kind is TaskKind.PAIR:
            z_b = self.sample_latent(rng)
            qa, qb = oracle.overall(z, prompt), oracle.overall(z_b, prompt)
            entry.update(latent_b=z_b.tolist(), quality=qa, quality_b=qb, gap=qa - qb)
            rec = AnnotationRecord(item_id, kind, dec.video(z, prompt, rng), video_b=dec.video(z_b, prompt, rng),
                                   label=oracle.pair_label(qa - qb))
        else:
            raise ValueError(f"unknown kind {kind!r}")
        entry["label"] = rec.label if rec.label is not None else None
        return rec, entry

    def make_dataset(self, kind: TaskKind, n: int, rng: Rng, prefix: str) -> tuple[list[AnnotationRecord], list[dict]]:
        records, entries = [], []
        for i in range(n):
            rec, entry = self.make_item(kind, f"{prefix}-{i:05d}", rng.spawn(prefix, i))
            records.append(rec)
            entries.append(entry)
        return records, entries


DEFAULT_TRAIN_COUNTS = {
    TaskKind.IMAGE_SCORE.value: 700,
    TaskKind.VIDEO_MULTIDIM.value: 300,
    TaskKind.PAIR.value: 200,
    TaskKind.VQA.value: 100,
    TaskKind.NATURAL_VIDEO_SCORE.value: 300,
}
DEFAULT_HELDOUT_COUNTS = {
    TaskKind.IMAGE_SCORE.value: 200,
    TaskKind.VIDEO_MULTIDIM.value: 100,
    TaskKind.PAIR.value: 200,
    TaskKind.VQA.value: 100,
    TaskKind.NATURAL_VIDEO_SCORE.value: 100,
}


@dataclass
class SyntheticData:
    """In-memory bundle of generated splits plus the oracle entries."""

    train: dict[TaskKind, list[AnnotationRecord]]
    heldout: dict[TaskKind, list[AnnotationRecord]]
    oracle: dict[str, dict]


def generate(world: SyntheticWorld, train_counts: dict, heldout_counts: dict, rng: Rng) -> SyntheticData:
    train, heldout, oracle = {}, {}, {}
    for split, counts, store in (("train", train_counts, train), ("heldout", heldout_counts, heldout)):
        for kind_name, n in counts.items():
            if n < 0:
                raise ValueError(f"negative count for {kind_name}")
            kind = TaskKind(kind_name)
            records, entries = world.make_dataset(kind, n, rng.spawn(split, kind.value), f"{kind.value}-{split}")
            store[kind] = records
            for e in entries:
                oracle[e["id"]] = e
    return SyntheticData(train, heldout, oracle)


def _world_json(cfg: WorldConfig) -> dict:
    d = asdict(cfg)
    d["mos_scale"] = list(cfg.mos_scale)
    d["annotators"] = [list(a) for a in cfg.annotators]
    return d


def _header(role: str, kind: Optional[str] = None) -> dict:
    return {"_header": {"format": FORMAT_VERSION, "role": role, "kind": kind}}


def save_dataset(path: Path, records: Iterable[AnnotationRecord], role: str = "train",
                 kind: Optional[TaskKind] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header(role, kind.value if kind else None)) + "\n")
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


def read_records(path: Path, kind: Optional[TaskKind] = None) -> tuple[list[AnnotationRecord], list[tuple[int, str]], int]:
    """Parse a records file.  Returns (records, per-line errors, data line count)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    records: list[AnnotationRecord] = []
    errors: list[tuple[int, str]] = []
    n_lines = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                n_lines += 1
                errors.append((line_no, f"invalid JSON: {exc.msg}"))
                continue
            if isinstance(obj, dict) and "_header" in obj:
                role = obj["_header"].get("role")
                if role == "oracle":
                    raise DatasetError(f"{path} is a hidden-oracle file and cannot be used as a dataset")
                continue
            n_lines += 1
            try:
                rec = AnnotationRecord.from_json(obj)
            except (KeyError, TypeError, ValueError) as exc:
                errors.append((line_no, f"schema violation: {exc}"))
                continue
            if kind is not None and rec.kind is not kind:
                errors.append((line_no, f"expected kind {kind.value}, got {rec.kind.value}"))
                continue
            records.append(rec)
    return records, errors, n_lines


def load_dataset(path: Path, kind: Optional[TaskKind] = None, max_error_rate: float = 0.1) -> list[AnnotationRecord]:
    """Validated records; aborts when more than ``max_error_rate`` of lines are malformed."""
    records, errors, n_lines = read_records(path, kind)
    if errors:
        for line_no, msg in errors[:20]:
            log.warning("%s:%d: %s", path, line_no, msg)
        if len(errors) > max_error_rate * n_lines:
            raise DatasetError(f"{path}: {len(errors)} of {n_lines} lines malformed", errors)
    return records


def write_oracle(path: Path, world: SyntheticWorld, entries: dict[str, dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(_header("oracle")) + "\n")
        fh.write(json.dumps({"world": _world_json(world.cfg), "hidden": world.oracle.to_json()}) + "\n")
        for entry in entries.values():
            fh.write(json.dumps(entry) + "\n")


def read_oracle(path: Path) -> tuple[WorldConfig, dict[str, dict]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or lines[0].get("_header", {}).get("role") != "oracle":
        raise DatasetError(f"{path} is not an oracle file")
    world = WorldConfig(**lines[1]["world"])
    return world, {e["id"]: e for e in lines[2:]}


def write_decoder(path: Path, world: SyntheticWorld) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"_header": _header("public")["_header"], **world.decoder.to_json()}, fh)


def read_world_config(path: Path) -> WorldConfig:
    """World configuration from a public decoder file (no hidden quantities)."""
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return WorldConfig(**obj["world"])


def write_synthetic(out_dir: Path, world: SyntheticWorld, data: SyntheticData) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for split, store in (("train", data.train), ("heldout", data.heldout)):
        for kind, records in store.items():
            if not records:
                continue
            p = out_dir / f"{kind.value}_{split}.jsonl"
            save_dataset(p, records, role=split, kind=kind)
            written.append(p)
    p = out_dir / "oracle.jsonl"
    write_oracle(p, world, data.oracle)
    written.append(p)
    p = out_dir / "decoder.json"
    write_decoder(p, world)
    written.append(p)
    return written
