"""Task kinds, answer vocabularies, synthetic videos and annotation records."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

MULTIDIM_DIMS = 3  # spatial, temporal, alignment


class TaskKind(str, Enum):
    IMAGE_SCORE = "image_score"
    NATURAL_VIDEO_SCORE = "natural_video_score"
    VIDEO_MULTIDIM = "video_multidim"
    PAIR = "pair"
    VQA = "vqa"

    @property
    def single_video(self) -> bool:
        """Tasks that see exactly one multi-frame input (where shuffling makes sense)."""
        return self in (TaskKind.NATURAL_VIDEO_SCORE, TaskKind.VIDEO_MULTIDIM, TaskKind.VQA)

    @property
    def scored(self) -> bool:
        return self in (TaskKind.IMAGE_SCORE, TaskKind.NATURAL_VIDEO_SCORE, TaskKind.VIDEO_MULTIDIM)


class Choice(str, Enum):
    A = "A"
    B = "B"


class YesNo(str, Enum):
    YES = "yes"
    NO = "no"


TIE = "tie"


@dataclass(frozen=True)
class SyntheticVideo:
    """Frame-feature matrix plus prompt features.

    Videos carry at least two frames.  Still images are represented with a
    single frame via :meth:`image`; they never take part in frame shuffling.
    """

    frames: tuple[tuple[float, ...], ...]
    prompt: tuple[float, ...] = ()
    is_image: bool = False

    def __post_init__(self) -> None:
        n = len(self.frames)
        if self.is_image and n != 1:
            raise ValueError("an image has exactly one frame")
        if not self.is_image and n < 2:
            raise ValueError(f"a video needs at least 2 frames, got {n}")
        widths = {len(f) for f in self.frames}
        if len(widths) != 1:
            raise ValueError(f"frames differ in dimension: {sorted(widths)}")

    @classmethod
    def image(cls, features: Sequence[float], prompt: Sequence[float] = ()) -> SyntheticVideo:
        return cls((tuple(float(x) for x in features),), tuple(float(x) for x in prompt), True)

    @classmethod
    def from_lists(cls, frames, prompt=(), is_image: bool = False) -> SyntheticVideo:
        return cls(
            tuple(tuple(float(x) for x in f) for f in frames),
            tuple(float(x) for x in prompt),
            is_image,
        )

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def frame_dim(self) -> int:
        return len(self.frames[0])

    def permuted(self, order: Sequence[int]) -> SyntheticVideo:
        return SyntheticVideo(tuple(self.frames[i] for i in order), self.prompt, self.is_image)

    def to_json(self) -> dict:
        out = {"frames": [list(f) for f in self.frames], "prompt": list(self.prompt)}
        if self.is_image:
            out["is_image"] = True
        return out

    @classmethod
    def from_json(cls, obj: dict) -> SyntheticVideo:
        return cls.from_lists(obj["frames"], obj.get("prompt", ()), bool(obj.get("is_image", False)))


@dataclass(frozen=True)
class AnnotationRecord:
    """One supervision item.

    ``mos`` is stored on its raw declared ``scale``; :attr:`target` exposes the
    affinely normalized value in [0, 1] that rewards are computed on.
    """

    id: str
    kind: TaskKind
    video: SyntheticVideo
    video_b: Optional[SyntheticVideo] = None
    mos: Optional[float | tuple[float, ...]] = None
    label: Optional[str] = None
    question_id: Optional[int] = None
    scale: tuple[float, float] = (0.0, 1.0)
    annotator: Optional[int] = None
    meta: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self) -> None:
        lo, hi = self.scale
        if not hi > lo:
            raise ValueError(f"{self.id}: degenerate scale {self.scale}")
        k = self.kind
        if k.scored:
            if self.mos is None:
                raise ValueError(f"{self.id}: {k.value} record needs a mos")
            values = self.mos if isinstance(self.mos, tuple) else (self.mos,)
            if k is TaskKind.VIDEO_MULTIDIM and len(values) != MULTIDIM_DIMS:
                raise ValueError(f"{self.id}: multidim mos needs {MULTIDIM_DIMS} entries, got {len(values)}")
            if k is not TaskKind.VIDEO_MULTIDIM and isinstance(self.mos, tuple):
                raise ValueError(f"{self.id}: {k.value} mos must be a single number")
            for v in values:
                if not lo <= v <= hi:
                    raise ValueError(f"{self.id}: mos {v} outside declared scale [{lo}, {hi}]")
        if k is TaskKind.IMAGE_SCORE and not self.video.is_image:
            raise ValueError(f"{self.id}: image_score record needs a single-frame image")
        if k is not TaskKind.IMAGE_SCORE and self.video.is_image:
            raise ValueError(f"{self.id}: {k.value} record needs a video")
        if k is TaskKind.PAIR:
            if self.video_b is None:
                raise ValueError(f"{self.id}: pair record needs two videos")
            if self.label not in (Choice.A.value, Choice.B.value, TIE):
                raise ValueError(f"{self.id}: pair label must be A, B or tie, got {self.label!r}")
        elif self.video_b is not None:
            raise ValueError(f"{self.id}: only pair records carry a second video")
        if k is TaskKind.VQA:
            if self.label not in (YesNo.YES.value, YesNo.NO.value):
                raise ValueError(f"{self.id}: vqa label must be yes or no, got {self.label!r}")
            if self.question_id is None or self.question_id < 0:
                raise ValueError(f"{self.id}: vqa record needs a question_id")

    def normalize(self, raw: float) -> float:
        lo, hi = self.scale
        return (raw - lo) / (hi - lo)

    def denormalize(self, value: float) -> float:
        lo, hi = self.scale
        return lo + value * (hi - lo)

    @property
    def target(self):
        """Ground truth in reward space: [0,1] score(s), a Choice, a YesNo, or ``"tie"``."""
        k = self.kind
        if k is TaskKind.VIDEO_MULTIDIM:
            return tuple(self.normalize(v) for v in self.mos)
        if k.scored:
            return self.normalize(self.mos)
        if k is TaskKind.PAIR:
            return TIE if self.label == TIE else Choice(self.label)
        return YesNo(self.label)

    @property
    def videos(self) -> tuple[SyntheticVideo, ...]:
        return (self.video,) if self.video_b is None else (self.video, self.video_b)

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "kind": self.kind.value, "video": self.video.to_json()}
        if self.video_b is not None:
            out["video_b"] = self.video_b.to_json()
        if self.mos is not None:
            out["mos"] = list(self.mos) if isinstance(self.mos, tuple) else self.mos
            out["scale"] = list(self.scale)
        if self.label is not None:
            out["label"] = self.label
        if self.question_id is not None:
            out["question_id"] = self.question_id
        if self.annotator is not None:
            out["annotator"] = self.annotator
        return out

    @classmethod
    def from_json(cls, obj: dict) -> AnnotationRecord:
        mos = obj.get("mos")
        if isinstance(mos, list):
            mos = tuple(float(v) for v in mos)
        elif mos is not None:
            mos = float(mos)
        scale = tuple(float(v) for v in obj.get("scale", (0.0, 1.0)))
        if len(scale) != 2:
            raise ValueError("scale must be [low, high]")
        return cls(
            id=str(obj["id"]),
            kind=TaskKind(obj["kind"]),
            video=SyntheticVideo.from_json(obj["video"]),
            video_b=SyntheticVideo.from_json(obj["video_b"]) if "video_b" in obj else None,
            mos=mos,
            label=obj.get("label"),
            question_id=obj.get("question_id"),
            scale=scale,
            annotator=obj.get("annotator"),
        )
