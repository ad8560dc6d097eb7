"""Domain types and the manifest / detections file formats.

Every other module consumes the values defined here. All of them are frozen
dataclasses validated on construction, so once a value exists its invariants
hold and it can be shared freely.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

SPLITS = ("train", "test")


class ValidationError(ValueError):
    """A value or file violates a domain invariant."""


class ParseError(ValueError):
    """A file is not valid JSON or does not follow the expected schema."""


def canonical_float(value: float) -> float:
    """Round to 9 significant digits, the precision used in every output file."""
    return float(f"{float(value):.9g}")


def _canonical(obj):
    if isinstance(obj, float):
        return canonical_float(obj)
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def dumps(obj) -> str:
    """Serialize ``obj`` deterministically (insertion key order, 9-digit floats)."""
    return json.dumps(_canonical(obj), indent=2, ensure_ascii=False) + "\n"


def write_json(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def read_json(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not UTF-8 ({exc})") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _require(mapping, key, where):
    if not isinstance(mapping, dict):
        raise ParseError(f"{where}: expected an object, got {type(mapping).__name__}")
    try:
        return mapping[key]
    except KeyError:
        raise ParseError(f"{where}: missing key {key!r}") from None


def _check_label(name, kind):
    if not isinstance(name, str) or not name:
        raise ValidationError(f"{kind} label must be a non-empty string, got {name!r}")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixels, top-left origin, ``[x, y, w, h]``."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise ValidationError(f"box {name} must be a finite number, got {v!r}")
            object.__setattr__(self, name, canonical_float(v))
        if self.x < 0 or self.y < 0:
            raise ValidationError(f"box origin must be non-negative, got ({self.x}, {self.y})")
        if self.w <= 0 or self.h <= 0:
            raise ValidationError(f"box extent must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_list(cls, values) -> "BoundingBox":
        if not isinstance(values, (list, tuple)) or len(values) != 4:
            raise ParseError(f"bbox must be a list of 4 numbers, got {values!r}")
        return cls(*values)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    @property
    def area(self) -> float:
        return self.w * self.h

    def iou(self, other: "BoundingBox") -> float:
        ix = max(0.0, min(self.x + self.w, other.x + other.w) - max(self.x, other.x))
        iy = max(0.0, min(self.y + self.h, other.y + other.h) - max(self.y, other.y))
        inter = ix * iy
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True)
class GroundTruthObject:
    label: str
    box: BoundingBox

    def __post_init__(self):
        _check_label(self.label, "object")


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    scene: str
    split: str
    objects: tuple[GroundTruthObject, ...] = ()
    source_path: str | None = None

    def __post_init__(self):
        if not isinstance(self.image_id, str) or not self.image_id:
            raise ValidationError(f"image_id must be a non-empty string, got {self.image_id!r}")
        _check_label(self.scene, "scene")
        if self.split not in SPLITS:
            raise ValidationError(f"image {self.image_id!r}: split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "objects", tuple(self.objects))


@dataclass(frozen=True)
class Candidate:
    label: str
    score: float

    def __post_init__(self):
        _check_label(self.label, "object")
        s = self.score
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not (0.0 <= s <= 1.0):
            raise ValidationError(f"candidate {self.label!r}: score must be in [0, 1], got {s!r}")
        # stored at file precision so load(save(x)) == x holds for every value
        object.__setattr__(self, "score", canonical_float(s))


def _candidate_order(c: Candidate):
    return (-c.score, c.label)


@dataclass(frozen=True)
class DetectionRecord:
    """One predicted box and its candidate labels.

    Candidates are kept sorted by descending score; equal scores are ordered by
    ascending label so the top candidate is always well defined.
    """

    image_id: str
    box: BoundingBox
    candidates: tuple[Candidate, ...]
    source: str | None = None

    def __post_init__(self):
        cands = tuple(self.candidates)
        if not cands:
            raise ValidationError(f"detection in image {self.image_id!r}: empty candidate list")
        seen = set()
        for c in cands:
            if c.label in seen:
                raise ValidationError(
                    f"detection in image {self.image_id!r}: duplicate candidate {c.label!r}"
                )
            seen.add(c.label)
        object.__setattr__(self, "candidates", tuple(sorted(cands, key=_candidate_order)))

    @property
    def label(self) -> str:
        return self.candidates[0].label

    @property
    def score(self) -> float:
        return self.candidates[0].score

    def scores(self) -> dict[str, float]:
        return {c.label: c.score for c in self.candidates}


@dataclass(frozen=True)
class Dataset:
    object_classes: tuple[str, ...]
    scene_classes: tuple[str, ...]
    images: tuple[ImageRecord, ...] = ()
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "object_classes", tuple(self.object_classes))
        object.__setattr__(self, "scene_classes", tuple(self.scene_classes))
        object.__setattr__(self, "images", tuple(self.images))
        for kind, labels in (("object", self.object_classes), ("scene", self.scene_classes)):
            seen = set()
            for name in labels:
                _check_label(name, kind)
                if name in seen:
                    raise ValidationError(f"duplicate {kind} class {name!r}")
                seen.add(name)
        objects, scenes = set(self.object_classes), set(self.scene_classes)
        index = {}
        for img in self.images:
            if img.image_id in index:
                raise ValidationError(f"duplicate image_id {img.image_id!r}")
            if img.scene not in scenes:
                raise ValidationError(f"image {img.image_id!r}: unknown scene {img.scene!r}")
            for obj in img.objects:
                if obj.label not in objects:
                    raise ValidationError(f"image {img.image_id!r}: unknown object {obj.label!r}")
            index[img.image_id] = img
        object.__setattr__(self, "_index", index)

    @property
    def n_images(self) -> int:
        return len(self.images)

    @property
    def n_detections(self) -> int:
        return sum(len(img.objects) for img in self.images)

    def __contains__(self, image_id) -> bool:
        return image_id in self._index

    def image(self, image_id: str) -> ImageRecord:
        try:
            return self._index[image_id]
        except KeyError:
            raise ValidationError(f"unknown image_id {image_id!r}") from None

    def select(self, split: str | None) -> "Dataset":
        """Restrict to one split; ``None`` or ``"all"`` keeps every image."""
        if split in (None, "all"):
            return self
        if split not in SPLITS:
            raise ValidationError(f"split must be one of {SPLITS + ('all',)}, got {split!r}")
        return self.with_images(img for img in self.images if img.split == split)

    def with_images(self, images: Iterable[ImageRecord]) -> "Dataset":
        return Dataset(self.object_classes, self.scene_classes, tuple(images))


# -- manifest -----------------------------------------------------------------


def dataset_from_dict(data) -> Dataset:
    objects = _require(data, "object_classes", "manifest")
    scenes = _require(data, "scene_classes", "manifest")
    raw_images = _require(data, "images", "manifest")
    if not isinstance(objects, list) or not isinstance(scenes, list) or not isinstance(raw_images, list):
        raise ParseError("manifest: object_classes, scene_classes and images must be arrays")
    images = []
    for i, raw in enumerate(raw_images):
        where = f"images[{i}]"
        raw_objects = _require(raw, "objects", where)
        if not isinstance(raw_objects, list):
            raise ParseError(f"{where}: objects must be an array")
        image_id = _require(raw, "image_id", where)
        try:
            objs = tuple(
                GroundTruthObject(_require(o, "label", f"{where}.objects[{j}]"),
                                  BoundingBox.from_list(_require(o, "bbox", f"{where}.objects[{j}]")))
                for j, o in enumerate(raw_objects)
            )
            images.append(ImageRecord(
                image_id=image_id,
                scene=_require(raw, "scene", where),
                split=_require(raw, "split", where),
                objects=objs,
                source_path=raw.get("source_path"),
            ))
        except ValidationError as exc:
            raise ValidationError(f"image {image_id!r}: {exc}") from None
    return Dataset(tuple(objects), tuple(scenes), tuple(images))


def dataset_to_dict(dataset: Dataset) -> dict:
    images = []
    for img in dataset.images:
        entry = {"image_id": img.image_id, "scene": img.scene, "split": img.split}
        if img.source_path is not None:
            entry["source_path"] = img.source_path
        entry["objects"] = [{"label": o.label, "bbox": o.box.as_list()} for o in img.objects]
        images.append(entry)
    return {
        "object_classes": list(dataset.object_classes),
        "scene_classes": list(dataset.scene_classes),
        "images": images,
    }


def load_manifest(path) -> Dataset:
    return dataset_from_dict(read_json(path))


def save_manifest(dataset: Dataset, path) -> None:
    write_json(dataset_to_dict(dataset), path)


# -- detections ---------------------------------------------------------------


def detection_to_dict(rec: DetectionRecord) -> dict:
    entry = {"image_id": rec.image_id, "bbox": rec.box.as_list()}
    if rec.source is not None:
        entry["source"] = rec.source
    entry["candidates"] = [{"label": c.label, "score": c.score} for c in rec.candidates]
    return entry


def detections_from_dict(data, dataset: Dataset | None = None) -> list[DetectionRecord]:
    """Parse a detections document.

    With a ``dataset`` the image ids and candidate labels are checked against
    its vocabulary; without one only the record-level invariants apply.
    """
    raw_list = _require(data, "detections", "detections file")
    if not isinstance(raw_list, list):
        raise ParseError("detections file: 'detections' must be an array")
    objects = set(dataset.object_classes) if dataset is not None else None
    records = []
    for i, raw in enumerate(raw_list):
        where = f"detections[{i}]"
        image_id = _require(raw, "image_id", where)
        if dataset is not None and image_id not in dataset:
            raise ValidationError(f"{where}: unknown image_id {image_id!r}")
        raw_cands = _require(raw, "candidates", where)
        if not isinstance(raw_cands, list):
            raise ParseError(f"{where}: candidates must be an array")
        cands = []
        for j, c in enumerate(raw_cands):
            label = _require(c, "label", f"{where}.candidates[{j}]")
            if objects is not None and label not in objects:
                raise ValidationError(f"{where}: unknown candidate label {label!r}")
            cands.append(Candidate(label, _require(c, "score", f"{where}.candidates[{j}]")))
        try:
            records.append(DetectionRecord(
                image_id=image_id,
                box=BoundingBox.from_list(_require(raw, "bbox", where)),
                candidates=tuple(cands),
                source=raw.get("source"),
            ))
        except ValidationError as exc:
            raise ValidationError(f"{where}: {exc}") from None
    return records


def detections_to_dict(records: Sequence[DetectionRecord]) -> dict:
    return {"detections": [detection_to_dict(r) for r in records]}


def load_detections(path, dataset: Dataset | None = None) -> list[DetectionRecord]:
    return detections_from_dict(read_json(path), dataset)


def save_detections(records: Sequence[DetectionRecord], path) -> None:
    write_json(detections_to_dict(records), path)
