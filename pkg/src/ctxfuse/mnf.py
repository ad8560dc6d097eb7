"""Scene-specific detection sources.

Training side: split the train images by ground-truth scene, drop scenes with
fewer than ``alpha`` images, and write one manifest per remaining scene for an
external trainer. Evaluation side: send each test image to the source that
belongs to its predicted scene.
"""

from __future__ import annotations

import logging
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int
from .core import (Dataset, DetectionRecord, ImageRecord, ParseError, ValidationError, _require,
                   load_detections, read_json, save_manifest, write_json)
from .scene import ScenePrediction, SceneProvider

log = logging.getLogger(__name__)

FALLBACK = "__fallback__"
DROPPED = "__dropped__"


def scene_filename(scene: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", scene).strip("_") or "scene"


@dataclass(frozen=True)
class PartitionSpec:
    alpha: int
    retained_scenes: tuple[str, ...]
    per_scene_manifest_paths: dict = field(default_factory=dict)
    excluded_scenes: dict = field(default_factory=dict)


def split_by_scene(dataset: Dataset, alpha: int = 5):
    """In-memory partition of the train split: ``(parts, excluded)``.

    ``parts`` maps each retained scene to the sub-dataset of its train images;
    ``excluded`` maps scenes below ``alpha`` to their train image count.
    """
    check_positive_int(alpha, "alpha")
    train = dataset.select("train")
    by_scene = defaultdict(list)
    for img in train.images:
        by_scene[img.scene].append(img)
    parts, excluded = {}, {}
    for scene in dataset.scene_classes:
        images = by_scene.get(scene, [])
        if len(images) >= alpha:
            parts[scene] = dataset.with_images(images)
        else:
            excluded[scene] = len(images)
    if not parts:
        raise ValidationError(f"no scene has at least alpha={alpha} training images")
    return parts, excluded


def partition_train(dataset: Dataset, alpha: int, out_dir) -> PartitionSpec:
    parts, excluded = split_by_scene(dataset, alpha)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out}: {exc}") from exc
    paths, used = {}, set()
    for scene, part in parts.items():
        name = scene_filename(scene)
        while name in used:
            name += "_"
        used.add(name)
        path = out / f"{name}.manifest.json"
        save_manifest(part, path)
        paths[scene] = str(path)
    report = {
        "alpha": alpha,
        "retained": [
            {"scene": s, "images": p.n_images, "detections": p.n_detections,
             "manifest": Path(paths[s]).name}
            for s, p in parts.items()
        ],
        "excluded": [{"scene": s, "images": n} for s, n in excluded.items()],
    }
    write_json(report, out / "partition_report.json")
    for scene, n in excluded.items():
        log.info("scene %r excluded: %d training images < alpha=%d", scene, n, alpha)
    return PartitionSpec(alpha, tuple(parts), paths, excluded)


# -- detection sources ----------------------------------------------------------


class FileSource:
    """Detections read from one detections file, grouped by image."""

    def __init__(self, path, dataset: Dataset | None = None):
        self.path = str(path)
        self._by_image = defaultdict(list)
        for rec in load_detections(path, dataset):
            self._by_image[rec.image_id].append(rec)

    def __call__(self, image: ImageRecord) -> list[DetectionRecord] | None:
        return self._by_image.get(image.image_id)

    def __repr__(self):
        return f"FileSource({self.path!r})"


class MockSource:
    """Scripted source: image_id -> list of DetectionRecord."""

    def __init__(self, table: Mapping[str, Sequence[DetectionRecord]]):
        self.table = {k: list(v) for k, v in table.items()}

    def __call__(self, image: ImageRecord):
        return self.table.get(image.image_id)


DetectionSource = Callable[[ImageRecord], "list[DetectionRecord] | None"]


@dataclass
class SceneNetRegistry:
    """Scene label -> detection source, plus an optional global fallback.

    A source is any callable taking an ImageRecord and returning its
    detections, or ``None`` when it has nothing for that image.
    """

    entries: dict = field(default_factory=dict)
    fallback: DetectionSource | None = None

    def __contains__(self, scene):
        return scene in self.entries


def load_registry(path, dataset: Dataset | None = None) -> SceneNetRegistry:
    """Read ``{"fallback": path?, "entries": {scene: path}}``.

    Relative paths resolve against the registry file's directory.
    """
    path = Path(path)
    data = read_json(path)
    entries = _require(data, "entries", "registry file")
    if not isinstance(entries, dict):
        raise ParseError("registry file: 'entries' must be an object")
    base = path.parent

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else base / p

    if dataset is not None:
        unknown = [s for s in entries if s not in dataset.scene_classes]
        if unknown:
            raise ValidationError(f"registry names unknown scenes {unknown}")
    sources = {scene: FileSource(resolve(p), dataset) for scene, p in entries.items()}
    fallback = data.get("fallback")
    return SceneNetRegistry(sources, FileSource(resolve(fallback), dataset) if fallback else None)


def route(image: ImageRecord, scene_pred: ScenePrediction | str, registry: SceneNetRegistry,
          allow_fallback: bool = True) -> list[DetectionRecord]:
    """Detections for ``image`` from the source of its predicted scene.

    Records are tagged with the scene name as ``source`` (or ``__fallback__``).
    A scene missing from the registry goes to the fallback source, or yields
    no detections when there is none; with ``allow_fallback=False`` it is an
    error instead.
    """
    records, _ = _route(image, scene_pred, registry, allow_fallback)
    return records


def _route(image, scene_pred, registry, allow_fallback):
    scene = scene_pred.scene if isinstance(scene_pred, ScenePrediction) else scene_pred
    if scene in registry.entries:
        source, tag = registry.entries[scene], scene
    elif not allow_fallback:
        raise ValidationError(f"scene {scene!r} has no registered source (image {image.image_id!r})")
    elif registry.fallback is not None:
        source, tag = registry.fallback, FALLBACK
    else:
        return [], DROPPED
    found = source(image)
    if found is None:
        log.warning("source for %r has no detections for image %r", tag, image.image_id)
        found = []
    return [replace(r, source=tag) for r in found], tag


def run_mnf(dataset: Dataset, provider: SceneProvider | Mapping, registry: SceneNetRegistry,
            allow_fallback: bool = True, split: str = "test"):
    """Route every image of ``split`` in dataset order.

    ``provider`` is a :class:`SceneProvider` or a mapping image_id -> scene
    prediction. Returns ``(records, routing_counts)``; each image contributes
    exactly one count, under its scene, ``__fallback__`` or ``__dropped__``.
    """
    records, counts = [], Counter()
    for image in dataset.select(split).images:
        if isinstance(provider, SceneProvider):
            pred = provider.identify_scene(image)
        else:
            try:
                pred = provider[image.image_id]
            except KeyError:
                raise ValidationError(f"no scene prediction for image {image.image_id!r}") from None
        found, tag = _route(image, pred, registry, allow_fallback)
        records.extend(found)
        counts[tag] += 1
    return records, dict(counts)


class MultiNetworkFusion(BaseEstimator):
    """Estimator wrapper around the scene partition and router.

    ``fit`` partitions the train split (scenes below ``alpha`` dropped);
    ``predict`` routes the images of ``split`` through ``registry``.
    """

    def __init__(self, registry=None, alpha=5, allow_fallback=True, split="test"):
        self.registry = registry
        self.alpha = alpha
        self.allow_fallback = allow_fallback
        self.split = split

    def fit(self, X, y=None):
        self.partitions_, self.excluded_scenes_ = split_by_scene(X, self.alpha)
        self.retained_scenes_ = list(self.partitions_)
        return self

    def predict(self, X, scenes):
        check_is_fitted(self, "partitions_")
        if self.registry is None:
            raise ValidationError("MultiNetworkFusion needs a registry to predict")
        missing = [s for s in self.retained_scenes_ if s not in self.registry]
        if missing:
            raise ValidationError(f"registry has no source for retained scenes {missing}")
        records, self.routing_counts_ = run_mnf(X, scenes, self.registry, self.allow_fallback,
                                                self.split)
        return records
