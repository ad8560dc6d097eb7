"""Object/scene co-occurrence statistics.

Every ground-truth object in an image counts as one detection and inherits
the image's scene label. From those counts we get

* ``P(o)``   = detections labelled ``o`` / all detections,
* ``P(s)``   = images labelled ``s`` / all images,
* ``P(o|s)`` = detections labelled ``o`` in scene ``s`` / detections in ``s``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_positive_int
from .core import Dataset, ParseError, ValidationError, _require, read_json, write_json


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass(frozen=True, eq=False)
class CooccurrenceTable:
    """``P(o|s)`` with the marginals and counts it was estimated from.

    ``cond`` is indexed ``[object, scene]``. Scenes without detections have an
    all-zero column. Tables built by :func:`filter_scenes` keep the original
    ``m``, ``n`` and ``object_prior``; only scene columns are dropped.
    """

    objects: tuple[str, ...]
    scenes: tuple[str, ...]
    cond: np.ndarray
    object_prior: np.ndarray
    scene_prior: np.ndarray
    detection_count: int
    image_count: int
    per_scene_detection_count: np.ndarray
    scene_image_count: np.ndarray

    def __post_init__(self):
        for name in ("cond", "object_prior", "scene_prior"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("per_scene_detection_count", "scene_image_count"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "scenes", tuple(self.scenes))
        n_obj, n_sc = len(self.objects), len(self.scenes)
        if self.cond.shape != (n_obj, n_sc):
            raise ValidationError(f"cond has shape {self.cond.shape}, expected {(n_obj, n_sc)}")
        if self.object_prior.shape != (n_obj,) or self.scene_prior.shape != (n_sc,):
            raise ValidationError("prior vectors do not match the label lists")
        if self.per_scene_detection_count.shape != (n_sc,) or self.scene_image_count.shape != (n_sc,):
            raise ValidationError("per-scene count vectors do not match the scene list")
        for name in ("cond", "object_prior", "scene_prior"):
            arr = getattr(self, name)
            if arr.size and (np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr))):
                raise ValidationError(f"{name} entries must lie in [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, CooccurrenceTable):
            return NotImplemented
        return (
            self.objects == other.objects
            and self.scenes == other.scenes
            and self.detection_count == other.detection_count
            and self.image_count == other.image_count
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("cond", "object_prior", "scene_prior",
                          "per_scene_detection_count", "scene_image_count")
            )
        )

    __hash__ = None

    @property
    def m(self) -> int:
        return self.detection_count

    @property
    def n(self) -> int:
        return self.image_count

    @property
    def joint_counts(self) -> np.ndarray:
        """Integer detections per (object, scene), recovered from ``cond``."""
        return np.rint(self.cond * self.per_scene_detection_count).astype(np.int64)

    def object_index(self, label: str) -> int:
        try:
            return self.objects.index(label)
        except ValueError:
            raise ValidationError(f"object {label!r} not in co-occurrence table") from None

    def scene_index(self, scene: str) -> int:
        try:
            return self.scenes.index(scene)
        except ValueError:
            raise ValidationError(f"scene {scene!r} not in co-occurrence table") from None

    def p(self, obj: str, scene: str) -> float:
        return float(self.cond[self.object_index(obj), self.scene_index(scene)])

    def column(self, scene: str, smoothing: float = 0.0) -> dict[str, float]:
        """``P(o|scene)`` for every object, optionally Laplace smoothed.

        Smoothing uses ``(count + smoothing) / (total + smoothing * |objects|)``
        and therefore needs a count-backed table.
        """
        j = self.scene_index(scene)
        if smoothing < 0:
            raise ValidationError(f"smoothing must be >= 0, got {smoothing}")
        if smoothing == 0:
            col = self.cond[:, j]
        else:
            total = int(self.per_scene_detection_count[j])
            if total == 0 and self.cond[:, j].any():
                raise ValidationError(
                    f"scene {scene!r} has probabilities but no counts; smoothing needs counts"
                )
            counts = self.joint_counts[:, j]
            col = (counts + smoothing) / (total + smoothing * len(self.objects))
        return dict(zip(self.objects, col.tolist()))

    @classmethod
    def from_conditional(cls, objects, scenes, cond, scene_prior=None) -> "CooccurrenceTable":
        """Wrap a known ``P(o|s)`` matrix that has no counts behind it."""
        cond = np.asarray(cond, dtype=np.float64)
        n_sc = len(scenes)
        if scene_prior is None:
            scene_prior = np.zeros(n_sc)
        return cls(
            objects=tuple(objects),
            scenes=tuple(scenes),
            cond=cond,
            object_prior=np.zeros(len(objects)),
            scene_prior=scene_prior,
            detection_count=0,
            image_count=0,
            per_scene_detection_count=np.zeros(n_sc, dtype=np.int64),
            scene_image_count=np.zeros(n_sc, dtype=np.int64),
        )


def _count(dataset: Dataset):
    obj_idx = {o: i for i, o in enumerate(dataset.object_classes)}
    sc_idx = {s: j for j, s in enumerate(dataset.scene_classes)}
    joint = np.zeros((len(obj_idx), len(sc_idx)), dtype=np.int64)
    images = np.zeros(len(sc_idx), dtype=np.int64)
    for img in dataset.images:
        j = sc_idx[img.scene]
        images[j] += 1
        for obj in img.objects:
            joint[obj_idx[obj.label], j] += 1
    return joint, images


def _table_from_counts(objects, scenes, joint, scene_images) -> CooccurrenceTable:
    per_scene = joint.sum(axis=0)
    m = int(joint.sum())
    n = int(scene_images.sum())
    return CooccurrenceTable(
        objects=tuple(objects),
        scenes=tuple(scenes),
        cond=_ratio(joint, per_scene[np.newaxis, :]),
        object_prior=_ratio(joint.sum(axis=1), m),
        scene_prior=_ratio(scene_images, n),
        detection_count=m,
        image_count=n,
        per_scene_detection_count=per_scene,
        scene_image_count=scene_images,
    )


def compute_table(dataset: Dataset, split: str | None = "train") -> CooccurrenceTable:
    """Estimate the co-occurrence table from the ground truth of ``split``.

    ``split`` is ``"train"``, ``"test"`` or ``"all"``/``None``. An empty
    selection yields a table whose counts and probabilities are all zero.
    """
    subset = dataset.select(split)
    joint, scene_images = _count(subset)
    return _table_from_counts(dataset.object_classes, dataset.scene_classes, joint, scene_images)


def filter_scenes(table: CooccurrenceTable, dataset: Dataset, alpha: int = 5,
                  split: str | None = "train"):
    """Drop scenes with fewer than ``alpha`` images in ``split``.

    Returns ``(filtered_table, retained_scenes)``. The remaining columns and
    the marginals are left as they were; nothing is renormalized.
    """
    check_positive_int(alpha, "alpha")
    _, scene_images = _count(dataset.select(split))
    image_counts = dict(zip(dataset.scene_classes, scene_images.tolist()))
    keep = [j for j, s in enumerate(table.scenes) if image_counts.get(s, 0) >= alpha]
    if not keep:
        raise ValidationError(f"no scene has at least alpha={alpha} images")
    retained = [table.scenes[j] for j in keep]
    filtered = CooccurrenceTable(
        objects=table.objects,
        scenes=tuple(retained),
        cond=table.cond[:, keep],
        object_prior=table.object_prior,
        scene_prior=table.scene_prior[keep],
        detection_count=table.detection_count,
        image_count=table.image_count,
        per_scene_detection_count=table.per_scene_detection_count[keep],
        scene_image_count=table.scene_image_count[keep],
    )
    return filtered, retained


@dataclass(frozen=True, eq=False)
class SceneClusterKey:
    """Per-object argmax of ``P(s|o)``; orders confusion-matrix axes by scene."""

    objects: tuple[str, ...]
    scenes: tuple[str, ...]
    likelihoods: np.ndarray
    assignment: dict

    @property
    def unassigned(self) -> list[str]:
        return [o for o in self.objects if o not in self.assignment]

    def order(self) -> list[str]:
        """Objects grouped by assigned scene (scene order), then original order."""
        ordered = [o for s in self.scenes for o in self.objects if self.assignment.get(o) == s]
        return ordered + self.unassigned

    def groups(self) -> list[tuple[str | None, list[str]]]:
        out = [(s, [o for o in self.objects if self.assignment.get(o) == s]) for s in self.scenes]
        out = [(s, members) for s, members in out if members]
        if self.unassigned:
            out.append((None, self.unassigned))
        return out


def compute_cluster_key(dataset: Dataset, split: str | None = "train") -> SceneClusterKey:
    joint, _ = _count(dataset.select(split))
    totals = joint.sum(axis=1)
    lik = _ratio(joint, totals[:, np.newaxis])
    assignment = {}
    for i, obj in enumerate(dataset.object_classes):
        if totals[i] > 0:
            # np.argmax returns the first maximum, i.e. scene order breaks ties
            assignment[obj] = dataset.scene_classes[int(np.argmax(joint[i]))]
    lik.setflags(write=False)
    return SceneClusterKey(dataset.object_classes, dataset.scene_classes, lik, assignment)


# -- persistence --------------------------------------------------------------


def table_to_dict(table: CooccurrenceTable) -> dict:
    return {
        "objects": list(table.objects),
        "scenes": list(table.scenes),
        "counts": {
            "n": table.image_count,
            "m": table.detection_count,
            "per_scene": table.per_scene_detection_count.tolist(),
        },
        "cond": table.cond.tolist(),
        "object_prior": table.object_prior.tolist(),
        "scene_prior": table.scene_prior.tolist(),
    }


def _recover(p, total):
    # probabilities are written with 9 significant digits; for count-backed
    # entries the exact ratio is recovered from the integer numerator
    p = np.asarray(p, dtype=np.float64)
    total = np.asarray(total, dtype=np.float64)
    exact = _ratio(np.rint(p * total), total)
    return np.where(total > 0, exact, p)


def table_from_dict(data) -> CooccurrenceTable:
    objects = _require(data, "objects", "co-occurrence file")
    scenes = _require(data, "scenes", "co-occurrence file")
    counts = _require(data, "counts", "co-occurrence file")
    n = _require(counts, "n", "counts")
    m = _require(counts, "m", "counts")
    per_scene = np.asarray(_require(counts, "per_scene", "counts"), dtype=np.int64)
    try:
        cond = np.asarray(_require(data, "cond", "co-occurrence file"), dtype=np.float64)
        obj_prior = np.asarray(_require(data, "object_prior", "co-occurrence file"), dtype=np.float64)
        sc_prior = np.asarray(_require(data, "scene_prior", "co-occurrence file"), dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"co-occurrence file: {exc}") from exc
    if cond.size == 0:
        cond = cond.reshape(len(objects), len(scenes))
    if cond.shape != (len(objects), len(scenes)):
        raise ValidationError(f"cond has shape {cond.shape}, expected {(len(objects), len(scenes))}")
    cond = _recover(cond, per_scene[np.newaxis, :])
    obj_prior = _recover(obj_prior, m)
    scene_images = np.rint(sc_prior * n).astype(np.int64)
    sc_prior = _recover(sc_prior, n)
    return CooccurrenceTable(
        objects=tuple(objects), scenes=tuple(scenes), cond=cond,
        object_prior=obj_prior, scene_prior=sc_prior,
        detection_count=int(m), image_count=int(n),
        per_scene_detection_count=per_scene, scene_image_count=scene_images,
    )


def save_table(table: CooccurrenceTable, path) -> None:
    write_json(table_to_dict(table), path)


def load_table(path) -> CooccurrenceTable:
    return table_from_dict(read_json(path))


def table_to_csv(table: CooccurrenceTable) -> str:
    """Objects as rows, scenes as columns, probabilities to 3 decimals."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["object", *table.scenes])
    for i, obj in enumerate(table.objects):
        writer.writerow([obj, *(f"{p:.3f}" for p in table.cond[i])])
    return buf.getvalue()


def export_csv(table: CooccurrenceTable, path) -> None:
    Path(path).write_text(table_to_csv(table), encoding="utf-8")


def table_to_text(table: CooccurrenceTable) -> str:
    """Aligned percentage view (one decimal place)."""
    width = max([len(o) for o in table.objects] + [6])
    cols = [max(len(s), 7) for s in table.scenes]
    lines = [" " * width + "  " + "  ".join(s.rjust(c) for s, c in zip(table.scenes, cols))]
    for i, obj in enumerate(table.objects):
        cells = (f"{100 * p:.1f}%".rjust(c) for p, c in zip(table.cond[i], cols))
        lines.append(obj.ljust(width) + "  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def cluster_key_to_dict(key: SceneClusterKey) -> dict:
    return {
        "objects": list(key.objects),
        "scenes": list(key.scenes),
        "likelihoods": key.likelihoods.tolist(),
        "assignment": {o: key.assignment[o] for o in key.objects if o in key.assignment},
        "unassigned": key.unassigned,
        "order": key.order(),
    }
