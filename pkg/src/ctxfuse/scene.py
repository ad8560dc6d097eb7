"""Scene labels per image: ground truth, a prediction file, or a histogram classifier."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import (Dataset, ImageRecord, ParseError, ValidationError, _require, read_json,
                   write_json)
from ._validation import check_positive_int, check_probability

log = logging.getLogger(__name__)

MODES = ("ground_truth", "file", "histogram")


def n_threads() -> int:
    """Worker cap from ``CTXFUSE_THREADS`` (default: all cores)."""
    raw = os.environ.get("CTXFUSE_THREADS")
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ValidationError(f"CTXFUSE_THREADS must be an integer, got {raw!r}") from None
        return max(1, value)
    return os.cpu_count() or 1


@dataclass(frozen=True)
class ScenePrediction:
    image_id: str
    scene: str
    confidence: float = 1.0

    def __post_init__(self):
        check_probability(self.confidence, "confidence")


def load_scene_predictions(path, scene_classes: Sequence[str] | None = None) -> dict[str, ScenePrediction]:
    data = read_json(path)
    raw = _require(data, "predictions", "scene-prediction file")
    if not isinstance(raw, list):
        raise ParseError("scene-prediction file: 'predictions' must be an array")
    known = set(scene_classes) if scene_classes is not None else None
    out = {}
    for i, entry in enumerate(raw):
        where = f"predictions[{i}]"
        pred = ScenePrediction(
            image_id=_require(entry, "image_id", where),
            scene=_require(entry, "scene", where),
            confidence=entry.get("confidence", 1.0),
        )
        if known is not None and pred.scene not in known:
            raise ValidationError(f"{where}: unknown scene {pred.scene!r}")
        if pred.image_id in out:
            raise ValidationError(f"{where}: duplicate prediction for {pred.image_id!r}")
        out[pred.image_id] = pred
    return out


def scene_predictions_to_dict(predictions) -> dict:
    preds = predictions.values() if isinstance(predictions, dict) else predictions
    return {"predictions": [
        {"image_id": p.image_id, "scene": p.scene, "confidence": p.confidence} for p in preds
    ]}


def save_scene_predictions(predictions, path) -> None:
    write_json(scene_predictions_to_dict(predictions), path)


# -- histogram classifier -----------------------------------------------------


def color_histogram(pixels, bins: int = 8) -> np.ndarray:
    """L1-normalized joint RGB histogram with ``bins**3`` cells."""
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] < 3:
        raise ValidationError(f"expected an HxWx3 RGB array, got shape {arr.shape}")
    rgb = arr[..., :3].reshape(-1, 3).astype(np.int64)
    if rgb.shape[0] == 0:
        raise ValidationError("image has no pixels")
    idx = np.clip(rgb * bins // 256, 0, bins - 1)
    flat = (idx[:, 0] * bins + idx[:, 1]) * bins + idx[:, 2]
    hist = np.bincount(flat, minlength=bins ** 3).astype(np.float64)
    return hist / hist.sum()


def read_pixels(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read pixels from {path}: {exc}") from exc


def _as_pixels(item):
    if isinstance(item, ImageRecord):
        if not item.source_path:
            raise ValidationError(f"image {item.image_id!r} has no source_path")
        return read_pixels(item.source_path)
    if isinstance(item, (str, os.PathLike)):
        return read_pixels(item)
    return item


class HistogramSceneClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-centroid scene classifier on RGB color histograms.

    A small stand-in for a trained scene network: each scene is represented by
    the mean histogram of its training images and a query goes to the nearest
    centroid (Euclidean). ``predict_proba`` is the softmin of the distances.

    Parameters
    ----------
    bins : int
        Histogram bins per color channel.
    scenes : sequence of str, optional
        Scene vocabulary and tie-break order. Every scene must have at least
        one training image. Defaults to the sorted unique training labels.
    """

    def __init__(self, bins=8, scenes=None):
        self.bins = bins
        self.scenes = scenes

    def _features(self, X):
        items = list(X)
        with ThreadPoolExecutor(max_workers=n_threads()) as pool:
            pixels = list(pool.map(_as_pixels, items))
        return np.stack([color_histogram(p, self.bins) for p in pixels]) if pixels else \
            np.zeros((0, self.bins ** 3))

    def fit(self, X, y):
        """Fit centroids. ``X`` holds RGB arrays, image paths or ImageRecords."""
        check_positive_int(self.bins, "bins")
        y = list(y)
        feats = self._features(X)
        if len(y) != len(feats):
            raise ValidationError(f"got {len(feats)} images but {len(y)} labels")
        classes = list(self.scenes) if self.scenes is not None else sorted(set(y))
        if not classes:
            raise ValidationError("no scene classes to fit")
        labels = np.asarray(y, dtype=object)
        centroids = []
        for scene in classes:
            mask = labels == scene
            if not mask.any():
                raise ValidationError(f"scene {scene!r} has no training images")
            centroids.append(feats[mask].mean(axis=0))
        unknown = set(y) - set(classes)
        if unknown:
            raise ValidationError(f"training labels not in scene list: {sorted(unknown)}")
        self.classes_ = np.asarray(classes, dtype=object)
        self.centroids_ = np.stack(centroids)
        return self

    def _distances(self, X):
        check_is_fitted(self, "centroids_")
        feats = self._features(X)
        return np.linalg.norm(feats[:, np.newaxis, :] - self.centroids_[np.newaxis, :, :], axis=2)

    def predict_proba(self, X):
        d = self._distances(X)
        z = np.exp(-(d - d.min(axis=1, keepdims=True)))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        # first minimum wins: scene order is the tie-break
        return self.classes_[np.argmin(self._distances(X), axis=1)]

    def predict_with_confidence(self, X):
        d = self._distances(X)
        z = np.exp(-(d - d.min(axis=1, keepdims=True)))
        proba = z / z.sum(axis=1, keepdims=True)
        best = np.argmin(d, axis=1)
        return [(str(self.classes_[b]), float(proba[i, b])) for i, b in enumerate(best)]

    def to_dict(self) -> dict:
        check_is_fitted(self, "centroids_")
        return {"bins": self.bins, "scenes": [str(s) for s in self.classes_],
                "centroids": self.centroids_.tolist()}

    @classmethod
    def from_dict(cls, data) -> "HistogramSceneClassifier":
        bins = _require(data, "bins", "classifier state")
        scenes = _require(data, "scenes", "classifier state")
        centroids = np.asarray(_require(data, "centroids", "classifier state"), dtype=np.float64)
        if centroids.shape != (len(scenes), bins ** 3):
            raise ValidationError(f"centroids shape {centroids.shape} does not match bins/scenes")
        clf = cls(bins=bins, scenes=list(scenes))
        clf.classes_ = np.asarray(scenes, dtype=object)
        clf.centroids_ = centroids
        return clf

    def save(self, path) -> None:
        write_json(self.to_dict(), path)

    @classmethod
    def load(cls, path) -> "HistogramSceneClassifier":
        return cls.from_dict(read_json(path))


def fit_histogram_classifier(train_images: Sequence[ImageRecord], scene_classes=None,
                             bins: int = 8) -> HistogramSceneClassifier:
    scenes = scene_classes
    if scenes is None:
        scenes = list(dict.fromkeys(img.scene for img in train_images))
    clf = HistogramSceneClassifier(bins=bins, scenes=list(scenes))
    return clf.fit(train_images, [img.scene for img in train_images])


# -- provider -----------------------------------------------------------------


@dataclass(frozen=True)
class SceneProviderConfig:
    mode: str = "ground_truth"
    file_path: str | None = None
    histogram_bins: int = 8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"scene mode must be one of {MODES}, got {self.mode!r}")
        if (self.mode == "file") != (self.file_path is not None):
            raise ValidationError("file_path is required exactly when mode is 'file'")
        check_positive_int(self.histogram_bins, "histogram_bins")


class SceneProvider:
    """Answers ``identify_scene`` for one configured source.

    ``state`` is the fitted :class:`HistogramSceneClassifier` in histogram
    mode, or the image_id -> :class:`ScenePrediction` mapping in file mode
    (loaded from ``config.file_path`` when not given).
    """

    def __init__(self, config: SceneProviderConfig, scene_classes: Sequence[str] | None = None,
                 state=None):
        self.config = config
        self.scene_classes = tuple(scene_classes) if scene_classes is not None else None
        if config.mode == "file" and state is None:
            state = load_scene_predictions(config.file_path, self.scene_classes)
        self.state = state

    def identify_scene(self, image: ImageRecord) -> ScenePrediction:
        mode = self.config.mode
        if mode == "ground_truth":
            return ScenePrediction(image.image_id, image.scene, 1.0)
        if mode == "file":
            try:
                return self.state[image.image_id]
            except KeyError:
                raise ValidationError(f"no scene prediction for image {image.image_id!r}") from None
        if self.state is None:
            raise ValidationError("histogram scene classifier is not fitted")
        check_is_fitted(self.state, "centroids_")
        [(scene, conf)] = self.state.predict_with_confidence([image])
        pred = ScenePrediction(image.image_id, scene, conf)
        if self.scene_classes is not None and scene not in self.scene_classes:
            raise ValidationError(f"classifier predicted unknown scene {scene!r}")
        return pred

    def predict_all(self, images: Sequence[ImageRecord]) -> dict[str, ScenePrediction]:
        if self.config.mode == "histogram" and images:
            if self.state is None:
                raise ValidationError("histogram scene classifier is not fitted")
            pairs = self.state.predict_with_confidence(images)
            return {img.image_id: ScenePrediction(img.image_id, s, c) for img, (s, c) in zip(images, pairs)}
        return {img.image_id: self.identify_scene(img) for img in images}


def identify_scene(image: ImageRecord, config: SceneProviderConfig, state=None) -> ScenePrediction:
    return SceneProvider(config, state=state).identify_scene(image)


def provider_for(dataset: Dataset, mode: str = "ground_truth", file_path=None,
                 state_path=None, bins: int = 8) -> SceneProvider:
    """Build a provider for ``dataset`` from CLI-style arguments."""
    config = SceneProviderConfig(mode=mode, file_path=str(file_path) if file_path else None,
                                 histogram_bins=bins)
    state = None
    if mode == "histogram":
        if state_path is None:
            raise ValidationError("histogram mode needs a fitted classifier state file")
        state = HistogramSceneClassifier.load(Path(state_path))
    return SceneProvider(config, dataset.scene_classes, state)
