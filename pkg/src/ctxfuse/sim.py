"""Synthetic datasets and detector outputs for desk-scale experiments.

Images draw a scene from the scene priors and their objects from that scene's
column of the co-occurrence matrix. A simulated detector gives the true label
a score around ``detector_accuracy`` and spreads the rest over other labels
with a Dirichlet draw, so candidate lists look like real softmax outputs.
Everything is a pure function of the config (including its seed).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_non_negative, check_probability
from .core import (BoundingBox, Candidate, Dataset, DetectionRecord, GroundTruthObject, ImageRecord,
                   ValidationError, read_json, save_detections, save_manifest, write_json)
from .evaluation import evaluate
from .mnf import MockSource, SceneNetRegistry, run_mnf
from .scene import ScenePrediction, save_scene_predictions
from .scu import ScuOptions, fused_records, scu_update_batch
from .stats import CooccurrenceTable, compute_table

SPREADS = ("uniform", "scene")
GRID_COLS = 10
CELL = 64
BOX = 48


@dataclass(frozen=True)
class SimConfig:
    """Generative model parameters; ``cond_matrix`` is indexed ``[object][scene]``.

    ``objects_per_image`` is the exact count when ``objects_per_image_dist`` is
    ``"fixed"`` and the mean when it is ``"poisson"``. ``concentration`` scales
    the Dirichlet used for candidate scores (larger = scores closer to target).
    ``scene_source`` picks ground-truth or simulated scene labels for the
    pipelines; ``table_source`` picks the train-split estimate or the exact
    matrix for SCU. ``scene_detector_accuracy`` gives each scene-specific
    source its own accuracy for MNF experiments.
    """

    scenes: tuple
    scene_priors: tuple
    objects: tuple
    cond_matrix: tuple
    images_per_split: dict = field(default_factory=lambda: {"train": 200, "test": 200})
    objects_per_image: float = 2
    objects_per_image_dist: str = "fixed"
    detector_accuracy: float = 0.6
    confusion_spread: str = "uniform"
    concentration: float = 2.0
    scene_classifier_accuracy: float = 1.0
    scene_source: str = "ground_truth"
    table_source: str = "train"
    scene_detector_accuracy: dict | None = None
    seed: int = 42

    def __post_init__(self):
        for name in ("scenes", "scene_priors", "objects"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "cond_matrix", tuple(tuple(float(v) for v in row)
                                                      for row in self.cond_matrix))
        if not self.scenes or not self.objects:
            raise ValidationError("need at least one scene and one object")
        if len(set(self.scenes)) != len(self.scenes) or len(set(self.objects)) != len(self.objects):
            raise ValidationError("scene and object names must be unique")
        priors = np.asarray(self.scene_priors, dtype=np.float64)
        if priors.shape != (len(self.scenes),) or np.any(priors < 0) or abs(priors.sum() - 1) > 1e-9:
            raise ValidationError("scene_priors must be non-negative and sum to 1")
        cond = self.cond
        if cond.shape != (len(self.objects), len(self.scenes)):
            raise ValidationError(f"cond_matrix must be {len(self.objects)}x{len(self.scenes)}")
        if np.any(cond < 0) or np.any(np.abs(cond.sum(axis=0) - 1) > 1e-9):
            raise ValidationError("every cond_matrix column must be non-negative and sum to 1")
        for split in ("train", "test"):
            n = self.images_per_split.get(split, 0)
            if isinstance(n, bool) or not isinstance(n, int) or n < 0:
                raise ValidationError(f"images_per_split[{split!r}] must be a non-negative integer")
        if self.objects_per_image_dist not in ("fixed", "poisson"):
            raise ValidationError("objects_per_image_dist must be 'fixed' or 'poisson'")
        check_non_negative(self.objects_per_image, "objects_per_image")
        if self.objects_per_image_dist == "fixed" and int(self.objects_per_image) != self.objects_per_image:
            raise ValidationError("a fixed objects_per_image must be an integer")
        check_probability(self.detector_accuracy, "detector_accuracy")
        check_probability(self.scene_classifier_accuracy, "scene_classifier_accuracy")
        if self.confusion_spread not in SPREADS:
            raise ValidationError(f"confusion_spread must be one of {SPREADS}")
        if not self.concentration > 0:
            raise ValidationError("concentration must be positive")
        if self.scene_source not in ("ground_truth", "predicted"):
            raise ValidationError("scene_source must be 'ground_truth' or 'predicted'")
        if self.table_source not in ("train", "exact"):
            raise ValidationError("table_source must be 'train' or 'exact'")
        for scene, acc in (self.scene_detector_accuracy or {}).items():
            if scene not in self.scenes:
                raise ValidationError(f"scene_detector_accuracy names unknown scene {scene!r}")
            check_probability(acc, f"scene_detector_accuracy[{scene!r}]")

    @property
    def cond(self) -> np.ndarray:
        return np.asarray(self.cond_matrix, dtype=np.float64).reshape(len(self.objects), -1)

    def exact_table(self) -> CooccurrenceTable:
        return CooccurrenceTable.from_conditional(self.objects, self.scenes, self.cond, self.scene_priors)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("scenes", "scene_priors", "objects"):
            d[k] = list(d[k])
        d["cond_matrix"] = [list(r) for r in self.cond_matrix]
        return d

    @classmethod
    def from_dict(cls, data) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown sim config keys {sorted(unknown)}")
        return cls(**data)


def load_config(path) -> SimConfig:
    return SimConfig.from_dict(read_json(path))


def default_config_path() -> Path:
    return Path(__file__).with_name("data") / "default_sim.json"


def default_config(**overrides) -> SimConfig:
    data = read_json(default_config_path())
    data.update(overrides)
    return SimConfig.from_dict(data)


@dataclass
class SimOutput:
    dataset: Dataset
    scene_predictions: dict
    detections: list
    scene_sources: dict = field(default_factory=dict)


def _grid_box(k: int) -> BoundingBox:
    return BoundingBox((k % GRID_COLS) * CELL + 8, (k // GRID_COLS) * CELL + 8, BOX, BOX)


def _spread_weights(config: SimConfig, true_idx: int, scene_idx: int, spread: str) -> np.ndarray:
    k = len(config.objects)
    w = np.ones(k)
    if spread == "scene":
        col = config.cond[:, scene_idx].copy()
        col[true_idx] = 0.0
        if col.sum() > 0:
            w = col
    w[true_idx] = 0.0
    total = w.sum()
    return w / total if total > 0 else w


def _candidates(rng, config: SimConfig, true_idx: int, scene_idx: int, accuracy: float,
                spread: str) -> tuple:
    """Dirichlet draw centred on ``accuracy`` for the true label."""
    target = (1.0 - accuracy) * _spread_weights(config, true_idx, scene_idx, spread)
    target[true_idx] = accuracy
    if target.sum() <= 0:
        # single-object vocabulary with accuracy 0: nothing else to put mass on
        target[true_idx] = 1.0
    support = np.flatnonzero(target > 0)
    draws = rng.gamma(config.concentration * target[support])
    if draws.sum() <= 0:
        draws = target[support]
    scores = draws / draws.sum()
    return tuple(Candidate(config.objects[i], min(1.0, float(s))) for i, s in zip(support, scores))


def _sample_images(rng, config: SimConfig):
    cond = config.cond
    priors = np.asarray(config.scene_priors)
    images = []
    for split in ("train", "test"):
        for h in range(config.images_per_split.get(split, 0)):
            s = int(rng.choice(len(config.scenes), p=priors))
            if config.objects_per_image_dist == "fixed":
                count = int(config.objects_per_image)
            else:
                count = int(rng.poisson(config.objects_per_image))
            labels = rng.choice(len(config.objects), size=count, p=cond[:, s])
            objs = tuple(GroundTruthObject(config.objects[int(o)], _grid_box(k)) for k, o in enumerate(labels))
            images.append(ImageRecord(f"{split}-{h:06d}", config.scenes[s], split, objs))
    return Dataset(config.objects, config.scenes, tuple(images))


def _detect(rng, config: SimConfig, test_images, accuracy, spread, scene_idx_of, source=None):
    obj_idx = {o: i for i, o in enumerate(config.objects)}
    out = []
    for img in test_images:
        s = scene_idx_of(img)
        for obj in img.objects:
            cands = _candidates(rng, config, obj_idx[obj.label], s, accuracy, spread)
            out.append(DetectionRecord(img.image_id, obj.box, cands, source))
    return out


def generate(config: SimConfig) -> SimOutput:
    """Sample a dataset, scene predictions and detections for the test split."""
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)]
    data_rng, det_rng, scene_rng, source_rng = streams
    dataset = _sample_images(data_rng, config)
    test = dataset.select("test").images
    sc_idx = {s: j for j, s in enumerate(config.scenes)}

    detections = _detect(det_rng, config, test, config.detector_accuracy, config.confusion_spread,
                         lambda img: sc_idx[img.scene])

    preds = {}
    n_sc = len(config.scenes)
    for img in test:
        j = sc_idx[img.scene]
        if n_sc > 1 and scene_rng.random() >= config.scene_classifier_accuracy:
            others = [k for k in range(n_sc) if k != j]
            j = others[int(scene_rng.integers(len(others)))]
        preds[img.image_id] = ScenePrediction(img.image_id, config.scenes[j], 1.0)

    sources = {}
    for scene, acc in (config.scene_detector_accuracy or {}).items():
        j = sc_idx[scene]
        sources[scene] = _detect(source_rng, config, test, acc, "scene", lambda img, j=j: j)
    return SimOutput(dataset, preds, detections, sources)


def bayes_oracle(detection: DetectionRecord, scene: str, config: SimConfig) -> str:
    """Exhaustive argmax over every object class of score x true P(o|scene).

    Labels missing from the candidate list score 0. When every product is 0 the
    detector's own argmax (over all classes) is returned. Ties go to the
    alphabetically first label.
    """
    s = config.scenes.index(scene)
    cond = config.cond_matrix
    scores = {c.label: c.score for c in detection.candidates}
    best_label, best = None, -1.0
    raw_label, raw = None, -1.0
    for i, obj in enumerate(sorted(config.objects)):
        score = scores.get(obj, 0.0)
        product = score * cond[config.objects.index(obj)][s]
        if product > best:
            best_label, best = obj, product
        if score > raw:
            raw_label, raw = obj, score
    return best_label if best > 0 else raw_label


@dataclass
class ExperimentResult:
    pipeline: str
    accuracy: float
    precision: float
    recall: float
    n_detections: int
    report: object = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"pipeline": self.pipeline, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "n_detections": self.n_detections, **self.extra}


PIPELINES = ("baseline", "scu", "mnf")


def scenes_for(config: SimConfig, out: SimOutput) -> dict:
    if config.scene_source == "predicted":
        return out.scene_predictions
    return {img.image_id: ScenePrediction(img.image_id, img.scene, 1.0)
            for img in out.dataset.select("test").images}


def experiment(config: SimConfig, pipeline: str = "scu", options: ScuOptions = ScuOptions(),
               output: SimOutput | None = None) -> ExperimentResult:
    """Generate (unless ``output`` is given), run one pipeline, evaluate."""
    if pipeline not in PIPELINES:
        raise ValidationError(f"pipeline must be one of {PIPELINES}, got {pipeline!r}")
    out = output if output is not None else generate(config)
    extra = {}
    if pipeline == "baseline":
        preds = out.detections
    elif pipeline == "scu":
        table = config.exact_table() if config.table_source == "exact" else compute_table(out.dataset, "train")
        results, summary = scu_update_batch(out.detections, scenes_for(config, out), table, options)
        preds = fused_records(results)
        extra = summary.to_dict()
    else:
        if not out.scene_sources:
            raise ValidationError("mnf experiments need scene_detector_accuracy in the config")
        registry = SceneNetRegistry({s: MockSource(_by_image(recs)) for s, recs in out.scene_sources.items()})
        preds, counts = run_mnf(out.dataset, scenes_for(config, out), registry)
        extra = {"routing": counts}
    report = evaluate(out.dataset, preds, 0.5, "test")
    n = report.tp + report.fn
    return ExperimentResult(pipeline, report.tp / n if n else 0.0, report.total_precision,
                            report.total_recall, len(preds), report, extra)


def _by_image(records):
    out = {}
    for r in records:
        out.setdefault(r.image_id, []).append(r)
    return out


def write_outputs(out: SimOutput, out_dir) -> dict:
    """Write manifest, detections, scene predictions (and per-scene sources)."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"manifest": d / "manifest.json", "detections": d / "detections.json",
             "scenes": d / "scenes.json"}
    save_manifest(out.dataset, paths["manifest"])
    save_detections(out.detections, paths["detections"])
    save_scene_predictions(out.scene_predictions, paths["scenes"])
    if out.scene_sources:
        entries = {}
        for scene, recs in out.scene_sources.items():
            name = f"source_{out.dataset.scene_classes.index(scene)}.detections.json"
            save_detections(recs, d / name)
            entries[scene] = name
        write_json({"entries": entries}, d / "registry.json")
        paths["registry"] = d / "registry.json"
    return paths
