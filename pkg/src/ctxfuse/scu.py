"""Scene-context rescoring of detector candidates.

For a box with candidate scores ``P(o|bb)`` in an image whose scene is ``s``,
the final label is ``argmax_o P(o|bb) * P(o|s)`` over the candidates the
detector actually proposed. Labels the detector did not propose count as
score zero and can never win.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_non_negative
from .core import BoundingBox, Candidate, Dataset, DetectionRecord, ValidationError
from .scene import ScenePrediction
from .stats import CooccurrenceTable, compute_table


@dataclass(frozen=True)
class ScuOptions:
    """``score_floor``: candidates scoring below it are ignored.
    ``smoothing``: Laplace pseudo-count added to P(o|s); 0 keeps hard zeros.
    """

    score_floor: float = 1e-6
    smoothing: float = 0.0

    def __post_init__(self):
        check_non_negative(self.score_floor, "score_floor")
        check_non_negative(self.smoothing, "smoothing")


@dataclass(frozen=True)
class FusionResult:
    image_id: str
    box: BoundingBox
    scene: str
    original_label: str
    original_score: float
    final_label: str
    final_score: float
    fallback_used: bool
    per_candidate_products: tuple[tuple[str, float], ...] = field(default=())

    @property
    def changed(self) -> bool:
        return self.final_label != self.original_label

    def to_record(self, source: str | None = None) -> DetectionRecord:
        return DetectionRecord(self.image_id, self.box, (Candidate(self.final_label, self.final_score),),
                               source)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "bbox": self.box.as_list(),
            "scene": self.scene,
            "original_label": self.original_label,
            "original_score": self.original_score,
            "final_label": self.final_label,
            "final_score": self.final_score,
            "fallback_used": self.fallback_used,
            "products": [{"label": lab, "product": p} for lab, p in self.per_candidate_products],
        }


@dataclass(frozen=True)
class ScuSummary:
    total: int = 0
    changed: int = 0
    fallback: int = 0

    def to_dict(self) -> dict:
        return {"total": self.total, "changed": self.changed, "fallback": self.fallback}


def scu_update(detection: DetectionRecord, scene: str, table: CooccurrenceTable,
               options: ScuOptions = ScuOptions()) -> FusionResult:
    prior = table.column(scene, options.smoothing)
    for c in detection.candidates:
        if c.label not in prior:
            raise ValidationError(f"candidate label {c.label!r} not in co-occurrence table")
    retained = [c for c in detection.candidates if c.score >= options.score_floor]
    if not retained:
        raise ValidationError(
            f"detection in image {detection.image_id!r}: every candidate is below "
            f"score_floor={options.score_floor}"
        )
    products = [(c.label, c.score * prior[c.label]) for c in retained]
    top = detection.candidates[0]
    total = sum(p for _, p in products)
    if total == 0.0:
        # nothing the context can rank: keep the detector's own choice
        return FusionResult(detection.image_id, detection.box, scene, top.label, top.score,
                            top.label, top.score, True, tuple(products))
    best_label, best = min(products, key=lambda lp: (-lp[1], lp[0]))
    return FusionResult(detection.image_id, detection.box, scene, top.label, top.score,
                        best_label, min(1.0, best / total), False, tuple(products))


def _scene_of(pred) -> str:
    return pred.scene if isinstance(pred, ScenePrediction) else pred


def scu_update_batch(detections: Sequence[DetectionRecord], scene_predictions: Mapping,
                     table: CooccurrenceTable, options: ScuOptions = ScuOptions()):
    """Rescore every detection with its image's scene.

    ``scene_predictions`` maps image_id to a scene label or a
    :class:`ScenePrediction`. Returns ``(results, summary)`` with results in
    input order.
    """
    results = []
    for det in detections:
        try:
            pred = scene_predictions[det.image_id]
        except KeyError:
            raise ValidationError(f"no scene prediction for image {det.image_id!r}") from None
        results.append(scu_update(det, _scene_of(pred), table, options))
    summary = ScuSummary(
        total=len(results),
        changed=sum(r.changed for r in results),
        fallback=sum(r.fallback_used for r in results),
    )
    return results, summary


def fused_records(results: Sequence[FusionResult], source: str | None = None) -> list[DetectionRecord]:
    """One single-candidate record per result, carrying the final label and score."""
    return [r.to_record(source) for r in results]


class SceneContextUpdater(BaseEstimator):
    """Estimator wrapper: ``fit`` counts co-occurrences, ``transform`` rescores.

    Parameters
    ----------
    score_floor : float
        Candidates below this score are not considered.
    smoothing : float
        Laplace pseudo-count applied to P(o|s) at rescoring time.
    split : str
        Which split of the dataset passed to ``fit`` provides the statistics.
    """

    def __init__(self, score_floor=1e-6, smoothing=0.0, split="train"):
        self.score_floor = score_floor
        self.smoothing = smoothing
        self.split = split

    def fit(self, X, y=None):
        """``X`` is a Dataset, or an already computed CooccurrenceTable."""
        if isinstance(X, CooccurrenceTable):
            self.table_ = X
        elif isinstance(X, Dataset):
            self.table_ = compute_table(X, self.split)
        else:
            raise ValidationError(f"cannot fit on {type(X).__name__}; pass a Dataset or table")
        self.options_ = ScuOptions(self.score_floor, self.smoothing)
        return self

    def update(self, detections, scenes):
        check_is_fitted(self, "table_")
        return scu_update_batch(detections, scenes, self.table_, self.options_)

    def predict(self, detections, scenes):
        """Final label per detection."""
        results, _ = self.update(detections, scenes)
        return [r.final_label for r in results]

    def transform(self, detections, scenes):
        """Detections reduced to their rescored (final_label, final_score)."""
        results, _ = self.update(detections, scenes)
        return fused_records(results)
