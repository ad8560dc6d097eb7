"""Scene-context fusion for object-detection outputs."""

from .core import (BoundingBox, Candidate, Dataset, DetectionRecord, GroundTruthObject, ImageRecord,
                   ParseError, ValidationError, load_detections, load_manifest, save_detections,
                   save_manifest)
from .evaluation import EvalReport, evaluate, match, pr_curve, render_confusion, score
from .mnf import MultiNetworkFusion, SceneNetRegistry, partition_train, route, run_mnf
from .scene import HistogramSceneClassifier, ScenePrediction, SceneProvider, SceneProviderConfig
from .scu import FusionResult, SceneContextUpdater, ScuOptions, scu_update, scu_update_batch
from .stats import (CooccurrenceTable, SceneClusterKey, compute_cluster_key, compute_table,
                    filter_scenes, load_table, save_table)

__version__ = "0.1.0"
