import json

import numpy as np
import pytest

from ctxfuse.core import BoundingBox, Candidate, DetectionRecord, ValidationError
from ctxfuse.scu import ScuOptions, scu_update
from ctxfuse.sim import (SimConfig, bayes_oracle, default_config, experiment, generate, load_config,
                         write_outputs)
from ctxfuse.stats import compute_table

SMALL = dict(images_per_split={"train": 60, "test": 60})


def test_same_seed_same_bytes(tmp_path):
    cfg = default_config(**SMALL)
    a = write_outputs(generate(cfg), tmp_path / "a")
    b = write_outputs(generate(cfg), tmp_path / "b")
    for key in a:
        assert a[key].read_bytes() == b[key].read_bytes()
    c = write_outputs(generate(default_config(seed=7, **SMALL)), tmp_path / "c")
    assert a["detections"].read_bytes() != c["detections"].read_bytes()


def test_perfect_detector():
    cfg = default_config(detector_accuracy=1.0, **SMALL)
    out = generate(cfg)
    truth = {(img.image_id, o.box): o.label for img in out.dataset.select("test").images for o in img.objects}
    assert all(d.label == truth[(d.image_id, d.box)] for d in out.detections)
    res = experiment(cfg, "baseline", output=out)
    assert res.accuracy == res.precision == res.recall == 1.0


def test_table_converges_to_cond_matrix():
    cfg = default_config(detector_accuracy=0.5, images_per_split={"train": 5000, "test": 0}, seed=3)
    out = generate(cfg)
    table = compute_table(out.dataset, "train")
    assert table.m >= 10_000
    assert np.max(np.abs(table.cond - cfg.cond)) < 0.02


def test_scores_are_a_distribution():
    out = generate(default_config(**SMALL))
    for d in out.detections:
        total = sum(c.score for c in d.candidates)
        assert total <= 1.0 + 1e-6 and all(0 <= c.score <= 1 for c in d.candidates)


def test_scene_classifier_accuracy():
    out = generate(default_config(scene_classifier_accuracy=0.0, **SMALL))
    test = out.dataset.select("test").images
    assert all(out.scene_predictions[i.image_id].scene != i.scene for i in test)


def test_oracle_matches_scu_without_floor():
    for seed in range(3):
        cfg = default_config(seed=seed, table_source="exact", **SMALL)
        out = generate(cfg)
        table = cfg.exact_table()
        for d in out.detections:
            scene = out.dataset.image(d.image_id).scene
            got = scu_update(d, scene, table, ScuOptions(score_floor=0.0)).final_label
            assert got == bayes_oracle(d, scene, cfg)


def test_floor_can_separate_oracle_and_scu():
    cfg = SimConfig(["S"], [1.0], ["a", "b"], [[0.0001], [0.9999]])
    table = cfg.exact_table()
    # b sits just under the default floor but wins once its prior is applied
    d = DetectionRecord("i", BoundingBox(0, 0, 1, 1), (Candidate("a", 2e-6), Candidate("b", 9e-7)))
    assert bayes_oracle(d, "S", cfg) == "b"
    assert scu_update(d, "S", table).final_label == "a"
    assert scu_update(d, "S", table, ScuOptions(score_floor=0.0)).final_label == "b"


def test_uniform_column_gives_raw_argmax():
    objects = ["a", "b", "c"]
    cfg = SimConfig(["S"], [1.0], objects, [[1 / 3]] * 3)
    d = DetectionRecord("i", BoundingBox(0, 0, 1, 1), (Candidate("b", 0.5), Candidate("c", 0.3)))
    assert bayes_oracle(d, "S", cfg) == "b"


def test_uniform_cond_scu_equals_baseline():
    k = 6
    cfg = default_config(**SMALL).to_dict()
    cfg.update(objects=[f"o{i}" for i in range(k)], cond_matrix=[[1 / k] * 3 for _ in range(k)],
               scene_detector_accuracy=None, table_source="exact")
    cfg = SimConfig.from_dict(cfg)
    out = generate(cfg)
    assert experiment(cfg, "scu", output=out).accuracy == experiment(cfg, "baseline", output=out).accuracy


def test_scu_improves_default():
    cfg = default_config()
    out = generate(cfg)
    assert experiment(cfg, "scu", output=out).accuracy > experiment(cfg, "baseline", output=out).accuracy


def test_mnf_pipeline_routes_every_image():
    cfg = default_config(**SMALL)
    res = experiment(cfg, "mnf")
    assert sum(res.extra["routing"].values()) == 60


@pytest.mark.parametrize("change", [
    {"scene_priors": [0.5, 0.5, 0.5]},
    {"detector_accuracy": 1.5},
    {"confusion_spread": "gaussian"},
    {"objects_per_image": 2.5},
    {"table_source": "oracle"},
    {"concentration": 0},
    {"scene_detector_accuracy": {"Garage": 0.5}},
])
def test_config_validation(change):
    with pytest.raises(ValidationError):
        default_config(**change)


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ValidationError, match="colour"):
        default_config(colour="red")


def test_config_file_round_trip(tmp_path):
    cfg = default_config(objects_per_image_dist="poisson", objects_per_image=1.5)
    (tmp_path / "sim.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "sim.json") == cfg


def test_scene_spread_stays_in_scene():
    cfg = default_config(confusion_spread="scene", **SMALL)
    out = generate(cfg)
    for d in out.detections:
        scene = cfg.scenes.index(out.dataset.image(d.image_id).scene)
        support = {o for o, row in zip(cfg.objects, cfg.cond_matrix) if row[scene] > 0}
        assert {c.label for c in d.candidates} <= support
