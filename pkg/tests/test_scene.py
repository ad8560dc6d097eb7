import json

import numpy as np
import pytest
from PIL import Image

from ctxfuse.core import Dataset, ImageRecord, ValidationError
from ctxfuse.scene import (HistogramSceneClassifier, ScenePrediction, SceneProvider,
                           SceneProviderConfig, color_histogram, fit_histogram_classifier,
                           identify_scene, load_scene_predictions, n_threads, provider_for)


def solid(rgb, size=8):
    return np.full((size, size, 3), rgb, dtype=np.uint8)


def write_png(path, rgb):
    Image.fromarray(solid(rgb)).save(path)
    return str(path)


def test_ground_truth_mode():
    img = ImageRecord("a", "Counter", "test")
    assert identify_scene(img, SceneProviderConfig()) == ScenePrediction("a", "Counter", 1.0)


def test_file_mode(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"predictions": [
        {"image_id": "img7", "scene": "Refrigerator", "confidence": 0.92}]}))
    config = SceneProviderConfig("file", str(path))
    pred = identify_scene(ImageRecord("img7", "Counter", "test"), config)
    assert (pred.scene, pred.confidence) == ("Refrigerator", 0.92)
    with pytest.raises(ValidationError, match="img8"):
        identify_scene(ImageRecord("img8", "Counter", "test"), config)


def test_prediction_file_validation(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"predictions": [{"image_id": "a", "scene": "Garage"}]}))
    with pytest.raises(ValidationError, match="Garage"):
        load_scene_predictions(path, ["Counter"])
    path.write_text(json.dumps({"predictions": [{"image_id": "a", "scene": "Counter"}] * 2}))
    with pytest.raises(ValidationError, match="duplicate"):
        load_scene_predictions(path)


def test_config_validation():
    with pytest.raises(ValidationError):
        SceneProviderConfig("file")
    with pytest.raises(ValidationError):
        SceneProviderConfig("ground_truth", "x.json")
    with pytest.raises(ValidationError):
        SceneProviderConfig("resnet")
    with pytest.raises(ValidationError):
        SceneProviderConfig(histogram_bins=0)


def test_histogram_is_normalized():
    h = color_histogram(solid((255, 0, 0)), bins=4)
    assert h.shape == (64,) and h.sum() == pytest.approx(1.0) and h.max() == 1.0


def test_two_solid_colors():
    clf = HistogramSceneClassifier(bins=4, scenes=["Pavement", "Sand"])
    clf.fit([solid((90, 90, 90)), solid((230, 200, 120))], ["Pavement", "Sand"])
    [(scene, conf)] = clf.predict_with_confidence([solid((90, 90, 90), size=5)])
    assert scene == "Pavement" and conf > 0.5
    assert clf.predict([solid((230, 200, 120))]).tolist() == ["Sand"]
    assert clf.predict_proba([solid((90, 90, 90))]).sum() == pytest.approx(1.0)


def test_equidistant_query_goes_to_first_scene():
    clf = HistogramSceneClassifier(bins=2, scenes=["B", "A"])
    clf.fit([solid((0, 0, 0)), solid((255, 255, 255))], ["B", "A"])
    # half black, half white sits exactly between the two centroids
    half = np.concatenate([solid((0, 0, 0), 4)[:2], solid((255, 255, 255), 4)[:2]])
    assert clf.predict([half]).tolist() == ["B"]


def test_single_scene():
    clf = HistogramSceneClassifier(bins=2).fit([solid((10, 10, 10))], ["only"])
    assert clf.predict_with_confidence([solid((250, 0, 0))]) == [("only", 1.0)]


def test_fit_errors():
    with pytest.raises(ValidationError, match="no training images"):
        HistogramSceneClassifier(scenes=["A", "B"]).fit([solid((0, 0, 0))], ["A"])
    with pytest.raises(ValidationError):
        HistogramSceneClassifier(bins=0).fit([solid((0, 0, 0))], ["A"])
    with pytest.raises(Exception):
        HistogramSceneClassifier().predict([solid((0, 0, 0))])


def test_provider_from_files(tmp_path):
    colors = {"Pavement": (90, 90, 90), "Sand": (230, 200, 120)}
    images = [ImageRecord(f"{s}{k}", s, split, source_path=write_png(tmp_path / f"{s}{k}.png", c))
              for s, c in colors.items() for k, split in enumerate(["train", "test"])]
    ds = Dataset([], list(colors), images)
    clf = fit_histogram_classifier(ds.select("train").images, ds.scene_classes, bins=4)
    clf.save(tmp_path / "state.json")
    provider = provider_for(ds, "histogram", state_path=tmp_path / "state.json", bins=4)
    preds = provider.predict_all(ds.select("test").images)
    assert {k: p.scene for k, p in preds.items()} == {"Pavement1": "Pavement", "Sand1": "Sand"}
    # one-at-a-time agrees with the batch path
    assert all(provider.identify_scene(img) == preds[img.image_id] for img in ds.select("test").images)


def test_unreadable_pixels(tmp_path):
    provider = SceneProvider(SceneProviderConfig("histogram"), state=HistogramSceneClassifier(
        bins=2).fit([solid((0, 0, 0))], ["A"]))
    with pytest.raises(ValidationError):
        provider.identify_scene(ImageRecord("a", "A", "test", source_path=str(tmp_path / "none.png")))
    with pytest.raises(ValidationError, match="source_path"):
        provider.identify_scene(ImageRecord("a", "A", "test"))


def test_state_round_trip(tmp_path):
    clf = HistogramSceneClassifier(bins=3).fit([solid((1, 2, 3)), solid((200, 0, 9))], ["A", "B"])
    clf.save(tmp_path / "s.json")
    again = HistogramSceneClassifier.load(tmp_path / "s.json")
    np.testing.assert_array_equal(again.centroids_, clf.centroids_)
    assert again.get_params() == {"bins": 3, "scenes": ["A", "B"]}


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("CTXFUSE_THREADS", "3")
    assert n_threads() == 3
    monkeypatch.setenv("CTXFUSE_THREADS", "lots")
    with pytest.raises(ValidationError):
        n_threads()
