from contextlib import contextmanager
from pathlib import Path

import pytest

from ctxfuse.core import (BoundingBox, Candidate, Dataset, DetectionRecord, GroundTruthObject,
                          ImageRecord, load_manifest)

FIXTURES = Path(__file__).parent / "fixtures"
GROCERIES = FIXTURES / "occluded_groceries.manifest.json"

# Published train-split co-occurrence percentages, rows in manifest object order,
# columns Cupboard, Counter, Refrigerator.
TABLE1 = {
    "Can Chowder": (0.206, 0.168, 0.0),
    "Can Soymilk": (0.0, 0.038, 0.200),
    "Can Tomatosoup": (0.258, 0.123, 0.0),
    "Carton OJ": (0.0, 0.038, 0.210),
    "Carton Soymilk": (0.0, 0.0, 0.238),
    "Diet Coke": (0.0, 0.084, 0.128),
    "HC Potroast": (0.206, 0.097, 0.028),
    "Juicebox": (0.0, 0.071, 0.185),
    "Rice Tuscan": (0.163, 0.201, 0.0),
    "Rice Pilaf": (0.163, 0.175, 0.0),
}


def box(k=0):
    return BoundingBox(10 + 100 * k, 10, 80, 80)


def det(image_id, *cands, k=0, source=None):
    return DetectionRecord(image_id, box(k), tuple(Candidate(lab, s) for lab, s in cands), source)


def image(image_id, scene, labels, split="train"):
    return ImageRecord(image_id, scene, split,
                       tuple(GroundTruthObject(lab, box(k)) for k, lab in enumerate(labels)))


@pytest.fixture(scope="session")
def groceries():
    return load_manifest(GROCERIES)


@pytest.fixture
def tiny():
    """sceneA holds [x, x, y], sceneB holds [y]."""
    return Dataset(("x", "y"), ("A", "B"),
                   (image("i1", "A", ["x", "x", "y"]), image("i2", "B", ["y"])))


def offset_box(k=0):
    """IoU 1/7 with ``box(k)``: overlaps a quarter of it, never matched at 0.5."""
    b = box(k)
    return BoundingBox(b.x + b.w / 2, b.y + b.h / 2, b.w, b.h)


# Three test images over the grocery vocabulary, tallied by hand:
#   e1 Refrigerator: Carton OJ right (tp); Juicebox called Diet Coke (fp Diet Coke, fn Juicebox)
#   e2 Counter:      Rice Tuscan right (tp); a duplicate Rice Pilaf box on it (fp Rice Pilaf)
#   e3 Cupboard:     Can Tomatosoup right (tp); Can Chowder box misplaced (fp and fn Can Chowder)
HAND_TALLY = {"tp": 3, "fp": 3, "fn": 2}


def hand_tally_fixture(groceries):
    tests = [
        image("e1", "Refrigerator", ["Carton OJ", "Juicebox"], "test"),
        image("e2", "Counter", ["Rice Tuscan"], "test"),
        image("e3", "Cupboard", ["Can Tomatosoup", "Can Chowder"], "test"),
    ]
    ds = groceries.with_images(list(groceries.select("train").images) + tests)
    preds = [
        det("e1", ("Carton OJ", 0.9), ("Juicebox", 0.05), k=0),
        det("e1", ("Diet Coke", 0.8), ("Juicebox", 0.15), k=1),
        det("e2", ("Rice Tuscan", 0.7), k=0),
        det("e2", ("Rice Pilaf", 0.6), k=0),
        det("e3", ("Can Tomatosoup", 0.95), k=0),
        DetectionRecord("e3", offset_box(1), (Candidate("Can Chowder", 0.4),)),
    ]
    return ds, preds


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE = {}


@contextmanager
def criterion(number, text):
    """Record a PASS/FAIL line for one acceptance criterion.

    The body may append measured values to the yielded list; they are shown
    after the criterion text.
    """
    measured = []
    try:
        yield measured
    except BaseException:
        ACCEPTANCE[number] = _line("FAIL", number, text, measured)
        raise
    ACCEPTANCE[number] = _line("PASS", number, text, measured)


def _line(status, number, text, measured):
    tail = f" [{'; '.join(measured)}]" if measured else ""
    return f"{status}  {number}. {text}{tail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
