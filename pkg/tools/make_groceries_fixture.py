"""Write tests/fixtures/occluded_groceries.manifest.json.

Train counts per (object, scene) are the smallest integer counts whose ratios
round to the published Occluded Groceries co-occurrence percentages within
0.001, and whose per-object argmax scene matches the published scene
clustering. The Refrigerator column of the published table only sums to
98.9%, so three of its 0% cells carry one detection each (0.15%, which
rounds to 0.001). The test split is a smaller copy (train counts // 5).

Objects are packed one or two per image (alternating), shuffled with a fixed
seed, so the file is reproducible byte for byte.
"""

import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ctxfuse.core import BoundingBox, Dataset, GroundTruthObject, ImageRecord, save_manifest  # noqa: E402

OBJECTS = ["Can Chowder", "Can Soymilk", "Can Tomatosoup", "Carton OJ", "Carton Soymilk",
           "Diet Coke", "HC Potroast", "Juicebox", "Rice Tuscan", "Rice Pilaf"]
SCENES = ["Cupboard", "Counter", "Refrigerator"]
TRAIN_COUNTS = [
    [72, 123, 0],
    [0, 28, 137],
    [90, 89, 1],
    [0, 28, 144],
    [0, 0, 163],
    [0, 62, 88],
    [71, 72, 20],
    [0, 52, 127],
    [57, 148, 0],
    [57, 129, 1],
]
SEED = 2010


def _images(split, counts, rng):
    images = []
    for j, scene in enumerate(SCENES):
        labels = [o for i, o in enumerate(OBJECTS) for _ in range(counts[i][j])]
        rng.shuffle(labels)
        pos, size = 0, 1
        while pos < len(labels):
            chunk = labels[pos:pos + size]
            pos += size
            size = 3 - size
            objs = tuple(GroundTruthObject(lab, BoundingBox(20 + k * 220, 40, 180, 200))
                         for k, lab in enumerate(chunk))
            images.append((scene, objs))
    return [ImageRecord(f"og-{split}-{h:04d}", scene, split, objs) for h, (scene, objs) in enumerate(images)]


def build() -> Dataset:
    rng = random.Random(SEED)
    test_counts = [[c // 5 for c in row] for row in TRAIN_COUNTS]
    images = _images("train", TRAIN_COUNTS, rng) + _images("test", test_counts, rng)
    return Dataset(OBJECTS, SCENES, images)


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "occluded_groceries.manifest.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_manifest(build(), out)
    print(out)
