"""Score a detector with known error rates against IoU-matched ground truth.

The oracle detector replays ground-truth boxes with controlled noise: a drop
rate, a spurious-box rate, and coordinate jitter. Feeding its output through
the greedy IoU matcher shows precision and recall landing exactly where the
noise model predicts.

Run:  python demos/02_detection_scoring.py
"""

import numpy as np

from drscreen.detector import DetectorConfig, OraclePerturbation, detect
from drscreen.deteval import detection_metrics, iou, match_many
from drscreen.domain import BBox, Detection, LesionClass

rng = np.random.default_rng(1)

print("IoU basics:")
a = BBox(0.25, 0.25, 0.5, 0.5)
b = BBox(0.5, 0.5, 0.5, 0.5)
print(f"  identical boxes      -> {iou(a, a)}")
print(f"  quarter overlap case -> {iou(a, b):.6f}  (exactly 1/7)")

# a few hundred images worth of random ground truth
truth_by_image = {}
for i in range(400):
    boxes = []
    for _ in range(rng.integers(5, 10)):
        boxes.append(
            Detection(
                LesionClass(int(rng.integers(0, 7))),
                BBox(
                    round(float(rng.uniform(0.1, 0.9)), 6),
                    round(float(rng.uniform(0.1, 0.9)), 6),
                    round(float(rng.uniform(0.04, 0.1)), 6),
                    round(float(rng.uniform(0.04, 0.1)), 6),
                ),
            )
        )
    truth_by_image[f"img_{i:04d}"] = boxes

config = DetectorConfig()
for drop, spurious in ((0.0, 0.0), (0.2, 0.1), (0.5, 0.3)):
    perturb = OraclePerturbation(drop_rate=drop, spurious_rate=spurious, seed=11)
    detections = {
        image_id: detect(f"{image_id}.png", config, truth=truth, perturb=perturb)
        for image_id, truth in truth_by_image.items()
    }
    report = detection_metrics(match_many(detections, truth_by_image, 0.5))
    expected_r = 1.0 - drop
    expected_p = (1.0 - drop) / (1.0 - drop + spurious)
    print(
        f"\ndrop={drop} spurious={spurious}:"
        f"\n  measured  precision {report.precision:.4f}  recall {report.recall:.4f}"
        f"  F1 {report.f1:.4f}"
        f"\n  predicted precision {expected_p:.4f}  recall {expected_r:.4f}"
    )
