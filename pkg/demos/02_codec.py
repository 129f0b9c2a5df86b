"""
Boxes to heatmaps and back
==========================

Encode a few boxes into center heatmaps, then decode the maps again.
"""
import numpy as np

from aeris.detcodec import BoundingBox, decode_detections, encode_targets, gaussian_radius, output_hw

boxes = [
    BoundingBox(10.0, 12.0, 30.0, 20.0, 0),
    BoundingBox(70.0, 60.0, 12.0, 40.0, 1),
    BoundingBox(90.0, 20.0, 25.0, 25.0, 2),
]
map_hw = output_hw((128, 128))
print("prediction map", map_hw)

# the splat radius is the largest corner shift that keeps IoU >= 0.7
for b in boxes:
    print(b, "radius", round(gaussian_radius((b.h / 4, b.w / 4)), 3))

t = encode_targets(boxes, map_hw, num_classes=3)
print("peaks per class", [int((t.heatmap[c] == 1).sum()) for c in range(3)])

dets = decode_detections(t.heatmap, t.wh, t.offset, top_k=10, score_thresh=0.5)
for d in dets:
    print(f"class {d.class_id} score {d.score:.2f} box ({d.x:.2f}, {d.y:.2f}, {d.w:.2f}, {d.h:.2f})")

np.testing.assert_allclose(sorted(d.w for d in dets), sorted(b.w for b in boxes))
