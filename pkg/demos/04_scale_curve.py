"""
Does upscaling the input help small objects?
============================================

Evaluate one detector on 4x down-sampled images after bicubic pre-upscaling
by 1, 2 and 4. Run 03_train_eval.py first.
"""
from aeris.evaluation import ModelDetector, scale_curve
from aeris.experiments import desk_data, trained_model

data = desk_data(n_train=1, n_test=200)
down4 = data.degraded("down4")
print("test image size", down4.records[0].image.shape[:2])

model = trained_model("runs/demo", "aeris", 0)
rows = scale_curve(ModelDetector(model), down4, ratios=(1, 2, 4), out_dir="runs/demo/scale_curve")
for r, res in rows:
    print(f"ratio {r}: AP={res.AP:.3f} AP_s={res.AP_s:.3f} AP_m={res.AP_m:.3f} AP_l={res.AP_l:.3f}")
print("plot in runs/demo/scale_curve/scale_curve.svg")
