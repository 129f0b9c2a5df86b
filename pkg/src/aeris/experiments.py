"""Desk-scale experiment drivers: train several modes/seeds on shapes, evaluate on degraded sets."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .checkpoint import load_model
from .datagen import build_degraded_set, gen_shapes, preset_config
from .evaluation import EvalConfig, ModelDetector, evaluate
from .model import ModelConfig
from .training import TrainConfig, fit, save_state

log = logging.getLogger(__name__)

DESK_MODEL = ModelConfig(
    num_classes=3,
    backbone_channels=(16, 32, 48, 64, 96),
    blocks_per_stage=1,
    up_channels=(64, 48, 32),
    head_channels=32,
    arrd_location="loc2",
    arrd_channels=16,
)

TRAIN_SEED, TEST_SEED = 1000, 2000
DESK_LR = {"sgd": 0.02, "adamw": 3e-3}
DESK_EPOCHS = 18


def desk_train_config(mode: str, seed: int = 0, epochs: int = DESK_EPOCHS, optimizer: str = "adamw",
                      **kw) -> TrainConfig:
    kw.setdefault("decay_epochs", (int(epochs * 0.75),))
    kw.setdefault("lr", DESK_LR[optimizer])
    return TrainConfig(mode=mode, seed=seed, epochs=epochs, batch_size=16, optimizer=optimizer,
                       warmup_iters=100, log_every=0, **kw)


@dataclass
class DeskData:
    train: object
    test_clean: object

    def degraded(self, preset: str, seed: int = TEST_SEED):
        return build_degraded_set(self.test_clean, preset_config(preset, seed), seed)


def desk_data(n_train: int = 2000, n_test: int = 500, image_hw=(128, 128)) -> DeskData:
    return DeskData(gen_shapes(n_train, image_hw, seed=TRAIN_SEED), gen_shapes(n_test, image_hw, seed=TEST_SEED))


def train_and_eval(data: DeskData, test_set, mode: str, seed: int, out_dir, model_cfg: ModelConfig = DESK_MODEL,
                   epochs: int = DESK_EPOCHS, **train_kw) -> dict:
    """Train one model, save ``final.ckpt`` and return its metrics on ``test_set``."""
    out_dir = Path(out_dir)
    cfg = desk_train_config(mode, seed, epochs, **train_kw)
    t0 = time.perf_counter()
    state = fit(data.train, model_cfg, cfg, out_dir=out_dir)
    train_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    res = evaluate(ModelDetector(state.model), test_set, EvalConfig())
    row = {"mode": mode, "seed": seed, "arrd_location": state.model.cfg.arrd_location,
           "train_seconds": train_s, "eval_seconds": time.perf_counter() - t0, **res.as_dict()}
    (out_dir / "result.json").write_text(json.dumps(row, indent=1))
    log.info("%s seed=%d AP=%.4f (%.0fs)", mode, seed, res.AP, train_s)
    return row


def cached_run(data, test_set, mode, seed, root, **kw) -> dict:
    """``train_and_eval`` unless ``root/<mode>_s<seed>/result.json`` already exists."""
    out = Path(root) / f"{mode}_s{seed}"
    f = out / "result.json"
    if f.is_file():
        return json.loads(f.read_text())
    return train_and_eval(data, test_set, mode, seed, out, **kw)


def trained_model(root, mode, seed):
    model, _ = load_model(Path(root) / f"{mode}_s{seed}" / "final.ckpt")
    return model.eval()
