"""Joint detection + restoration training: batch degradation, losses, SGD schedule, fit loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import checkpoint
from .degradation import DegradationConfig, apply_degradation, sample_degradation, substream
from .detcodec import BoundingBox, clip_box, detection_loss, encode_targets, output_hw, stack_targets
from .model import ModelConfig, build_model

log = logging.getLogger(__name__)

MODES = ("clean", "deg", "deg_plus_clean", "aeris")


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "aeris"
    lam: float = 0.4
    scale_range: tuple = (1.0, 4.0)
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.01
    optimizer: str = "sgd"  # sgd | adamw
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 500
    warmup_factor: float = 1e-3
    decay_epochs: tuple = (14, 18)
    grad_clip: float = 35.0
    min_box_area: float = 2.0
    hflip: bool = True
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    checkpoint_every: int = 0
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.mode == "aeris" and not self.lam > 0:
            raise ValueError("aeris mode needs lambda > 0")
        lo, hi = self.scale_range
        if not 1.0 <= lo <= hi <= 4.0:
            raise ValueError(f"scale_range must satisfy 1 <= lo <= hi <= 4, got {self.scale_range}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["degradation"] = self.degradation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        d = dict(d)
        if "degradation" in d and not isinstance(d["degradation"], DegradationConfig):
            d["degradation"] = DegradationConfig.from_dict(d["degradation"])
        for k in ("scale_range", "decay_epochs"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# the optimisation recipe used for 512x512 COCO training, kept for reference runs
FULL_SCALE_PRESET = TrainConfig(epochs=140, batch_size=16, lr=0.01, warmup_iters=500, decay_epochs=(90, 120))


@dataclass
class TrainBatch:
    images: np.ndarray  # (B, h, w, 3) network input t(x)
    hr: np.ndarray  # (B, H, W, 3) restoration targets x
    boxes: list  # per image, in input coordinates
    scale: float
    params: list  # per-image DegradationParams (empty when not degraded)
    degraded: bool


@dataclass
class TrainState:
    model: torch.nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)


def make_batch(samples, config: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Degrade a list of equally sized HR records with one shared scale ``s``."""
    if len(samples) == 0:
        raise ValueError("empty batch")
    shapes = {s.image.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"HR samples must share one size, got {sorted(shapes)}")
    H, W = samples[0].image.shape[:2]

    hr, hr_boxes = [], []
    for s in samples:
        img, boxes = s.image, list(s.boxes)
        if config.hflip and rng.random() < 0.5:
            img = img[:, ::-1]
            boxes = [BoundingBox(W - b.x - b.w, b.y, b.w, b.h, b.class_id) for b in boxes]
        hr.append(np.ascontiguousarray(img, dtype=np.float32))
        hr_boxes.append(boxes)

    degrade = config.mode in ("deg", "aeris") or (config.mode == "deg_plus_clean" and rng.random() < 0.5)
    if not degrade:
        return TrainBatch(np.stack(hr), np.stack(hr), hr_boxes, 1.0, [], False)

    scale = float(rng.uniform(*config.scale_range))
    images, boxes, params = [], [], []
    for img, bxs in zip(hr, hr_boxes):
        p = replace(sample_degradation(config.degradation, rng), scale=scale)
        out = apply_degradation(img, p, rng)
        h, w = out.shape[:2]
        scaled = []
        for b in bxs:
            c = clip_box(BoundingBox(b.x / scale, b.y / scale, b.w / scale, b.h / scale, b.class_id), (h, w))
            if c is not None and c.w * c.h >= config.min_box_area:
                scaled.append(c)
        images.append(out.astype(np.float32))
        boxes.append(scaled)
        params.append(p)
    return TrainBatch(np.stack(images), np.stack(hr), boxes, scale, params, True)


def to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2))).to(dtype)


def compute_losses(det_out, restored, targets: dict, hr: torch.Tensor | None, lam: float):
    """``l_total = l_obj + lam * l_d`` with ``l_d`` the mean absolute restoration error."""
    l_obj, parts = detection_loss(det_out, targets)
    if restored is not None:
        l_d = torch.mean(torch.abs(restored - hr.to(restored.dtype)))
    else:
        l_d = torch.zeros((), dtype=l_obj.dtype)
    l_total = l_obj + lam * l_d
    comps = {"l_obj": l_obj, "l_d": l_d, "l_total": l_total, **parts}
    bad = [k for k, v in comps.items() if not torch.isfinite(v).all()]
    if bad:
        raise NumericalError(f"non-finite loss components: {', '.join(bad)}")
    return l_total, comps


def lr_at(iteration: int, epoch: int, config: TrainConfig) -> float:
    """Linear warmup from ``lr * warmup_factor`` over ``warmup_iters``, x0.1 at each decay epoch."""
    lr = config.lr
    if iteration < config.warmup_iters:
        f = config.warmup_factor
        lr *= f + (1 - f) * iteration / config.warmup_iters
    return lr * 0.1 ** sum(epoch >= e for e in config.decay_epochs)


def make_optimizer(model, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def batch_targets(batch: TrainBatch, num_classes: int) -> dict:
    mhw = output_hw(batch.images.shape[1:3])
    return stack_targets([encode_targets(b, mhw, num_classes) for b in batch.boxes])


def train_step(state: TrainState, batch: TrainBatch, config: TrainConfig) -> TrainState:
    model, opt = state.model, state.optimizer
    model.train()
    dtype = next(model.parameters()).dtype
    # NHWC is markedly faster for the CPU convolution kernels
    x = to_tensor(batch.images, dtype).contiguous(memory_format=torch.channels_last)
    hr = to_tensor(batch.hr, dtype)
    targets = batch_targets(batch, model.cfg.num_classes)
    lr = lr_at(state.iteration, state.epoch, config)
    for g in opt.param_groups:
        g["lr"] = lr

    use_arrd = config.mode == "aeris"
    det, restored = model.forward_train(x, hr.shape[-2:] if use_arrd else None) if use_arrd else (
        model.forward_infer(x), None)
    l_total, comps = compute_losses(det, restored, targets, hr, config.lam if use_arrd else 0.0)
    opt.zero_grad(set_to_none=True)
    l_total.backward()
    if config.grad_clip:
        norm = torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        if not torch.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at iteration {state.iteration}")
    opt.step()
    rec = {"iteration": state.iteration, "epoch": state.epoch, "lr": lr,
           **{k: float(comps[k].detach()) for k in ("l_obj", "l_d", "l_total")}}
    state.history.append(rec)
    state.iteration += 1
    return state


LOG_FIELDS = ("iteration", "epoch", "lr", "l_obj", "l_d", "l_total")


def format_log(rec: dict) -> str:
    """One whitespace-separated ``key=value`` record per line."""
    return " ".join(
        f"{k}={rec[k]}" if k in ("iteration", "epoch") else f"{k}={rec[k]:.6e}" for k in LOG_FIELDS
    )


def parse_log(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, v = tok.split("=", 1)
        out[k] = int(v) if k in ("iteration", "epoch") else float(v)
    return out


def effective_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    """Only aeris training carries the restoration decoder."""
    if train_cfg.mode != "aeris":
        return replace(model_cfg, arrd_location=None)
    if model_cfg.arrd_location is None:
        raise ValueError("aeris mode needs a model with an ARRD decoder")
    return model_cfg


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    model = build_model(effective_model_config(model_cfg, train_cfg), seed=train_cfg.seed)
    model = model.to(memory_format=torch.channels_last)
    return TrainState(model, make_optimizer(model, train_cfg))


def save_state(path, state: TrainState, train_cfg: TrainConfig) -> Path:
    meta = {"epoch": state.epoch, "iteration": state.iteration, "history": state.history}
    return checkpoint.save_checkpoint(path, state.model, train_cfg, state.optimizer, meta)


def load_state(path, train_cfg: TrainConfig | None = None) -> tuple[TrainState, TrainConfig]:
    header, arrays = checkpoint.read_checkpoint(path)
    cfg = train_cfg or TrainConfig.from_dict(header["train_config"])
    model = build_model(ModelConfig.from_dict(header["model_config"]), seed=cfg.seed)
    model = model.to(memory_format=torch.channels_last)
    opt = make_optimizer(model, cfg)
    checkpoint.load_into(model, arrays, header, opt)
    meta = header["meta"]
    return TrainState(model, opt, meta["epoch"], meta["iteration"], list(meta["history"])), cfg


def epoch_batches(n: int, config: TrainConfig, epoch: int) -> list:
    order = substream(config.seed, epoch, 0).permutation(n)
    nb = n // config.batch_size if n >= config.batch_size else 1
    return [order[i * config.batch_size:(i + 1) * config.batch_size] for i in range(nb)]


def fit(dataset, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None, eval_hook=None,
        resume_from=None, stop_after_epoch: int | None = None) -> TrainState:
    """Train on an in-memory HR dataset.

    Batch ``b`` of epoch ``e`` draws all randomness from substream
    ``(seed, e, b + 1)``, so resuming from an epoch-boundary checkpoint
    reproduces the uninterrupted run exactly.
    """
    if resume_from is not None:
        state, _ = load_state(resume_from, train_cfg)
    else:
        state = init_state(model_cfg, train_cfg)
    out_dir = Path(out_dir) if out_dir is not None else None
    logf = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        logf = open(out_dir / "train.log", "a" if resume_from else "w")
    records = dataset.records if hasattr(dataset, "records") else list(dataset)
    try:
        while state.epoch < train_cfg.epochs:
            for b, idx in enumerate(epoch_batches(len(records), train_cfg, state.epoch)):
                batch = make_batch([records[i] for i in idx], train_cfg, substream(train_cfg.seed, state.epoch, b + 1))
                train_step(state, batch, train_cfg)
                rec = state.history[-1]
                if logf is not None:
                    logf.write(format_log(rec) + "\n")
                if train_cfg.log_every and rec["iteration"] % train_cfg.log_every == 0:
                    log.info(format_log(rec))
            state.epoch += 1
            if eval_hook is not None:
                eval_hook(state)
            if out_dir is not None and train_cfg.checkpoint_every and state.epoch % train_cfg.checkpoint_every == 0:
                save_state(out_dir / f"epoch_{state.epoch:03d}.ckpt", state, train_cfg)
            if stop_after_epoch is not None and state.epoch >= stop_after_epoch:
                break
        if out_dir is not None:
            save_state(out_dir / "final.ckpt", state, train_cfg)
    finally:
        if logf is not None:
            logf.close()
    return state
