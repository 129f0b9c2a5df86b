"""Central finite-difference check of the full joint-loss graph in float64.

Two things make a naive check unreliable on this network. The loss is O(1),
so differencing two totals loses small gradients in rounding; the
difference is therefore taken per loss term and summed afterwards. The graph
also has kinks (ReLU, L1, the heatmap clamp); a perturbation that moves any
of their inputs across zero does not measure the derivative, so each
perturbation is checked for sign changes at those inputs and the step is
shrunk until it crosses none. Because of that guard the starting step can be
large (1e-4): rounding error scales like eps * |loss| / step and dominates
long before truncation error does.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .detcodec import FOCAL_EPS, OFFSET_WEIGHT, WH_WEIGHT, BoundingBox, encode_targets, output_hw, stack_targets
from .model import HEATMAP_CLAMP, ModelConfig, build_model, count_parameters
from .training import compute_losses

TINY_CONFIG = ModelConfig(
    num_classes=1,
    backbone_channels=(2, 2, 2, 2, 2),
    blocks_per_stage=1,
    up_channels=(2, 2, 2),
    head_channels=1,
    arrd_location="loc2",
    arrd_channels=1,
)

# below this magnitude a gradient is compared absolutely rather than relatively
GRAD_FLOOR = 1e-8
# zero-initialised biases sit ReLUs exactly on their kink wherever the incoming
# activations are all zero; parameters are jittered to a generic point first
JITTER = 0.05
MAX_SHRINK = 4


@dataclass
class GradcheckReport:
    n_params: int
    max_rel_error: float
    worst_param: str
    analytic: np.ndarray
    numeric: np.ndarray
    steps: np.ndarray  # step actually used per parameter
    unresolved: list  # parameters whose every step crossed a kink

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol and not self.unresolved


def _problem(seed: int, input_hw=(64, 64), hr_hw=(128, 128), batch: int = 2, num_classes: int = 1):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(batch, 3, *input_hw, generator=g, dtype=torch.float64)
    hr = torch.rand(batch, 3, *hr_hw, generator=g, dtype=torch.float64)
    rng = np.random.default_rng(seed)
    targets = []
    for _ in range(batch):
        boxes = []
        for _ in range(3):
            w, h = rng.uniform(6, 30, size=2)
            bx, by = rng.uniform(0, input_hw[1] - w), rng.uniform(0, input_hw[0] - h)
            boxes.append(BoundingBox(bx, by, w, h, int(rng.integers(num_classes))))
        targets.append(encode_targets(boxes, output_hw(input_hw), num_classes))
    return x, hr, stack_targets(targets)


def loss_terms(det, restored, targets, hr, lam) -> torch.Tensor:
    """The joint loss as a flat vector of per-element contributions summing to ``l_total``."""
    eps = max(FOCAL_EPS, torch.finfo(det.heatmap.dtype).eps)
    p = det.heatmap.clamp(eps, 1 - eps)
    t = targets["heatmap"].to(p.dtype)
    pos = t.eq(1).to(p.dtype)
    n = pos.sum().clamp(min=1.0)
    focal = -(torch.log(p) * (1 - p) ** 2 * pos + torch.log(1 - p) * p**2 * (1 - t) ** 4 * (1 - pos)) / n
    parts = [focal.flatten()]
    for key, weight in (("wh", WH_WEIGHT), ("offset", OFFSET_WEIGHT)):
        pred = getattr(det, key)
        m = targets["mask"].unsqueeze(1).to(pred.dtype).expand_as(pred)
        count = m.sum().clamp(min=1.0)
        parts.append((weight * torch.abs(pred - targets[key].to(pred.dtype)) * m / count).flatten())
    if restored is not None:
        parts.append((lam * torch.abs(restored - hr) / restored.numel()).flatten())
    return torch.cat(parts)


def _kink_signs(det, restored, targets, hr, relu_inputs) -> torch.Tensor:
    signs = [r.flatten() for r in relu_inputs]
    signs.append((det.heatmap <= HEATMAP_CLAMP).flatten())
    signs.append((det.heatmap >= 1 - HEATMAP_CLAMP).flatten())
    for key in ("wh", "offset"):
        signs.append((getattr(det, key) > targets[key]).flatten())
    if restored is not None:
        signs.append((restored > hr).flatten())
    return torch.cat(signs)


def run_gradcheck(cfg: ModelConfig = TINY_CONFIG, seed: int = 0, lam: float = 0.4, step: float = 1e-4,
                  max_params: int = 1000) -> GradcheckReport:
    """Compare autograd against central differences for every parameter element."""
    model = build_model(cfg, seed=seed, dtype=torch.float64)
    g = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * JITTER)
    n = count_parameters(model)
    if n > max_params:
        raise ValueError(f"gradcheck config has {n} parameters, limit is {max_params}")
    model.train()
    x, hr, targets = _problem(seed, num_classes=cfg.num_classes)

    relu_inputs = []
    hooks = [m.register_forward_pre_hook(lambda _m, inp: relu_inputs.append(inp[0].detach() > 0))
             for m in model.modules() if isinstance(m, nn.ReLU)]

    def evaluate():
        relu_inputs.clear()
        det, restored = model.forward_train(x, hr.shape[-2:])
        return loss_terms(det, restored, targets, hr, lam), _kink_signs(det, restored, targets, hr, relu_inputs)

    try:
        model.zero_grad()
        det, restored = model.forward_train(x, hr.shape[-2:])
        total = compute_losses(det, restored, targets, hr, lam)[0]
        total.backward()
        with torch.no_grad():
            check = evaluate()[0].sum().item()
        if abs(check - total.item()) > 1e-12 * max(1.0, abs(total.item())):
            raise AssertionError(f"loss decomposition {check} disagrees with the training loss {total.item()}")

        names, analytic, numeric, steps, unresolved = [], [], [], [], []
        with torch.no_grad():
            for name, p in model.named_parameters():
                flat = p.view(-1)
                grad = p.grad.view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    h = step
                    for _ in range(MAX_SHRINK + 1):
                        flat[i] = orig + h
                        up, s_up = evaluate()
                        flat[i] = orig - h
                        down, s_down = evaluate()
                        flat[i] = orig
                        if torch.equal(s_up, s_down):
                            break
                        h /= 10
                    else:
                        unresolved.append(f"{name}[{i}]")
                    names.append(f"{name}[{i}]")
                    analytic.append(grad[i].item())
                    numeric.append((up - down).sum().item() / (2 * h))
                    steps.append(h)
    finally:
        for hk in hooks:
            hk.remove()
    a, nu = np.array(analytic), np.array(numeric)
    rel = np.abs(a - nu) / np.maximum(np.maximum(np.abs(a), np.abs(nu)), GRAD_FLOOR)
    ok = np.array([nm not in set(unresolved) for nm in names])
    k = int(np.argmax(np.where(ok, rel, -1.0)))
    return GradcheckReport(n, float(rel[k]), names[k], a, nu, np.array(steps), unresolved)
