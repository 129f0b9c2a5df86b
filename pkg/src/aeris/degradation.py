"""Practical down-sampling degradation: blur, continuous-ratio resampling, AWGN.

Images are ``(H, W, 3)`` float arrays with intensities in ``[0, 1]``. Every
random operation takes an explicit :class:`numpy.random.Generator`.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy.signal import fftconvolve

KERNEL_KINDS = ("none", "isotropic", "anisotropic")
METHODS = ("nearest", "bilinear", "bicubic")
BICUBIC_A = -0.5

# instrumentation, read by training tests to prove clean mode never degrades
CALL_COUNTS: Counter = Counter()


@dataclass(frozen=True)
class BlurKernel:
    values: np.ndarray
    kind: str = "isotropic"

    @property
    def size(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "none"
    size: int = 1
    width_x: float = 0.0
    width_y: float = 0.0
    angle: float = 0.0

    def build(self) -> BlurKernel:
        if self.kind == "none":
            return identity_kernel()
        if self.kind == "isotropic":
            return make_isotropic_kernel(self.size, self.width_x)
        if self.kind == "anisotropic":
            return make_anisotropic_kernel(self.size, self.width_x, self.width_y, self.angle)
        raise ValueError(f"unknown kernel kind {self.kind!r}")


@dataclass(frozen=True)
class DegradationParams:
    """One sampled transformation ``t``: kernel, noise std, scale and resampler."""

    kernel: KernelSpec = field(default_factory=KernelSpec)
    sigma: float = 0.0
    scale: float = 1.0
    method: str = "bicubic"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DegradationParams":
        return cls(
            kernel=KernelSpec(**d["kernel"]),
            sigma=float(d["sigma"]),
            scale=float(d["scale"]),
            method=str(d["method"]),
        )


def _check_range(name, rng_pair, lo=None, hi=None):
    a, b = rng_pair
    if not (math.isfinite(a) and math.isfinite(b)) or a > b:
        raise ValueError(f"{name}: empty or invalid range {rng_pair}")
    if lo is not None and a < lo:
        raise ValueError(f"{name}: lower bound {a} below {lo}")
    if hi is not None and b > hi:
        raise ValueError(f"{name}: upper bound {b} above {hi}")


def _check_probs(name, probs):
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"{name}: probabilities {list(p)} must be non-negative and sum to 1")


@dataclass(frozen=True)
class DegradationConfig:
    """Sampling distributions for :class:`DegradationParams`.

    Defaults reproduce the general distribution: kernel kind uniform over
    none/isotropic/anisotropic, odd sizes 7..21, isotropic width U(0.1, 2.4),
    anisotropic long width U(0.5, 6) with the short width U(0.1, long),
    angle U(0, pi), sigma U(0, 25/255), scale U(1, 4), and a uniform choice
    of resampler.

    ``sigma_choices`` / ``scale_choices``, when set, replace the continuous
    ranges with a uniform draw from a finite set (used by the fixed-noise and
    fixed-ratio evaluation presets).
    """

    kind_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    kernel_sizes: tuple = (7, 9, 11, 13, 15, 17, 19, 21)
    iso_width: tuple = (0.1, 2.4)
    aniso_long_width: tuple = (0.5, 6.0)
    aniso_short_min: float = 0.1
    angle: tuple = (0.0, math.pi)
    sigma: tuple = (0.0, 25 / 255)
    sigma_choices: tuple | None = None
    scale: tuple = (1.0, 4.0)
    scale_choices: tuple | None = None
    methods: tuple = METHODS
    method_probs: tuple | None = None
    seed: int = 0

    def __post_init__(self):
        if len(self.kind_probs) != len(KERNEL_KINDS):
            raise ValueError("kind_probs needs one entry per kernel kind")
        _check_probs("kind_probs", self.kind_probs)
        if not self.kernel_sizes or any(k < 1 or k % 2 == 0 or k > 21 for k in self.kernel_sizes):
            raise ValueError(f"kernel_sizes must be odd integers in [1, 21], got {self.kernel_sizes}")
        _check_range("iso_width", self.iso_width, lo=0.0)
        _check_range("aniso_long_width", self.aniso_long_width, lo=0.0)
        if not 0 < self.aniso_short_min <= self.aniso_long_width[0]:
            raise ValueError("aniso_short_min must be in (0, min long width]")
        _check_range("angle", self.angle)
        _check_range("sigma", self.sigma, lo=0.0)
        if self.sigma_choices is not None and (not self.sigma_choices or min(self.sigma_choices) < 0):
            raise ValueError("sigma_choices must be a non-empty set of non-negative values")
        _check_range("scale", self.scale, lo=1.0, hi=4.0)
        if self.scale_choices is not None and (
            not self.scale_choices or min(self.scale_choices) < 1.0 or max(self.scale_choices) > 4.0
        ):
            raise ValueError("scale_choices must lie in [1, 4]")
        if not self.methods or any(m not in METHODS for m in self.methods):
            raise ValueError(f"methods must be drawn from {METHODS}")
        if self.method_probs is not None:
            if len(self.method_probs) != len(self.methods):
                raise ValueError("method_probs length must match methods")
            _check_probs("method_probs", self.method_probs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "DegradationConfig":
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)

    def with_(self, **changes) -> "DegradationConfig":
        return replace(self, **changes)


def identity_config(seed: int = 0) -> DegradationConfig:
    """A config whose every draw is the identity transformation."""
    return DegradationConfig(
        kind_probs=(1.0, 0.0, 0.0), sigma=(0.0, 0.0), scale=(1.0, 1.0), seed=seed
    )


def substream(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for ``(seed, index...)``; order-independent by construction."""
    return np.random.default_rng([int(seed), *map(int, index)])


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def identity_kernel() -> BlurKernel:
    return BlurKernel(np.ones((1, 1)), kind="none")


def _check_size(size):
    if int(size) != size or size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be a positive odd integer, got {size}")


def _grid(size):
    c = (size - 1) / 2
    r = np.arange(size, dtype=np.float64) - c
    return np.meshgrid(r, r, indexing="ij")


def make_isotropic_kernel(size: int, width: float) -> BlurKernel:
    _check_size(size)
    if not width > 0:
        raise ValueError(f"kernel width must be positive, got {width}")
    rows, cols = _grid(size)
    k = np.exp(-(rows**2 + cols**2) / (2.0 * width**2))
    return BlurKernel(k / k.sum(), kind="isotropic")


def make_anisotropic_kernel(size: int, width_long: float, width_short: float, angle: float) -> BlurKernel:
    """Rotated elliptical Gaussian with covariance ``R diag(wl^2, ws^2) R^T``.

    Offsets are measured as ``p = (row - c, col - c)``.
    """
    _check_size(size)
    if not (width_long > 0 and width_short > 0):
        raise ValueError(f"degenerate covariance: widths ({width_long}, {width_short}) must be positive")
    if width_short > width_long:
        raise ValueError("width_long must be >= width_short")
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    cov = rot @ np.diag([width_long**2, width_short**2]) @ rot.T
    inv = np.linalg.inv(cov)
    rows, cols = _grid(size)
    q = inv[0, 0] * rows**2 + 2.0 * inv[0, 1] * rows * cols + inv[1, 1] * cols**2
    k = np.exp(-0.5 * q)
    return BlurKernel(k / k.sum(), kind="anisotropic")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _uniform(rng, lo_hi):
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi))


def sample_degradation(config: DegradationConfig, rng: np.random.Generator) -> DegradationParams:
    kind = KERNEL_KINDS[rng.choice(len(KERNEL_KINDS), p=config.kind_probs)]
    size = int(rng.choice(config.kernel_sizes))
    if kind == "isotropic":
        w = _uniform(rng, config.iso_width)
        kernel = KernelSpec(kind, size, w, w, 0.0)
    elif kind == "anisotropic":
        wl = _uniform(rng, config.aniso_long_width)
        ws = float(rng.uniform(config.aniso_short_min, wl))
        theta = _uniform(rng, config.angle)
        kernel = KernelSpec(kind, size, wl, ws, theta)
    else:
        kernel = KernelSpec()

    if config.sigma_choices is not None:
        sigma = float(rng.choice(config.sigma_choices))
    else:
        sigma = _uniform(rng, config.sigma)
    if config.scale_choices is not None:
        scale = float(rng.choice(config.scale_choices))
    else:
        scale = _uniform(rng, config.scale)
    method = str(config.methods[rng.choice(len(config.methods), p=config.method_probs)])
    return DegradationParams(kernel=kernel, sigma=sigma, scale=scale, method=method)


# ---------------------------------------------------------------------------
# image operations
# ---------------------------------------------------------------------------


def _as_image(img):
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img


def apply_blur(img: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Per-channel 2-D convolution with reflect padding; output keeps the input size."""
    img = _as_image(img)
    k = np.asarray(kernel.values, dtype=np.float64)
    h, w = img.shape[:2]
    if k.shape[0] > 2 * min(h, w):
        raise ValueError(f"kernel of size {k.shape[0]} too large for a {h}x{w} image")
    if k.shape == (1, 1):
        return img * k[0, 0] if k[0, 0] != 1.0 else img.copy()
    p = k.shape[0] // 2
    padded = np.pad(img.astype(np.float64), ((p, p), (p, p), (0, 0)), mode="reflect")
    out = fftconvolve(padded, k[:, :, None], mode="valid", axes=(0, 1))
    return out.astype(img.dtype, copy=False)


def _cubic(x):
    a = BICUBIC_A
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1,
        (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def resample_matrix(n_in: int, n_out: int, scale: float, method: str) -> np.ndarray:
    """``(n_out, n_in)`` interpolation weights along one axis.

    Output pixel ``i`` reads source coordinate ``(i + 0.5) * scale - 0.5``;
    taps falling outside the image are clamped to the border.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if method == "nearest":
        idx = np.clip(np.floor(src + 0.5).astype(int), 0, n_in - 1)
        m[rows, idx] = 1.0
        return m
    base = np.floor(src)
    frac = src - base
    if method == "bilinear":
        taps, weights = (0, 1), (1.0 - frac, frac)
    elif method == "bicubic":
        taps = (-1, 0, 1, 2)
        weights = tuple(_cubic(frac - t) for t in taps)
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    for t, wt in zip(taps, weights):
        idx = np.clip(base.astype(int) + t, 0, n_in - 1)
        np.add.at(m, (rows, idx), wt)
    return m


def resize(img: np.ndarray, out_hw: tuple[int, int], method: str = "bicubic", scale=None) -> np.ndarray:
    """Resample to ``out_hw``.

    ``scale`` is the source-pixels-per-output-pixel ratio for both axes; by
    default it is ``in / out`` per axis.
    """
    img = _as_image(img)
    h, w = img.shape[:2]
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"output size must be positive, got {out_hw}")
    sy = h / oh if scale is None else scale
    sx = w / ow if scale is None else scale
    my = resample_matrix(h, oh, sy, method)
    mx = resample_matrix(w, ow, sx, method)
    out = np.einsum("ih,hwc,jw->ijc", my, img.astype(np.float64), mx, optimize=True)
    return out.astype(img.dtype, copy=False)


def downsampled_size(h: int, w: int, scale: float) -> tuple[int, int]:
    return max(1, int(math.floor(h / scale))), max(1, int(math.floor(w / scale)))


def resample_down(img: np.ndarray, scale: float, method: str) -> np.ndarray:
    if not scale >= 1.0:
        raise ValueError(f"down-sampling scale must be >= 1, got {scale}")
    img = _as_image(img)
    if method not in METHODS:
        raise ValueError(f"unknown resampling method {method!r}")
    return resize(img, downsampled_size(*img.shape[:2], scale), method, scale=scale)


def add_awgn(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if not sigma >= 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    img = _as_image(img)
    if sigma == 0:
        return np.clip(img, 0.0, 1.0)
    noisy = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(img.dtype, copy=False)


def apply_degradation(img: np.ndarray, params: DegradationParams, rng: np.random.Generator) -> np.ndarray:
    """``t(x)``: blur, then down-sample by ``params.scale``, then add noise."""
    CALL_COUNTS["apply_degradation"] += 1
    out = apply_blur(img, params.kernel.build())
    out = resample_down(out, params.scale, params.method)
    return add_awgn(out, params.sigma, rng)
