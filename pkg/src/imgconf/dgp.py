"""Synthetic imagery and image-confounded treatment/outcome sampling.

Pixel level: every pixel is a unit and its confounder is the (standardized)
diagonal-kernel response of the image around it. Scene level: one unit per image,
the confounder is the normalized maximum of the pixel field over the image.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import expit

from .raster import DegenerateInputError, Raster, convolve_batch, global_normalize, make_diagonal_kernel

Level = Literal["pixel", "scene"]

# stream ids for per-replication sub-seeding; fixed so that streams never shift
STREAM_IMAGES = 0
STREAM_CONFOUNDER = 1
STREAM_SAMPLE = 2
STREAM_TRAIN = 3


@dataclass(frozen=True)
class DgpConfig:
    level: Level = "pixel"
    true_kernel_width: int = 8
    beta: float = 1.0
    gamma: float = 2.0
    tau: float = 1.0
    eps_scale: float = 0.1
    sigma_u: float = 0.0
    n_scenes: int = 4
    image_height: int = 32
    image_width: int = 32
    image_channels: int = 1
    image_correlation_length: float = 4.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.level not in ("pixel", "scene"):
            raise ValueError(f"level must be 'pixel' or 'scene', got {self.level!r}")
        for name in ("true_kernel_width", "n_scenes", "image_height", "image_width", "image_channels"):
            value = getattr(self, name)
            if isinstance(value, bool) or int(value) != value or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not self.eps_scale > 0:
            raise ValueError(f"eps_scale must be positive, got {self.eps_scale}")
        if not self.sigma_u >= 0:
            raise ValueError(f"sigma_u must be nonnegative, got {self.sigma_u}")
        if not self.image_correlation_length >= 0:
            raise ValueError("image_correlation_length must be nonnegative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class ConfoundedSample:
    """One replication's dataset.

    Units are ordered scene-major; at the pixel level unit ``(s, h, w)`` sits at
    flat index ``(s * H + h) * W + w``.
    """

    level: Level
    images: np.ndarray  # N x H x W x C
    u_pixel: np.ndarray  # N x H x W
    u_scene: np.ndarray | None
    true_propensity: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    marginal_propensity: np.ndarray | None = None
    covariates: np.ndarray | None = None

    def __post_init__(self) -> None:
        n = self.n_units
        for name in ("true_propensity", "treatment", "outcome"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        p = self.true_propensity
        if np.any(p <= 0) or np.any(p >= 1):
            raise ValueError("true propensities must lie strictly inside (0, 1)")
        if self.covariates is not None and len(self.covariates) != n:
            raise ValueError("covariates must have one row per unit")

    @property
    def n_units(self) -> int:
        n, h, w = self.u_pixel.shape
        return n * h * w if self.level == "pixel" else n

    @property
    def rasters(self) -> list[Raster]:
        return [Raster(img) for img in self.images]

    @property
    def u(self) -> np.ndarray:
        """Per-unit confounder."""
        return self.u_pixel.ravel() if self.level == "pixel" else self.u_scene

    def treatment_grid(self) -> np.ndarray:
        """Treatments shaped like the images (pixel) or one per scene."""
        return self.treatment.reshape(self.u_pixel.shape) if self.level == "pixel" else self.treatment


def replication_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    """Independent generator for (root seed, replication, stream).

    The replication index and stream id are appended to the root seed's spawn key,
    so replication r's draws do not depend on how many replications run.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index, stream)))


def _disk(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    disk = (yy**2 + xx**2 <= radius**2).astype(np.float64)
    return disk / disk.sum()


def synth_images(config: DgpConfig, rng: np.random.Generator) -> list[Raster]:
    """Spatially correlated Gaussian textures standing in for satellite scenes."""
    return [Raster(img) for img in synth_image_array(config, rng)]


def synth_image_array(config: DgpConfig, rng: np.random.Generator) -> np.ndarray:
    n, h, w, c = config.n_scenes, config.image_height, config.image_width, config.image_channels
    r = int(math.floor(config.image_correlation_length))
    noise = rng.standard_normal((n, h + 2 * r, w + 2 * r, c))
    if r > 0:
        kernel = _disk(config.image_correlation_length)[None, :, :, None]
        field = fftconvolve(noise, kernel, mode="valid", axes=(1, 2))
    else:
        field = noise
    field = field - field.mean()
    return field / field.std()


def _stack(rasters) -> np.ndarray:
    if isinstance(rasters, np.ndarray):
        arr = rasters if rasters.ndim == 4 else rasters[..., None]
    else:
        rasters = list(rasters)
        if not rasters:
            raise ValueError("need at least one raster")
        arr = np.stack([r.values if isinstance(r, Raster) else np.asarray(r) for r in rasters])
        if arr.ndim == 3:
            arr = arr[..., None]
    if arr.shape[0] == 0:
        raise ValueError("need at least one raster")
    return np.asarray(arr, dtype=np.float64)


def kernel_response(rasters, z_true: int) -> np.ndarray:
    """Batch-standardized diagonal-kernel response, N x H x W."""
    images = _stack(rasters)
    raw = convolve_batch(images.mean(axis=3), make_diagonal_kernel(z_true))
    sd = raw.std()
    if sd == 0:
        raise DegenerateInputError("kernel response is constant over the batch")
    return (raw - raw.mean()) / sd


def gen_confounder_pixel(rasters, z_true: int, sigma_u: float, rng: np.random.Generator) -> np.ndarray:
    """Pixel confounder: standardized kernel response plus optional N(0, sigma_u^2) noise."""
    u = kernel_response(rasters, z_true)
    if sigma_u < 0:
        raise ValueError("sigma_u must be nonnegative")
    noise = rng.standard_normal(u.shape)
    if sigma_u > 0:
        u = u + sigma_u * noise
    return u


def marginal_propensity(u: np.ndarray, beta: float, eps_scale: float, nodes: int = 40) -> np.ndarray:
    """E[logistic(beta * u + eps)] over eps ~ N(0, eps_scale^2), by Gauss-Hermite quadrature."""
    x, wts = np.polynomial.hermite_e.hermegauss(nodes)
    wts = wts / wts.sum()
    u = np.asarray(u, dtype=np.float64)
    return expit(beta * u[..., None] + eps_scale * x) @ wts


def _treat_and_outcome(u: np.ndarray, config: DgpConfig, rng: np.random.Generator):
    eps_w = config.eps_scale * rng.standard_normal(u.shape)
    propensity = expit(config.beta * u + eps_w)
    # logistic saturates to 1.0 in float64 beyond ~37; keep the Bernoulli parameter interior
    tiny = np.finfo(np.float64).eps
    propensity = np.clip(propensity, tiny, 1 - tiny)
    draws = rng.random(u.shape)
    treatment = (draws < propensity).astype(np.int64)
    eps_y = config.eps_scale * rng.standard_normal(u.shape)
    outcome = config.gamma * u + config.tau * treatment + eps_y
    return propensity, treatment, outcome


def sample_pixel_level(rasters, u_pixel: np.ndarray, config: DgpConfig, rng: np.random.Generator) -> ConfoundedSample:
    images = _stack(rasters)
    u_pixel = np.asarray(u_pixel, dtype=np.float64)
    if u_pixel.shape != images.shape[:3]:
        raise ValueError(f"u_pixel shape {u_pixel.shape} does not match rasters {images.shape[:3]}")
    u = u_pixel.ravel()
    propensity, treatment, outcome = _treat_and_outcome(u, config, rng)
    return ConfoundedSample(
        level="pixel",
        images=images,
        u_pixel=u_pixel,
        u_scene=None,
        true_propensity=propensity,
        treatment=treatment,
        outcome=outcome,
        marginal_propensity=marginal_propensity(u, config.beta, config.eps_scale),
    )


def scene_confounder(u_pixel: np.ndarray) -> np.ndarray:
    """GN(max over the full image) for each scene."""
    u_pixel = np.asarray(u_pixel, dtype=np.float64)
    if u_pixel.shape[0] < 2:
        raise ValueError("scene-level confounding needs at least two scenes")
    return global_normalize(u_pixel.reshape(u_pixel.shape[0], -1).max(axis=1))


def sample_scene_level(rasters, u_pixel: np.ndarray, config: DgpConfig, rng: np.random.Generator) -> ConfoundedSample:
    images = _stack(rasters)
    u_pixel = np.asarray(u_pixel, dtype=np.float64)
    if u_pixel.shape != images.shape[:3]:
        raise ValueError(f"u_pixel shape {u_pixel.shape} does not match rasters {images.shape[:3]}")
    u_scene = scene_confounder(u_pixel)
    propensity, treatment, outcome = _treat_and_outcome(u_scene, config, rng)
    return ConfoundedSample(
        level="scene",
        images=images,
        u_pixel=u_pixel,
        u_scene=u_scene,
        true_propensity=propensity,
        treatment=treatment,
        outcome=outcome,
        marginal_propensity=marginal_propensity(u_scene, config.beta, config.eps_scale),
    )


def simulate(config: DgpConfig, index: int = 0, images: np.ndarray | None = None) -> ConfoundedSample:
    """Full pipeline for replication ``index`` of ``config``.

    ``images`` lets callers share one corpus across several configurations.
    """
    if images is None:
        images = synth_image_array(config, replication_rng(config.seed, index, STREAM_IMAGES))
    u = gen_confounder_pixel(
        images, config.true_kernel_width, config.sigma_u, replication_rng(config.seed, index, STREAM_CONFOUNDER)
    )
    sampler = sample_pixel_level if config.level == "pixel" else sample_scene_level
    return sampler(images, u, config, replication_rng(config.seed, index, STREAM_SAMPLE))
