"""Synthetic flow fields with closed-form ground truth."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import PointSample
from .io import write_pointset

__all__ = [
    "GenSpec",
    "GENERATORS",
    "generate",
    "gen_sphere_flow",
    "gen_gaussian_field",
    "sphere_flow_velocity",
    "pressure_coefficient",
    "gaussian_bumps",
    "gaussian_field_value",
    "write_corpus",
    "SHELL_OUTER",
]

SHELL_OUTER = 3.0
BUMP_SIGMAS = (0.5, 0.1, 0.02)
BUMP_AMPLITUDES = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class GenSpec:
    generator: str = "sphere-flow"
    n: int = 2048
    seed: int = 0
    noise: float = 0.0
    speed: float = 1.0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; choose from {sorted(GENERATORS)}")
        if self.n < 8:
            raise ValueError(f"need at least 8 points, got {self.n}")
        if self.noise < 0:
            raise ValueError("noise std must be >= 0")
        if self.speed <= 0:
            raise ValueError("freestream speed must be > 0")

    @property
    def name(self) -> str:
        return f"{self.generator}-n{self.n}-s{self.seed}"


def _unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sphere_flow_velocity(points: np.ndarray, speed: float = 1.0) -> np.ndarray:
    """Potential flow past the unit sphere, freestream ``speed`` along +x.

    ``u = U e_x + (U / 2) grad(x / r^3)``, the gradient of the uniform-flow
    plus dipole potential.
    """
    p = np.asarray(points, dtype=np.float64)
    r = np.linalg.norm(p, axis=1, keepdims=True)
    x = p[:, :1]
    u = 0.5 * speed * (-3.0 * x * p / r**5)
    u[:, 0] += speed * (1.0 + 0.5 / r[:, 0] ** 3)
    return u


def pressure_coefficient(velocity: np.ndarray, speed: float = 1.0) -> np.ndarray:
    """Bernoulli: ``Cp = 1 - |u|^2 / U^2``."""
    return 1.0 - np.sum(np.asarray(velocity) ** 2, axis=1) / speed**2


def gen_sphere_flow(spec: GenSpec) -> PointSample:
    """Points in the shell 1 < r <= 3 plus n/8 on the unit sphere.

    Features: signed distance (r - 1, exactly 0 on the surface) and the
    outward unit normal of the sphere.  Targets: velocity (3 channels) and
    pressure coefficient (1 channel), defined everywhere because Bernoulli
    holds throughout potential flow.  Shell points come first, surface
    points last.
    """
    rng = np.random.default_rng(spec.seed)
    n_surface = spec.n // 8
    # uniform in volume: r^3 uniform on (1, 27]
    # u >= 1e-6 keeps r - 1 well above float32 resolution, so no shell
    # point can round onto the surface (sdf == 0 marks surface points)
    u = np.maximum(1.0 - rng.random(spec.n), 1e-6)
    r = np.cbrt(1.0 + u * (SHELL_OUTER**3 - 1.0))
    shell = _unit_vectors(rng, spec.n) * r[:, None]
    surface = _unit_vectors(rng, n_surface)
    pos = np.concatenate([shell, surface]).astype(np.float32)

    p64 = pos.astype(np.float64)
    radius = np.linalg.norm(p64, axis=1)
    normal = p64 / radius[:, None]
    sdf = radius - 1.0
    sdf[spec.n:] = 0.0
    vel = sphere_flow_velocity(p64, spec.speed)
    cp = pressure_coefficient(vel, spec.speed)
    targets = np.concatenate([vel, cp[:, None]], axis=1)
    if spec.noise > 0:
        targets = targets + rng.normal(scale=spec.noise, size=targets.shape)
    features = np.concatenate([sdf[:, None], normal], axis=1)
    return PointSample(pos, features.astype(np.float32), targets.astype(np.float32), spec.name)


def gaussian_bumps(spec: GenSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Centres, widths and amplitudes of the broad, mid and fine bumps."""
    rng = np.random.default_rng([spec.seed, 1])
    centers = rng.random((len(BUMP_SIGMAS), 3))
    return centers, np.array(BUMP_SIGMAS), np.array(BUMP_AMPLITUDES)


def gaussian_field_value(points: np.ndarray, centers: np.ndarray, sigmas: np.ndarray,
                         amplitudes: np.ndarray) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    d2 = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return (amplitudes * np.exp(-d2 / (2.0 * sigmas**2))).sum(axis=1)


def gen_gaussian_field(spec: GenSpec) -> PointSample:
    """Uniform points in the unit cube; target is a sum of three Gaussian bumps."""
    rng = np.random.default_rng(spec.seed)
    pos = rng.random((spec.n, 3)).astype(np.float32)
    centers, sigmas, amps = gaussian_bumps(spec)
    target = gaussian_field_value(pos, centers, sigmas, amps)
    if spec.noise > 0:
        target = target + rng.normal(scale=spec.noise, size=target.shape)
    return PointSample(pos, np.zeros((spec.n, 0), np.float32),
                       target[:, None].astype(np.float32), spec.name)


GENERATORS = {"sphere-flow": gen_sphere_flow, "gaussian-field": gen_gaussian_field}


def generate(spec: GenSpec) -> PointSample:
    return GENERATORS[spec.generator](spec)


def write_corpus(out_dir, generator: str, n: int, count: int, seed: int = 0,
                 noise: float = 0.0, speed: float = 1.0) -> Path:
    """Write ``count`` samples (seeds ``seed .. seed+count-1``) plus manifest.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(count):
        spec = GenSpec(generator, n, seed + i, noise, speed)
        sample = generate(spec)
        fname = f"sample_{i:05d}.mno"
        write_pointset(sample, out / fname)
        rows.append((fname, sample.n_points, generator, spec.seed))
    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "n_points", "generator", "seed"])
        w.writerows(rows)
    return manifest
