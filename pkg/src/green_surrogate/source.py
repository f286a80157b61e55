"""Mollified point sources, network input channels, and training datasets.

A point source at xi is represented by the normalized Gaussian

    rho_xi(x) = exp(-|x - xi|^2 / (2 sigma^2)) / (2 pi sigma^2)

with sigma tied to the mesh (sigma_factor * max(h1, h2)), wide enough for
the five-point stencil to resolve. Source locations are drawn uniformly on
the domain shrunk by margin_cells grid cells on every side, each sample
from its own RNG substream (seed, index) so the draw order never matters.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import Field, Grid, RectDomain, atomic_write_bytes, build_grid, read_field, write_field
from .operator import CoefficientSpec, DirectFactorization, build_stencil, jacobi_solve

DATASET_FORMAT = "green-surrogate-dataset-v1"
INPUT_VARIANTS = (1, 2, 3)


@dataclass(frozen=True)
class SourceConfig:
    """How point sources are mollified and where they may sit."""

    sigma_factor: float = 2.0
    margin_cells: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.sigma_factor <= 0:
            raise ValueError(f"sigma_factor must be positive, got {self.sigma_factor}")
        if self.margin_cells < 0:
            raise ValueError(f"margin_cells must be >= 0, got {self.margin_cells}")

    def sigma(self, grid: Grid) -> float:
        return self.sigma_factor * max(grid.h1, grid.h2)


def gaussian_source(grid: Grid, xi: tuple[float, float], sigma: float) -> Field:
    """Normalized 2D Gaussian centered at xi, sampled on the grid."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if not (np.isfinite(xi[0]) and np.isfinite(xi[1])):
        raise ValueError(f"source location must be finite, got {xi}")
    X1, X2 = grid.mesh()
    r2 = (X1 - xi[0]) ** 2 + (X2 - xi[1]) ** 2
    return Field(grid, np.exp(-r2 / (2 * sigma**2)) / (2 * np.pi * sigma**2))


def distance_field(grid: Grid, xi: tuple[float, float]) -> Field:
    """Distance to xi, min-max normalized to [0, 1] over the grid."""
    X1, X2 = grid.mesh()
    d = np.sqrt((X1 - xi[0]) ** 2 + (X2 - xi[1]) ** 2)
    lo, hi = d.min(), d.max()
    if hi - lo <= 0:
        raise ValueError("degenerate distance field")
    return Field(grid, (d - lo) / (hi - lo))


def build_input(grid: Grid, xi: tuple[float, float], variant: int, cfg: SourceConfig) -> np.ndarray:
    """Stack the network input channels for one source, shape (n, m, C).

    variant 1: [rho]           the mollified source alone
    variant 2: [R, rho]        plus the normalized distance-to-source map
    variant 3: [X1, X2, rho]   plus raw node coordinates
    """
    rho = gaussian_source(grid, xi, cfg.sigma(grid)).values
    if variant == 1:
        chans = [rho]
    elif variant == 2:
        chans = [distance_field(grid, xi).values, rho]
    elif variant == 3:
        X1, X2 = grid.mesh()
        chans = [X1, X2, rho]
    else:
        raise ValueError(f"unknown input variant {variant}, expected one of {INPUT_VARIANTS}")
    return np.stack(chans, axis=-1)


def input_channels(variant: int) -> int:
    if variant not in INPUT_VARIANTS:
        raise ValueError(f"unknown input variant {variant}, expected one of {INPUT_VARIANTS}")
    return {1: 1, 2: 2, 3: 3}[variant]


def sampling_rect(grid: Grid, cfg: SourceConfig) -> RectDomain:
    """The margin-shrunk rectangle sources are drawn from."""
    d = grid.domain
    dx = cfg.margin_cells * grid.h1
    dy = cfg.margin_cells * grid.h2
    L1 = d.L1 - 2 * dx
    L2 = d.L2 - 2 * dy
    if L1 <= 0 or L2 <= 0:
        raise ValueError(
            f"margin_cells={cfg.margin_cells} leaves no room for sources on a "
            f"{grid.n}x{grid.m} grid"
        )
    return RectDomain(d.x0 + dx, d.y0 + dy, L1, L2)


def sample_sources(grid: Grid, count: int, cfg: SourceConfig) -> np.ndarray:
    """Draw count source locations, shape (count, 2).

    Sample i comes from RNG stream (seed, i), so any subset of samples can
    be regenerated independently and concurrency cannot reorder draws.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    rect = sampling_rect(grid, cfg)
    out = np.empty((count, 2))
    for i in range(count):
        rng = np.random.default_rng((cfg.seed, i))
        out[i, 0] = rect.x0 + rect.L1 * rng.uniform()
        out[i, 1] = rect.y0 + rect.L2 * rng.uniform()
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class SourceSample:
    xi: tuple[float, float]
    rho: Field
    reference: Field | None = None


@dataclass
class Dataset:
    grid: Grid
    variant: int
    config: SourceConfig
    coeffs_name: str | None
    samples: list[SourceSample]

    def __len__(self):
        return len(self.samples)

    def input_array(self) -> np.ndarray:
        """All network inputs stacked, shape (B, n, m, C)."""
        return np.stack([build_input(self.grid, s.xi, self.variant, self.config)
                         for s in self.samples])

    def rho_array(self) -> np.ndarray:
        return np.stack([s.rho.values for s in self.samples])

    def reference_array(self) -> np.ndarray:
        if any(s.reference is None for s in self.samples):
            raise ValueError("dataset has samples without reference fields")
        return np.stack([s.reference.values for s in self.samples])

    def has_references(self) -> bool:
        return len(self.samples) > 0 and all(s.reference is not None for s in self.samples)


def build_dataset(
    grid: Grid,
    coeffs: CoefficientSpec,
    count: int,
    cfg: SourceConfig,
    variant: int = 1,
    with_references: bool = False,
    ref_solver: str = "jacobi",
    ref_tol: float = 1e-10,
    ref_max_iter: int = 1_000_000,
) -> Dataset:
    """Sample sources and materialize their mollified fields, optionally with
    converged solutions of L_h G = rho as reference fields."""
    input_channels(variant)
    sigma = cfg.sigma(grid)
    xis = sample_sources(grid, count, cfg)

    fac = None
    stencil = None
    if with_references:
        stencil = build_stencil(grid, coeffs)
        if ref_solver == "direct":
            fac = DirectFactorization(stencil)
        elif ref_solver != "jacobi":
            raise ValueError(f"unknown ref_solver {ref_solver!r}, expected jacobi or direct")

    samples = []
    for xi in xis:
        xi = (float(xi[0]), float(xi[1]))
        rho = gaussian_source(grid, xi, sigma)
        ref = None
        if with_references:
            if fac is not None:
                ref = fac.solve(rho)
            else:
                res = jacobi_solve(stencil, rho, tol=ref_tol, max_iter=ref_max_iter)
                if not res.converged:
                    raise RuntimeError(
                        f"reference solve for xi={xi} stalled at residual {res.residual:.3e}"
                    )
                ref = res.field
        samples.append(SourceSample(xi, rho, ref))
    return Dataset(grid, variant, cfg, coeffs.name, samples)


def save_dataset(dirpath: str | os.PathLike, ds: Dataset) -> None:
    """Write manifest.json plus one rho_<idx>.fgf (and ref_<idx>.fgf when
    present) per sample into dirpath."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, s in enumerate(ds.samples):
        rho_name = f"rho_{idx:04d}.fgf"
        write_field(d / rho_name, s.rho)
        ref_name = None
        if s.reference is not None:
            ref_name = f"ref_{idx:04d}.fgf"
            write_field(d / ref_name, s.reference)
        entries.append({"xi": [s.xi[0], s.xi[1]], "rho": rho_name, "ref": ref_name})
    g = ds.grid
    manifest = {
        "format": DATASET_FORMAT,
        "grid": {"x0": g.domain.x0, "y0": g.domain.y0, "L1": g.domain.L1,
                 "L2": g.domain.L2, "n": g.n, "m": g.m},
        "variant": ds.variant,
        "source": {"sigma_factor": ds.config.sigma_factor,
                   "margin_cells": ds.config.margin_cells, "seed": ds.config.seed},
        "coeffs": ds.coeffs_name,
        "samples": entries,
    }
    atomic_write_bytes(d / "manifest.json", json.dumps(manifest, indent=2).encode())


def load_dataset(dirpath: str | os.PathLike) -> Dataset:
    d = Path(dirpath)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise ValueError(f"{d} has no manifest.json, not a dataset directory") from None
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{d}: unrecognized dataset format {manifest.get('format')!r}")
    gspec = manifest["grid"]
    grid = build_grid(RectDomain(gspec["x0"], gspec["y0"], gspec["L1"], gspec["L2"]),
                      gspec["n"], gspec["m"])
    src = manifest["source"]
    cfg = SourceConfig(src["sigma_factor"], src["margin_cells"], src["seed"])
    samples = []
    for entry in manifest["samples"]:
        rho = read_field(d / entry["rho"])
        if rho.grid != grid:
            raise ValueError(f"{entry['rho']}: grid does not match manifest")
        ref = None
        if entry.get("ref"):
            ref = read_field(d / entry["ref"])
            if ref.grid != grid:
                raise ValueError(f"{entry['ref']}: grid does not match manifest")
        samples.append(SourceSample((entry["xi"][0], entry["xi"][1]), rho, ref))
    return Dataset(grid, manifest["variant"], cfg, manifest.get("coeffs"), samples)
