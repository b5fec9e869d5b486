"""Image-analysis workflow: partition a count image and estimate per cell.

Greedy mode selection seeds a Voronoi tessellation of the window; modes closer
than a link threshold merge into cells through the connected components of
their proximity graph.  Each cell is denoised (mode-selection residuals
subtracted), cropped to its positive support, assigned an even number of
components proportional to its mass, and estimated with the complex method of
moments followed by EM.  The per-cell estimates merge into one uniform
measure over all recovered atoms.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from .em import EmConfig, run_em
from .kernels import Kernel, UniformBoxKernel
from .measures import AtomicUniformMeasure
from .mm import RootRecoveryError, mm_complex
from .observation import BinGrid, CountImage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionConfig:
    """Settings for the partition-and-estimate workflow.

    mode_count is the number of greedy mode-selection iterations; the mode
    kernel is a uniform box with the given half widths; modes closer than
    link_threshold merge into one cell; k is the total component budget
    distributed over cells by mass.
    """

    mode_count: int
    k: int
    mode_half_widths: tuple = (180.0, 180.0)
    link_threshold: float = 270.0
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self):
        if self.mode_count < 1:
            raise ValueError("mode_count must be >= 1")
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.link_threshold <= 0:
            raise ValueError("link_threshold must be positive")


@dataclass
class CellResult:
    """Outcome of one partition cell."""

    cell_id: int
    mask: np.ndarray
    k_assigned: int
    estimate: AtomicUniformMeasure | None
    mass_ratio: float
    flags: list = field(default_factory=list)
    em_summary: dict | None = None


@dataclass
class PipelineResult:
    modes: np.ndarray
    residual: CountImage
    cells: list
    estimate: AtomicUniformMeasure | None


@dataclass
class ModeSelectionResult:
    modes: np.ndarray
    residual: CountImage
    exhausted: bool  # residual hit zero before the requested mode count


def mode_selection(image: CountImage, mode_kernel: Kernel, mode_count: int
                   ) -> ModeSelectionResult:
    """Greedy peak picking with blurred-spike subtraction.

    Each round places a mode at the anchor of the maximum-count bin (lowest
    row-major index on ties), scales the blurred unit spike so it matches the
    peak, subtracts, and clips at zero.  Stops early once the residual is
    exhausted.
    """
    if mode_count < 1:
        raise ValueError("mode_count must be >= 1")
    grid = image.grid
    anchors = grid.anchors()
    residual = image.counts.copy()
    modes = []
    exhausted = False
    # peak-normalized subtraction can leave ulp-scale crumbs at the peak bin
    zero_tol = 1e-12 * max(float(image.counts.max()), 1.0)
    for _ in range(mode_count):
        if residual.max() <= zero_tol:
            exhausted = True
            logger.warning(
                "mode selection stopped early after %d of %d modes", len(modes),
                mode_count,
            )
            break
        j = int(np.argmax(residual))
        theta = anchors[j]
        spike = mode_kernel.bin_integral_matrix(grid, theta[None, :])[:, 0]
        peak = spike.max()
        if peak <= 0:
            exhausted = True
            break
        residual = np.maximum(residual - (residual[j] / peak) * spike, 0.0)
        modes.append(theta)
    residual_image = CountImage(grid, residual, np.inf)
    return ModeSelectionResult(np.array(modes), residual_image, exhausted)


def partition(modes: np.ndarray, grid: BinGrid, link_threshold: float) -> list:
    """Voronoi cells of the modes, merged over the proximity graph.

    Returns boolean masks over the grid's bins (row-major); the masks are
    disjoint and cover every bin.
    """
    modes = np.atleast_2d(np.asarray(modes, float))
    if modes.shape[0] < 1:
        raise ValueError("at least one mode required")
    anchors = grid.anchors()
    owner = np.argmin(cdist(anchors, modes), axis=1)
    dist = cdist(modes, modes)
    adjacency = csr_matrix((dist < link_threshold).astype(np.int8))
    n_comp, labels = connected_components(adjacency, directed=False)
    masks = []
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        masks.append(np.isin(owner, members))
    return masks


def denoise_and_crop(image: CountImage, residual: CountImage,
                     mask: np.ndarray) -> CountImage | None:
    """Residual-subtracted counts on the mask, cropped to the positive support.

    Returns None when the cell carries no positive count after denoising.
    """
    if residual.counts.shape != image.counts.shape:
        raise ValueError("residual must align with the image")
    den = np.maximum(image.counts - residual.counts, 0.0) * mask
    grid = image.grid
    if grid.dimension != 2:
        raise ValueError("the pipeline operates on planar images")
    n_x, n_y = grid.resolution
    den2d = den.reshape(n_y, n_x)
    rows = np.flatnonzero(den2d.any(axis=1))
    cols = np.flatnonzero(den2d.any(axis=0))
    if rows.size == 0:
        return None
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    widths = grid.bin_widths
    lo = grid.window_lo + np.array([c0 * widths[0], r0 * widths[1]])
    hi = grid.window_lo + np.array([c1 * widths[0], r1 * widths[1]])
    sub = BinGrid(lo, hi, (c1 - c0, r1 - r0), grid.anchor)
    counts = den2d[r0:r1, c0:c1].ravel()
    if np.isfinite(image.t):
        counts = np.round(counts)  # denoised counts stay integer at finite t
    return CountImage(sub, counts, image.t)


def even_round(x: float) -> int:
    """Nearest even integer to x, rounding halves of x/2 up: 2 * floor(x/2 + 0.5)."""
    return 2 * int(np.floor(x / 2.0 + 0.5))


def allocate_components(masks: list, denoised: CountImage, k: int) -> list:
    """Even per-cell component counts proportional to denoised cell mass."""
    if k < 2:
        raise ValueError("k must be >= 2")
    masses = np.array([float(denoised.counts[m].sum()) for m in masks])
    total = masses.sum()
    if total <= 0:
        return [0 for _ in masks]
    return [even_round(mass / total * k) for mass in masses]


def run_pipeline(image: CountImage, kernel: Kernel, config: PartitionConfig,
                 seed: int = 0) -> PipelineResult:
    """Full workflow: modes, partition, denoise, allocate, estimate, merge.

    Per-cell estimation failures are isolated: the cell is flagged and the
    remaining cells still contribute to the merged measure.
    """
    mode_kernel = UniformBoxKernel(config.mode_half_widths)
    selection = mode_selection(image, mode_kernel, config.mode_count)
    if selection.modes.shape[0] == 0:
        return PipelineResult(selection.modes, selection.residual, [], None)
    masks = partition(selection.modes, image.grid, config.link_threshold)
    den = np.maximum(image.counts - selection.residual.counts, 0.0)
    if np.isfinite(image.t):
        den = np.round(den)
    denoised_full = CountImage(image.grid, den, image.t)
    k_per_cell = allocate_components(masks, denoised_full, config.k)
    cells = []
    atoms = []
    for cid, (mask, k_p) in enumerate(zip(masks, k_per_cell)):
        mass_ratio = (
            float(denoised_full.counts[mask].sum()) / denoised_full.counts.sum()
            if denoised_full.counts.sum() > 0
            else 0.0
        )
        result = CellResult(cid, mask, k_p, None, mass_ratio)
        if k_p == 0:
            result.flags.append("no_components")
            cells.append(result)
            continue
        sub = denoise_and_crop(image, selection.residual, mask)
        if sub is None:
            result.flags.append("empty_after_denoise")
            cells.append(result)
            continue
        try:
            init = mm_complex(sub, kernel, k_p)
            estimate, trace = run_em(sub, kernel, init, config.em)
            result.estimate = estimate
            result.em_summary = {
                "iterations": trace.iterations,
                "final_loglik": trace.loglik[-1] if trace.loglik else None,
                "monotone": trace.monotone(),
                "collision": trace.collision,
            }
            atoms.append(estimate.atoms)
        except (RootRecoveryError, ValueError) as exc:
            result.flags.append(f"estimation_failed: {exc}")
            logger.warning("cell %d failed: %s", cid, exc)
        cells.append(result)
    merged = (
        AtomicUniformMeasure(np.vstack(atoms)) if atoms else None
    )
    return PipelineResult(selection.modes, selection.residual, cells, merged)
