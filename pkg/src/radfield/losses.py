"""Training objective: weighted photometric, depth-PDF, and expected-depth
terms, plus discretization of Gaussian depth targets onto sample grids.

total = k_color * mean_r(L1(color)) + k_density * mean_r(conf_r * L1(pdf))
      + k_depth * mean_r(conf_r * |depth - mean|)

Color compares both network heads against the pixel; the PDF term compares
each head's depth PDF against the target Gaussian discretized on that head's
own grid; the expected-depth term applies to the fine head only. Rays without
depth supervision contribute only the color term. All terms are per-batch
means so the gains are batch-size independent.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .backend import kernels
from .errors import UsageError
from .geometry import grid_bin_edges

log = logging.getLogger(__name__)

# A Gaussian target whose in-range mass falls below this is unusable:
# the supervised depth lies outside the ray's bounds.
MIN_TARGET_MASS = 1e-12


@dataclass(frozen=True)
class DepthTarget:
    """Per-ray Gaussian depth supervision with a reliability weight."""

    mean: float
    sigma: float
    confidence: float = 1.0
    present: bool = True

    def __post_init__(self):
        if self.present and not self.sigma > 0.0:
            raise UsageError(f"sigma must be positive, got {self.sigma}")
        if not 0.0 <= self.confidence <= 1.0:
            raise UsageError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class LossGains:
    k_color: float = 1.0
    k_density: float = 1.0
    k_depth: float = 1.0

    def __post_init__(self):
        if min(self.k_color, self.k_density, self.k_depth) < 0.0:
            raise UsageError("loss gains must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    color_term: float
    density_term: float
    depth_term: float
    ray_count: int


def discretize_gaussian(target, grid):
    """Project a Gaussian depth target onto a grid's bins; None if out of range.

    Bin k receives Phi((b_{k+1}-mu)/sigma) - Phi((b_k-mu)/sigma) with edges b
    from sample midpoints extended to the ray bounds, then renormalizes to
    sum 1. Targets whose in-range mass is below 1e-12 are skipped (the caller
    counts and logs them).
    """
    if not target.present:
        raise UsageError("discretize_gaussian needs a present target")
    masses = kernels.gaussian_bin_masses(
        grid.bin_edges()[None, :],
        np.array([target.mean]),
        np.array([target.sigma]),
    )[0]
    total = masses.sum()
    if total < MIN_TARGET_MASS:
        log.debug(
            "depth target mean=%g sigma=%g outside [%g, %g]; supervision skipped",
            target.mean, target.sigma, grid.t_near, grid.t_far,
        )
        return None
    return masses / total


def discretize_gaussian_batch(t, t_near, t_far, means, sigmas):
    """Batched variant over sample matrices t (R, N).

    Returns (pdfs (R, N), ok (R,) bool); rows with ok=False hold zeros.
    """
    edges = grid_bin_edges(t, t_near, t_far)
    masses = kernels.gaussian_bin_masses(edges, means, sigmas)
    totals = masses.sum(axis=1)
    ok = totals >= MIN_TARGET_MASS
    pdfs = np.zeros_like(masses)
    if np.any(ok):
        pdfs[ok] = masses[ok] / totals[ok, None]
    return pdfs, ok


def loss_color(pred_coarse, pred_fine, target_rgb):
    """Sum of L1 color errors over both heads for one ray."""
    pred_coarse = np.asarray(pred_coarse, dtype=np.float64)
    pred_fine = np.asarray(pred_fine, dtype=np.float64)
    target_rgb = np.asarray(target_rgb, dtype=np.float64)
    return float(
        np.abs(pred_coarse - target_rgb).sum() + np.abs(pred_fine - target_rgb).sum()
    )


def loss_density(pdf_coarse, pdf_fine, target_coarse_pdf, target_fine_pdf):
    """Sum of elementwise L1 distances between predicted and target depth PDFs.

    Each PDF must share its grid with its target; the value is bounded by 4
    (two total-variation pairs).
    """
    pairs = ((pdf_coarse, target_coarse_pdf), (pdf_fine, target_fine_pdf))
    out = 0.0
    for pred, tgt in pairs:
        pred = np.asarray(pred, dtype=np.float64)
        tgt = np.asarray(tgt, dtype=np.float64)
        if pred.shape != tgt.shape:
            raise UsageError(f"PDF grids differ: {pred.shape} vs {tgt.shape}")
        if abs(pred.sum() - 1.0) > 1e-6 or abs(tgt.sum() - 1.0) > 1e-6:
            raise UsageError("density loss inputs must sum to 1 within 1e-6")
        out += float(np.abs(pred - tgt).sum())
    return out


def loss_depth(pred_depth, target):
    """Absolute error between expected depth and the target Gaussian's mean."""
    if not target.present:
        raise UsageError("loss_depth needs a present target")
    return abs(float(pred_depth) - target.mean)


@dataclass
class LossCotangents:
    """d(total)/d(prediction) arrays feeding composite_backward."""

    d_color_coarse: np.ndarray  # (R, 3)
    d_color_fine: np.ndarray  # (R, 3)
    d_pdf_coarse: np.ndarray  # (R, Nc)
    d_pdf_fine: np.ndarray  # (R, Nf)
    d_depth_fine: np.ndarray  # (R,)


def total_loss(preds, targets, gains):
    """Batched three-term objective. Returns (LossBreakdown, LossCotangents).

    preds: dict with color_coarse (R,3), color_fine (R,3), pdf_coarse (R,Nc),
    pdf_fine (R,Nf), depth_fine (R,).
    targets: dict with rgb (R,3), pdf_coarse (R,Nc), pdf_fine (R,Nf),
    depth_mean (R,), confidence (R,), supervised (R,) bool. Unsupervised rays
    contribute only the color term.
    """
    c_c, c_f = preds["color_coarse"], preds["color_fine"]
    p_c, p_f = preds["pdf_coarse"], preds["pdf_fine"]
    d_f = preds["depth_fine"]
    rgb = targets["rgb"]
    r = rgb.shape[0]
    if r == 0:
        raise UsageError("empty batch")
    if c_c.shape != (r, 3) or c_f.shape != (r, 3) or d_f.shape != (r,):
        raise UsageError("prediction shapes do not match the batch")

    ec, ef = c_c - rgb, c_f - rgb
    color_term = (np.abs(ec).sum() + np.abs(ef).sum()) / r

    sup = targets["supervised"].astype(np.float64) * targets["confidence"]
    ep_c = p_c - targets["pdf_coarse"]
    ep_f = p_f - targets["pdf_fine"]
    density_term = float(
        (sup * (np.abs(ep_c).sum(axis=1) + np.abs(ep_f).sum(axis=1))).sum() / r
    )
    ed = d_f - targets["depth_mean"]
    depth_term = float((sup * np.abs(ed)).sum() / r)

    gc, gd, gz = gains.k_color, gains.k_density, gains.k_depth
    total = gc * color_term + gd * density_term + gz * depth_term
    breakdown = LossBreakdown(
        total=float(total), color_term=float(color_term),
        density_term=density_term, depth_term=depth_term, ray_count=r,
    )
    cot = LossCotangents(
        d_color_coarse=(gc / r) * np.sign(ec),
        d_color_fine=(gc / r) * np.sign(ef),
        d_pdf_coarse=(gd / r) * sup[:, None] * np.sign(ep_c),
        d_pdf_fine=(gd / r) * sup[:, None] * np.sign(ep_f),
        d_depth_fine=(gz / r) * sup * np.sign(ed),
    )
    return breakdown, cot
