"""Differentiable volume-rendering quadrature along sample grids.

Per ray with samples t_k, widths d_k, densities tau_k and colors c_k:

    T_k   = exp(-sum_{k'<k} tau_k' d_k')      survival up to sample k
    w_k   = T_k (1 - exp(-tau_k d_k))         termination mass in bin k
    C     = sum_k w_k c_k                     composited color
    pdf   = normalize(w)                      depth PDF along the ray
    depth = sum_k pdf_k t_k                   expected termination depth

The PDF normalization is exact (w / sum w) whenever the total mass exceeds
1e-6; below that it blends linearly toward the uniform PDF so gradients stay
bounded from step zero, and an all-zero ray yields exactly the uniform PDF.
composite_backward is the exact reverse-mode of all of the above.
"""

from dataclasses import dataclass

import numpy as np

from .backend import kernels
from .errors import UsageError


@dataclass(frozen=True)
class RenderResult:
    color: np.ndarray  # (3,)
    weights: np.ndarray  # (N,)
    transmittance: np.ndarray  # (N,), T_0 = 1, non-increasing
    depth: float
    depth_pdf: np.ndarray  # (N,), sums to 1


class CompositeCache:
    __slots__ = ("t", "deltas", "tau", "rgb", "w", "trans_next", "pdf", "wsum")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def composite_batch(t, deltas, tau, rgb):
    """Batched compositing. t/deltas/tau: (R, N); rgb: (R, N, 3).

    Returns (color (R,3), depth (R,), weights (R,N), trans (R,N), pdf (R,N),
    cache).
    """
    t = np.ascontiguousarray(t, dtype=np.float64)
    deltas = np.ascontiguousarray(deltas, dtype=np.float64)
    tau = np.ascontiguousarray(tau, dtype=np.float64)
    rgb = np.ascontiguousarray(rgb, dtype=np.float64)
    if not (t.shape == deltas.shape == tau.shape and rgb.shape == t.shape + (3,)):
        raise UsageError(
            f"misaligned composite inputs: t{t.shape} tau{tau.shape} rgb{rgb.shape}"
        )
    color, depth, w, trans, trans_next, pdf, wsum = kernels.composite_fwd(
        t, deltas, tau, rgb
    )
    cache = CompositeCache(
        t=t, deltas=deltas, tau=tau, rgb=rgb, w=w, trans_next=trans_next,
        pdf=pdf, wsum=wsum,
    )
    return color, depth, w, trans, pdf, cache


def composite_backward_batch(cache, d_color, d_depth, d_pdf):
    """Batched exact VJP of composite_batch. Returns (d_rgb (R,N,3), d_tau (R,N))."""
    r, n = cache.w.shape
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    d_depth = np.ascontiguousarray(d_depth, dtype=np.float64)
    d_pdf = np.ascontiguousarray(d_pdf, dtype=np.float64)
    if d_color.shape != (r, 3) or d_depth.shape != (r,) or d_pdf.shape != (r, n):
        raise UsageError("cotangent shapes do not match the cached composite")
    return kernels.composite_bwd(
        cache.t, cache.deltas, cache.w, cache.trans_next, cache.pdf, cache.wsum,
        cache.rgb, d_color, d_depth, d_pdf,
    )


def composite(grid, colors, densities):
    """Single-ray compositing over a SampleGrid.

    colors: (N, 3) per-sample emitted colors; densities: (N,) non-negative.
    Returns (RenderResult, cache).
    """
    colors = np.asarray(colors, dtype=np.float64)
    densities = np.asarray(densities, dtype=np.float64)
    if colors.shape != (len(grid), 3) or densities.shape != (len(grid),):
        raise UsageError(
            f"samples misaligned with grid of {len(grid)}: "
            f"colors {colors.shape}, densities {densities.shape}"
        )
    color, depth, w, trans, pdf, cache = composite_batch(
        grid.t[None, :], grid.deltas[None, :], densities[None, :], colors[None, :, :]
    )
    result = RenderResult(
        color=color[0], weights=w[0], transmittance=trans[0],
        depth=float(depth[0]), depth_pdf=pdf[0],
    )
    return result, cache


def composite_backward(cache, d_color, d_depth, d_pdf):
    """Single-ray VJP: cotangents for (color, depth, depth_pdf) back to samples.

    Returns (d_colors (N, 3), d_densities (N,)).
    """
    d_rgb, d_tau = composite_backward_batch(
        cache,
        np.asarray(d_color, dtype=np.float64)[None, :],
        np.array([float(d_depth)]),
        np.asarray(d_pdf, dtype=np.float64)[None, :],
    )
    return d_rgb[0], d_tau[0]


def reference_quadrature(density_fn, color_fn, ray, n_dense):
    """Dense Riemann-sum oracle for the continuous transport integral.

    density_fn(points (M,3)) -> (M,), color_fn(points (M,3)) -> (M,3); both
    analytic scene functions. Used in tests and synthetic ground truth only.
    Returns (color (3,), expected termination depth). A vacuum ray reports the
    mid-range depth, mirroring the renderer's uniform-PDF fallback.
    """
    if n_dense < 10_000:
        raise UsageError(f"reference quadrature needs n_dense >= 1e4, got {n_dense}")
    h = (ray.t_far - ray.t_near) / n_dense
    mid = ray.t_near + (np.arange(n_dense) + 0.5) * h
    points = ray.origin[None, :] + mid[:, None] * ray.direction[None, :]
    sigma = np.asarray(density_fn(points), dtype=np.float64)
    rgb = np.asarray(color_fn(points), dtype=np.float64)
    a = sigma * h
    acc = np.cumsum(a)
    mass = np.exp(a - acc) * -np.expm1(-a)
    color = mass @ rgb
    total = mass.sum()
    if total > 1e-12:
        depth = float((mass * mid).sum() / total)
    else:
        depth = 0.5 * (ray.t_near + ray.t_far)
    return color, depth
