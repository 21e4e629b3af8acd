"""Batched render/loss/gradient chain shared by training, evaluation, and the
gradient checks.

Everything here is a pure function of (parameters, rays, random draws), so
chunks of a batch may be evaluated concurrently against one immutable
parameter snapshot; gradients are reduced in chunk-index order, which keeps
results deterministic for a fixed chunking regardless of the worker count.
Fine-sample placement is importance-resampled from the coarse weights but is
treated as a constant by the backward pass (placement is a stochastic input,
not a differentiated quantity).
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .backend import kernels
from .field import field_backward_batch, field_forward_batch
from .geometry import grid_bin_edges, stratified_fill
from .losses import discretize_gaussian_batch, total_loss
from .renderer import composite_backward_batch, composite_batch

_CHUNK = 1024  # rays per worker task


@dataclass
class RayBatch:
    """Flat per-ray arrays: geometry plus supervision."""

    origins: np.ndarray  # (R, 3)
    dirs: np.ndarray  # (R, 3) unit
    t_near: float
    t_far: float
    rgb: np.ndarray  # (R, 3) target pixel colors
    depth_mean: np.ndarray = None  # (R,)
    depth_sigma: np.ndarray = None  # (R,)
    confidence: np.ndarray = None  # (R,)
    supervised: np.ndarray = None  # (R,) bool

    def __post_init__(self):
        r = self.origins.shape[0]
        if self.depth_mean is None:
            self.depth_mean = np.zeros(r)
            self.depth_sigma = np.ones(r)
            self.confidence = np.zeros(r)
            self.supervised = np.zeros(r, dtype=bool)

    def __len__(self):
        return self.origins.shape[0]

    def slice(self, lo, hi):
        return RayBatch(
            origins=self.origins[lo:hi], dirs=self.dirs[lo:hi],
            t_near=self.t_near, t_far=self.t_far, rgb=self.rgb[lo:hi],
            depth_mean=self.depth_mean[lo:hi], depth_sigma=self.depth_sigma[lo:hi],
            confidence=self.confidence[lo:hi], supervised=self.supervised[lo:hi],
        )


def _grid_deltas(t, t_far):
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.diff(t, axis=1)
    deltas[:, -1] = t_far - t[:, -1]
    np.maximum(deltas[:, -1], np.finfo(np.float64).tiny, out=deltas[:, -1])
    return deltas


def resample_batch(t_coarse, t_near, t_far, weights, draws):
    """Batched inverse-CDF resampling merged with the coarse grid.

    Rows with all-zero weights fall back to stratified placement. Returns the
    merged, strictly increasing (R, Nc + Nf) distance matrix.
    """
    fine = np.empty_like(draws)
    totals = weights.sum(axis=1)
    pos = totals > 0.0
    if np.any(pos):
        edges = grid_bin_edges(t_coarse[pos], t_near, t_far)
        fine[pos] = kernels.sample_pdf(edges, weights[pos], draws[pos])
    if not np.all(pos):
        fine[~pos] = stratified_fill(t_near, t_far, draws[~pos])
    merged = np.sort(np.concatenate([t_coarse, fine], axis=1), axis=1)
    for j in range(1, merged.shape[1]):  # exact ties have measure zero; be safe
        dup = merged[:, j] <= merged[:, j - 1]
        if np.any(dup):
            merged[dup, j] = np.nextafter(merged[dup, j - 1], np.inf)
    return merged


def _encode_inputs(cfg, origins, dirs, t):
    r, n = t.shape
    points = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    enc_pos = kernels.positional_encoding(
        (cfg.pos_scale * points).reshape(r * n, 3), cfg.l_pos
    )
    enc_dir = np.repeat(
        kernels.positional_encoding(dirs, cfg.l_dir), n, axis=0
    )
    return enc_pos, enc_dir


def _eval_head(params, batch, t, ray_ids=None):
    """Field + composite over one grid matrix. Returns preds dict + caches."""
    r, n = t.shape
    deltas = _grid_deltas(t, batch.t_far)
    enc_pos, enc_dir = _encode_inputs(params.config, batch.origins, batch.dirs, t)
    rgb_flat, tau_flat, f_cache = field_forward_batch(
        params, enc_pos, enc_dir, ray_ids=ray_ids
    )
    rgb = rgb_flat.reshape(r, n, 3)
    tau = tau_flat.reshape(r, n)
    color, depth, w, trans, pdf, c_cache = composite_batch(t, deltas, tau, rgb)
    return {
        "color": color, "depth": depth, "weights": w, "trans": trans, "pdf": pdf,
        "field_cache": f_cache, "composite_cache": c_cache, "t": t,
    }


def forward_from_grids(params_c, params_f, batch, t_coarse, t_fine, gains):
    """Loss forward pass with sample placement held fixed.

    Returns (LossBreakdown, cotangents, head dicts, aux). aux counts depth
    targets skipped because their Gaussian falls outside the ray bounds.
    """
    head_c = _eval_head(params_c, batch, t_coarse)
    head_f = _eval_head(params_f, batch, t_fine)
    pdf_c_target, ok_c = discretize_gaussian_batch(
        t_coarse, batch.t_near, batch.t_far, batch.depth_mean, batch.depth_sigma
    )
    pdf_f_target, ok_f = discretize_gaussian_batch(
        t_fine, batch.t_near, batch.t_far, batch.depth_mean, batch.depth_sigma
    )
    usable = batch.supervised & ok_c & ok_f
    skipped = int(np.count_nonzero(batch.supervised & ~usable))
    preds = {
        "color_coarse": head_c["color"], "color_fine": head_f["color"],
        "pdf_coarse": head_c["pdf"], "pdf_fine": head_f["pdf"],
        "depth_fine": head_f["depth"],
    }
    targets = {
        "rgb": batch.rgb, "pdf_coarse": pdf_c_target, "pdf_fine": pdf_f_target,
        "depth_mean": batch.depth_mean, "confidence": batch.confidence,
        "supervised": usable,
    }
    breakdown, cot = total_loss(preds, targets, gains)
    return breakdown, cot, head_c, head_f, {"skipped_targets": skipped}


def grads_from_forward(cot, head_c, head_f):
    """Chain cotangents through both composites and both networks."""
    r = cot.d_depth_fine.shape[0]
    d_rgb_f, d_tau_f = composite_backward_batch(
        head_f["composite_cache"], cot.d_color_fine, cot.d_depth_fine, cot.d_pdf_fine
    )
    grads_f, _, _ = field_backward_batch(
        head_f["field_cache"], d_rgb_f.reshape(-1, 3), d_tau_f.reshape(-1)
    )
    d_rgb_c, d_tau_c = composite_backward_batch(
        head_c["composite_cache"], cot.d_color_coarse, np.zeros(r), cot.d_pdf_coarse
    )
    grads_c, _, _ = field_backward_batch(
        head_c["field_cache"], d_rgb_c.reshape(-1, 3), d_tau_c.reshape(-1)
    )
    return grads_c, grads_f


def make_training_grids(batch, n_coarse, n_fine, params_c, rng):
    """Stratified coarse grids, then importance-resampled fine grids.

    Consumes the rng in a fixed order; the coarse head is evaluated once to
    obtain resampling weights (its cache is discarded: the training forward
    re-evaluates, keeping placement and differentiation cleanly separated).
    """
    r = len(batch)
    draws_c = rng.random((r, n_coarse))
    t_coarse = stratified_fill(batch.t_near, batch.t_far, draws_c)
    head_c = _eval_head(params_c, batch, t_coarse)
    draws_f = rng.random((r, n_fine))
    t_fine = resample_batch(
        t_coarse, batch.t_near, batch.t_far, head_c["weights"], draws_f
    )
    return t_coarse, t_fine


def _deterministic_grids(batch, params_c, n_coarse, n_fine):
    r = len(batch)
    t_coarse = stratified_fill(
        batch.t_near, batch.t_far, np.full((r, n_coarse), 0.5)
    )
    head_c = _eval_head(params_c, batch, t_coarse)
    draws = np.broadcast_to(
        (np.arange(n_fine) + 0.5) / n_fine, (r, n_fine)
    ).copy()
    t_fine = resample_batch(
        t_coarse, batch.t_near, batch.t_far, head_c["weights"], draws
    )
    return t_coarse, t_fine, head_c


def loss_and_grads(params_c, params_f, batch, gains, n_coarse, n_fine, rng,
                   threads=1):
    """One training step's forward+backward over a ray batch.

    Returns (LossBreakdown, grads_c, grads_f, aux). Random draws are taken
    from rng up front so the result does not depend on the worker count.
    """
    t_coarse, t_fine = make_training_grids(batch, n_coarse, n_fine, params_c, rng)

    def run(lo, hi):
        sub = batch.slice(lo, hi)
        breakdown, cot, head_c, head_f, aux = forward_from_grids(
            params_c, params_f, sub, t_coarse[lo:hi], t_fine[lo:hi], gains
        )
        grads_c, grads_f = grads_from_forward(cot, head_c, head_f)
        return breakdown, grads_c, grads_f, aux

    spans = _spans(len(batch), threads)
    if len(spans) == 1:
        return _merge_chunks([run(*spans[0])], [len(batch)])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda s: run(*s), spans))
    return _merge_chunks(parts, [hi - lo for lo, hi in spans])


def _spans(n, threads):
    if threads <= 1 or n <= _CHUNK:
        return [(0, n)]
    size = max(1, min(_CHUNK, (n + threads - 1) // threads))
    return [(lo, min(lo + size, n)) for lo in range(0, n, size)]


def _merge_chunks(parts, sizes):
    """Size-weighted reduction of per-chunk means, in chunk-index order."""
    from .losses import LossBreakdown

    total_rays = sum(sizes)
    if len(parts) == 1:
        breakdown, grads_c, grads_f, aux = parts[0]
        return breakdown, grads_c, grads_f, aux
    acc = np.zeros(4)
    grads_c = grads_f = None
    skipped = 0
    for (breakdown, gc, gf, aux), n in zip(parts, sizes):
        frac = n / total_rays
        acc += frac * np.array(
            [breakdown.total, breakdown.color_term, breakdown.density_term,
             breakdown.depth_term]
        )
        skipped += aux["skipped_targets"]
        if grads_c is None:
            grads_c = {k: v * frac for k, v in gc.items()}
            grads_f = {k: v * frac for k, v in gf.items()}
        else:
            for k in grads_c:
                grads_c[k] += gc[k] * frac
                grads_f[k] += gf[k] * frac
    breakdown = LossBreakdown(
        total=acc[0], color_term=acc[1], density_term=acc[2], depth_term=acc[3],
        ray_count=total_rays,
    )
    return breakdown, grads_c, grads_f, {"skipped_targets": skipped}


def render_rays(params_c, params_f, origins, dirs, t_near, t_far, n_coarse,
                n_fine, threads=1):
    """Deterministic inference: mid-stratum coarse samples, mid-quantile
    resampling. Returns (rgb (R, 3), depth (R,), fine pdf (R, N))."""
    r = origins.shape[0]

    def run(lo, hi):
        sub = RayBatch(
            origins=origins[lo:hi], dirs=dirs[lo:hi], t_near=t_near, t_far=t_far,
            rgb=np.zeros((hi - lo, 3)),
        )
        _, t_fine, _ = _deterministic_grids(sub, params_c, n_coarse, n_fine)
        head_f = _eval_head(params_f, sub, t_fine)
        return head_f["color"], head_f["depth"], head_f["pdf"]

    spans = [(lo, min(lo + _CHUNK, r)) for lo in range(0, r, _CHUNK)]
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: run(*s), spans))
    else:
        results = [run(*s) for s in spans]
    rgb = np.concatenate([c for c, _, _ in results], axis=0)
    depth = np.concatenate([d for _, d, _ in results])
    pdf = np.concatenate([p for _, _, p in results], axis=0)
    return rgb, depth, pdf


def render_image(params_c, params_f, intr, pose, t_near, t_far, n_coarse,
                 n_fine, threads=1):
    """Render a full view at pixel centers. Returns (rgb (H,W,3), depth (H,W))."""
    from .geometry import generate_rays

    rows, cols = np.meshgrid(
        np.arange(intr.height), np.arange(intr.width), indexing="ij"
    )
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    jitter = np.full((pixels.shape[0], 2), 0.5)
    origins, dirs = generate_rays(intr, pose, pixels, jitter)
    rgb, depth, _ = render_rays(
        params_c, params_f, origins, dirs, t_near, t_far, n_coarse, n_fine,
        threads=threads,
    )
    return (
        rgb.reshape(intr.height, intr.width, 3),
        depth.reshape(intr.height, intr.width),
    )
