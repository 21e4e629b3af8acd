"""Pure-numpy reference implementations of the hot kernels.

The compiled extension (``_kernels``) mirrors these signatures exactly; the
active implementation is chosen once at import time by :mod:`.backend`.
All arrays are float64 and C-contiguous. Batched layout: rays along axis 0,
samples along axis 1.
"""

import numpy as np

# Below this total weight the depth PDF blends linearly toward uniform so
# its gradient stays bounded by 1/PDF_BLEND_FLOOR (see renderer docs).
PDF_BLEND_FLOOR = 1e-6


def positional_encoding(x, n_freq):
    """Sine-cosine feature lift: [sin(2^0 x), cos(2^0 x), ..., cos(2^(L-1) x)].

    x: (M, D). Returns (M, 2*L*D); per frequency one sin block then one cos
    block, each of D components.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    m, d = x.shape
    freqs = np.ldexp(1.0, np.arange(n_freq))  # 2**l, exact
    ang = x[:, None, :] * freqs[None, :, None]  # (M, L, D)
    out = np.empty((m, n_freq, 2, d))
    np.sin(ang, out=out[:, :, 0, :])
    np.cos(ang, out=out[:, :, 1, :])
    return out.reshape(m, 2 * n_freq * d)


def _depth_pdf(w, s):
    """Normalized depth PDF with bounded-gradient fallback near zero mass."""
    n = w.shape[1]
    pdf = np.empty_like(w)
    zero = s <= 0.0
    small = ~zero & (s < PDF_BLEND_FLOOR)
    big = ~zero & ~small
    if np.any(big):
        pdf[big] = w[big] / s[big, None]
    if np.any(small):
        lam = s[small] / PDF_BLEND_FLOOR
        pdf[small] = w[small] / PDF_BLEND_FLOOR + ((1.0 - lam) / n)[:, None]
    if np.any(zero):
        pdf[zero] = 1.0 / n
    return pdf


def composite_fwd(t, deltas, tau, rgb):
    """Discrete volume-rendering quadrature over per-ray sample grids.

    t, deltas, tau: (R, N); rgb: (R, N, 3).
    Returns (color (R,3), depth (R,), w (R,N), trans (R,N), trans_next (R,N),
    pdf (R,N), wsum (R,)).

    trans[k] is the survival probability up to sample k (exclusive optical
    depth), trans_next[k] the survival past sample k; w = trans * alpha.
    depth is the expectation of t under the normalized PDF.
    """
    a = tau * deltas
    acc = np.cumsum(a, axis=1)
    trans = np.exp(a - acc)  # exp(-sum_{k'<k} a_k')
    trans_next = np.exp(-acc)
    alpha = -np.expm1(-a)
    w = trans * alpha
    wsum = w.sum(axis=1)
    pdf = _depth_pdf(w, wsum)
    color = np.einsum("rn,rnc->rc", w, rgb)
    depth = (pdf * t).sum(axis=1)
    return color, depth, w, trans, trans_next, pdf, wsum


def composite_bwd(t, deltas, w, trans_next, pdf, wsum, rgb, d_color, d_depth, d_pdf):
    """Reverse-mode of composite_fwd w.r.t. (rgb, tau).

    d_color: (R,3), d_depth: (R,), d_pdf: (R,N). Returns (d_rgb, d_tau).
    """
    n = w.shape[1]
    dp = d_pdf + d_depth[:, None] * t  # depth flows through the PDF
    d_w = np.empty_like(w)
    zero = wsum <= 0.0
    small = ~zero & (wsum < PDF_BLEND_FLOOR)
    big = ~zero & ~small
    if np.any(big):
        inner = (dp[big] * pdf[big]).sum(axis=1, keepdims=True)
        d_w[big] = (dp[big] - inner) / wsum[big, None]
    if np.any(small):
        d_w[small] = (dp[small] - dp[small].sum(axis=1, keepdims=True) / n) / PDF_BLEND_FLOOR
    if np.any(zero):
        d_w[zero] = 0.0  # PDF pinned at uniform; no defined direction
    d_w += np.einsum("rc,rnc->rn", d_color, rgb)
    d_rgb = w[:, :, None] * d_color[:, None, :]
    # w_k = T_k(1-exp(-a_k)): da_j = dw_j*T_{j+1} - sum_{k>j} dw_k*w_k
    dww = d_w * w
    suffix = np.zeros_like(w)
    suffix[:, :-1] = np.cumsum(dww[:, ::-1], axis=1)[:, ::-1][:, 1:]
    d_a = d_w * trans_next - suffix
    d_tau = d_a * deltas
    return d_rgb, d_tau


def sample_pdf(edges, weights, u):
    """Inverse-transform draws from per-ray piecewise-constant PDFs.

    edges: (R, M+1) ascending bin edges; weights: (R, M) non-negative with
    strictly positive row sums; u: (R, K) in [0, 1). Returns (R, K) samples.
    """
    r, m = weights.shape
    cdf = np.zeros((r, m + 1))
    np.cumsum(weights, axis=1, out=cdf[:, 1:])
    cdf /= cdf[:, -1:]
    cdf[:, -1] = 1.0
    out = np.empty_like(u)
    for i in range(r):
        idx = np.searchsorted(cdf[i], u[i], side="right") - 1
        np.clip(idx, 0, m - 1, out=idx)
        lo = cdf[i, idx]
        span = cdf[i, idx + 1] - lo
        frac = np.where(span > 0.0, (u[i] - lo) / np.where(span > 0.0, span, 1.0), 0.0)
        out[i] = edges[i, idx] + frac * (edges[i, idx + 1] - edges[i, idx])
    return out


def gaussian_bin_masses(edges, mu, sigma):
    """Per-bin mass of N(mu, sigma^2) between consecutive edges.

    edges: (R, N+1); mu, sigma: (R,). Returns raw (unnormalized) masses (R, N).
    Uses the complementary error function for stable tails.
    """
    from scipy.special import ndtr

    z = (edges - mu[:, None]) / sigma[:, None]
    cdf = ndtr(z)
    return np.diff(cdf, axis=1)
