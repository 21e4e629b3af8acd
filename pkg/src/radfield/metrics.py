"""Image-quality and geometry metrics.

PSNR works on float rasters before any 8-bit quantization. SSIM uses a
uniform 8x8 window at stride 1 with C1 = (0.01*peak)^2, C2 = (0.03*peak)^2
and Rec.601 luminance weights (0.299, 0.587, 0.114); constants are fixed here
so reported numbers are reproducible bit-for-bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

SSIM_WINDOW = 8
REC601 = np.array([0.299, 0.587, 0.114])


def psnr(pred, ref, peak=1.0):
    """10*log10(peak^2 / MSE); identical inputs return +inf."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise UsageError(f"psnr shape mismatch: {pred.shape} vs {ref.shape}")
    mse = np.mean((pred - ref) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def _luminance(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ REC601
    if img.ndim == 2:
        return img
    raise UsageError(f"expected HxW or HxWx3 image, got shape {img.shape}")


def _window_sums(x, k):
    """Sliding kxk window sums at stride 1 via an integral image."""
    cum = np.cumsum(np.cumsum(x, axis=0), axis=1)
    cum = np.pad(cum, ((1, 0), (1, 0)))
    return cum[k:, k:] - cum[:-k, k:] - cum[k:, :-k] + cum[:-k, :-k]


def ssim(pred, ref, peak=1.0):
    """Mean windowed structural similarity over all valid window positions."""
    x = _luminance(pred)
    y = _luminance(ref)
    if x.shape != y.shape:
        raise UsageError(f"ssim shape mismatch: {x.shape} vs {y.shape}")
    k = SSIM_WINDOW
    if x.shape[0] < k or x.shape[1] < k:
        raise UsageError(f"image {x.shape} smaller than the {k}x{k} SSIM window")
    n = float(k * k)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx = _window_sums(x, k) / n
    my = _window_sums(y, k) / n
    sxx = _window_sums(x * x, k) / n - mx * mx
    syy = _window_sums(y * y, k) / n - my * my
    sxy = _window_sums(x * y, k) / n - mx * my
    score = ((2 * mx * my + c1) * (2 * sxy + c2)) / (
        (mx * mx + my * my + c1) * (sxx + syy + c2)
    )
    return float(score.mean())


def depth_rmse(pred, ref, valid=None):
    """Root-mean-square depth error over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise UsageError(f"depth shape mismatch: {pred.shape} vs {ref.shape}")
    if valid is None:
        valid = np.ones(pred.shape, dtype=bool)
    if not np.any(valid):
        raise UsageError("empty validity mask")
    err = pred[valid] - ref[valid]
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class EvalReport:
    """Aggregate metrics plus one row per evaluated image."""

    psnr: float
    ssim: float
    depth_rmse: float
    mean_pdf_l1: float
    rows: list = field(default_factory=list)  # (name, psnr, ssim, depth_rmse, pdf_l1)

    def to_csv(self):
        lines = ["image,psnr,ssim,depth_rmse,mean_pdf_l1"]
        for name, p, s, d, l in self.rows:
            lines.append(f"{name},{_fmt(p)},{_fmt(s)},{_fmt(d)},{_fmt(l)}")
        lines.append(
            f"mean,{_fmt(self.psnr)},{_fmt(self.ssim)},{_fmt(self.depth_rmse)},"
            f"{_fmt(self.mean_pdf_l1)}"
        )
        return "\n".join(lines) + "\n"

    def to_text(self):
        header = f"{'image':<12} {'psnr':>9} {'ssim':>8} {'d_rmse':>9} {'pdf_l1':>8}"
        rule = "-" * len(header)
        lines = [header, rule]
        for name, p, s, d, l in self.rows:
            lines.append(
                f"{name:<12} {_fmt(p, 9, 3)} {_fmt(s, 8, 4)} {_fmt(d, 9, 4)} "
                f"{_fmt(l, 8, 4)}"
            )
        lines.append(rule)
        lines.append(
            f"{'mean':<12} {_fmt(self.psnr, 9, 3)} {_fmt(self.ssim, 8, 4)} "
            f"{_fmt(self.depth_rmse, 9, 4)} {_fmt(self.mean_pdf_l1, 8, 4)}"
        )
        return "\n".join(lines) + "\n"


def _fmt(v, width=0, prec=None):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        s = "nan"
    elif isinstance(v, float) and np.isinf(v):
        s = "inf"
    elif prec is not None:
        s = f"{v:.{prec}f}"
    else:
        s = repr(float(v))
    return f"{s:>{width}}" if width else s
