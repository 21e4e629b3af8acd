"""Adam updates and the training loop: batch assembly, coarse-to-fine
evaluation, loss, backward, parameter update, checkpoint selection.

Both networks are updated jointly from one total loss. Ray batches are drawn
uniformly over all training pixels without replacement within an epoch. The
best checkpoint is the one with the highest validation PSNR.
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DivergenceError, UsageError
from .losses import LossGains
from .metrics import psnr, ssim
from .pipeline import RayBatch, loss_and_grads, render_image

log = logging.getLogger(__name__)

HISTORY_HEADER = "epoch,total,color,density,depth,val_psnr,val_ssim"


@dataclass
class AdamState:
    m: dict  # first-moment accumulators, shape-congruent with the parameters
    v: dict  # second-moment accumulators
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 5e-4
    skipped: int = 0  # steps dropped because a gradient went non-finite


def init_adam(params, learning_rate=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.tensors.items()},
        v={k: np.zeros_like(v) for k, v in params.tensors.items()},
        beta1=beta1, beta2=beta2, eps=eps, learning_rate=learning_rate,
    )


def adam_step(params, grads, state):
    """Bias-corrected Adam update, in place. Returns (params, state).

    A non-finite gradient skips the whole step (no moment update, no step
    count increment) and logs the incident.
    """
    for k, g in grads.items():
        if k not in params.tensors:
            raise UsageError(f"gradient key {k!r} not in parameters")
        if g.shape != params.tensors[k].shape:
            raise UsageError(f"gradient shape mismatch for {k!r}")
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return params, state
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params.tensors[k] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_rays: int = 2048
    n_coarse: int = 64
    n_fine: int = 128  # new inverse-CDF draws; fine net evaluates n_coarse + n_fine
    gains: LossGains = field(default_factory=LossGains)
    seed: int = 0
    deterministic: bool = True
    eval_interval: int = 10
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = None  # None = epoch-driven; 0 = zero-iteration run; N = cap
    sigma_default: float = 1.0  # target Gaussian width when supervision lacks one
    use_confidence: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.batch_rays < 1 or self.epochs < 1:
            raise UsageError("batch_rays and epochs must be >= 1")


@dataclass
class HistoryRow:
    epoch: int
    total: float
    color: float
    density: float
    depth: float
    val_psnr: float = None
    val_ssim: float = None


@dataclass
class TrainResult:
    params_coarse: object
    params_fine: object
    adam_coarse: AdamState
    adam_fine: AdamState
    history: list
    best_epoch: int
    best_val_psnr: float
    iterations: int
    skipped_targets: int


def _supervision_rasters(dataset, cfg):
    """Per-view (mean, sigma, confidence, mask) rasters from the target tables."""
    h, w = dataset.intrinsics.height, dataset.intrinsics.width
    rasters = {}
    for view, table in enumerate(dataset.targets):
        mean = np.zeros((h, w))
        sigma = np.ones((h, w))
        conf = np.zeros((h, w))
        mask = np.zeros((h, w), dtype=bool)
        if table is not None and table.shape[0] > 0:
            r = table[:, 0].astype(int)
            c = table[:, 1].astype(int)
            mean[r, c] = table[:, 2]
            sigma[r, c] = np.where(table[:, 3] > 0, table[:, 3], cfg.sigma_default)
            conf[r, c] = table[:, 4] if cfg.use_confidence else 1.0
            mask[r, c] = True
        rasters[view] = (mean, sigma, conf, mask)
    return rasters


def _build_batch(dataset, pix, sup_rasters):
    """pix: (B, 3) rows of (view, row, col) -> RayBatch."""
    from .geometry import generate_rays

    b = pix.shape[0]
    origins = np.empty((b, 3))
    dirs = np.empty((b, 3))
    rgb = np.empty((b, 3))
    mean = np.empty(b)
    sigma = np.empty(b)
    conf = np.empty(b)
    sup = np.empty(b, dtype=bool)
    for view in np.unique(pix[:, 0]):
        sel = pix[:, 0] == view
        rows, cols = pix[sel, 1], pix[sel, 2]
        pixels = np.stack([rows, cols], axis=1).astype(np.float64)
        jitter = np.full((pixels.shape[0], 2), 0.5)
        o, d = generate_rays(dataset.intrinsics, dataset.poses[view], pixels, jitter)
        origins[sel] = o
        dirs[sel] = d
        rgb[sel] = dataset.images[view][rows, cols]
        s_mean, s_sigma, s_conf, s_mask = sup_rasters[view]
        mean[sel] = s_mean[rows, cols]
        sigma[sel] = s_sigma[rows, cols]
        conf[sel] = s_conf[rows, cols]
        sup[sel] = s_mask[rows, cols]
    return RayBatch(
        origins=origins, dirs=dirs, t_near=dataset.t_near, t_far=dataset.t_far,
        rgb=rgb, depth_mean=mean, depth_sigma=sigma, confidence=conf,
        supervised=sup,
    )


def _evaluate(dataset, params_c, params_f, views, cfg):
    """Mean PSNR/SSIM of rendered views against their reference rasters."""
    if not views:
        return None, None
    ps, ss = [], []
    for view in views:
        rgb, _ = render_image(
            params_c, params_f, dataset.intrinsics, dataset.poses[view],
            dataset.t_near, dataset.t_far, cfg.n_coarse, cfg.n_fine,
            threads=cfg.threads,
        )
        ref = dataset.images[view]
        ps.append(min(psnr(rgb, ref), 99.0))  # identical frames would poison the mean
        ss.append(ssim(rgb, ref))
    return float(np.mean(ps)), float(np.mean(ss))


def train(dataset, cfg, field_cfg=None, on_epoch=None):
    """Run the full optimization. Returns a TrainResult.

    Aborts with DivergenceError if the loss is non-finite on two consecutive
    iterations. Deterministic given (dataset, cfg, field_cfg).
    """
    from .field import init_params

    train_views = [i for i, s in enumerate(dataset.splits) if s == "train"]
    val_views = [i for i, s in enumerate(dataset.splits) if s == "test"]
    if not train_views:
        raise DataError("dataset has no training views")

    if field_cfg is None:
        from .field import FieldConfig

        field_cfg = FieldConfig(pos_scale=2.0 / dataset.t_far)
    rng = np.random.default_rng(cfg.seed)
    params_c = init_params(field_cfg, seed=cfg.seed)
    params_f = init_params(field_cfg, seed=cfg.seed + 1)
    adam_c = init_adam(params_c, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    adam_f = init_adam(params_f, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    if cfg.max_iters == 0:
        return TrainResult(
            params_coarse=params_c, params_fine=params_f, adam_coarse=adam_c,
            adam_fine=adam_f, history=[], best_epoch=0,
            best_val_psnr=float("nan"), iterations=0, skipped_targets=0,
        )

    h, w = dataset.intrinsics.height, dataset.intrinsics.width
    all_pix = np.array(
        [(v, r, c) for v in train_views for r in range(h) for c in range(w)],
        dtype=np.int64,
    )
    sup_rasters = _supervision_rasters(dataset, cfg)
    history = []
    best = {"psnr": -np.inf, "epoch": -1, "pc": params_c.copy(), "pf": params_f.copy()}
    iters = 0
    skipped_targets = 0
    nonfinite_streak = 0
    t0 = time.time()
    done = False

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(all_pix.shape[0])
        sums = np.zeros(4)
        n_batches = 0
        for lo in range(0, order.size, cfg.batch_rays):
            sel = all_pix[order[lo: lo + cfg.batch_rays]]
            batch = _build_batch(dataset, sel, sup_rasters)
            breakdown, grads_c, grads_f, aux = loss_and_grads(
                params_c, params_f, batch, cfg.gains, cfg.n_coarse, cfg.n_fine,
                rng, threads=cfg.threads,
            )
            skipped_targets += aux["skipped_targets"]
            if not np.isfinite(breakdown.total):
                nonfinite_streak += 1
                if nonfinite_streak >= 2:
                    raise DivergenceError(
                        f"loss non-finite twice in a row at iteration {iters + 1}: "
                        f"{breakdown}"
                    )
            else:
                nonfinite_streak = 0
            params_c, adam_c = adam_step(params_c, grads_c, adam_c)
            params_f, adam_f = adam_step(params_f, grads_f, adam_f)
            sums += [breakdown.total, breakdown.color_term,
                     breakdown.density_term, breakdown.depth_term]
            n_batches += 1
            iters += 1
            if cfg.max_iters is not None and iters >= cfg.max_iters:
                done = True
                break
        means = sums / max(n_batches, 1)
        row = HistoryRow(
            epoch=epoch, total=means[0], color=means[1], density=means[2],
            depth=means[3],
        )
        if done or epoch == cfg.epochs or epoch % cfg.eval_interval == 0:
            vp, vs = _evaluate(dataset, params_c, params_f, val_views, cfg)
            row.val_psnr, row.val_ssim = vp, vs
            if vp is not None and vp > best["psnr"]:
                best.update(psnr=vp, epoch=epoch, pc=params_c.copy(),
                            pf=params_f.copy())
        history.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if done:
            break
    log.info(
        "training finished: %d iterations, %d epochs, best val PSNR %.3f at "
        "epoch %d, %.1fs",
        iters, len(history), best["psnr"], best["epoch"], time.time() - t0,
    )
    if best["epoch"] < 0:  # no validation views: best = final
        best.update(epoch=len(history), pc=params_c.copy(), pf=params_f.copy())
    return TrainResult(
        params_coarse=best["pc"], params_fine=best["pf"], adam_coarse=adam_c,
        adam_fine=adam_f, history=history, best_epoch=best["epoch"],
        best_val_psnr=best["psnr"], iterations=iters,
        skipped_targets=skipped_targets,
    )


def format_history(history):
    """Metric history as CSV text (deterministic formatting)."""
    lines = [HISTORY_HEADER]
    for row in history:
        vp = "" if row.val_psnr is None else repr(float(row.val_psnr))
        vs = "" if row.val_ssim is None else repr(float(row.val_ssim))
        lines.append(
            f"{row.epoch},{float(row.total)!r},{float(row.color)!r},"
            f"{float(row.density)!r},{float(row.depth)!r},{vp},{vs}"
        )
    return "\n".join(lines) + "\n"


def write_history(path, history):
    with open(path, "w", encoding="ascii") as fh:
        fh.write(format_history(history))


# Adam state checkpointing mirrors the field checkpoint format.

_ADAM_MAGIC = "RADFIELD-ADAM 1"


def save_adam(state, path):
    lines = [
        _ADAM_MAGIC,
        f"step {state.step}",
        f"beta1 {state.beta1!r}",
        f"beta2 {state.beta2!r}",
        f"eps {state.eps!r}",
        f"learning_rate {state.learning_rate!r}",
        f"skipped {state.skipped}",
    ]
    names = list(state.m)
    for name in names:
        lines.append(f"tensor m:{name} {' '.join(str(s) for s in state.m[name].shape)}")
    for name in names:
        lines.append(f"tensor v:{name} {' '.join(str(s) for s in state.v[name].shape)}")
    lines.append("DATA")
    payload = b"".join(
        np.ascontiguousarray(state.m[n], dtype="<f8").tobytes() for n in names
    ) + b"".join(
        np.ascontiguousarray(state.v[n], dtype="<f8").tobytes() for n in names
    )
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii") + b"\n")
        fh.write(payload)


def load_adam(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read Adam state {path}: {exc}") from exc
    marker = b"\nDATA\n"
    cut = blob.find(marker)
    if not blob.startswith(_ADAM_MAGIC.encode("ascii")) or cut < 0:
        raise DataError(f"Adam state {path}: bad header field 'magic'")
    fields, shapes = {}, []
    for line in blob[:cut].decode("ascii").splitlines()[1:]:
        parts = line.split()
        if parts[0] == "tensor":
            shapes.append((parts[1], tuple(int(s) for s in parts[2:])))
        else:
            fields[parts[0]] = parts[1]
    payload = blob[cut + len(marker):]
    arrays = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(
            payload[offset: offset + 8 * count], dtype="<f8"
        ).reshape(shape).copy()
        offset += 8 * count
    m = {k.split(":", 1)[1]: v for k, v in arrays.items() if k.startswith("m:")}
    v = {k.split(":", 1)[1]: w for k, w in arrays.items() if k.startswith("v:")}
    try:
        return AdamState(
            m=m, v=v, step=int(fields["step"]), beta1=float(fields["beta1"]),
            beta2=float(fields["beta2"]), eps=float(fields["eps"]),
            learning_rate=float(fields["learning_rate"]),
            skipped=int(fields.get("skipped", "0")),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"Adam state {path}: bad header field ({exc})") from exc
