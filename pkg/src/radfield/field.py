"""Scene field: a small fully-connected network mapping encoded (position,
direction) to (color, density), with hand-written forward and reverse-mode
(vector-Jacobian) passes.

Output heads: sigmoid for color, softplus for density, so the field output
invariants (c in [0,1], tau >= 0) hold by construction. The trunk is ReLU
with one skip concatenation of the encoded position; the encoded direction
enters before the color head only. Everything runs in float64 by default so
gradient checks can use tight tolerances.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, DataError, NumericError, UsageError


@dataclass(frozen=True)
class FieldConfig:
    l_pos: int = 6
    l_dir: int = 2
    hidden_width: int = 128
    hidden_layers: int = 4
    skip_layer: int = 2  # trunk layer whose input re-receives the position encoding
    color_hidden: int = 64
    pos_scale: float = 1.0  # positions are multiplied by this before encoding
    dtype: str = "float64"

    @property
    def in_pos(self):
        return 6 * self.l_pos

    @property
    def in_dir(self):
        return 6 * self.l_dir

    def np_dtype(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass(frozen=True)
class FieldOutput:
    """One sample's emitted color (in [0,1]^3) and non-negative density."""

    color: np.ndarray
    density: float


@dataclass
class MlpParams:
    config: FieldConfig
    tensors: dict  # name -> ndarray, insertion order defines serialization

    def copy(self):
        return MlpParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self):
        return sum(v.size for v in self.tensors.values())


def _layer_dims(cfg):
    """(in, out) per trunk layer, honoring the skip concatenation."""
    dims = []
    for i in range(cfg.hidden_layers):
        d_in = cfg.in_pos if i == 0 else cfg.hidden_width
        if i == cfg.skip_layer and i > 0:
            d_in += cfg.in_pos
        dims.append((d_in, cfg.hidden_width))
    return dims


def init_params(cfg, seed):
    """Fan-in-scaled uniform weights U(-1/sqrt(fan_in), +1/sqrt(fan_in)), zero biases."""
    if cfg.hidden_layers < 1 or cfg.hidden_width < 1 or cfg.color_hidden < 1:
        raise ConfigError("network widths must be positive")
    if cfg.l_pos < 1 or cfg.l_dir < 1:
        raise ConfigError("encoding frequency counts must be >= 1")
    if not (0 <= cfg.skip_layer < cfg.hidden_layers):
        raise ConfigError(
            f"skip_layer {cfg.skip_layer} outside [0, {cfg.hidden_layers})"
        )
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype()
    tensors = {}

    def lin(name, d_in, d_out):
        bound = 1.0 / np.sqrt(d_in)
        tensors[f"{name}_w"] = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dt)
        tensors[f"{name}_b"] = np.zeros(d_out, dtype=dt)

    for i, (d_in, d_out) in enumerate(_layer_dims(cfg)):
        lin(f"trunk{i}", d_in, d_out)
    lin("density", cfg.hidden_width, 1)
    lin("color1", cfg.hidden_width + cfg.in_dir, cfg.color_hidden)
    lin("color2", cfg.color_hidden, 3)
    return MlpParams(config=cfg, tensors=tensors)


def _softplus(z):
    return np.logaddexp(0.0, z)


class FieldCache:
    """Intermediate activations retained by the forward pass for the VJP."""

    __slots__ = ("params", "enc_pos", "enc_dir", "xs", "masks", "h_last",
                 "z_density", "x_color", "mask_color", "h_color", "rgb")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def field_forward_batch(params, enc_pos, enc_dir, ray_ids=None):
    """Batched forward pass. enc_pos (B, in_pos), enc_dir (B, in_dir).

    Returns (rgb (B, 3), density (B,), cache).
    """
    cfg = params.config
    if enc_pos.ndim != 2 or enc_pos.shape[1] != cfg.in_pos:
        raise UsageError(f"enc_pos width {enc_pos.shape} != {cfg.in_pos}")
    if enc_dir.ndim != 2 or enc_dir.shape[1] != cfg.in_dir:
        raise UsageError(f"enc_dir width {enc_dir.shape} != {cfg.in_dir}")
    if not (np.all(np.isfinite(enc_pos)) and np.all(np.isfinite(enc_dir))):
        bad = np.flatnonzero(
            ~(np.isfinite(enc_pos).all(axis=1) & np.isfinite(enc_dir).all(axis=1))
        )
        ident = "unknown rays" if ray_ids is None else f"rays {np.asarray(ray_ids)[bad][:8]}"
        raise NumericError(f"non-finite field input ({ident})")

    ts = params.tensors
    h = enc_pos
    xs, masks = [], []
    for i in range(cfg.hidden_layers):
        x_in = np.concatenate([h, enc_pos], axis=1) if (i == cfg.skip_layer and i > 0) else h
        z = x_in @ ts[f"trunk{i}_w"] + ts[f"trunk{i}_b"]
        mask = z > 0.0
        h = np.where(mask, z, 0.0)
        xs.append(x_in)
        masks.append(mask)
    z_density = (h @ ts["density_w"] + ts["density_b"])[:, 0]
    density = _softplus(z_density)
    x_color = np.concatenate([h, enc_dir], axis=1)
    z1 = x_color @ ts["color1_w"] + ts["color1_b"]
    mask_color = z1 > 0.0
    h_color = np.where(mask_color, z1, 0.0)
    rgb = expit(h_color @ ts["color2_w"] + ts["color2_b"])
    cache = FieldCache(
        params=params, enc_pos=enc_pos, enc_dir=enc_dir, xs=xs, masks=masks,
        h_last=h, z_density=z_density, x_color=x_color, mask_color=mask_color,
        h_color=h_color, rgb=rgb,
    )
    return rgb, density, cache


def field_backward_batch(cache, d_rgb, d_density):
    """VJP of field_forward_batch: cotangents to parameter and input space.

    Returns (grads: name -> ndarray, d_enc_pos (B, in_pos), d_enc_dir (B, in_dir)).
    """
    params = cache.params
    cfg = params.config
    ts = params.tensors
    b = cache.enc_pos.shape[0]
    if d_rgb.shape != (b, 3) or d_density.shape != (b,):
        raise UsageError("cotangent shapes do not match the cached forward")
    grads = {}

    # color head: rgb = sigmoid(h_color @ W2 + b2)
    dz2 = d_rgb * cache.rgb * (1.0 - cache.rgb)
    grads["color2_w"] = cache.h_color.T @ dz2
    grads["color2_b"] = dz2.sum(axis=0)
    dh_color = dz2 @ ts["color2_w"].T
    dz1 = np.where(cache.mask_color, dh_color, 0.0)
    grads["color1_w"] = cache.x_color.T @ dz1
    grads["color1_b"] = dz1.sum(axis=0)
    dx_color = dz1 @ ts["color1_w"].T
    dh_last = dx_color[:, : cfg.hidden_width]
    d_enc_dir = dx_color[:, cfg.hidden_width:]

    # density head: tau = softplus(h @ Wd + bd)
    dzd = (d_density * expit(cache.z_density))[:, None]
    grads["density_w"] = cache.h_last.T @ dzd
    grads["density_b"] = dzd.sum(axis=0)
    dh_last = dh_last + dzd @ ts["density_w"].T

    d_enc_pos = np.zeros_like(cache.enc_pos)
    dh = dh_last
    for i in reversed(range(cfg.hidden_layers)):
        dz = np.where(cache.masks[i], dh, 0.0)
        grads[f"trunk{i}_w"] = cache.xs[i].T @ dz
        grads[f"trunk{i}_b"] = dz.sum(axis=0)
        dx = dz @ ts[f"trunk{i}_w"].T
        if i == cfg.skip_layer and i > 0:
            dh = dx[:, : cfg.hidden_width]
            d_enc_pos += dx[:, cfg.hidden_width:]
        elif i == 0:
            d_enc_pos += dx
        else:
            dh = dx
    return grads, d_enc_pos, d_enc_dir


def field_forward(params, enc_pos, enc_dir):
    """Single-sample forward. Returns (FieldOutput, cache)."""
    rgb, density, cache = field_forward_batch(
        params, np.asarray(enc_pos, dtype=np.float64)[None, :],
        np.asarray(enc_dir, dtype=np.float64)[None, :],
    )
    return FieldOutput(color=rgb[0], density=float(density[0])), cache


def field_backward(cache, d_color, d_density):
    """Single-sample VJP matching a field_forward call."""
    if cache.enc_pos.shape[0] != 1:
        raise UsageError("cache does not come from a single-sample forward")
    grads, d_pos, d_dir = field_backward_batch(
        cache, np.asarray(d_color, dtype=np.float64)[None, :],
        np.array([float(d_density)]),
    )
    return grads, d_pos[0], d_dir[0]


def zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# checkpoint format: ASCII header describing the architecture and tensor
# shapes, then raw little-endian float64 payload in header order. Round-trips
# bit-exactly.

_MAGIC = "RADFIELD-CHECKPOINT 1"


def save_params(params, path):
    cfg = params.config
    lines = [
        _MAGIC,
        f"l_pos {cfg.l_pos}",
        f"l_dir {cfg.l_dir}",
        f"hidden_width {cfg.hidden_width}",
        f"hidden_layers {cfg.hidden_layers}",
        f"skip_layer {cfg.skip_layer}",
        f"color_hidden {cfg.color_hidden}",
        f"pos_scale {float(cfg.pos_scale)!r}",
        f"dtype {cfg.dtype}",
        "activation relu",
        "heads sigmoid softplus",
    ]
    for name, arr in params.tensors.items():
        lines.append(f"tensor {name} {' '.join(str(s) for s in arr.shape)}")
    lines.append("DATA")
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes() for a in params.tensors.values()
    )
    with open(path, "wb") as fh:
        fh.write("\n".join(lines).encode("ascii") + b"\n")
        fh.write(payload)


def _header_int(fields, key, path):
    if key not in fields:
        raise DataError(f"checkpoint {path}: missing header field '{key}'")
    try:
        return int(fields[key])
    except ValueError as exc:
        raise DataError(f"checkpoint {path}: bad header field '{key}'") from exc


def load_params(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    marker = b"\nDATA\n"
    cut = blob.find(marker)
    if not blob.startswith(_MAGIC.encode("ascii")) or cut < 0:
        raise DataError(f"checkpoint {path}: bad header field 'magic'")
    header = blob[:cut].decode("ascii").splitlines()[1:]
    payload = blob[cut + len(marker):]
    fields, shapes = {}, []
    for line in header:
        parts = line.split()
        if parts[0] == "tensor":
            shapes.append((parts[1], tuple(int(s) for s in parts[2:])))
        else:
            fields[parts[0]] = " ".join(parts[1:])
    if fields.get("dtype", "float64") not in ("float64", "float32"):
        raise DataError(f"checkpoint {path}: bad header field 'dtype'")
    try:
        pos_scale = float(fields.get("pos_scale", "1.0"))
    except ValueError as exc:
        raise DataError(f"checkpoint {path}: bad header field 'pos_scale'") from exc
    cfg = FieldConfig(
        l_pos=_header_int(fields, "l_pos", path),
        l_dir=_header_int(fields, "l_dir", path),
        hidden_width=_header_int(fields, "hidden_width", path),
        hidden_layers=_header_int(fields, "hidden_layers", path),
        skip_layer=_header_int(fields, "skip_layer", path),
        color_hidden=_header_int(fields, "color_hidden", path),
        pos_scale=pos_scale,
        dtype=fields.get("dtype", "float64"),
    )
    tensors = {}
    offset = 0
    dt = cfg.np_dtype()  # payload is always float64; float32 configs cast back losslessly
    for name, shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(payload):
            raise DataError(f"checkpoint {path}: truncated payload at tensor '{name}'")
        arr = np.frombuffer(payload[offset:end], dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(dt) if dt != np.float64 else arr.copy()
        offset = end
    if offset != len(payload):
        raise DataError(f"checkpoint {path}: trailing bytes after last tensor")
    params = MlpParams(config=cfg, tensors=tensors)
    expected = {k for k, _ in _named_shapes(cfg)}
    if set(tensors) != expected:
        raise DataError(f"checkpoint {path}: tensor set does not match architecture")
    return params


def _named_shapes(cfg):
    shapes = []
    for i, (d_in, d_out) in enumerate(_layer_dims(cfg)):
        shapes.append((f"trunk{i}_w", (d_in, d_out)))
        shapes.append((f"trunk{i}_b", (d_out,)))
    shapes += [
        ("density_w", (cfg.hidden_width, 1)), ("density_b", (1,)),
        ("color1_w", (cfg.hidden_width + cfg.in_dir, cfg.color_hidden)),
        ("color1_b", (cfg.color_hidden,)),
        ("color2_w", (cfg.color_hidden, 3)), ("color2_b", (3,)),
    ]
    return shapes


def with_vacuum_density(params, bias=-20.0):
    """Copy of params whose density head is biased to (near) zero output."""
    out = params.copy()
    out.tensors["density_w"][:] = 0.0
    out.tensors["density_b"][:] = bias
    return out
