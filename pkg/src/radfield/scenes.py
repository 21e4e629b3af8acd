"""Analytic test scenes with exact ground-truth color and depth, the noise
model that turns exact depth into per-ray Gaussian supervision, and the
on-disk dataset format.

Scene primitives are volumetric regions (sphere, axis-aligned box, half-space
behind a plane) with constant emitted color and density; an optional
homogeneous participating medium fills the whole range. Colors mix
density-weighted where regions overlap. Ground-truth color comes from dense
quadrature of the same transport integral the renderer discretizes;
ground-truth depth is the analytic first-surface distance (or the expected
depth for pure media).
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError
from .geometry import CameraIntrinsics, generate_rays, load_poses, ring_pose, save_poses

GOLDEN = 0.6180339887498949  # view i sits at frac(0.5 + i*GOLDEN) of the arc


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple
    density: float
    emission: float = 1.0

    def contains(self, p):
        d = p - np.asarray(self.center)
        return (d * d).sum(axis=1) <= self.radius * self.radius

    def hit(self, o, d, t_near, t_far):
        """Smallest entering intersection distance per ray, inf on miss."""
        oc = o - np.asarray(self.center)
        b = (oc * d).sum(axis=1)
        c = (oc * oc).sum(axis=1) - self.radius * self.radius
        disc = b * b - c
        t = np.full(o.shape[0], np.inf)
        ok = disc >= 0.0
        root = np.sqrt(np.maximum(disc, 0.0))
        t0 = -b - root
        t1 = -b + root
        enter = np.where(t0 >= t_near, t0, np.where(t1 >= t_near, np.maximum(t_near, t0), np.inf))
        t[ok] = enter[ok]
        t[t > t_far] = np.inf
        return t


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    albedo: tuple
    density: float
    emission: float = 1.0

    def contains(self, p):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        return np.all((p >= lo) & (p <= hi), axis=1)

    def hit(self, o, d, t_near, t_far):
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        t = np.where(tmax >= np.maximum(tmin, t_near), np.maximum(tmin, t_near), np.inf)
        t[t > t_far] = np.inf
        return t


@dataclass(frozen=True)
class HalfSpace:
    """Filled region {x : normal . x <= offset}; the normal points outward."""

    normal: tuple
    offset: float
    albedo: tuple
    density: float
    emission: float = 1.0

    def contains(self, p):
        return p @ np.asarray(self.normal) <= self.offset

    def hit(self, o, d, t_near, t_far):
        n = np.asarray(self.normal)
        num = self.offset - o @ n
        den = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        inside = num >= 0.0  # ray starts in the filled region
        t = np.where(inside, t_near, np.where(den < 0.0, t, np.inf))
        t = np.where((t >= t_near) & (t <= t_far), t, np.inf)
        return t


@dataclass(frozen=True)
class Medium:
    density: float
    tint: tuple = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class AnalyticScene:
    primitives: tuple = ()
    medium: Medium = None

    def __post_init__(self):
        for p in self.primitives:
            if p.density < 0:
                raise DomainError("primitive densities must be non-negative")
        if self.medium is not None and self.medium.density < 0:
            raise DomainError("medium density must be non-negative")

    def density_at(self, points):
        sigma = np.zeros(points.shape[0])
        for prim in self.primitives:
            sigma += prim.density * prim.contains(points)
        if self.medium is not None:
            sigma += self.medium.density
        return sigma

    def color_at(self, points):
        """Density-weighted mix of emitted colors; black in vacuum."""
        num = np.zeros((points.shape[0], 3))
        den = np.zeros(points.shape[0])
        for prim in self.primitives:
            inside = prim.contains(points).astype(np.float64) * prim.density
            num += inside[:, None] * (prim.emission * np.asarray(prim.albedo))
            den += inside
        if self.medium is not None:
            num += self.medium.density * np.asarray(self.medium.tint)
            den += self.medium.density
        out = np.zeros_like(num)
        ok = den > 0.0
        out[ok] = num[ok] / den[ok, None]
        return out

    def first_hit(self, origins, dirs, t_near, t_far):
        """Analytic nearest-surface distance per ray; inf where nothing is hit."""
        t = np.full(origins.shape[0], np.inf)
        for prim in self.primitives:
            t = np.minimum(t, prim.hit(origins, dirs, t_near, t_far))
        return t


def tri_sphere_scene():
    """Default desk scene: three colored spheres at staggered depths in front
    of a backplane, probing sharp depth discontinuities."""
    return AnalyticScene(
        primitives=(
            Sphere(center=(-1.0, 0.3, 2.0), radius=0.65, albedo=(0.85, 0.15, 0.10), density=400.0),
            Sphere(center=(0.9, -0.25, 1.0), radius=0.75, albedo=(0.10, 0.80, 0.20), density=400.0),
            Sphere(center=(0.05, 0.55, 0.0), radius=0.85, albedo=(0.20, 0.30, 0.90), density=400.0),
            HalfSpace(normal=(0.0, 0.0, 1.0), offset=-2.0, albedo=(0.75, 0.75, 0.70), density=400.0),
        ),
    )


def homogeneous_scene(density=2.0, tint=(1.0, 1.0, 1.0)):
    return AnalyticScene(medium=Medium(density=density, tint=tint))


SCENE_PRESETS = {
    "tri-sphere": tri_sphere_scene,
    "homogeneous": homogeneous_scene,
}


@dataclass(frozen=True)
class RingSpec:
    """Camera arc: radius and angular span around the look-at point."""

    radius: float = 4.0
    span_deg: float = 45.0
    elevation: float = 0.4
    center: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0.0:
            raise ConfigError("ring radius must be positive")


def ring_poses(spec, n_views):
    """Deterministic low-discrepancy placement; view 0 is the arc midpoint."""
    span = np.deg2rad(spec.span_deg)
    poses = []
    for i in range(n_views):
        frac = (0.5 + i * GOLDEN) % 1.0
        poses.append(
            ring_pose(spec.center, spec.radius, (frac - 0.5) * span, spec.elevation)
        )
    return poses


@dataclass
class Dataset:
    intrinsics: CameraIntrinsics
    t_near: float
    t_far: float
    poses: list  # Pose per view
    images: np.ndarray  # (V, H, W, 3) float64 in [0, 1]
    depths: np.ndarray  # (V, H, W) float64, inf where nothing was hit
    valid: np.ndarray  # (V, H, W) bool
    targets: list  # per view: (K, 5) array of (row, col, mean, sigma, conf) or None
    splits: list  # per view: "train" | "test"

    def n_views(self):
        return len(self.poses)


def render_ground_truth(scene, intr, pose, t_near, t_far, n_dense=4096):
    """Exact per-pixel color and depth. Returns (rgb, depth, valid).

    Color integrates the transport equation on a dense midpoint grid; depth is
    the analytic first-surface distance where one exists, else (for pure
    media) the expected termination depth; pixels with no hit and no mass are
    flagged invalid.
    """
    rows, cols = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1).astype(np.float64)
    jitter = np.full((pixels.shape[0], 2), 0.5)
    origins, dirs = generate_rays(intr, pose, pixels, jitter)
    r = origins.shape[0]

    h = (t_far - t_near) / n_dense
    mid = t_near + (np.arange(n_dense) + 0.5) * h
    rgb = np.empty((r, 3))
    depth = np.full(r, np.inf)
    mass_total = np.empty(r)
    chunk = max(1, 2_000_000 // n_dense)
    for lo in range(0, r, chunk):
        o = origins[lo: lo + chunk]
        d = dirs[lo: lo + chunk]
        pts = (o[:, None, :] + mid[None, :, None] * d[:, None, :]).reshape(-1, 3)
        sigma = scene.density_at(pts).reshape(o.shape[0], n_dense)
        color = scene.color_at(pts).reshape(o.shape[0], n_dense, 3)
        a = sigma * h
        acc = np.cumsum(a, axis=1)
        mass = np.exp(a - acc) * -np.expm1(-a)
        rgb[lo: lo + chunk] = np.einsum("rn,rnc->rc", mass, color)
        mass_total[lo: lo + chunk] = mass.sum(axis=1)
        if scene.medium is not None:
            tot = mass.sum(axis=1)
            exp_depth = np.where(tot > 1e-12, (mass * mid).sum(axis=1) / np.maximum(tot, 1e-300), np.inf)
            depth[lo: lo + chunk] = exp_depth

    surf = scene.first_hit(origins, dirs, t_near, t_far)
    has_surface = np.isfinite(surf)
    depth = np.where(has_surface, surf, depth)
    valid = np.isfinite(depth) & ((mass_total > 1e-12) | has_surface)
    hw = (intr.height, intr.width)
    return rgb.reshape(hw + (3,)), depth.reshape(hw), valid.reshape(hw)


def corrupt_depth(true_depth, valid, sigma, outlier_rate, t_near, t_far, seed,
                  inlier_confidence=1.0, outlier_confidence=0.1):
    """Gaussian-noise depth supervision with uniformly misplaced outliers.

    Returns a (K, 5) table of (row, col, mean, sigma, confidence) covering all
    valid pixels. Outliers get uniform means in [t_near, t_far] and the low
    confidence; every row records the noise sigma.
    """
    if not sigma > 0.0:
        raise DomainError("corrupt_depth needs sigma > 0")
    if not 0.0 <= outlier_rate < 1.0:
        raise DomainError("outlier_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    rr, cc = np.nonzero(valid)
    k = rr.size
    mean = true_depth[rr, cc] + rng.normal(0.0, sigma, size=k)
    outlier = rng.random(k) < outlier_rate
    mean[outlier] = rng.uniform(t_near, t_far, size=int(outlier.sum()))
    conf = np.where(outlier, outlier_confidence, inlier_confidence)
    table = np.stack([rr.astype(np.float64), cc.astype(np.float64),
                      mean, np.full(k, sigma), conf], axis=1)
    return table


def make_dataset(scene, ring, n_views, intr, t_near, t_far, seed,
                 depth_sigma=0.05, outlier_rate=0.0, test_stride=8, n_dense=4096):
    """Synthetic multi-view dataset with depth supervision on training views.

    Views sit on the camera arc; every test_stride-th index is tagged "test".
    Deterministic for a given argument tuple.
    """
    if n_views < 2:
        raise DomainError("need at least two views")
    poses = ring_poses(ring, n_views)
    images = np.empty((n_views, intr.height, intr.width, 3))
    depths = np.empty((n_views, intr.height, intr.width))
    valid = np.empty((n_views, intr.height, intr.width), dtype=bool)
    targets = []
    splits = []
    seeds = np.random.SeedSequence(seed).spawn(n_views)
    for i, pose in enumerate(poses):
        rgb, depth, ok = render_ground_truth(scene, intr, pose, t_near, t_far, n_dense)
        images[i] = rgb
        depths[i] = depth
        valid[i] = ok
        split = "test" if i % test_stride == 0 else "train"
        splits.append(split)
        if split == "train":
            targets.append(corrupt_depth(
                depth, ok, depth_sigma, outlier_rate, t_near, t_far, seeds[i]
            ))
        else:
            targets.append(None)
    return Dataset(
        intrinsics=intr, t_near=t_near, t_far=t_far, poses=poses, images=images,
        depths=depths, valid=valid, targets=targets, splits=splits,
    )


# ---------------------------------------------------------------------------
# float raster format: b"PFR1\n", then "width height channels\n" in ASCII,
# then row-major little-endian float64.

def save_raster(path, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"PFR1\n")
        fh.write(f"{w} {h} {c}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_raster(path):
    try:
        with open(path, "rb") as fh:
            magic = fh.read(5)
            if magic != b"PFR1\n":
                raise DataError(f"{path}: not a PFR1 raster")
            header = b""
            while not header.endswith(b"\n"):
                ch = fh.read(1)
                if not ch:
                    raise DataError(f"{path}: truncated raster header")
                header += ch
            w, h, c = (int(v) for v in header.split())
            data = fh.read(8 * w * h * c)
    except OSError as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    if len(data) != 8 * w * h * c:
        raise DataError(f"{path}: truncated raster payload")
    arr = np.frombuffer(data, dtype="<f8").reshape(h, w, c).copy()
    return arr[:, :, 0] if c == 1 else arr


def save_png(path, rgb):
    """8-bit preview encoding; training always reads the float rasters."""
    from PIL import Image

    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def save_target_table(path, table):
    lines = ["# row col mean sigma confidence"]
    for row in table:
        lines.append(
            f"{int(row[0])} {int(row[1])} "
            + " ".join(repr(float(v)) for v in row[2:])
        )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_target_table(path):
    rows = []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise DataError(f"{path}: expected 5 columns, got {len(parts)}")
            rows.append([float(v) for v in parts])
    return np.array(rows) if rows else np.zeros((0, 5))


_MANIFEST_MAGIC = "RADFIELD-DATASET 1"


def save_dataset(dataset, out_dir):
    """Write the dataset directory: manifest, poses, rasters, target tables."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    intr = dataset.intrinsics
    lines = [
        _MANIFEST_MAGIC,
        f"width {intr.width}",
        f"height {intr.height}",
        f"focal {intr.focal!r}",
        f"principal {intr.principal_point[0]!r} {intr.principal_point[1]!r}",
        f"near {dataset.t_near!r}",
        f"far {dataset.t_far!r}",
        f"views {dataset.n_views()}",
    ]
    save_poses(out / "poses.txt", dataset.poses)
    for i in range(dataset.n_views()):
        tag = f"{i:03d}"
        save_raster(out / f"view_{tag}.pfr", dataset.images[i])
        save_raster(out / f"depth_{tag}.pfr", np.where(dataset.valid[i], dataset.depths[i], np.inf))
        save_png(out / f"view_{tag}.png", dataset.images[i])
        entry = (
            f"view {tag} split={dataset.splits[i]} color=view_{tag}.pfr "
            f"png=view_{tag}.png depth=depth_{tag}.pfr"
        )
        if dataset.targets[i] is not None:
            save_target_table(out / f"targets_{tag}.txt", dataset.targets[i])
            entry += f" targets=targets_{tag}.txt"
        lines.append(entry)
    with open(out / "manifest.txt", "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path):
    root = Path(path)
    manifest = root / "manifest.txt"
    try:
        text = manifest.read_text(encoding="ascii")
    except OSError as exc:
        raise DataError(f"cannot read dataset manifest {manifest}: {exc}") from exc
    lines = text.splitlines()
    if not lines or lines[0] != _MANIFEST_MAGIC:
        raise DataError(f"{manifest}: not a dataset manifest")
    fields = {}
    views = []
    for line in lines[1:]:
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] == "view":
            views.append(parts[1:])
        else:
            fields[parts[0]] = parts[1:]
    try:
        intr = CameraIntrinsics(
            width=int(fields["width"][0]), height=int(fields["height"][0]),
            focal=float(fields["focal"][0]),
            principal_point=(float(fields["principal"][0]), float(fields["principal"][1])),
        )
        near = float(fields["near"][0])
        far = float(fields["far"][0])
        n_views = int(fields["views"][0])
    except (KeyError, ValueError, IndexError) as exc:
        raise DataError(f"{manifest}: bad header ({exc})") from exc
    if len(views) != n_views:
        raise DataError(f"{manifest}: {len(views)} view rows but views={n_views}")
    poses = load_poses(root / "poses.txt")
    if len(poses) != n_views:
        raise DataError(f"{root}: pose count {len(poses)} != view count {n_views}")
    images, depths, valid, targets, splits = [], [], [], [], []
    for row in views:
        kv = dict(part.split("=", 1) for part in row[1:])
        splits.append(kv.get("split", "train"))
        images.append(load_raster(root / kv["color"]))
        depth = load_raster(root / kv["depth"])
        depths.append(depth)
        valid.append(np.isfinite(depth))
        targets.append(load_target_table(root / kv["targets"]) if "targets" in kv else None)
    return Dataset(
        intrinsics=intr, t_near=near, t_far=far, poses=poses,
        images=np.stack(images), depths=np.stack(depths), valid=np.stack(valid),
        targets=targets, splits=splits,
    )


def dataset_sha256(path):
    """Hash of the manifest plus every file it references, in manifest order."""
    root = Path(path)
    digest = hashlib.sha256()
    manifest = (root / "manifest.txt").read_bytes()
    digest.update(manifest)
    digest.update((root / "poses.txt").read_bytes())
    for line in manifest.decode("ascii").splitlines():
        if line.startswith("view "):
            for part in line.split()[2:]:
                _, name = part.split("=", 1)
                if "." in name:
                    digest.update((root / name).read_bytes())
    return digest.hexdigest()
