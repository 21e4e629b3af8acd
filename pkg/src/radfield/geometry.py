"""Cameras, rays, positional encoding, and sample placement along rays.

Conventions (fixed once, used everywhere): right-handed world frame, camera
looks along its own -z axis, image rows grow downward, poses are
world-from-camera. Every operation is a pure function of its inputs; random
draws are always passed in explicitly.
"""

from dataclasses import dataclass, field

import numpy as np

from .backend import kernels
from .errors import DataError, DomainError

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: square pixels, principal point in pixel units (x, y)."""

    width: int
    height: int
    focal: float
    principal_point: tuple = None  # defaults to the image center

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DomainError(f"image size {self.width}x{self.height} invalid")
        if not self.focal > 0:
            raise DomainError(f"focal must be positive, got {self.focal}")
        if self.principal_point is None:
            object.__setattr__(
                self, "principal_point", (self.width / 2.0, self.height / 2.0)
            )


@dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise DomainError(f"rotation shape {r.shape} != (3, 3)")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise DomainError("rotation columns not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation determinant != +1 within 1e-9")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray  # (3,)
    direction: np.ndarray  # (3,), unit norm
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(d) - 1.0) > 1e-12:
            raise DomainError("ray direction is not unit length within 1e-12")
        if not (0.0 <= self.t_near < self.t_far):
            raise DomainError(f"bad ray bounds [{self.t_near}, {self.t_far}]")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class SampleGrid:
    """Strictly increasing sample distances along one ray plus bin widths.

    deltas[k] = t[k+1] - t[k]; the last width closes the grid against t_far.
    """

    t: np.ndarray
    t_near: float
    t_far: float
    deltas: np.ndarray = field(default=None)

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=np.float64)
        if t.ndim != 1 or t.size < 1:
            raise DomainError("sample grid needs a 1-d distance vector")
        if np.any(np.diff(t) <= 0.0):
            raise DomainError("sample distances must be strictly increasing")
        if t[0] < self.t_near or t[-1] > self.t_far:
            raise DomainError("samples escape [t_near, t_far]")
        deltas = np.empty_like(t)
        deltas[:-1] = np.diff(t)
        deltas[-1] = self.t_far - t[-1]
        if deltas[-1] <= 0.0:
            # last sample may sit exactly on t_far; keep the width positive
            deltas[-1] = np.finfo(np.float64).tiny
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "deltas", deltas)

    def __len__(self):
        return self.t.size

    def bin_edges(self):
        """Partition of [t_near, t_far]: near bound, sample midpoints, far bound."""
        return grid_bin_edges(self.t[None, :], self.t_near, self.t_far)[0]


def grid_bin_edges(t, t_near, t_far):
    """Batched bin edges (R, N+1) for sample matrices t (R, N)."""
    r, n = t.shape
    edges = np.empty((r, n + 1))
    edges[:, 0] = t_near
    edges[:, -1] = t_far
    if n > 1:
        edges[:, 1:-1] = 0.5 * (t[:, 1:] + t[:, :-1])
    return edges


def generate_ray(intr, pose, pixel, jitter, t_near, t_far):
    """Ray through image pixel (row, col) offset by jitter (jx, jy) in [0, 1]^2.

    The origin is the camera center in world coordinates; the direction is the
    normalized back-projection of (col + jx, row + jy).
    """
    row, col = pixel
    if not (0 <= row < intr.height and 0 <= col < intr.width):
        raise DomainError(f"pixel {pixel} outside {intr.width}x{intr.height} image")
    o, d = generate_rays(
        intr,
        pose,
        np.array([[row, col]], dtype=np.float64),
        np.asarray(jitter, dtype=np.float64).reshape(1, 2),
    )
    return Ray(origin=o[0], direction=d[0], t_near=t_near, t_far=t_far)


def generate_rays(intr, pose, pixels, jitter):
    """Batched ray generation: pixels (R, 2) as (row, col), jitter (R, 2).

    Returns (origins (R, 3), unit directions (R, 3)).
    """
    px, py = intr.principal_point
    u = pixels[:, 1] + jitter[:, 0]
    v = pixels[:, 0] + jitter[:, 1]
    dirs_cam = np.stack(
        [
            (u - px) / intr.focal,
            -(v - py) / intr.focal,  # rows grow downward, camera y is up
            -np.ones_like(u),
        ],
        axis=1,
    )
    dirs = dirs_cam @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def project(intr, pose, points):
    """World points (R, 3) to pixel coordinates (u, v); inverse of generate_rays."""
    p_cam = (points - pose.translation) @ pose.rotation
    z = -p_cam[:, 2]
    px, py = intr.principal_point
    u = px + intr.focal * p_cam[:, 0] / z
    v = py - intr.focal * p_cam[:, 1] / z
    return np.stack([u, v], axis=1)


def stratified_fill(t_near, t_far, draws):
    """Batched stratified placement: draws (R, N) in [0, 1) -> distances (R, N)."""
    r, n = draws.shape
    k = np.arange(n, dtype=np.float64)
    return t_near + (k[None, :] + draws) * ((t_far - t_near) / n)


def stratified_samples(ray, n, rng_draws):
    """One jittered sample per equal sub-interval of [t_near, t_far].

    t_k = t_near + (k + u_k) * (t_far - t_near) / n, deterministic given draws.
    """
    if n < 2:
        raise DomainError(f"stratified sampling needs n >= 2, got {n}")
    u = np.asarray(rng_draws, dtype=np.float64).reshape(n)
    if np.any(u < 0.0) or np.any(u >= 1.0):
        raise DomainError("stratified draws must lie in [0, 1)")
    t = stratified_fill(ray.t_near, ray.t_far, u[None, :])[0]
    return SampleGrid(t=t, t_near=ray.t_near, t_far=ray.t_far)


def _dedupe_sorted(t, t_far):
    """Nudge exact duplicates upward so grids stay strictly increasing."""
    for i in range(1, t.size):
        if t[i] <= t[i - 1]:
            t[i] = np.nextafter(t[i - 1], np.inf)
    if t[-1] > t_far:
        t[-1] = t_far
    return t


def hierarchical_resample(coarse, coarse_weights, n_fine, rng_draws):
    """Importance-resample fine distances from coarse weights, merge, sort.

    Fine distances are inverse-CDF draws from the piecewise-constant PDF over
    the coarse grid's bins. All-zero weights fall back to stratified placement
    over the full range so early training stays well-defined.
    """
    w = np.asarray(coarse_weights, dtype=np.float64)
    if w.shape != (len(coarse),):
        raise DomainError("coarse_weights must align with the coarse grid")
    if np.any(w < 0.0):
        raise DomainError("coarse weights must be non-negative")
    if n_fine < 1:
        raise DomainError(f"n_fine must be >= 1, got {n_fine}")
    u = np.asarray(rng_draws, dtype=np.float64).reshape(1, n_fine)
    if w.sum() > 0.0:
        edges = coarse.bin_edges()[None, :]
        fine = kernels.sample_pdf(edges, w[None, :], u)[0]
    else:
        fine = stratified_fill(coarse.t_near, coarse.t_far, u)[0]
    merged = np.sort(np.concatenate([coarse.t, fine]))
    merged = _dedupe_sorted(merged, coarse.t_far)
    return SampleGrid(t=merged, t_near=coarse.t_near, t_far=coarse.t_far)


def positional_encoding(x, n_freq):
    """Componentwise sine-cosine lift of x to 2 * n_freq * dim(x) features."""
    if n_freq < 1:
        raise DomainError(f"need at least one frequency, got {n_freq}")
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if arr.ndim == 1:
        return kernels.positional_encoding(arr[None, :], n_freq)[0]
    return kernels.positional_encoding(arr, n_freq)


def ring_pose(center, radius, azimuth, elevation, up=(0.0, 1.0, 0.0)):
    """Camera on a ring around `center`, looking at it, -z toward the scene."""
    center = np.asarray(center, dtype=np.float64)
    pos = center + np.array(
        [radius * np.sin(azimuth), elevation, radius * np.cos(azimuth)]
    )
    fwd = center - pos
    fwd /= np.linalg.norm(fwd)
    z_axis = -fwd
    x_axis = np.cross(np.asarray(up, dtype=np.float64), z_axis)
    x_axis /= np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    r = np.stack([x_axis, y_axis, z_axis], axis=1)
    # Re-orthonormalize so Pose validation passes at 1e-9 exactly.
    uu, _, vt = np.linalg.svd(r)
    r = uu @ vt
    return Pose(rotation=r, translation=pos)


def save_poses(path, poses):
    """Plain-text pose file: one camera per block, 12 numbers row-major 3x4."""
    lines = ["# world-from-camera, one 3x4 block per camera, row-major"]
    for pose in poses:
        mat = np.concatenate([pose.rotation, pose.translation[:, None]], axis=1)
        for row in mat:
            lines.append(" ".join(repr(float(v)) for v in row))
        lines.append("")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))


def load_poses(path):
    try:
        with open(path, encoding="ascii") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read pose file {path}: {exc}") from exc
    values = []
    for line in raw.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            values.extend(line.split())
    if len(values) % 12 != 0:
        raise DataError(f"pose file {path}: {len(values)} numbers, not a multiple of 12")
    try:
        flat = np.array([float(v) for v in values]).reshape(-1, 3, 4)
    except ValueError as exc:
        raise DataError(f"pose file {path}: non-numeric entry") from exc
    poses = []
    for block in flat:
        try:
            poses.append(Pose(rotation=block[:, :3], translation=block[:, 3]))
        except DomainError as exc:
            raise DataError(f"pose file {path}: {exc}") from exc
    return poses
