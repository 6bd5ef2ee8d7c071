"""Point-cloud container, sampling primitives, normals, synthetic datasets, PLY I/O."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SHAPE_FAMILIES = ("sphere", "cube", "torus", "composite")

# Torus radii used by the synthetic sampler (pre-normalization).
TORUS_MAJOR = 0.35
TORUS_MINOR = 0.15


class PlyParseError(ValueError):
    """Malformed PLY input; message names the offending line."""


@dataclass
class PointCloud:
    """A set of N points with per-point feature vectors and optional unit normals.

    points: (N, 3) float array, coordinates.
    features: (N, d) float array; defaults to all-ones with d = 1.
    normals: optional (N, 3) float array of unit vectors.
    """

    points: np.ndarray
    features: np.ndarray = None
    normals: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        n = self.points.shape[0]
        if n < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points contain non-finite values")
        if self.features is None:
            self.features = np.ones((n, 1), dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(
                f"features must be (N, d) with N={n}, got {self.features.shape}"
            )
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != (n, 3):
                raise ValueError(f"normals must be (N, 3), got {self.normals.shape}")
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must have unit norm within 1e-6")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def permuted(self, perm: np.ndarray) -> "PointCloud":
        """Reorder points (and aligned arrays) by the given index permutation."""
        normals = self.normals[perm] if self.normals is not None else None
        return PointCloud(self.points[perm], self.features[perm], normals)


@dataclass
class DatasetSpec:
    """Recipe for a reproducible synthetic dataset."""

    family: str
    count: int
    points_per_cloud: int
    seed: int
    oversample: int = 4  # raw surface samples per kept point, before FPS

    def __post_init__(self):
        if self.family not in SHAPE_FAMILIES:
            raise ValueError(
                f"unknown shape family {self.family!r}; expected one of {SHAPE_FAMILIES}"
            )
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if self.points_per_cloud % 16 != 0 or self.points_per_cloud < 16:
            raise ValueError("points_per_cloud must be a positive multiple of 16")
        if self.oversample < 1:
            raise ValueError("oversample must be >= 1")


def normalize_unit_cube(cloud: PointCloud) -> PointCloud:
    """Rescale coordinates into [0,1]^3 with a single shared scale.

    The axis with the largest extent maps onto [0,1]; the aspect ratio is
    preserved. Features and normals pass through untouched. Idempotent.
    """
    lo = cloud.points.min(axis=0)
    extent = cloud.points.max(axis=0) - lo
    scale = extent.max()
    if scale <= 0.0:
        raise ValueError("degenerate extent: all points identical")
    pts = (cloud.points - lo) / scale
    return PointCloud(pts, cloud.features.copy(),
                      None if cloud.normals is None else cloud.normals.copy())


def _lex_smallest(points: np.ndarray, candidates: np.ndarray) -> int:
    """Index (into points) of the lexicographically smallest candidate coordinate."""
    if candidates.size == 1:
        return int(candidates[0])
    sub = points[candidates]
    order = np.lexsort((sub[:, 2], sub[:, 1], sub[:, 0]))
    return int(candidates[order[0]])


def farthest_point_sample(cloud: PointCloud | np.ndarray, m: int) -> np.ndarray:
    """Greedy farthest point sampling; returns m distinct indices.

    Deterministic from geometry alone: starts at the point farthest from the
    centroid, then repeatedly picks the point maximizing the minimum distance
    to the already-selected set. Ties break toward the lexicographically
    smallest coordinate, so the selection is invariant to input ordering.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m must satisfy 1 <= m <= {n}, got {m}")

    centroid = pts.mean(axis=0)
    d0 = np.linalg.norm(pts - centroid, axis=1)
    start = _lex_smallest(pts, np.flatnonzero(d0 == d0.max()))

    selected = np.empty(m, dtype=np.int64)
    selected[0] = start
    min_d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, m):
        min_d2[selected[i - 1]] = -1.0  # exclude already-picked points
        best = min_d2.max()
        nxt = _lex_smallest(pts, np.flatnonzero(min_d2 == best))
        selected[i] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return selected


def knn_radius(queries: np.ndarray, pool: np.ndarray, k: int, r: float) -> np.ndarray:
    """k nearest pool indices per query, with a radius guard.

    Returns (Q, k) indices sorted by (distance, index). Any neighbor farther
    than r from its query is replaced by that query's single nearest pool
    point, so the output always has exactly k entries (duplicates allowed).
    """
    queries = np.asarray(queries, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    if pool.shape[0] == 0:
        raise ValueError("pool must be nonempty")
    if not 1 <= k <= pool.shape[0]:
        raise ValueError(f"k must satisfy 1 <= k <= {pool.shape[0]}, got {k}")
    if not r > 0:
        raise ValueError("r must be positive")

    d2 = np.sum((queries[:, None, :] - pool[None, :, :]) ** 2, axis=2)  # (Q, P)
    order = np.argsort(d2, axis=1, kind="stable")
    idx = order[:, :k].copy()
    if np.isfinite(r):
        far = np.take_along_axis(d2, idx, axis=1) > r * r
        nearest = order[:, :1]
        idx = np.where(far, nearest, idx)
    return idx


def estimate_normals(cloud: PointCloud | np.ndarray, k: int = 16) -> tuple[np.ndarray, int]:
    """Per-point unit normals via local PCA over k nearest neighbors.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    with its sign fixed to a nonnegative dot product against
    (point - centroid). Returns (normals, degenerate_count) where the count
    tallies rank-deficient (collinear) neighborhoods.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 3 <= k <= n:
        raise ValueError(f"k must satisfy 3 <= k <= {n}, got {k}")

    idx = knn_radius(pts, pts, k, np.inf)  # (N, k)
    nbrs = pts[idx]  # (N, k, 3)
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k  # (N, 3, 3)
    evals, evecs = np.linalg.eigh(cov)  # ascending eigenvalues
    normals = evecs[:, :, 0]

    # Collinear neighborhood: two vanishing eigenvalues. eigh already returns a
    # unit vector orthogonal to the dominant direction, so only count it.
    degenerate = int(np.sum(evals[:, 1] <= 1e-12 * np.maximum(evals[:, 2], 1e-300)))

    centroid = pts.mean(axis=0)
    flip = np.einsum("ni,ni->n", normals, pts - centroid) < 0.0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals, degenerate


def sample_shape(family: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """Raw (pre-normalization) surface samples for one shape family."""
    if family == "sphere":
        u = rng.standard_normal((n, 3))
        return 0.5 * u / np.linalg.norm(u, axis=1, keepdims=True)
    if family == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.random((n, 2))
        pts = np.empty((n, 3))
        axis = face % 3
        side = (face // 3).astype(np.float64)  # 0 or 1
        for a in range(3):
            mask = axis == a
            others = [b for b in range(3) if b != a]
            pts[mask, a] = side[mask]
            pts[np.ix_(mask, others)] = uv[mask]
        return pts
    if family == "torus":
        theta = rng.random(n) * 2.0 * np.pi  # around the tube
        phi = rng.random(n) * 2.0 * np.pi  # around the axis
        ring = TORUS_MAJOR + TORUS_MINOR * np.cos(theta)
        return np.stack(
            [ring * np.cos(phi), ring * np.sin(phi), TORUS_MINOR * np.sin(theta)], axis=1
        )
    if family == "composite":
        n_sphere = n // 2
        sphere = sample_shape("sphere", n_sphere, rng)
        cube = sample_shape("cube", n - n_sphere, rng) + np.array([0.9, 0.0, 0.0])
        return np.concatenate([sphere, cube], axis=0)
    raise ValueError(f"unknown shape family {family!r}; expected one of {SHAPE_FAMILIES}")


def generate_dataset(spec: DatasetSpec) -> list[PointCloud]:
    """Reproducible synthetic clouds: surface sampling, FPS to N, unit-cube normalization."""
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.count)
    clouds = []
    for ss in seeds:
        rng = np.random.Generator(np.random.PCG64(ss))
        raw = sample_shape(spec.family, spec.points_per_cloud * spec.oversample, rng)
        keep = farthest_point_sample(raw, spec.points_per_cloud)
        cloud = PointCloud(raw[keep])
        clouds.append(normalize_unit_cube(cloud))
    return clouds


# ---------------------------------------------------------------------------
# ASCII PLY I/O  (element vertex; properties x y z [nx ny nz], float32)
# ---------------------------------------------------------------------------

_PLY_PROPS = ("x", "y", "z")
_PLY_NORMAL_PROPS = ("nx", "ny", "nz")


def write_ply(path: str | Path, cloud: PointCloud) -> None:
    """Write an ASCII PLY with float32 coordinates (and normals if present)."""
    path = Path(path)
    pts = cloud.points.astype(np.float32)
    cols = [pts]
    props = list(_PLY_PROPS)
    if cloud.normals is not None:
        cols.append(cloud.normals.astype(np.float32))
        props += list(_PLY_NORMAL_PROPS)
    data = np.concatenate(cols, axis=1)

    lines = ["ply", "format ascii 1.0", f"element vertex {cloud.n_points}"]
    lines += [f"property float {p}" for p in props]
    lines.append("end_header")
    for row in data:
        lines.append(" ".join(f"{v:.9g}" for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_ply(path: str | Path) -> PointCloud:
    """Read an ASCII PLY written by write_ply (or equivalent)."""
    path = Path(path)
    lines = path.read_text().splitlines()

    def fail(lineno: int, msg: str):
        raise PlyParseError(f"{path.name}:{lineno + 1}: {msg}")

    if not lines or lines[0].strip() != "ply":
        fail(0, "missing 'ply' magic")
    if len(lines) < 2 or lines[1].strip() != "format ascii 1.0":
        fail(1, "expected 'format ascii 1.0'")

    count = None
    props: list[str] = []
    body_start = None
    for i, line in enumerate(lines[2:], start=2):
        tok = line.strip().split()
        if not tok or tok[0] == "comment":
            continue
        if tok[0] == "element":
            if len(tok) != 3 or tok[1] != "vertex":
                fail(i, f"unsupported element line {line.strip()!r}")
            count = int(tok[2])
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] not in ("float", "float32"):
                fail(i, f"unsupported property line {line.strip()!r}")
            props.append(tok[2])
        elif tok[0] == "end_header":
            body_start = i + 1
            break
        else:
            fail(i, f"unexpected header line {line.strip()!r}")
    if count is None:
        fail(len(lines) - 1, "header missing 'element vertex'")
    if body_start is None:
        fail(len(lines) - 1, "header missing 'end_header'")
    if tuple(props) not in (_PLY_PROPS, _PLY_PROPS + _PLY_NORMAL_PROPS):
        fail(body_start - 1, f"unsupported property set {props}")

    rows = []
    lineno = body_start
    for lineno in range(body_start, len(lines)):
        tok = lines[lineno].split()
        if not tok:
            continue
        if len(tok) != len(props):
            fail(lineno, f"expected {len(props)} values, got {len(tok)}")
        try:
            rows.append([np.float32(t) for t in tok])
        except ValueError:
            fail(lineno, f"non-numeric value in {lines[lineno]!r}")
        if len(rows) == count:
            break
    if len(rows) != count:
        fail(lineno, f"declared {count} vertices but found {len(rows)}")

    data = np.array(rows, dtype=np.float32)
    normals = data[:, 3:6] if len(props) == 6 else None
    return PointCloud(data[:, :3], normals=normals)


# ---------------------------------------------------------------------------
# Dataset directory layout: one .ply per cloud plus a JSON manifest
# ---------------------------------------------------------------------------

def save_dataset(clouds: list[PointCloud], spec: DatasetSpec, out_dir: str | Path) -> Path:
    """Write clouds and a manifest (file list, sha256 digests, generating spec)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    digests = {}
    for i, cloud in enumerate(clouds):
        name = f"cloud_{i:05d}.ply"
        write_ply(out_dir / name, cloud)
        files.append(name)
        digests[name] = hashlib.sha256((out_dir / name).read_bytes()).hexdigest()
    manifest = {"spec": asdict(spec), "files": files, "sha256": digests}
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def load_dataset(path: str | Path) -> list[PointCloud]:
    """Load a dataset directory: manifest order if present, else sorted *.ply."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
        names = manifest["files"]
    else:
        names = sorted(p.name for p in path.glob("*.ply"))
        if not names:
            raise FileNotFoundError(f"no manifest.json or .ply files in {path}")
    return [read_ply(path / name) for name in names]
