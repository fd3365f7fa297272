"""Point-cloud data model, file I/O, sampling primitives, and synthetic LiDAR scenes.

Coordinates are metric (meters) throughout. Clouds keep the dtype they were
constructed with (file loaders produce float32, which is also what the PLY and
raw formats store).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_COMM_RANGE_M = 50.0

PLY_FORMATS = ("ply_ascii", "ply_binary_le")
FORMATS = PLY_FORMATS + ("raw_f32",)


class PointCloudError(ValueError):
    """Invalid point-cloud content or arguments."""


class EmptyCloudError(PointCloudError):
    """An operation produced or received a cloud with no points."""


class ParseError(PointCloudError):
    """Malformed file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class PointCloud:
    """A set of 3D points, optionally with the pose of the sensor that produced it."""

    points: np.ndarray  # (N, 3), meters
    frame_id: str = ""
    sensor_pose: np.ndarray | None = None  # (4, 4) rigid transform, sensor -> world

    def __post_init__(self):
        pts = np.ascontiguousarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise PointCloudError(f"points must be (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise EmptyCloudError("point cloud has no points")
        if not np.issubdtype(pts.dtype, np.floating):
            pts = pts.astype(np.float64)
        if not np.isfinite(pts).all():
            raise PointCloudError("points contain NaN or Inf")
        self.points = pts
        if self.sensor_pose is not None:
            pose = np.asarray(self.sensor_pose, dtype=np.float64)
            if pose.shape != (4, 4):
                raise PointCloudError(f"sensor_pose must be (4, 4), got {pose.shape}")
            self.sensor_pose = pose

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass
class NeighborIndex:
    """k-nearest-neighbor result: row q lists the neighbors of query q, nearest first."""

    indices: np.ndarray  # (Q, k) int64 into the searched cloud
    distances: np.ndarray  # (Q, k) float64, meters, non-decreasing per row

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.distances = np.ascontiguousarray(self.distances, dtype=np.float64)
        if self.indices.shape != self.distances.shape or self.indices.ndim != 2:
            raise PointCloudError("indices and distances must share a (Q, k) shape")
        if np.any(np.diff(self.distances, axis=1) < 0):
            raise PointCloudError("distances must be non-decreasing per row")


@dataclass
class ScenePair:
    """Two overlapping scans of one scene from a transmitter and a receiver agent.

    Both clouds are expressed in a shared world frame; `tx_to_rx` maps the
    transmitter's sensor frame into the receiver's.
    """

    tx: PointCloud
    rx: PointCloud
    tx_to_rx: np.ndarray  # (4, 4)
    separation: float  # meters between the two sensors
    comm_range_m: float = DEFAULT_COMM_RANGE_M
    aligned: bool = True

    def __post_init__(self):
        self.tx_to_rx = np.asarray(self.tx_to_rx, dtype=np.float64)
        if self.tx_to_rx.shape != (4, 4):
            raise PointCloudError("tx_to_rx must be a 4x4 transform")
        if self.separation > self.comm_range_m:
            raise PointCloudError(
                f"agent separation {self.separation:.2f} m exceeds the "
                f"communication range {self.comm_range_m:.2f} m"
            )


@dataclass
class SceneParams:
    """Knobs of the synthetic scene generator (also its key=value file schema)."""

    n_points: int = 2048
    n_boxes: int = 5
    range_m: float = 35.0
    comm_range_m: float = DEFAULT_COMM_RANGE_M
    seed: int = 0

    def validate(self):
        if self.n_points <= 0 or self.n_boxes <= 0:
            raise PointCloudError("n_points and n_boxes must be positive")
        if self.range_m <= 0:
            raise PointCloudError("range_m must be positive")
        if self.comm_range_m < _MIN_SEPARATION_M:
            raise PointCloudError(
                f"comm_range_m {self.comm_range_m} cannot accommodate two agents "
                f"(minimum separation {_MIN_SEPARATION_M} m)"
            )


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def load_point_cloud(path, fmt: str) -> PointCloud:
    """Load a cloud from `path` in one of the supported formats.

    Raises ParseError (naming the byte offset) on malformed headers, truncated
    payloads, or zero-point files.
    """
    if fmt not in FORMATS:
        raise PointCloudError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    data = open(path, "rb").read()
    if fmt == "raw_f32":
        return _load_raw_f32(data, str(path))
    return _load_ply(data, fmt, str(path))


def save_point_cloud(pc: PointCloud, path, fmt: str, extra_props: dict[str, np.ndarray] | None = None):
    """Write a cloud to disk. `extra_props` adds per-vertex float32 properties (PLY only)."""
    if fmt not in FORMATS:
        raise PointCloudError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    pts = pc.points.astype(np.float32)
    if fmt == "raw_f32":
        if extra_props:
            raise PointCloudError("raw_f32 cannot carry extra properties")
        with open(path, "wb") as f:
            f.write(struct.pack("<Q", pts.shape[0]))
            f.write(pts.astype("<f4").tobytes())
        return
    extra = extra_props or {}
    for name, vals in extra.items():
        if len(vals) != len(pc):
            raise PointCloudError(f"extra property {name!r} length mismatch")
    names = ["x", "y", "z"] + list(extra)
    header = ["ply"]
    header.append("format ascii 1.0" if fmt == "ply_ascii" else "format binary_little_endian 1.0")
    header.append(f"element vertex {pts.shape[0]}")
    header.extend(f"property float {n}" for n in names)
    header.append("end_header")
    cols = [pts] + [np.asarray(extra[n], dtype=np.float32).reshape(-1, 1) for n in extra]
    table = np.hstack(cols).astype("<f4")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if fmt == "ply_ascii":
            body = "\n".join(" ".join(repr(float(v)) for v in row) for row in table)
            f.write((body + "\n").encode("ascii"))
        else:
            f.write(table.tobytes())


def _load_raw_f32(data: bytes, path: str) -> PointCloud:
    if len(data) < 8:
        raise ParseError(f"{path}: raw_f32 shorter than its 8-byte count prefix", len(data))
    (count,) = struct.unpack("<Q", data[:8])
    if count == 0:
        raise ParseError(f"{path}: raw_f32 declares zero points", 0)
    need = 8 + count * 12
    if len(data) < need:
        raise ParseError(f"{path}: raw_f32 payload truncated ({count} points declared)", len(data))
    pts = np.frombuffer(data[8:need], dtype="<f4").reshape(count, 3)
    return PointCloud(points=pts.copy())


def _load_ply(data: bytes, fmt: str, path: str) -> PointCloud:
    end_tag = b"end_header\n"
    end = data.find(end_tag)
    if not data.startswith(b"ply") or end < 0:
        raise ParseError(f"{path}: not a PLY file (missing magic or end_header)", 0)
    body_off = end + len(end_tag)
    header_lines = data[:end].decode("ascii", errors="replace").splitlines()

    declared_fmt = None
    n_vertex = None
    props: list[str] = []
    offset = 0
    in_vertex = False
    for line in header_lines:
        tok = line.split()
        if not tok:
            offset += len(line) + 1
            continue
        if tok[0] == "format":
            declared_fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertex = int(tok[2])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}: bad element vertex line", offset)
        elif tok[0] == "property" and in_vertex:
            if tok[1] not in ("float", "float32"):
                raise ParseError(f"{path}: only float32 vertex properties supported", offset)
            props.append(tok[2])
        offset += len(line) + 1

    want = "ascii" if fmt == "ply_ascii" else "binary_little_endian"
    if declared_fmt != want:
        raise ParseError(f"{path}: PLY format {declared_fmt!r} does not match requested {fmt}", 0)
    if n_vertex is None:
        raise ParseError(f"{path}: header lacks an element vertex line", 0)
    if n_vertex == 0:
        raise ParseError(f"{path}: vertex count is zero", 0)
    for axis in "xyz":
        if axis not in props:
            raise ParseError(f"{path}: vertex element lacks property {axis!r}", 0)

    n_props = len(props)
    if fmt == "ply_binary_le":
        need = n_vertex * n_props * 4
        if len(data) - body_off < need:
            raise ParseError(
                f"{path}: binary payload truncated ({n_vertex} vertices declared)", len(data)
            )
        table = np.frombuffer(data[body_off : body_off + need], dtype="<f4").reshape(n_vertex, n_props)
    else:
        text = data[body_off:].decode("ascii", errors="replace")
        rows = []
        line_off = body_off
        for line in text.splitlines():
            stripped = line.strip()
            if stripped:
                vals = stripped.split()
                if len(vals) != n_props:
                    raise ParseError(f"{path}: vertex row has {len(vals)} fields, expected {n_props}", line_off)
                try:
                    rows.append([float(v) for v in vals])
                except ValueError:
                    raise ParseError(f"{path}: non-numeric vertex field", line_off)
            line_off += len(line) + 1
            if len(rows) == n_vertex:
                break
        if len(rows) < n_vertex:
            raise ParseError(
                f"{path}: {n_vertex} vertices declared but only {len(rows)} present", line_off
            )
        table = np.asarray(rows, dtype=np.float32)
    cols = [props.index(a) for a in "xyz"]
    return PointCloud(points=np.ascontiguousarray(table[:, cols]))


# ---------------------------------------------------------------------------
# Geometry primitives
# ---------------------------------------------------------------------------

def crop_range(pc: PointCloud, xy_limit: float) -> PointCloud:
    """Keep points with |x| <= xy_limit and |y| <= xy_limit (closed box, z free)."""
    if xy_limit <= 0:
        raise PointCloudError("xy_limit must be positive")
    p = pc.points
    mask = (np.abs(p[:, 0]) <= xy_limit) & (np.abs(p[:, 1]) <= xy_limit)
    if not mask.any():
        raise EmptyCloudError(f"crop to +/-{xy_limit} m removed every point")
    return replace(pc, points=p[mask])


def farthest_point_indices(points: np.ndarray, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min selection. Returns the picked indices in pick order.

    Ties are broken toward the lowest index (argmax returns the first maximum).
    """
    pts = np.asarray(points, dtype=np.float64)
    total = pts.shape[0]
    if not 1 <= n <= total:
        raise PointCloudError(f"cannot sample {n} points from a cloud of {total}")
    if not 0 <= seed_index < total:
        raise PointCloudError(f"seed_index {seed_index} out of range [0, {total})")
    picks = np.empty(n, dtype=np.int64)
    picks[0] = seed_index
    d2 = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for i in range(1, n):
        j = int(np.argmax(d2))
        picks[i] = j
        np.minimum(d2, np.sum((pts - pts[j]) ** 2, axis=1), out=d2)
    return picks


def farthest_point_sample(pc: PointCloud, n: int, seed_index: int = 0) -> PointCloud:
    """FPS subset of `pc` with exactly n points, in pick order."""
    idx = farthest_point_indices(pc.points, n, seed_index)
    return replace(pc, points=pc.points[idx])


def knn(pc: PointCloud, queries: np.ndarray, k: int) -> NeighborIndex:
    """Exact k nearest neighbors of each query among pc.points.

    Distance ties are broken toward the lowest point index. A query that
    coincides with a data point lists that point (distance 0) first.
    """
    pts = np.asarray(pc.points, dtype=np.float64)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if k > pts.shape[0]:
        raise PointCloudError(f"k={k} exceeds cloud size {pts.shape[0]}")
    d2 = _sq_dists(q, pts)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dists = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return NeighborIndex(indices=order, distances=dists)


def tree_knn(points: np.ndarray, queries: np.ndarray, k: int):
    """kd-tree k-NN for pipeline internals (fast; ties broken arbitrarily but
    deterministically). Returns (indices (Q,k), distances (Q,k))."""
    tree = cKDTree(np.asarray(points, dtype=np.float64))
    dists, idx = tree.query(np.asarray(queries, dtype=np.float64), k=k)
    if k == 1:
        dists = dists[:, None]
        idx = idx[:, None]
    return idx.astype(np.int64), dists


def radius_counts(points: np.ndarray, queries: np.ndarray, radius: float) -> np.ndarray:
    """Number of points within `radius` of each query (closed ball)."""
    tree = cKDTree(np.asarray(points, dtype=np.float64))
    return np.asarray(
        tree.query_ball_point(np.asarray(queries, dtype=np.float64), r=radius, return_length=True),
        dtype=np.int64,
    )


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def estimate_normals(pc: PointCloud, k: int = 16):
    """Per-point unit normals from k-neighborhood PCA.

    The normal is the eigenvector of the smallest covariance eigenvalue, with
    its sign fixed so z >= 0 (ties resolved by y >= 0, then x >= 0). Rank-zero
    neighborhoods yield a zero vector and are flagged.

    Returns (normals (N,3) float64, degenerate (N,) bool).
    """
    if k < 3:
        raise PointCloudError("normal estimation needs k >= 3")
    pts = np.asarray(pc.points, dtype=np.float64)
    if pts.shape[0] < k:
        raise PointCloudError(f"cloud of {pts.shape[0]} points is smaller than k={k}")
    idx, _ = tree_knn(pts, pts, k)
    nb = pts[idx]  # (N, k, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    w, v = np.linalg.eigh(cov)
    normals = v[:, :, 0].copy()
    degenerate = w[:, 2] < 1e-18
    normals[degenerate] = 0.0

    # Sign rule with snapping so components that are zero up to eigensolver
    # noise do not flip the orientation arbitrarily.
    snapped = normals.copy()
    scale = np.abs(normals).max(axis=1, keepdims=True)
    snapped[np.abs(normals) <= 1e-9 * np.maximum(scale, 1e-30)] = 0.0
    flip = (snapped[:, 2] < 0) | (
        (snapped[:, 2] == 0) & ((snapped[:, 1] < 0) | ((snapped[:, 1] == 0) & (snapped[:, 0] < 0)))
    )
    normals[flip] *= -1.0
    return normals, degenerate


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

_MIN_SEPARATION_M = 2.0
_SENSOR_HEIGHT_M = 1.7
_MAX_RAY_RANGE_M = 120.0


def synth_scene(seed: int, params: SceneParams) -> ScenePair:
    """Deterministic synthetic LiDAR scene pair.

    Builds a ground plane, axis-aligned box obstacles, and 1-2 wall segments,
    then scans it from two sensor poses by angular ray casting (equal angular
    spacing makes near surfaces denser, and the nearest hit per ray handles
    occlusion). Each scan is FPS-resampled to params.n_points.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    r = params.range_m

    boxes = []
    n_walls = int(rng.integers(1, 3))
    for _ in range(n_walls):
        along_x = bool(rng.integers(0, 2))
        length = rng.uniform(0.5 * r, 1.2 * r)
        offset = rng.uniform(-0.6 * r, 0.6 * r)
        start = rng.uniform(-0.6 * r, 0.0)
        height = rng.uniform(2.0, 4.0)
        if along_x:
            lo = (start, offset - 0.15, 0.0)
            hi = (start + length, offset + 0.15, height)
        else:
            lo = (offset - 0.15, start, 0.0)
            hi = (offset + 0.15, start + length, height)
        boxes.append((np.array(lo), np.array(hi)))
    for _ in range(params.n_boxes):
        cx, cy = rng.uniform(-0.75 * r, 0.75 * r, size=2)
        sx, sy = rng.uniform(1.0, 6.0, size=2)
        h = rng.uniform(0.8, 3.2)
        boxes.append((np.array([cx - sx / 2, cy - sy / 2, 0.0]), np.array([cx + sx / 2, cy + sy / 2, h])))

    tx_pos = _place_sensor(rng, boxes, r)
    tx_cloud = _scan(tx_pos, boxes, params, f"seed{seed}_tx")

    # Re-place the receiver until the two scans actually overlap: fusion relies
    # on a shared visible region, and occlusion can wall two agents apart.
    max_sep = min(params.comm_range_m, 0.6 * r + _MIN_SEPARATION_M)
    best = None
    for _ in range(8):
        rx_pos = None
        for _ in range(1000):
            cand = _place_sensor(rng, boxes, r)
            sep = float(np.linalg.norm(cand - tx_pos))
            if _MIN_SEPARATION_M <= sep <= max_sep:
                rx_pos = cand
                break
        if rx_pos is None:
            raise PointCloudError("could not place two agents within the communication range")
        rx_cloud = _scan(rx_pos, boxes, params, f"seed{seed}_rx")
        d, _ = tree_knn(rx_cloud.points, tx_cloud.points, 1)
        frac = float(np.mean(d[:, 0] <= 0.5))
        if best is None or frac > best[0]:
            best = (frac, rx_pos, rx_cloud)
        if frac >= 0.12:
            break
    _, rx_pos, rx_cloud = best

    tx_pose = np.eye(4)
    tx_pose[:3, 3] = tx_pos
    rx_pose = np.eye(4)
    rx_pose[:3, 3] = rx_pos
    tx_cloud.sensor_pose = tx_pose
    rx_cloud.sensor_pose = rx_pose
    tx_to_rx = np.linalg.inv(rx_pose) @ tx_pose
    separation = float(np.linalg.norm(rx_pos - tx_pos))
    return ScenePair(
        tx=tx_cloud,
        rx=rx_cloud,
        tx_to_rx=tx_to_rx,
        separation=separation,
        comm_range_m=params.comm_range_m,
    )


def _place_sensor(rng, boxes, r):
    for _ in range(1000):
        pos = np.array(
            [rng.uniform(-0.4 * r, 0.4 * r), rng.uniform(-0.4 * r, 0.4 * r), _SENSOR_HEIGHT_M]
        )
        if not any(
            (pos[0] > lo[0] - 1) and (pos[0] < hi[0] + 1) and (pos[1] > lo[1] - 1) and (pos[1] < hi[1] + 1)
            for lo, hi in boxes
        ):
            return pos
    raise PointCloudError("could not place a sensor outside the obstacles")


def _ray_dirs(n_az: int, n_el: int) -> np.ndarray:
    az = np.linspace(0.0, 2 * np.pi, n_az, endpoint=False)
    el = np.deg2rad(np.linspace(-30.0, 3.0, n_el))
    aa, ee = np.meshgrid(az, el, indexing="ij")
    d = np.stack(
        [np.cos(ee) * np.cos(aa), np.cos(ee) * np.sin(aa), np.sin(ee)], axis=-1
    ).reshape(-1, 3)
    return d


def _ray_cast(origin: np.ndarray, dirs: np.ndarray, boxes) -> np.ndarray:
    """Nearest hit per ray against ground plane z=0 and the AABB list."""
    t_best = np.full(dirs.shape[0], np.inf)
    dz = dirs[:, 2]
    down = dz < -1e-9
    t_ground = np.where(down, -origin[2] / np.where(down, dz, 1.0), np.inf)
    t_best = np.minimum(t_best, np.where(t_ground > 1e-6, t_ground, np.inf))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for lo, hi in boxes:
            t1 = (lo - origin) * inv
            t2 = (hi - origin) * inv
            tn = np.nanmax(np.minimum(t1, t2), axis=1)
            tf = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tf >= tn) & (tn > 1e-6)
            t_best = np.where(hit, np.minimum(t_best, tn), t_best)
    ok = np.isfinite(t_best) & (t_best <= _MAX_RAY_RANGE_M)
    return origin + t_best[ok, None] * dirs[ok]


def _scan(origin: np.ndarray, boxes, params: SceneParams, frame_id: str) -> PointCloud:
    n_az, n_el = 192, 30
    for _ in range(4):
        hits = _ray_cast(origin, _ray_dirs(n_az, n_el), boxes)
        inside = (np.abs(hits[:, 0]) <= params.range_m) & (np.abs(hits[:, 1]) <= params.range_m)
        hits = hits[inside]
        if hits.shape[0] >= int(1.25 * params.n_points):
            break
        n_az = int(n_az * 1.5)
        n_el = int(n_el * 1.25)
    else:
        raise PointCloudError(
            f"scene yields only {hits.shape[0]} surface samples; "
            f"cannot sample {params.n_points} points"
        )
    idx = farthest_point_indices(hits, params.n_points, seed_index=0)
    return PointCloud(points=hits[idx].astype(np.float32), frame_id=frame_id)
