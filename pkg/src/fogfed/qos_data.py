"""QoS observation datasets: WS-Dream ingestion, feature encoding, splits and shards.

Records are stored column-wise (one numpy array per field) so the full
339 x 5825 WS-Dream grid fits comfortably in memory.  Feature tables keep
the one-hot blocks as integer indices; :meth:`FeatureTable.dense` expands
them when a dense matrix is wanted.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fogfed.geo import haversine_km, map_lat, map_lon

log = logging.getLogger(__name__)

WSDREAM_FILES = {
    "rt": "rtMatrix.txt",
    "tp": "tpMatrix.txt",
    "users": "userlist.txt",
    "nodes": "wslist.txt",
}
# (id, latitude, longitude) column positions in the stock WS-Dream lists
USER_COLUMNS = (0, 5, 6)
NODE_COLUMNS = (0, 7, 8)


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class QosRecord:
    user_id: int
    node_id: int
    user_lat: float
    user_lon: float
    node_lat: float
    node_lon: float
    response_time: float
    throughput: float


@dataclass(frozen=True)
class QosDataset:
    user_id: np.ndarray
    node_id: np.ndarray
    user_lat: np.ndarray
    user_lon: np.ndarray
    node_lat: np.ndarray
    node_lon: np.ndarray
    rt: np.ndarray
    tp: np.ndarray
    n_users: int
    n_nodes: int
    user_coords: np.ndarray  # (n_users, 2) lat/lon, NaN where unknown
    node_coords: np.ndarray
    filtered: int = 0

    def __len__(self):
        return len(self.rt)

    def record(self, i: int) -> QosRecord:
        return QosRecord(
            int(self.user_id[i]), int(self.node_id[i]),
            float(self.user_lat[i]), float(self.user_lon[i]),
            float(self.node_lat[i]), float(self.node_lon[i]),
            float(self.rt[i]), float(self.tp[i]),
        )

    @property
    def records(self) -> list[QosRecord]:
        return [self.record(i) for i in range(len(self))]

    def subset(self, indices) -> QosDataset:
        idx = np.asarray(indices, dtype=np.int64)
        return QosDataset(
            self.user_id[idx], self.node_id[idx],
            self.user_lat[idx], self.user_lon[idx],
            self.node_lat[idx], self.node_lon[idx],
            self.rt[idx], self.tp[idx],
            self.n_users, self.n_nodes, self.user_coords, self.node_coords, 0,
        )

    @classmethod
    def from_grid(cls, rt, tp, user_coords, node_coords) -> QosDataset:
        """Build a dataset from (users x nodes) matrices; cells not positive in both are dropped."""
        rt = np.asarray(rt, dtype=float)
        tp = np.asarray(tp, dtype=float)
        user_coords = np.asarray(user_coords, dtype=float).reshape(-1, 2)
        node_coords = np.asarray(node_coords, dtype=float).reshape(-1, 2)
        n_users, n_nodes = rt.shape
        known = np.isfinite(user_coords).all(axis=1)[:, None] & np.isfinite(node_coords).all(axis=1)[None, :]
        keep = (rt > 0) & (tp > 0) & np.isfinite(rt) & np.isfinite(tp) & known
        u, n = np.nonzero(keep)
        return cls(
            user_id=u.astype(np.int64),
            node_id=n.astype(np.int64),
            user_lat=user_coords[u, 0], user_lon=user_coords[u, 1],
            node_lat=node_coords[n, 0], node_lon=node_coords[n, 1],
            rt=rt[u, n], tp=tp[u, n],
            n_users=n_users, n_nodes=n_nodes,
            user_coords=user_coords, node_coords=node_coords,
            filtered=int(keep.size - keep.sum()),
        )


# --------------------------------------------------------------------------
# Ingestion


def _read_matrix(path: Path, max_rows=None, max_cols=None) -> np.ndarray:
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if max_rows is not None and len(rows) >= max_rows:
                break
            parts = line.split()
            if not parts:
                continue
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise IngestionError(f"{path}:{lineno}: expected {width} columns, found {len(parts)}")
            if max_cols is not None:
                parts = parts[:max_cols]
            try:
                rows.append([float(x) for x in parts])
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: non-numeric cell ({exc})") from None
    if not rows:
        raise IngestionError(f"{path}: empty matrix")
    return np.array(rows, dtype=float)


def _read_meta(path: Path, columns: Sequence[int]) -> dict[int, tuple[float, float]]:
    id_col, lat_col, lon_col = columns
    out = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped[0] in "[=-#":
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) <= max(columns):
                parts = stripped.split()
            if len(parts) <= max(columns):
                raise IngestionError(f"{path}:{lineno}: expected at least {max(columns) + 1} columns")
            try:
                ident = int(parts[id_col])
            except ValueError:
                raise IngestionError(f"{path}:{lineno}: bad id {parts[id_col]!r}") from None
            try:
                lat, lon = float(parts[lat_col]), float(parts[lon_col])
            except ValueError:
                lat = lon = float("nan")
            out[ident] = (lat, lon)
    return out


def load_wsdream(
    rt_matrix_path,
    tp_matrix_path,
    user_meta_path,
    node_meta_path,
    *,
    user_columns: Sequence[int] = USER_COLUMNS,
    node_columns: Sequence[int] = NODE_COLUMNS,
    max_users: int | None = None,
    max_nodes: int | None = None,
) -> QosDataset:
    """Load WS-Dream style matrices plus user/node location lists.

    Matrix row ``i`` is user ``i`` and column ``j`` is node ``j``.  Cells that
    are non-positive in either matrix (WS-Dream marks failed invocations with
    -1) are dropped and counted in ``filtered``; so are cells whose user or
    node has no usable coordinates.

    Args:
        max_users, max_nodes: keep only the leading block of the grid.

    Raises:
        IngestionError: ragged or non-numeric matrix rows, mismatched matrix
            shapes, or a row/column without a metadata entry.
    """
    paths = [Path(p) for p in (rt_matrix_path, tp_matrix_path, user_meta_path, node_meta_path)]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(p)
    rt = _read_matrix(paths[0], max_users, max_nodes)
    tp = _read_matrix(paths[1], max_users, max_nodes)
    if rt.shape != tp.shape:
        raise IngestionError(f"matrix shapes differ: {paths[0]} {rt.shape} vs {paths[1]} {tp.shape}")
    users = _read_meta(paths[2], user_columns)
    nodes = _read_meta(paths[3], node_columns)
    n_users, n_nodes = rt.shape
    for i in range(n_users):
        if i not in users:
            raise IngestionError(f"{paths[2]}: no entry for user id {i}")
    for j in range(n_nodes):
        if j not in nodes:
            raise IngestionError(f"{paths[3]}: no entry for node id {j}")
    ds = QosDataset.from_grid(
        rt, tp,
        [users[i] for i in range(n_users)],
        [nodes[j] for j in range(n_nodes)],
    )
    log.info("loaded %d records (%d cells filtered) from %s", len(ds), ds.filtered, paths[0])
    return ds


def load_wsdream_dir(directory, **kwargs) -> QosDataset:
    d = Path(directory)
    return load_wsdream(*(d / WSDREAM_FILES[k] for k in ("rt", "tp", "users", "nodes")), **kwargs)


def write_wsdream(dataset: QosDataset, directory) -> Path:
    """Write a dataset in the WS-Dream text layout; absent cells become -1."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rt = np.full((dataset.n_users, dataset.n_nodes), -1.0)
    tp = np.full_like(rt, -1.0)
    rt[dataset.user_id, dataset.node_id] = dataset.rt
    tp[dataset.user_id, dataset.node_id] = dataset.tp
    for name, grid in (("rt", rt), ("tp", tp)):
        with open(d / WSDREAM_FILES[name], "w") as fh:
            for row in grid:
                fh.write("\t".join(repr(float(x)) for x in row) + "\n")
    with open(d / WSDREAM_FILES["users"], "w") as fh:
        fh.write("[User ID]\t[IP Address]\t[Country]\t[IP No.]\t[AS]\t[Latitude]\t[Longitude]\n")
        fh.write("=" * 40 + "\n")
        for i, (lat, lon) in enumerate(dataset.user_coords):
            fh.write(f"{i}\t-\t-\t-\t-\t{float(lat)!r}\t{float(lon)!r}\n")
    with open(d / WSDREAM_FILES["nodes"], "w") as fh:
        fh.write("[Service ID]\t[WSDL Address]\t[Service Provider]\t[IP Address]\t[Country]"
                 "\t[IP No.]\t[AS]\t[Latitude]\t[Longitude]\n")
        fh.write("=" * 40 + "\n")
        for j, (lat, lon) in enumerate(dataset.node_coords):
            fh.write(f"{j}\t-\t-\t-\t-\t-\t-\t{float(lat)!r}\t{float(lon)!r}\n")
    return d


# --------------------------------------------------------------------------
# Preprocessing


@dataclass(frozen=True)
class Normalization:
    rt_min: float
    rt_max: float
    tp_min: float
    tp_max: float

    def bounds(self, target: str) -> tuple[float, float]:
        if target == "rt":
            return self.rt_min, self.rt_max
        if target == "tp":
            return self.tp_min, self.tp_max
        raise ValueError(f"unknown target {target!r}")

    def normalize(self, target: str, y):
        lo, hi = self.bounds(target)
        return (np.asarray(y, dtype=float) - lo) / (hi - lo)

    def denormalize(self, target: str, z):
        lo, hi = self.bounds(target)
        return np.asarray(z, dtype=float) * (hi - lo) + lo


@dataclass(frozen=True)
class FeatureTable:
    """Encoded features: one-hot user and node blocks (stored as indices) plus mapped coordinates."""

    user_index: np.ndarray  # -1 encodes an all-zero user block
    node_index: np.ndarray
    coords: np.ndarray  # (N, 4): user lat, user lon, node lat, node lon mapped to [0, 1]
    n_users: int
    n_nodes: int
    y_rt: np.ndarray
    y_tp: np.ndarray
    normalization: Normalization

    @property
    def width(self) -> int:
        return self.n_users + self.n_nodes + 4

    def __len__(self):
        return len(self.user_index)

    def targets(self, target: str) -> np.ndarray:
        return {"rt": self.y_rt, "tp": self.y_tp}[target]

    def take(self, indices) -> FeatureTable:
        idx = np.asarray(indices, dtype=np.int64)
        return FeatureTable(
            self.user_index[idx], self.node_index[idx], self.coords[idx],
            self.n_users, self.n_nodes, self.y_rt[idx], self.y_tp[idx], self.normalization,
        )

    def dense(self) -> np.ndarray:
        return dense_features(self.user_index, self.node_index, self.coords, self.n_users, self.n_nodes)

    def inputs(self) -> EncodedInputs:
        return EncodedInputs(self.user_index, self.node_index, self.coords, self.n_users, self.n_nodes)


@dataclass(frozen=True)
class EncodedInputs:
    """Model input whose one-hot blocks are kept as indices."""

    user_index: np.ndarray
    node_index: np.ndarray
    coords: np.ndarray
    n_users: int
    n_nodes: int

    @property
    def width(self) -> int:
        return self.n_users + self.n_nodes + 4

    def __len__(self):
        return len(self.user_index)

    def take(self, idx) -> EncodedInputs:
        return EncodedInputs(self.user_index[idx], self.node_index[idx], self.coords[idx], self.n_users, self.n_nodes)

    def dense(self) -> np.ndarray:
        return dense_features(self.user_index, self.node_index, self.coords, self.n_users, self.n_nodes)


def dense_features(user_index, node_index, coords, n_users, n_nodes) -> np.ndarray:
    n = len(user_index)
    X = np.zeros((n, n_users + n_nodes + 4))
    rows = np.arange(n)
    u = np.asarray(user_index)
    v = np.asarray(node_index)
    X[rows[u >= 0], u[u >= 0]] = 1.0
    X[rows[v >= 0], n_users + v[v >= 0]] = 1.0
    X[:, n_users + n_nodes:] = coords
    return X


def encode_coords(user_lat, user_lon, node_lat, node_lon) -> np.ndarray:
    return np.column_stack([map_lat(user_lat), map_lon(user_lon), map_lat(node_lat), map_lon(node_lon)])


def fit_normalization(dataset: QosDataset, train_indices) -> Normalization:
    idx = np.asarray(train_indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("training split is empty")
    rt = dataset.rt[idx]
    tp = dataset.tp[idx]
    norm = Normalization(float(rt.min()), float(rt.max()), float(tp.min()), float(tp.max()))
    if norm.rt_max == norm.rt_min or norm.tp_max == norm.tp_min:
        raise ValueError("degenerate target range in training split (max == min)")
    return norm


def preprocess(dataset: QosDataset, train_indices) -> FeatureTable:
    """Encode every record; target scaling uses only the training split's extrema."""
    norm = fit_normalization(dataset, train_indices)
    return FeatureTable(
        user_index=dataset.user_id.astype(np.int64),
        node_index=dataset.node_id.astype(np.int64),
        coords=encode_coords(dataset.user_lat, dataset.user_lon, dataset.node_lat, dataset.node_lon),
        n_users=dataset.n_users,
        n_nodes=dataset.n_nodes,
        y_rt=norm.normalize("rt", dataset.rt),
        y_tp=norm.normalize("tp", dataset.tp),
        normalization=norm,
    )


def train_test_split(n_or_dataset, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(test_fraction * n))
    if n_test < 1 or n - n_test < 1:
        raise ValueError(f"cannot split {n} records with test_fraction={test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


@dataclass(frozen=True)
class LocalShard:
    provider_id: int
    indices: np.ndarray  # positions in the partitioned dataset

    def __len__(self):
        return len(self.indices)


def partition_by_provider(dataset: QosDataset, node_to_provider: Mapping[int, int], indices=None) -> list[LocalShard]:
    """Split records (optionally only ``indices``) by the provider owning each record's node.

    Every provider named in ``node_to_provider`` gets a shard, possibly empty.
    """
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices, dtype=np.int64)
    nodes = dataset.node_id[idx]
    missing = sorted(set(np.unique(nodes).tolist()) - set(node_to_provider))
    if missing:
        raise KeyError(f"nodes without a provider: {missing[:10]}")
    lookup = np.full(dataset.n_nodes, -1, dtype=np.int64)
    for node, prov in node_to_provider.items():
        if 0 <= node < dataset.n_nodes:
            lookup[node] = prov
    owner = lookup[nodes]
    return [LocalShard(p, idx[owner == p]) for p in sorted(set(node_to_provider.values()))]


def block_mapping(n_nodes: int, block_sizes: Sequence[int]) -> dict[int, int]:
    """Assign consecutive node blocks to providers 0, 1, ...; sizes must sum to ``n_nodes``."""
    if sum(block_sizes) != n_nodes:
        raise ValueError(f"block sizes sum to {sum(block_sizes)}, expected {n_nodes}")
    out = {}
    node = 0
    for prov, size in enumerate(block_sizes):
        for _ in range(size):
            out[node] = prov
            node += 1
    return out


# --------------------------------------------------------------------------
# Synthetic data

SYNTH_BASE_RT = 0.05  # seconds at zero distance
SYNTH_RT_PER_KM = 1.0 / 2000.0
SYNTH_MAX_TP = 120.0
SYNTH_TP_KM = 1500.0


def synthetic_rt(distance_km):
    return SYNTH_BASE_RT + SYNTH_RT_PER_KM * np.asarray(distance_km, dtype=float)


def synthetic_tp(distance_km):
    return SYNTH_MAX_TP / (1.0 + np.asarray(distance_km, dtype=float) / SYNTH_TP_KM)


def synthesize(
    seed: int,
    n_users: int,
    n_nodes: int,
    noise: float = 0.05,
    lat_range=(25.0, 60.0),
    lon_range=(-20.0, 40.0),
    user_coords=None,
    node_coords=None,
) -> QosDataset:
    """Distance-driven synthetic QoS grid.

    Response time grows linearly with great-circle distance and throughput
    decays with it.  ``noise`` scales both a per-node slowdown and a
    multiplicative per-cell perturbation; with ``noise=0`` the data is an
    exact function of distance.
    """
    if n_users < 1 or n_nodes < 1:
        raise ValueError("n_users and n_nodes must be >= 1")
    rng = np.random.default_rng(seed)

    def draw(n):
        return np.column_stack([rng.uniform(*lat_range, size=n), rng.uniform(*lon_range, size=n)])

    uc = draw(n_users) if user_coords is None else np.asarray(user_coords, dtype=float)
    nc = draw(n_nodes) if node_coords is None else np.asarray(node_coords, dtype=float)
    dist = haversine_km(uc[:, 0:1], uc[:, 1:2], nc[None, :, 0], nc[None, :, 1])
    node_slow = rng.uniform(0.0, 1.0, size=n_nodes)
    cell = rng.standard_normal(size=dist.shape)
    cell_tp = rng.standard_normal(size=dist.shape)
    rt = synthetic_rt(dist) * (1.0 + noise * node_slow[None, :]) * np.exp(noise * cell)
    tp = synthetic_tp(dist) / (1.0 + noise * node_slow[None, :]) * np.exp(noise * cell_tp)
    return QosDataset.from_grid(rt, tp, uc, nc)
