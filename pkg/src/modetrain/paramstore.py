"""Flat parameter vector, layer table, trajectory snapshots, and their disk format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

# Layer roles. The transform side carries the reconstruction path; the three
# entropy-side roles only influence the rate terms.
ROLE_ANALYSIS = "analysis"
ROLE_SYNTHESIS = "synthesis"
ROLE_HYPER_ANALYSIS = "hyper_analysis"
ROLE_HYPER_SYNTHESIS = "hyper_synthesis"
ROLE_ENTROPY_PARAMS = "entropy_params"

ALL_ROLES = (
    ROLE_ANALYSIS,
    ROLE_SYNTHESIS,
    ROLE_HYPER_ANALYSIS,
    ROLE_HYPER_SYNTHESIS,
    ROLE_ENTROPY_PARAMS,
)
TRANSFORM_ROLES = frozenset({ROLE_ANALYSIS, ROLE_SYNTHESIS})
ENTROPY_ROLES = frozenset({ROLE_HYPER_ANALYSIS, ROLE_HYPER_SYNTHESIS, ROLE_ENTROPY_PARAMS})

_MAGIC = b"TRJ1"
_MASK_MAGIC = b"MSK1"


@dataclass(frozen=True)
class LayerSpan:
    """Contiguous slice of the flat vector belonging to one named layer."""

    name: str
    role: str
    start: int
    len: int

    def __post_init__(self):
        if self.role not in ALL_ROLES:
            raise ValueError(f"unknown layer role {self.role!r}")
        if self.len < 1:
            raise ValueError(f"layer {self.name!r} has len {self.len}, must be >= 1")
        if self.start < 0:
            raise ValueError(f"layer {self.name!r} has negative start")

    @property
    def stop(self) -> int:
        return self.start + self.len

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


def validate_layers(layers: list[LayerSpan], n: int) -> None:
    """Spans must be pairwise disjoint and cover [0, n) exactly."""
    ordered = sorted(layers, key=lambda s: s.start)
    pos = 0
    for span in ordered:
        if span.start != pos:
            raise ValueError(
                f"layer table has a gap or overlap at index {pos} (next span {span.name!r} starts at {span.start})"
            )
        pos = span.stop
    if pos != n:
        raise ValueError(f"layer table covers [0, {pos}) but vector has length {n}")


@dataclass
class FlatParams:
    """All trainable parameters as one contiguous float64 vector plus its layer table."""

    values: np.ndarray
    layers: list[LayerSpan]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        validate_layers(self.layers, self.values.size)

    @property
    def n(self) -> int:
        return self.values.size

    def copy(self) -> "FlatParams":
        return FlatParams(self.values.copy(), list(self.layers))

    def layer(self, name: str) -> LayerSpan:
        for span in self.layers:
            if span.name == name:
                return span
        raise KeyError(f"no layer named {name!r}")

    def role_mask(self, roles) -> np.ndarray:
        """Boolean mask over the flat vector for a role or set of roles."""
        if isinstance(roles, str):
            roles = {roles}
        mask = np.zeros(self.n, dtype=bool)
        for span in self.layers:
            if span.role in roles:
                mask[span.slice] = True
        return mask


@dataclass
class TrajectorySnapshotLog:
    """Per-epoch parameter snapshots: one row of length N per recorded epoch."""

    epochs: list[int] = field(default_factory=list)
    rows: list[np.ndarray] = field(default_factory=list)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n(self) -> int:
        if not self.rows:
            raise ValueError("empty snapshot log has no row length")
        return self.rows[0].size

    def matrix(self) -> np.ndarray:
        """Snapshots stacked as an (n_rows, N) array."""
        if not self.rows:
            raise ValueError("empty snapshot log")
        return np.stack(self.rows, axis=0)

    def param_trajectories(self) -> np.ndarray:
        """Transposed view: one row per parameter, one column per epoch."""
        return self.matrix().T


def record_snapshot(log: TrajectorySnapshotLog, params: FlatParams, epoch: int) -> TrajectorySnapshotLog:
    """Append a copy of the current parameter vector at a strictly increasing epoch index."""
    if log.epochs and epoch <= log.epochs[-1]:
        raise ValueError(f"non-monotone epoch: {epoch} after {log.epochs[-1]}")
    if log.rows and params.n != log.rows[0].size:
        raise ValueError(f"row length {params.n} does not match log width {log.rows[0].size}")
    log.epochs.append(int(epoch))
    log.rows.append(params.values.copy())
    return log


def write_snapshot_file(log: TrajectorySnapshotLog, path) -> None:
    """Binary layout: magic 'TRJ1', u32 N, u32 row count, u32 epoch indices, float64 rows.

    All integers and floats are little-endian; roundtrips are bit exact.
    """
    if not log.rows:
        raise ValueError("refusing to write an empty snapshot log")
    n = log.n
    rows = log.matrix().astype("<f8", copy=False)
    epochs = np.asarray(log.epochs, dtype="<u4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", n, len(log.epochs)))
        fh.write(epochs.tobytes())
        fh.write(rows.tobytes())


def read_snapshot_file(path) -> TrajectorySnapshotLog:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != _MAGIC:
        raise ValueError(f"bad magic in snapshot file {path}")
    if len(data) < 12:
        raise ValueError(f"truncated snapshot header in {path}")
    n, n_rows = struct.unpack("<II", data[4:12])
    epochs_end = 12 + 4 * n_rows
    if len(data) < epochs_end:
        raise ValueError(f"truncated epoch index block in {path}")
    epochs = np.frombuffer(data[12:epochs_end], dtype="<u4")
    body = data[epochs_end:]
    expected = n * n_rows * 8
    if len(body) != expected:
        raise ValueError(
            f"size mismatch in {path}: header implies {expected} payload bytes, found {len(body)}"
        )
    rows = np.frombuffer(body, dtype="<f8").reshape(n_rows, n)
    epoch_list = [int(e) for e in epochs]
    if any(b <= a for a, b in zip(epoch_list, epoch_list[1:])):
        raise ValueError(f"non-monotone epoch indices in {path}")
    return TrajectorySnapshotLog(epochs=epoch_list, rows=[row.copy() for row in rows])


def sample_indices(n: int, s: int, seed: int) -> np.ndarray:
    """S distinct indices drawn uniformly without replacement from [0, n), sorted."""
    if s > n:
        raise ValueError(f"cannot sample {s} distinct indices from {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    idx = rng.choice(n, size=s, replace=False)
    idx.sort()
    return idx.astype(np.int64)


def write_mask_file(mask: np.ndarray, path) -> None:
    """Bitset file: magic 'MSK1', u32 length, packed bits (big-endian within bytes)."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(_MASK_MAGIC)
        fh.write(struct.pack("<I", mask.size))
        fh.write(np.packbits(mask).tobytes())


def read_mask_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != _MASK_MAGIC:
        raise ValueError(f"bad magic in mask file {path}")
    if len(data) < 8:
        raise ValueError(f"truncated mask header in {path}")
    (n,) = struct.unpack("<I", data[4:8])
    packed = np.frombuffer(data[8:], dtype=np.uint8)
    if packed.size != (n + 7) // 8:
        raise ValueError(f"size mismatch in mask file {path}")
    return np.unpackbits(packed)[:n].astype(bool)
