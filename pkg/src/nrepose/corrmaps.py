"""Correspondence maps, dense loss maps and sparse truncated loss maps."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Sequence, Union

import numpy as np

from .geometry import OUT, GridFrame, OutOfView, bilinear_neighbors

MAGIC = b"NRLM"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdQ")
_RECORD = np.dtype([("row", "<u4"), ("col", "<u4"), ("value", "<f8")])
HEADER_BYTES = _HEADER.size
RECORD_BYTES = _RECORD.itemsize


def _l2_normalize(a: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(n > 0, n, 1.0)


@dataclass(frozen=True, eq=False)
class DescriptorGrid:
    """``rows x cols x dim`` descriptors sampled every ``frame.stride`` pixels."""

    data: np.ndarray
    frame: GridFrame
    normalized: bool = False

    def __post_init__(self):
        # own a copy: the array is frozen below and must not alias caller state
        data = np.array(self.data, dtype=float)
        if data.ndim != 3:
            raise ValueError("descriptor grid must be rows x cols x dim")
        if data.shape[:2] != (self.frame.rows, self.frame.cols):
            raise ValueError(f"grid shape {data.shape[:2]} does not match frame "
                             f"{(self.frame.rows, self.frame.cols)}")
        if not np.all(np.isfinite(data)):
            raise ValueError("descriptor grid contains non-finite values")
        if self.normalized:
            norms = np.linalg.norm(data, axis=-1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("descriptors flagged normalized are not unit norm")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def normalized_copy(self) -> "DescriptorGrid":
        if self.normalized:
            return self
        return DescriptorGrid(_l2_normalize(self.data), self.frame, normalized=True)


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """Softmax over grid cells; the ``out`` category has probability 0."""

    probs: np.ndarray

    out_prob = 0.0

    @property
    def shape(self):
        return self.probs.shape


def _scores(h, grid: DescriptorGrid, normalize: bool) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != grid.dim:
        raise ValueError(f"descriptor dim {h.shape[-1]} != grid dim {grid.dim}")
    data = grid.data
    if normalize:
        h = _l2_normalize(h)
        if not grid.normalized:
            data = _l2_normalize(data)
    return data.reshape(-1, grid.dim) @ h.T


def _softmax_columns(s: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite correlation scores")
    s = s - s.max(axis=0, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=0, keepdims=True)


def correspondence_map(h, grid: DescriptorGrid, temperature: float = 1.0,
                       normalize: bool = True) -> CorrespondenceMap:
    """Softmax of descriptor cross-correlation over every grid cell."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    h = np.asarray(h, dtype=float).reshape(-1)
    s = _scores(h[None], grid, normalize) / temperature
    return CorrespondenceMap(_softmax_columns(s)[:, 0].reshape(grid.rows, grid.cols))


def correspondence_maps(hs, grid: DescriptorGrid, temperature: float = 1.0,
                        normalize: bool = True) -> np.ndarray:
    """Batched :func:`correspondence_map`: returns ``(N, rows, cols)`` probabilities."""
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    hs = np.atleast_2d(np.asarray(hs, dtype=float))
    s = _scores(hs, grid, normalize) / temperature
    return _softmax_columns(s).T.reshape(len(hs), grid.rows, grid.cols)


def neg_log_map(C: Union[CorrespondenceMap, np.ndarray]) -> np.ndarray:
    """Dense loss map ``-ln C``; zero probability gives ``+inf``."""
    probs = C.probs if isinstance(C, CorrespondenceMap) else np.asarray(C, dtype=float)
    with np.errstate(divide="ignore"):
        return -np.log(probs)


class RobustLossMap:
    """Truncated loss map stored sparsely as its non-truncated set.

    Cells not listed in ``index`` (row-major flat index, sorted ascending)
    implicitly hold ``truncation``, as does ``out``.
    """

    __slots__ = ("rows", "cols", "truncation", "index", "values")

    def __init__(self, rows: int, cols: int, truncation: float, index, values):
        index = np.asarray(index, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=float).reshape(-1)
        if index.shape != values.shape:
            raise ValueError("index and values must have the same length")
        if len(index):
            if np.any(np.diff(index) <= 0):
                raise ValueError("gamma must be strictly increasing row-major")
            if index[0] < 0 or index[-1] >= rows * cols:
                raise ValueError("gamma index out of range")
            if np.any(values < 0) or np.any(~(values < truncation)):
                raise ValueError("stored values must lie in [0, truncation)")
        index.setflags(write=False)
        values.setflags(write=False)
        self.rows = int(rows)
        self.cols = int(cols)
        self.truncation = float(truncation)
        self.index = index
        self.values = values

    @classmethod
    def empty(cls, rows: int, cols: int, truncation: float | None = None) -> "RobustLossMap":
        T = float(np.log1p(rows * cols)) if truncation is None else truncation
        return cls(rows, cols, T, [], [])

    def __len__(self):
        return len(self.index)

    def __eq__(self, other):
        return (isinstance(other, RobustLossMap) and self.rows == other.rows
                and self.cols == other.cols and self.truncation == other.truncation
                and np.array_equal(self.index, other.index)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return (f"RobustLossMap({self.rows}x{self.cols}, |gamma|={len(self)}, "
                f"truncation={self.truncation:.6g})")

    @property
    def gamma(self) -> list:
        """Stored cells as ``(row, col, value)`` triples."""
        r, c = np.divmod(self.index, self.cols)
        return [(int(a), int(b), float(v)) for a, b, v in zip(r, c, self.values)]

    @property
    def gamma_rows(self) -> np.ndarray:
        return self.index // self.cols

    @property
    def gamma_cols(self) -> np.ndarray:
        return self.index % self.cols

    @property
    def nbytes(self) -> int:
        """Size of the binary serialization."""
        return HEADER_BYTES + RECORD_BYTES * len(self)

    def dense(self) -> np.ndarray:
        out = np.full(self.rows * self.cols, self.truncation)
        out[self.index] = self.values
        return out.reshape(self.rows, self.cols)

    def value_at(self, row: int, col: int) -> float:
        key = row * self.cols + col
        i = np.searchsorted(self.index, key)
        if i < len(self.index) and self.index[i] == key:
            return float(self.values[i])
        return self.truncation

    def shifted(self, row0: int, col0: int, rows: int, cols: int) -> "RobustLossMap":
        """Re-express the map inside a larger grid, offset by ``(row0, col0)``."""
        r = self.gamma_rows + row0
        c = self.gamma_cols + col0
        return RobustLossMap(rows, cols, self.truncation, r * cols + c, self.values)

    # binary format ----------------------------------------------------
    def to_bytes(self) -> bytes:
        rec = np.empty(len(self), dtype=_RECORD)
        rec["row"] = self.gamma_rows
        rec["col"] = self.gamma_cols
        rec["value"] = self.values
        head = _HEADER.pack(MAGIC, VERSION, self.rows, self.cols, self.truncation, len(self))
        return head + rec.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "RobustLossMap":
        return read_loss_map(io.BytesIO(buf))


def truncate(dense, truncation: float | None = None) -> RobustLossMap:
    """Keep cells whose loss is below ``ln(1 + rows*cols)``.

    ``truncation`` overrides the constant (used by local fine maps, which
    truncate at the constant of the full fine grid).
    """
    dense = np.asarray(dense, dtype=float)
    if dense.ndim != 2:
        raise ValueError("dense loss map must be 2D")
    rows, cols = dense.shape
    T = float(np.log1p(rows * cols)) if truncation is None else float(truncation)
    flat = dense.reshape(-1)
    keep = np.flatnonzero(flat < T)
    return RobustLossMap(rows, cols, T, keep, flat[keep])


def build_loss_maps(hs, grid: DescriptorGrid, temperature: float = 1.0,
                    normalize: bool = True) -> list[RobustLossMap]:
    """``truncate(neg_log_map(correspondence_map(h)))`` for each descriptor."""
    probs = correspondence_maps(hs, grid, temperature, normalize)
    return [truncate(neg_log_map(p)) for p in probs]


def sample(L: RobustLossMap, p) -> float:
    """Bilinear interpolation of the implicitly dense truncated map."""
    if isinstance(p, OutOfView):
        return L.truncation
    p = np.asarray(p, dtype=float).reshape(2)
    r, c, w, valid = bilinear_neighbors(p, L.rows, L.cols)
    if not valid:
        return L.truncation
    return float(sum(wi * L.value_at(int(ri), int(ci)) for ri, ci, wi in zip(r, c, w)))


def write_loss_map(f: Union[str, BinaryIO], L: RobustLossMap) -> None:
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        with open(f, "wb") as fh:
            fh.write(L.to_bytes())
    else:
        f.write(L.to_bytes())


def read_loss_map(f: Union[str, BinaryIO]) -> RobustLossMap:
    if isinstance(f, (str, bytes)) or hasattr(f, "__fspath__"):
        with open(f, "rb") as fh:
            return read_loss_map(fh)
    head = f.read(HEADER_BYTES)
    if len(head) != HEADER_BYTES:
        raise ValueError("truncated loss-map header")
    magic, version, rows, cols, T, count = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError("not a loss-map file (bad magic)")
    if version != VERSION:
        raise ValueError(f"unsupported loss-map version {version}")
    body = f.read(count * RECORD_BYTES)
    if len(body) != count * RECORD_BYTES:
        raise ValueError("truncated loss-map records")
    rec = np.frombuffer(body, dtype=_RECORD)
    index = rec["row"].astype(np.int64) * cols + rec["col"].astype(np.int64)
    return RobustLossMap(rows, cols, T, index, rec["value"].astype(float))


class LossMapStack:
    """Several same-shaped loss maps flattened for vectorized sampling.

    Map ``n`` is paired with point ``n``. Entries are keyed by
    ``n * rows * cols + flat_index`` so a single sorted array serves
    lookups for every map.
    """

    def __init__(self, maps: Sequence[RobustLossMap]):
        if not len(maps):
            raise ValueError("need at least one loss map")
        m0 = maps[0]
        for m in maps:
            if (m.rows, m.cols, m.truncation) != (m0.rows, m0.cols, m0.truncation):
                raise ValueError("all maps in a stack must share shape and truncation")
        self.maps = list(maps)
        self.rows, self.cols, self.truncation = m0.rows, m0.cols, m0.truncation
        n_cells = self.rows * self.cols
        self.counts = np.array([len(m) for m in maps], dtype=np.int64)
        self.owner = np.repeat(np.arange(len(maps)), self.counts)
        self.index = (np.concatenate([m.index for m in maps])
                      if self.counts.sum() else np.zeros(0, np.int64))
        self.values = (np.concatenate([m.values for m in maps])
                       if self.counts.sum() else np.zeros(0))
        self.keys = self.owner * n_cells + self.index

    def __len__(self):
        return len(self.maps)

    @property
    def nbytes(self) -> int:
        return int(sum(m.nbytes for m in self.maps))

    def lookup(self, owner, row, col) -> np.ndarray:
        keys = owner * (self.rows * self.cols) + row * self.cols + col
        out = np.full(keys.shape, self.truncation)
        if len(self.keys):
            pos = np.searchsorted(self.keys, keys)
            pos_c = np.minimum(pos, len(self.keys) - 1)
            hit = self.keys[pos_c] == keys
            out[hit] = self.values[pos_c[hit]]
        return out

    def sample(self, grid_points, valid) -> np.ndarray:
        """Sample map ``n`` at ``grid_points[..., n, :]``; shape ``(..., N)``."""
        grid_points = np.asarray(grid_points, dtype=float)
        r, c, w, inside = bilinear_neighbors(grid_points, self.rows, self.cols)
        inside = inside & valid
        owner = np.broadcast_to(np.arange(len(self.maps))[:, None], r.shape)
        vals = self.lookup(owner, r, c)
        s = np.sum(w * vals, axis=-1)
        return np.where(inside, s, self.truncation)


def as_stack(maps: Union[LossMapStack, Iterable[RobustLossMap]]) -> LossMapStack:
    return maps if isinstance(maps, LossMapStack) else LossMapStack(list(maps))


__all__ = [
    "OUT", "DescriptorGrid", "CorrespondenceMap", "RobustLossMap", "LossMapStack",
    "correspondence_map", "correspondence_maps", "neg_log_map", "truncate", "sample",
    "build_loss_maps", "write_loss_map", "read_loss_map", "as_stack",
    "HEADER_BYTES", "RECORD_BYTES",
]
