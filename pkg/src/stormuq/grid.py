"""Raster ingest, buffer construction and error fields.

Rasters use the ESRI ASCII grid layout::

    ncols        <int>
    nrows        <int>
    xllcorner    <real>
    yllcorner    <real>
    cellsize     <real>
    NODATA_value <real>
    <nrows lines of ncols values, north row first>

Cell ``k`` of a raster is row ``k // ncols`` (counted from the north) and
column ``k % ncols``.  All distances are in the planar units of the header
(km for real data).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .errors import (
    DataError,
    DegenerateBufferError,
    GeometryError,
    ParseError,
)

REGIONS = ("Atlantic", "Florida", "Gulf")

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


@dataclass(frozen=True, eq=False)
class RasterField:
    """Rectangular grid of reals with a georeferencing header."""

    ncols: int
    nrows: int
    x0: float
    y0: float
    dx: float
    dy: float
    nodata: float
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.ncols < 1 or self.nrows < 1:
            raise DataError("raster must have at least one row and column")
        if self.ncols * self.nrows != values.size:
            raise DataError(
                f"ncols*nrows = {self.ncols * self.nrows} but {values.size} values given"
            )
        if not (self.dx > 0 and self.dy > 0):
            raise DataError("cell sizes must be positive")

    @property
    def size(self) -> int:
        return self.ncols * self.nrows

    @property
    def mask(self) -> np.ndarray:
        """Boolean array, True where the cell holds data."""
        return self.values != self.nodata

    def as_2d(self) -> np.ndarray:
        return self.values.reshape(self.nrows, self.ncols)

    def cell_centers(self, indices=None) -> np.ndarray:
        """Planar (x, y) coordinates of cell centres, shape ``(k, 2)``."""
        idx = np.arange(self.size) if indices is None else np.asarray(indices, dtype=int)
        row, col = np.divmod(idx, self.ncols)
        x = self.x0 + (col + 0.5) * self.dx
        y = self.y0 + (self.nrows - row - 0.5) * self.dy
        return np.column_stack([x, y])

    def same_grid(self, other: "RasterField") -> bool:
        return (
            self.ncols == other.ncols
            and self.nrows == other.nrows
            and self.x0 == other.x0
            and self.y0 == other.y0
            and self.dx == other.dx
            and self.dy == other.dy
        )

    def with_values(self, values) -> "RasterField":
        """Copy of the header with new cell values."""
        return RasterField(
            self.ncols, self.nrows, self.x0, self.y0, self.dx, self.dy, self.nodata, values
        )


@dataclass(frozen=True, eq=False)
class BufferRegion:
    """Land cells within ``radius`` of either of two centres."""

    center1: tuple
    center2: tuple
    radius: float
    member_indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.member_indices, dtype=np.int64)
        idx.setflags(write=False)
        object.__setattr__(self, "member_indices", idx)
        object.__setattr__(self, "center1", tuple(float(c) for c in self.center1))
        object.__setattr__(self, "center2", tuple(float(c) for c in self.center2))
        if idx.size and np.any(np.diff(idx) <= 0):
            raise DataError("buffer member indices must be strictly increasing")

    @property
    def n(self) -> int:
        return int(self.member_indices.size)


@dataclass(frozen=True, eq=False)
class ErrorField:
    """Observation minus forecast (sqrt-mm) on one storm's buffer."""

    y: np.ndarray
    locations: np.ndarray
    buffer: BufferRegion
    region_label: str
    storm_id: str = ""
    grid: RasterField | None = field(default=None, repr=False)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        loc = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        if y.size != loc.shape[0]:
            raise DataError("error field and location counts differ")
        if self.buffer.n != y.size:
            raise DataError("error field length does not match its buffer")
        if self.region_label not in REGIONS:
            raise DataError(f"unknown region label {self.region_label!r}; expected one of {REGIONS}")
        y.setflags(write=False)
        loc.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "locations", loc)

    @property
    def n(self) -> int:
        return int(self.y.size)

    def distances(self) -> np.ndarray:
        return pairwise_distances(self.locations)

    def with_values(self, y) -> "ErrorField":
        return ErrorField(y, self.locations, self.buffer, self.region_label, self.storm_id, self.grid)


@dataclass(frozen=True, eq=False)
class IncidenceMap:
    """Selection of buffer cells out of a common domain.

    ``rows[k]`` is the domain position of the k-th buffer member, so that
    ``select(mu)`` equals the product of the incidence matrix with ``mu``.
    """

    domain_size: int
    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= self.domain_size):
            raise DataError("incidence rows fall outside the domain")
        object.__setattr__(self, "rows", rows)

    def select(self, domain_vector) -> np.ndarray:
        return np.asarray(domain_vector)[self.rows]

    def matrix(self) -> np.ndarray:
        """Dense 0/1 matrix; only for tests and tiny problems."""
        A = np.zeros((self.rows.size, self.domain_size))
        A[np.arange(self.rows.size), self.rows] = 1.0
        return A

    @classmethod
    def from_indices(cls, domain_indices, member_indices) -> "IncidenceMap":
        domain_indices = np.asarray(domain_indices)
        member_indices = np.asarray(member_indices)
        pos = np.searchsorted(domain_indices, member_indices)
        bad = (pos >= domain_indices.size) | (domain_indices[np.minimum(pos, domain_indices.size - 1)] != member_indices)
        if np.any(bad):
            raise DataError("buffer member missing from the domain")
        return cls(int(domain_indices.size), pos)


# --------------------------------------------------------------------------- io


def _parse_number(token, path, lineno):
    try:
        return float(token)
    except ValueError:
        raise ParseError(f"non-numeric token {token!r}", path, lineno) from None


def load_raster(path) -> RasterField:
    """Read an ASCII grid file.

    Errors carry the 1-based line number of the offending line.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc

    header = {}
    for lineno, key in enumerate(_HEADER_KEYS, start=1):
        if lineno > len(lines):
            raise ParseError(f"missing header line {key!r}", path, lineno)
        parts = lines[lineno - 1].split()
        if len(parts) != 2 or parts[0].lower() != key:
            raise ParseError(f"malformed header, expected '{key} <value>'", path, lineno)
        header[key] = parts[1]

    try:
        ncols = int(header["ncols"])
        nrows = int(header["nrows"])
    except ValueError:
        raise ParseError("ncols/nrows must be integers", path, 1) from None
    if ncols < 1 or nrows < 1:
        raise ParseError("ncols/nrows must be positive", path, 1)
    x0 = _parse_number(header["xllcorner"], path, 3)
    y0 = _parse_number(header["yllcorner"], path, 4)
    cellsize = _parse_number(header["cellsize"], path, 5)
    if not cellsize > 0:
        raise ParseError("cellsize must be positive", path, 5)
    nodata = _parse_number(header["nodata_value"], path, 6)

    body = [(i, ln) for i, ln in enumerate(lines[6:], start=7) if ln.strip()]
    if len(body) != nrows:
        lineno = body[nrows][0] if len(body) > nrows else len(lines) + 1
        raise ParseError(f"expected {nrows} data rows, found {len(body)}", path, lineno)
    values = np.empty(nrows * ncols)
    for r, (lineno, ln) in enumerate(body):
        tokens = ln.split()
        if len(tokens) != ncols:
            raise ParseError(f"row has {len(tokens)} values, header declares ncols {ncols}", path, lineno)
        for c, tok in enumerate(tokens):
            values[r * ncols + c] = _parse_number(tok, path, lineno)
    return RasterField(ncols, nrows, x0, y0, cellsize, cellsize, nodata, values)


def _fmt(v: float) -> str:
    s = repr(float(v))
    return s[:-2] if s.endswith(".0") else s


def format_raster(field: RasterField) -> str:
    if field.dx != field.dy:
        raise DataError("ASCII grids require square cells")
    out = [
        f"ncols {field.ncols}",
        f"nrows {field.nrows}",
        f"xllcorner {_fmt(field.x0)}",
        f"yllcorner {_fmt(field.y0)}",
        f"cellsize {_fmt(field.dx)}",
        f"NODATA_value {_fmt(field.nodata)}",
    ]
    for row in field.as_2d():
        out.append(" ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def save_raster(field: RasterField, path) -> None:
    Path(path).write_text(format_raster(field))


def load_buffer_spec(path) -> dict:
    """Read a buffer spec ``{center1, center2, radius_km, region}``."""
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read buffer spec {path}: {exc}") from exc
    return check_buffer_spec(spec)


def check_buffer_spec(spec: dict) -> dict:
    for key in ("center1", "center2", "radius_km", "region"):
        if key not in spec:
            raise DataError(f"buffer spec missing {key!r}")
    for key in ("center1", "center2"):
        if len(spec[key]) != 2:
            raise DataError(f"{key} must be an [x, y] pair")
    if spec["region"] not in REGIONS:
        raise DataError(f"unknown region {spec['region']!r}")
    return spec


# --------------------------------------------------------------------- pipeline


def sqrt_transform(field: RasterField) -> RasterField:
    """Square-root transform of all data cells; nodata cells are kept."""
    vals = field.values.copy()
    ok = field.mask
    neg = np.flatnonzero(ok & (vals < 0))
    if neg.size:
        raise DataError(f"negative precipitation at cell index {int(neg[0])} (value {vals[neg[0]]})")
    vals[ok] = np.sqrt(vals[ok])
    return field.with_values(vals)


def build_buffer(grid: RasterField, land_mask: RasterField, c1, c2, radius_km: float) -> BufferRegion:
    """Land cells whose centre lies within ``radius_km`` (inclusive) of c1 or c2."""
    if not radius_km > 0:
        raise DataError("buffer radius must be positive")
    if not all(np.isfinite(c1)) or not all(np.isfinite(c2)):
        raise DataError("buffer centres must be finite")
    if not grid.same_grid(land_mask):
        raise GeometryError("land mask does not share the raster grid")
    xy = grid.cell_centers()
    d1 = np.hypot(xy[:, 0] - c1[0], xy[:, 1] - c1[1])
    d2 = np.hypot(xy[:, 0] - c2[0], xy[:, 1] - c2[1])
    land = land_mask.mask & (land_mask.values == 1)
    members = np.flatnonzero(land & ((d1 <= radius_km) | (d2 <= radius_km)))
    if members.size < 2:
        raise DegenerateBufferError(
            f"buffer around {tuple(c1)} / {tuple(c2)} with radius {radius_km} holds {members.size} land cells"
        )
    return BufferRegion(tuple(c1), tuple(c2), float(radius_km), members)


def make_error_field(obs: RasterField, fcst: RasterField, buffer: BufferRegion, region: str,
                     storm_id: str = "") -> ErrorField:
    """Vectorised ``obs - fcst`` over the buffer members (both already sqrt-scaled)."""
    if not obs.same_grid(fcst):
        raise GeometryError("observation and forecast grids differ")
    idx = buffer.member_indices
    if idx.size and idx.max() >= obs.size:
        raise GeometryError("buffer indices exceed the raster size")
    bad = idx[~(obs.mask[idx] & fcst.mask[idx])]
    if bad.size:
        shown = ", ".join(str(int(i)) for i in bad[:20])
        more = "" if bad.size <= 20 else f" (+{bad.size - 20} more)"
        raise DataError(f"nodata inside buffer at cells {shown}{more}")
    y = obs.values[idx] - fcst.values[idx]
    return ErrorField(y, obs.cell_centers(idx), buffer, region, storm_id, obs.with_values(np.zeros(obs.size)))


def pairwise_distances(locations) -> np.ndarray:
    """Symmetric Euclidean distance matrix with an exact zero diagonal."""
    loc = np.asarray(locations, dtype=float)
    if loc.ndim != 2 or loc.shape[0] < 2:
        raise DataError("need at least two locations")
    d = pdist(loc)
    if np.any(d == 0):
        raise DataError("duplicate locations make the zero-nugget covariance singular")
    return squareform(d)


# ------------------------------------------------------------ error-field files

ERROR_FIELD_SCHEMA = "error-field/1"


def error_field_to_json(ef: ErrorField) -> dict:
    doc = {
        "schema": ERROR_FIELD_SCHEMA,
        "storm_id": ef.storm_id,
        "region": ef.region_label,
        "buffer": {
            "center1": list(ef.buffer.center1),
            "center2": list(ef.buffer.center2),
            "radius_km": ef.buffer.radius,
            "member_indices": ef.buffer.member_indices.tolist(),
        },
        "y": ef.y.tolist(),
        "locations": ef.locations.tolist(),
    }
    if ef.grid is not None:
        g = ef.grid
        doc["grid"] = {"ncols": g.ncols, "nrows": g.nrows, "xllcorner": g.x0, "yllcorner": g.y0,
                       "cellsize": g.dx, "NODATA_value": g.nodata}
    return doc


def error_field_from_json(doc: dict) -> ErrorField:
    if doc.get("schema") != ERROR_FIELD_SCHEMA:
        raise DataError(f"unsupported error-field schema {doc.get('schema')!r}")
    b = doc["buffer"]
    buf = BufferRegion(b["center1"], b["center2"], b["radius_km"], b["member_indices"])
    grid = None
    if "grid" in doc:
        g = doc["grid"]
        grid = RasterField(g["ncols"], g["nrows"], g["xllcorner"], g["yllcorner"], g["cellsize"],
                           g["cellsize"], g["NODATA_value"], np.zeros(g["ncols"] * g["nrows"]))
    return ErrorField(doc["y"], doc["locations"], buf, doc["region"], doc["storm_id"], grid)


def save_error_field(ef: ErrorField, path) -> None:
    Path(path).write_text(json.dumps(error_field_to_json(ef)))


def load_error_field(path) -> ErrorField:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read error field {path}: {exc}") from exc
    return error_field_from_json(doc)


def domain_indices(buffers) -> np.ndarray:
    """Sorted union of the member indices of several buffers."""
    return np.unique(np.concatenate([np.asarray(b.member_indices) for b in buffers]))
