"""Raster input/output, scene assembly and footprint pruning.

Grids use the ESRI ASCII format (rows north to south).  Values are written
with 17 significant digits, enough for an exact float64 round trip.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

Y_FLOOR = 1e-4
NODATA = -9999.0
HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter", "cellsize", "nodata_value")


class GridFormatError(ValueError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Grid:
    """Regular raster; ``values`` has shape (nrows, ncols), row 0 is the northern edge.

    ``xll``/``yll`` is always the lower-left corner; ``center`` only records
    which header variant the file used so it can be written back the same way.
    """

    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float
    values: np.ndarray
    center: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if self.ncols < 1 or self.nrows < 1:
            raise GridFormatError("grid dimensions must be >= 1")
        if v.shape != (self.nrows, self.ncols):
            raise GridFormatError(f"values shape {v.shape} does not match header ({self.nrows}, {self.ncols})")
        if not self.cellsize > 0:
            raise GridFormatError("cellsize must be > 0")
        bad = ~np.isfinite(v) & (v != self.nodata)
        if bad.any():
            raise GridFormatError("non-finite value that is not NODATA")
        object.__setattr__(self, "values", v)

    @classmethod
    def like(cls, g: "Grid", values, nodata=None) -> "Grid":
        return cls(g.ncols, g.nrows, g.xll, g.yll, g.cellsize, g.nodata if nodata is None else nodata,
                   np.asarray(values, dtype=float).reshape(g.nrows, g.ncols), g.center)

    @property
    def size(self) -> int:
        return self.ncols * self.nrows

    @property
    def valid(self) -> np.ndarray:
        return self.values != self.nodata

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def geometry(self) -> tuple:
        return (self.ncols, self.nrows, self.xll, self.yll, self.cellsize)

    def same_geometry(self, other: "Grid", tol: float = 1e-9) -> bool:
        return (
            self.ncols == other.ncols and self.nrows == other.nrows and self.cellsize == other.cellsize
            and abs(self.xll - other.xll) <= tol and abs(self.yll - other.yll) <= tol
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Longitude and latitude of every cell centre, flat row-major."""
        c = np.arange(self.ncols)
        r = np.arange(self.nrows)
        x = self.xll + (c + 0.5) * self.cellsize
        y = self.yll + (self.nrows - r - 0.5) * self.cellsize
        X, Y = np.meshgrid(x, y)
        return X.reshape(-1), Y.reshape(-1)

    def locate(self, x, y):
        """Flat cell index of each point (floor rule), -1 outside the extent."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        col = np.floor((x - self.xll) / self.cellsize).astype(np.int64)
        row_from_s = np.floor((y - self.yll) / self.cellsize).astype(np.int64)
        row = self.nrows - 1 - row_from_s
        ok = (col >= 0) & (col < self.ncols) & (row_from_s >= 0) & (row_from_s < self.nrows)
        return np.where(ok, row * self.ncols + col, -1)


def _fmt(v: float) -> str:
    s = format(v, ".17g")
    return s


def write_grid(grid: Grid, path) -> None:
    path = Path(path)
    lines = [f"ncols {grid.ncols}", f"nrows {grid.nrows}"]
    if grid.center:
        h = 0.5 * grid.cellsize
        lines += [f"xllcenter {_fmt(grid.xll + h)}", f"yllcenter {_fmt(grid.yll + h)}"]
    else:
        lines += [f"xllcorner {_fmt(grid.xll)}", f"yllcorner {_fmt(grid.yll)}"]
    lines += [f"cellsize {_fmt(grid.cellsize)}", f"NODATA_value {_fmt(grid.nodata)}"]
    for row in grid.values:
        lines.append(" ".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def read_grid(path) -> Grid:
    """Parse an ESRI ASCII grid; errors carry 1-based line numbers."""
    path = Path(path)
    lines = path.read_text().splitlines()
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        key = parts[0].lower()
        if key not in HEADER_KEYS:
            break
        if len(parts) != 2:
            raise GridFormatError(f"{path}:{i + 1}: malformed header line {lines[i]!r}")
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise GridFormatError(f"{path}:{i + 1}: non-numeric header value {parts[1]!r}") from None
        i += 1
    for req in ("ncols", "nrows", "cellsize"):
        if req not in header:
            raise GridFormatError(f"{path}: missing header keyword {req}")
    corner = "xllcorner" in header and "yllcorner" in header
    center = "xllcenter" in header and "yllcenter" in header
    if corner == center:
        raise GridFormatError(f"{path}: header needs exactly one of xllcorner/yllcorner or xllcenter/yllcenter")
    ncols, nrows, cs = int(header["ncols"]), int(header["nrows"]), header["cellsize"]
    if ncols != header["ncols"] or nrows != header["nrows"] or ncols < 1 or nrows < 1:
        raise GridFormatError(f"{path}: ncols/nrows must be positive integers")
    if center:
        xll, yll = header["xllcenter"] - 0.5 * cs, header["yllcenter"] - 0.5 * cs
    else:
        xll, yll = header["xllcorner"], header["yllcorner"]
    nodata = header.get("nodata_value", NODATA)
    rows = []
    for j in range(i, len(lines)):
        toks = lines[j].split()
        if not toks:
            continue
        if len(toks) != ncols:
            raise GridFormatError(f"{path}:{j + 1}: expected {ncols} values, found {len(toks)}")
        try:
            rows.append([float(t) for t in toks])
        except ValueError as exc:
            raise GridFormatError(f"{path}:{j + 1}: {exc}") from None
    if len(rows) != nrows:
        raise GridFormatError(f"{path}: expected {nrows} data rows, found {len(rows)}")
    return Grid(ncols, nrows, xll, yll, cs, nodata, np.array(rows), center)


def resample_nearest(src: Grid, target: Grid) -> Grid:
    """Nearest-cell lookup of ``src`` at the centres of ``target``."""
    x, y = target.cell_centers()
    idx = src.locate(x, y)
    vals = np.where(idx >= 0, src.flat()[np.maximum(idx, 0)], src.nodata)
    vals = np.where(vals == src.nodata, target.nodata, vals)
    return Grid.like(target, vals)


# --------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Scene:
    """Aligned input grids plus the candidate locations (cells with valid DPM).

    ``y`` and ``u`` are indexed by candidate position; ``candidates`` holds the
    flat cell ids in ascending order.
    """

    dpm: Grid
    pga: Grid
    prior_ls: Grid | None
    prior_lf: Grid | None
    footprint: Grid
    candidates: np.ndarray
    y: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def grid(self) -> Grid:
        return self.dpm

    def pga_values(self) -> np.ndarray:
        v = self.pga.flat()[self.candidates]
        return np.where(v == self.pga.nodata, 0.0, np.maximum(v, 0.0))

    def ground_failure(self, which: str):
        g = self.prior_ls if which == "LS" else self.prior_lf
        if g is None:
            return None
        v = g.flat()[self.candidates]
        return np.clip(np.where(v == g.nodata, 0.0, v), 0.0, 1.0)

    def has_footprint(self) -> np.ndarray:
        return self.footprint.flat()[self.candidates] > 0.5


def assemble_scene(dpm: Grid, pga: Grid, prior_ls: Grid | None, prior_lf: Grid | None, footprint: Grid | None,
                   y_floor: float = Y_FLOOR, allow_nearest_resample: bool = False) -> Scene:
    grids = {"pga": pga, "prior_ls": prior_ls, "prior_lf": prior_lf, "footprint": footprint}
    out = {}
    for name, g in grids.items():
        if g is None:
            continue
        if not g.same_geometry(dpm):
            same_extent = (
                math.isclose(g.xll, dpm.xll) and math.isclose(g.yll, dpm.yll)
                and math.isclose(g.xll + g.ncols * g.cellsize, dpm.xll + dpm.ncols * dpm.cellsize)
                and math.isclose(g.yll + g.nrows * g.cellsize, dpm.yll + dpm.nrows * dpm.cellsize)
            )
            if not (allow_nearest_resample and same_extent):
                raise GeometryError(f"grid {name!r} geometry {g.geometry()} differs from dpm {dpm.geometry()}")
            g = resample_nearest(g, dpm)
        out[name] = g
    if out.get("footprint") is None:
        out["footprint"] = Grid.like(dpm, np.ones(dpm.size))
    cand = np.flatnonzero(dpm.valid.reshape(-1))
    y = np.clip(dpm.flat()[cand], y_floor, 1.0)
    vals = dpm.values.copy()
    vals.reshape(-1)[cand] = y
    dpm_c = Grid.like(dpm, vals)
    return Scene(dpm_c, out["pga"], out.get("prior_ls"), out.get("prior_lf"), out["footprint"], cand, y,
                 np.zeros(cand.size), {"y_floor": y_floor})


@dataclass(frozen=True)
class PruneResult:
    """BD-active mask over candidate positions and the mode that produced it."""

    active: np.ndarray
    mode: str
    tau: float | None = None

    @property
    def pruned(self) -> np.ndarray:
        return ~self.active


def prune_by_footprint(scene: Scene, mode: str = "strict", bd_prior=None, tau: float = 0.2) -> PruneResult:
    """Select the cells that take part in BD inference.

    strict keeps footprint cells only; compensated also keeps footprint-free
    cells whose prior P(BD > 0) is at least ``tau``; none keeps everything.
    """
    fp = scene.has_footprint()
    if mode == "none":
        return PruneResult(np.ones_like(fp), mode)
    if mode == "strict":
        return PruneResult(fp.copy(), mode)
    if mode == "compensated":
        if bd_prior is None:
            raise ValueError("compensated pruning needs the BD prior field")
        p = np.asarray(bd_prior, dtype=float)
        damaged = 1.0 - p[:, 0]
        return PruneResult(fp | (damaged >= tau), mode, tau)
    raise ValueError(f"unknown pruning mode {mode!r}; expected none, strict or compensated")


def reintegrate_pruned(probs: np.ndarray, active: np.ndarray, grid: Grid, candidates: np.ndarray,
                       nodata: float = NODATA) -> list[Grid]:
    """Full-extent probability grids for one node.

    ``probs`` holds rows for the active candidates only; pruned candidates get
    [1, 0, ..., 0] and cells outside the candidate set get NODATA.
    """
    K = probs.shape[1]
    full = np.zeros((candidates.size, K))
    full[:, 0] = 1.0
    full[active] = probs
    out = []
    for m in range(K):
        vals = np.full(grid.size, nodata)
        vals[candidates] = full[:, m]
        out.append(Grid.like(grid, vals, nodata))
    return out


# --------------------------------------------------------------------------
# ground truth and ShakeMap


@dataclass(frozen=True)
class GroundTruth:
    lon: np.ndarray
    lat: np.ndarray
    cls: np.ndarray
    cell: np.ndarray
    skipped: int

    def __len__(self) -> int:
        return self.cls.size


def read_ground_truth(path, grid: Grid | None = None, M: int | None = None) -> GroundTruth:
    """Read ``lon,lat,class`` records; with a grid, map each point to its cell.

    Points outside the grid extent are skipped with a warning.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rd = csv.reader(fh)
        head = next(rd, None)
        if head is None or [h.strip().lower() for h in head] != ["lon", "lat", "class"]:
            raise ValueError(f"{path}: header must be 'lon,lat,class', got {head!r}")
        lon, lat, cls = [], [], []
        for n, rec in enumerate(rd, start=2):
            if not rec or all(not r.strip() for r in rec):
                continue
            if len(rec) != 3:
                raise ValueError(f"{path}:{n}: expected 3 fields, got {len(rec)}")
            try:
                c = int(rec[2])
            except ValueError:
                raise ValueError(f"{path}:{n}: class {rec[2]!r} is not an integer") from None
            if c < 0 or (M is not None and c > M):
                raise ValueError(f"{path}:{n}: class {c} out of range 0..{M}")
            lon.append(float(rec[0]))
            lat.append(float(rec[1]))
            cls.append(c)
    lon, lat, cls = np.array(lon), np.array(lat), np.array(cls, dtype=np.int64)
    if grid is None:
        return GroundTruth(lon, lat, cls, np.full(cls.size, -1), 0)
    cell = grid.locate(lon, lat)
    out = cell < 0
    if out.any():
        log.warning("%d ground-truth point(s) outside the grid extent skipped", int(out.sum()))
    keep = ~out
    return GroundTruth(lon[keep], lat[keep], cls[keep], cell[keep], int(out.sum()))


def write_ground_truth(path, lon, lat, cls) -> None:
    with Path(path).open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["lon", "lat", "class"])
        for a, b, c in zip(lon, lat, cls):
            wr.writerow([_fmt(float(a)), _fmt(float(b)), int(c)])


def _strip_ns(tag: str) -> str:
    return tag.rsplit("}", 1)[-1]


def read_shakemap_xml(path) -> Grid:
    """PGA grid from a ShakeMap-style XML document.

    Reads ``grid_specification`` (lon/lat bounds and spacing), the
    ``grid_field`` declarations and the whitespace-separated ``grid_data``
    block.  Points are placed on the declared regular grid by nearest cell.
    Units of ``pctg`` (or ``%g``) are converted to g.
    """
    root = ET.parse(path).getroot()
    spec, fields, data = None, {}, None
    for el in root.iter():
        tag = _strip_ns(el.tag)
        if tag == "grid_specification":
            spec = el.attrib
        elif tag == "grid_field":
            fields[el.attrib["name"].upper()] = (int(el.attrib["index"]), el.attrib.get("units", ""))
        elif tag == "grid_data":
            data = el.text or ""
    if spec is None or data is None:
        raise ValueError(f"{path}: missing grid_specification or grid_data")
    if "PGA" not in fields:
        raise ValueError(f"{path}: no PGA field; available fields: {', '.join(sorted(fields))}")
    lon_key = next((k for k in ("LON", "LONGITUDE") if k in fields), None)
    lat_key = next((k for k in ("LAT", "LATITUDE") if k in fields), None)
    if lon_key is None or lat_key is None:
        raise ValueError(f"{path}: missing LON/LAT fields; available fields: {', '.join(sorted(fields))}")
    nf = max(i for i, _ in fields.values())
    rows = [r.split() for r in data.strip().splitlines() if r.strip()]
    for n, r in enumerate(rows, start=1):
        if len(r) < nf:
            raise ValueError(f"{path}: grid_data row {n} has {len(r)} values, expected {nf}")
    arr = np.array([[float(t) for t in r[:nf]] for r in rows])
    ncols = int(spec["nlon"])
    nrows = int(spec["nlat"])
    if arr.shape[0] != ncols * nrows:
        raise ValueError(f"{path}: grid_data has {arr.shape[0]} rows, specification implies {ncols * nrows}")
    dx = float(spec["nominal_lon_spacing"])
    dy = float(spec.get("nominal_lat_spacing", dx))
    if not math.isclose(dx, dy, rel_tol=1e-9):
        raise ValueError(f"{path}: non-square cells ({dx} x {dy}) are not supported")
    lon_min, lat_min = float(spec["lon_min"]), float(spec["lat_min"])
    xll, yll = lon_min - 0.5 * dx, lat_min - 0.5 * dx
    grid = Grid(ncols, nrows, xll, yll, dx, NODATA, np.full((nrows, ncols), NODATA))
    idx_pga, units = fields["PGA"]
    pga = arr[:, idx_pga - 1]
    if units.lower() in ("pctg", "%g", "percent-g"):
        pga = pga / 100.0
    cell = grid.locate(arr[:, fields[lon_key][0] - 1], arr[:, fields[lat_key][0] - 1])
    vals = grid.values.reshape(-1).copy()
    ok = cell >= 0
    vals[cell[ok]] = pga[ok]
    return Grid.like(grid, vals)


# --------------------------------------------------------------------------
# outputs


def write_outputs(posteriors: dict, scene: Scene, outdir, manifest: dict | None = None,
                  metrics: dict | None = None, states: dict | None = None) -> list[Path]:
    """Write per-state probability grids and argmax class grids for every node.

    ``posteriors`` maps node -> (n_candidates, M_i + 1) rows already
    reintegrated over the full candidate set.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    g = scene.grid
    for node, probs in posteriors.items():
        probs = np.asarray(probs)
        for m in range(probs.shape[1]):
            vals = np.full(g.size, NODATA)
            vals[scene.candidates] = probs[:, m]
            p = outdir / f"posterior_{node.lower()}_{m}.asc"
            write_grid(Grid.like(g, vals, NODATA), p)
            written.append(p)
        vals = np.full(g.size, NODATA)
        vals[scene.candidates] = np.argmax(probs, axis=1)
        p = outdir / f"class_{node.lower()}.asc"
        write_grid(Grid.like(g, vals, NODATA), p)
        written.append(p)
    if metrics is not None:
        p = outdir / "metrics.json"
        p.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
        written.append(p)
    if manifest is not None:
        p = outdir / "manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written


def read_posterior_dir(outdir, scene_grid: Grid | None = None) -> tuple[dict, Grid]:
    """Inverse of write_outputs for the probability grids: node -> (ncells, K) with NaN at NODATA."""
    outdir = Path(outdir)
    out, grid = {}, None
    for node in ("BD", "LS", "LF"):
        files = sorted(outdir.glob(f"posterior_{node.lower()}_*.asc"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
        if not files:
            continue
        grids = [read_grid(f) for f in files]
        grid = grids[0]
        arr = np.column_stack([gg.flat() for gg in grids])
        arr[arr == grid.nodata] = np.nan
        out[node] = arr
    if grid is None:
        raise FileNotFoundError(f"{outdir}: no posterior grids found")
    return out, grid
