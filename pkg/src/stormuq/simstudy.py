"""Simulation study on storm-shaped buffers.

Fields are simulated as zero-mean exponential-covariance processes whose
parameters come either from a known hierarchy ``theta_l ~ N(B x_i, Sigma)``
or from a fixed ``theta``.  Each field is refit by maximum likelihood and
(optionally) the model-1 hierarchy is rerun on every replicate, so that Wald
and posterior credible intervals can be checked against the truth.

The bundled geometry is synthetic: a coastline on an 80 x 56 grid of
0.5-unit cells (planar coordinates, so distances and ranges are in the same
units) with 47 training and 6 held-out buffers of 100 to 600 land cells.
Buffer radii span roughly 3 to 6 covariance ranges.  :func:`generate_geometry`
rebuilds the bundled files exactly.
"""

from __future__ import annotations

import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .covariance import theta_from_lambda
from .errors import DataError, DegenerateBufferError
from .grid import (REGIONS, BufferRegion, ErrorField, RasterField, build_buffer, check_buffer_spec,
                   load_raster, pairwise_distances, save_raster)
from .hier import DesignSpec, credible_interval, gibbs_run
from .mle import fit_storm
from .predict import simulate_error_field

B_TRUE = np.array([[1.036, 0.258, 0.017], [1.052, 0.229, 0.217]])
SIGMA_TRUE = np.array([[0.235, 0.064], [0.064, 0.209]])
FIXED_LAMBDA = (4.0, 1.5)
FIXED_THETA = np.array(theta_from_lambda(FIXED_LAMBDA))

GEOMETRY_SEED = 20170412
BUFFER_SET_SCHEMA = "buffer-set/1"
REGION_COUNTS = {"Atlantic": 9, "Florida": 21, "Gulf": 17}
TEST_COUNTS = {"Atlantic": 2, "Florida": 2, "Gulf": 2}
DESK_PER_REGION = 4
MIN_CELLS, MAX_CELLS = 100, 600

DESK_REPS = 10
FULL_REPS = 50

_NCOLS, _NROWS, _CELL = 80, 56, 0.25
_SCALE = 2.0  # the coastline is drawn in quarter units, then stretched


# ------------------------------------------------------------------ geometry


def _gulf_coast(x):
    return 5.0 + 0.4 * np.sin(x / 1.7)


def land_mask() -> RasterField:
    """1 on land, 0 at sea."""
    grid = RasterField(_NCOLS, _NROWS, 0.0, 0.0, _CELL * _SCALE, _CELL * _SCALE, -9999.0,
                       np.zeros(_NCOLS * _NROWS))
    xy = grid.cell_centers() / _SCALE
    x, y = xy[:, 0], xy[:, 1]
    gulf = (x <= 11.0) & (y > _gulf_coast(x))
    peninsula = (x > 11.0) & (x <= 13.5 + 0.3 * np.sin(y)) & (y > 0.8 + 0.1 * (x - 11.0) ** 2)
    atlantic = (x > 11.0) & (y > 5.0) & (x < 13.5 + 0.8 * (y - 5.0))
    return grid.with_values((gulf | peninsula | atlantic).astype(float))


def _landfall(region, rng):
    if region == "Gulf":
        x = rng.uniform(1.0, 10.5)
        return np.array([x, _gulf_coast(x)]), np.array([rng.uniform(-0.6, 0.6), 1.0])
    if region == "Florida":
        y = rng.uniform(1.5, 6.5)
        if rng.random() < 0.5:
            return np.array([11.0, y]), np.array([1.0, rng.uniform(0.0, 0.8)])
        return np.array([13.5 + 0.3 * np.sin(y), y]), np.array([-1.0, rng.uniform(0.0, 0.8)])
    y = rng.uniform(6.0, 13.0)
    return np.array([13.5 + 0.8 * (y - 5.0), y]), np.array([-1.0, rng.uniform(0.2, 0.8)])


def _draw_buffer_spec(region, land, rng):
    while True:
        p, heading = _landfall(region, rng)
        heading = heading / np.hypot(*heading)
        c1 = p + heading * rng.uniform(0.2, 0.8)
        c2 = c1 + heading * rng.uniform(0.8, 2.0)
        r = rng.uniform(1.6, 2.8)
        c1, c2, r = c1 * _SCALE, c2 * _SCALE, r * _SCALE
        spec = {"center1": [round(float(c1[0]), 4), round(float(c1[1]), 4)],
                "center2": [round(float(c2[0]), 4), round(float(c2[1]), 4)],
                "radius_km": round(float(r), 4), "region": region}
        try:
            b = build_buffer(land, land, spec["center1"], spec["center2"], spec["radius_km"])
        except DegenerateBufferError:
            continue
        if MIN_CELLS <= b.n <= MAX_CELLS:
            return spec


def generate_geometry(seed=GEOMETRY_SEED):
    """Land mask plus training and held-out buffer sets."""
    rng = np.random.default_rng(seed)
    land = land_mask()
    train, test = [], []
    for region in REGIONS:
        for k in range(REGION_COUNTS[region]):
            train.append({"storm_id": f"{region[0]}{k + 1:02d}", **_draw_buffer_spec(region, land, rng)})
    for region in REGIONS:
        for k in range(TEST_COUNTS[region]):
            test.append({"storm_id": f"T{region[0]}{k + 1}", **_draw_buffer_spec(region, land, rng)})
    desk = [b["storm_id"] for region in REGIONS
            for b in [s for s in train if s["region"] == region][:DESK_PER_REGION]]
    return land, {"schema": BUFFER_SET_SCHEMA, "train": train, "test": test, "desk": desk}


def write_geometry(directory, seed=GEOMETRY_SEED) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    land, specs = generate_geometry(seed)
    save_raster(land, directory / "domain.asc")
    (directory / "buffers.json").write_text(json.dumps(specs, indent=1) + "\n")


@dataclass(frozen=True, eq=False)
class StormGeometry:
    storm_id: str
    region: str
    buffer: BufferRegion
    locations: np.ndarray


def _data_dir():
    return resources.files("stormuq") / "data"


def load_geometry(which="desk", directory=None):
    """``(land_mask, [StormGeometry, ...])`` for ``train``, ``test`` or ``desk``."""
    root = Path(directory) if directory is not None else _data_dir()
    land = load_raster(root / "domain.asc")
    try:
        specs = json.loads((root / "buffers.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read buffer set: {exc}") from None
    if specs.get("schema") != BUFFER_SET_SCHEMA:
        raise DataError("unsupported buffer-set schema")
    if which == "desk":
        keep = set(specs["desk"])
        chosen = [s for s in specs["train"] if s["storm_id"] in keep]
    elif which in ("train", "test"):
        chosen = specs[which]
    else:
        raise DataError(f"unknown buffer set {which!r}")
    out = []
    for s in chosen:
        check_buffer_spec(s)
        b = build_buffer(land, land, s["center1"], s["center2"], s["radius_km"])
        out.append(StormGeometry(s["storm_id"], s["region"], b, land.cell_centers(b.member_indices)))
    return land, out


# --------------------------------------------------------------- simulation


@dataclass(frozen=True, eq=False)
class SimField:
    rep: int
    theta_true: np.ndarray
    field: ErrorField


def field_stream(seed, rep, storm_id) -> np.random.Generator:
    key = zlib.crc32(str(storm_id).encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(2, int(rep), key))))


def truth_stream(seed, storm_id) -> np.random.Generator:
    """Stream for the true parameters of a held-out storm."""
    key = zlib.crc32(str(storm_id).encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(4, key))))


def simulate_training_set(geometry, reps, seed, B_true=B_TRUE, Sigma_true=SIGMA_TRUE,
                          fixed_theta=None, grid=None, model_id=1) -> list[SimField]:
    """``reps`` replicate fields on every buffer.

    The true ``theta`` of each field is ``fixed_theta`` when given, otherwise
    a draw from ``N(B_true x_i, Sigma_true)`` (exactly ``B_true x_i`` when
    ``Sigma_true`` is zero).
    """
    design = DesignSpec(model_id)
    B_true = np.atleast_2d(np.asarray(B_true, dtype=float))
    Sigma_true = np.atleast_2d(np.asarray(Sigma_true, dtype=float))
    if B_true.shape[1] != design.q:
        raise DataError(f"B_true has {B_true.shape[1]} columns; model {model_id} uses {design.q}")
    if not np.allclose(Sigma_true, Sigma_true.T) or np.any(np.linalg.eigvalsh(Sigma_true) < 0):
        raise DataError("Sigma_true must be symmetric positive semi-definite")
    chol = np.linalg.cholesky(Sigma_true) if np.any(Sigma_true) else np.zeros_like(Sigma_true)
    dists = {g.storm_id: pairwise_distances(g.locations) for g in geometry}
    out = []
    for rep in range(reps):
        for g in geometry:
            rng = field_stream(seed, rep, g.storm_id)
            if fixed_theta is not None:
                th = np.asarray(fixed_theta, dtype=float).copy()
            else:
                th = B_true @ design.regressors(g.region) + chol @ rng.standard_normal(B_true.shape[0])
            y = simulate_error_field(th, dists[g.storm_id], rng)
            sid = f"r{rep:03d}_{g.storm_id}"
            out.append(SimField(rep, th, ErrorField(y, g.locations, g.buffer, g.region, sid, grid)))
    return out


# ------------------------------------------------------------------ coverage


@dataclass
class SimReport:
    n_fields: int
    n_reps: int
    wald_coverage: list
    corr_lambda: float
    corr_theta: float
    gibbs_theta_coverage: list | None = None
    gibbs_B_coverage: float | None = None
    gibbs_sigma_coverage: float | None = None
    n_chains: int = 0
    config: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        rows = [("fields", f"{self.n_fields}"), ("replicates", f"{self.n_reps}"),
                ("Wald coverage theta1", f"{self.wald_coverage[0]:.3f}"),
                ("Wald coverage theta2", f"{self.wald_coverage[1]:.3f}"),
                ("corr(sigma2_hat, phi_hat)", f"{self.corr_lambda:.3f}"),
                ("corr(theta1_hat, theta2_hat)", f"{self.corr_theta:.3f}")]
        if self.gibbs_theta_coverage is not None:
            rows += [("credible coverage theta1", f"{self.gibbs_theta_coverage[0]:.3f}"),
                     ("credible coverage theta2", f"{self.gibbs_theta_coverage[1]:.3f}"),
                     ("credible coverage B", f"{self.gibbs_B_coverage:.3f}"),
                     ("credible coverage Sigma_theta", f"{self.gibbs_sigma_coverage:.3f}")]
        w = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


def _fit(ef):
    return fit_storm(ef)


def fit_all(sims, jobs=1):
    fields = [s.field for s in sims]
    if jobs <= 1:
        return [fit_storm(ef) for ef in fields]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_fit, fields, chunksize=4))


def wald_covers(summary, theta_true, z=1.959963984540054, oracle=False):
    if oracle:
        return np.ones(len(theta_true), dtype=bool)
    lo, hi = summary.wald_interval(z)
    return (lo <= theta_true) & (theta_true <= hi)


def coverage_report(sims, summaries=None, gibbs=True, G=10_000, burn_in=1_000, seed=0,
                    B_true=B_TRUE, Sigma_true=SIGMA_TRUE, jobs=1, oracle=False) -> SimReport:
    """Wald and credible-interval coverage over a simulated set."""
    if not sims:
        raise DataError("no simulated fields")
    if summaries is None:
        summaries = fit_all(sims, jobs)
    if len(summaries) != len(sims):
        raise DataError("every simulated field needs a fitted summary")
    truth = np.array([s.theta_true for s in sims])
    est = np.array([s.theta_hat for s in summaries])
    wald = np.array([wald_covers(s, t, oracle=oracle) for s, t in zip(summaries, truth)])
    sigma2 = np.exp(est[:, 1])
    phi = np.exp(est[:, 1] - est[:, 0])
    report = SimReport(
        n_fields=len(sims),
        n_reps=len({s.rep for s in sims}),
        wald_coverage=[float(v) for v in wald.mean(axis=0)],
        corr_lambda=float(np.corrcoef(sigma2, phi)[0, 1]),
        corr_theta=float(np.corrcoef(est[:, 0], est[:, 1])[0, 1]),
        config={"G": G, "burn_in": burn_in, "seed": seed},
    )
    if not gibbs:
        return report

    th_cov, b_cov, s_cov = [], [], []
    iu = np.triu_indices(B_true.shape[0])
    for rep in sorted({s.rep for s in sims}):
        idx = [k for k, s in enumerate(sims) if s.rep == rep]
        chain = gibbs_run([summaries[k] for k in idx], 1, G=G, burn_in=burn_in, seed=seed + rep)
        order = {sid: j for j, sid in enumerate(chain.storm_ids)}
        lo, hi = credible_interval(chain.theta)
        for k in idx:
            j = order[summaries[k].storm_id]
            th_cov.append((lo[j] <= truth[k]) & (truth[k] <= hi[j]))
        lo, hi = credible_interval(chain.B)
        b_cov.append(((lo <= B_true) & (B_true <= hi)).ravel())
        lo, hi = credible_interval(chain.sigma)
        s_cov.append(((lo <= Sigma_true) & (Sigma_true <= hi))[iu])
    report.gibbs_theta_coverage = [float(v) for v in np.mean(th_cov, axis=0)]
    report.gibbs_B_coverage = float(np.mean(b_cov))
    report.gibbs_sigma_coverage = float(np.mean(s_cov))
    report.n_chains = len(b_cov)
    return report


# ---------------------------------------------------------- synthetic storms


def synthetic_forecast(geo: StormGeometry, land: RasterField) -> RasterField:
    """Smooth forecast (mm) peaking along the storm track; zero off the buffer."""
    xy = land.cell_centers()
    c1, c2 = np.array(geo.buffer.center1), np.array(geo.buffer.center2)
    seg = c2 - c1
    t = np.clip(((xy - c1) @ seg) / max(float(seg @ seg), 1e-12), 0.0, 1.0)
    d = np.hypot(*(xy - (c1 + t[:, None] * seg)).T)
    root = 2.5 + 4.0 * np.exp(-0.5 * (d / (0.5 * geo.buffer.radius)) ** 2)
    vals = np.zeros(land.size)
    vals[geo.buffer.member_indices] = root[geo.buffer.member_indices] ** 2
    return land.with_values(vals)


def synthetic_storm(geo: StormGeometry, land: RasterField, theta, seed, bias=None):
    """``(obs_mm, forecast_mm)`` rasters whose sqrt difference is a GP draw at ``theta``.

    ``bias`` (sqrt scale, on the buffer) is added to the error when given.
    """
    fc = synthetic_forecast(geo, land)
    rng = field_stream(seed, 0, geo.storm_id)
    y = simulate_error_field(theta, pairwise_distances(geo.locations), rng)
    if bias is not None:
        y = y + np.asarray(bias, dtype=float)
    root = np.sqrt(fc.values[geo.buffer.member_indices]) + y
    obs = np.zeros(land.size)
    obs[geo.buffer.member_indices] = np.maximum(root, 0.0) ** 2
    return land.with_values(obs), fc


def tile_watersheds(land: RasterField, tile=6) -> list[dict]:
    """Square blocks of ``tile x tile`` land cells used as synthetic basins."""
    rows, cols = np.divmod(np.arange(land.size), land.ncols)
    key = (rows // tile) * ((land.ncols + tile - 1) // tile) + cols // tile
    is_land = land.values == 1
    out = []
    for k in np.unique(key[is_land]):
        cells = np.flatnonzero(is_land & (key == k))
        out.append({"name": f"basin{int(k):03d}", "cells": cells.tolist()})
    return out


def export_synthetic(directory, seed=0, B_true=B_TRUE, Sigma_true=SIGMA_TRUE) -> dict:
    """Write a synthetic pipeline input set under ``directory``.

    Layout: ``land.asc``; ``train/<id>.json`` error fields on the 47 training
    buffers; ``test/<id>_obs.asc``, ``<id>_fcst.asc`` and ``<id>_buffer.json``
    for the held-out storms; ``watersheds.json`` with tile basins.  All true
    parameters come from ``N(B_true x_i, Sigma_true)`` under the regional design.
    Returns the true test-storm thetas keyed by storm id.
    """
    from .grid import save_error_field

    d = Path(directory)
    (d / "train").mkdir(parents=True, exist_ok=True)
    (d / "test").mkdir(parents=True, exist_ok=True)
    land, train = load_geometry("train")
    _, test = load_geometry("test")
    save_raster(land, d / "land.asc")
    for s in simulate_training_set(train, 1, seed, B_true, Sigma_true, grid=land):
        ef = s.field
        ef = ErrorField(ef.y, ef.locations, ef.buffer, ef.region_label, ef.storm_id.split("_", 1)[1], land)
        save_error_field(ef, d / "train" / f"{ef.storm_id}.json")
    truth = {}
    design = DesignSpec(1)
    chol = np.linalg.cholesky(Sigma_true)
    for g in test:
        rng = truth_stream(seed, g.storm_id)
        th = B_true @ design.regressors(g.region) + chol @ rng.standard_normal(2)
        obs, fc = synthetic_storm(g, land, th, seed)
        save_raster(obs, d / "test" / f"{g.storm_id}_obs.asc")
        save_raster(fc, d / "test" / f"{g.storm_id}_fcst.asc")
        b = g.buffer
        spec = {"storm_id": g.storm_id, "region": g.region, "center1": list(b.center1),
                "center2": list(b.center2), "radius_km": b.radius}
        (d / "test" / f"{g.storm_id}_buffer.json").write_text(json.dumps(spec, indent=1))
        truth[g.storm_id] = th.tolist()
    ws = {"cell_area_km2": 1.0, "watersheds": tile_watersheds(land)}
    (d / "watersheds.json").write_text(json.dumps(ws))
    (d / "truth.json").write_text(json.dumps(truth, indent=1))
    return truth
