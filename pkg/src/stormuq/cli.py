"""Command-line pipeline.

Each subcommand is one file-based stage.  It reads the outputs of earlier
stages plus its own flags, writes into its ``--out`` directory only, and
records a ``manifest.json`` with input hashes, parameters, seed and versions.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import platform
import sys
import warnings
import zlib
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bias import NODATA, em_bias_loop, standardized_error_map
from .errors import DataError, NumericalError
from .grid import (ERROR_FIELD_SCHEMA, RasterField, build_buffer, error_field_from_json, load_buffer_spec,
                   load_raster, make_error_field, pairwise_distances, save_error_field, save_raster,
                   sqrt_transform)
from .hier import CHAIN_SCHEMA, DesignSpec, PosteriorChain, empirical_bayes_s0, gibbs_run
from .mle import SUMMARY_SCHEMA, fit_storms, load_summaries, nonspatial_summary, save_summary
from .modelselect import hierarchy_evidence, write_evidence_table
from .predict import (ENSEMBLE_SIZE, METRIC_FIELDS, WatershedMask, build_ensemble, coverage, log_score,
                      margins_of_error, prediction_map, prediction_values, sample_theta_bootstrap,
                      sample_theta_new, threshold_prob_map, watershed_density, write_metric_rows)
from .simstudy import (BUFFER_SET_SCHEMA, DESK_REPS, FIXED_THETA, FULL_REPS, coverage_report,
                       export_synthetic, load_geometry, simulate_training_set)

MANIFEST_SCHEMA = "manifest/1"
METRICS_SCHEMA = "metrics-csv/1"
EVIDENCE_SCHEMA = "evidence-csv/1"
DENSITY_SCHEMA = "watershed-density/1"

SCHEMAS = {
    "error field": ERROR_FIELD_SCHEMA,
    "storm summary": SUMMARY_SCHEMA,
    "posterior chain": CHAIN_SCHEMA,
    "buffer set": BUFFER_SET_SCHEMA,
    "metrics csv": f"{METRICS_SCHEMA} ({','.join(METRIC_FIELDS)})",
    "evidence csv": f"{EVIDENCE_SCHEMA} (model_id,P,log_evidence)",
    "watershed density": f"{DENSITY_SCHEMA} (total_mm,density + quantile json)",
    "manifest": MANIFEST_SCHEMA,
}

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest=argparse.SUPPRESS, default=argparse.SUPPRESS, help=None):
        super().__init__(option_strings, dest, nargs=0, default=default, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        lines = [f"stormuq {__version__}"] + [f"{k}: {v}" for k, v in SCHEMAS.items()]
        print("\n".join(lines))
        parser.exit(EXIT_OK)


# ------------------------------------------------------------------ helpers


def _floats(text):
    try:
        return [float(v) for v in str(text).replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of numbers, got {text!r}") from None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    return {"stormuq": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version(), "schemas": SCHEMAS}


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(out: Path, stage, args, inputs, outputs, seed=None, name="manifest.json") -> Path:
    """Record what a stage read and wrote.  Contains no timestamps, so reruns match."""
    params = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func", "config", "command")}
    doc = {
        "schema": MANIFEST_SCHEMA,
        "stage": stage,
        "parameters": params,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in sorted({Path(p) for p in inputs}, key=str)},
        "outputs": {str(Path(p).relative_to(out)): _sha256(p) for p in sorted(outputs, key=str)},
        "versions": _versions(),
    }
    path = out / name
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _json_files(paths, schema):
    """``(path, doc)`` for every JSON file with the given schema.

    Directories are scanned (other schemas skipped); files named explicitly
    must carry the schema.
    """
    found = []
    for p in map(Path, paths):
        if p.is_dir():
            cands, strict = sorted(p.glob("*.json")), False
        elif p.is_file():
            cands, strict = [p], True
        else:
            raise DataError(f"no such file or directory: {p}")
        for c in cands:
            try:
                doc = json.loads(c.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise DataError(f"cannot read {c}: {exc}") from None
            if isinstance(doc, dict) and doc.get("schema") == schema:
                found.append((c, doc))
            elif strict:
                raise DataError(f"{c}: expected schema {schema!r}")
    if not found:
        raise DataError(f"no {schema} files among {', '.join(map(str, paths))}")
    return found


def _load_fields(paths):
    pairs = _json_files(paths, ERROR_FIELD_SCHEMA)
    fields = [error_field_from_json(doc) for _, doc in pairs]
    ids = [ef.storm_id for ef in fields]
    dup = sorted({i for i in ids if ids.count(i) > 1})
    if dup:
        raise DataError(f"duplicate storm ids: {', '.join(dup)}")
    return fields, [p for p, _ in pairs]


def _summary_files(directory):
    return [p for p, _ in _json_files([directory], SUMMARY_SCHEMA)]


def _on_buffer(raster: RasterField, buf, what):
    idx = buf.member_indices
    bad = idx[~raster.mask[idx]]
    if bad.size:
        raise DataError(f"{what} has nodata inside the buffer at cells {bad[:20].tolist()}")
    return raster.values[idx]


def _storm_buffer(args):
    """Land grid, buffer, region and storm id for a single incoming storm."""
    land = load_raster(args.land)
    spec = load_buffer_spec(args.buffer)
    buf = build_buffer(land, land, spec["center1"], spec["center2"], spec["radius_km"])
    sid = args.storm_id or spec.get("storm_id") or Path(args.buffer).stem
    return land, buf, spec["region"], str(sid)


def _theta_stream(seed, storm_id) -> np.random.Generator:
    key = zlib.crc32(str(storm_id).encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(5, key))))


def _theta_draws(args, region, storm_id, count):
    """``(thetas, model_id, covariance, inputs)`` from a chain or a bootstrap set."""
    rng = _theta_stream(args.seed, storm_id)
    if (args.chain is None) == (args.bootstrap is None):
        raise UsageError("give exactly one of --chain or --bootstrap")
    if args.chain is not None:
        chain = PosteriorChain.from_csv(args.chain)
        x = DesignSpec(chain.model_id).regressors(region)
        thetas = sample_theta_new(chain, x, rng, count)
        base, p = chain.model_id, chain.p
        inputs = [Path(args.chain), Path(args.chain).with_suffix(".json")]
    else:
        summaries = load_summaries(args.bootstrap)
        thetas = sample_theta_bootstrap(summaries, rng, count)
        base, p = 4, summaries[0].p
        inputs = _summary_files(args.bootstrap)
    covariance = "nonspatial" if p == 1 else "exponential"
    model_id = base
    if args.bias is not None:
        if base == 5:
            raise DataError("the nonspatial model has no bias-adjusted variant")
        model_id = base + 5
    if args.model_id is not None:
        model_id = args.model_id
    return thetas, model_id, covariance, inputs


def _bias_offset(args, land, buf):
    if args.bias is None:
        return None, []
    mean = load_raster(args.bias)
    if not mean.same_grid(land):
        raise DataError("bias raster does not share the land grid")
    v = mean.values[buf.member_indices]
    # cells never covered by a training storm carry no bias information
    return np.where(mean.mask[buf.member_indices], v, 0.0), [Path(args.bias)]


def _watersheds(path, buf):
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read watersheds {path}: {exc}") from None
    if not isinstance(doc, dict) or "watersheds" not in doc:
        raise DataError(f"{path}: expected an object with a 'watersheds' list")
    area = float(doc.get("cell_area_km2", 1.0))
    masks, skipped = [], []
    for w in doc["watersheds"]:
        try:
            name, cells = w["name"], np.asarray(w["cells"], dtype=np.int64)
        except (KeyError, TypeError, ValueError):
            raise DataError(f"{path}: each watershed needs 'name' and integer 'cells'") from None
        if not np.isin(cells, buf.member_indices).any():
            continue
        try:
            masks.append(WatershedMask.from_grid_cells(name, cells, buf, area))
        except DataError:
            # fewer than 30 cells inside the buffer
            skipped.append(name)
    return masks, skipped


def _level_tag(v) -> str:
    return f"{v:g}"


# ------------------------------------------------------------------- stages


def cmd_ingest(args):
    obs = sqrt_transform(load_raster(args.obs))
    fc = sqrt_transform(load_raster(args.fcst))
    land, buf, region, sid = _storm_buffer(args)
    if not obs.same_grid(land):
        raise DataError("observation grid differs from the land grid")
    ef = make_error_field(obs, fc, buf, args.region or region, sid)
    out = _out_dir(args.out)
    path = out / f"{sid}.json"
    save_error_field(ef, path)
    write_manifest(out, "ingest", args, [args.obs, args.fcst, args.land, args.buffer], [path],
                   name=f"{sid}.manifest.json")
    print(f"{sid}: {ef.n} cells -> {path}")


def cmd_mle(args):
    fields, inputs = _load_fields(args.fields)
    if args.nonspatial:
        summaries = [nonspatial_summary(ef) for ef in fields]
    else:
        summaries = fit_storms(fields, jobs=args.jobs, hessian=args.hessian)
    out = _out_dir(args.out)
    paths = [save_summary(s, out) for s in summaries]
    write_manifest(out, "mle", args, inputs, paths)
    for s in summaries:
        print(f"{s.storm_id}: theta_hat={np.round(s.theta_hat, 4).tolist()} n={s.n_points}")


def cmd_gibbs(args):
    summaries = load_summaries(args.summaries)
    prior = None
    if args.nu0 is not None:
        prior = empirical_bayes_s0(summaries, args.nu0)
    chain = gibbs_run(summaries, args.model, prior=prior, G=args.iters, burn_in=args.burnin, seed=args.seed)
    out = _out_dir(args.out)
    path = out / f"chain_model{args.model}.csv"
    chain.to_csv(path)
    write_manifest(out, "gibbs", args, _summary_files(args.summaries), [path, path.with_suffix(".json")],
                   seed=args.seed)
    print(f"model {args.model}: {chain.G} draws for {len(chain.storm_ids)} storms -> {path}")


def cmd_bias(args):
    fields, inputs = _load_fields(args.fields)
    mf, summaries, info = em_bias_loop(fields, max_iters=args.max_iters, tol=args.tol, hessian=args.hessian)
    out = _out_dir(args.out)
    written = []
    for name, r in mf.to_rasters().items():
        p = out / f"{name}.asc"
        save_raster(r, p)
        written.append(p)
    p = out / "zscore.asc"
    save_raster(standardized_error_map(mf), p)
    written.append(p)
    written += [save_summary(s, out / "summaries") for s in summaries]
    em = {"iterations": info.iterations, "converged": info.converged, "deltas": list(info.deltas),
          "fallbacks": [list(f) for f in info.fallbacks], "nodata": NODATA}
    p = out / "em.json"
    p.write_text(json.dumps(em, indent=1) + "\n")
    written.append(p)
    write_manifest(out, "bias", args, inputs, written)
    state = "converged" if info.converged else "not converged"
    print(f"bias loop {state} after {info.iterations} pass(es); {int(mf.covered.sum())} cells covered")


def cmd_predict(args):
    land, buf, region, sid = _storm_buffer(args)
    fc_raster = load_raster(args.fcst)
    if not fc_raster.same_grid(land):
        raise DataError("forecast grid differs from the land grid")
    forecast = _on_buffer(sqrt_transform(fc_raster), buf, "forecast")
    thetas, model_id, covariance, inputs = _theta_draws(args, region, sid, args.size)
    offset, extra = _bias_offset(args, land, buf)
    inputs += extra + [Path(args.fcst), Path(args.land), Path(args.buffer)]
    loc = land.cell_centers(buf.member_indices)
    ens = build_ensemble(thetas, loc, buf, forecast, args.seed, offset, land, covariance, args.jobs)

    out = _out_dir(args.out)
    written, rows = [], []
    obs = None
    if args.obs is not None:
        obs_r = load_raster(args.obs)
        obs = _on_buffer(sqrt_transform(obs_r), buf, "observation")
        inputs.append(Path(args.obs))
    for level in args.levels:
        p = out / f"pred_{_level_tag(level)}.asc"
        save_raster(prediction_map(ens, level), p)
        written.append(p)
        if obs is not None:
            rate = coverage(prediction_values(ens, level), obs)
            rows.append({"storm_id": sid, "model_id": model_id, "basin": "buffer",
                         "metric": f"coverage_{_level_tag(level)}", "value": rate})
    for thr in args.thresholds:
        p = out / f"prob_{_level_tag(thr)}mm.asc"
        save_raster(threshold_prob_map(ens, thr), p)
        written.append(p)
    p = out / "margins_in.asc"
    save_raster(margins_of_error(ens, args.margin_level), p)
    written.append(p)

    if args.watersheds is not None:
        masks, skipped = _watersheds(args.watersheds, buf)
        inputs.append(Path(args.watersheds))
        summary = {"schema": DENSITY_SCHEMA, "storm_id": sid, "model_id": model_id, "skipped": skipped,
                   "watersheds": {}}
        for m in masks:
            wd = watershed_density(ens, m)
            lo, hi = wd.totals_mm.min() - 3 * wd.bandwidth, wd.totals_mm.max() + 3 * wd.bandwidth
            xs = np.linspace(lo, hi, args.density_points)
            p = out / f"density_{m.name}.csv"
            lines = ["total_mm,density"] + [f"{x!r},{d!r}" for x, d in zip(xs.tolist(), wd.pdf(xs).tolist())]
            p.write_text("\n".join(lines) + "\n")
            written.append(p)
            summary["watersheds"][m.name] = {
                "cells": int(m.members.size), "cell_area_km2": m.cell_area_km2, "bandwidth_mm": wd.bandwidth,
                "quantiles_mm": wd.quantiles,
                "quantiles_m3": {k: v * m.cell_area_km2 * 1000.0 for k, v in wd.quantiles.items()},
            }
        p = out / "watersheds.json"
        p.write_text(json.dumps(summary, indent=1) + "\n")
        written.append(p)
        if skipped:
            print(f"skipped {len(skipped)} watershed(s) with fewer than 30 buffer cells", file=sys.stderr)
    if rows:
        p = out / "metrics.csv"
        write_metric_rows(p, rows)
        written.append(p)
    write_manifest(out, "predict", args, inputs, written, seed=args.seed)
    print(f"{sid}: model {model_id}, {ens.size} simulations on {buf.n} cells -> {out}")


def cmd_score(args):
    land, buf, region, sid = _storm_buffer(args)
    obs_r, fc_r = load_raster(args.obs), load_raster(args.fcst)
    if not (obs_r.same_grid(land) and fc_r.same_grid(land)):
        raise DataError("observation and forecast must share the land grid")
    y = _on_buffer(sqrt_transform(obs_r), buf, "observation") - _on_buffer(sqrt_transform(fc_r), buf, "forecast")
    thetas, model_id, covariance, inputs = _theta_draws(args, region, sid, args.size)
    offset, extra = _bias_offset(args, land, buf)
    inputs += extra + [Path(args.obs), Path(args.fcst), Path(args.land), Path(args.buffer), Path(args.watersheds)]
    masks, skipped = _watersheds(args.watersheds, buf)
    if not masks:
        raise DataError("no watershed holds at least 30 buffer cells")
    loc = land.cell_centers(buf.member_indices)
    rows, total = [], 0.0
    for m in masks:
        D = None if covariance == "nonspatial" else pairwise_distances(loc[m.members])
        mean = None if offset is None else offset[m.members]
        s = log_score(thetas, y[m.members], D, mean, covariance)
        total += s.value
        rows.append({"storm_id": sid, "model_id": model_id, "basin": m.name, "metric": "log_score",
                     "value": s.value})
        if s.skipped:
            rows.append({"storm_id": sid, "model_id": model_id, "basin": m.name, "metric": "draws_skipped",
                         "value": s.skipped})
    rows.append({"storm_id": sid, "model_id": model_id, "basin": "total", "metric": "log_score", "value": total})
    out = _out_dir(args.out)
    p = out / f"scores_{sid}_model{model_id}.csv"
    write_metric_rows(p, rows)
    write_manifest(out, "score", args, inputs, [p], seed=args.seed,
                   name=f"scores_{sid}_model{model_id}.manifest.json")
    if skipped:
        print(f"skipped {len(skipped)} watershed(s) with fewer than 30 buffer cells", file=sys.stderr)
    print(f"{sid}: model {model_id} total log score {total:.3f} over {len(masks)} basins")


def cmd_evidence(args):
    summaries = load_summaries(args.summaries)
    evs, inputs = [], _summary_files(args.summaries)
    for c in args.chains:
        chain = PosteriorChain.from_csv(c)
        evs.append(hierarchy_evidence(chain, summaries))
        inputs += [Path(c), Path(c).with_suffix(".json")]
    out = _out_dir(args.out)
    p = out / "evidence.csv"
    write_evidence_table(p, evs)
    write_manifest(out, "evidence", args, inputs, [p])
    for e in evs:
        print(f"model {e.model_id}: log evidence {e.log_evidence:.3f} (P={e.P})")


def cmd_simstudy(args):
    out = _out_dir(args.out)
    if args.export:
        truth = export_synthetic(out, seed=args.seed)
        written = sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
        write_manifest(out, "simstudy-export", args, [], written, seed=args.seed)
        print(f"wrote 47 training fields and {len(truth)} test storms under {out}")
        return
    which = "train" if args.paper_scale else args.geometry
    reps = args.reps if args.reps is not None else (FULL_REPS if args.paper_scale else DESK_REPS)
    _, geo = load_geometry(which)
    sims = simulate_training_set(geo, reps, args.seed, fixed_theta=FIXED_THETA if args.fixed_theta else None)
    rep = coverage_report(sims, gibbs=not (args.no_gibbs or args.fixed_theta), G=args.iters,
                          burn_in=args.burnin, seed=args.seed, jobs=args.jobs)
    rep.config.update({"geometry": which, "reps": reps, "fixed_theta": bool(args.fixed_theta)})
    pj, pt = out / "report.json", out / "report.txt"
    pj.write_text(json.dumps(rep.to_json(), indent=1) + "\n")
    pt.write_text(rep.table() + "\n")
    write_manifest(out, "simstudy", args, [], [pj, pt], seed=args.seed)
    print(rep.table())


# ------------------------------------------------------------------- parser


def _add_storm_args(p):
    p.add_argument("--land", help="land mask raster (1 = land)")
    p.add_argument("--buffer", help="buffer spec JSON {center1, center2, radius_km, region}")
    p.add_argument("--storm-id", help="storm id (default: from the buffer spec or its file name)")


def _add_theta_args(p):
    p.add_argument("--chain", help="posterior chain CSV from the gibbs stage")
    p.add_argument("--bootstrap", help="summaries directory; resample the MLEs instead of a chain")
    p.add_argument("--bias", help="mean.asc from the bias stage; switches to the bias-adjusted model")
    p.add_argument("--model-id", type=int, help="label written to the output rows")
    p.add_argument("--size", type=int, default=ENSEMBLE_SIZE, help="number of predictive draws")
    p.add_argument("--seed", type=int, default=0)


REQUIRED = {
    "ingest": ("obs", "fcst", "land", "buffer", "out"),
    "mle": ("fields", "out"),
    "gibbs": ("summaries", "out"),
    "bias": ("fields", "out"),
    "predict": ("fcst", "land", "buffer", "out"),
    "score": ("obs", "fcst", "land", "buffer", "watersheds", "out"),
    "evidence": ("summaries", "chains", "out"),
    "simstudy": ("out",),
}


def build_parser():
    parser = _Parser(prog="stormuq", description="Uncertainty quantification for gridded storm forecasts.")
    parser.add_argument("--version", action=_VersionAction, help="print the version and output schemas")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI file; keys of [DEFAULT] and [<stage>] set flag defaults")
    common.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command", metavar="STAGE", parser_class=_Parser)
    subs = {}

    p = subs["ingest"] = sub.add_parser("ingest", parents=[common], help="build an error field from rasters")
    p.add_argument("--obs", help="observed precipitation raster (mm)")
    p.add_argument("--fcst", help="forecast precipitation raster (mm)")
    _add_storm_args(p)
    p.add_argument("--region", help="override the region label of the buffer spec")
    p.set_defaults(func=cmd_ingest)

    p = subs["mle"] = sub.add_parser("mle", parents=[common], help="fit per-storm MLEs and Hessians")
    p.add_argument("--fields", nargs="+", help="error-field JSON files or directories")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--hessian", choices=("analytic", "numeric"), default="analytic")
    p.add_argument("--nonspatial", action="store_true", help="fit the independent-cells model instead")
    p.set_defaults(func=cmd_mle)

    p = subs["gibbs"] = sub.add_parser("gibbs", parents=[common], help="sample the hierarchy")
    p.add_argument("--summaries", help="directory of storm summaries")
    p.add_argument("--model", type=int, choices=(1, 2, 3, 5), default=2)
    p.add_argument("--iters", type=int, default=10_000, help="retained draws")
    p.add_argument("--burnin", type=int, default=1_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nu0", type=float, help="prior degrees of freedom (default p + 1)")
    p.set_defaults(func=cmd_gibbs)

    p = subs["bias"] = sub.add_parser("bias", parents=[common], help="estimate the forecast bias field")
    p.add_argument("--fields", nargs="+", help="error-field JSON files or directories")
    p.add_argument("--max-iters", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--hessian", choices=("analytic", "numeric"), default="analytic")
    p.set_defaults(func=cmd_bias)

    p = subs["predict"] = sub.add_parser("predict", parents=[common], help="predictive maps for a new storm")
    p.add_argument("--fcst", help="forecast raster (mm)")
    p.add_argument("--obs", help="observed raster (mm); adds coverage rows")
    _add_storm_args(p)
    _add_theta_args(p)
    p.add_argument("--levels", type=_floats, default=[0.95, 0.99])
    p.add_argument("--thresholds", type=_floats, default=[25.4, 50.8], help="mm")
    p.add_argument("--margin-level", type=float, default=0.95)
    p.add_argument("--watersheds", help='JSON {"cell_area_km2": a, "watersheds": [{"name", "cells"}]}')
    p.add_argument("--density-points", type=int, default=256)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = subs["score"] = sub.add_parser("score", parents=[common], help="basin log scores for a held-out storm")
    p.add_argument("--obs", help="observed raster (mm)")
    p.add_argument("--fcst", help="forecast raster (mm)")
    _add_storm_args(p)
    _add_theta_args(p)
    p.add_argument("--watersheds", help="watershed JSON")
    p.set_defaults(func=cmd_score)

    p = subs["evidence"] = sub.add_parser("evidence", parents=[common], help="Laplace-Metropolis evidence")
    p.add_argument("--summaries", help="directory of the summaries the chains were run on")
    p.add_argument("--chains", nargs="+", help="chain CSV files")
    p.set_defaults(func=cmd_evidence)

    p = subs["simstudy"] = sub.add_parser("simstudy", parents=[common], help="coverage simulation study")
    p.add_argument("--reps", type=int, help=f"replicates (default {DESK_REPS}; {FULL_REPS} with --paper-scale)")
    p.add_argument("--geometry", choices=("desk", "train"), default="desk")
    p.add_argument("--paper-scale", action="store_true", help="all 47 training buffers, 50 replicates")
    p.add_argument("--fixed-theta", action="store_true", help="simulate every field at sigma2=4, phi=1.5")
    p.add_argument("--no-gibbs", action="store_true", help="Wald intervals only")
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--burnin", type=int, default=1_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--export", action="store_true", help="write synthetic pipeline inputs instead")
    p.set_defaults(func=cmd_simstudy)
    return parser, subs


def _apply_config(path, stage, sub: argparse.ArgumentParser):
    cp = configparser.ConfigParser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    own = set(cp[stage]) - set(cp.defaults()) if cp.has_section(stage) else set()
    items = cp[stage] if cp.has_section(stage) else cp.defaults()
    values = {}
    for key, raw in items.items():
        dest = key.replace("-", "_")
        a = actions.get(dest)
        if a is None:
            if key in own:
                raise UsageError(f"config key {key!r} is not valid for {stage}")
            continue
        if isinstance(a, argparse._StoreTrueAction):
            values[dest] = cp.BOOLEAN_STATES.get(raw.lower())
            if values[dest] is None:
                raise UsageError(f"config key {key!r} needs a boolean")
        elif a.nargs in ("+", "*"):
            values[dest] = raw.split()
        else:
            try:
                values[dest] = a.type(raw) if a.type else raw
            except (ValueError, argparse.ArgumentTypeError):
                raise UsageError(f"bad value {raw!r} for config key {key!r}") from None
            if a.choices is not None and values[dest] not in a.choices:
                raise UsageError(f"config key {key!r} must be one of {list(a.choices)}")
    sub.set_defaults(**values)


def _show_warning(message, category, filename, lineno, file=None, line=None):
    print(f"stormuq: warning: {message}", file=sys.stderr)


def run(argv=None) -> int:
    """Parse ``argv`` and run one stage; returns the exit status."""
    with warnings.catch_warnings():
        warnings.showwarning = _show_warning
        return _run(argv)


def _run(argv) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            print("stormuq: error: a stage is required", file=sys.stderr)
            return EXIT_USAGE
        sub = subs[args.command]
        if args.config:
            _apply_config(args.config, args.command, sub)
            args = parser.parse_args(argv)
        missing = [n for n in REQUIRED[args.command] if getattr(args, n) is None]
        if missing:
            sub.error("missing " + ", ".join("--" + m.replace("_", "-") for m in missing))
        args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"stormuq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"stormuq: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"stormuq: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> int:
    return run()


if __name__ == "__main__":
    sys.exit(main())
