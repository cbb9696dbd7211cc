"""Command-line entry point: ``qvcbi synth|fit|eval|pipeline``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 divergence.
Progress goes to stdout as one JSON object per line; log messages go to
stderr at the level named by the QVCBI_LOG environment variable.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, check_files, load_config
from .graph import NetworkError, NetworkSpec, build_network
from .inference import FitDivergence
from .metrics import (evaluate_node, write_class_table, write_confusion, write_prior_table, write_report_json,
                      write_roc)
from .pipeline import run_scene, scene_priors
from .priors import FragilityCurve, PagerStub, default_curve
from .scene_io import (NODATA, GeometryError, Grid, GridFormatError, assemble_scene, read_grid, read_ground_truth,
                       read_posterior_dir, read_shakemap_xml, resample_nearest, write_grid, write_ground_truth,
                       write_outputs)
from .synthgen import SynthConfig, SynthError, sample_scene, scenario_presets

log = logging.getLogger("qvcbi")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
PARTIAL = ".partial"
CHECKPOINT = "checkpoint.json"
SCENE_FILES = {
    "dpm": "dpm.asc",
    "pga": "pga.asc",
    "prior_ls": "prior_ls.asc",
    "prior_lf": "prior_lf.asc",
    "footprint": "footprint.asc",
    "prior_bd_damaged": "prior_bd_damaged.asc",
}


class DataError(RuntimeError):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _emit(obj: dict, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(json.dumps(obj, sort_keys=True) + "\n")
    stream.flush()


def _network(cfg: RunConfig):
    n = cfg.network
    return build_network(NetworkSpec.paper_topology(m_bd=n.m_bd, m_ls=n.m_ls, m_lf=n.m_lf, xor=n.xor))


def _curve(cfg: RunConfig) -> FragilityCurve:
    try:
        return FragilityCurve.from_toml(cfg.priors.curve) if cfg.priors.curve else default_curve()
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[priors] curve: {exc}") from None


def _stub(cfg: RunConfig) -> PagerStub | None:
    if cfg.priors.mode == "hazus":
        return None
    try:
        return PagerStub.from_toml(cfg.priors.curve or None)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[priors] curve: {exc}") from None


# --------------------------------------------------------------------------
# synth


def synth_config(cfg: RunConfig) -> SynthConfig:
    s = cfg.synth
    name = s.preset or "clean"
    if name == "custom":
        sc = SynthConfig(nrows=s.nrows, ncols=s.ncols, seed=cfg.seed, name="custom")
    else:
        sc = scenario_presets(name, seed=cfg.seed, nrows=s.nrows, ncols=s.ncols)
    over = {k: getattr(s, k) for k in ("coverage", "footprint_missing", "prior_corruption", "prior_shrink")
            if getattr(s, k) != -1.0}
    curve = _curve(cfg)
    return replace(sc, m_bd=cfg.network.m_bd, xor=cfg.network.xor, curve=curve, **over)


def cmd_synth(cfg: RunConfig, outdir) -> dict:
    """Write a synthetic scene (six grids), its truth tables and a manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    if cfg.network.m_ls != 1 or cfg.network.m_lf != 1:
        raise ConfigError("synthetic scenes support binary LS and LF only ([network] m_ls = m_lf = 1)")
    sc = synth_config(cfg)
    if sc.m_bd != sc.curve.M:
        raise ConfigError(f"fragility curve has {sc.curve.M} states but [network] m_bd = {sc.m_bd}")
    scene, truth = sample_scene(sc)
    net = sc.network()
    pri = scene_priors(scene, net, sc.curve)
    g = scene.grid
    grids = {
        "dpm": scene.dpm, "pga": scene.pga, "prior_ls": scene.prior_ls, "prior_lf": scene.prior_lf,
        "footprint": scene.footprint,
        "prior_bd_damaged": Grid.like(g, 1.0 - pri.probs["BD"][:, 0]),
    }
    files = {}
    for key, name in SCENE_FILES.items():
        write_grid(grids[key], outdir / name)
        files[name] = _sha256(outdir / name)
    lon, lat = g.cell_centers()
    b = truth.building
    write_ground_truth(outdir / "truth.csv", lon[b], lat[b], truth.bd[b])
    write_ground_truth(outdir / "truth_ls.csv", lon, lat, truth.ls)
    write_ground_truth(outdir / "truth_lf.csv", lon, lat, truth.lf)
    for name in ("truth.csv", "truth_ls.csv", "truth_lf.csv"):
        files[name] = _sha256(outdir / name)
    manifest = {
        "command": "synth",
        "version": __version__,
        "seed": cfg.seed,
        "preset": sc.name,
        "shape": [sc.nrows, sc.ncols],
        "xor_forced": truth.xor_forced,
        "config": cfg.to_dict(),
        "files": files,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def scene_paths(d) -> dict:
    d = Path(d)
    return {
        "dpm": str(d / SCENE_FILES["dpm"]), "pga": str(d / SCENE_FILES["pga"]),
        "footprint": str(d / SCENE_FILES["footprint"]), "truth": str(d / "truth.csv"),
        "truth_ls": str(d / "truth_ls.csv"), "truth_lf": str(d / "truth_lf.csv"),
    }, {"ls_grid": str(d / SCENE_FILES["prior_ls"]), "lf_grid": str(d / SCENE_FILES["prior_lf"])}


# --------------------------------------------------------------------------
# fit


def load_scene(cfg: RunConfig):
    d = cfg.data
    try:
        dpm = read_grid(d.dpm)
        if d.pga:
            pga = read_grid(d.pga)
        else:
            pga = resample_nearest(read_shakemap_xml(d.shakemap), dpm)
        ls = read_grid(cfg.priors.ls_grid) if cfg.priors.ls_grid else None
        lf = read_grid(cfg.priors.lf_grid) if cfg.priors.lf_grid else None
        fp = read_grid(d.footprint) if d.footprint else None
        return assemble_scene(dpm, pga, ls, lf, fp, y_floor=d.y_floor, allow_nearest_resample=d.allow_resample)
    except (GridFormatError, GeometryError, ValueError) as exc:
        raise DataError(str(exc)) from None


def _config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def cmd_fit(cfg: RunConfig, outdir, workers: int = 1, progress=None) -> dict:
    """Assemble, prune, fit and write posterior grids plus a manifest.

    A ``.partial`` marker lives in ``outdir`` while the fit runs; when a rerun
    finds it next to a checkpoint written under the same configuration, the
    fit resumes from the checkpoint epoch.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    net = _network(cfg)
    curve = _curve(cfg)
    if "BD" in net.latent and curve.M != net.M("BD"):
        raise ConfigError(f"fragility curve has {curve.M} states but [network] m_bd = {net.M('BD')}")
    scene = load_scene(cfg)
    fcfg = cfg.fit_config(workers)
    try:
        priors = scene_priors(scene, net, curve, cfg.priors.mode, cfg.priors.gamma, _stub(cfg))
    except ValueError as exc:
        raise DataError(str(exc)) from None

    marker, ckpt = outdir / PARTIAL, outdir / CHECKPOINT
    digest = _config_digest(cfg)
    resume = False
    if marker.exists() and ckpt.exists():
        try:
            resume = json.loads(marker.read_text()).get("config") == digest
        except json.JSONDecodeError:
            resume = False
    if not resume and ckpt.exists():
        ckpt.unlink()
    marker.write_text(json.dumps({"config": digest}) + "\n")
    if resume:
        log.info("resuming from %s", ckpt)

    def report(rec):
        _emit({"event": "epoch", **rec})
        if progress is not None:
            progress(rec)

    t0 = time.perf_counter()
    try:
        sf = run_scene(scene, net, fcfg, priors, cfg.pruning.mode, cfg.pruning.tau, progress=report,
                       checkpoint_path=ckpt if fcfg.checkpoint_every else None, resume=resume)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    wall = time.perf_counter() - t0

    g = scene.grid
    written = {}
    if "grids" in cfg.output.formats:
        for p in write_outputs(sf.posteriors, scene, outdir):
            written[p.name] = p
        for node, probs in priors.probs.items():
            for m in range(probs.shape[1]):
                vals = np.full(g.size, NODATA)
                vals[scene.candidates] = probs[:, m]
                p = outdir / f"prior_{node.lower()}_{m}.asc"
                write_grid(Grid.like(g, vals, NODATA), p)
                written[p.name] = p
        vals = np.full(g.size, NODATA)
        vals[scene.candidates] = sf.prune.active.astype(float)
        p = outdir / "active_bd.asc"
        write_grid(Grid.like(g, vals, NODATA), p)
        written[p.name] = p
    p = outdir / "trace.csv"
    with p.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "audit_elbo", "grad_norm"])
        for e, (v, n) in enumerate(zip(sf.result.trace, sf.result.grad_norms), start=1):
            wr.writerow([e, repr(float(v)), repr(float(n))])
    written[p.name] = p
    p = outdir / "weights.json"
    p.write_text(json.dumps(sf.result.weights.to_dict(), indent=2, sort_keys=True) + "\n")
    written[p.name] = p

    inputs = {k: _sha256(v) for k, v in {**vars(cfg.data), **vars(cfg.priors)}.items()
              if isinstance(v, str) and v and Path(v).is_file()}
    manifest = {
        "command": "fit",
        "version": __version__,
        "seed": cfg.seed,
        "workers": workers,
        "config": cfg.to_dict(),
        "inputs": inputs,
        "outputs": {k: _sha256(v) for k, v in sorted(written.items())},
        "fit": {
            "epochs": sf.result.epochs,
            "converged": sf.result.converged,
            "final_audit_elbo": sf.result.trace[-1] if sf.result.trace else None,
            "fit_time_s": sf.fit_time,
            "wall_time_s": wall,
            "resumed": resume,
        },
        "pruning": {
            "mode": sf.prune.mode,
            "tau": cfg.pruning.tau,
            "n_candidates": int(scene.candidates.size),
            "n_active": int(sf.prune.active.sum()),
        },
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    marker.unlink(missing_ok=True)
    ckpt.unlink(missing_ok=True)
    return manifest


# --------------------------------------------------------------------------
# eval


def _prior_dir(postdir: Path) -> dict:
    out = {}
    for node in ("BD", "LS", "LF"):
        files = sorted(postdir.glob(f"prior_{node.lower()}_*.asc"), key=lambda p: int(p.stem.rsplit("_", 1)[1]))
        if files:
            grids = [read_grid(f) for f in files]
            arr = np.column_stack([gg.flat() for gg in grids])
            arr[arr == grids[0].nodata] = np.nan
            out[node] = arr
    return out


def cmd_eval(cfg: RunConfig, postdir, outdir) -> dict:
    """Metrics of the posterior grids in ``postdir`` against the truth tables."""
    postdir, outdir = Path(postdir), Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    try:
        post, grid = read_posterior_dir(postdir)
    except (FileNotFoundError, GridFormatError) as exc:
        raise DataError(str(exc)) from None
    prior = _prior_dir(postdir)
    active = None
    if (postdir / "active_bd.asc").exists():
        a = read_grid(postdir / "active_bd.asc")
        active = a.flat() == 1.0
    reports, excluded = [], {}
    truth_files = {"BD": cfg.data.truth, "LS": cfg.data.truth_ls, "LF": cfg.data.truth_lf}
    for node, path in truth_files.items():
        if not path or node not in post:
            continue
        M = post[node].shape[1] - 1
        try:
            gt = read_ground_truth(path, grid, M)
        except ValueError as exc:
            raise DataError(str(exc)) from None
        if len(gt) == 0:
            raise DataError(f"{path}: no ground-truth point falls inside the posterior grid")
        valid = np.all(np.isfinite(post[node]), axis=1)
        if node == "BD" and active is not None:
            valid &= active
        if not valid[gt.cell].any():
            raise DataError(f"{path}: every ground-truth point lies in a pruned or NODATA cell")
        try:
            rep = evaluate_node(post[node], gt.cell, gt.cls, node, prior.get(node), valid, keep_roc=True)
        except ValueError as exc:
            raise DataError(f"{node}: {exc}") from None
        reports.append(rep)
        excluded[node] = rep.n_excluded
    if not reports:
        raise ConfigError("no truth table configured for any node with posteriors ([data] truth, truth_ls, truth_lf)")

    files = {}
    if "tables" in cfg.output.formats:
        write_class_table(outdir / "metrics_classes.csv", reports)
        write_prior_table(outdir / "metrics_prior.csv", reports)
        for rep in reports:
            write_confusion(outdir / f"confusion_{rep.node.lower()}.csv", rep)
    if "roc" in cfg.output.formats:
        for rep in reports:
            for m, roc in rep.roc.items():
                write_roc(outdir / f"roc_{rep.node.lower()}_{m}.csv", roc)
    write_report_json(outdir / "metrics.json", reports)
    for p in sorted(outdir.glob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.name] = _sha256(p)
    summary = {
        "command": "eval",
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "posteriors": str(postdir),
        "excluded_points": excluded,
        "outputs": files,
        "metrics": [r.to_dict() for r in reports],
    }
    (outdir / "manifest.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# --------------------------------------------------------------------------
# pipeline


def cmd_pipeline(cfg: RunConfig, outdir, workers: int = 1, progress=None) -> dict:
    """synth (when configured), fit and eval under one output directory and manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    steps = {}
    if cfg.has_synth:
        steps["synth"] = cmd_synth(cfg, outdir / "scene")
        data, pri = scene_paths(outdir / "scene")
        cfg = replace(cfg, data=replace(cfg.data, **data), priors=replace(cfg.priors, **pri))
    check_files(cfg, need_scene=True)
    steps["fit"] = cmd_fit(cfg, outdir / "fit", workers, progress)
    if cfg.data.truth or cfg.data.truth_ls or cfg.data.truth_lf:
        steps["eval"] = cmd_eval(cfg, outdir / "fit", outdir / "eval")
    manifest = {
        "command": "pipeline",
        "version": __version__,
        "seed": cfg.seed,
        "workers": workers,
        "config": cfg.to_dict(),
        "steps": {k: {kk: vv for kk, vv in v.items() if kk != "config"} for k, v in steps.items()},
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qvcbi", description="Variational causal Bayesian inference for multi-hazard mapping")
    ap.add_argument("--version", action="version", version=f"qvcbi {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("synth", "write a synthetic scene"), ("fit", "fit a scene and write posteriors"),
                           ("eval", "score posterior grids against ground truth"),
                           ("pipeline", "synth, fit and eval in sequence")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--out", help="output directory (default: [output] dir)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--workers", type=int, help="worker threads (default: available cores)")
        p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-exact run")
        if name == "eval":
            p.add_argument("--posteriors", help="directory of posterior grids (default: the output directory)")
    return ap


def _setup_logging() -> None:
    level = os.environ.get("QVCBI_LOG", "WARNING").upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = replace(cfg, seed=args.seed, fit=replace(cfg.fit, seed=args.seed))
        workers = 1 if args.deterministic else (args.workers or os.cpu_count() or 1)
        if workers < 1:
            raise ConfigError("--workers must be >= 1")
        outdir = Path(args.out) if args.out else Path(cfg.output.dir)
        if args.command == "synth":
            check_files(cfg)
            res = cmd_synth(cfg, outdir)
            _emit(res)
        elif args.command == "fit":
            check_files(cfg, need_scene=True)
            res = cmd_fit(cfg, outdir, workers)
            _emit({"event": "done", "manifest": str(outdir / "manifest.json"), "epochs": res["fit"]["epochs"],
                   "converged": res["fit"]["converged"]})
        elif args.command == "eval":
            check_files(cfg, need_truth=True)
            postdir = Path(args.posteriors) if args.posteriors else outdir
            out = outdir / "eval" if not args.posteriors else outdir
            res = cmd_eval(cfg, postdir, out)
            _emit({"event": "done", "metrics": res["metrics"]})
        else:
            check_files(cfg, need_scene=not cfg.has_synth)
            res = cmd_pipeline(cfg, outdir, workers)
            _emit({"event": "done", "manifest": str(outdir / "manifest.json")})
    except ConfigError as exc:
        print(f"qvcbi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NetworkError, SynthError) as exc:
        print(f"qvcbi: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"qvcbi: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FitDivergence as exc:
        print(f"qvcbi: fit diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
