"""Command-line experiment harness.

Every subcommand reads one JSON config, copies it into the output
directory, and writes JSON results, raw-float map files and CSV tables
together with a ``schema.json`` describing the CSV columns.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import phantom as ph
from .bloch import AnalyticModel, EpgModel, FispSequence, ProjectedModel, read_flip_schedule, synthetic_flip_schedule
from .certificate import (
    GroundTruth, Raster, check_nondegeneracy, default_rasters, raster_g, separation_instance,
    solve_precertificate, sparse_normal_weights,
)
from .errors import DivergenceError, TrainingDiverged
from .mapfile import write_map
from .measure import SpikeMeasure
from .sfw import SgbConfig, solve_sgb
from .surrogate import MlpSurrogate, epg_training_set, train_surrogate

log = logging.getLogger("sgblasso")

SCHEMAS = {
    "train-surrogate": {
        "nrmse.csv": {"split": "train, val or test", "nrmse": "|pred - target|_F / |target|_F on that split"},
    },
    "demix": {
        "metrics.csv": {
            "seed": "phantom seed", "snr_db": "noise level (empty when noiseless)", "stop_reason": "certified or max_iters",
            "n_spikes": "spikes in the recovered measure", "mape_t1t2": "mean T1/T2 MAPE over compartments (%)",
            "psnr_db_mean": "mean PSNR of the matched maps", "ssim_mean": "mean SSIM of the matched maps",
        },
        "summary.csv": {"snr_db": "noise level", "n": "number of seeds", "mape_mean": "mean MAPE (%)", "mape_std": "std of MAPE (%)"},
    },
    "certificate": {
        "heatmap.csv": {"t1_ms": "T1 of the raster node", "t2_ms": "T2 of the raster node", "g": "certificate value"},
        "separation.csv": {"delta": "fraction of the spike offset", "max_g": "max g off the spikes", "verdict": "nondegeneracy verdict"},
        "frontier.csv": {"rho": "fraction of nonzero voxels per map", "beta": "group weight", "max_g": "max g off the spikes",
                         "verdict": "nondegeneracy verdict"},
    },
    "phantom": {},
}


def _setup_logging():
    level = os.environ.get("SGB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.10g}" if isinstance(x, float) else x for x in row])


def _resolve(base, path):
    p = Path(path)
    return p if p.is_absolute() else Path(base) / p


def build_sequence(cfg, base):
    seq = cfg.get("sequence", {})
    if "flip_file" in seq:
        flips = read_flip_schedule(_resolve(base, seq["flip_file"]))
    else:
        flips = synthetic_flip_schedule(seq.get("length", 1000))
    return FispSequence(flips, seq.get("tr_ms", 10.0), seq.get("te_ms", 1.9), seq.get("ti_ms", 18.0))


def build_model(cfg, base):
    """Model from a ``{"kind": "epg" | "analytic" | "surrogate", ...}`` block."""
    kind = cfg.get("kind", "surrogate")
    if kind == "surrogate":
        return MlpSurrogate.load(_resolve(base, cfg["weights"]))
    if kind == "analytic":
        return AnalyticModel(np.asarray(cfg.get("t_grid", np.linspace(10.0, 3000.0, 64)), dtype=float))
    if kind == "epg":
        model = EpgModel(build_sequence(cfg, base), cfg.get("n_states"))
        if "basis_from" in cfg:
            basis = MlpSurrogate.load(_resolve(base, cfg["basis_from"])).basis
            model = ProjectedModel(model, basis)
        return model
    raise ValueError(f"unknown model kind {kind!r}")


def sgb_config(cfg):
    keys = ("alpha", "beta", "coarse_grid", "eval_grid", "max_outer_iters", "lbfgs_max_iters",
            "lbfgs_tol", "stop_slack", "prune_tol", "merge_tol")
    kw = {k: cfg[k] for k in keys if k in cfg}
    for k in ("t1_range", "t2_range"):
        if k in cfg:
            kw[k] = tuple(cfg[k])
    return SgbConfig(**kw)


# ---------------------------------------------------------------- train


def cmd_train_surrogate(cfg, out, base, seed, threads):
    model = EpgModel(build_sequence(cfg, base), cfg.get("n_states"))
    thetas, targets, subspace = epg_training_set(model, per_axis=cfg.get("grid_per_axis", 100), tau=cfg.get("tau", 10))
    log.info("training on %d fingerprints", thetas.shape[0])
    try:
        s = train_surrogate(
            thetas, targets, hidden=cfg.get("hidden", 500), epochs=cfg.get("epochs", 100), lr=cfg.get("lr", 0.005),
            batch=cfg.get("batch", 100), lr_decay=cfg.get("lr_decay", 0.95), seed=seed,
        )
    except TrainingDiverged as exc:
        _dump(out / "error.json", {"error": "training diverged", "epoch": exc.epoch})
        return 3
    s.basis = subspace.basis
    s.save(out / "surrogate.bin")
    _dump(out / "metrics.json", {"nrmse": s.nrmse, "n_samples": int(thetas.shape[0]), "hidden": s.hidden, "tau": s.n_out})
    _write_csv(out / "nrmse.csv", ["split", "nrmse"], [(k, float(v)) for k, v in sorted(s.nrmse.items())])
    return 0


# ---------------------------------------------------------------- phantoms


def make_phantom(pcfg, model, seed, basis=None):
    """Noisy TSMI and ground truth from a phantom block of the config."""
    kind = pcfg.get("kind", "dirichlet")
    shape = tuple(pcfg.get("shape", (20, 20)))
    default = ph.DIRICHLET_THETAS[:2] if kind == "two_region" else ph.DIRICHLET_THETAS
    thetas = np.asarray(pcfg.get("thetas", default), dtype=float)
    if kind == "dirichlet":
        x, gt = ph.gen_dirichlet(ph.DirichletSpec(tuple(map(tuple, thetas)), pcfg.get("a", 0.5), shape, seed), model)
    else:
        if kind == "two_region":
            w = ph.two_region_weights(shape, pcfg.get("mix_width", 0.0), pcfg.get("corner_mix"))
        elif kind == "box":
            w = ph.box_weights(shape, thetas.shape[0])
        elif kind == "zero":
            w = np.zeros((thetas.shape[0], shape[0] * shape[1]))
        else:
            raise ValueError(f"unknown phantom kind {kind!r}")
        gt = None if kind == "zero" else GroundTruth(thetas, w)
        x = model.atoms(thetas) @ w
    noise_basis = basis if pcfg.get("noise_domain", "time") == "time" else None
    snr = pcfg.get("snr_db")
    if snr is not None and np.linalg.norm(x) > 0:
        x = ph.noisy_tsmi(x, snr, seed + pcfg.get("noise_seed_offset", 1000), noise_basis)
    return x, gt, shape


def _demix_one(args):
    cfg, base, seed, snr = args
    _setup_logging()
    model = build_model(cfg["model"], base)
    gen_cfg = cfg.get("generator")
    gen = build_model(gen_cfg, base) if gen_cfg else model
    pcfg = dict(cfg.get("phantom", {}))
    if snr is not None:
        pcfg["snr_db"] = snr
    basis = getattr(model, "basis", None)
    if "input" in cfg:
        from .mapfile import map_to_tsmi, read_map

        arr, _ = read_map(_resolve(base, cfg["input"]))
        x, gt, shape = map_to_tsmi(arr), None, arr.shape[:2]
    else:
        x, gt, shape = make_phantom(pcfg, gen, seed, basis)
    res = solve_sgb(model, x, sgb_config(cfg.get("sgb", {})))
    report = ph.evaluate(gt, res.measure, shape) if gt is not None and res.measure.k else None
    return seed, snr, shape, res, report, gt


def cmd_demix(cfg, out, base, seed, threads):
    seeds = cfg.get("seeds", [seed])
    snrs = cfg.get("snrs", [cfg.get("phantom", {}).get("snr_db")])
    jobs = [(cfg, str(base), s, snr) for snr in snrs for s in seeds]
    try:
        if threads > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(_demix_one, jobs))
        else:
            results = [_demix_one(j) for j in jobs]
    except DivergenceError as exc:
        _dump(out / "error.json", {"error": str(exc), "dump": exc.dump})
        return 2
    rows, by_snr = [], {}
    for s, snr, shape, res, report, gt in results:
        tag = f"seed{s}" + ("" if snr is None else f"_snr{snr:g}")
        m = res.measure
        ref = f"maps_{tag}.map"
        write_map(out / ref, m.weights.T.reshape(shape[0], shape[1], m.k) if m.k else np.zeros((shape[0], shape[1], 0)),
                  tag="mixture_maps")
        doc = {
            "measure": m.to_dict(weights_ref=ref), "objective_trace": res.objective_trace,
            "stop_reason": res.stop_reason, "iterations": res.iterations, "dual_max": res.dual_max,
        }
        if report is not None:
            doc["metrics"] = report.to_dict()
        _dump(out / f"result_{tag}.json", doc)
        mape = report.mape_t1t2 if report else (100.0 if gt is not None else float("nan"))
        rows.append((s, "" if snr is None else float(snr), res.stop_reason, m.k, mape,
                     float(np.mean(report.psnr_db)) if report else float("nan"),
                     float(np.mean(report.ssim)) if report else float("nan")))
        by_snr.setdefault(snr, []).append(mape)
    _write_csv(out / "metrics.csv", list(SCHEMAS["demix"]["metrics.csv"]), rows)
    _write_csv(out / "summary.csv", ["snr_db", "n", "mape_mean", "mape_std"],
               [("" if k is None else float(k), len(v), float(np.mean(v)), float(np.std(v))) for k, v in by_snr.items()])
    return 0


# ---------------------------------------------------------------- certificates


def _weights_from(wcfg, seed):
    kind = wcfg.get("kind", "two_region")
    shape = tuple(wcfg.get("shape", (16, 16)))
    if kind == "two_region":
        return ph.two_region_weights(shape, wcfg.get("mix_width", 0.0), wcfg.get("corner_mix", 0.5))
    if kind == "sparse_normal":
        return sparse_normal_weights(wcfg.get("v", 1024), wcfg["rho"], seed=seed)
    if kind == "explicit":
        return np.asarray(wcfg["values"], dtype=float)
    raise ValueError(f"unknown weight kind {kind!r}")


def _rasters(cfg, gt):
    r = cfg.get("raster", {})
    return default_rasters(gt, r.get("per_axis", 120), r.get("zoom_per_axis", 81), r.get("zoom_half_width", 0.3))


def cmd_certificate(cfg, out, base, seed, threads):
    model = build_model(cfg["model"], base)
    study = cfg.get("study", "single")
    default = [[719.0, 80.0], [1190.0, 98.0]] if study == "beta_sparsity" else [[784.0, 77.0], [1216.0, 96.0]]
    thetas = np.asarray(cfg.get("thetas", default), dtype=float)
    wcfg = cfg.get("weights", {})
    if study == "single":
        w = _weights_from(wcfg, seed)
        gt = GroundTruth(thetas, w[: thetas.shape[0]])
        cert = solve_precertificate(model, gt, cfg.get("beta", 1e-3))
        rasters = _rasters(cfg, gt)
        verdict = check_nondegeneracy(cert, gt, rasters, cfg.get("exclusion_radius"))
        _dump(out / "verdict.json", verdict.to_dict() | {"gamma_rank": cert.gamma_rank, "gamma_cols": cert.gamma_cols})
        heat = raster_g(cert, rasters[0])
        write_map(out / "heatmap.map", heat, tag="certificate_g")
        pts = rasters[0].nodes()
        _write_csv(out / "heatmap.csv", ["t1_ms", "t2_ms", "g"],
                   [(float(p[0]), float(p[1]), float(g)) for p, g in zip(pts, heat.ravel()) if np.isfinite(g)])
    elif study == "separation":
        w = _weights_from(wcfg, seed)
        rows = []
        for delta in cfg.get("deltas", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]):
            gt = separation_instance(delta, w, thetas[0], thetas[1])
            cert = solve_precertificate(model, gt, cfg.get("beta", 1e-3))
            v = check_nondegeneracy(cert, gt, _rasters(cfg, gt), cfg.get("exclusion_radius"))
            rows.append((float(delta), v.max_g_off_support, v.verdict))
        _write_csv(out / "separation.csv", ["delta", "max_g", "verdict"], rows)
    elif study == "beta_sparsity":
        rows = []
        for rho in cfg.get("rhos", [0.05, 0.1, 0.2, 0.4, 0.7, 1.0]):
            w = sparse_normal_weights(wcfg.get("v", 1024), rho, seed=seed)
            gt = GroundTruth(thetas, w)
            rasters = _rasters(cfg, gt)
            for beta in cfg.get("betas", [1e-3, 1e-2, 0.1, 0.5, 0.9]):
                cert = solve_precertificate(model, gt, beta)
                v = check_nondegeneracy(cert, gt, rasters, cfg.get("exclusion_radius"))
                rows.append((float(rho), float(beta), v.max_g_off_support, v.verdict))
        _write_csv(out / "frontier.csv", ["rho", "beta", "max_g", "verdict"], rows)
    else:
        raise ValueError(f"unknown certificate study {study!r}")
    return 0


# ---------------------------------------------------------------- phantom only


def cmd_phantom(cfg, out, base, seed, threads):
    model = build_model(cfg["model"], base)
    x, gt, shape = make_phantom(cfg.get("phantom", {}), model, seed, getattr(model, "basis", None))
    write_map(out / "tsmi.map", x.T.reshape(shape[0], shape[1], -1), tag="tsmi")
    if gt is not None:
        SpikeMeasure(gt.thetas, gt.weights).save_json(out / "ground_truth.json")
    return 0


COMMANDS = {
    "train-surrogate": cmd_train_surrogate,
    "demix": cmd_demix,
    "certificate": cmd_certificate,
    "phantom": cmd_phantom,
}


def main(argv=None):
    parser = argparse.ArgumentParser(prog="sgblasso", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for Monte-Carlo seeds")
    parser.add_argument("--seed", type=int, default=0, help="base seed (u64)")
    args = parser.parse_args(argv)
    _setup_logging()
    if not 0 <= args.seed < 2**64:
        parser.error("--seed must be an unsigned 64-bit integer")
    cfg_path = Path(args.config)
    cfg = json.loads(cfg_path.read_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(cfg_path, out / "config.json")
    (out / "error.json").unlink(missing_ok=True)
    _dump(out / "schema.json", SCHEMAS[args.command])
    try:
        return COMMANDS[args.command](cfg, out, cfg_path.parent.resolve(), args.seed, max(1, args.threads))
    except (ValueError, OSError, KeyError) as exc:
        _dump(out / "error.json", {"error": f"{type(exc).__name__}: {exc}"})
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
