"""``fodf-kit``: the pipeline as subcommands driven by JSON configs.

Every run writes ``resolved_config.json`` (all defaults filled in, paths
made absolute) next to its outputs; passing that file back through
``--config`` reproduces the run. Machine-readable results go to files
only; messages go to standard error.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import connectome, csd, evaluation, phantom, sphere, trainer
from .errors import FodfKitError, NonConvergenceWarning
from .volume_io import (
    GradientScheme,
    Volume4D,
    ensure_dir,
    read_gradients,
    read_model,
    read_volume,
    write_gradients,
    write_model,
    write_volume,
)

log = logging.getLogger("fodf_kit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
THREADS_ENV = "FODF_KIT_THREADS"


class UsageError(Exception):
    """Bad command line or configuration (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- JSON helpers

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def dump_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- configs

_PHANTOM = {
    "shape": [16, 16, 16], "layout": "mixed", "geometry_seed": 0, "crossing_ratio": 0.5,
    "n_directions": 96, "bval": 2000.0, "n_b0": 6, "scheme_seed": 0,
    "snr": 20.0, "jitter_deg": 0.0, "gain": 1.0,
    "ad": phantom.AD_DEFAULT, "rd": phantom.RD_DEFAULT, "iso_diffusivity": phantom.ISO_DEFAULT,
    "s0": 1.0, "voxel_size_mm": [2.0, 2.0, 2.0], "order": 8,
    "rescan": False, "rescan_seed": None, "rescan_gain": 1.0, "rescan_jitter_deg": 0.0,
    "bvals_path": None, "bvecs_path": None,
}
_CSD_KEYS = {"lambda_": 1.0, "tau": csd.CsdParams().tau, "max_iter": 50, "order": 8,
             "sh_regularize": 0.0, "grid_size": 724}

DEFAULTS = {
    "phantom-gen": _PHANTOM,
    "scheme-gen": {"n": 96, "bval": 2000.0, "n_b0": 6, "restarts": 2},
    "scheme-drop": {"bvals_path": None, "bvecs_path": None, "keep": 45, "order": 8},
    "sh-fit": {"dwi": None, "bvals_path": None, "bvecs_path": None, "mask": None, "order": 8,
               "regularize": 0.0, "keep": None},
    "csd-fit": {"dwi": None, "bvals_path": None, "bvecs_path": None, "mask": None, **_CSD_KEYS},
    "train": {"subjects": [], "pairs": [], "validation_fraction": 0.25, "validation_axis": 2,
              **{k: v for k, v in trainer.TrainConfig().to_dict().items() if k != "seed"},
              "csd": dict(_CSD_KEYS)},
    "predict": {"model": None, "dwi": None, "bvals_path": None, "bvecs_path": None, "mask": None,
                "keep": None, "order": 8},
    "evaluate": {"a": None, "b": None, "mask": None, "label": ""},
    "degrade": {"dwi": None, "bvals_path": None, "bvecs_path": None, "mask": None,
                "estimator": "csd", "counts": None, "repeats": 10, "reference": None,
                "csd": dict(_CSD_KEYS)},
    "wilcoxon": {"x": None, "y": None, "mask": None, "exact_max_n": evaluation.EXACT_MAX_N},
    "connectome-metrics": {"matrix": None, "gamma": 1.0},
}

# config keys holding input paths (made absolute in the resolved config)
_PATH_KEYS = {"bvals_path", "bvecs_path", "dwi", "mask", "model", "a", "b", "reference",
              "matrix", "x", "y", "labels", "scan", "rescan"}
_COMMON = {"seed", "threads", "subcommand"}


def resolve_config(sub: str, args) -> dict:
    defaults = DEFAULTS[sub]
    user = {}
    base = Path.cwd()
    if args.config:
        try:
            user = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise UsageError("config must be a JSON object")
        base = Path(args.config).resolve().parent
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            user[key] = json.loads(raw)
        except json.JSONDecodeError:
            user[key] = raw
    unknown = sorted(set(user) - set(defaults) - _COMMON)
    if unknown:
        raise UsageError(f"unknown config keys for {sub}: {unknown}")
    if user.get("subcommand", sub) != sub:
        raise UsageError(f"config was resolved for {user['subcommand']!r}, not {sub!r}")
    cfg = json.loads(json.dumps(defaults))
    for k, v in user.items():
        if k in ("csd",) and isinstance(v, dict):
            bad = sorted(set(v) - set(defaults[k]))
            if bad:
                raise UsageError(f"unknown csd config keys: {bad}")
            cfg[k].update(v)
        else:
            cfg[k] = v
    cfg["subcommand"] = sub
    cfg["seed"] = int(args.seed if args.seed is not None else user.get("seed", 0))
    threads = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
    cfg["threads"] = int(threads if threads is not None else user.get("threads", 1))
    if cfg["threads"] < 1:
        raise UsageError("--threads must be at least 1")
    return _resolve_paths(cfg, base)


def _resolve_paths(obj, base: Path):
    if isinstance(obj, dict):
        out = {}
        for k, v in obj.items():
            if isinstance(v, str) and v and (k in _PATH_KEYS or (k == "estimator" and v != "csd")):
                out[k] = str((base / v).resolve())
            else:
                out[k] = _resolve_paths(v, base)
        return out
    if isinstance(obj, list):
        return [_resolve_paths(v, base) for v in obj]
    return obj


def _need(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError(f"{cfg['subcommand']} needs config keys {missing}")


def _csd_params(d: dict) -> csd.CsdParams:
    return csd.CsdParams(**d)


def _scheme(cfg) -> GradientScheme:
    return read_gradients(cfg["bvals_path"], cfg["bvecs_path"])


def _mask(cfg, shape) -> Volume4D:
    if cfg.get("mask"):
        return read_volume(cfg["mask"])
    return Volume4D.from_mask(np.ones(shape, bool))


# ---------------------------------------------------------------- subcommands

def run_phantom_gen(cfg, out: Path) -> None:
    if cfg["bvals_path"] or cfg["bvecs_path"]:
        _need(cfg, "bvals_path", "bvecs_path")
        scheme = _scheme(cfg)
    else:
        dirs = sphere.generate_scheme(int(cfg["n_directions"]), int(cfg["scheme_seed"]))
        scheme = GradientScheme.single_shell(dirs, float(cfg["bval"]), int(cfg["n_b0"]))
    profile = phantom.ScanProfile(snr=float(cfg["snr"]), direction_jitter_deg=float(cfg["jitter_deg"]),
                                  gain=float(cfg["gain"]), seed=cfg["seed"])
    dwi, mask, gt = phantom.generate_phantom(
        cfg["shape"], cfg["layout"], scheme, profile, geometry_seed=int(cfg["geometry_seed"]),
        crossing_ratio=float(cfg["crossing_ratio"]), ad=float(cfg["ad"]), rd=float(cfg["rd"]),
        iso_diffusivity=float(cfg["iso_diffusivity"]), s0=float(cfg["s0"]), order=int(cfg["order"]),
        voxel_size_mm=tuple(cfg["voxel_size_mm"]))
    write_volume(dwi, out / "dwi.dwv")
    write_volume(mask, out / "mask.dwv")
    write_volume(gt, out / "gt_fodf.dwv")
    write_gradients(scheme, out / "dwi.bval", out / "dwi.bvec")
    prov = {"scan_profile": profile.to_dict(), "phantom": dwi.source.info,
            "n_volumes": len(scheme), "n_mask_voxels": int(mask.bool_mask().sum()),
            "fiber_kernel_concentration": phantom.fiber_kernel_concentration(int(cfg["order"]))}
    if cfg["rescan"]:
        rs = cfg["rescan_seed"] if cfg["rescan_seed"] is not None else cfg["seed"] + 1
        rprof = phantom.ScanProfile(snr=float(cfg["snr"]), gain=float(cfg["rescan_gain"]),
                                    direction_jitter_deg=float(cfg["rescan_jitter_deg"]), seed=int(rs))
        write_volume(phantom.make_rescan(dwi, scheme, rprof), out / "rescan.dwv")
        prov["rescan_profile"] = rprof.to_dict()
    dump_json(prov, out / "provenance.json")


def run_scheme_gen(cfg, out: Path) -> None:
    dirs = sphere.generate_scheme(int(cfg["n"]), cfg["seed"], restarts=int(cfg["restarts"]))
    scheme = GradientScheme.single_shell(dirs, float(cfg["bval"]), int(cfg["n_b0"]))
    write_gradients(scheme, out / "scheme.bval", out / "scheme.bvec")
    dump_json({"n": len(dirs), "energy": sphere.repulsion_energy(dirs.dirs),
               "min_separation_deg": dirs.min_separation_deg()}, out / "scheme_report.json")


def run_scheme_drop(cfg, out: Path) -> None:
    _need(cfg, "bvals_path", "bvecs_path")
    scheme = _scheme(cfg)
    sub, rows = trainer.drop_scheme(scheme, int(cfg["keep"]), cfg["seed"], int(cfg["order"]))
    write_gradients(sub, out / "dropped.bval", out / "dropped.bvec")
    ratio = sphere.condition_ratio(sub.dw_dirs, scheme.dw_dirs, int(cfg["order"]))
    dump_json({"keep": int(cfg["keep"]), "rows": rows, "condition_ratio": ratio},
              out / "drop_report.json")


def _maybe_drop(cfg, scheme):
    if cfg.get("keep") is None:
        return None
    return trainer.drop_scheme(scheme, int(cfg["keep"]), cfg["seed"], int(cfg["order"]))[1]


def run_sh_fit(cfg, out: Path) -> None:
    _need(cfg, "dwi", "bvals_path", "bvecs_path")
    dwi, scheme = read_volume(cfg["dwi"]), _scheme(cfg)
    rows = _maybe_drop(cfg, scheme)
    if rows is not None:
        dwi = Volume4D(dwi.data[..., rows], dwi.kind, dwi.voxel_size_mm)
        scheme = scheme.subset(rows)
    vol = csd.signal_sh_volume(dwi, scheme, int(cfg["order"]), float(cfg["regularize"]),
                               read_volume(cfg["mask"]) if cfg["mask"] else None)
    write_volume(vol, out / "sh_signal.dwv")


def run_csd_fit(cfg, out: Path) -> None:
    _need(cfg, "dwi", "bvals_path", "bvecs_path", "mask")
    dwi, scheme, mask = read_volume(cfg["dwi"]), _scheme(cfg), read_volume(cfg["mask"])
    params = _csd_params({k: cfg[k] for k in _CSD_KEYS})
    rf = csd.estimate_response(dwi, scheme, mask, order=params.order)
    fod, qc = csd.fit_volume(dwi, scheme, mask, rf, params, cfg["threads"])
    write_volume(fod, out / "fodf.dwv")
    dump_json(qc, out / "qc.json")
    dump_json({"zonal": rf.zonal, "rotational_harmonics": rf.rotational_harmonics()},
              out / "response.json")


def _load_subject(entry: dict, i: int, csd_params: csd.CsdParams, threads: int) -> trainer.Subject:
    for key in ("dwi", "bvals_path", "bvecs_path", "mask"):
        if not entry.get(key):
            raise UsageError(f"subject {i} needs {key!r}")
    unknown = sorted(set(entry) - {"name", "dwi", "bvals_path", "bvecs_path", "mask", "labels"})
    if unknown:
        raise UsageError(f"unknown subject keys: {unknown}")
    dwi = read_volume(entry["dwi"])
    scheme = read_gradients(entry["bvals_path"], entry["bvecs_path"])
    mask = read_volume(entry["mask"])
    if entry.get("labels"):
        labels = read_volume(entry["labels"])
    else:
        rf = csd.estimate_response(dwi, scheme, mask, order=csd_params.order)
        labels = csd.fit_volume(dwi, scheme, mask, rf, csd_params, threads)[0]
    sig = trainer.signal_sh(dwi, scheme, csd_params.order)
    return trainer.Subject(entry.get("name", f"subject{i}"), sig, labels, mask, dwi, scheme)


def _load_pair(entry: dict, i: int, order: int) -> trainer.PairedSubject:
    for key in ("scan", "rescan", "bvals_path", "bvecs_path", "mask"):
        if not entry.get(key):
            raise UsageError(f"pair {i} needs {key!r}")
    unknown = sorted(set(entry) - {"name", "scan", "rescan", "bvals_path", "bvecs_path", "mask"})
    if unknown:
        raise UsageError(f"unknown pair keys: {unknown}")
    scheme = read_gradients(entry["bvals_path"], entry["bvecs_path"])
    return trainer.PairedSubject(entry.get("name", f"pair{i}"),
                                 trainer.signal_sh(read_volume(entry["scan"]), scheme, order),
                                 trainer.signal_sh(read_volume(entry["rescan"]), scheme, order),
                                 read_volume(entry["mask"]))


def run_train(cfg, out: Path) -> None:
    if not cfg["subjects"]:
        raise UsageError("train needs at least one entry in 'subjects'")
    params = _csd_params(cfg["csd"])
    subjects = [_load_subject(e, i, params, cfg["threads"]) for i, e in enumerate(cfg["subjects"])]
    pairs = [_load_pair(e, i, params.order) for i, e in enumerate(cfg["pairs"])]
    train_sets, val_sets = [], []
    for s in subjects:
        tr, va = trainer.split_region(s.mask, float(cfg["validation_fraction"]),
                                      int(cfg["validation_axis"]))
        train_sets.append(s.with_mask(tr))
        val_sets.append(s.with_mask(va))
    tkeys = set(trainer.TrainConfig().to_dict())
    tcfg = trainer.TrainConfig.from_dict({k: v for k, v in cfg.items() if k in tkeys and k != "seed"}
                                         | {"seed": cfg["seed"]})
    result = trainer.train(tcfg, trainer.Datasets(train_sets, val_sets, pairs),
                           progress=lambda r: log.info("epoch %d train %.5f val_loss1 %.5f val_acc %.4f",
                                                       r["epoch"], r["train_loss"], r["val_loss1"],
                                                       r["val_acc"]))
    write_model(result.params, out / "model.model")
    dump_json(result.log, out / "training_log.json")


def run_predict(cfg, out: Path) -> None:
    _need(cfg, "model", "dwi", "bvals_path", "bvecs_path", "mask")
    model = read_model(cfg["model"])
    dwi, scheme, mask = read_volume(cfg["dwi"]), _scheme(cfg), read_volume(cfg["mask"])
    rows = _maybe_drop(cfg, scheme)
    sig = trainer.signal_sh(dwi, scheme, int(cfg["order"]), rows)
    write_volume(trainer.predict(model, sig, mask), out / "fodf.dwv")


def run_evaluate(cfg, out: Path) -> None:
    _need(cfg, "a", "b", "mask")
    a, b, mask = read_volume(cfg["a"]), read_volume(cfg["b"]), read_volume(cfg["mask"])
    panel = evaluation.md_acc_panel(a, b, mask)
    rep = evaluation.acc_map(a, b, mask, cfg["label"])
    write_volume(rep.acc_map, out / "acc_map.dwv")
    write_volume(panel["md"], out / "md_map.dwv")
    dump_json({"acc": rep.to_dict(), "md_panel": panel["summary"]}, out / "eval.json")


def run_degrade(cfg, out: Path) -> None:
    _need(cfg, "dwi", "bvals_path", "bvecs_path", "mask")
    dwi, scheme, mask = read_volume(cfg["dwi"]), _scheme(cfg), read_volume(cfg["mask"])
    est = cfg["estimator"]
    estimator = "csd" if est == "csd" else read_model(est)
    reference = read_volume(cfg["reference"]) if cfg["reference"] else None
    curve = evaluation.degradation_experiment(
        dwi, scheme, mask, estimator, cfg["counts"], int(cfg["repeats"]), cfg["seed"],
        reference, _csd_params(cfg["csd"]), cfg["threads"])
    dump_json(curve.to_dict(), out / "degradation.json")


def _read_values(path, mask_path):
    p = str(path)
    if p.endswith((".dwv", ".dwv.json", ".dwv.raw")):
        vol = read_volume(p)
        m = read_volume(mask_path).bool_mask() if mask_path else np.ones(vol.spatial, bool)
        return vol.data[m].reshape(int(m.sum()), -1)[:, 0].astype(np.float64)
    try:
        return np.asarray(json.loads(Path(p).read_text()), dtype=np.float64).ravel()
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot read values from {p}: {exc}") from exc


def run_wilcoxon(cfg, out: Path) -> None:
    _need(cfg, "x", "y")
    x, y = _read_values(cfg["x"], cfg["mask"]), _read_values(cfg["y"], cfg["mask"])
    stat, p = evaluation.wilcoxon_signed_rank(x, y, int(cfg["exact_max_n"]))
    d = x - y
    dump_json({"statistic": stat, "p_value": p, "n_pairs": int(x.size),
               "n_nonzero": int(np.count_nonzero(d)), "mean_difference": float(d.mean())},
              out / "wilcoxon.json")


def run_connectome_metrics(cfg, out: Path) -> None:
    _need(cfg, "matrix")
    g = connectome.load_connectome(cfg["matrix"])
    dump_json(connectome.connectome_metrics(g, float(cfg["gamma"]), cfg["seed"]),
              out / "metrics.json")


COMMANDS = {
    "phantom-gen": run_phantom_gen,
    "scheme-gen": run_scheme_gen,
    "scheme-drop": run_scheme_drop,
    "sh-fit": run_sh_fit,
    "csd-fit": run_csd_fit,
    "train": run_train,
    "predict": run_predict,
    "evaluate": run_evaluate,
    "degrade": run_degrade,
    "wilcoxon": run_wilcoxon,
    "connectome-metrics": run_connectome_metrics,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fodf-kit", description="fODF estimation pipeline on synthetic phantoms")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name in COMMANDS:
        sp = subs.add_parser(name, help=f"run {name}")
        sp.add_argument("--config", help="JSON config (a resolved_config.json works too)")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--threads", type=int, help=f"worker cap (fallback: ${THREADS_ENV})")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (VALUE parsed as JSON when possible)")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            raise UsageError("no subcommand given")
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("no subcommand given")
        cfg = resolve_config(args.command, args)
        out = ensure_dir(args.out)
        dump_json(cfg, out / "resolved_config.json")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergenceWarning)
            COMMANDS[args.command](cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fodf-kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FodfKitError, OSError, ValueError, KeyError) as exc:
        print(f"fodf-kit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
