"""Command-line front end: ``jumpsde {check,simulate,convergence,table} CONFIG``.

The config is strict JSON.  Flags override config fields, and ``--seed`` is
mandatory for ``simulate`` and ``convergence``.  Every artifact starts with
``# jumpsde v<version> seed=<seed> config_sha256=<hash>`` followed by the
resolved config, so a run can be reproduced from its outputs.

Stored path states take ``paths * (T/h) * d * 8`` bytes in memory (plus jump
records); the convergence reference keeps only the finest level's grid.

Exit codes: 0 success, 1 assumption or certification failure, 2 config
error, 3 numerical failure.
"""

import argparse
import copy
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import check_assumptions, convergence_study
from .errors import (CertificationError, ConfigError, InverseDidNotConverge,
                     JumpSDEError, NonParallelityError, NumericalBlowUp)
from .geometry import surface_to_spec
from .presets import PRESET_NAMES, build_model, resolve_params
from .solver import SCHEMES, SchemeConfig, resolve_workers, simulate_paths
from .transform import build_transform, default_window

EXIT_OK, EXIT_ASSUMPTION, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("check", "simulate", "convergence", "table")
DUMP_MODES = ("concatenated", "per_path", "none")
TOP_KEYS = {"model", "surface", "T", "transform", "scheme", "h", "levels", "h_ref",
            "paths", "seed", "output", "workers", "window", "check", "table", "dump"}
SECTION_KEYS = {
    "model": {"preset", "params"},
    "transform": {"c", "epsilon0", "kappa_max"},
    "window": {"lower", "upper"},
    "check": {"samples", "c0"},
    "table": {"lower", "upper", "num"},
}
# fields that do not change results and stay out of the config hash
UNHASHED = ("output", "workers")


# -- config -----------------------------------------------------------------------

def _number(value, path, positive=True, integer=False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if integer:
        ok = ok and float(value).is_integer()
    if not ok or not np.isfinite(value):
        raise ConfigError(path, "must be an integer" if integer else "must be a number")
    if positive and not value > 0:
        raise ConfigError(path, f"{path.rsplit('.', 1)[-1]} must be positive")
    return int(value) if integer else float(value)


def _vector(value, path, dim):
    if not isinstance(value, list) or len(value) != dim:
        raise ConfigError(path, f"must be a list of {dim} numbers")
    return [_number(v, f"{path}[{i}]", positive=False) for i, v in enumerate(value)]


def _section(doc, key):
    sec = doc.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(key, "must be an object")
    unknown = set(sec) - SECTION_KEYS[key]
    if unknown:
        raise ConfigError(f"{key}.{sorted(unknown)[0]}", "unknown key")
    return sec


def parse_config(text):
    """Validate a JSON config and fill in defaults; raises :class:`ConfigError`."""
    try:
        doc = json.loads(text)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    unknown = set(doc) - TOP_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown key")

    model = _section(doc, "model")
    preset = model.get("preset")
    if not isinstance(preset, str):
        raise ConfigError("model.preset", "missing preset name")
    if preset not in PRESET_NAMES:
        raise ConfigError("model.preset", f"unknown preset {preset!r}")
    params = model.get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("model.params", "must be an object")
    try:
        resolved = resolve_params(preset, params)
    except KeyError as exc:
        raise ConfigError("model.params", exc.args[0]) from None
    dim = int(resolved["dim"])

    cfg = {"model": {"preset": preset, "params": copy.deepcopy(params)}}
    cfg["surface"] = doc.get("surface")
    if cfg["surface"] is not None and not isinstance(cfg["surface"], dict):
        raise ConfigError("surface", "must be an object")
    T = _number(doc.get("T", resolved["T"]), "T")
    cfg["T"] = T
    try:
        model_obj = build_model(preset, params, cfg["surface"], T)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError("model", str(exc.args[0] if exc.args else exc)) from None

    tsec = _section(doc, "transform")
    c = tsec.get("c", "auto")
    if c != "auto":
        c = _number(c, "transform.c")
    eps0 = _number(tsec.get("epsilon0", resolved["epsilon0"]), "transform.epsilon0")
    kmax = _number(tsec.get("kappa_max", 0.5), "transform.kappa_max")
    if not kmax < 1:
        raise ConfigError("transform.kappa_max", "kappa_max must lie in (0, 1)")
    if c != "auto" and c > eps0:
        raise ConfigError("transform.c", "c must not exceed epsilon0")
    cfg["transform"] = {"c": c, "epsilon0": eps0, "kappa_max": kmax}

    scheme = doc.get("scheme", "transformed_em")
    if scheme not in SCHEMES:
        raise ConfigError("scheme", f"unknown scheme {scheme!r}")
    cfg["scheme"] = scheme
    h = _number(doc.get("h", T / 1024), "h")
    if h > T:
        raise ConfigError("h", "h must not exceed T")
    cfg["h"] = h
    levels = doc.get("levels", [T * 2.0 ** -k for k in range(5, 10)])
    if not isinstance(levels, list) or len(levels) < 3:
        raise ConfigError("levels", "need a list of at least 3 step sizes")
    cfg["levels"] = [_number(v, f"levels[{i}]") for i, v in enumerate(levels)]
    cfg["h_ref"] = _number(doc.get("h_ref", T * 2.0 ** -14), "h_ref")
    cfg["paths"] = _number(doc.get("paths", 1000), "paths", integer=True)
    seed = doc.get("seed", 0)
    cfg["seed"] = _seed(seed, "seed")
    out = doc.get("output", "out")
    if not isinstance(out, str) or not out:
        raise ConfigError("output", "must be a directory name")
    cfg["output"] = out
    workers = doc.get("workers")
    cfg["workers"] = None if workers is None else _number(workers, "workers", integer=True)

    wsec = _section(doc, "window")
    lo, hi = default_window(model_obj)
    lo = _vector(wsec["lower"], "window.lower", dim) if "lower" in wsec else lo.tolist()
    hi = _vector(wsec["upper"], "window.upper", dim) if "upper" in wsec else hi.tolist()
    if not all(a < b for a, b in zip(lo, hi)):
        raise ConfigError("window", "lower must be below upper in every coordinate")
    cfg["window"] = {"lower": lo, "upper": hi}

    csec = _section(doc, "check")
    cfg["check"] = {
        "samples": _number(csec.get("samples", 4000), "check.samples", integer=True),
        "c0": _number(csec.get("c0", 1e-6), "check.c0"),
    }
    tab = _section(doc, "table")
    tlo = _number(tab.get("lower", -2.0 * eps0), "table.lower", positive=False)
    thi = _number(tab.get("upper", 2.0 * eps0), "table.upper", positive=False)
    if not tlo < thi:
        raise ConfigError("table", "lower must be below upper")
    num = _number(tab.get("num", 401), "table.num", integer=True)
    cfg["table"] = {"lower": tlo, "upper": thi, "num": num}
    dump = doc.get("dump", "concatenated")
    if dump not in DUMP_MODES:
        raise ConfigError("dump", f"must be one of {', '.join(DUMP_MODES)}")
    cfg["dump"] = dump
    return cfg


def _seed(value, path):
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2 ** 64:
        raise ConfigError(path, "seed must be an unsigned 64-bit integer")
    return value


def config_hash(cfg):
    body = {k: v for k, v in cfg.items() if k not in UNHASHED}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def header_lines(cfg):
    body = {k: v for k, v in cfg.items() if k not in UNHASHED}
    return [f"# jumpsde v{__version__} seed={cfg['seed']} config_sha256={config_hash(cfg)}",
            "# config " + json.dumps(body, sort_keys=True, separators=(",", ":"))]


# -- output helpers ---------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def _write_text(path, lines):
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _write_json(path, cfg, payload):
    head = header_lines(cfg)
    doc = {"header": head[0][2:], "config": json.loads(head[1][len("# config "):]), **payload}
    with open(path, "w", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _path_rows(path, d, path_id=None):
    prefix = "" if path_id is None else f"{path_id},"
    rows = []
    for t, x, xp, j in zip(path.t, path.x, path.x_pre, path.is_jump):
        if j:
            # the left limit at a jump time precedes the post-jump row
            rows.append(prefix + ",".join([_fmt(t)] + [_fmt(v) for v in xp] + ["0"]))
        rows.append(prefix + ",".join([_fmt(t)] + [_fmt(v) for v in x] + [str(int(j))]))
    return rows


# -- commands --------------------------------------------------------------------------

def _model(cfg):
    return build_model(cfg["model"]["preset"], cfg["model"]["params"], cfg["surface"], cfg["T"])


def _window(cfg):
    return (np.array(cfg["window"]["lower"]), np.array(cfg["window"]["upper"]))


def _transform(cfg, model):
    t = cfg["transform"]
    return build_transform(model, t["epsilon0"], t["c"], t["kappa_max"], _window(cfg),
                           seed=cfg["seed"])


def cmd_check(cfg, out):
    model = _model(cfg)
    t = cfg["transform"]
    report = check_assumptions(model, None, _window(cfg), cfg["check"]["samples"],
                               cfg["seed"], cfg["check"]["c0"], t["epsilon0"], t["kappa_max"],
                               t["c"])
    _write_json(os.path.join(out, "check_report.json"), cfg, {"report": report.to_dict()})
    _write_text(os.path.join(out, "check_report.txt"),
                header_lines(cfg) + report.to_text().rstrip("\n").split("\n"))
    print(report.to_text(), end="")
    return EXIT_OK if report.passed else EXIT_ASSUMPTION


def cmd_simulate(cfg, out, workers):
    model = _model(cfg)
    transform = _transform(cfg, model) if cfg["scheme"] == "transformed_em" else None
    sc = SchemeConfig(cfg["h"], cfg["scheme"])
    batch = simulate_paths(model, sc, cfg["seed"], cfg["paths"], transform, workers=workers)
    d = model.dim
    head = header_lines(cfg)
    cols = ",".join(["t"] + [f"x{i + 1}" for i in range(d)] + ["is_jump"])
    if cfg["dump"] == "concatenated":
        rows = []
        for m in range(len(batch)):
            rows.extend(_path_rows(batch.path(m), d, int(batch.path_index[m])))
        _write_text(os.path.join(out, "paths.csv"), head + ["path_id," + cols] + rows)
    elif cfg["dump"] == "per_path":
        pdir = os.path.join(out, "paths")
        os.makedirs(pdir, exist_ok=True)
        for m in range(len(batch)):
            idx = int(batch.path_index[m])
            _write_text(os.path.join(pdir, f"path_{idx:06d}.csv"),
                        head + [cols] + _path_rows(batch.path(m), d))
    term = batch.terminal
    counts = batch.jump_counts
    summary = {
        "paths": len(batch),
        "scheme": cfg["scheme"],
        "steps": sc.n_steps(model.T),
        "c": None if transform is None else transform.c,
        "kappa": None if transform is None else transform.kappa,
        "terminal_mean": [float(v) for v in term.mean(axis=0)],
        "terminal_cov": np.atleast_2d(np.cov(term, rowvar=False)).tolist(),
        "jump_count_mean": float(counts.mean()),
        "jump_count_total": int(counts.sum()),
    }
    _write_json(os.path.join(out, "summary.json"), cfg, {"summary": summary})
    print(f"simulated {len(batch)} paths, terminal mean {summary['terminal_mean']}")
    return EXIT_OK


def cmd_convergence(cfg, out, workers):
    model = _model(cfg)
    transform = _transform(cfg, model)
    try:
        report = convergence_study(model, transform, cfg["scheme"], cfg["levels"],
                                   cfg["paths"], cfg["seed"], cfg["h_ref"], workers)
    except ValueError as exc:
        raise ConfigError("levels", str(exc)) from None
    rows = ["h,error,ci_lo,ci_hi"]
    for lv in report.levels:
        rows.append(",".join(_fmt(v) for v in (lv.h, lv.error, lv.ci_lo, lv.ci_hi)))
    order = report.order
    rows.append(f"# slope={order if order == 'exact' else _fmt(order)} "
                f"intercept={_fmt(report.intercept)} paths={report.paths} "
                f"h_ref={_fmt(report.h_ref)} c={_fmt(transform.c)}")
    for lv in report.levels:
        if lv.excluded:
            rows.append(f"# excluded h={_fmt(lv.h)}: {lv.note}")
    _write_text(os.path.join(out, "convergence.csv"), header_lines(cfg) + rows)
    print(f"empirical order: {order}")
    return EXIT_OK


def cmd_table(cfg, out):
    model = _model(cfg)
    transform = _transform(cfg, model)
    tab = cfg["table"]
    s = np.linspace(tab["lower"], tab["upper"], tab["num"])
    surface = model.surface
    foot = surface.closest_point(model.x0[None])[0][0]
    nrm = surface.normal_at(foot[None])[0]
    x = foot + s[:, None] * nrm
    G = transform.G(x)
    det = np.linalg.det(transform.G_jacobian(x))
    phi = transform.phi(x)
    d = model.dim
    rows = [",".join([f"x{i + 1}" for i in range(d)] + [f"G{i + 1}" for i in range(d)]
                     + ["det_jacobian", "phi"])]
    for k in range(len(s)):
        rows.append(",".join([_fmt(v) for v in x[k]] + [_fmt(v) for v in G[k]]
                             + [_fmt(det[k]), _fmt(phi[k])]))
    rows.append(f"# c={_fmt(transform.c)} kappa={_fmt(transform.kappa)} "
                f"surface={json.dumps(surface_to_spec(surface), separators=(',', ':'))}")
    _write_text(os.path.join(out, "transform_table.csv"), header_lines(cfg) + rows)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(
        prog="jumpsde",
        description="Simulate and verify jump-diffusion SDEs with discontinuous drift.",
        epilog="Memory for stored paths is about paths * (T/h) * d * 8 bytes.")
    ap.add_argument("--version", action="version", version=f"jumpsde {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="JSON run configuration")
        p.add_argument("--seed", type=int, required=name in ("simulate", "convergence"),
                       help="master seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory (overrides 'output')")
        p.add_argument("--workers", type=int,
                       help="worker processes (default: JUMPSDE_WORKERS or CPU count)")
        if name in ("simulate", "convergence"):
            p.add_argument("--paths", type=int, help="number of paths")
            p.add_argument("--scheme", choices=SCHEMES)
        if name == "simulate":
            p.add_argument("--h", type=float, help="base step size")
    return ap


def load_config(args):
    try:
        with open(args.config, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {args.config}: {exc.strerror}") from None
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("", "config must be a JSON object")
    for key, flag in (("seed", "seed"), ("paths", "paths"), ("h", "h"),
                      ("scheme", "scheme"), ("output", "out"), ("workers", "workers")):
        value = getattr(args, flag, None)
        if value is not None:
            doc[key] = value
    return parse_config(json.dumps(doc))


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        out = cfg["output"]
        os.makedirs(out, exist_ok=True)
        workers = resolve_workers(cfg["workers"])
        if args.command == "check":
            return cmd_check(cfg, out)
        if args.command == "simulate":
            return cmd_simulate(cfg, out, workers)
        if args.command == "convergence":
            return cmd_convergence(cfg, out, workers)
        return cmd_table(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalBlowUp as exc:
        print(f"numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CertificationError, InverseDidNotConverge, NonParallelityError) as exc:
        print(f"certification failed: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except JumpSDEError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except ValueError as exc:
        # model-level validation (e.g. epsilon0 beyond the reach) is a config problem
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
