"""Command-line front end: ``hmmvi solve|diag|bench|mesh``.

Settings come from built-in defaults, then an optional JSON file given by
``--config``, then explicit flags. Exit codes: 0 success, 1 solver failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from hmmvi.bench import (
    EmptyActiveSet,
    dam_head,
    binding_obstacle_problem,
    bulkley_problem,
    run_dam_benchmark,
    run_refinement_study,
    streamline_seeds,
    study_csv,
)
from hmmvi.diagnostics import SolverDivergence
from hmmvi.gdm import HmmDiscretisation
from hmmvi.generators import from_spec, is_generator_spec
from hmmvi.io import IOFailure, ParseError, RunArtifact, mesh_hash, provenance, read_mesh, write_mesh, write_vtk
from hmmvi.mesh import MeshError, PolytopalMesh, regularity_report
from hmmvi.operators import HeavisideParams, p_laplacian, seepage_operator
from hmmvi.solvers import MODELS, OBSTACLE, SIGNORINI, SolverError, SolverOptions, VIProblem, solve, solve_bulkley, solve_obstacle

log = logging.getLogger("hmmvi")

OUTPUT_ENV = "HMMVI_OUTPUT_DIR"
DEFAULT_OUTPUT = "hmmvi-out"

# Every configurable setting and its default. Config-file keys use these names.
DEFAULTS = {
    "mesh": "dam-hex:441",
    "meshes": None,
    "model": SIGNORINI,
    "operator": "seepage",
    "epsilon": 1e-3,
    "lambda": 1e-3,
    "p": 2.0,
    "coefficient_rule": "cell",
    "source": None,  # 0 for signorini, 1 otherwise
    "dirichlet": None,  # dam head profile for signorini, 0 otherwise
    "barrier": None,  # face ordinate for signorini; required for obstacle
    "yield_coefficient": 1.0,
    "delta": 1e-2,
    "relax_factor": 0.5,
    "max_outer": 50,
    "warm_start": True,
    "family": "diagnostics",
    "out": None,
    "jobs": 1,
}
BENCH_TARGETS = ("dam", "study", "obstacle", "bulkley")


class ConfigError(ValueError):
    pass


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _add_common(p: argparse.ArgumentParser, many_meshes: bool = False) -> None:
    g = p.add_argument_group("mesh")
    if many_meshes:
        g.add_argument("--mesh", dest="meshes", action="append", default=None,
                       help="mesh file or generator spec; repeat for a sequence")
    else:
        g.add_argument("--mesh", default=None, help="mesh file or generator spec (default dam-hex:441)")
        g.add_argument("--generator", dest="mesh", default=None, help="alias of --mesh for generator specs")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    p.add_argument("--config", dest="config", default=argparse.SUPPRESS, help="JSON file of settings")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def _add_solver(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--delta", type=float, default=None, help="outer stopping tolerance (default 1e-2)")
    g.add_argument("--relax-factor", type=float, default=None, help="relaxation factor in (0, 1] (default 0.5)")
    g.add_argument("--max-outer", type=int, default=None, help="outer iteration cap (default 50)")
    g.add_argument("--warm-start", type=_on_off, default=None, metavar="on|off",
                   help="reuse the previous active set (default on)")


def _add_operator(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("operator")
    g.add_argument("--operator", choices=("seepage", "p-laplacian"), default=None)
    g.add_argument("--epsilon", type=float, default=None, help="heaviside floor (default 1e-3)")
    g.add_argument("--lambda", dest="lambda", type=float, default=None, help="heaviside ramp width (default 1e-3)")
    g.add_argument("--p", type=float, default=None, help="p-Laplacian exponent (default 2)")
    g.add_argument("--coefficient-rule", choices=("cell", "exact"), default=None,
                   help="seepage coefficient at the cell point or integrated exactly (default cell)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmmvi", description="HMM schemes for elliptic variational inequalities.")
    parser.add_argument("--config", default=None, help="JSON file of settings; flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("solve", help="solve one variational inequality")
    _add_common(sp)
    sp.add_argument("--model", choices=MODELS, default=None)
    _add_operator(sp)
    _add_solver(sp)
    sp.add_argument("--source", type=float, default=None)
    sp.add_argument("--dirichlet", type=float, default=None)
    sp.add_argument("--barrier", type=float, default=None)
    sp.add_argument("--yield", dest="yield_coefficient", type=float, default=None)

    dp = sub.add_parser("diag", help="discretisation diagnostics over a mesh sequence")
    _add_common(dp, many_meshes=True)
    dp.add_argument("--jobs", type=int, default=None)

    bp = sub.add_parser("bench", help="benchmarks and refinement studies")
    bp.add_argument("target", choices=BENCH_TARGETS)
    _add_common(bp, many_meshes=True)
    _add_operator(bp)
    _add_solver(bp)
    bp.add_argument("--family", choices=("diagnostics", "dam"), default=None, help="study family (bench study)")
    bp.add_argument("--jobs", type=int, default=None)

    mp = sub.add_parser("mesh", help="generate, inspect and export a mesh")
    _add_common(mp)
    return parser


# ---- configuration --------------------------------------------------------------------


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    doc = {k.replace("-", "_"): v for k, v in doc.items()}
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; known keys are {sorted(DEFAULTS)}")
    if isinstance(doc.get("warm_start"), str):
        doc["warm_start"] = _on_off(doc["warm_start"])
    return doc


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(_load_config(getattr(args, "config", None)))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg["meshes"] is None:
        cfg["meshes"] = [cfg["mesh"]]
    if cfg["out"] is None:
        cfg["out"] = os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    if cfg["model"] not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {cfg['model']!r}")
    if cfg["operator"] not in ("seepage", "p-laplacian"):
        raise ConfigError(f"operator must be 'seepage' or 'p-laplacian', got {cfg['operator']!r}")
    for key in ("epsilon", "lambda", "delta"):
        if not (isinstance(cfg[key], (int, float)) and cfg[key] > 0):
            raise ConfigError(f"{key} must be a positive number")
    if cfg["epsilon"] > 1:
        raise ConfigError("epsilon must not exceed 1")
    if not 0 < cfg["relax_factor"] <= 1:
        raise ConfigError("relax-factor must lie in (0, 1]")
    if int(cfg["max_outer"]) < 1:
        raise ConfigError("max-outer must be at least 1")
    if not cfg["p"] > 1:
        raise ConfigError("p must be greater than 1")
    if int(cfg["jobs"]) < 1:
        raise ConfigError("jobs must be at least 1")
    if cfg["operator"] == "seepage" and cfg["p"] != 2.0:
        raise ConfigError("the seepage operator is linear in the gradient; use --p only with p-laplacian")
    if cfg["model"] == OBSTACLE and cfg["barrier"] is None:
        raise ConfigError("the obstacle model needs --barrier")
    if cfg["model"] == "bulkley" and cfg["yield_coefficient"] < 0:
        raise ConfigError("the yield coefficient must be non-negative")


def _options(cfg: dict) -> SolverOptions:
    return SolverOptions(delta=float(cfg["delta"]), max_outer=int(cfg["max_outer"]),
                         relax_factor=float(cfg["relax_factor"]), warm_start=bool(cfg["warm_start"]))


def _heaviside(cfg: dict) -> HeavisideParams:
    try:
        return HeavisideParams(float(cfg["epsilon"]), float(cfg["lambda"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_mesh(source: str) -> PolytopalMesh:
    """A mesh from a generator spec or a mesh file."""
    if is_generator_spec(source) and not os.path.exists(source):
        try:
            return from_spec(source)
        except (ValueError, MeshError) as exc:
            raise ConfigError(str(exc)) from None
    if not os.path.exists(source):
        raise ConfigError(f"mesh {source!r} is neither a file nor a generator spec")
    try:
        return read_mesh(source)
    except (ParseError, IOFailure) as exc:
        raise ConfigError(str(exc)) from None


# ---- outputs --------------------------------------------------------------------------


def _outdir(cfg: dict) -> Path:
    path = Path(cfg["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _clean(doc):
    """Replace non-finite floats by strings so JSON stays strict."""
    if isinstance(doc, dict):
        return {k: _clean(v) for k, v in doc.items()}
    if isinstance(doc, (list, tuple)):
        return [_clean(v) for v in doc]
    if isinstance(doc, float) and not math.isfinite(doc):
        return repr(doc)
    return doc


def _artifact(out: Path, cfg: dict, command: str, mesh: PolytopalMesh, solution=None, report=None) -> None:
    echo = dict(cfg, command=command)
    art = RunArtifact.create(_clean(echo), mesh, solution, _clean(report or {}))
    art.write(out / "run.json")


def _study_artifact(out: Path, cfg: dict, command: str, rows) -> None:
    hashes = {}
    for item in cfg["meshes"]:
        try:
            hashes[item] = mesh_hash(load_mesh(item))
        except ConfigError:
            hashes[item] = None
    digest = hashlib.sha256(json.dumps(hashes, sort_keys=True).encode()).hexdigest()
    report = {"rows": [dict(zip(r.__dataclass_fields__, r.values())) for r in rows], "mesh_hashes": hashes}
    echo = dict(cfg, command=command)
    RunArtifact(_clean(echo), digest, None, _clean(report), provenance()).write(out / "run.json")


# ---- commands -------------------------------------------------------------------------


def _problem(cfg: dict, mesh: PolytopalMesh) -> VIProblem:
    model = cfg["model"]
    if cfg["operator"] == "seepage":
        op = seepage_operator(_heaviside(cfg), coefficient_rule=cfg["coefficient_rule"])
        p = 2.0
    else:
        p = float(cfg["p"])
        op = p_laplacian(p)
    disc = HmmDiscretisation(mesh, p=p)
    source = cfg["source"] if cfg["source"] is not None else (0.0 if model == SIGNORINI else 1.0)
    if cfg["dirichlet"] is not None:
        dirichlet = float(cfg["dirichlet"])
    else:
        dirichlet = dam_head if model == SIGNORINI else 0.0
    try:
        return VIProblem(disc, op, model, source=source, dirichlet=dirichlet, barrier=cfg["barrier"],
                         yield_coefficient=float(cfg["yield_coefficient"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_solve(cfg: dict) -> int:
    mesh = load_mesh(cfg["mesh"])
    problem = _problem(cfg, mesh)
    report = solve(problem, _options(cfg))
    out = _outdir(cfg)
    summary = report.summary()
    _write_json(out / "report.json", _clean(summary))
    write_vtk(mesh, {"u": report.solution.cell_values}, out / "solution.vtk")
    _artifact(out, cfg, "solve", mesh, report.solution, summary)
    print(f"{report.model} solved by {report.algorithm}: {report.outer_iterations} outer iterations, "
          f"inner {summary['inner_iterations']}, {report.wall_time:.2f} s")
    for k, v in summary["kkt"].items():
        print(f"  {k:24s} {v: .3e}")
    print(f"outputs written to {out}")
    return 0


def cmd_diag(cfg: dict) -> int:
    for item in cfg["meshes"]:
        load_mesh(item)  # config errors before any work
    rows = run_refinement_study(cfg["meshes"], "diagnostics", jobs=int(cfg["jobs"]), coercivity=True)
    out = _outdir(cfg)
    text = study_csv(rows)
    (out / "diagnostics.csv").write_text(text, encoding="utf-8")
    _study_artifact(out, cfg, "diag", rows)
    sys.stdout.write(text)
    return 1 if any(r.failed for r in rows) else 0


def _bench_dam(cfg: dict, out: Path) -> int:
    mesh = load_mesh(cfg["meshes"][0])
    res = run_dam_benchmark(mesh, _options(cfg), _heaviside(cfg), cfg["coefficient_rule"])
    summary = res.summary()
    _write_json(out / "seepage.json", _clean(summary))
    ys = mesh.face_centres[res.constrained_faces, 1]
    with open(out / "gamma3_faces.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["face", "x", "y", "state"])
        for f, y, a in zip(res.constrained_faces, ys, res.at_barrier):
            w.writerow([int(f), repr(float(mesh.face_centres[f, 0])), repr(float(y)), "at-barrier" if a else "zero-flux"])
    disc_centroids = HmmDiscretisation(mesh).diamond_centroids
    with open(out / "velocity.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "vx", "vy"])
        for (x, y), (vx, vy) in zip(disc_centroids, res.velocity):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(vx)), repr(float(vy))])
    np.savetxt(out / "streamline_seeds.csv", streamline_seeds(mesh), delimiter=",", header="x,y", comments="")
    u = res.report.solution
    write_vtk(mesh, {"u": u.cell_values, "velocity": res.cell_velocity}, out / "seepage.vtk")
    _artifact(out, cfg, "bench dam", mesh, u, summary)
    lo, hi = res.interval
    print(f"dam benchmark on {mesh.n_cells} cells ({len(res.constrained_faces)} constrained faces)")
    print(f"  seepage point in [{lo:.4f}, {hi:.4f}]")
    print(f"  outer iterations {res.report.outer_iterations}, inner {summary['inner_iterations']}, "
          f"relaxations {len(res.report.relaxation_events)}, {res.report.wall_time:.2f} s")
    print(f"outputs written to {out}")
    return 0


def cmd_bench(cfg: dict, target: str) -> int:
    out = _outdir(cfg)
    if target == "dam":
        return _bench_dam(cfg, out)
    if target == "study":
        for item in cfg["meshes"]:
            load_mesh(item)
        rows = run_refinement_study(cfg["meshes"], cfg["family"], _options(cfg), jobs=int(cfg["jobs"]))
        text = study_csv(rows)
        (out / "study.csv").write_text(text, encoding="utf-8")
        _study_artifact(out, cfg, "bench study", rows)
        sys.stdout.write(text)
        return 1 if any(r.failed for r in rows) else 0
    if target == "obstacle":
        problem = binding_obstacle_problem()
        rep = solve_obstacle(problem, _options(cfg))
    else:
        problem = bulkley_problem()
        rep = solve_bulkley(problem, _options(cfg))
    summary = rep.summary()
    _write_json(out / f"{target}.json", _clean(summary))
    _artifact(out, cfg, f"bench {target}", problem.mesh, rep.solution, summary)
    print(f"{target} demo: {rep.outer_iterations} outer iterations, kkt "
          + ", ".join(f"{k}={v:.2e}" for k, v in summary["kkt"].items()))
    return 0


def cmd_mesh(cfg: dict) -> int:
    mesh = load_mesh(cfg["mesh"])
    out = _outdir(cfg)
    write_mesh(mesh, out / "mesh.json")
    write_vtk(mesh, {}, out / "mesh.vtk")
    reg = regularity_report(mesh)
    _artifact(out, cfg, "mesh", mesh, None, {"regularity": dataclasses.asdict(reg)})
    counts = {t.value: int(len(mesh.faces_with_tag(t))) for t in set(mesh.face_tags)}
    print(f"{mesh.n_cells} cells, {mesh.n_faces} faces, h = {reg.h_mesh:.4f}, theta = {reg.theta:.3f}")
    print("  faces by tag: " + ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    print(f"outputs written to {out}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0, usage errors 2
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "diag":
            return cmd_diag(cfg)
        if args.command == "bench":
            return cmd_bench(cfg, args.target)
        return cmd_mesh(cfg)
    except (ConfigError, argparse.ArgumentTypeError) as exc:
        print(f"hmmvi: configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, SolverDivergence, EmptyActiveSet, ArithmeticError) as exc:
        print(f"hmmvi: solver failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (IOFailure, OSError) as exc:
        print(f"hmmvi: output failure: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # never a traceback for the user
        log.debug("unexpected failure", exc_info=True)
        print(f"hmmvi: unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
