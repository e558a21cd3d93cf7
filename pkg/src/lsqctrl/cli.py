"""Batch front end: config parsing, solver dispatch, trace/field output.

Config files are line-based ``section.key = value`` text ('#' starts a
comment); every key can also be given on the command line as
``--section.key=value``, which overrides the file.  Runs write
``trace.csv`` (one row per iteration, schema fixed per run family),
``summary.json`` and, depending on ``io.dump_every``, legacy-VTK and
raw-binary field dumps into ``io.out_dir``.

Exit codes: 0 solved/stopped by a convergence criterion, 2 bad
configuration (the offending key is named on stderr), 3 iteration
budget exhausted, 4 solver failure.
"""

import os

_threads = os.environ.get("LSQCTRL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["RunConfig", "ConfigError", "parse_config", "emit_config", "run", "main"]

SUBCOMMANDS = ("stokes-control", "stokes-direct", "steady-nse", "abstract-demo")

UNSTEADY_HEADER = "iter,E,grad_norm,step,kernel_ratio,div_norm,yT_norm,f_norm"
STEADY_HEADER = "iter,E,grad_norm,step,residual_norm,div_norm"
ABSTRACT_HEADER = "iter,E,grad_norm,step"


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes", "on"):
        return True
    if s.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_floats(s):
    return tuple(float(tok) for tok in s.split(","))


# key -> (parser, default, help)
REGISTRY = {
    "domain.Lx": (float, 1.0, "domain length in x"),
    "domain.Ly": (float, 1.0, "domain length in y"),
    "time.T": (float, 1.0, "time horizon"),
    "grid.nx": (int, 12, "interior nodes in x"),
    "grid.ny": (int, 12, "interior nodes in y"),
    "grid.nt": (int, 12, "time intervals"),
    "physics.nu": (float, 1.0, "viscosity"),
    "control.omega": (_parse_floats, (0.0, 1.0, 0.0, 1.0),
                      "support rectangle x0,x1,y0,y1[,t0,t1]"),
    "problem.y0": (str, "bump", "initial velocity: bump | zero"),
    "problem.amplitude": (float, 1.0, "data amplitude factor"),
    "problem.manufactured": (_parse_bool, False,
                             "use the built-in analytic case for data"),
    "problem.error_bound": (float, float("inf"),
                            "acceptable final L2 error for manufactured runs"),
    "solver.max_iter": (int, 200, "iteration budget"),
    "solver.tol_energy": (float, 0.0, "absolute energy target"),
    "solver.tol_energy_rel": (float, 0.0, "energy target relative to start"),
    "solver.tol_grad": (float, 0.0, "gradient target relative to start"),
    "solver.tol_kernel": (float, 0.0, "kernel-ratio stopping threshold"),
    "solver.metric": (str, "a0_exact", "increment metric: a0_exact | simplified"),
    "solver.epsilon": (float, 0.0, "quasi-incompressibility weight"),
    "solver.algorithm": (str, "steepest", "steepest | cg | split"),
    "solver.inner_max_iter": (int, 150, "split scheme: inner budget"),
    "solver.inner_tol_grad": (float, 1e-3, "split scheme: inner gradient target"),
    "io.out_dir": (str, "out", "output directory"),
    "io.dump_every": (int, 0, "field dump cadence in iterations (0: final only)"),
    "seed": (int, 0, "instance seed (abstract-demo)"),
}


@dataclass
class RunConfig:
    subcommand: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return (self.subcommand, self.values) == (other.subcommand, other.values)


def _convert(key, raw):
    if key not in REGISTRY:
        raise ConfigError(key, "unknown key")
    parser = REGISTRY[key][0]
    try:
        return parser(raw.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(key, f"bad value {raw.strip()!r} ({exc})") from None


def _validate(cfg: RunConfig):
    v = cfg.values
    for key in ("domain.Lx", "domain.Ly", "time.T", "physics.nu"):
        if v[key] <= 0:
            raise ConfigError(key, "must be positive")
    for key in ("grid.nx", "grid.ny", "grid.nt"):
        if v[key] < 2:
            raise ConfigError(key, "must be an integer >= 2")
    for key in ("solver.tol_energy", "solver.tol_energy_rel", "solver.tol_grad",
                "solver.tol_kernel", "solver.epsilon", "solver.inner_tol_grad"):
        if v[key] < 0:
            raise ConfigError(key, "must be nonnegative")
    for key in ("solver.max_iter", "solver.inner_max_iter"):
        if v[key] < 0:
            raise ConfigError(key, "must be nonnegative")
    if v["io.dump_every"] < 0:
        raise ConfigError("io.dump_every", "must be nonnegative")
    om = v["control.omega"]
    if len(om) not in (4, 6):
        raise ConfigError("control.omega", "needs 4 or 6 comma-separated numbers")
    x0, x1, y0, y1 = om[:4]
    if not (0.0 <= x0 < x1 <= v["domain.Lx"] and 0.0 <= y0 < y1 <= v["domain.Ly"]):
        raise ConfigError("control.omega", "rectangle must lie inside the domain")
    if len(om) == 6 and not (0.0 <= om[4] < om[5] <= v["time.T"]):
        raise ConfigError("control.omega", "time window must lie inside [0, T]")
    if v["solver.metric"] not in ("a0_exact", "simplified"):
        raise ConfigError("solver.metric", "must be a0_exact or simplified")
    if v["solver.algorithm"] not in ("steepest", "cg", "split"):
        raise ConfigError("solver.algorithm", "must be steepest, cg or split")
    if v["problem.y0"] not in ("bump", "zero"):
        raise ConfigError("problem.y0", "must be bump or zero")
    return cfg


def parse_config(subcommand, path=None, flags=()):
    """Build a validated RunConfig from defaults, a file, then flags."""
    if subcommand not in SUBCOMMANDS:
        raise ConfigError("subcommand", f"unknown subcommand {subcommand!r}")
    values = {key: default for key, (_, default, _) in REGISTRY.items()}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
            key, raw = body.split("=", 1)
            values[key.strip()] = _convert(key.strip(), raw)
    for flag in flags:
        if not flag.startswith("--") or "=" not in flag:
            raise ConfigError(flag, "expected --section.key=value")
        key, raw = flag[2:].split("=", 1)
        values[key] = _convert(key, raw)
    return _validate(RunConfig(subcommand, values))


def emit_config(cfg: RunConfig):
    """Canonical text form; parsing it again reproduces cfg exactly."""
    lines = [f"# lsqctrl config ({cfg.subcommand})"]
    for key in REGISTRY:
        val = cfg.values[key]
        if isinstance(val, tuple):
            val = ",".join(repr(x) for x in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        elif isinstance(val, float):
            val = repr(val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(x):
    return repr(float(x))


def _write_trace(path, header, rows):
    text = header + "\n" + "\n".join(",".join(_fmt(c) if i else str(int(c))
                                              for i, c in enumerate(row))
                                     for row in rows)
    Path(path).write_text(text + "\n")


def write_vtk_slice(path, grid, velocity=None, pressure=None, title="fields"):
    """Legacy ASCII STRUCTURED_POINTS snapshot of one time slice."""
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET STRUCTURED_POINTS",
        f"DIMENSIONS {grid.nx} {grid.ny} 1",
        f"ORIGIN {_fmt(grid.hx)} {_fmt(grid.hy)} 0.0",
        f"SPACING {_fmt(grid.hx)} {_fmt(grid.hy)} 1.0",
        f"POINT_DATA {grid.nx * grid.ny}",
    ]
    if velocity is not None:
        lines.append("VECTORS velocity double")
        vx, vy = velocity[0], velocity[1]
        for j in range(grid.ny):
            for i in range(grid.nx):
                lines.append(f"{_fmt(vx[j, i])} {_fmt(vy[j, i])} 0.0")
    if pressure is not None:
        lines.append("SCALARS pressure double 1")
        lines.append("LOOKUP_TABLE default")
        for j in range(grid.ny):
            for i in range(grid.nx):
                lines.append(_fmt(pressure[j, i]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_raw(path, array):
    """Flat little-endian float64 dump with a one-line ASCII header."""
    arr = np.ascontiguousarray(array, dtype="<f8")
    dims = ",".join(str(d) for d in arr.shape)
    with open(path, "wb") as fh:
        fh.write(f"lsqctrl-raw float64 little-endian dims={dims}\n".encode())
        fh.write(arr.tobytes())


def read_raw(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode()
        if not header.startswith("lsqctrl-raw float64 little-endian dims="):
            raise ValueError(f"not an lsqctrl raw dump: {path}")
        dims = tuple(int(d) for d in header.rsplit("=", 1)[1].strip().split(","))
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(dims)


def _dump_fields(out_dir, grid, s, tag="final"):
    fdir = Path(out_dir) / "fields"
    fdir.mkdir(parents=True, exist_ok=True)
    for k in range(grid.nt + 1):
        write_vtk_slice(
            fdir / f"{tag}_t{k:04d}.vtk", grid,
            velocity=s.y[k], pressure=s.pi[k],
            title=f"lsqctrl {tag} slice {k} t={k * grid.ht}",
        )
    write_raw(fdir / f"{tag}_y.bin", s.y)
    write_raw(fdir / f"{tag}_pi.bin", s.pi)
    write_raw(fdir / f"{tag}_f.bin", s.f)


def _dump_steady(out_dir, grid, state, tag="final"):
    fdir = Path(out_dir) / "fields"
    fdir.mkdir(parents=True, exist_ok=True)
    write_vtk_slice(fdir / f"{tag}.vtk", grid, velocity=state.y,
                    pressure=state.pi, title=f"lsqctrl {tag}")
    write_raw(fdir / f"{tag}_y.bin", state.y)
    write_raw(fdir / f"{tag}_pi.bin", state.pi)


# ---------------------------------------------------------------------------
# run implementations
# ---------------------------------------------------------------------------

def _bump_y0(grid, amplitude):
    X, Y = grid.meshgrid()
    S = np.sin(np.pi * X / grid.Lx) ** 2
    T = np.sin(np.pi * Y / grid.Ly) ** 2
    Sx = np.pi / grid.Lx * np.sin(2 * np.pi * X / grid.Lx)
    Ty = np.pi / grid.Ly * np.sin(2 * np.pi * Y / grid.Ly)
    M = 1.0 + 0.5 * X / grid.Lx - 0.3 * Y / grid.Ly
    return amplitude * np.stack(
        [S * Ty * M - 0.3 / grid.Ly * S * T, -(Sx * T * M + 0.5 / grid.Lx * S * T)]
    )


def _exit_code(reason, converged):
    if converged or reason in ("energy_tol", "grad_tol", "kernel_stall",
                               "line_search_stall"):
        return 0
    if reason == "max_iter":
        return 3
    return 4


def _unsteady_rows(report):
    n = report.iterates_count
    steps = report.steps
    ratios = report.kernel_ratios
    ex = report.extras
    rows = []
    for k in range(n):
        rows.append((
            k,
            report.energies[k],
            report.grad_norms[k],
            steps[k] if k < len(steps) else 0.0,
            ratios[k] if k < len(ratios) else 0.0,
            ex["div_norms"][k],
            ex["yT_norms"][k],
            ex["f_norms"][k],
        ))
    return rows


def _run_unsteady(cfg: RunConfig, mode):
    from .discretization import SpaceTimeGrid, SupportMask, st_inner
    from . import stokes_control as sc
    from .oracles import default_unsteady_case, manufactured_stokes

    v = cfg.values
    grid = SpaceTimeGrid(v["grid.nx"], v["grid.ny"], v["grid.nt"],
                         v["domain.Lx"], v["domain.Ly"], v["time.T"])
    om = v["control.omega"]
    mask = SupportMask(*om[:4]) if len(om) == 4 else SupportMask(*om)
    exact = None
    if mode == "direct" and v["problem.manufactured"]:
        if (v["domain.Lx"], v["domain.Ly"]) != (1.0, 1.0):
            raise ConfigError("problem.manufactured", "analytic case needs the unit square")
        case = default_unsteady_case(T_final=v["time.T"])
        exact, _ = manufactured_stokes(case, grid, v["physics.nu"])
        exact.y *= v["problem.amplitude"]
        exact.pi *= v["problem.amplitude"]
        exact.f *= v["problem.amplitude"]
        y0 = exact.y[0].copy()
    elif v["problem.y0"] == "bump":
        y0 = _bump_y0(grid, v["problem.amplitude"])
    else:
        y0 = np.zeros((2, grid.ny, grid.nx))

    problem = sc.ControlProblem(
        grid, v["physics.nu"], y0, mask, mode=mode,
        epsilon=v["solver.epsilon"], metric=v["solver.metric"],
    )
    algo = v["solver.algorithm"]
    out = Path(v["io.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(emit_config(cfg))

    if algo == "split":
        if mode != "null_control":
            raise ConfigError("solver.algorithm", "split applies to stokes-control only")
        scfg = sc.SolveConfig(
            max_iter=v["solver.max_iter"], tol_energy=v["solver.tol_energy"],
            tol_grad=v["solver.tol_grad"],
            inner_max_iter=v["solver.inner_max_iter"],
            inner_tol_grad=v["solver.inner_tol_grad"],
        )
        s, rep = sc.split_iteration(problem, scfg)
        rows = [
            (k, rep.outer_G[k], rep.outer_grad_norms[k],
             rep.outer_steps[k] if k < len(rep.outer_steps) else 0.0,
             0.0, rep.extras["div_inner"][k], 0.0,
             float(np.sqrt(st_inner(s.f, s.f, grid))))
            for k in range(len(rep.outer_G))
        ]
        _write_trace(out / "trace.csv", UNSTEADY_HEADER, rows)
        _dump_fields(out, grid, s)
        summary = {
            "mode": "split", "rounds": len(rep.outer_G),
            "G_first": float(rep.outer_G[0]), "G_last": float(rep.outer_G[-1]),
            "reason": rep.reason,
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        return _exit_code(rep.reason, rep.converged)

    scfg = sc.SolveConfig(
        max_iter=v["solver.max_iter"], tol_energy=v["solver.tol_energy"],
        tol_energy_rel=v["solver.tol_energy_rel"], tol_grad=v["solver.tol_grad"],
        tol_kernel=v["solver.tol_kernel"], algorithm=algo,
    )
    s_init = None
    if exact is not None:
        s_init = sc.lift_sA(problem)
        s_init.f = exact.f.copy()

    dump_every = v["io.dump_every"]
    if dump_every:
        s, rep = _segmented_descend(problem, scfg, s_init, dump_every, out, grid)
    else:
        s, rep = sc.descend(problem, scfg, s_init=s_init)
    _write_trace(out / "trace.csv", UNSTEADY_HEADER, _unsteady_rows(rep))
    _dump_fields(out, grid, s)
    summary = {
        "mode": mode, "iterations": rep.iterates_count, "reason": rep.reason,
        "E_first": float(rep.energies[0]), "E_last": float(rep.energies[-1]),
        "div_last": float(rep.extras["div_norms"][-1]),
        "yT_last": float(rep.extras["yT_norms"][-1]),
    }
    code = _exit_code(rep.reason, rep.converged)
    if exact is not None:
        dy = s.y - exact.y
        err = float(np.sqrt(st_inner(dy, dy, grid)))
        summary["l2_error"] = err
        if err > v["problem.error_bound"]:
            summary["error_bound_exceeded"] = True
            code = max(code, 3)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return code


def _segmented_descend(problem, scfg, s_init, dump_every, out, grid):
    """Run descend in dump_every-sized segments, dumping fields between.

    Relative tolerances are frozen against the very first segment so the
    concatenated run stops exactly like an unsegmented one would.
    """
    from . import stokes_control as sc
    from dataclasses import replace

    total = scfg.max_iter
    s = s_init
    merged = None
    done = 0
    tag = 0
    while True:
        seg = replace(scfg, max_iter=min(dump_every, total - done))
        s, rep = sc.descend(problem, seg, s_init=s)
        if merged is None:
            merged = rep
            if scfg.tol_energy_rel:
                merged_e0 = rep.energies[0]
                scfg = replace(scfg, tol_energy=max(
                    scfg.tol_energy, scfg.tol_energy_rel * merged_e0),
                    tol_energy_rel=0.0)
            if scfg.tol_grad:
                scfg = replace(scfg, tol_grad=0.0, tol_energy=scfg.tol_energy)
        else:
            for name in ("energies", "grad_norms", "steps", "kernel_ratios"):
                setattr(merged, name, np.concatenate(
                    [getattr(merged, name), getattr(rep, name)[1:]
                     if name in ("energies", "grad_norms") else getattr(rep, name)]))
            for name in ("div_norms", "yT_norms", "f_norms"):
                merged.extras[name] = np.concatenate(
                    [merged.extras[name], rep.extras[name][1:]])
            merged.extras["corrector"] = rep.extras["corrector"]
            merged.converged, merged.reason = rep.converged, rep.reason
            merged.iterates_count = len(merged.energies)
        done += seg.max_iter
        tag += 1
        _dump_fields(out, grid, s, tag=f"iter{done:06d}")
        if rep.converged or done >= total:
            break
    return s, merged


def _run_steady(cfg: RunConfig):
    from .discretization import SpatialGrid, space_inner
    from . import steady_nse as sn
    from .oracles import default_steady_case, manufactured_steady

    v = cfg.values
    grid = SpatialGrid(v["grid.nx"], v["grid.ny"], v["domain.Lx"], v["domain.Ly"])
    exact = None
    if v["problem.manufactured"]:
        if (v["domain.Lx"], v["domain.Ly"]) != (1.0, 1.0):
            raise ConfigError("problem.manufactured", "analytic case needs the unit square")
        y_ex, pi_ex, f_ex = manufactured_steady(default_steady_case(), grid, v["physics.nu"])
        amp = v["problem.amplitude"]
        exact = (amp * y_ex, amp * pi_ex)
        forcing = amp * f_ex
    else:
        forcing = np.zeros((2, grid.ny, grid.nx))

    problem = sn.SteadyProblem(grid, v["physics.nu"], forcing, epsilon=v["solver.epsilon"])
    algo = v["solver.algorithm"]
    if algo == "split":
        raise ConfigError("solver.algorithm", "split applies to stokes-control only")
    scfg = sn.SteadyConfig(
        max_iter=v["solver.max_iter"], tol_energy=v["solver.tol_energy"],
        tol_grad=v["solver.tol_grad"], algorithm=algo,
    )
    state, rep = sn.descend_steady(problem, scfg)
    out = Path(v["io.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(emit_config(cfg))
    rows = [
        (k, rep.energies[k], rep.grad_norms[k],
         rep.steps[k] if k < len(rep.steps) else 0.0,
         rep.extras["residual_norms"][k], rep.extras["div_norms"][k])
        for k in range(rep.iterates_count)
    ]
    _write_trace(out / "trace.csv", STEADY_HEADER, rows)
    _dump_steady(out, grid, state)
    summary = {
        "mode": "steady", "iterations": rep.iterates_count, "reason": rep.reason,
        "E_first": float(rep.energies[0]), "E_last": float(rep.energies[-1]),
    }
    code = _exit_code(rep.reason, rep.converged)
    if exact is not None:
        dy = state.y - exact[0]
        err = float(np.sqrt(space_inner(dy, dy, grid)))
        summary["l2_error"] = err
        if err > v["problem.error_bound"]:
            summary["error_bound_exceeded"] = True
            code = max(code, 3)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return code


def _run_abstract_demo(cfg: RunConfig):
    from . import abstract_descent as ad

    v = cfg.values
    p = ad.random_instance(v["seed"])
    dcfg = ad.DescentConfig(
        max_iter=v["solver.max_iter"],
        tol_energy=v["solver.tol_energy"],
        tol_grad=v["solver.tol_grad"],
    )
    rep = ad.descend(p, np.zeros(p.dim_H), dcfg)
    ubar = ad.oracle_minimizer(p)
    out = Path(v["io.out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(emit_config(cfg))
    rows = [
        (k, rep.energies[k], rep.grad_norms[k],
         rep.steps[k] if k < len(rep.steps) else 0.0)
        for k in range(rep.iterates_count)
    ]
    _write_trace(out / "trace.csv", ABSTRACT_HEADER, rows)
    summary = {
        "seed": v["seed"], "dim_H": p.dim_H, "iterations": rep.iterates_count,
        "reason": rep.reason, "E_last": float(rep.energies[-1]),
        "distance_to_oracle": float(p.norm_H(rep.final_u - ubar)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return _exit_code(rep.reason, rep.converged)


def run(cfg: RunConfig):
    """Execute one configured run; returns the process exit code."""
    from .stokes_control import DescentDivergence

    try:
        if cfg.subcommand == "stokes-control":
            return _run_unsteady(cfg, "null_control")
        if cfg.subcommand == "stokes-direct":
            return _run_unsteady(cfg, "direct")
        if cfg.subcommand == "steady-nse":
            return _run_steady(cfg)
        return _run_abstract_demo(cfg)
    except ConfigError:
        raise
    except (DescentDivergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 4


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="lsqctrl",
        description="least-squares variational solvers for Stokes null control "
                    "and the steady Navier-Stokes direct problem",
        allow_abbrev=False,
    )
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", default=None, help="path to a config file")
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = parse_config(args.subcommand, args.config, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: --config: {exc}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
