"""Command-line entry point: ``freebound solve|diagnose|reflect|fixtures|sweep``.

Exit status: 0 success, 2 bad configuration, 3 infeasible problem,
4 solver did not converge (outputs hold the best iterate).
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, canonical_text, config_hash, load_config
from .diagnostics import (
    bmo_seminorm,
    decay_ratio,
    default_family,
    dist_to_sphere_sup,
    growth_probe,
    hoelder_exponent,
    max_principle_check,
    monotonicity_check,
    normalized_energy_table,
    singular_set,
)
from .energy import p_energy
from .field import VectorField
from .fixtures import AnnulusRegion, BallRegion, BoxRegion, Fixture, fixture_energy_oracle, make_fixture
from .io import read_field_csv, write_csv_table, write_field_csv, write_json, write_point_set_vtk, write_vtk
from .mesh import Box, HalfBall, HalfBox, Mesh, MeshError, NodeClass, ProblemSpec, ball_elements, build_mesh
from .reflection import gradient_identity_check, reflect_field, reflected_residual_bound
from .solver import InfeasibleError, SolverConfig, StepRule, harmonic_extension, retract_free_boundary, solve

log = logging.getLogger("freebound")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NONCONVERGED = 0, 2, 3, 4
SUBCOMMANDS = ("solve", "diagnose", "reflect", "fixtures", "sweep")


class Run:
    """Output bookkeeping for one invocation."""

    def __init__(self, cfg: dict, subcommand: str, out: Path):
        self.cfg = cfg
        self.subcommand = subcommand
        self.out = out
        self.files: list[str] = []
        self.mesh_h: list[float] = []
        self.mesh_nodes: list[int] = []
        out.mkdir(parents=True, exist_ok=True)

    def wants(self, fmt: str) -> bool:
        return fmt == "json" or fmt in self.cfg["output.formats"]

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def note_mesh(self, mesh: Mesh) -> None:
        self.mesh_h.append(float(mesh.h))
        self.mesh_nodes.append(int(mesh.num_nodes))

    def finish(self, status: int) -> int:
        (self.out / "config.resolved").write_text(canonical_text(self.cfg), encoding="utf-8")
        write_json(
            self.out / "manifest.json",
            {
                "tool": "freebound",
                "version": __version__,
                "subcommand": self.subcommand,
                "config_hash": config_hash(self.cfg),
                "seed": self.cfg["run.seed"],
                "mesh_h": self.mesh_h,
                "mesh_nodes": self.mesh_nodes,
                "outputs": sorted(set(self.files) | {"config.resolved"}),
                "exit_status": status,
            },
        )
        return status


# --------------------------------------------------------------------------
# config -> objects
# --------------------------------------------------------------------------


def make_domain(cfg: dict):
    kind = cfg["problem.domain"]
    if kind == "halfball":
        return HalfBall(cfg["problem.radius"], cfg["problem.n"])
    cls = HalfBox if kind == "halfbox" else Box
    return cls(tuple(cfg["problem.lower"]), tuple(cfg["problem.upper"]))


def make_fixture_spec(cfg: dict) -> Fixture:
    n, N = cfg["problem.n"], cfg["problem.N"]
    A = cfg["fixture.A"]
    return Fixture(
        cfg["fixture.kind"],
        c=cfg["fixture.c"] or _unit(N),
        A=None if A is None else tuple(tuple(A[i * n : (i + 1) * n]) for i in range(N)),
        center=cfg["fixture.center"],
    )


def _unit(N: int) -> tuple[float, ...]:
    return (1.0,) + (0.0,) * (N - 1)


def _pad(vals: np.ndarray, N: int) -> np.ndarray:
    if vals.shape[1] > N:
        raise ConfigError(f"boundary data has {vals.shape[1]} components but problem.N = {N}")
    out = np.zeros((len(vals), N))
    out[:, : vals.shape[1]] = vals
    return out


def boundary_data(cfg: dict, domain):
    N = cfg["problem.N"]
    kind = cfg["problem.boundary_data"]
    if kind == "constant":
        value = np.asarray(cfg["problem.boundary_value"] or _unit(N), dtype=float)
        return lambda x: np.tile(value, (len(x), 1))
    if kind == "radial":
        center = cfg["problem.boundary_center"]
        if center is None:
            lo, hi = np.asarray(domain.lower, dtype=float), np.asarray(domain.upper, dtype=float)
            center = 0.5 * (lo + hi)
            center[-1] = lo[-1] - 0.5 * (hi[-1] - lo[-1])
        center = np.asarray(center, dtype=float)
        if center.size != domain.n:
            raise ConfigError(f"problem.boundary_center needs {domain.n} entries")

        def radial(x):
            y = x - center
            return _pad(y / np.linalg.norm(y, axis=1, keepdims=True), N)

        return radial
    if kind == "wave":
        k = cfg["problem.wave_number"]
        return lambda x: _pad(np.stack([np.cos(k * x[:, 0]), np.sin(k * x[:, 0])], axis=1), N)
    fixture = make_fixture_spec(cfg)
    return lambda x: _pad(np.atleast_2d(fixture.evaluate(x)), N)


def make_problem(cfg: dict) -> ProblemSpec:
    free = cfg["problem.free_boundary"]
    try:
        domain = make_domain(cfg)
        return ProblemSpec(
            p=cfg["problem.p"],
            n=cfg["problem.n"],
            N=cfg["problem.N"],
            domain=domain,
            free_boundary=None if free == ("default",) else free,
            natural_boundary=cfg["problem.natural_boundary"],
            dirichlet_data=boundary_data(cfg, domain),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid problem: {exc}") from None


def make_mesh(cfg: dict, spec: ProblemSpec, resolution: float | None = None) -> Mesh:
    try:
        return build_mesh(
            spec.domain,
            cfg["mesh.resolution"] if resolution is None else resolution,
            free_boundary=spec.free_boundary,
            natural_boundary=spec.natural_boundary,
            max_nodes=cfg["mesh.max_nodes"],
        )
    except (MeshError, KeyError) as exc:
        raise ConfigError(f"mesh: {exc}") from None


def make_solver_config(cfg: dict) -> SolverConfig:
    try:
        rule = StepRule(
            initial=cfg["solver.step_initial"],
            backtrack=cfg["solver.backtrack"],
            armijo=cfg["solver.armijo"],
            max_backtracks=cfg["solver.max_backtracks"],
            direction=cfg["solver.direction"],
            line_search=cfg["solver.line_search"],
        )
        return SolverConfig(
            eps0=cfg["solver.eps0"],
            eps_decay=cfg["solver.eps_decay"],
            eps_min=cfg["solver.eps_min"],
            step_rule=rule,
            grad_tol=cfg["solver.grad_tol"],
            max_iters=cfg["solver.max_iters"],
            stage_tol_factor=cfg["solver.stage_tol_factor"],
            stage_max_iters=cfg["solver.stage_max_iters"],
        )
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from None


def initial_field(cfg: dict, mesh: Mesh, spec: ProblemSpec) -> VectorField:
    if cfg["problem.init_file"] is not None:
        try:
            u = read_field_csv(cfg["problem.init_file"], mesh)
        except ValueError as exc:
            raise ConfigError(f"problem.init_file: {exc}") from None
    else:
        u = harmonic_extension(mesh, spec)
    amp = cfg["run.init_noise"]
    if amp > 0:
        rng = np.random.default_rng(cfg["run.seed"])
        noise = amp * rng.standard_normal(u.values.shape)
        noise[mesh.node_class == NodeClass.DIRICHLET] = 0.0
        u = retract_free_boundary(u.with_values(u.values + noise))
    return u


def fixture_region(cfg: dict, n: int):
    kind = cfg["fixture.region"]
    if kind == "box":
        lo, hi = cfg["fixture.region_lower"], cfg["fixture.region_upper"]
        if lo is None or hi is None or len(lo) != n or len(hi) != n:
            raise ConfigError(f"fixture.region_lower/upper need {n} entries")
        return BoxRegion(tuple(lo), tuple(hi))
    center = cfg["fixture.region_center"] or cfg["fixture.center"] or (0.0,) * n
    if len(center) != n:
        raise ConfigError(f"fixture.region_center needs {n} entries")
    if kind == "ball":
        return BallRegion(tuple(center), cfg["fixture.region_radius"])
    return AnnulusRegion(tuple(center), cfg["fixture.region_inner"], cfg["fixture.region_radius"])


def region_elements(mesh: Mesh, region) -> np.ndarray:
    """Elements whose barycenter lies inside ``region``."""
    if isinstance(region, BoxRegion):
        b = mesh.barycenters
        inside = np.all((b > np.asarray(region.lower)) & (b < np.asarray(region.upper)), axis=1)
        return np.flatnonzero(inside)
    if isinstance(region, BallRegion):
        return ball_elements(mesh, region.center, region.radius)
    outer = ball_elements(mesh, region.center, region.outer)
    return np.setdiff1d(outer, ball_elements(mesh, region.center, region.inner), assume_unique=True)


def _sample_fixture(cfg: dict, mesh: Mesh) -> VectorField:
    try:
        return make_fixture(make_fixture_spec(cfg), mesh)
    except ValueError as exc:
        raise ConfigError(f"fixture: {exc}") from None


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _field_outputs(run: Run, name: str, u: VectorField, p: float) -> None:
    if run.wants("csv"):
        write_field_csv(run.path(f"{name}.csv"), u)
    if run.wants("vtk"):
        write_vtk(
            run.path(f"{name}.vtk"),
            u.mesh,
            point_data={"u": u.values, "norm_u": u.norms(), "node_class": u.mesh.node_class.astype(float)},
            cell_data={"energy_density": p_energy(u, p).per_element / u.mesh.volumes},
            title=f"freebound {name}",
        )


def _solve(cfg: dict, run: Run) -> tuple[VectorField, ProblemSpec, bool]:
    spec = make_problem(cfg)
    mesh = make_mesh(cfg, spec)
    run.note_mesh(mesh)
    solver_cfg = make_solver_config(cfg)
    init = initial_field(cfg, mesh, spec)
    u, report = solve(mesh, spec, init, solver_cfg)
    interior_sup, boundary_sup, ok = max_principle_check(u)
    summary = report.to_dict()
    summary.update(
        p_energy=p_energy(u, spec.p).total,
        interior_sup=interior_sup,
        boundary_sup=boundary_sup,
        max_principle_ok=ok,
        mesh_h=float(mesh.h),
        num_nodes=int(mesh.num_nodes),
    )
    write_json(run.path("solve_report.json"), summary)
    if run.wants("csv"):
        run.path("trace.csv").write_text(report.trace_csv(), encoding="utf-8")
    _field_outputs(run, "field", u, spec.p)
    log.info("solve: %s after %d iterations, residual %.3e", report.message, report.iterations, report.final_residual_norm)
    return u, spec, report.converged


def cmd_solve(cfg: dict, run: Run) -> int:
    _, _, converged = _solve(cfg, run)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def _analysis_field(cfg: dict, run: Run) -> tuple[VectorField, int]:
    source = cfg["diagnostics.source"]
    if source == "solve":
        u, _, converged = _solve(cfg, run)
        return u, EXIT_OK if converged else EXIT_NONCONVERGED
    spec = make_problem(cfg)
    mesh = make_mesh(cfg, spec)
    run.note_mesh(mesh)
    if source == "file":
        if cfg["problem.init_file"] is None:
            raise ConfigError("diagnostics.source = file needs problem.init_file")
        try:
            return read_field_csv(cfg["problem.init_file"], mesh), EXIT_OK
        except ValueError as exc:
            raise ConfigError(f"problem.init_file: {exc}") from None
    return _sample_fixture(cfg, mesh), EXIT_OK


def _guarded(fn, *args):
    """Run one diagnostic; a precondition failure is reported instead of raised."""
    try:
        out = fn(*args)
    except ValueError as exc:
        return {"error": str(exc)}
    return out.to_dict() if hasattr(out, "to_dict") else out


def cmd_diagnose(cfg: dict, run: Run) -> int:
    u, status = _analysis_field(cfg, run)
    mesh, p = u.mesh, cfg["problem.p"]
    R, levels = cfg["diagnostics.R"], cfg["diagnostics.levels"]
    family = default_family(mesh, R, levels, cfg["diagnostics.lattice"])
    center = np.asarray(cfg["diagnostics.center"] or (0.0,) * mesh.n, dtype=float)
    if center.size != mesh.n:
        raise ConfigError(f"diagnostics.center needs {mesh.n} entries")

    table = normalized_energy_table(u, p, family)
    sing = singular_set(u, p, cfg["diagnostics.eps_threshold"], R, family)
    alpha, rms = hoelder_exponent(u, center, R, max(cfg["diagnostics.hoelder_depth"], 3))
    interior_sup, boundary_sup, mp_ok = max_principle_check(u)
    free = np.flatnonzero(mesh.node_class == NodeClass.FREE_SPHERE)
    gr = cfg["diagnostics.growth_r"] or R / 4
    report = {
        "p": p,
        "mesh_h": float(mesh.h),
        "num_centers": int(len(family.centers)),
        "radii": family.radii,
        "sup_normalized_energy": float(table.max()),
        "singular_set": sing.to_dict(),
        "hoelder": {"center": center, "alpha": alpha, "fit_rms": rms},
        "monotonicity": _guarded(monotonicity_check, u, p, center, R / 2, R),
        "decay_ratio": _guarded(decay_ratio, u, p, center, R, cfg["diagnostics.theta"], None, levels),
        "growth": _guarded(growth_probe, u, p, center, gr, cfg["diagnostics.growth_lambda"], cfg["diagnostics.growth_mu"]),
        "bmo_seminorm": _guarded(bmo_seminorm, u, family),
        "dist_to_sphere_sup": dist_to_sphere_sup(u, free if free.size else None),
        "max_principle": {"interior_sup": interior_sup, "boundary_sup": boundary_sup, "passed": mp_ok},
    }
    write_json(run.path("diagnostics_report.json"), report)
    if run.wants("csv"):
        rows = [
            [i, *map(float, c), float(r), float(table[i, k])]
            for i, c in enumerate(family.centers)
            for k, r in enumerate(family.radii)
        ]
        header = ["center_index", *(f"x{k + 1}" for k in range(mesh.n)), "radius", "normalized_energy"]
        write_csv_table(run.path("normalized_energy.csv"), header, rows)
        write_csv_table(
            run.path("singular_set.csv"),
            ["center_index", *(f"x{k + 1}" for k in range(mesh.n)), "sup_energy"],
            [[i, *map(float, family.centers[i]), float(sing.sup_energy[i])] for i in sing.flagged],
        )
    if run.wants("vtk"):
        write_point_set_vtk(run.path("singular_set.vtk"), np.asarray(sing.flagged_points).reshape(-1, mesh.n), title="singular set")
    return status


def cmd_reflect(cfg: dict, run: Run) -> int:
    u, status = _analysis_field(cfg, run)
    p = cfg["problem.p"]
    try:
        refl = reflect_field(u, p)
    except ValueError as exc:
        raise InfeasibleError(f"reflection: {exc}") from None
    run.note_mesh(refl.mesh)
    bound = reflected_residual_bound(refl, p)
    finite = bound.ratios[np.isfinite(bound.ratios)]

    def _max(x):
        return float(x.max()) if x.size else 0.0

    report = {
        "p": p,
        "gradient_identity_deviation": gradient_identity_check(refl, p),
        "doubled_nodes": int(refl.mesh.num_nodes),
        "doubled_elements": int(refl.mesh.num_elements),
        "residual_ratio_max": _max(finite),
        "residual_ratio_max_on_plane": _max(bound.ratios[bound.on_plane & np.isfinite(bound.ratios)]),
        "residual_ratio_max_off_plane": _max(bound.ratios[~bound.on_plane & np.isfinite(bound.ratios)]),
        "residual_ratio_infinite": int(np.sum(~np.isfinite(bound.ratios))),
        "weight_min": float(refl.m.min()),
        "weight_max": float(refl.m.max()),
    }
    write_json(run.path("reflection_report.json"), report)
    if run.wants("vtk"):
        write_vtk(
            run.path("reflected.vtk"),
            refl.mesh,
            point_data={"v": refl.v.values, "u_tilde": refl.u_tilde.values, "m": refl.m},
            title="freebound reflected field",
        )
    return status


def _fixture_row(cfg: dict, mesh: Mesh, region, oracle: float) -> dict:
    u = _sample_fixture(cfg, mesh)
    el = region_elements(mesh, region)
    energy = p_energy(u, cfg["problem.p"], el).total
    err = abs(energy - oracle)
    return {
        "u": u,
        "resolution": None,
        "h": float(mesh.h),
        "energy": energy,
        "oracle": oracle,
        "abs_error": err,
        "rel_error": err / abs(oracle) if oracle else err,
    }


def cmd_fixtures(cfg: dict, run: Run) -> int:
    spec = make_problem(cfg)
    mesh = make_mesh(cfg, spec)
    run.note_mesh(mesh)
    region = fixture_region(cfg, mesh.n)
    oracle = fixture_energy_oracle(make_fixture_spec(cfg), cfg["problem.p"], region)
    row = _fixture_row(cfg, mesh, region, oracle)
    u = row.pop("u")
    row.update(kind=cfg["fixture.kind"], region=region.__dict__, singular_nodes=u.meta["singular_nodes"], resolution=cfg["mesh.resolution"])
    write_json(run.path("fixture_report.json"), row)
    _field_outputs(run, "fixture", u, cfg["problem.p"])
    return EXIT_OK


def observed_orders(h: list[float], err: list[float]) -> list[float | None]:
    """``log(e_k / e_{k+1}) / log(h_k / h_{k+1})``; ``None`` where an error vanishes."""
    out: list[float | None] = [None]
    for k in range(1, len(h)):
        if err[k] > 0 and err[k - 1] > 0:
            out.append(math.log(err[k - 1] / err[k]) / math.log(h[k - 1] / h[k]))
        else:
            out.append(None)
    return out


def cmd_sweep(cfg: dict, run: Run) -> int:
    spec = make_problem(cfg)
    region = fixture_region(cfg, spec.n)
    oracle = fixture_energy_oracle(make_fixture_spec(cfg), cfg["problem.p"], region)
    rows = []
    for res in cfg["sweep.resolutions"]:
        mesh = make_mesh(cfg, spec, res)
        run.note_mesh(mesh)
        row = _fixture_row(cfg, mesh, region, oracle)
        row.pop("u")
        row["resolution"] = res
        rows.append(row)
        log.info("sweep: h=%.4g energy=%.10g error=%.3e", row["h"], row["energy"], row["abs_error"])
    orders = observed_orders([r["h"] for r in rows], [r["abs_error"] for r in rows])
    for row, order in zip(rows, orders):
        row["observed_order"] = order
    write_json(run.path("sweep_report.json"), {"kind": cfg["fixture.kind"], "oracle": oracle, "rows": rows})
    if run.wants("csv"):
        keys = ["resolution", "h", "energy", "oracle", "abs_error", "rel_error", "observed_order"]
        write_csv_table(run.path("sweep.csv"), keys, [["" if r[k] is None else r[k] for k in keys] for r in rows])
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "diagnose": cmd_diagnose, "reflect": cmd_reflect, "fixtures": cmd_fixtures, "sweep": cmd_sweep}


def execute(subcommand: str, config_path=None, overrides=(), out=None) -> int:
    """Run one subcommand; returns the exit status."""
    if subcommand not in COMMANDS:
        log.error("unknown subcommand %r", subcommand)
        return EXIT_CONFIG
    try:
        cfg = load_config(config_path, overrides)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    if out is not None:
        cfg["output.dir"] = str(out)
    run = Run(cfg, subcommand, Path(cfg["output.dir"]))
    try:
        status = COMMANDS[subcommand](cfg, run)
    except ConfigError as exc:
        log.error("%s", exc)
        return run.finish(EXIT_CONFIG)
    except InfeasibleError as exc:
        log.error("infeasible: %s", exc)
        return run.finish(EXIT_INFEASIBLE)
    return run.finish(status)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="freebound", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"freebound {__version__}")
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="key = value config file")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        sp.add_argument("--out", type=Path, default=None, help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return execute(args.subcommand, args.config, args.overrides, args.out)


if __name__ == "__main__":
    sys.exit(main())
