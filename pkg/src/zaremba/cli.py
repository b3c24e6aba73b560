"""Command-line driver: ``zaremba {solve,capacity,wiener,classify,verify-map}``.

Every run reads a versioned JSON problem file, applies ``--override`` edits,
validates the result (unknown keys are rejected) and writes ``report.json``
plus CSV artifacts into ``--out``.  Exit codes: 0 success, 2 invalid input,
3 solver failure.
"""
import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import capacity, geometry, operators, trichotomy
from .blocks import BlockSet, block_from_dict
from .solver import (DEFAULT_SCHEDULE, LID_DIRICHLET, SolverError, ball_problem, solve,
                     strip_problem)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SOLVER = 3
FLOAT_FORMAT = ".17g"


class SpecError(ValueError):
    """Input that parses but cannot be run; reported with exit code 2."""


# ---------------------------------------------------------------- schema

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MapSpec(_Strict):
    kind: Literal["p_laplace", "exp_dir"] = "p_laplace"
    q0: Optional[List[float]] = None

    @model_validator(mode="after")
    def _q0(self):
        if self.kind == "exp_dir":
            if self.q0 is None:
                raise ValueError("exp_dir needs q0")
            if math.hypot(*self.q0) >= 1 / math.sqrt(2):
                raise ValueError("exp_dir needs |q0| < 1/sqrt(2)")
        elif self.q0 is not None:
            raise ValueError("q0 is only valid for exp_dir")
        return self


class CylinderSpec(_Strict):
    height: float = Field(8.0, gt=0)
    lid: Literal["dirichlet", "natural"] = LID_DIRICHLET


class BallSpec(_Strict):
    puncture: float = Field(1e-6, gt=0, lt=1)
    inner: Literal["natural", "dirichlet"] = "natural"
    inner_value: Optional[float] = None
    height: Optional[float] = Field(None, gt=0)
    lid: Literal["dirichlet", "natural"] = LID_DIRICHLET

    @model_validator(mode="after")
    def _inner(self):
        if self.inner == "dirichlet" and self.inner_value is None:
            raise ValueError("a Dirichlet puncture needs inner_value")
        return self


class DomainSpec(_Strict):
    cylinder: Optional[CylinderSpec] = None
    ball: Optional[BallSpec] = None

    @model_validator(mode="after")
    def _one(self):
        if (self.cylinder is None) == (self.ball is None):
            raise ValueError("give exactly one of cylinder or ball")
        return self


class BlockSpec(_Strict):
    kind: Literal["base", "lateral", "slab"]
    t0: Optional[float] = Field(None, ge=0)
    t1: Optional[float] = Field(None, ge=0)
    cross_fraction: Optional[float] = Field(None, gt=0, le=1)

    @model_validator(mode="after")
    def _extent(self):
        if self.kind == "base":
            if self.t0 is not None or self.t1 is not None or self.cross_fraction is not None:
                raise ValueError("base takes no parameters")
        else:
            if self.t0 is None or self.t1 is None:
                raise ValueError(f"{self.kind} needs t0 and t1")
            if self.t1 < self.t0:
                raise ValueError("need t0 <= t1")
            if self.kind == "lateral" and self.cross_fraction is not None:
                raise ValueError("cross_fraction is only valid for slab")
        return self


class DataSpec(_Strict):
    kind: Literal["const", "linear", "sine_exp", "nodal"] = "const"
    c: Optional[float] = None
    a: Optional[float] = None
    b: Optional[float] = None
    path: Optional[str] = None

    @model_validator(mode="after")
    def _fields(self):
        need = {"const": {"c"}, "linear": {"a", "b"}, "sine_exp": set(), "nodal": {"path"}}[self.kind]
        given = {k for k in ("c", "a", "b", "path") if getattr(self, k) is not None}
        if given != need:
            raise ValueError(f"{self.kind} data takes exactly {sorted(need) or 'no parameters'}")
        return self


class MeshSpec(_Strict):
    h: float = Field(0.1, gt=0, le=0.5)
    rings: Optional[int] = Field(None, ge=1)
    sectors: int = Field(64, ge=4)

    @field_validator("sectors")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("sectors must be even")
        return v


class SolverSpec(_Strict):
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(200, ge=1)
    epsilon_schedule: List[float] = Field(default_factory=lambda: list(DEFAULT_SCHEDULE))

    @field_validator("epsilon_schedule")
    @classmethod
    def _schedule(cls, v):
        if not v or any(e <= 0 for e in v) or any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("must be positive and strictly decreasing")
        if v[-1] > 1e-8:
            raise ValueError("must end at or below 1e-8")
        return v


class CapacitySpec(_Strict):
    kind: Literal["condenser", "sobolev", "neumann"] = "condenser"
    rho: Optional[float] = Field(None, gt=0)
    r: float = Field(1.0, gt=0)
    t: Optional[float] = Field(None, ge=1)
    refine: bool = False


class WienerSpec(_Strict):
    t_grid: Optional[List[float]] = None

    @field_validator("t_grid")
    @classmethod
    def _grid(cls, v):
        if v is not None and (len(v) < 2 or v[0] < 1 or any(b <= a for a, b in zip(v, v[1:]))):
            raise ValueError("must be increasing and start at t >= 1")
        return v


class VerifySpec(_Strict):
    sample_count: int = Field(10_000, ge=1)


class ProblemSpec(_Strict):
    version: Literal[1]
    n: int = Field(2, ge=2)
    p: float = 2.0
    kappa: float = Field(1.0, gt=0)
    map: MapSpec = MapSpec()
    domain: DomainSpec = DomainSpec(cylinder=CylinderSpec())
    dirichlet_set: List[BlockSpec] = Field(default_factory=lambda: [BlockSpec(kind="base")])
    dirichlet_data: DataSpec = DataSpec(kind="const", c=0.0)
    mesh: MeshSpec = MeshSpec()
    solver: SolverSpec = SolverSpec()
    capacity: CapacitySpec = CapacitySpec()
    wiener: WienerSpec = WienerSpec()
    verify: VerifySpec = VerifySpec()
    seed: int = 0

    @field_validator("p")
    @classmethod
    def _p(cls, v):
        if not (v > 1 and math.isfinite(v)):
            raise ValueError("p must satisfy p > 1 (finite)")
        return v

    @model_validator(mode="after")
    def _exp_dir(self):
        if self.map.kind == "exp_dir" and self.p != 2:
            raise ValueError("exp_dir is defined for p = 2 only")
        if self.map.q0 is not None and len(self.map.q0) != self.n:
            raise ValueError("q0 must have n components")
        return self


# ---------------------------------------------------------------- loading

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw, overrides):
    """Apply ``dotted.key=value`` edits to a raw spec dict (values parsed as JSON when possible)."""
    raw = json.loads(json.dumps(raw))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise SpecError(f"override {item!r} is not of the form key=value")
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            if not isinstance(nxt, dict):
                raise SpecError(f"override {key!r}: {part!r} is not an object")
            node = nxt
        node[parts[-1]] = _parse_value(value)
    return raw


def load_spec(path, overrides=()):
    text = Path(path).read_text(encoding="utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise SpecError(f"{path}: top level must be a JSON object")
    return ProblemSpec.model_validate(apply_overrides(raw, overrides))


def format_validation_error(exc):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(x) for x in err["loc"]) or "<root>"
        msg = err["msg"]
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        lines.append(f"invalid spec: field {loc!r}: {msg}")
    return "\n".join(lines)


# ---------------------------------------------------------------- output

def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return "null"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return '"nan"'
        if math.isinf(x):
            return '"inf"' if x > 0 else '"-inf"'
        return format(x, FLOAT_FORMAT)
    if isinstance(x, str):
        return json.dumps(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def dumps(obj, indent=0):
    """Deterministic JSON with sorted keys and 17 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {dumps(obj[k], indent + 1)}" for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        return "[" + ", ".join(dumps(v, indent + 1) for v in obj) + "]"
    return _fmt(obj)


def write_report(out, report):
    (out / "report.json").write_text(dumps(report) + "\n", encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format(float(v), FLOAT_FORMAT) if isinstance(v, (float, np.floating)) else v
                        for v in row])


def write_solution(out, fld):
    v = fld.mesh.vertices
    _write_csv(out / "solution.csv", ["vertex_id", "x", "y", "value"],
               ((i, v[i, 0], v[i, 1], fld.values[i]) for i in range(len(v))))


def write_sections(path, stats):
    _write_csv(path, ["tau", "min", "max", "mean"], ((s.tau, s.min, s.max, s.mean) for s in stats))


def read_sections(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return [trichotomy.SectionStats(float(r["tau"]), float(r["min"]), float(r["max"]), float(r["mean"]))
                for r in rows]
    except (OSError, KeyError, ValueError) as exc:
        raise SpecError(f"{path}: cannot read sections: {exc}") from exc


# ---------------------------------------------------------------- scenarios

def _params(spec):
    return geometry.TransformParams(kappa=spec.kappa, n=spec.n)


def _coefficient_map(spec):
    if spec.map.kind == "exp_dir":
        return operators.CoefficientMap.exp_dir(np.array(spec.map.q0))
    return operators.CoefficientMap.p_laplace(spec.p)


def _blocks(spec):
    return BlockSet(tuple(block_from_dict(b.model_dump(exclude_none=True)) for b in spec.dirichlet_set))


def _read_nodal(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        ids = np.array([int(r["vertex_id"]) for r in rows])
        vals = np.array([float(r["value"]) for r in rows])
    except (OSError, KeyError, ValueError) as exc:
        raise SpecError(f"{path}: cannot read nodal data: {exc}") from exc
    out = np.full(ids.max() + 1 if len(ids) else 0, np.nan)
    out[ids] = vals
    return out


def data_function(spec):
    """Dirichlet data as a function of cylinder points."""
    d = spec.dirichlet_data
    if d.kind == "const":
        return lambda x: np.full(len(x), d.c)
    if d.kind == "linear":
        return lambda x: d.a * x[:, -1] + d.b
    if d.kind == "sine_exp":
        return lambda x: np.exp(0.5 * np.pi * x[:, -1]) * np.sin(0.5 * np.pi * x[:, 0])
    raise SpecError("nodal data is applied per vertex, not as a function")


def _with_nodal(problem, spec):
    """Replace the Dirichlet values of ``problem`` by a nodal file."""
    vals = _read_nodal(spec.dirichlet_data.path)
    if len(vals) != problem.mesh.n_vertices:
        raise SpecError(f"nodal data has {len(vals)} vertices, mesh has {problem.mesh.n_vertices}")
    fixed = problem.fixed
    if np.any(np.isnan(vals[fixed])):
        raise SpecError("nodal data lacks values at constrained vertices")
    problem.dirichlet_values = np.where(fixed, vals, np.nan)
    return problem


def build_problem(spec):
    if spec.n != 2:
        raise SpecError("solves are implemented for n = 2")
    amap = _coefficient_map(spec)
    nodal = spec.dirichlet_data.kind == "nodal"
    data = (lambda x: np.zeros(len(x))) if nodal else data_function(spec)
    kw = dict(tol=spec.solver.tol, max_iter=spec.solver.max_iter,
              eps_schedule=tuple(spec.solver.epsilon_schedule))
    blocks = _blocks(spec)
    if spec.domain.cylinder is not None:
        c = spec.domain.cylinder
        problem = strip_problem(amap, c.height, spec.mesh.h, data, blocks=blocks, lid=c.lid, **kw)
    else:
        b = spec.domain.ball
        sectors = spec.mesh.sectors
        problem = ball_problem(amap, data, blocks=blocks, params=_params(spec), L=b.height, lid=b.lid,
                               rings=spec.mesh.rings, sectors=sectors, delta=b.puncture, inner=b.inner,
                               inner_value=b.inner_value, **kw)
    return _with_nodal(problem, spec) if nodal else problem


def run_solve(spec, out):
    problem = build_problem(spec)
    rep = solve(problem)
    write_solution(out, rep.field)
    problem.mesh.dump(out / "mesh")
    result = {"solve": rep.to_dict(), "mesh": _mesh_meta(problem.mesh)}
    if spec.domain.cylinder is not None:
        stats = trichotomy.section_stats(rep.field, trichotomy.mesh_line_heights(rep.field))
        write_sections(out / "sections.csv", stats)
    return result


def _mesh_meta(mesh):
    meta = {k: v for k, v in mesh.meta.items() if isinstance(v, (int, float, str))}
    meta.update(vertices=mesh.n_vertices, triangles=mesh.n_triangles)
    return meta


def run_capacity(spec, out):
    c = spec.capacity
    params = _params(spec)
    if c.kind == "condenser":
        if c.rho is None or not c.rho < c.r:
            raise SpecError("condenser capacity needs 0 < rho < r")
        est = capacity.condenser_capacity_ball(c.rho, c.r, spec.p, spec.n, sectors=spec.mesh.sectors,
                                               rings=spec.mesh.rings, refine=c.refine)
        oracle = capacity.radial_condenser_capacity(c.rho, c.r, spec.p, spec.n)
    elif c.kind == "sobolev":
        K = c.rho if c.rho is not None else _blocks(spec)
        est = capacity.sobolev_capacity(K, spec.p, spec.n, params, sectors=spec.mesh.sectors,
                                        rings=spec.mesh.rings, refine=c.refine)
        oracle = None
    else:
        if c.t is None:
            raise SpecError("neumann capacity needs t")
        est = capacity.neumann_capacity(_blocks(spec), c.t, spec.p, spec.mesh.h, refine=c.refine)
        oracle = None
    res = {"capacity": {"kind": c.kind, **est.to_dict(), "tol": est.meta.get("tol")}}
    if oracle is not None:
        res["capacity"]["oracle"] = oracle
    return res


def run_wiener(spec, out):
    rep = capacity.classify_regularity(_blocks(spec), spec.p, spec.wiener.t_grid, h=spec.mesh.h)
    _write_csv(out / "wiener.csv", ["t", "capacity", "integrand", "partial_integral"],
               zip(rep.t, rep.capacity, rep.integrand, rep.partial_integral))
    return {"wiener": {"verdict": rep.verdict, "beta": rep.beta, "c": rep.c, "fit_residual": rep.fit_residual,
                       "t": rep.t, "integrand": rep.integrand, "partial_integral": rep.partial_integral}}


def run_classify(spec, out, sections=None):
    res = {}
    if sections is not None:
        stats = read_sections(sections)
    else:
        if spec.domain.cylinder is None:
            raise SpecError("classify needs a cylinder domain or --sections")
        res = run_solve(spec, out)
        stats = read_sections(out / "sections.csv")
    try:
        rep = trichotomy.classify(stats, kappa=spec.kappa)
    except trichotomy.ConflictingFits as exc:
        res["trichotomy"] = {"verdict": None, "status": "withheld", "reason": str(exc),
                             "fit_diagnostics": {k: trichotomy._plain(v) for k, v in exc.diagnostics.items()}}
        return res
    except trichotomy.TooFewSections as exc:
        raise SpecError(str(exc)) from exc
    res["trichotomy"] = {"status": "classified", **rep.to_dict()}
    return res


def run_verify(spec, out):
    base = _coefficient_map(spec)
    params = _params(spec)
    n_samples = spec.verify.sample_count
    plain = operators.verify_axioms(base, n_samples, seed=spec.seed)
    pushed = operators.verify_axioms(operators.TransformedMap(base, params), n_samples, seed=spec.seed)
    res = {"verify": {"map": _axiom_dict(plain), "pushforward": _axiom_dict(pushed)}}
    if spec.map.kind == "exp_dir":
        ang = operators.verify_angular_condition(np.array(spec.map.q0), n_samples, seed=spec.seed)
        res["verify"]["angular"] = {"ok": ang.violations == 0, "min_margin": ang.min_margin,
                                    "violations": ang.violations}
    return res


def _axiom_dict(r):
    return {"ok": r.ok, "sample_count": r.sample_count, "alpha1": r.alpha1, "alpha2": r.alpha2,
            "min_monotonicity_gap": r.min_monotonicity_gap, "max_homogeneity_error": r.max_homogeneity_error,
            "violations": {kind: count for kind, count in r.violations}}


SCENARIOS = {"solve": run_solve, "capacity": run_capacity, "wiener": run_wiener,
             "classify": run_classify, "verify-map": run_verify}


def build_parser():
    ap = argparse.ArgumentParser(prog="zaremba", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(SCENARIOS))
    ap.add_argument("--spec", required=True, help="problem file (JSON, version 1)")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                    help="dotted-key edit of the problem file, repeatable")
    ap.add_argument("--sections", help="classify: read sections.csv instead of solving")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        spec = load_spec(args.spec, args.override)
    except ValidationError as exc:
        print(format_validation_error(exc), file=sys.stderr)
        return EXIT_INVALID
    except (SpecError, OSError) as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"command": args.command, "spec": spec.model_dump(mode="json"),
              "threads": int(os.environ.get("THREADS", os.cpu_count() or 1))}
    try:
        if args.command == "classify":
            result = run_classify(spec, out, args.sections)
        else:
            result = SCENARIOS[args.command](spec, out)
    except (SpecError, NotImplementedError, ValueError) as exc:
        print(f"invalid spec: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SolverError as exc:
        report["status"] = "solver_failure"
        report["error"] = {"type": type(exc).__name__, "message": str(exc)}
        partial = getattr(exc, "report", None)
        if partial is not None:
            report["error"]["partial"] = partial.to_dict()
        write_report(out, report)
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    report["status"] = "ok"
    report.update(result)
    write_report(out, report)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
