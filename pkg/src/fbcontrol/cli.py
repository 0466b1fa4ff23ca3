"""Command-line pipeline: check → solve → verify, plus a report summary.

Every command writes into one ``--out`` directory with fixed file names and
leaves a ``manifest_<command>.json`` behind, even when it fails.  Exit codes:
0 pass, 1 relation/assumption failure, 2 usage or input error, 3 numerical
failure.  ``FBCONTROL_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .adjoint import (
    read_adjoint_csv,
    read_local_csv,
    solve_first_adjoint,
    solve_local_adjoint,
    solve_second_adjoint,
    write_adjoint_csv,
    write_local_csv,
)
from .assumptions import assess, report_to_dict
from .errors import NumericalFailure, ScenarioError
from .fbsde import read_trajectories_binary, simulate_feedback, write_trajectories_binary, write_trajectories_csv
from .hjb import read_field_csv, solve_hjb, write_field_csv
from .problem import RELATION_IDS, Scenario, load_scenario
from .verify import all_passed, reports_to_json, reports_to_table, run_verification

log = logging.getLogger("fbcontrol")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3

FIELD_CSV = "field.csv"
TRAJ_CSV = "trajectories.csv"
TRAJ_BIN = "trajectories.bin"
ADJOINT_CSV = "adjoint.csv"
LOCAL_CSV = "local_adjoint.csv"
ASSUMPTIONS_JSON = "assumptions.json"
SOLVE_JSON = "solve.json"
VERIFY_JSON = "verify.json"
VERIFY_CSV = "verify.csv"
VERIFY_TXT = "verify.txt"


class InputError(Exception):
    """Usage or missing-artifact problems (exit code 2)."""


@dataclass
class RunManifest:
    """Provenance of one command invocation."""

    command: str
    scenario_path: str | None = None
    scenario_hash: str | None = None
    versions: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    threads: int = 1
    outputs: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    exit_code: int | None = None
    error: str | None = None

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.stages.append({"stage": name, "seconds": time.perf_counter() - start})

    def write(self, out: Path) -> Path:
        path = out / f"manifest_{self.command}.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def scenario_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    return {"fbcontrol": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def _load(args, manifest: RunManifest) -> Scenario:
    if not args.scenario:
        raise InputError("--scenario is required")
    path = Path(args.scenario)
    manifest.scenario_path = str(path)
    if path.is_file():
        manifest.scenario_hash = scenario_hash(path)
    scenario = load_scenario(path)
    if args.seed is not None:
        scenario = scenario.replace(montecarlo=dataclasses.replace(scenario.montecarlo, seed=int(args.seed)))
    manifest.seeds = {"montecarlo": scenario.montecarlo.seed, "assumptions": scenario.assumptions.seed}
    return scenario


def _want(fmt: str, kind: str) -> bool:
    return fmt == "both" or fmt == kind


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def _check(scenario: Scenario, out: Path, manifest: RunManifest, fmt: str):
    with manifest.stage("assumptions"):
        rep = assess(scenario)
    doc = report_to_dict(rep)
    path = out / ASSUMPTIONS_JSON
    _dump_json(doc, path)
    manifest.outputs.append(str(path))
    return rep


def cmd_check(args, manifest: RunManifest) -> int:
    scenario = _load(args, manifest)
    out = Path(args.out)
    rep = _check(scenario, out, manifest, args.format)
    for gate, ok in rep.gates.items():
        print(f"{gate:14s} {'PASS' if ok else 'FAIL'}")
    given = {b: ok for b, ok in rep.lambda_beta.passed.items() if ok is not None}
    if not given:
        status = "not evaluated (no C_beta supplied)"
    else:
        status = "ok" if all(given.values()) else "exceeded"
    print(f"{'lambda_beta':14s} {status} (advisory)")
    return EXIT_OK if rep.passed else EXIT_FAIL


def _solve(scenario: Scenario, out: Path, manifest: RunManifest, threads: int, fmt: str):
    with manifest.stage("hjb"):
        try:
            fld = solve_hjb(scenario, threads=threads)
        except NumericalFailure as exc:
            raise _attributed(exc, "hjb")
    with manifest.stage("simulate"):
        try:
            bundle = simulate_feedback(scenario, fld)
        except NumericalFailure as exc:
            raise _attributed(exc, "simulate")
    with manifest.stage("adjoint"):
        try:
            adj = solve_first_adjoint(scenario, bundle)
            adj = solve_second_adjoint(scenario, bundle, adj)
        except NumericalFailure as exc:
            raise _attributed(exc, "adjoint")
    local = None
    if scenario.regime == "local_convex":
        with manifest.stage("local_adjoint"):
            try:
                local = solve_local_adjoint(scenario, bundle)
            except NumericalFailure as exc:
                raise _attributed(exc, "local_adjoint")
    with manifest.stage("export"):
        written = [out / FIELD_CSV, out / TRAJ_BIN, out / ADJOINT_CSV]
        write_field_csv(fld, written[0])
        write_trajectories_binary(bundle, written[1])
        write_adjoint_csv(adj, written[2])
        if local is not None:
            written.append(out / LOCAL_CSV)
            write_local_csv(local, written[-1])
        if _want(fmt, "csv"):
            written.append(out / TRAJ_CSV)
            write_trajectories_csv(bundle, written[-1])
        if _want(fmt, "json"):
            summary = {
                "W_t0_x0": float(fld.W_at(scenario.t0, scenario.x0)),
                "hjb": {k: v for k, v in fld.diagnostics.items() if isinstance(v, (int, float, str, bool))},
                "max_cfl": float(fld.max_cfl),
                "lipschitz": float(fld.lipschitz),
                "simulation": {k: v for k, v in bundle.diagnostics.items() if isinstance(v, (int, float, str, bool))},
                "adjoint": {k: v for k, v in adj.diagnostics.items() if isinstance(v, (int, float, str, bool))},
            }
            written.append(out / SOLVE_JSON)
            _dump_json(summary, written[-1])
        manifest.outputs.extend(str(p) for p in written)
    return fld, bundle, adj, local


def _attributed(exc: NumericalFailure, stage: str) -> NumericalFailure:
    exc.stage = stage
    return exc


def _gate(scenario: Scenario, out: Path, manifest: RunManifest, args) -> bool:
    rep = _check(scenario, out, manifest, args.format)
    if not rep.passed:
        failed = [g for g, ok in rep.gates.items() if not ok]
        if args.force:
            log.warning("assumption gates failed (%s); continuing because of --force", ", ".join(failed))
            return True
        print(f"assumption gates failed: {', '.join(failed)} (use --force to override)", file=sys.stderr)
        return False
    return True


def cmd_solve(args, manifest: RunManifest) -> int:
    scenario = _load(args, manifest)
    out = Path(args.out)
    if not _gate(scenario, out, manifest, args):
        return EXIT_FAIL
    fld, _, _, _ = _solve(scenario, out, manifest, args.threads, args.format)
    print(f"W({scenario.t0:g}, {scenario.x0:g}) = {float(fld.W_at(scenario.t0, scenario.x0)):.10g}")
    return EXIT_OK


def _load_artifacts(scenario: Scenario, out: Path):
    need = [out / FIELD_CSV, out / TRAJ_BIN, out / ADJOINT_CSV]
    if scenario.regime == "local_convex":
        need.append(out / LOCAL_CSV)
    missing = [str(p) for p in need if not p.is_file()]
    if missing:
        raise InputError(f"missing artifacts: {', '.join(missing)} (run `solve` first or pass --solve)")
    try:
        fld = read_field_csv(need[0], scenario.controls.points)
        bundle = read_trajectories_binary(need[1])
        adj = read_adjoint_csv(need[2])
        local = read_local_csv(need[3]) if len(need) > 3 else None
    except (OSError, ValueError) as exc:
        raise InputError(f"unreadable artifact: {exc}") from exc
    if adj.P is None:
        raise InputError(f"{need[2]} has no second-order adjoint columns")
    if adj.p.shape != bundle.X.shape:
        raise InputError("adjoint and trajectory artifacts disagree in shape")
    return fld, bundle, adj, local


def _parse_relations(text: str | None):
    if not text:
        return None
    rel = tuple(r.strip() for r in text.split(",") if r.strip())
    bad = [r for r in rel if r not in RELATION_IDS]
    if bad:
        raise InputError(f"unknown relation ids: {', '.join(bad)}")
    return rel


def _write_verify_csv(reports, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("relation", "sample", "coordinates", "value"))
        for rep in reports.values():
            for n, (coord, v) in enumerate(zip(rep.coords, rep.values.tolist())):
                w.writerow((rep.relation, n, json.dumps(coord, sort_keys=True), "%.17g" % v))


def cmd_verify(args, manifest: RunManifest) -> int:
    scenario = _load(args, manifest)
    out = Path(args.out)
    relations = _parse_relations(args.relations)
    if args.solve:
        if not _gate(scenario, out, manifest, args):
            return EXIT_FAIL
        fld, bundle, adj, local = _solve(scenario, out, manifest, args.threads, args.format)
    else:
        with manifest.stage("load"):
            fld, bundle, adj, local = _load_artifacts(scenario, out)
    with manifest.stage("verify"):
        reports = run_verification(scenario, fld, bundle, adj, local, relations)
    table = reports_to_table(reports)
    (out / VERIFY_TXT).write_text(table, encoding="utf-8")
    manifest.outputs.append(str(out / VERIFY_TXT))
    if _want(args.format, "json"):
        (out / VERIFY_JSON).write_text(reports_to_json(reports), encoding="utf-8")
        manifest.outputs.append(str(out / VERIFY_JSON))
    if _want(args.format, "csv"):
        _write_verify_csv(reports, out / VERIFY_CSV)
        manifest.outputs.append(str(out / VERIFY_CSV))
    print(table, end="")
    return EXIT_OK if all_passed(reports) else EXIT_FAIL


def cmd_report(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    found = False
    a = out / ASSUMPTIONS_JSON
    if a.is_file():
        found = True
        doc = json.loads(a.read_text(encoding="utf-8"))
        print("assumptions: " + ("PASS" if doc.get("passed") else "FAIL"))
        for g, ok in sorted(doc.get("gates", {}).items()):
            print(f"  {g:14s} {'PASS' if ok else 'FAIL'}")
    v = out / VERIFY_TXT
    if v.is_file():
        found = True
        print("relations:")
        print(v.read_text(encoding="utf-8"), end="")
    for m in sorted(out.glob("manifest_*.json")):
        if m.name == "manifest_report.json":
            continue
        found = True
        doc = json.loads(m.read_text(encoding="utf-8"))
        stages = ", ".join(f"{s['stage']} {s['seconds']:.2f}s" for s in doc.get("stages", []))
        print(f"{doc.get('command')}: exit {doc.get('exit_code')}; {stages}")
    if not found:
        raise InputError(f"no reports found under {out}")
    if v.is_file():
        vj = out / VERIFY_JSON
        if vj.is_file():
            return EXIT_OK if json.loads(vj.read_text(encoding="utf-8"))["passed"] else EXIT_FAIL
    return EXIT_OK


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "verify": cmd_verify, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbcontrol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("check", "evaluate the structural assumptions of a scenario"),
        ("solve", "solve the HJB, simulate, and compute adjoints"),
        ("verify", "run the relation checks on solved artifacts"),
        ("report", "summarize the reports in an output directory"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", default="out", help="output directory (default: out)")
        if name != "report":
            p.add_argument("--scenario", required=True, help="scenario TOML file")
            p.add_argument("--seed", type=int, default=None, help="override the Monte Carlo seed")
            p.add_argument("--format", choices=("csv", "json", "both"), default="both")
        if name in ("solve", "verify"):
            p.add_argument("--threads", type=int, default=1, help="worker threads for the HJB sweep")
            p.add_argument("--force", action="store_true", help="continue past failed assumption gates")
        if name == "verify":
            p.add_argument("--relations", default=None, help="comma-separated relation ids")
            p.add_argument("--solve", action="store_true", help="solve in-run instead of loading artifacts")
    return parser


def _configure_logging() -> None:
    level = os.environ.get("FBCONTROL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    out = Path(args.out)
    manifest = RunManifest(command=args.command, versions=_versions(), threads=getattr(args, "threads", 1))
    code = EXIT_INPUT
    try:
        if getattr(args, "threads", 1) < 1:
            raise InputError("--threads must be at least 1")
        out.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](args, manifest)
    except (InputError, ScenarioError) as exc:
        manifest.error = f"input error: {exc}"
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_INPUT
    except NumericalFailure as exc:
        stage = getattr(exc, "stage", None)
        prefix = f"numerical failure in {stage}" if stage else "numerical failure"
        manifest.error = f"{prefix}: {exc}"
        print(f"error: {prefix}: {exc}", file=sys.stderr)
        code = EXIT_NUMERICAL
    finally:
        manifest.exit_code = code
        try:
            out.mkdir(parents=True, exist_ok=True)
            manifest.write(out)
        except OSError as exc:  # pragma: no cover - unwritable output directory
            print(f"error: cannot write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
