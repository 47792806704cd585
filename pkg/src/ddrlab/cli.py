"""Command-line front end: generate, ddf, verify, reconstruct, run, report."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, ExperimentConfig, canonical_json
from .ddr import DDFArchive, make_frame
from .distance_engine import (
    SOLVERS,
    distance_fields,
    read_distance_field,
    write_distance_field,
)
from .lab import (
    Check,
    ScenarioData,
    annulus_oracle,
    dphi_suite,
    gauge_pair_run,
    membership_suite,
    negative_control_domain,
    negative_control_run,
    nearest_point_suite,
)
from .metric_domain import SCENARIOS, Mesh, build_mesh, pullback_domain, scenario_domain, scenario_gauge
from .reconstruction import (
    DEFAULT_THRESHOLDS,
    CertificateError,
    boundary_identity_check,
    build_phi,
    isometry_certificate,
)

__all__ = ["main", "run_scenario", "reconstruct_files", "StageError"]

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


def _strip_timing(obj):
    # wall-clock values would break byte-identical reports
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k != "seconds" and not k.startswith("_")}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def write_report(obj, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(canonical_json(_strip_timing(obj)))
    return path


def _parse_sources(text: str, mesh: Mesh, frame) -> np.ndarray:
    from .reconstruction import grid_sources

    if text == "all":
        return np.arange(mesh.n_vertices, dtype=np.int64)
    if text.startswith("grid:"):
        try:
            spacing = float(text[5:])
        except ValueError:
            raise ConfigError(f"bad source list {text!r}") from None
        if spacing <= 0:
            raise ConfigError("grid spacing must be > 0")
        return grid_sources(mesh, spacing, frame=frame)
    raise ConfigError(f"sources must be 'all' or 'grid:<spacing>' (got {text!r})")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _config(args)
    domain = scenario_domain(cfg.scenario)
    boundary_metric = None
    if args.twin == "gauge":
        boundary_metric = domain.metric
        domain = pullback_domain(domain, scenario_gauge(cfg.scenario))
    elif args.twin == "control":
        boundary_metric = domain.metric
        domain = negative_control_domain(cfg.scenario)
    mesh = build_mesh(domain, cfg.h, cfg.stencil_radius, boundary_metric=boundary_metric)
    mesh.to_json(args.out)
    print(f"wrote {args.out}: {mesh.n_vertices} vertices, {mesh.n_edges} edges, h={mesh.h:g}")
    return EXIT_OK


def cmd_ddf(args) -> int:
    mesh = Mesh.from_json(args.mesh)
    if args.frame_spacing <= 0:
        raise ConfigError("frame spacing must be > 0")
    frame = make_frame(mesh, args.frame_spacing)
    sources = _parse_sources(args.sources, mesh, frame)
    k, m = len(frame), len(sources)
    size = 20 + 8 * (k + m) + 8 * m * k * k
    if size > args.max_bytes:
        raise ConfigError(f"archive would take {size / 1e9:.2f} GB ({m} sources x {k}^2 values); "
                          f"use a coarser source grid or raise --max-bytes")
    fields = distance_fields(mesh, frame.samples, args.solver)
    DDFArchive.from_fields(fields, frame, sources).write(args.out)
    print(f"wrote {args.out}: frame {k} samples, {m} sources")
    if args.field_out:
        write_distance_field(fields[0], args.field_out)
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config(args)
    check = verify_lemma(args.lemma, cfg, n=args.n)
    print(check.line())
    if args.report:
        write_report({"config": cfg.to_dict(), "check": check.to_dict()}, args.report)
    return EXIT_OK if check.passed else EXIT_FAIL


def verify_lemma(lemma: str, cfg: ExperimentConfig, n: int | None = None, data: ScenarioData | None = None) -> Check:
    if lemma == "nearest":
        return nearest_point_suite([cfg.scenario], h=cfg.h, n_points=n or 500, seed=cfg.seed,
                                   frame_spacing=cfg.frame_spacing)
    data = data or ScenarioData.build(cfg.scenario, cfg.h, stencil_radius=cfg.stencil_radius,
                                      frame_spacing=cfg.frame_spacing)
    if lemma == "segment":
        m = membership_suite(data, n or 500, cfg.seed)
        return Check("segment", f"geodesic membership ({cfg.scenario})",
                     m["precision"] >= 0.95 and m["recall"] >= 0.95,
                     {k: v for k, v in m.items() if k != "scenario"}, {"precision": 0.95, "recall": 0.95})
    if lemma == "dphi":
        d = dphi_suite(data, n or cfg.n_probes, cfg.seed)
        return Check("dphi", f"first-order relation ({cfg.scenario})", d["fraction_within"] >= 0.9,
                     {k: v for k, v in d.items() if k != "scenario"}, {"abs_tol": 0.05, "fraction": 0.9})
    raise ConfigError(f"unknown lemma {lemma!r}")


def _interior_probes(mesh: Mesh, sources: np.ndarray, n: int, seed: int, margin: float = 0.1) -> np.ndarray:
    from scipy.spatial import cKDTree

    cand = sources[(sources >= 0)]
    cand = cand[~mesh.boundary_flags[cand]]
    d, _ = cKDTree(mesh.vertices[mesh.boundary_vertices]).query(mesh.vertices[cand])
    cand = np.unique(cand[d > margin])
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(cand, size=min(n, len(cand)), replace=False))


def reconstruct_files(data_a: str, data_b: str, mesh_a: str, mesh_b: str, *, candidates: str = "mesh",
                      n_probes: int = 20, seed: int = 0, solver: str = "upwind") -> dict:
    """phi and the certificate from two archives and their meshes.

    The certificate needs distance fields, so frame-sourced fields are
    recomputed on both meshes; rows of both archives must agree with them.
    ``candidates="mesh"`` matches against every vertex of mesh B (a dense
    archive kept in memory), ``"archive"`` only against the sources of B.
    """
    ma, mb = Mesh.from_json(mesh_a), Mesh.from_json(mesh_b)
    arch_a = DDFArchive.read(data_a, mesh=ma)
    arch_b = DDFArchive.read(data_b, mesh=mb)
    if not np.array_equal(arch_a.frame.samples, arch_b.frame.samples):
        raise StageError("reconstruct", "the two archives use different boundary frames")
    frame = arch_a.frame
    fa = distance_fields(ma, frame.samples, solver)
    fb = distance_fields(mb, frame.samples, solver)
    for name, arch, fields in (("A", arch_a, fa), ("B", arch_b, fb)):
        src = arch.sources[arch.sources >= 0]
        rec = DDFArchive.from_fields(fields, frame, src).potentials
        got = arch.potentials[arch.sources >= 0]
        drift = float(np.max(np.abs((rec - rec[:, :1]) - (got - got[:, :1])))) if len(src) else 0.0
        if drift > 1e-9:
            raise StageError("reconstruct", f"archive {name} does not match its mesh (max deviation {drift:.3g})")
    cand_b = DDFArchive.from_fields(fb, frame) if candidates == "mesh" else arch_b
    corr = build_phi(arch_a, cand_b, mesh_a=ma, mesh_b=mb)
    bdef = boundary_identity_check(corr)
    probes = _interior_probes(ma, arch_a.sources, n_probes, seed)
    try:
        cert = isometry_certificate(corr, (None, None), (ma, mb), fields_a=fa, fields_b=fb, probes=probes)
    except CertificateError as exc:
        cert = {"error": str(exc), "isometric": False, "lambda_ok": False, "distance_ok": False, "probes": []}
    th = dict(DEFAULT_THRESHOLDS)
    return {
        "pairs": [{"a": a, "b": b, "sup_defect": d, "mutual": bool(m), "ambiguous": bool(s)}
                  for (a, b, d), m, s in zip(corr.pairs, corr.mutual, corr.ambiguous)],
        "median_sup_defect": float(np.median(corr.sup_defect)),
        "boundary_defect": float(bdef),
        "boundary_bound": 2.0 * frame.spacing if frame.spacing else 2.0 * frame.max_gap(),
        "certificate": cert,
        "verdict": {"boundary_ok": bool(bdef <= 2.0 * (frame.spacing or frame.max_gap())),
                    "lambda_ok": bool(cert.get("lambda_ok", False)),
                    "distance_ok": bool(cert.get("distance_ok", False)),
                    "isometric": bool(cert.get("isometric", False))},
        "thresholds": th,
        "candidates": candidates,
        "h": ma.h,
    }


def cmd_reconstruct(args) -> int:
    out = reconstruct_files(args.data_a, args.data_b, args.mesh_a, args.mesh_b, candidates=args.candidates,
                            n_probes=args.probes, seed=args.seed)
    write_report(out, args.out)
    v = out["verdict"]
    print(f"wrote {args.out}: " + ", ".join(f"{k}={v[k]}" for k in sorted(v)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# run


def run_scenario(cfg: ExperimentConfig, out_dir: str | Path, log=print) -> tuple[int, dict]:
    """generate -> ddf -> verify -> reconstruct for one scenario.

    Returns the exit status and the report. Writes mesh JSON, compact DDF1
    evidence archives (probe sources of M and their images in M'), report
    JSON and SVG plots into ``out_dir``.
    """
    from .plots import lambda_histogram_svg, phi_profile_svg

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    timings: dict[str, float] = {}
    report: dict = {"config": cfg.to_dict(), "stages": {}, "checks": []}
    stage = "generate"
    try:
        data = ScenarioData.build(cfg.scenario, cfg.h, stencil_radius=cfg.stencil_radius,
                                  frame_spacing=cfg.frame_spacing)
        data.mesh.to_json(out / "mesh_a.json")
        report["stages"]["generate"] = {"vertices": data.mesh.n_vertices, "frame_samples": len(data.frame)}
        timings["generate+fields"] = data.seconds

        stage = "verify"
        checks: list[Check] = []
        if cfg.scenario == "annulus":
            checks.append(annulus_oracle(cfg.h, cfg.stencil_radius))
        for lemma in ("nearest", "segment", "dphi"):
            t = time.perf_counter()
            checks.append(verify_lemma(lemma, cfg, data=data))
            timings[f"verify {lemma}"] = time.perf_counter() - t
            log(checks[-1].line())

        stage = "reconstruct"
        t = time.perf_counter()
        gauge = gauge_pair_run(data, n_probes=cfg.n_probes, seed=cfg.seed, grid_spacing=cfg.source_spacing,
                               keep=True)
        timings["gauge pair"] = time.perf_counter() - t
        pair, corr = gauge.pop("_pair"), gauge.pop("_corr")
        pair.mesh_b.to_json(out / "mesh_b.json")
        probes = [r["probe"] for r in gauge["certificate"]["probes"]]
        stage = "ddf"
        DDFArchive.from_fields(pair.fields_a, pair.frame, probes).write(out / "a.ddf1")
        DDFArchive.from_fields(pair.fields_b, pair.frame, [corr.match_of(p) for p in probes]).write(out / "b.ddf1")
        del pair, corr
        stage = "reconstruct"
        checks.append(Check("gauge", f"gauge-pair reconstruction ({cfg.scenario})", all(gauge["checks"].values()),
                            {k: v for k, v in gauge.items() if isinstance(v, (int, float, str, bool))},
                            {"match_within_2h": 0.98, "boundary_defect": gauge["boundary_bound"],
                             "geodesic_image": 0.95, "lambda_interval": [0.98, 1.02],
                             "lambda_spread": cfg.thresholds.lambda_spread, "lambda_fraction": 0.9,
                             "distance_defect_h": 3.0}, {"checks": gauge["checks"]}))
        log(checks[-1].line())
        t = time.perf_counter()
        control = negative_control_run(data, gauge["median_sup_defect"], n_probes=cfg.n_probes, seed=cfg.seed,
                                       grid_spacing=cfg.source_spacing)
        control.pop("_data_b")
        timings["negative control"] = time.perf_counter() - t
        checks.append(Check("control", f"negative control ({control['scenario']})",
                            all(control["checks"].values()),
                            {k: v for k, v in control.items() if isinstance(v, (int, float, str, bool))},
                            {"lambda_spread": 0.1, "defect_ratio": 10.0}, {"checks": control["checks"]}))
        log(checks[-1].line())
        report["stages"]["reconstruct"] = {"gauge": gauge, "control": control}
    except StageError:
        raise
    except Exception as exc:  # report the failing stage
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc

    report["checks"] = [c.to_dict() for c in checks]
    write_report(report, out / "report.json")
    for i, prof in enumerate(gauge.get("phi_profiles", [])):
        phi_profile_svg(prof, out / f"phi_profile_{i}.svg")
    lams = {"gauge pair": [x for r in gauge["certificate"]["probes"] for x in r.get("lambdas", [])],
            "negative control": [x for r in control["certificate"]["probes"] for x in r.get("lambdas", [])]}
    lambda_histogram_svg(lams, out / "lambda_hist.svg", cfg.thresholds.lambda_tol)
    timings["total"] = time.perf_counter() - t0
    (out / "timings.json").write_text(canonical_json(timings))
    failed = [c for c in checks if not c.passed]
    status = EXIT_OK if not failed else EXIT_FAIL
    if failed:
        log(f"FAILED: first failing check {failed[0].key}: {failed[0].title}")
    log(f"total {timings['total']:.1f} s; artifacts in {out}")
    return status, report


def cmd_run(args) -> int:
    cfg = _config(args)
    try:
        status, _ = run_scenario(cfg, args.out_dir)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    return status


# ---------------------------------------------------------------------------
# report


def _row(name, value, threshold, ok) -> tuple[str, str, str, str]:
    fmt = (lambda v: f"{v:.6g}" if isinstance(v, float) else str(v))
    return name, fmt(value), fmt(threshold), "PASS" if ok else "FAIL"


def _cert_rows(doc: dict) -> list[tuple]:
    cert = doc.get("certificate", doc)
    th = cert.get("thresholds", doc.get("thresholds", DEFAULT_THRESHOLDS))
    rows = []
    if "boundary_defect" in doc:
        rows.append(_row("boundary defect", doc["boundary_defect"], doc.get("boundary_bound", "-"),
                         doc.get("verdict", {}).get("boundary_ok", True)))
    if "error" in cert:
        rows.append(("certificate", cert["error"], "-", "FAIL"))
        return rows
    rows.append(_row("regular-window coverage", cert["coverage"], th["min_coverage"],
                     cert["coverage"] >= th["min_coverage"]))
    rows.append(_row("lambda fraction", cert["lambda_fraction"], th["lambda_fraction"], cert["lambda_ok"]))
    rows.append(_row("lambda spread (max)", cert["lambda_spread_max"], th["lambda_spread"],
                     cert["lambda_spread_max"] <= th["lambda_spread"]))
    rows.append(_row("distance defect / h", cert["distance_defect_over_h"], th["distance_tol_h"],
                     cert["distance_ok"]))
    rows.append(_row("isometric", cert["isometric"], True, cert["isometric"]))
    return rows


def _summarize(path: Path) -> tuple[list[tuple], dict | None]:
    head = path.read_bytes()[:4]
    if head == b"DDF1":
        a = DDFArchive.read(path)
        return [("DDF1 archive", f"{len(a)} sources x {len(a.frame)} samples", "-", "PASS")], None
    if head == b"DDF0":
        dist, parent = read_distance_field(path)
        return [("DDF0 field", f"{len(dist)} vertices, max {dist.max():.6g}", "-", "PASS")], None
    try:
        doc = json.loads(path.read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: not a DDF0/DDF1 file or JSON report ({exc})") from None
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: unrecognised report")
    if "checks" in doc:
        return [(c["key"], c["title"], "-", "PASS" if c["passed"] else "FAIL") for c in doc["checks"]], doc
    if "check" in doc:
        c = doc["check"]
        return [(c["key"], c["title"], "-", "PASS" if c["passed"] else "FAIL")], doc
    if "certificate" in doc or "lambda_fraction" in doc:
        return _cert_rows(doc), doc
    raise ValueError(f"{path}: unrecognised report")


def cmd_report(args) -> int:
    from .plots import lambda_histogram_svg, phi_profile_svg

    ok = True
    for p in map(Path, args.paths):
        try:
            rows, doc = _summarize(p)
        except (OSError, ValueError) as exc:
            print(f"error: {p}: {exc}", file=sys.stderr)
            return EXIT_FAIL
        print(f"== {p}")
        w = max(len(r[0]) for r in rows)
        for name, value, th, verdict in rows:
            print(f"  {name:<{w}}  {value:<24} {th:<10} {verdict}")
        ok &= all(r[3] == "PASS" for r in rows)
        if doc is None or args.plots is None:
            continue
        plots = Path(args.plots)
        plots.mkdir(parents=True, exist_ok=True)
        cert = doc.get("certificate")
        if cert is None and "stages" in doc:
            cert = doc["stages"].get("reconstruct", {}).get("gauge", {}).get("certificate")
            for i, prof in enumerate(doc["stages"].get("reconstruct", {}).get("gauge", {}).get("phi_profiles", [])):
                print(f"  plot {phi_profile_svg(prof, plots / f'{p.stem}_phi_{i}.svg')}")
        if cert and cert.get("probes"):
            lams = [x for r in cert["probes"] for x in r.get("lambdas", [])]
            print(f"  plot {lambda_histogram_svg({p.stem: lams}, plots / f'{p.stem}_lambda.svg')}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# argument handling


def _config(args) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    doc = base.to_dict()
    for key in ("scenario", "h", "stencil_radius", "frame_spacing", "source_spacing", "seed", "n_probes"):
        v = getattr(args, key, None)
        if v is not None:
            doc[key] = v
    return ExperimentConfig.from_dict(doc)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file (flags override its values)")
    p.add_argument("--scenario", choices=SCENARIOS)
    p.add_argument("--h", type=float)
    p.add_argument("--stencil-radius", dest="stencil_radius", type=int)
    p.add_argument("--frame-spacing", dest="frame_spacing", type=float)
    p.add_argument("--source-spacing", dest="source_spacing", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--probes", dest="n_probes", type=int)


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ddrlab", description="distance difference representation lab")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build a mesh JSON for a scenario")
    _add_config_args(p)
    p.add_argument("--twin", choices=("none", "gauge", "control"), default="none",
                   help="mesh the gauge twin or the non-isometric control instead")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("ddf", help="write a DDF1 archive for a mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--sources", default="grid:0.05", help="'all' or 'grid:<spacing>'")
    p.add_argument("--frame-spacing", type=float, default=0.02)
    p.add_argument("--solver", choices=SOLVERS, default="upwind")
    p.add_argument("--max-bytes", type=float, default=4e9)
    p.add_argument("--field-out", help="also dump the first frame field as DDF0")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ddf)

    p = sub.add_parser("verify", help="check one criterion numerically")
    p.add_argument("--lemma", choices=("nearest", "segment", "dphi"), required=True)
    _add_config_args(p)
    p.add_argument("--n", type=int, help="points / triples / probes to test")
    p.add_argument("--report")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("reconstruct", help="build phi and the isometry certificate from archives")
    p.add_argument("--data-a", required=True)
    p.add_argument("--data-b", required=True)
    p.add_argument("--mesh-a", required=True)
    p.add_argument("--mesh-b", required=True)
    p.add_argument("--candidates", choices=("mesh", "archive"), default="mesh")
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("run", help="full pipeline for one scenario")
    _add_config_args(p)
    p.add_argument("--out-dir", default="ddr_run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="summarise artifact files and plot them")
    p.add_argument("paths", nargs="*")
    p.add_argument("--plots", help="directory for SVG plots")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = _parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        ap.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command == "report" and not args.paths:
        print("usage: ddrlab report [--plots DIR] PATH [PATH ...]", file=sys.stderr)
        print("report: error: no input files", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
