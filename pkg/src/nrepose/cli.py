"""Command-line interface: ``nrepose {synth,estimate,compare,gradcheck}``.

Exit codes: 0 success, 1 failed check, 2 usage or input error, 3 estimation
failure. Every command accepts ``--config FILE`` (JSON object keyed by
option name); explicit flags override values from the file. A run manifest
is written before any computation starts.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

log = logging.getLogger("nrepose")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ESTIMATION = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    master_seed: int | None
    version: str = __version__
    argv: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    started: float = field(default_factory=time.time)

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True, default=str)


def _csv_floats(s: str) -> list:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}")


def _csv_words(s: str) -> list:
    return [v.strip() for v in s.split(",") if v.strip()]


def _manifest_path(args, primary) -> Path | None:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if primary is None:
        return None
    p = Path(primary)
    return p.with_name(p.stem + ".manifest.json")


def _config_snapshot(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config_file")}


# ---------------------------------------------------------------------------
# synth

def cmd_synth(args) -> int:
    from .scene import save_scene
    from .synthbench import PRESETS, SceneSpec, generate_scene

    kw = dict(n_points=args.points, seed=args.seed, descriptor_dim=args.dim,
              peak_prob=args.peak_prob, snap_to_nodes=args.snap)
    if args.preset:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}")
        rho, m, noise = PRESETS[args.preset]
        kw.update(outlier_rate=rho, multimodal_rate=m, pixel_noise=noise)
    for name, dest in (("outliers", "outlier_rate"), ("multimodal", "multimodal_rate"),
                       ("noise", "pixel_noise")):
        v = getattr(args, name)
        if v is not None:
            kw[dest] = v
    try:
        spec = SceneSpec(**kw)
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = RunManifest("synth", _config_snapshot(args), args.seed, argv=sys.argv[1:],
                           outputs={"scene": str(args.output)})
    manifest.write(_manifest_path(args, args.output))
    s = generate_scene(spec)
    save_scene(args.output, s.scene, s.coarse_grid, s.fine_grid, s.meta())
    digest = hashlib.sha256(Path(args.output).read_bytes()).hexdigest()[:16]
    print(f"wrote {args.output}: {spec.n_points} points, "
          f"{int((s.labels == 1).sum())} outliers, {int((s.labels == 2).sum())} multimodal, "
          f"sha256 {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate

def _load(path):
    from .scene import load_scene
    if not os.path.exists(path):
        raise UsageError(f"no such file: {path}")
    try:
        return load_scene(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read scene {path}: {exc}")


def cmd_estimate(args) -> int:
    from .baselines import (RobustKernel, extract_matches, fpr_refine_c2f, matches_to_csv,
                            re_estimate_c2f)
    from .pipeline import CoarseToFineConfig, coarse_loss_maps, estimate_pose_c2f
    from .solvers import EstimationError, IrlsConfig, MsacConfig, trace_to_csv
    from .synthbench import pose_errors

    scene, coarse, fine, meta = _load(args.scene)
    if coarse is None:
        raise UsageError("scene file has no coarse descriptor grid")
    if args.method in ("nre", "re", "fpr") and fine is None:
        raise UsageError("scene file has no fine descriptor grid")
    ct = args.coarse_temperature or meta.get("coarse_temperature", 1.0)
    ft = args.fine_temperature or meta.get("fine_temperature", 1.0)
    cfg = CoarseToFineConfig(coarse_stride=coarse.frame.stride,
                             fine_stride=fine.frame.stride if fine is not None else 2,
                             msac=MsacConfig(args.iterations, args.seed),
                             irls=IrlsConfig(args.max_iter, args.tol),
                             coarse_temperature=ct, fine_temperature=ft)
    outputs = {"pose": str(args.output)}
    for k in ("report", "trace", "matches"):
        if getattr(args, k):
            outputs[k] = str(getattr(args, k))
    RunManifest("estimate", _config_snapshot(args), args.seed, argv=sys.argv[1:],
                outputs=outputs).write(_manifest_path(args, args.output))

    report: dict = {"method": args.method}
    traces = {}
    try:
        if args.method in ("nre", "nre_coarse", "msac"):
            until = {"nre": "fine_gnc", "nre_coarse": "coarse_gnc", "msac": "msac"}[args.method]
            pose, rep = estimate_pose_c2f(scene, coarse, fine, cfg, until=until)
            report["stages"] = rep.to_dict()
            report["n_informative"] = rep.n_informative
            report["n_fine_excluded"] = rep.n_fine_excluded
            traces = rep.traces
        else:
            t0 = time.perf_counter()
            pose, stages = re_estimate_c2f(scene, coarse, fine, args.sigma, cfg)
            report["sigma"] = args.sigma
            traces = {f"re_{k}": v.refine.trace for k, v in stages.items() if v is not None}
            if args.method == "fpr":
                res = fpr_refine_c2f(scene.points, scene.coarse_descriptors, coarse,
                                     scene.fine_descriptors, fine, pose, scene.intrinsics,
                                     RobustKernel(args.kernel, args.kernel_param), cfg.irls)
                pose = res.pose
                traces["fpr"] = res.trace
            report["wall_ms"] = 1e3 * (time.perf_counter() - t0)
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION

    Path(args.output).write_text(pose.to_json() + "\n")
    if scene.gt_pose is not None:
        r, t = pose_errors(pose, scene.gt_pose)
        report["final"] = {"rotation_error_deg": r, "translation_error": t}
    if args.report:
        Path(args.report).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.trace:
        rows = ["stage,iter,sigma,loss,step_norm"]
        for stage, tr in traces.items():
            rows += [f"{stage},{line}" for line in trace_to_csv(tr).splitlines()[1:]]
        Path(args.trace).write_text("\n".join(rows) + "\n")
    if args.matches:
        probs, _ = coarse_loss_maps(scene, coarse, cfg)
        Path(args.matches).write_text(
            matches_to_csv(extract_matches(scene.points, probs, coarse.frame.stride)))
    msg = f"{args.method}: pose written to {args.output}"
    if "final" in report:
        msg += (f" (rotation error {report['final']['rotation_error_deg']:.4g} deg, "
                f"translation error {report['final']['translation_error']:.4g})")
    print(msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare

def cmd_compare(args) -> int:
    from .synthbench import METHODS, PRESETS, preset_specs, run_benchmark

    bad = [p for p in args.presets if p not in PRESETS]
    if bad:
        raise UsageError(f"unknown presets {bad}")
    bad = [m for m in args.methods if m not in METHODS]
    if bad:
        raise UsageError(f"unknown methods {bad}")
    if args.threads < 1 or args.scenes < 1:
        raise UsageError("--threads and --scenes must be >= 1")
    out = Path(args.outdir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for p in args.presets:
        outputs[p] = {"results": str(out / f"results_{p}.csv"),
                      "summary": str(out / f"summary_{p}.csv")}
    RunManifest("compare", _config_snapshot(args), args.seed, argv=sys.argv[1:],
                outputs=outputs).write(Path(args.manifest) if args.manifest
                                       else out / "manifest.json")
    for i, p in enumerate(args.presets):
        # each preset gets its own block of scene seeds
        specs = preset_specs(p, args.scenes, master_seed=args.seed + i)
        res = run_benchmark(specs, methods=args.methods, re_sigmas=args.sigmas,
                            threads=args.threads)
        Path(outputs[p]["results"]).write_text(res.to_csv())
        Path(outputs[p]["summary"]).write_text(res.summary_csv())
        line = ", ".join(f"{m} {res.success_rate(m, 2.0):.3f}" for m in res.methods())
        print(f"{p}: success@2deg {line}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck

def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks

    if args.manifest:
        RunManifest("gradcheck", _config_snapshot(args), None, argv=sys.argv[1:]).write(
            args.manifest)
    checks = run_gradchecks(n_configs=args.configs, tol=args.tol)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    if failed:
        for c in failed:
            print(f"gradient check failed: {c.name} (max rel err {c.max_rel_err:.3e})",
                  file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(checks)} gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="nrepose", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", dest="config_file", help="JSON file with option values")
        p.add_argument("--manifest", help="where to write the run manifest")

    p = sub.add_parser("synth", help="generate a synthetic scene")
    common(p)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--outliers", type=float)
    p.add_argument("--multimodal", type=float)
    p.add_argument("--noise", type=float, help="pixel noise in coarse cells")
    p.add_argument("--preset", help="easy, medium or hard")
    p.add_argument("--peak-prob", type=float, default=0.5)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--snap", action="store_true", help="put true reprojections on grid nodes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="scene.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", help="estimate the pose of a scene file")
    common(p)
    p.add_argument("scene")
    p.add_argument("--method", choices=["nre", "nre_coarse", "msac", "re", "fpr"], default="nre")
    p.add_argument("--sigma", type=float, default=1.0, help="final RE kernel width in cells")
    p.add_argument("--kernel", choices=["huber", "truncated_quadratic", "neg_gaussian"],
                   default="huber")
    p.add_argument("--kernel-param", type=float, default=0.5)
    p.add_argument("--iterations", type=int, default=1000, help="MSAC trials")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--coarse-temperature", type=float)
    p.add_argument("--fine-temperature", type=float)
    p.add_argument("-o", "--output", default="pose.json")
    p.add_argument("--report")
    p.add_argument("--trace", help="solver trace CSV")
    p.add_argument("--matches", help="argmax matches CSV")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("compare", help="run the synthetic benchmark")
    common(p)
    p.add_argument("--presets", type=_csv_words, default=["easy", "medium", "hard"])
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--methods", type=_csv_words,
                   default=["nre_c2f", "nre_coarse_only", "msac_only", "re", "fpr"])
    p.add_argument("--sigmas", type=_csv_floats, default=[0.5, 1.0, 2.0, 5.0])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--outdir", default="bench")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    common(p)
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def parse_args(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    if getattr(args, "config_file", None):
        try:
            with open(args.config_file) as f:
                conf = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config_file}: {exc}")
        if not isinstance(conf, dict):
            raise UsageError("config file must hold a JSON object")
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(conf) - known
        if unknown:
            raise UsageError(f"unknown config keys {sorted(unknown)}")
        # file values become defaults; flags given on the command line win
        sub.set_defaults(**conf)
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
