"""Command-line entry point: sample2d, warp-noise, distill, verify.

Exit codes: 0 success, 1 validation or criterion failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import acceptance
from .config import build_anneal, build_beta, build_schedule, load_config
from .distill import CameraOrbit, DistillConfig, OptimizerSpec, distill_run
from .errors import DomainError, InvariantError, UnsupportedConfigurationError
from .files import write_image, write_json, write_raw, write_records_csv
from .geometry import Camera
from .noise_transport import (
    ReferenceNoise,
    bilinear_noise,
    consistent_noise,
    corresponding_pixels,
    view_footprints,
)
from .renderer import SphereScene
from .samplers import CleanState, run_clean, run_pf_ode, time_grid
from .teacher import load_teacher
from .verify import correlation, moment_check, pathwise_sde_gap

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


def _teacher(cfg, schedule, base_dir):
    return load_teacher(cfg["teacher"], schedule, base_dir)


def cmd_sample2d(cfg: dict, out: Path, seed: int, base_dir: Path) -> int:
    schedule = build_schedule(cfg["schedule"])
    schedule.validate()
    teacher = _teacher(cfg, schedule, base_dir)
    beta = build_beta(cfg["beta"])
    n_steps = int(cfg["n_steps"])
    ts = time_grid(schedule, n_steps, cfg["spacing"])
    y, w = cfg.get("condition"), cfg.get("guidance")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(teacher.shape)

    ode = run_clean(teacher, eps, ts, y=y, w=w, method=cfg["method"], record=True, schedule=schedule)
    x_T = CleanState.initial(eps, schedule).noisy(schedule)
    pf = run_pf_ode(teacher, x_T, ts, y=y, w=w, schedule=schedule)
    ode_gap = float(np.max(np.abs(ode.final.noisy(schedule) - pf.x)))
    write_records_csv(out / "trajectory.csv", ode.records[1:])
    write_image(out / "clean_ode_final", ode.final.x_clean)
    write_image(out / "pf_ode_final", pf.x)
    summary = {"n_steps": n_steps, "ode_gap": ode_gap, "method": cfg["method"]}
    if beta.kind != "zero":
        sde = run_clean(teacher, eps, ts, beta=beta, rng=np.random.default_rng(seed + 1), y=y, w=w,
                        record=True, schedule=schedule)
        write_records_csv(out / "trajectory_sde.csv", sde.records[1:])
        write_image(out / "clean_sde_final", sde.final.x_clean)
        summary["sde_gap"] = pathwise_sde_gap(teacher, schedule, beta, n_steps, seed)
    write_json(out / "summary.json", summary)
    print(f"ODE/PF-ODE equivalence gap: {ode_gap:.3e}")
    if "sde_gap" in summary:
        print(f"SDE pathwise gap: {summary['sde_gap']:.3e}")
    return EXIT_OK


def _cameras(cfg) -> list:
    base = cfg["camera"]
    return [Camera(**{**base, **c}) for c in cfg["cameras"]]


def cmd_warp_noise(cfg: dict, out: Path, seed: int, base_dir: Path) -> int:
    cams = _cameras(cfg)
    if not cams:
        raise ConfigError("warp-noise needs at least one camera")
    h, w = cams[0].height, cams[0].width
    if any((c.height, c.width) != (h, w) for c in cams):
        raise ConfigError("all cameras must share one resolution")
    channels, res = int(cfg["channels"]), int(cfg["noise_resolution"])
    o_th = float(cfg["opacity_threshold"])
    scene = SphereScene.uniform(8, channels)
    scene.empty = bool(cfg["scene"].get("empty", False))
    noise_fn = bilinear_noise if cfg["bilinear"] else consistent_noise

    ref = ReferenceNoise.create(res, channels, (h, w), seed, float(cfg["gamma"]))
    write_raw(out / "bg.f32", ref.bg)
    for i, cam in enumerate(cams):
        write_image(out / f"noise_view{i}", noise_fn(scene, cam, ref, o_th), -3.0, 3.0)
    ref.save(out / "reference.json")

    # Monte Carlo over reference reseedings derived from the run seed
    seeds = np.random.SeedSequence(seed).generate_state(int(cfg["reseedings"]))
    samples = [[] for _ in cams]
    for s in seeds:
        r = ReferenceNoise.create(res, channels, (h, w), int(s))
        for i, cam in enumerate(cams):
            samples[i].append(noise_fn(scene, cam, r, o_th))
    samples = [np.stack(v) for v in samples]
    pooled = np.concatenate([v.ravel() for v in samples])
    report = moment_check(pooled, 0.04, (0.94, 1.06))
    pairs = []
    if not scene.empty:
        for i in range(len(cams) - 1):
            a, b = cams[i], cams[i + 1]
            pa, pb, offset = corresponding_pixels(a, b, o_th)
            if len(pa) == 0:
                pairs.append({"views": [i, i + 1], "pairs": 0})
                continue
            fa, fb = view_footprints(a, res, o_th), view_footprints(b, res, o_th)
            ia = np.searchsorted(fa.pixels, pa)
            ib = np.searchsorted(fb.pixels, pb)
            va = samples[i].reshape(len(seeds), h * w, channels)[:, pa]
            vb = samples[i + 1].reshape(len(seeds), h * w, channels)[:, pb]
            pairs.append({
                "views": [i, i + 1],
                "pairs": int(len(pa)),
                "predicted_mean_overlap": float(np.mean(fa.overlap(fb, ia, ib))),
                "empirical_pooled_correlation": correlation(va, vb) if va.size >= 100 else None,
                "mean_reprojection_offset_px": float(np.mean(offset)),
            })
    write_json(out / "report.json", {"moments": report.to_dict(), "correlation": pairs,
                                     "reseedings": len(seeds), "views": len(cams)})
    print(f"noise moments: mean {report.mean:+.4f}, var {report.var:.4f} -> {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _distill_config(cfg: dict, schedule, teacher, mode: str, seed: int) -> DistillConfig:
    h, w, _ = teacher.shape
    orbit = CameraOrbit(**{**cfg["orbit"], "height": h, "width": w})
    gamma = float(cfg["gamma"])
    noise_mode = mode
    if mode == "sds":
        noise_mode, gamma = "random", 1.0
    return DistillConfig(
        anneal=build_anneal(cfg["anneal"], schedule),
        gamma=gamma,
        guidance=cfg.get("guidance"),
        condition=cfg.get("condition"),
        orbit=orbit,
        optimizer=OptimizerSpec(**cfg["optimizer"]),
        noise_mode=noise_mode,
        timesteps=cfg["timesteps"],
        steps=cfg.get("steps"),
        seed=seed,
        noise_resolution=int(cfg["noise_resolution"]),
        snapshot_every=int(cfg["snapshot_every"]),
    )


def cmd_distill(cfg: dict, out: Path, seed: int, base_dir: Path) -> int:
    schedule = build_schedule(cfg["schedule"])
    schedule.validate()
    teacher = _teacher(cfg, schedule, base_dir)
    modes = cfg["modes"]
    if isinstance(modes, str):
        modes = [modes]
    summary = {}
    for mode in modes:
        dcfg = _distill_config(cfg, schedule, teacher, mode, seed)
        scene = SphereScene.uniform(int(cfg["texture_resolution"]), teacher.shape[-1])
        res = distill_run(scene, teacher, dcfg)
        mode_dir = out / mode
        mode_dir.mkdir(parents=True, exist_ok=True)
        write_records_csv(mode_dir / "metrics.csv", res.log)
        write_image(mode_dir / "texture_initial", scene.texture)
        write_image(mode_dir / "texture_final", res.scene.texture)
        for step, snap in sorted(res.snapshots.items()):
            write_image(mode_dir / f"texture_step{step:06d}", snap)
        sigma = res.sigma_metric if res.moments.count else None
        summary[mode] = {"steps": dcfg.steps, "sigma_metric": sigma,
                         "final_grad_norm": res.log[-1].grad_norm if res.log else None}
        print(f"{mode}: steps {dcfg.steps}, sigma metric {sigma}")
    if "consistent" in summary and "sds" in summary:
        a, b = summary["consistent"]["sigma_metric"], summary["sds"]["sigma_metric"]
        summary["sigma_ordering_holds"] = None if a is None or b is None else a < b
        print(f"sigma(CFD) < sigma(SDS): {summary['sigma_ordering_holds']}")
    write_json(out / "summary.json", summary)
    return EXIT_OK


def cmd_verify(cfg: dict, out: Path, seed: int, base_dir: Path, only=None) -> int:
    report = {"schedule": "ok", "criteria": [], "failed": []}
    try:
        build_schedule(cfg["schedule"]).validate()
    except (InvariantError, DomainError) as exc:
        report["schedule"] = f"invariant failure: {exc}"
        report["failed"].append("schedule")
        print(f"[FAIL] schedule: {exc}")
    try:
        results = acceptance.run_suite(only, log=print)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    report["criteria"] = [r.to_dict() for r in results]
    report["failed"] += [r.key for r in results if not r.passed]
    write_json(out / "verify_report.json", report)
    if report["failed"]:
        print("failed: " + ", ".join(report["failed"]))
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {
    "sample2d": cmd_sample2d,
    "warp-noise": cmd_warp_noise,
    "distill": cmd_distill,
    "verify": cmd_verify,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file merged over the defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, default=Path("runs") / name)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, e.g. --set optimizer.lr=0.005")
        p.add_argument("--only", action="append", default=None, metavar="SUITE",
                       help="verify: restrict to these criteria (repeatable or comma separated)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.command, args.config, args.set)
    except (OSError, json.JSONDecodeError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {"command": args.command, "seed": args.seed, "config": cfg})
    base_dir = args.config.parent if args.config else Path(".")
    try:
        if args.command == "verify":
            only = None
            if args.only:
                only = [k for item in args.only for k in item.split(",") if k]
            return cmd_verify(cfg, out, args.seed, base_dir, only)
        if args.only:
            print("--only applies to verify", file=sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](cfg, out, args.seed, base_dir)
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, UnsupportedConfigurationError, InvariantError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
