"""Command-line interface.

Subcommands: gen-corpus, train-detector-fixture, train, eval, sweep,
occlusion, deform-demo, relight-demo, report. Every command reads the run
config (file, then ADVREAL_* environment overrides, then flags), takes a lock
on its output directory, writes artifacts atomically (a `.partial` suffix
marks interrupted writes), and returns nonzero on any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import attack, geometry, harness, metrics, render, scene
from .errors import AdvRealError

LOCK_NAME = ".advreal.lock"


@contextmanager
def output_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise AdvRealError(
            f"output directory {out_dir} is locked by another run "
            f"(remove {lock} if stale)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def artifact(path: Path):
    """Write to `<path>.partial` and rename on success; failures leave the
    partial file behind as the marker."""
    tmp = path.with_name(path.name + ".partial")
    yield tmp
    os.replace(tmp, path)


def _guard_overwrite(path: Path, cfg_hash: str, force: bool) -> None:
    if not path.exists() or force:
        return
    try:
        with open(path, "r", encoding="utf-8") as fh:
            existing = json.load(fh)
    except (json.JSONDecodeError, OSError):
        return
    if existing.get("config_hash") == cfg_hash:
        raise AdvRealError(
            f"{path} already holds results for config {cfg_hash}; rerun with --force"
        )


def _load_cfg(args) -> harness.RunConfig:
    cfg = harness.load_config(args.config)
    if getattr(args, "output", None):
        cfg.output_dir = args.output
    return cfg


def _resolve_patch(spec: str, cfg: harness.RunConfig) -> attack.Patch:
    size = cfg.attack.patch_size
    if spec == "gray":
        return attack.Patch.uniform(0.5, size, provenance=cfg.hash())
    if spec == "white":
        return attack.Patch.uniform(1.0, size, provenance=cfg.hash())
    if spec == "noise":
        return attack.Patch.random(size, cfg.seeds.patch, provenance=cfg.hash())
    return attack.load_patch(spec)


def _scenes(cfg: harness.RunConfig, corpus: str | None, split: str):
    path = Path(corpus) if corpus else Path(cfg.corpus.path)
    samples = harness.ingest_corpus(path)
    return harness.corpus_scenes(samples, None if split == "all" else split)


def _write_report_json(path: Path, report: metrics.EvalReport, cfg_hash: str,
                       extra: dict | None = None) -> None:
    payload = {"config_hash": cfg_hash, **(extra or {}), "report": report.to_dict()}
    with artifact(path) as tmp:
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(args) -> int:
    cfg = _load_cfg(args)
    spec = harness.SyntheticCorpusSpec(
        n_scenes=args.n_scenes if args.n_scenes else cfg.corpus.n_scenes,
        style=args.style if args.style else cfg.corpus.style,
        seed=cfg.seeds.corpus,
        light_range=(cfg.corpus.light_lo, cfg.corpus.light_hi),
        adequate_fraction=cfg.corpus.adequate_fraction,
        train_fraction=cfg.corpus.train_fraction,
        image_size=cfg.camera.image_size,
    )
    out = Path(args.out) if args.out else Path(cfg.corpus.path)
    with output_lock(out):
        manifest = harness.generate_corpus(spec, out, cfg)
    print(f"wrote {spec.n_scenes} scenes; manifest at {manifest}")
    return 0


def cmd_train_detector_fixture(args) -> int:
    cfg = _load_cfg(args)
    samples = harness.ingest_corpus(Path(args.corpus) if args.corpus else Path(cfg.corpus.path))
    out = Path(args.out) if args.out else Path(cfg.output_dir) / harness.FIXTURE_NAME
    model = harness.train_detector_fixture(
        cfg, samples, out,
        max_iters=args.max_iters, target_recall=args.target_recall,
        log=lambda msg: print(msg, flush=True),
    )
    recall = harness.clean_recall(model, harness.corpus_scenes(samples))
    print(f"saved weights to {out}; clean recall {recall:.3f}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    cfg_hash = cfg.hash()
    detector = harness.load_detector(cfg)
    scenes = _scenes(cfg, args.corpus, args.split)
    with output_lock(out):
        _guard_overwrite(out / "patch.json", cfg_hash, args.force)
        patch = attack.Patch.random(cfg.attack.patch_size, cfg.seeds.patch, cfg_hash)
        rounds = args.rounds if args.rounds is not None else cfg.attack.rounds

        def progress(rnd, row):
            if rnd % 10 == 0 or rnd == rounds - 1:
                print(
                    f"round {row['round']}: det2d {row['L_det2d']:.4f} "
                    f"det3d {row['L_det3d']:.4f} tv {row['L_tv']:.1f} total {row['total']:.4f}",
                    flush=True,
                )

        result = attack.train(patch, scenes, detector, cfg, rounds=rounds,
                              state_dir=out, progress=progress)
        with artifact(out / "trace.csv") as tmp:
            with open(tmp, "w", encoding="utf-8", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=attack.TRACE_FIELDS)
                writer.writeheader()
                writer.writerows(result.trace)
        attack.save_patch(result.patch, out, extra={
            "config_hash": cfg_hash,
            "rounds": rounds,
            "seeds": cfg.seeds.__dict__,
        })
        harness.save_config(cfg, out / "config.json")
    print(f"trained {rounds} rounds; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    cfg_hash = cfg.hash()
    detector = harness.load_detector(cfg)
    scenes = _scenes(cfg, args.corpus, args.split)
    with output_lock(out):
        _guard_overwrite(out / args.name, cfg_hash, args.force)
        if args.clean:
            samples = scenes
            mode = "clean"
        else:
            patch = _resolve_patch(args.patch, cfg)
            samples = attack.build_eval_samples(patch.texels, scenes, cfg)
            mode = args.patch
        report = metrics.evaluate_corpus(
            samples, detector, cfg.metrics.iou_thres, cfg.metrics.conf_thres
        )
        _write_report_json(out / args.name, report, cfg_hash, {"mode": mode})
        if args.dump_samples and not args.clean:
            dump_dir = out / "samples"
            dump_dir.mkdir(exist_ok=True)
            for i, (image, boxes) in enumerate(samples[: args.dump_samples]):
                from PIL import Image

                arr = (np.clip(image, 0, 1) * 255).round().astype(np.uint8)
                Image.fromarray(arr).save(dump_dir / f"sample_{i:03d}.png")
        if args.by_angle:
            rows = []
            for deg in range(0, 360, args.angle_step):
                az = np.deg2rad(deg)
                if az >= np.pi:
                    az -= 2 * np.pi
                patched = attack.build_eval_samples(patch.texels, scenes, cfg,
                                                    forced_azimuth=az)
                r = metrics.evaluate_corpus(patched, detector,
                                            cfg.metrics.iou_thres, cfg.metrics.conf_thres)
                rows.append({"angle_deg": deg, "asr": r.asr})
                print(f"angle {deg:3d}: ASR {r.asr:.3f}", flush=True)
            with artifact(out / "angle_asr.csv") as tmp:
                with open(tmp, "w", encoding="utf-8", newline="") as fh:
                    writer = csv.DictWriter(fh, fieldnames=("angle_deg", "asr"))
                    writer.writeheader()
                    writer.writerows(rows)
    print(f"ASR {report.asr:.3f} precision {report.precision:.3f} "
          f"recall {report.recall:.3f} f1 {report.f1:.3f} AC {report.avg_confidence:.3f}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    detector = harness.load_detector(cfg)
    scenes = _scenes(cfg, args.corpus, args.split)
    with output_lock(out):
        if args.clean:
            samples = scenes
        else:
            patch = _resolve_patch(args.patch, cfg)
            samples = attack.build_eval_samples(patch.texels, scenes, cfg)
        reports = metrics.sweep(samples, detector, cfg.metrics.iou_grid, cfg.metrics.conf_grid)
        with artifact(out / "sweep.csv") as tmp:
            metrics.sweep_to_csv(reports, tmp)
    print(f"wrote {len(reports)} grid cells to {out / 'sweep.csv'}")
    return 0


def cmd_occlusion(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    cfg_hash = cfg.hash()
    detector = harness.load_detector(cfg)
    scenes = _scenes(cfg, args.corpus, args.split)
    patch = _resolve_patch(args.patch, cfg)
    with output_lock(out):
        occluded = metrics.occlusion_protocol(
            patch, scenes, detector, cfg, cfg.metrics.iou_thres, cfg.metrics.conf_thres
        )
        baseline_samples = attack.build_eval_samples(patch.texels, scenes, cfg)
        baseline = metrics.evaluate_corpus(
            baseline_samples, detector, cfg.metrics.iou_thres, cfg.metrics.conf_thres
        )
        payload = {
            "config_hash": cfg_hash,
            "occluded": occluded.to_dict(),
            "unoccluded": baseline.to_dict(),
        }
        with artifact(out / "occlusion_report.json") as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
                fh.write("\n")
    print(f"occluded ASR {occluded.asr:.3f} vs unoccluded {baseline.asr:.3f}")
    return 0


def cmd_deform_demo(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    with output_lock(out):
        rng = np.random.default_rng(cfg.seeds.geometry)
        model = geometry.build_person(rng)
        stress = geometry.compute_vertex_stress(model.garment)
        candidates = geometry.select_high_stress(stress, cfg.geometry.sigma_thres)
        tps = geometry.TpsConfig(
            kernel=cfg.geometry.kernel, noise_scale=cfg.geometry.noise_scale,
            max_displacement=cfg.geometry.max_displacement,
            stress_gain=cfg.geometry.stress_gain, rng_seed=cfg.seeds.geometry,
        )
        deformed = geometry.deform_garment(
            model, cfg.geometry.sigma_thres, cfg.geometry.gamma, cfg.geometry.rho,
            cfg.geometry.n_min, tps, rng,
        )
        geometry.save_obj(model.garment, out / "garment_rest.obj")
        geometry.save_obj(deformed, out / "garment_deformed.obj")
        disp = np.linalg.norm(deformed.vertices - model.garment.vertices, axis=1)
        summary = {
            "vertices": int(model.garment.n_vertices),
            "high_stress_candidates": int(candidates.size),
            "max_displacement": float(disp.max()),
            "mean_displacement": float(disp.mean()),
        }
        with artifact(out / "deform_summary.json") as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
                fh.write("\n")
    print(json.dumps(summary))
    return 0


def cmd_relight_demo(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    with output_lock(out):
        rng = np.random.default_rng(cfg.seeds.scene)
        background = harness.make_background("mixed", rng, cfg.camera.image_size)
        model = geometry.build_person(rng)
        camera = cfg.camera_model()
        draw = scene.timespace_sample(background, rng, camera)
        params = scene.derive_render_params(draw.b_human, draw.v_orient, camera)
        rr = render.rasterize(model, None, params, cfg.camera.image_size,
                              camera=camera, box=draw.b_human)
        comp = scene.composite(rr.image, rr.mask, background)
        i_o = scene.crop(comp, draw.b_human)
        true_alpha, true_beta = 0.75, -0.08
        i_r = np.clip(true_alpha * i_o + true_beta, 0.0, 1.0)
        rcfg = scene.RelightParams(lr=cfg.relight.lr, iters=cfg.relight.iters)
        fit = scene.relight_optimize(i_o, i_r, rcfg)
        from PIL import Image

        for name, img in (("relight_input.png", i_o), ("relight_target.png", i_r),
                          ("relight_output.png", fit.image)):
            Image.fromarray((np.clip(img, 0, 1) * 255).round().astype(np.uint8)).save(out / name)
        summary = {
            "true": {"alpha": true_alpha, "beta": true_beta},
            "recovered": {"alpha": fit.alpha, "beta": fit.beta,
                          "theta": fit.theta.tolist()},
            "loss_initial": fit.loss_initial,
            "loss_final": fit.loss_final,
        }
        with artifact(out / "relight_summary.json") as tmp:
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
                fh.write("\n")
    print(f"recovered alpha {fit.alpha:.3f} (true {true_alpha}), "
          f"beta {fit.beta:.3f} (true {true_beta})")
    return 0


def cmd_report(args) -> int:
    cfg = _load_cfg(args)
    out = Path(cfg.output_dir)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    produced = []
    trace_path = out / "trace.csv"
    if trace_path.exists():
        rows = list(csv.DictReader(open(trace_path, encoding="utf-8")))
        rounds = [int(r["round"]) for r in rows]
        fig, ax = plt.subplots(figsize=(7, 4))
        for key in ("L_det2d", "L_det3d", "total"):
            ax.plot(rounds, [float(r[key]) for r in rows], label=key)
        ax.set_xlabel("round")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "loss_curves.png", dpi=120)
        plt.close(fig)
        produced.append("loss_curves.png")
    sweep_path = out / "sweep.csv"
    if sweep_path.exists():
        rows = list(csv.DictReader(open(sweep_path, encoding="utf-8")))
        fig, ax = plt.subplots(figsize=(7, 4))
        by_iou: dict[float, list[tuple[float, float]]] = {}
        for r in rows:
            by_iou.setdefault(float(r["iou_thres"]), []).append(
                (float(r["conf_thres"]), float(r["asr"]))
            )
        for iou_t, pts in sorted(by_iou.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o",
                    label=f"IoU={iou_t}")
        ax.set_xlabel("confidence threshold")
        ax.set_ylabel("ASR")
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "asr_vs_threshold.png", dpi=120)
        plt.close(fig)
        produced.append("asr_vs_threshold.png")
    angle_path = out / "angle_asr.csv"
    if angle_path.exists():
        rows = list(csv.DictReader(open(angle_path, encoding="utf-8")))
        ang = np.deg2rad([float(r["angle_deg"]) for r in rows])
        asr = [float(r["asr"]) for r in rows]
        fig = plt.figure(figsize=(5, 5))
        ax = fig.add_subplot(projection="polar")
        ax.plot(np.append(ang, ang[:1]), np.append(asr, asr[:1]), marker="o")
        ax.set_ylim(0, 1.0)
        fig.tight_layout()
        fig.savefig(out / "angle_polar.png", dpi=120)
        plt.close(fig)
        produced.append("angle_polar.png")
    if not produced:
        raise AdvRealError(f"no CSV inputs found under {out}")
    print("wrote " + ", ".join(produced))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advreal",
                                     description="Adversarial patch toolkit")
    parser.add_argument("--config", help="JSON run-config file")
    parser.add_argument("--output", help="output directory (overrides config)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic scene corpus")
    p.add_argument("--n-scenes", type=int)
    p.add_argument("--style", choices=["gradient", "noise", "tiled", "mixed"])
    p.add_argument("--out")
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("train-detector-fixture", help="train the bundled detector weights")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--max-iters", type=int, default=1200)
    p.add_argument("--target-recall", type=float, default=0.97)
    p.set_defaults(fn=cmd_train_detector_fixture)

    p = sub.add_parser("train", help="optimize an adversarial patch")
    p.add_argument("--corpus")
    p.add_argument("--split", default="train", choices=["train", "test", "all"])
    p.add_argument("--rounds", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a patch (or the clean corpus)")
    p.add_argument("--corpus")
    p.add_argument("--split", default="all", choices=["train", "test", "all"])
    p.add_argument("--patch", default="gray",
                   help="patch file (.png/.npz) or gray|white|noise")
    p.add_argument("--clean", action="store_true", help="evaluate the corpus as-is")
    p.add_argument("--name", default="eval_report.json")
    p.add_argument("--force", action="store_true")
    p.add_argument("--dump-samples", type=int, default=0)
    p.add_argument("--by-angle", action="store_true")
    p.add_argument("--angle-step", type=int, default=30)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="threshold-grid evaluation")
    p.add_argument("--corpus")
    p.add_argument("--split", default="all", choices=["train", "test", "all"])
    p.add_argument("--patch", default="gray")
    p.add_argument("--clean", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("occlusion", help="center-occlusion robustness protocol")
    p.add_argument("--corpus")
    p.add_argument("--split", default="all", choices=["train", "test", "all"])
    p.add_argument("--patch", required=True)
    p.set_defaults(fn=cmd_occlusion)

    p = sub.add_parser("deform-demo", help="garment deformation demo (writes OBJ)")
    p.set_defaults(fn=cmd_deform_demo)

    p = sub.add_parser("relight-demo", help="relighting recovery demo")
    p.set_defaults(fn=cmd_relight_demo)

    p = sub.add_parser("report", help="render plots from existing CSVs")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except AdvRealError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
