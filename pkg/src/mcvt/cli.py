"""Command-line front end.

Subcommands: run (pipeline), gen-scenario (simulator files), eval-sct /
eval-mct / eval-reid (scoring), losses-check (gradient self-test).  Exit
codes: 0 success, 2 configuration problems, 1 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import losses, metrics, pipeline, reid, simkit
from .errors import ConfigError, InvalidLayout, McvtError, SourceMissing


def _print_table(pairs) -> None:
    width = max(len(k) for k, _ in pairs)
    for key, value in pairs:
        print(f"{key:<{width}}  {value}")


def _cmd_run(args) -> int:
    if args.config:
        cfg = pipeline.PipelineConfig.from_file(args.config)
    elif args.scenario:
        cfg = pipeline.PipelineConfig(scenario_dir=args.scenario)
    else:
        raise ConfigError("run needs --config or --scenario")
    if args.out:
        cfg.out_dir = args.out
    if args.workers:
        cfg.workers = args.workers
    if args.real_time:
        cfg.real_time = True
    if args.seed is not None:
        if cfg.sim is None:
            raise ConfigError("--seed only applies to configs with an inline sim source")
        cfg.sim["seed"] = args.seed

    report = pipeline.run(cfg)
    _print_table(
        [
            ("frames", sum(report.frames.values())),
            ("dropped", sum(report.dropped.values())),
            ("concluded tracks", report.n_concluded),
            ("global identities", report.n_identities),
            ("latency p99 (ms)", f"{report.latency_p99_ms:.2f}"),
            ("wall time (s)", f"{report.wall_time_s:.2f}"),
        ]
    )
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _cmd_gen_scenario(args) -> int:
    try:
        scenario, gt = simkit.gen_scenario(
            seed=args.seed,
            n_cams=args.cams,
            n_vehicles=args.vehicles,
            duration_s=args.duration,
            fps=args.fps,
            layout=args.layout,
            embed_dim=args.dim,
        )
        profile = simkit.NoiseProfile(
            box_jitter_std=args.jitter,
            miss_rate=args.miss,
            false_positive_rate=args.fp_rate,
            embedding_noise_std=args.sigma,
        )
    except (ValueError, InvalidLayout) as exc:
        raise ConfigError(str(exc)) from exc
    streams = simkit.render_detections(scenario, gt, profile)
    simkit.write_scenario_dir(scenario, gt, streams, args.out)
    n_boxes = sum(
        len(entries) for cam in gt.boxes.values() for entries in cam.values()
    )
    _print_table(
        [
            ("cameras", len(scenario.camera_ids)),
            ("vehicles", len(scenario.vehicles)),
            ("frames per camera", scenario.n_frames),
            ("ground-truth boxes", n_boxes),
            ("output", args.out),
        ]
    )
    return 0


def _cmd_eval_sct(args) -> int:
    gt = metrics.load_mot_trajectories(args.gt, camera=args.camera)
    pred = metrics.load_mot_trajectories(args.pred, camera=args.camera)
    summary = metrics.evaluate_mota(gt, pred)
    _print_summary(summary)
    return 0


def _cmd_eval_mct(args) -> int:
    scenario, _ = simkit.load_scenario_dir(args.scenario)
    gt = simkit.load_ground_truth(args.scenario, scenario)
    pred = metrics.load_global_trajectories(args.pred)
    summary = metrics.evaluate_mota(gt, pred)
    _print_summary(summary)
    return 0


def _print_summary(summary: metrics.MotSummary) -> None:
    _print_table(
        [
            ("IDP", f"{summary.idp:.4f}"),
            ("IDR", f"{summary.idr:.4f}"),
            ("IDF1", f"{summary.idf1:.4f}"),
            ("MOTA", f"{summary.mota:.4f}"),
            ("FP", summary.fp),
            ("FN", summary.fn),
            ("ID switches", summary.id_switches),
            ("GT boxes", summary.num_gt),
        ]
    )
    print(
        json.dumps(
            {
                "idp": summary.idp,
                "idr": summary.idr,
                "idf1": summary.idf1,
                "mota": summary.mota,
                "fp": summary.fp,
                "fn": summary.fn,
                "id_switches": summary.id_switches,
                "num_gt": summary.num_gt,
            },
            sort_keys=True,
        )
    )


def _read_labels(path):
    labels = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            identity, camera = line.split(",")[:2]
            labels.append((int(identity), camera))
    return labels


def _cmd_eval_reid(args) -> int:
    query = reid.read_embeddings(args.query)
    gallery = reid.read_embeddings(args.gallery)
    q_labels = _read_labels(args.query_labels)
    g_labels = _read_labels(args.gallery_labels)
    if args.rerank:
        dist = reid.k_reciprocal_rerank(
            query, gallery, k1=args.k1, k2=args.k2, lambda_r=args.lambda_r
        )
    else:
        dist = np.linalg.norm(query[:, None, :] - gallery[None, :, :], axis=2)
    mean_ap, cmc1, cmc5 = reid.eval_track_reid(q_labels, g_labels, dist)
    _print_table(
        [("mAP", f"{mean_ap:.4f}"), ("CMC@1", f"{cmc1:.4f}"), ("CMC@5", f"{cmc5:.4f}")]
    )
    print(json.dumps({"mAP": mean_ap, "cmc1": cmc1, "cmc5": cmc5}, sort_keys=True))
    return 0


def _central_difference(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return grad


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(1.0, float(np.linalg.norm(numeric)))
    return float(np.linalg.norm(analytic - numeric)) / denom


def _cmd_losses_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst_triplet = worst_ce = 0.0
    for _ in range(args.trials):
        feats = rng.normal(size=(8, 4))
        ids = np.repeat(np.arange(4), 2)
        _, grad = losses.batch_hard_triplet_with_grad(feats, ids, margin=0.3)
        fd = _central_difference(lambda: losses.batch_hard_triplet(feats, ids, 0.3), feats)
        worst_triplet = max(worst_triplet, _rel_err(grad, fd))

        n, d, c = 6, 3, 4
        feats = rng.normal(size=(n, d))
        weight = rng.normal(size=(c, d))
        bias = rng.normal(size=c)
        targets = np.stack(
            [losses.smooth_targets(int(rng.integers(c)), c, 0.1) for _ in range(n)]
        )
        _, dfeat, dw, db = losses.smoothed_cross_entropy_with_grad(feats, targets, weight, bias)
        loss_fn = lambda: losses.smoothed_cross_entropy(feats, targets, weight, bias)  # noqa: E731
        err = max(
            _rel_err(dfeat, _central_difference(loss_fn, feats)),
            _rel_err(dw, _central_difference(loss_fn, weight)),
            _rel_err(db, _central_difference(loss_fn, bias)),
        )
        worst_ce = max(worst_ce, err)

    schedule_ok = (
        losses.excitation_schedule(0, 10) == 1.0
        and losses.excitation_schedule(5, 10) == 0.5
        and losses.excitation_schedule(10, 10) == 0.0
    )
    ok_triplet = worst_triplet <= 1e-5
    ok_ce = worst_ce <= 1e-5
    print(f"triplet gradient   {'PASS' if ok_triplet else 'FAIL'} (max rel err {worst_triplet:.2e})")
    print(f"cross entropy grad {'PASS' if ok_ce else 'FAIL'} (max rel err {worst_ce:.2e})")
    print(f"excitation anchors {'PASS' if schedule_ok else 'FAIL'} (1.0 / 0.5 / 0.0)")
    return 0 if ok_triplet and ok_ce and schedule_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcvt", description="Multi-camera vehicle tracking toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the tracking pipeline")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--scenario", help="scenario directory (shortcut for a default config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--workers", type=int, default=0)
    p.add_argument("--real-time", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=_cmd_run)

    p = sub.add_parser("gen-scenario", help="generate a synthetic scenario directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--cams", type=int, default=6)
    p.add_argument("--vehicles", type=int, default=20)
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--fps", type=float, default=10.0)
    p.add_argument("--layout", default="corridor", choices=["corridor", "grid"])
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--jitter", type=float, default=0.0, help="box jitter std (px)")
    p.add_argument("--miss", type=float, default=0.0, help="miss rate")
    p.add_argument("--fp-rate", type=float, default=0.0, help="false positives per frame")
    p.add_argument("--sigma", type=float, default=0.0, help="embedding noise std")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_gen_scenario)

    p = sub.add_parser("eval-sct", help="score one camera's tracks against GT")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--camera", default="")
    p.set_defaults(handler=_cmd_eval_sct)

    p = sub.add_parser("eval-mct", help="score global tracks against scenario GT")
    p.add_argument("--scenario", required=True)
    p.add_argument("--pred", required=True)
    p.set_defaults(handler=_cmd_eval_mct)

    p = sub.add_parser("eval-reid", help="track re-id scores from embedding files")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--query-labels", required=True)
    p.add_argument("--gallery-labels", required=True)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lambda-r", type=float, default=0.3)
    p.set_defaults(handler=_cmd_eval_reid)

    p = sub.add_parser("losses-check", help="finite-difference check of the loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=10)
    p.set_defaults(handler=_cmd_losses_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, SourceMissing) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except McvtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
