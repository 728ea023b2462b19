"""Command-line surface: synth, train, infer, eval.

Every run with identical seed, config and inputs produces byte-identical
artifacts. Reports are line-oriented `key = value`; figures are rendered
next to the delimited outputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np


def _say_factory(quiet: bool):
    if quiet:
        return lambda msg: None
    return lambda msg: print(msg, flush=True)


def _limit_threads(n: int | None) -> None:
    if n is None:
        return
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(limits=n)
    except Exception:
        import os

        os.environ.setdefault("OMP_NUM_THREADS", str(n))


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=42, help="run seed (default 42)")
    p.add_argument("--threads", type=int, default=None, help="worker thread cap")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")


def cmd_synth(args) -> int:
    from .config import RunConfig, load_config
    from .cube import write_cube, write_labels
    from .render import render_label_map, save_label_figure
    from .synth import SceneSpec, synth_scene

    cfg = load_config(args.config) if args.config else RunConfig()
    spec = SceneSpec(
        height=cfg.synth_height,
        width=cfg.synth_width,
        bands=cfg.synth_bands,
        num_classes=cfg.synth_classes,
        blob_count=cfg.synth_blobs,
        noise_sigma=cfg.synth_noise,
        seed=args.seed,
    )
    cube, truth = synth_scene(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cube(cube, out / "scene.hsc")
    write_labels(truth, out / "truth.lbl")
    render_label_map(truth, out / "truth.ppm")
    save_label_figure(truth, out / "truth.png", "ground truth")
    say = _say_factory(args.quiet)
    say(f"scene {spec.height}x{spec.width}x{spec.bands} with {spec.num_classes} "
        f"classes written to {out}")
    return 0


def cmd_train(args) -> int:
    from .config import RunConfig, load_config
    from .cube import read_cube, read_labels
    from .workflow import train_pipeline

    cfg = load_config(args.config) if args.config else RunConfig()
    cube = read_cube(args.cube)
    truth = read_labels(args.labels)
    say = _say_factory(args.quiet)
    out = Path(args.out)
    if args.repeat <= 1:
        train_pipeline(cube, truth, cfg, args.seed, out, say)
    else:
        for i in range(args.repeat):
            say(f"== repeat {i} (seed {args.seed + i})")
            train_pipeline(cube, truth, cfg, args.seed + i, out / f"run_{i:03d}", say)
    return 0


def _model_dirs(model_root: Path) -> list[Path]:
    if (model_root / "model.cfg").exists():
        return [model_root]
    if (model_root / "model" / "model.cfg").exists():
        return [model_root / "model"]
    runs = sorted(model_root.glob("run_*/model"))
    if runs:
        return runs
    raise FileNotFoundError(f"no model.cfg under {model_root}")


def cmd_infer(args) -> int:
    from .cube import read_cube
    from .workflow import infer_pipeline, load_model

    cube = read_cube(args.cube)
    say = _say_factory(args.quiet)
    dirs = _model_dirs(Path(args.model))
    out = Path(args.out)
    if len(dirs) == 1:
        infer_pipeline(cube, load_model(dirs[0]), out, say)
    else:
        cls_paths, seg_paths = [], []
        for i, d in enumerate(dirs):
            run_out = out / f"run_{i:03d}"
            infer_pipeline(cube, load_model(d), run_out, say)
            cls_paths.append(run_out / "classification.lbl")
            seg_paths.append(run_out / "segmentation.lbl")
        (out / "classification.lst").write_text(
            "".join(f"{p}\n" for p in cls_paths)
        )
        (out / "segmentation.lst").write_text(
            "".join(f"{p}\n" for p in seg_paths)
        )
    say(f"predictions written to {out}")
    return 0


def _load_prediction_set(path: Path):
    from .cube import read_labels

    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"LBL1":
        return [read_labels(path)]
    base = path.parent
    maps = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        p = Path(line)
        maps.append(read_labels(p if p.is_absolute() else base / p))
    if not maps:
        raise ValueError(f"manifest {path} lists no prediction files")
    return maps


def cmd_eval(args) -> int:
    from .cube import read_labels
    from .metrics import aggregate_runs, compute_metrics, error_map, paired_t_test

    truth = read_labels(args.truth)
    preds = _load_prediction_set(Path(args.pred))
    reports = [compute_metrics(p, truth) for p in preds]
    report = reports[0] if len(reports) == 1 else aggregate_runs(reports)
    lines = report.lines()
    if args.pred_b:
        preds_b = _load_prediction_set(Path(args.pred_b))
        reports_b = [compute_metrics(p, truth) for p in preds_b]
        t, p, sig = paired_t_test(
            [r.oa for r in reports], [r.oa for r in reports_b]
        )
        rb = reports_b[0] if len(reports_b) == 1 else aggregate_runs(reports_b)
        lines.append(f"OA_b = {rb.oa:.2f}")
        lines.append(f"t = {t:.6g}")
        lines.append(f"p = {p:.6g}")
        lines.append(f"significant_at_95 = {str(sig).lower()}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        from .render import render_error_map, save_error_figure, save_metrics_figure

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.txt").write_text(text)
        err = error_map(preds[0], truth)
        render_error_map(err, out / "error_map.ppm")
        save_error_figure(err, out / "error_map.png", "misclassified pixels")
        save_metrics_figure(report, out / "metrics.png", "accuracy report")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypercrf",
        description="hyperspectral segmentation: band-group 3D CNNs + deep CRF",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train band-group CNNs and the deep CRF")
    p.add_argument("--cube", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--repeat", type=int, default=1,
                   help="train N models under independent seeds")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="classify and segment a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="accuracy report (and paired t-test)")
    p.add_argument("--pred", required=True, help="LBL file or manifest of runs")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred-b", default=None, help="second prediction set to compare")
    p.add_argument("--out", default=None, help="write report, error map and figures here")
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _limit_threads(args.threads)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # single-line machine-parseable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
