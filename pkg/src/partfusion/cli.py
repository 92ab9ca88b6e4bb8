"""Command-line orchestration: dataset generation, training, inference,
evaluation, ablation sweeps, gradient checking and PLY export.

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Every
command is deterministic given its configuration and seed.
"""

from __future__ import annotations

import argparse
import colorsys
import os
import sys

import numpy as np

from .clustering import ClusterParams, cluster_instances
from .config import ConfigError, RunConfig, load_config
from .metrics import evaluate_dataset, render_summary, render_tsv
from .network import (
    FUSION_MODES,
    DivergenceError,
    ModelConfig,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    loss_offset,
    save_checkpoint,
    train,
)
from .shape_io import (
    PlsParseError,
    read_dataset_manifest,
    read_pls,
    read_plp,
    write_dataset_manifest,
    write_pls,
    write_plp,
)
from .shapes import AugmentParams, LabeledShape, ShapeSpec, generate_shape

ABLATION_BANDWIDTHS = (0.05, 0.10, 0.20)
ABLATION_PUSH_SCALES = (0.025, 0.050, 0.075)


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _shape_spec(cfg: RunConfig) -> ShapeSpec:
    return ShapeSpec(family=cfg.family, parts=cfg.parts, jitter=cfg.jitter,
                     points=cfg.points).validate()


def _model_config(cfg: RunConfig, class_counts) -> ModelConfig:
    return ModelConfig(
        feature_dim=cfg.feature_dim,
        class_counts=tuple(class_counts),
        head_hidden=cfg.head_hidden,
        fusion=cfg.fusion,
        one_hot=cfg.one_hot,
        stop_grad=cfg.stop_grad,
        two_dir=cfg.two_dir,
        learning_rate=cfg.learning_rate,
        iterations=cfg.iterations,
        decay_factor=cfg.decay_factor,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        log_every=cfg.log_every,
    ).validate()


def _cluster_params(cfg: RunConfig) -> ClusterParams:
    return ClusterParams(
        bandwidth=cfg.bandwidth, push_scale=cfg.push_scale, epsilon=cfg.epsilon,
        max_iter=cfg.cluster_max_iter, tol=cfg.cluster_tol,
    ).validate()


def _load_split(data_dir: str, split: str) -> tuple[list[str], list[LabeledShape]]:
    directory = os.path.join(data_dir, split)
    names = read_dataset_manifest(directory)
    shapes = [read_pls(os.path.join(directory, name)) for name in names]
    return names, shapes


def _write_kv(path, pairs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, value in pairs:
            fh.write(f"{key}={value!r}\n" if isinstance(value, float)
                     else f"{key}={value}\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    spec = _shape_spec(cfg)
    for split, count, base in (("train", cfg.train_shapes, 0),
                               ("test", cfg.test_shapes, 500_000)):
        directory = os.path.join(cfg.data_dir, split)
        os.makedirs(directory, exist_ok=True)
        names = []
        for i in range(count):
            shape = generate_shape(spec, cfg.seed * 1_000_000 + base + i,
                                   k_levels=cfg.levels)
            name = f"{cfg.family}_{split}_{i:04d}.pls"
            write_pls(shape, os.path.join(directory, name))
            names.append(name)
        write_dataset_manifest(directory, names)
        print(f"wrote {count} shapes to {directory}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    _, shapes = _load_split(cfg.data_dir, "train")
    model_cfg = _model_config(cfg, shapes[0].class_counts)
    aug = AugmentParams() if cfg.augment else None
    params, log = train(shapes, model_cfg, aug)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt = os.path.join(cfg.out_dir, "model.ckpt")
    save_checkpoint(ckpt, model_cfg, params)
    with open(os.path.join(cfg.out_dir, "train_log.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        for it, loss in log:
            fh.write(f"iter={it} loss={loss!r}\n")
    print(f"trained {model_cfg.fusion} model -> {ckpt}")
    if log:
        print(f"loss {log[0][1]:.4f} -> {log[-1][1]:.4f}")
    return 0


def cmd_infer(cfg: RunConfig, checkpoint: str | None = None,
              split: str = "test") -> int:
    ckpt = checkpoint or os.path.join(cfg.out_dir, "model.ckpt")
    model_cfg, params = load_checkpoint(ckpt)
    names, shapes = _load_split(cfg.data_dir, split)
    cp = _cluster_params(cfg)
    pred_dir = os.path.join(cfg.out_dir, "predictions")
    os.makedirs(pred_dir, exist_ok=True)
    level_errors = [[] for _ in range(model_cfg.n_levels)]
    for name, shape in zip(names, shapes):
        out = forward(params, shape.points, model_cfg)
        pred = cluster_instances(shape.points, out.p_sem_values(),
                                 out.o_i_values(), out.o_s_values(), cp)
        write_plp(shape.points, pred, shape.class_counts,
                  os.path.join(pred_dir, name[:-4] + ".plp"))
        for k, lv in enumerate(shape.levels):
            level_errors[k].append(loss_offset(out.o_i[k].value, lv.inst_offset))
    pairs = [(f"level{k + 1}.offset_error", float(np.mean(errs)))
             for k, errs in enumerate(level_errors)]
    pairs.append(("overall.offset_error",
                  float(np.mean([np.mean(e) for e in level_errors]))))
    pairs.append(("count", len(names)))
    _write_kv(os.path.join(cfg.out_dir, "offsets.txt"), pairs)
    print(f"wrote {len(names)} predictions to {pred_dir}")
    return 0


def cmd_eval(cfg: RunConfig, pred_dir: str | None = None,
             split: str = "test") -> int:
    pred_dir = pred_dir or os.path.join(cfg.out_dir, "predictions")
    names, shapes = _load_split(cfg.data_dir, split)
    predictions = []
    for name, shape in zip(names, shapes):
        _, _, pred = read_plp(os.path.join(pred_dir, name[:-4] + ".plp"))
        if pred.n_levels != shape.n_levels:
            raise ValueError(f"{name}: prediction has {pred.n_levels} levels, "
                             f"shape has {shape.n_levels}")
        predictions.append(pred)
    report = evaluate_dataset(shapes, predictions)
    os.makedirs(cfg.out_dir, exist_ok=True)
    with open(os.path.join(cfg.out_dir, "metrics.tsv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(render_tsv(report))
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(render_summary(report))
    print(f"ap50 per level: "
          + " ".join(f"{lv.ap_mean[0.50]:.3f}" for lv in report.levels))
    return 0


def _ablation_cache_key(mode: str, stop_grad: bool, one_hot: bool):
    # Without fusion the two flags do not touch the graph; share the cell.
    if mode == "none":
        return (mode, True, False)
    return (mode, stop_grad, one_hot)


def cmd_ablate(cfg: RunConfig) -> int:
    _, train_set = _load_split(cfg.data_dir, "train")
    _, test_set = _load_split(cfg.data_dir, "test")
    aug = AugmentParams() if cfg.augment else None
    trained = {}
    forwards = {}
    rows = []
    for mode in FUSION_MODES:
        for stop_grad in (True, False):
            for one_hot in (False, True):
                key = _ablation_cache_key(mode, stop_grad, one_hot)
                if key not in trained:
                    model_cfg = _model_config(cfg, train_set[0].class_counts)
                    model_cfg.fusion, model_cfg.stop_grad, model_cfg.one_hot = key
                    params, _ = train(train_set, model_cfg, aug)
                    trained[key] = (model_cfg, params)
                    forwards[key] = [forward(params, s.points, model_cfg)
                                     for s in test_set]
                model_cfg, params = trained[key]
                outs = forwards[key]
                offset_err = float(np.mean([
                    loss_offset(out.o_i[k].value, shape.levels[k].inst_offset)
                    for out, shape in zip(outs, test_set)
                    for k in range(shape.n_levels)
                ]))
                for bandwidth in ABLATION_BANDWIDTHS:
                    for push_scale in ABLATION_PUSH_SCALES:
                        cp = ClusterParams(
                            bandwidth=bandwidth, push_scale=push_scale,
                            epsilon=cfg.epsilon, max_iter=cfg.cluster_max_iter,
                            tol=cfg.cluster_tol)
                        preds = [cluster_instances(
                            shape.points, out.p_sem_values(),
                            out.o_i_values(), out.o_s_values(), cp)
                            for shape, out in zip(test_set, outs)]
                        report = evaluate_dataset(test_set, preds)
                        rows.append((
                            mode, stop_grad, one_hot, bandwidth, push_scale,
                            report.overall(0.25), report.overall(0.50),
                            report.overall(0.75),
                            float(np.mean([lv.s_ap50 for lv in report.levels])),
                            float(np.mean([lv.miou for lv in report.levels])),
                            offset_err,
                        ))
    os.makedirs(cfg.out_dir, exist_ok=True)
    path = os.path.join(cfg.out_dir, "ablation.tsv")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fusion\tstop_grad\tone_hot\tbandwidth\tpush_scale"
                 "\tap25\tap50\tap75\ts_ap50\tmiou\toffset_error\n")
        for row in rows:
            fh.write("\t".join(
                repr(v) if isinstance(v, float) else str(v).lower()
                if isinstance(v, bool) else str(v)
                for v in row) + "\n")
    print(f"wrote {len(rows)} ablation rows to {path}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    spec = ShapeSpec(family=cfg.family, parts=max(2, min(cfg.parts, 3)),
                     jitter=cfg.jitter, points=64).validate()
    shape = generate_shape(spec, cfg.seed, k_levels=cfg.levels)
    keep = np.arange(0, shape.n_points, 2)[:32]
    small = LabeledShape(
        shape.points[keep], shape.class_counts,
        [type(lv)(lv.sem[keep], lv.inst[keep], lv.inst_offset[keep],
                  lv.region_offset[keep]) for lv in shape.levels],
    )
    ok = True
    for mode in FUSION_MODES:
        model_cfg = _model_config(cfg, small.class_counts)
        model_cfg.fusion = mode
        # Stop-gradient is value-transparent, so finite differences would
        # include the blocked path; disable it for the comparison.
        model_cfg.stop_grad = False
        params = init_params(model_cfg)
        checked, failed, max_rel = gradient_check(
            params, small, model_cfg, sample_fraction=0.01, seed=cfg.seed)
        status = "pass" if failed == 0 else "FAIL"
        print(f"{mode:>6}: {status} checked {checked} entries, "
              f"{failed} failures, max rel err {max_rel:.2e}")
        ok = ok and failed == 0
    return 0 if ok else 3


def instance_color(instance_id: int) -> tuple[int, int, int]:
    """Stable color from a fixed golden-ratio hue hash of the id."""
    hue = (instance_id * 0.6180339887498949) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def cmd_export_ply(input_path: str, output_path: str, level: int = 0) -> int:
    """Write an ASCII PLY colored by instance id; level 0 means the finest."""
    if input_path.endswith(".plp"):
        points, _, pred = read_plp(input_path)
        n_levels = pred.n_levels
        lv = pred.levels[(level - 1) if level else n_levels - 1]
        inst = lv.point_inst
    else:
        shape = read_pls(input_path)
        n_levels = shape.n_levels
        inst = shape.levels[(level - 1) if level else n_levels - 1].inst
        points = shape.points
    if level and not (1 <= level <= n_levels):
        raise ValueError(f"level {level} outside 1..{n_levels}")
    colors = np.array([instance_color(int(i)) for i in inst], dtype=np.int64)
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {points.shape[0]}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        "end_header",
    ]
    for p, c in zip(points, colors):
        lines.append(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}")
    with open(output_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote {points.shape[0]} colored points to {output_path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(sub):
    sub.add_argument("--config", help="key=value configuration file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a single config key (repeatable)")
    sub.add_argument("--fusion", choices=FUSION_MODES,
                     help="fusion mode shortcut")
    sub.add_argument("--one-hot", action="store_true",
                     help="use one-hot projected probabilities in the fusion")
    sub.add_argument("--no-stop-grad", action="store_true",
                     help="let fusion gradients reach the semantic branch")


def _config_from_args(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "fusion", None):
        overrides.append(f"fusion={args.fusion}")
    if getattr(args, "one_hot", False):
        overrides.append("one_hot=true")
    if getattr(args, "no_stop_grad", False):
        overrides.append("stop_grad=false")
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partfusion",
        description="Multi-level part instance segmentation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("gen-data", "generate a synthetic train/test dataset"),
        ("train", "train a model on the generated dataset"),
        ("ablate", "sweep fusion mode, flags, bandwidth and push scale"),
        ("gradcheck", "finite-difference check per fusion mode"),
    ):
        s = sub.add_parser(name, help=help_text)
        _add_config_args(s)

    s = sub.add_parser("infer", help="write .plp predictions for a split")
    _add_config_args(s)
    s.add_argument("--checkpoint", help="checkpoint path (default out_dir/model.ckpt)")
    s.add_argument("--split", default="test", choices=("train", "test"))

    s = sub.add_parser("eval", help="score predictions against ground truth")
    _add_config_args(s)
    s.add_argument("--pred-dir", help="predictions directory (default out_dir/predictions)")
    s.add_argument("--split", default="test", choices=("train", "test"))

    s = sub.add_parser("export-ply", help="export a colored point cloud")
    s.add_argument("--input", required=True, help=".pls or .plp file")
    s.add_argument("--out", required=True, help="output .ply path")
    s.add_argument("--level", type=int, default=0,
                   help="hierarchy level (default: finest)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "export-ply":
            return cmd_export_ply(args.input, args.out, args.level)
        cfg = _config_from_args(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "infer":
            return cmd_infer(cfg, args.checkpoint, args.split)
        if args.command == "eval":
            return cmd_eval(cfg, args.pred_dir, args.split)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        parser.error(f"unknown command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, PlsParseError, DivergenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
