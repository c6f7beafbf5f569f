"""Command-line entry point: one executable for the whole pipeline.

Subcommands: gen-data, train, eval, infer, ablate-order, ablate-metric,
check-grad. Machine-readable results go to standard output as JSON;
progress and diagnostics go to standard error. Exit codes: 0 success,
2 configuration, 3 file or dataset I/O, 4 non-finite loss, 5 checkpoint
incompatibility, 6 failed gradient verification.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .backbone import GridConfig
from .config import RunConfig, apply_seed_override
from .errors import (
    CompatibilityError,
    ConfigError,
    DatasetError,
    GenerationError,
    NonFiniteLossError,
)
from .evaluation import evaluate, filter_predictions
from .matching import SimilarityMetric, match
from .model import DetectionModel
from .numerics import grad_check, save_checkpoint
from .scenegen import generate_scene, read_dataset, read_scene, write_dataset
from .training import fit, gt_sequences, total_loss
from .words import ABLATION_ORDERS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPAT = 5
EXIT_VERIFY = 6

GRAD_TOLERANCE = 1e-4
CONFIG_COPY = "config.json"
CHECKPOINT_NAME = "model.p2sq"
METRICS_NAME = "metrics.jsonl"


def _emit(doc):
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _note(msg: str):
    print(msg, file=sys.stderr)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.default()
    return apply_seed_override(cfg)


def _config_for_checkpoint(args) -> RunConfig:
    if args.config:
        return apply_seed_override(RunConfig.load(args.config))
    sibling = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                           CONFIG_COPY)
    if not os.path.exists(sibling):
        raise ConfigError(
            f"no --config given and no {CONFIG_COPY} next to {args.checkpoint}")
    return apply_seed_override(RunConfig.load(sibling))


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.count < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    index = write_dataset(args.out, cfg.scenegen, args.count)
    _note(f"wrote {args.count} scenes to {args.out}")
    _emit({"directory": args.out, "scene_count": index["scene_count"],
           "classes": cfg.scenegen.class_names()})
    return EXIT_OK


def _progress_printer(total_steps):
    def report(row):
        _note(f"step {row['step']}/{total_steps}  loss {row['loss_total']:.4f}  "
              f"cls {row['loss_cls']:.4f}  reg {row['loss_reg']:.4f}  "
              f"lr {row['lr']:.2e}")
    return report


def cmd_train(args) -> int:
    cfg = _load_config(args)
    ds_cfg, scenes = read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, CONFIG_COPY))
    checkpoint = os.path.join(args.out, CHECKPOINT_NAME)
    metrics = os.path.join(args.out, METRICS_NAME)

    model = DetectionModel(cfg.grid, ds_cfg.n_classes, order=cfg.order,
                           seed=cfg.train.seed)
    start_step = 0
    if args.resume:
        model.load(checkpoint)
        start_step = model.store.step_count
        _note(f"resumed from {checkpoint} at step {start_step}")
    else:
        save_checkpoint(model.store, checkpoint)

    train_cfg = dataclasses.replace(cfg.train, dataset=args.data)
    steps_per_epoch = -(-len(scenes) // train_cfg.batch_size)
    planned = start_step + train_cfg.epochs * steps_per_epoch
    rows = fit(model, scenes, train_cfg, cfg.loss, metric=cfg.metric,
               metrics_path=metrics, checkpoint_path=checkpoint,
               start_step=start_step, progress=_progress_printer(planned))
    if rows:
        save_checkpoint(model.store, checkpoint)
    _emit({
        "steps": len(rows),
        "start_step": start_step,
        "final": rows[-1] if rows else None,
        "checkpoint": checkpoint,
        "metrics": metrics,
        "config": os.path.join(args.out, CONFIG_COPY),
    })
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config_for_checkpoint(args)
    ds_cfg, scenes = read_dataset(args.data)
    model = DetectionModel(cfg.grid, ds_cfg.n_classes, order=cfg.order)
    model.load(args.checkpoint)
    report = evaluate(model, scenes, ds_cfg.class_names(), cfg.eval_iou,
                      score_threshold=cfg.score_threshold)
    _emit(report.to_dict())
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config_for_checkpoint(args)
    scene = read_scene(args.scene)
    names = cfg.class_names()
    model = DetectionModel(cfg.grid, cfg.n_classes, order=cfg.order)
    model.load(args.checkpoint)
    dets = filter_predictions(model.forward(scene), cfg.score_threshold)
    _emit([
        {"x": d.box.x, "y": d.box.y, "z": d.box.z,
         "l": d.box.l, "w": d.box.w, "h": d.box.h,
         "theta": d.box.theta, "class": names[d.class_id], "score": d.score}
        for d in dets
    ])
    return EXIT_OK


def _train_and_score(cfg: RunConfig, train_scenes, val_scenes, ds_cfg,
                     metric: SimilarityMetric, order) -> float:
    model = DetectionModel(cfg.grid, ds_cfg.n_classes, order=order,
                           seed=cfg.train.seed)
    fit(model, train_scenes, cfg.train, cfg.loss, metric=metric)
    report = evaluate(model, val_scenes, ds_cfg.class_names(), cfg.eval_iou,
                      score_threshold=cfg.score_threshold)
    return report.mean_ap


def _ablation_table(rows, key) -> str:
    width = max(len(str(r[key])) for r in rows)
    lines = []
    for r in rows:
        shown = "n/a" if r["map"] is None else f"{r['map']:.4f}"
        lines.append(f"{str(r[key]).ljust(width)}  mAP {shown}")
    return "\n".join(lines)


def cmd_ablate_order(args) -> int:
    cfg = _load_config(args)
    ds_cfg, train_scenes = read_dataset(args.data)
    _, val_scenes = read_dataset(args.val_data) if args.val_data else (ds_cfg, train_scenes)
    rows = []
    for order in ABLATION_ORDERS:
        _note(f"training word order {order}")
        m = _train_and_score(cfg, train_scenes, val_scenes, ds_cfg,
                             cfg.metric, order)
        rows.append({"order": str(order), "map": m})
    _note(_ablation_table(rows, "order"))
    _emit({"rows": rows})
    return EXIT_OK


def cmd_ablate_metric(args) -> int:
    cfg = _load_config(args)
    ds_cfg, train_scenes = read_dataset(args.data)
    _, val_scenes = read_dataset(args.val_data) if args.val_data else (ds_cfg, train_scenes)
    rows = []
    for variant in ("word_distance", "corner_distance", "iou3d"):
        _note(f"training similarity variant {variant}")
        metric = dataclasses.replace(cfg.metric, variant=variant)
        m = _train_and_score(cfg, train_scenes, val_scenes, ds_cfg,
                             metric, cfg.order)
        rows.append({"metric": variant, "map": m})
    _note(_ablation_table(rows, "metric"))
    _emit({"rows": rows})
    return EXIT_OK


def _toy_grad_setup(cfg: RunConfig):
    """A small but complete model + frozen loss objective for check-grad.

    The sampler coordinates, the matching decision, and the scene are all
    frozen so the objective is deterministic and differentiable; the check
    covers the backbone, every decoder head, and every aggregation step
    through the full training loss.
    """
    grid = GridConfig(extent=((-3.2, 3.2), (-3.2, 3.2)), h=8, w=8, cell=0.8, c=16)
    toy_scenegen = dataclasses.replace(
        cfg.scenegen,
        extent=((-3.2, 3.2), (-3.2, 3.2), cfg.scenegen.extent[2]),
        classes=tuple(
            dataclasses.replace(
                spec,
                size_mean=tuple(min(m, 2.2) for m in spec.size_mean),
                size_sigma=tuple(0.1 * m for m in spec.size_mean),
            )
            for spec in cfg.scenegen.classes
        ),
        objects_per_scene=(1, 2),
        points_per_object=(40, 80),
        clutter_points=10,
    )
    scene = generate_scene(toy_scenegen, 0)
    model = DetectionModel(grid, toy_scenegen.n_classes, order=cfg.order,
                           seed=cfg.train.seed)
    preds = model.forward(scene)
    frozen_points = preds.sample_points
    gts = gt_sequences(scene, toy_scenegen.n_classes)
    result = match(preds, gts, cfg.metric)

    def objective():
        replay = model.forward(scene, forced_sample_points=frozen_points)
        return total_loss(replay, gts, result, cfg.loss)

    return model, objective


def cmd_check_grad(args) -> int:
    cfg = _load_config(args)
    model, objective = _toy_grad_setup(cfg)
    _note("running central-difference verification over "
          f"{sum(model.store.params[k].data.size for k in model.store.names())} "
          "parameters")
    worst, per_param = grad_check(model.store, objective, eps=1e-5)
    groups = {}
    for group, names in model.param_groups().items():
        groups[group] = max(per_param[name] for name in names)
    worst_name = max(per_param, key=per_param.get)
    ok = all(v < GRAD_TOLERANCE for v in groups.values())
    _emit({
        "groups": groups,
        "eps": 1e-5,
        "tolerance": GRAD_TOLERANCE,
        "worst_parameter": worst_name,
        "worst_error": worst,
        "pass": ok,
    })
    if not ok:
        _note(f"gradient check FAILED: {worst_name} at {worst:.3e}")
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seqdet3d",
        description="Sequence-decoding 3D detector: data, training, "
                    "evaluation, inference, and verification.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None,
                        help="run config JSON (defaults to the stock config)")
    common.add_argument("--threads", type=int, default=1,
                        help="worker cap; computation is sequential, so this "
                             "only bounds future parallel sections")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="fit a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the run directory's checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common],
                       help="detect objects in one scene file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate-order", parents=[common],
                       help="train one model per word order")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.set_defaults(func=cmd_ablate_order)

    p = sub.add_parser("ablate-metric", parents=[common],
                       help="train one model per similarity variant")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None)
    p.set_defaults(func=cmd_ablate_metric)

    p = sub.add_parser("check-grad", parents=[common],
                       help="verify gradients on a toy model")
    p.set_defaults(func=cmd_check_grad)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        _note(f"config error: {e}")
        return EXIT_CONFIG
    except GenerationError as e:
        _note(f"config error: {e}")
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        _note(f"numeric failure: {e}")
        return EXIT_NUMERIC
    except CompatibilityError as e:
        _note(f"compatibility error: {e}")
        return EXIT_COMPAT
    except DatasetError as e:
        _note(f"dataset error: {e}")
        return EXIT_IO
    except OSError as e:
        _note(f"I/O error: {e}")
        return EXIT_IO


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
