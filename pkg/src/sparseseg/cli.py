"""Command-line entry point: ``sparseseg <subcommand> --config cfg.json ...``.

Scenes are ``*.ply`` files in ``--scenes`` (scene id = file stem); sparse
labels are ``<scene_id>.csv`` in ``--labels``.  Pseudo-label CSVs written
by ``harvest`` can be passed back as ``--labels`` to ``finetune``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import bottleneck as vb
from .harvest import (
    HISTOGRAM_HEADER,
    STRATEGIES,
    PipelineConfig,
    PipelineError,
    evaluate_segmentation,
    harvest_pseudo_labels,
    histogram_rows,
    mc_dropout_uncertainty,
    normalize_spectrum,
    read_spectrum_csv,
    read_uncertainty_csv,
    run_pipeline,
    write_json,
    write_spectrum_csv,
    write_uncertainty_csv,
)
from .scene import SparseLabelSet, load_scene, load_sparse_labels, save_pseudo_labels
from .spectral import spectrum_distances

log = logging.getLogger("sparseseg")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_json(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if getattr(args, "strategy", None):
        cfg = dataclasses.replace(cfg, harvest=dataclasses.replace(cfg.harvest, strategy=args.strategy))
    return cfg


def _load_scenes(directory) -> list:
    paths = sorted(Path(directory).glob("*.ply"))
    if not paths:
        raise SystemExit(f"no .ply scenes in {directory}")
    return [load_scene(p) for p in paths]


def _load_labels(directory, scenes, num_categories: int) -> list[SparseLabelSet]:
    out = []
    for sc in scenes:
        path = Path(directory) / f"{sc.scene_id}.csv"
        if path.exists():
            out.append(load_sparse_labels(path, sc, num_categories))
        else:
            log.warning("no labels for scene %s", sc.scene_id)
            out.append(SparseLabelSet({}, num_categories))
    return out


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise SystemExit(f"{args.command}: missing {', '.join(missing)}")


def _losses_csv(losses, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,loss\n")
        for k, v in enumerate(losses):
            fh.write(f"{k},{v:.9e}\n")


def cmd_pretrain(args) -> None:
    _need(args, "scenes", "out")
    cfg = _load_config(args)
    scenes = _load_scenes(args.scenes)
    params = vb.init_encoder(cfg.vb.feature_dim, cfg.encoder.hidden, cfg.uncertainty.dropout_rate,
                             vb._subseed(cfg.seed, 100))
    params, losses = vb.pretrain(params, scenes, cfg.vb.config(), cfg.vb.steps, vb._subseed(cfg.seed, 101))
    out = _out_dir(args)
    vb.save_checkpoint(params, out / "pretrain.ckpt", cfg.to_dict())
    _losses_csv(losses, out / "pretrain_losses.csv")


def cmd_finetune(args) -> None:
    _need(args, "scenes", "labels", "out")
    cfg = _load_config(args)
    scenes = _load_scenes(args.scenes)
    labels = _load_labels(args.labels, scenes, cfg.num_categories)
    if args.checkpoint:
        params, _ = vb.load_checkpoint(args.checkpoint)
    else:
        params = vb.init_encoder(cfg.vb.feature_dim, cfg.encoder.hidden, cfg.uncertainty.dropout_rate,
                                 vb._subseed(cfg.seed, 100))
    if params.head_w is None:
        params = params.with_head(cfg.num_categories, vb._subseed(cfg.seed, 102))
    state = cfg.finetune.config().sgd()
    losses = []
    for epoch in range(cfg.finetune.epochs):
        params, loss = vb.finetune_epoch(params, scenes, labels, vb._subseed(cfg.seed, 103, epoch), state)
        losses.append(loss)
    out = _out_dir(args)
    vb.save_checkpoint(params, out / "finetune.ckpt", cfg.to_dict())
    _losses_csv(losses, out / "finetune_losses.csv")


def cmd_uncertainty(args) -> None:
    _need(args, "scenes", "checkpoint", "out")
    cfg = _load_config(args)
    params, _ = vb.load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    for k, sc in enumerate(_load_scenes(args.scenes)):
        unc = mc_dropout_uncertainty(params, sc, cfg.uncertainty.passes, cfg.uncertainty.dropout_rate,
                                     vb._subseed(cfg.seed, 104, k), cfg.uncertainty.mode)
        write_uncertainty_csv(unc, out / f"{sc.scene_id}_uncertainty.csv")


def cmd_spectrum(args) -> None:
    _need(args, "scenes", "labels", "out")
    cfg = _load_config(args)
    scenes = _load_scenes(args.scenes)
    labels = _load_labels(args.labels, scenes, cfg.num_categories)
    out = _out_dir(args)
    for sc, lb in zip(scenes, labels):
        if len(lb) == 0:
            continue
        dist, info = spectrum_distances(sc, lb.indices, cfg.spectral_config())
        write_spectrum_csv(dist, out / f"{sc.scene_id}_spectrum.csv")
        write_json(info, out / f"{sc.scene_id}_spectrum_info.json")


def cmd_harvest(args) -> None:
    _need(args, "scenes", "inputs", "out")
    cfg = _load_config(args)
    scenes = _load_scenes(args.scenes)
    labels = _load_labels(args.labels, scenes, cfg.num_categories) if args.labels else [None] * len(scenes)
    inputs, out = Path(args.inputs), _out_dir(args)
    hist = [HISTOGRAM_HEADER]
    for sc, lb in zip(scenes, labels):
        upath = inputs / f"{sc.scene_id}_uncertainty.csv"
        spath = inputs / f"{sc.scene_id}_spectrum.csv"
        if not upath.exists():
            raise SystemExit(f"missing {upath} (run the uncertainty subcommand)")
        predicted, unc = read_uncertainty_csv(upath)
        spec = read_spectrum_csv(spath) if spath.exists() else None
        report = harvest_pseudo_labels(predicted, unc, spec, cfg, lb)
        save_pseudo_labels(report.pseudo, out / f"{sc.scene_id}_pseudo.csv")
        write_json({str(c): m.to_dict() for c, m in sorted(report.models.items())}, out / f"{sc.scene_id}_models.json")
        hist += histogram_rows(sc.scene_id, predicted, unc, None if spec is None else normalize_spectrum(spec))
    (out / "histograms.csv").write_text("\n".join(hist) + "\n", encoding="utf-8")


def cmd_evaluate(args) -> None:
    _need(args, "checkpoint", "out")
    cfg = _load_config(args)
    directory = args.val_scenes or args.scenes
    if directory is None:
        raise SystemExit("evaluate: missing --val-scenes (or --scenes)")
    params, _ = vb.load_checkpoint(args.checkpoint)
    preds, gts = [], []
    for sc in _load_scenes(directory):
        if sc.labels is None:
            log.warning("scene %s has no dense labels; skipped", sc.scene_id)
            continue
        preds.append(np.argmax(vb.classify(params, sc), axis=1))
        gts.append(sc.labels)
    if not preds:
        raise SystemExit("no labeled scenes to evaluate")
    metrics = evaluate_segmentation(np.concatenate(preds), np.concatenate(gts), cfg.num_categories)
    write_json(metrics.to_dict(), _out_dir(args) / "metrics.json")


def cmd_pipeline(args) -> None:
    _need(args, "scenes", "labels", "out")
    cfg = _load_config(args)
    scenes = _load_scenes(args.scenes)
    labels = _load_labels(args.labels, scenes, cfg.num_categories)
    val = _load_scenes(args.val_scenes) if args.val_scenes else None
    result = run_pipeline(scenes, labels, cfg, _out_dir(args), val)
    if result.metrics is not None:
        print(f"mIoU stage B {result.baseline_metrics.miou:.4f}  stage E {result.metrics.miou:.4f}")


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "uncertainty": cmd_uncertainty,
    "spectrum": cmd_spectrum,
    "harvest": cmd_harvest,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparseseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="PipelineConfig JSON")
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--scenes", help="directory of .ply scenes")
        p.add_argument("--labels", help="directory of <scene_id>.csv label files")
        p.add_argument("--out", help="output directory")
        p.add_argument("--strategy", choices=STRATEGIES, default=None)
        p.add_argument("--checkpoint", help="encoder checkpoint to start from / evaluate")
        p.add_argument("--val-scenes", help="directory of densely labeled evaluation scenes")
        p.add_argument("--inputs", help="directory with uncertainty/spectrum CSVs (harvest)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except PipelineError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
