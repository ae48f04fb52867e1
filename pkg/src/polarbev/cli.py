"""``polarbev`` command line: data generation, training, evaluation, benchmarks and experiments."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch
import yaml

from . import heads as H
from . import plotting
from .balancer import balance_rows
from .bev_transform import dump_lut
from .config import config_from_dict, load_config, parse_override, save_config
from .experiments import run_ipm_ablation, run_transfer
from .metrics import class_curve
from .nn_core import CheckpointError, ConfigError, load_checkpoint
from .pipeline import (
    RigMismatchError,
    TrainingError,
    bench_lut,
    build_geometry,
    class_rows,
    evaluate_predictions,
    freespace_sector_rows,
    json_safe,
    kpi_document,
    load_model,
    load_or_generate,
    predict,
    render_images,
    resolve_rig,
    summary_row,
    train_model,
    write_csv,
)
from .synth import DatasetError, SceneError, generate_dataset, load_dataset, oracle_predictions, save_dataset

log = logging.getLogger("polarbev")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _config(args, base: dict | None = None):
    overrides = list(args.set or [])
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    if args.out is not None:
        overrides.append(f"output={args.out}")
    if base is not None and args.config is None:
        doc = base
        for item in overrides:
            key, value = parse_override(item)
            cur = doc
            *head, last = key.split(".")
            for k in head:
                cur = cur.setdefault(k, {})
            cur[last] = value
        return config_from_dict(doc)
    return load_config(args.config, overrides)


def _out_dir(cfg) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    return out


def _split(cfg, ds):
    n_val = min(cfg.data.val_size, len(ds.scenes) - 1)
    return ds.split(n_val)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    path = Path(cfg.data.path) if cfg.data.path else out / "dataset.jsonl"
    if path.exists() and not args.force:
        raise DatasetError(f"{path} exists; pass --force to replace it")
    ds = generate_dataset(cfg.data.scene_config(), cfg.data.size, cfg.data.seed, cfg.rig)
    save_dataset(ds, path)
    print(f"wrote {len(ds)} scenes to {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    ds = load_or_generate(cfg)
    train, val = _split(cfg, ds)
    rig = resolve_rig(cfg)
    res = train_model(cfg, train, rig, val, out_dir=out, log_every=args.log_every)
    history = res.ledger.history
    (out / "ledger.json").write_text(json.dumps(history, indent=2))
    write_csv(out / "balance.csv", _balance_dicts(res.ledger))
    plotting.plot_training(res.history, out / "training.png")
    if len(history):
        plotting.plot_balance(_balance_dicts(res.ledger), out / "balance.png")
    print(f"trained {len(res.history)} epochs, final loss {res.final_loss:.6g}; checkpoint {res.checkpoints[-1]}")
    if res.history and len(val):
        print(json.dumps(json_safe({k: v for k, v in res.history[-1].items() if k.startswith("val_")}), indent=2))
    return EXIT_OK


def _balance_dicts(ledger):
    return [{"epoch": e, "task": t, "loss_sum": L, "prior": c, "weight": w} for e, t, L, c, w in balance_rows(ledger)]


def cmd_eval(args) -> int:
    meta_cfg = None
    if args.checkpoint:
        _, _, _, meta = load_checkpoint(args.checkpoint)
        meta_cfg = meta.get("config")
    cfg = _config(args, meta_cfg)
    out = _out_dir(cfg)
    if args.dataset:
        scenes = load_dataset(args.dataset).scenes
    else:
        scenes = _split(cfg, load_or_generate(cfg))[1]
    rig = resolve_rig(cfg, args.rig)
    grid = build_geometry(cfg, rig).grid
    if args.oracle:
        preds = [(oracle_predictions(s), s.rdm(grid.M, grid.r_max), list(s.parking)) for s in scenes]
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --oracle)")
        model = load_model(args.checkpoint, cfg, rig, allow_rig_change=args.allow_rig_change)
        images = render_images(scenes, rig)
        for name in args.zero_camera or []:
            images[:, [c.name for c in rig.cameras].index(name)] = 0.0
        preds = predict(model, images, cfg)
    res = evaluate_predictions(scenes, preds, grid.M, grid.r_max)
    doc = kpi_document(res)
    doc["scenes"] = len(scenes)
    doc["rig"] = rig.name
    (out / "kpis.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_csv(out / "classes.csv", class_rows(res))
    write_csv(out / "freespace_sectors.csv", freespace_sector_rows(res, rig.cameras))
    curves, pr_rows = {}, []
    if res.frames:
        for label, name in enumerate(H.OBSTACLE_CLASSES):
            c = class_curve(res.frames, label)
            if c.n_gt == 0:
                continue
            curves[name] = (c.recall, c.precision)
            pr_rows += [{"class": name, "threshold": float(t), "precision": float(p), "recall": float(r)}
                        for t, p, r in zip(c.thresholds, c.precision, c.recall)]
        plotting.plot_pr(curves, out / "pr_curve.png")
    write_csv(out / "pr_curve.csv", pr_rows)
    if res.rdm_pairs:
        pred, gt = res.rdm_pairs[0]
        plotting.plot_rdm(pred.radii, gt.radii, out / "rdm_example.png", grid.r_max)
    print(json.dumps(json_safe(summary_row(res)), indent=2))
    return EXIT_OK


def cmd_bench_lut(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    torch.set_num_threads(max(1, cfg.threads))
    geom = build_geometry(cfg, resolve_rig(cfg))
    rows = bench_lut(geom, cfg.model.lift_channels, args.reps, cfg.seed)
    write_csv(out / "bench_lut.csv", rows)
    plotting.plot_bench(rows, out / "bench_lut.png")
    for r in rows:
        print(f"{r['camera']:>12}  lut {r['lut_ms']:8.3f} ms  naive {r['naive_ms']:8.3f} ms  x{r['speedup']:.1f}")
    return EXIT_OK


def cmd_dump_lut(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    geom = build_geometry(cfg, resolve_rig(cfg))
    path = out / "lut.tsv"
    path.write_text(dump_lut(geom.lut))
    print(f"wrote {geom.lut.flat().size} entries to {path}")
    return EXIT_OK


def cmd_ablate_ipm(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    rows = run_ipm_ablation(cfg, args.seeds, out)
    plotting.plot_grouped(rows, "seed", "lift", "mAP", out / "ablation.png")
    for r in rows:
        print(f"seed {r['seed']}  {r['lift']:>3}  mAP {r['mAP']:.4f}  F1 {r['best_f1']:.4f}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    rows = run_transfer(cfg, args.target_rig, args.sizes, args.seeds, out, args.finetune_epochs)
    plotting.plot_grouped([r for r in rows if r["size"]], "size", "model", "mAP", out / "transfer.png")
    for r in rows:
        print(f"seed {r['seed']}  {r['model']:>10}  size {r['size']:>4}  mAP {r['mAP']:.4f}")
    return EXIT_OK


def cmd_balance_report(args) -> int:
    run = Path(args.run)
    try:
        history = json.loads((run / "ledger.json").read_text())
    except OSError as exc:
        raise ConfigError(f"{run}: no ledger.json ({exc.strerror})") from None
    rows = [{"epoch": h["epoch"], "task": t, "loss_sum": h["sums"][t], "prior": h["priors"][t],
             "weight": h["weights"][t]} for h in history for t in h["weights"]]
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "balance.csv", rows)
    if rows:
        plotting.plot_balance(rows, out / "balance.png")
    print(f"wrote {len(rows)} rows to {out / 'balance.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--threads", type=int, help="cap torch worker threads")
    p.add_argument("--out", help="output directory (overrides config 'output')")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="polarbev", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic scene dataset (JSON lines)")
    _common(p)
    p.add_argument("--force", action="store_true", help="replace an existing dataset file")
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train a model; writes checkpoints and per-epoch CSV")
    _common(p)
    p.add_argument("--log-every", type=int, default=0, help="log every N batches")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes KPI JSON, CSV tables and figures")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset file (default: validation split of the configured data)")
    p.add_argument("--rig", help="render the scenes through this rig instead of the configured one")
    p.add_argument("--allow-rig-change", action="store_true", help="accept a checkpoint trained on another rig")
    p.add_argument("--zero-camera", action="append", metavar="NAME", help="blank one camera's images")
    p.add_argument("--oracle", action="store_true", help="score ground truth echoed as predictions")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-lut", help="time LUT scatter pooling against on-the-fly projection")
    _common(p)
    p.add_argument("--reps", type=int, default=100)
    p.set_defaults(fn=cmd_bench_lut)

    p = sub.add_parser("dump-lut", help="write the BEV look-up table as TSV")
    _common(p)
    p.set_defaults(fn=cmd_dump_lut)

    p = sub.add_parser("ablate-ipm", help="paired MLP-lift vs IPM training on elevated objects")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.set_defaults(fn=cmd_ablate_ipm)

    p = sub.add_parser("transfer", help="pretrain / fine-tune / scratch comparison across rigs")
    _common(p)
    p.add_argument("--target-rig", default="truck2")
    p.add_argument("--sizes", type=int, nargs="+", default=[50, 150])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--finetune-epochs", type=int)
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("balance-report", help="per-epoch (task, L_t, c_t, w_t) CSV from a training run")
    p.add_argument("--run", required=True, help="training output directory")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_balance_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, RigMismatchError, CheckpointError, DatasetError, SceneError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
