"""Paired training experiments: MLP-vs-IPM lift ablation and cross-rig transfer."""

from __future__ import annotations

import logging
from pathlib import Path

from .config import ExperimentConfig, config_from_dict, config_to_dict
from .pipeline import build_geometry, evaluate, render_images, resolve_rig, train_model, write_csv
from .synth import generate_dataset

log = logging.getLogger(__name__)

ELEVATED_BASE = (0.5, 2.0)


def derive(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Copy of ``cfg`` with dotted-key changes, e.g. ``derive(cfg, **{"model.lift": "ipm"})``."""
    doc = config_to_dict(cfg)
    for key, value in changes.items():
        cur = doc
        *head, last = key.split(".")
        for k in head:
            cur = cur[k]
        cur[last] = value
    return config_from_dict(doc)


def _kpi_row(res) -> dict:
    d = res.detection
    return {"mAP": d.mAP, "best_f1": d.best_f1, "radial_err_pct": d.radial_error_pct,
            "azimuth_err_deg": d.azimuth_error_deg, "elevation_err_m": d.elevation_error_m}


def _dataset(cfg: ExperimentConfig, n: int, seed: int):
    return generate_dataset(cfg.data.scene_config(), n, seed, cfg.rig).scenes


def _fit_and_score(cfg, train, val, rig, seed, out=None, model=None, epochs=None):
    res = train_model(cfg, train, rig, out_dir=out, model=model, seed=seed, epochs=epochs)
    ev = evaluate(res.model, val, render_images(val, rig), cfg)
    return res.model, _kpi_row(ev)


def ablation_config(cfg: ExperimentConfig) -> ExperimentConfig:
    """Obstacle-only config whose scenes lift every box off the ground."""
    scene = dict(cfg.data.scene)
    scene.setdefault("base_height", list(ELEVATED_BASE))
    return derive(cfg, **{"heads.tasks": ["obstacle"], "data.scene": scene})


def run_ipm_ablation(cfg: ExperimentConfig, seeds, out=None) -> list[dict]:
    """Train the MLP and IPM lifts on identical elevated-object data for each seed."""
    base = ablation_config(cfg)
    rig = resolve_rig(base)
    rows = []
    for seed in seeds:
        scenes = _dataset(base, base.data.size, base.data.seed + seed)
        n_val = base.data.val_size
        train, val = scenes[:-n_val], scenes[-n_val:]
        for lift in ("mlp", "ipm"):
            c = derive(base, **{"model.lift": lift, "seed": seed})
            sub = Path(out) / f"seed{seed}_{lift}" if out else None
            _, kpis = _fit_and_score(c, train, val, rig, seed, sub)
            rows.append({"seed": seed, "lift": lift, **kpis})
            log.info("ablation seed %d %s: %s", seed, lift, kpis)
        if out:
            write_csv(Path(out) / "ablation.csv", rows)
    return rows


def run_transfer(cfg: ExperimentConfig, target_rig: str, sizes, seeds, out=None,
                 finetune_epochs: int | None = None) -> list[dict]:
    """Pretrain on ``cfg.rig``; compare scratch, unadapted and fine-tuned models on ``target_rig``.

    For each seed one source model is trained on ``cfg.data.size`` scenes.
    Every size in ``sizes`` then gets a scratch model and a fine-tuned copy of
    the source model, both trained on the same target scenes for the same
    number of epochs.  All three are scored on one held-out target split.
    """
    src_cfg = derive(cfg, **{"heads.tasks": ["obstacle"]})
    tgt_cfg = derive(src_cfg, rig=target_rig)
    src_rig, tgt_rig = resolve_rig(src_cfg), resolve_rig(tgt_cfg)
    epochs = finetune_epochs or cfg.optim.epochs
    n_val = cfg.data.val_size
    rows = []
    for seed in seeds:
        src_scenes = _dataset(src_cfg, src_cfg.data.size, src_cfg.data.seed + seed)
        tgt_scenes = _dataset(tgt_cfg, max(sizes) + n_val, src_cfg.data.seed + 7919 + seed)
        tgt_val = tgt_scenes[-n_val:]
        val_images = render_images(tgt_val, tgt_rig)
        sub = Path(out) / f"seed{seed}" if out else None
        res = train_model(src_cfg, src_scenes, src_rig, seed=seed, out_dir=sub / "pretrain" if sub else None)
        state = {k: v.clone() for k, v in res.model.state_dict().items()}
        res.model.set_geometry(build_geometry(tgt_cfg, tgt_rig))
        unadapted = _kpi_row(evaluate(res.model, tgt_val, val_images, tgt_cfg))
        rows.append({"seed": seed, "model": "pretrained", "size": 0, **unadapted})
        for size in sizes:
            train = tgt_scenes[:size]
            _, scratch = _fit_and_score(tgt_cfg, train, tgt_val, tgt_rig, seed, epochs=epochs,
                                        out=sub / f"scratch_{size}" if sub else None)
            res.model.load_state_dict(state)
            _, tuned = _fit_and_score(tgt_cfg, train, tgt_val, tgt_rig, seed, model=res.model, epochs=epochs,
                                      out=sub / f"finetune_{size}" if sub else None)
            rows.append({"seed": seed, "model": "scratch", "size": size, **scratch})
            rows.append({"seed": seed, "model": "finetuned", "size": size, **tuned})
            log.info("transfer seed %d size %d: scratch %.3f finetuned %.3f unadapted %.3f",
                     seed, size, scratch["mAP"], tuned["mAP"], unadapted["mAP"])
        if out:
            write_csv(Path(out) / "transfer.csv", rows)
    return rows
