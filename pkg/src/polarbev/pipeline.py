"""Model assembly, training, evaluation and the LUT benchmark."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import heads as H
from .balancer import accumulate, combined_loss, new_ledger, update_weights
from .bev_transform import (
    BevLut,
    RigGeometry,
    build_polar_grid,
    ipm_lift,
    lift_columns,
    MlpLift,
    naive_pool,
    scatter_pool,
)
from .config import ExperimentConfig, config_to_dict
from .geometry import CameraRig, angle_diff, load_rig
from .metrics import detection_kpis, freespace_kpis, parking_kpis
from .nn_core import (
    BackboneConfig,
    ConfigError,
    PolarConv2d,
    build_backbone,
    he_init_,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
)
from .synth import Dataset, generate_dataset, load_dataset, render_views, rig_preset, scene_record

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class RigMismatchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def resolve_rig(cfg: ExperimentConfig, name: str | None = None) -> CameraRig:
    name = name or cfg.rig
    if name.endswith((".yaml", ".yml")):
        return load_rig(name)
    return rig_preset(name, cfg.image.width, cfg.image.height)


def build_geometry(cfg: ExperimentConfig, rig: CameraRig) -> RigGeometry:
    g = cfg.grid
    grid = build_polar_grid(g.M, g.N, g.r_min, g.r_max)
    return RigGeometry.build(rig, grid, cfg.model.depth_bins, cfg.model.depth_near)


class PolarBevNet(nn.Module):
    """Shared image backbone, per-column lift into the polar grid, BEV encoder, task heads."""

    def __init__(self, cfg: ExperimentConfig, geom: RigGeometry, seed: int = 0):
        super().__init__()
        mc = cfg.model
        bb = mc.backbone
        self.lift_kind = mc.lift
        self.tasks = tuple(cfg.heads.tasks)
        self.backbone = build_backbone(
            BackboneConfig.from_lists(bb.kernels, bb.strides, bb.repeats, bb.channels, norm=bb.group_norm), seed)
        c_img = self.backbone.cfg.out_channels
        rows = cfg.image.height // 8
        if mc.lift == "mlp":
            self.lift = MlpLift(rows, c_img, mc.depth_bins, mc.lift_hidden, mc.lift_channels)
        else:
            self.lift = nn.Conv2d(c_img, mc.lift_channels, 1)
        layers, cin = [], mc.lift_channels + 2
        for _ in range(mc.bev_layers):
            layers += [PolarConv2d(cin, mc.bev_channels, 3), nn.ReLU()]
            cin = mc.bev_channels
        self.bev = nn.Sequential(*layers)
        hid = mc.head_hidden
        self.heads = nn.ModuleDict()
        if "obstacle" in self.tasks:
            self.heads["obstacle"] = H.ObstacleHead(cin, len(H.OBSTACLE_CLASSES), hid)
        if "freespace" in self.tasks:
            self.heads["freespace"] = H.FreespaceHead(cin, cfg.grid.N, hid // 2)
        if "parking" in self.tasks:
            self.heads["parking"] = H.ParkingHead(cin, hid // 2)
        gen = torch.Generator().manual_seed(seed)
        for mod in (self.lift, self.bev, self.heads):
            he_init_(mod, gen)
        if "obstacle" in self.heads:
            with torch.no_grad():
                # start with low objectness and the configured uncertainty
                self.heads["obstacle"].cls.bias[0] = -4.0
                self.heads["obstacle"].sigma.bias.fill_(cfg.heads.log_sigma_init)
        if "parking" in self.heads:
            with torch.no_grad():
                self.heads["parking"].cls.bias.fill_(-4.0)
        self.set_geometry(geom)

    def set_geometry(self, geom: RigGeometry) -> None:
        """Attach a rig; the learned weights are rig independent."""
        self.geom = geom
        grid = geom.grid
        self.consts = H.GridConstants(grid)
        idx = geom.lut.flat()
        if self.lift_kind == "ipm":
            tables = geom.ipm_tables()
            self.ipm_tables = tables
            idx = np.concatenate([t.reshape(-1) for t in tables])
        count = np.bincount(idx[idx >= 0], minlength=grid.n_cells).reshape(grid.M, grid.N)
        radial = np.broadcast_to(np.log(grid.radial_centers() / grid.r_max), (grid.M, grid.N))
        self.register_buffer("coords", torch.tensor(
            np.stack([radial, np.log1p(count)]), dtype=torch.float32)[None], persistent=False)

    def bev_features(self, images: torch.Tensor) -> torch.Tensor:
        """``images (B, K, 3, H, W)`` in rig camera order to ``(B, C, M, N)``."""
        b, k = images.shape[:2]
        f = self.backbone(images.flatten(0, 1))
        f = f.reshape(b, k, *f.shape[1:])
        grid = self.geom.grid
        if self.lift_kind == "mlp":
            pseudo = [lift_columns(self.lift, f[:, i]) for i in range(k)]
            bev = scatter_pool(pseudo, self.geom.lut, grid)
        else:
            bev = ipm_lift([self.lift(f[:, i]) for i in range(k)], self.ipm_tables, grid)
        return torch.cat([bev, self.coords.expand(b, -1, -1, -1)], 1)

    def forward(self, images: torch.Tensor) -> dict:
        h = self.bev(self.bev_features(images))
        return {t: head(h) for t, head in self.heads.items()}

    def decode(self, raw: dict) -> dict:
        out = {}
        if "obstacle" in raw:
            out["obstacle"] = H.decode_obstacles(raw["obstacle"], self.consts)
        if "freespace" in raw:
            out["freespace"] = H.decode_freespace(raw["freespace"], self.geom.grid.r_max)
        if "parking" in raw:
            out["parking"] = H.decode_parking(raw["parking"], self.consts)
        return out


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class SceneTargets:
    obstacles: list
    obstacle_masks: list
    rdm: H.RadialDistanceMap
    parking: list
    parking_masks: list


def scene_targets(scene, grid) -> SceneTargets:
    obs = list(scene.obstacles)
    park = list(scene.parking)
    return SceneTargets(
        obs, [H.candidate_mask(g, grid) for g in obs],
        scene.rdm(grid.M, grid.r_max),
        park, [H.parking_candidate_mask(p, grid) for p in park],
    )


_IMAGE_CACHE: dict = {}


def rig_key(rig: CameraRig) -> tuple:
    return (rig.name,) + tuple(
        (c.name, repr(c.intrinsics), c.pose.rotation.tobytes(), c.pose.translation.tobytes()) for c in rig.cameras)


def render_images(scenes, rig: CameraRig) -> torch.Tensor:
    """``(S, K, 3, H, W)`` images, memoized per (rig, scene) within the process."""
    out = []
    rk = rig_key(rig)
    for s in scenes:
        key = (rk, json.dumps(scene_record(s), sort_keys=True))
        if key not in _IMAGE_CACHE:
            _IMAGE_CACHE[key] = np.stack(render_views(s, rig))
        out.append(_IMAGE_CACHE[key])
    return torch.from_numpy(np.stack(out)) if out else torch.zeros(0)


def clear_image_cache() -> None:
    _IMAGE_CACHE.clear()


def load_or_generate(cfg: ExperimentConfig) -> Dataset:
    d = cfg.data
    if d.path and Path(d.path).exists():
        return load_dataset(d.path)
    return generate_dataset(d.scene_config(), d.size, d.seed, cfg.rig)


# ---------------------------------------------------------------------------
# losses and training
# ---------------------------------------------------------------------------

def batch_losses(model: PolarBevNet, dec: dict, targets: list[SceneTargets], cfg: ExperimentConfig) -> dict:
    """Per-task losses averaged over the batch."""
    lam = tuple(cfg.heads.lambdas)
    gamma = cfg.heads.gamma
    out = {t: 0.0 for t in model.tasks}
    for b, tg in enumerate(targets):
        if "obstacle" in dec:
            d = dec["obstacle"]
            preds = H.numpy_preds(d, b, ("objectness", "r", "a", "dims", "rot"))
            asg = H.greedy_match(tg.obstacles, preds, tg.obstacle_masks, lam)
            out["obstacle"] = out["obstacle"] + H.obstacle_loss(asg, tg.obstacles, d, b, gamma)["total"]
        if "freespace" in dec:
            d = dec["freespace"]
            out["freespace"] = out["freespace"] + H.freespace_loss(
                d["radius"][b], d["cls_logits"][b], tg.rdm.radii, tg.rdm.labels, gamma)["total"]
        if "parking" in dec:
            d = dec["parking"]
            preds = H.numpy_preds(d, b, ("conf", "cx", "cy", "l", "w", "theta"))
            asg = H.greedy_match(tg.parking, preds, tg.parking_masks, lam, H.parking_match_costs)
            out["parking"] = out["parking"] + H.parking_loss(asg, tg.parking, d, b, gamma)["total"]
    return {t: v / len(targets) for t, v in out.items()}


@dataclass
class TrainResult:
    model: PolarBevNet
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    final_loss: float = math.nan
    ledger: object = None


EPOCH_FIELDS = ("epoch", "seconds", "loss_total")


def train_model(cfg: ExperimentConfig, train_scenes, rig: CameraRig, val_scenes=(), out_dir=None,
                model: PolarBevNet | None = None, seed: int | None = None,
                epochs: int | None = None, log_every: int = 0) -> TrainResult:
    """Train (or continue training ``model``) on ``train_scenes`` rendered through ``rig``."""
    seed = cfg.seed if seed is None else seed
    epochs = cfg.optim.epochs if epochs is None else epochs
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(max(1, cfg.threads))
    geom = build_geometry(cfg, rig)
    if model is None:
        model = PolarBevNet(cfg, geom, seed)
    else:
        model.set_geometry(geom)
    images = render_images(train_scenes, rig)
    targets = [scene_targets(s, geom.grid) for s in train_scenes]
    val_images = render_images(val_scenes, rig) if len(val_scenes) else None
    opt = make_optimizer(model.parameters(), cfg.optim.lr, cfg.optim.momentum, cfg.optim.kind,
                         cfg.optim.weight_decay)
    sched = None
    if cfg.optim.lr_decay_epochs:
        sched = torch.optim.lr_scheduler.StepLR(opt, cfg.optim.lr_decay_epochs, 0.5)
    ledger = new_ledger(model.tasks, cfg.balancer.priors)
    rng = np.random.default_rng(seed)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, ledger=ledger)
    bs = cfg.optim.batch_size
    for epoch in range(epochs):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(train_scenes))
        epoch_total = []
        for bi in range(0, len(order), bs):
            sel = order[bi:bi + bs]
            dec = model.decode(model(images[sel]))
            losses = batch_losses(model, dec, [targets[i] for i in sel], cfg)
            loss = combined_loss(ledger, losses) if cfg.balancer.enabled else sum(losses.values())
            if not torch.isfinite(loss):
                _dump_failure(out, epoch, bi // bs, losses, result)
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {bi // bs}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            for t, v in losses.items():
                accumulate(ledger, t, v)
            epoch_total.append(float(loss.detach()))
            if log_every and (bi // bs) % log_every == 0:
                log.info("epoch %d batch %d loss %.4f", epoch, bi // bs, epoch_total[-1])
        sums = dict(ledger.sums)
        weights_used = dict(ledger.weights)
        if cfg.balancer.enabled:
            update_weights(ledger)
        if sched:
            sched.step()
        row = {"epoch": epoch, "seconds": round(time.perf_counter() - t0, 3),
               "loss_total": math.fsum(epoch_total) / max(1, len(epoch_total))}
        for t in model.tasks:
            row[f"loss_{t}"] = sums[t] / max(1, len(epoch_total))
            row[f"weight_{t}"] = weights_used[t]
        if val_images is not None:
            row.update(summary_row(evaluate(model, val_scenes, val_images, cfg)))
        result.history.append(row)
        result.final_loss = row["loss_total"]
        if out:
            path = out / f"epoch_{epoch:03d}.ckpt"
            save_checkpoint(path, model.state_dict(), seed, epoch, checkpoint_meta(cfg, rig, model))
            result.checkpoints.append(path)
            write_csv(out / "epochs.csv", result.history)
        log.info("epoch %d: %s", epoch, {k: (round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})
    return result


def _dump_failure(out, epoch, batch, losses, result):
    if out is None:
        return
    diag = {"epoch": epoch, "batch": batch,
            "losses": {t: float(v.detach()) if torch.is_tensor(v) else float(v) for t, v in losses.items()},
            "last_good_checkpoint": str(result.checkpoints[-1]) if result.checkpoints else None,
            "history": result.history}
    (out / "failure.json").write_text(json.dumps(diag, indent=2))


def checkpoint_meta(cfg: ExperimentConfig, rig: CameraRig, model: PolarBevNet) -> dict:
    return {"rig": rig.name, "lift": model.lift_kind, "tasks": list(model.tasks), "config": config_to_dict(cfg)}


def load_model(path, cfg: ExperimentConfig, rig: CameraRig, allow_rig_change: bool = False) -> PolarBevNet:
    state, seed, _epoch, meta = load_checkpoint(path)
    if meta.get("rig") != rig.name and not allow_rig_change:
        raise RigMismatchError(
            f"checkpoint was trained on rig {meta.get('rig')!r} but the dataset uses {rig.name!r}; "
            "allow the rig change explicitly for transfer runs")
    if meta.get("lift", cfg.model.lift) != cfg.model.lift or list(meta.get("tasks", cfg.heads.tasks)) != list(cfg.heads.tasks):
        raise ConfigError("checkpoint lift/tasks do not match the configuration")
    model = PolarBevNet(cfg, build_geometry(cfg, rig), seed)
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    detection: object = None
    freespace: object = None
    parking: object = None
    frames: list = field(default_factory=list)
    rdm_pairs: list = field(default_factory=list)
    parking_frames: list = field(default_factory=list)


@torch.no_grad()
def predict(model: PolarBevNet, images: torch.Tensor, cfg: ExperimentConfig, batch: int = 16):
    """Per-scene predictions: obstacle list, RDM, parking list (any may be None)."""
    model.eval()
    out = []
    top_k, min_conf = cfg.heads.top_k, cfg.heads.min_confidence
    for i in range(0, len(images), batch):
        dec = model.decode(model(images[i:i + batch]))
        for b in range(min(batch, len(images) - i)):
            obs = fs = park = None
            if "obstacle" in dec:
                obs = H.obstacle_predictions(dec["obstacle"], b, min_conf, top_k)
            if "freespace" in dec:
                d = dec["freespace"]
                fs = H.RadialDistanceMap(d["radius"][b].double().numpy(), d["probs"][b].argmax(-1).numpy(),
                                         d["probs"][b].double().numpy())
            if "parking" in dec:
                park = H.parking_predictions(dec["parking"], b, min_conf, top_k)
            out.append((obs, fs, park))
    return out


def evaluate(model: PolarBevNet, scenes, images, cfg: ExperimentConfig, predictions=None) -> EvalResult:
    preds = predictions if predictions is not None else predict(model, images, cfg)
    grid = model.geom.grid
    return evaluate_predictions(scenes, preds, grid.M, grid.r_max)


def evaluate_predictions(scenes, preds, n_bins: int, r_max: float) -> EvalResult:
    res = EvalResult()
    for s, (obs, fs, park) in zip(scenes, preds):
        if obs is not None:
            res.frames.append((list(s.obstacles), obs))
        if fs is not None:
            res.rdm_pairs.append((fs, s.rdm(n_bins, r_max)))
        if park is not None:
            res.parking_frames.append((list(s.parking), park))
    if res.frames:
        res.detection = detection_kpis(res.frames, H.OBSTACLE_CLASSES)
    if res.rdm_pairs:
        res.freespace = freespace_kpis(res.rdm_pairs)
    if res.parking_frames:
        res.parking = parking_kpis(res.parking_frames)
    return res


def summary_row(res: EvalResult) -> dict:
    row = {}
    if res.detection is not None:
        d = res.detection
        row.update(val_mAP=d.mAP, val_best_f1=d.best_f1, val_radial_err_pct=d.radial_error_pct,
                   val_azimuth_err_deg=d.azimuth_error_deg)
    if res.freespace is not None:
        row.update(val_fs_rel_gap_pct=res.freespace.relative_gap_pct,
                   val_fs_success_pct=res.freespace.success_rate_pct)
    if res.parking is not None:
        row.update(val_parking_f1=res.parking.f1)
    return row


def sector_frames(frames, lo_deg: float, hi_deg: float):
    """Keep GTs and detections whose azimuth lies in ``[lo, hi]`` degrees (signed, from +x)."""

    def inside(c):
        a = math.degrees(float(angle_diff(c.a, 0.0)))
        return lo_deg <= a <= hi_deg

    return [([g for g in gts if inside(g)], [p for p in dets if inside(p.cuboid)]) for gts, dets in frames]


def camera_sector(camera) -> tuple[float, float]:
    """Signed azimuth interval (degrees) seen by a camera's outermost columns on the ground."""
    intr = camera.intrinsics
    u = np.array([0.0, intr.width - 1.0])
    v = np.full(2, intr.height - 1.0)
    rays = intr.unproject(np.stack([u, v], -1))
    d = rays @ camera.pose.rotation.T
    az = np.degrees(np.arctan2(d[:, 1], d[:, 0]))
    lo, hi = sorted(az.tolist())
    return lo, hi


def kpi_document(res: EvalResult) -> dict:
    doc = {}
    if res.detection is not None:
        doc["detection"] = res.detection.as_dict()
    if res.freespace is not None:
        doc["freespace"] = res.freespace.as_dict()
    if res.parking is not None:
        doc["parking"] = res.parking.as_dict()
    return json_safe(doc)


def json_safe(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: json_safe(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [json_safe(v) for v in x]
    if isinstance(x, np.generic):
        return json_safe(x.item())
    return x


def class_rows(res: EvalResult) -> list[dict]:
    if res.detection is None:
        return []
    return [dict(json_safe(vars(c))) for c in res.detection.per_class.values()]


FREESPACE_SECTORS = (
    ("0-10m", (0.0, 10.0)), ("10-20m", (10.0, 20.0)), ("20-50m", (20.0, 50.0)), ("all", None),
)


def freespace_sector_rows(res: EvalResult, cameras=()) -> list[dict]:
    rows = []
    if not res.rdm_pairs:
        return rows
    fovs = [("all", None)] + [(c.name, camera_sector(c)) for c in cameras]
    for fov_name, fov in fovs:
        for band_name, band in FREESPACE_SECTORS:
            k = freespace_kpis(res.rdm_pairs, radial=band, angular_deg=fov)
            rows.append(json_safe({"fov": fov_name, "range": band_name, "bins": k.n_bins,
                                 "relative_gap_pct": k.relative_gap_pct, "absolute_gap_m": k.absolute_gap_m,
                                 "success_rate_pct": k.success_rate_pct}))
    return rows


def write_csv(path, rows) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in keys})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v


# ---------------------------------------------------------------------------
# LUT benchmark
# ---------------------------------------------------------------------------

def _sub_geometry(geom: RigGeometry, name: str) -> RigGeometry:
    rig = CameraRig(geom.rig.name, (geom.rig.camera(name),))
    lut = BevLut((name,), (geom.lut.table(name),), geom.lut.n_cells)
    return RigGeometry(rig, geom.grid, {name: geom.curves[name]}, {name: geom.depth_bins[name]}, lut, geom.stride)


def _median_time(fn, reps: int) -> float:
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_lut(geom: RigGeometry, channels: int = 32, reps: int = 100, seed: int = 0) -> list[dict]:
    """Median LUT-scatter vs on-the-fly projection times per camera and for the whole rig.

    Outputs of the two paths are compared for exact equality before timing.
    """
    gen = torch.Generator().manual_seed(seed)
    pseudo = [torch.randn(1, t.shape[0], t.shape[1], channels, generator=gen) for t in geom.lut.tables]
    rows = []
    parts = [(c.name, _sub_geometry(geom, c.name), [p]) for c, p in zip(geom.rig.cameras, pseudo)]
    parts.append(("total", geom, pseudo))
    for name, g, ps in parts:
        fast = scatter_pool(ps, g.lut, g.grid)
        slow = naive_pool(ps, g)
        if not torch.equal(fast, slow):
            raise TrainingError(f"LUT and naive pooling disagree for {name}")
        t_lut = _median_time(lambda: scatter_pool(ps, g.lut, g.grid), reps)
        t_naive = _median_time(lambda: naive_pool(ps, g), reps)
        rows.append({"camera": name, "reps": reps, "lut_ms": t_lut * 1e3, "naive_ms": t_naive * 1e3,
                     "speedup": t_naive / t_lut, "identical": True})
    return rows
