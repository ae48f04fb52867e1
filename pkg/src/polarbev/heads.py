"""Obstacle, freespace and parking heads with their matching and losses."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .bev_transform import PolarGridSpec
from .geometry import TWO_PI, angle_diff, euler_to_rotation, polar_arrays, wrap_angle
from .nn_core import PolarConv2d

log = logging.getLogger(__name__)

OBSTACLE_CLASSES = ("Vehicle", "Truck", "Person", "BikeRider")
FREESPACE_CLASSES = ("Vehicle", "VRU", "Other")
PARKING_PROFILES = ("angled", "parallel", "perpendicular")
FS_OTHER = FREESPACE_CLASSES.index("Other")

DEFAULT_LAMBDAS = (1.0, 5.0, 1.0, 1.0)
FOCAL_GAMMA = 2.0
LOG_SIGMA_RANGE = (-6.0, 4.0)
RDM_EPS = 1e-6


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Cuboid:
    """Polar-positioned 9-DOF box; ``e`` is the height of the box center."""

    r: float
    a: float
    e: float
    dims: tuple[float, float, float]
    rotation: np.ndarray
    label: int = 0

    @classmethod
    def from_euler(cls, r, a, e, dims, yaw=0.0, pitch=0.0, roll=0.0, label=0):
        return cls(float(r), wrap_angle(a), float(e), tuple(float(d) for d in dims),
                   euler_to_rotation(yaw, pitch, roll), int(label))

    @property
    def x(self) -> float:
        return self.r * math.cos(self.a)

    @property
    def y(self) -> float:
        return self.r * math.sin(self.a)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def footprint(self) -> np.ndarray:
        """BEV rectangle corners ``(4, 2)``, counter-clockwise."""
        return rect_corners(self.x, self.y, self.dims[0], self.dims[1], self.yaw)


@dataclass(frozen=True)
class ObstaclePrediction:
    cell: int
    objectness: float
    class_probs: np.ndarray
    cuboid: Cuboid
    sigma: np.ndarray

    @property
    def confidence(self) -> float:
        return float(self.objectness * self.class_probs[self.cuboid.label])


@dataclass(frozen=True)
class RadialDistanceMap:
    radii: np.ndarray
    labels: np.ndarray
    scores: np.ndarray | None = None

    @property
    def n_bins(self) -> int:
        return len(self.radii)


@dataclass(frozen=True)
class ParkingSpace:
    cx: float
    cy: float
    l: float
    w: float
    theta: float
    profile: int = 0
    confidences: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_pi(self.theta))

    @property
    def confidence(self) -> float:
        return max(self.confidences) if self.confidences else 1.0

    def corners(self) -> np.ndarray:
        return rect_corners(self.cx, self.cy, self.l, self.w, self.theta)


@dataclass
class MatchAssignment:
    pairs: list[tuple[int, int]]
    negatives: np.ndarray
    unmatched_gts: list[int] = field(default_factory=list)

    @property
    def gt_indices(self):
        return [g for g, _ in self.pairs]

    @property
    def cells(self):
        return [c for _, c in self.pairs]


def wrap_pi(theta: float) -> float:
    t = math.fmod(theta, math.pi)
    if t < 0:
        t += math.pi
    return 0.0 if t >= math.pi else t


def rect_corners(cx, cy, length, width, yaw) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    # local x runs along the heading
    local = np.array([[0.5, 0.5], [-0.5, 0.5], [-0.5, -0.5], [0.5, -0.5]]) * [length, width]
    return np.stack([cx + c * local[:, 0] - s * local[:, 1], cy + s * local[:, 0] + c * local[:, 1]], axis=1)


# ---------------------------------------------------------------------------
# torch heads
# ---------------------------------------------------------------------------

def _conv(cin, cout, k):
    return PolarConv2d(cin, cout, k)


class ObstacleHead(nn.Module):
    """Shared neck and five 1x1 sub-heads: class, position, size, sin/cos, log-sigma."""

    def __init__(self, channels: int, n_classes: int, hidden: int = 32):
        super().__init__()
        self.n_classes = n_classes
        self.neck = nn.Sequential(_conv(channels, hidden, 3), nn.ReLU())
        self.cls = nn.Conv2d(hidden, 1 + n_classes, 1)
        self.pos = nn.Conv2d(hidden, 3, 1)
        self.size = nn.Conv2d(hidden, 3, 1)
        self.rot = nn.Conv2d(hidden, 6, 1)
        self.sigma = nn.Conv2d(hidden, 5, 1)

    def forward(self, x):
        h = self.neck(x)
        return {"cls": self.cls(h), "pos": self.pos(h), "size": self.size(h),
                "rot": self.rot(h), "log_sigma": self.sigma(h)}


class FreespaceHead(nn.Module):
    """Neck plus per-angular-bin radius and boundary-class heads (kernel spans all radii)."""

    def __init__(self, channels: int, grid_n: int, hidden: int = 16, n_classes: int = 3):
        super().__init__()
        self.neck = nn.Sequential(_conv(channels, hidden, 3), nn.ReLU())
        self.radius = nn.Conv2d(hidden, 1, (1, grid_n))
        self.cls = nn.Conv2d(hidden, n_classes, (1, grid_n))

    def forward(self, x):
        h = self.neck(x)
        return {"radius": self.radius(h)[:, 0, :, 0], "cls": self.cls(h)[..., 0].transpose(1, 2)}


class ParkingHead(nn.Module):
    """Profile confidences and ``(dx, dy, l, w, sin2t, cos2t)`` regression per cell."""

    def __init__(self, channels: int, hidden: int = 16):
        super().__init__()
        self.neck = nn.Sequential(_conv(channels, hidden, 3), nn.ReLU())
        self.cls = nn.Conv2d(hidden, len(PARKING_PROFILES), 1)
        self.reg = nn.Conv2d(hidden, 6, 1)

    def forward(self, x):
        h = self.neck(x)
        return {"cls": self.cls(h), "reg": self.reg(h)}


def _flat(t):
    """``(B, C, M, N)`` to ``(B, M*N, C)``."""
    b, c = t.shape[:2]
    return t.reshape(b, c, -1).transpose(1, 2)


class GridConstants:
    """Cell-center tensors shared by the decoders."""

    def __init__(self, grid: PolarGridSpec, dtype=torch.float32):
        a, d = grid.cell_centers()
        m, n = grid.split(np.arange(grid.n_cells))
        self.grid = grid
        self.a = torch.tensor(a, dtype=dtype)
        self.r = torch.tensor(d, dtype=dtype)
        self.dr = torch.tensor(grid.radial_widths()[n], dtype=dtype)
        self.da = grid.angular_width
        self.x = self.r * torch.cos(self.a)
        self.y = self.r * torch.sin(self.a)


def rotation_from_sincos(sc: torch.Tensor) -> torch.Tensor:
    """``(..., 6)`` as (sin, cos) of yaw, pitch, roll to ``(..., 3, 3)`` via Rz Ry Rx."""
    ang = torch.atan2(sc[..., 0::2], sc[..., 1::2])
    c, s = torch.cos(ang), torch.sin(ang)
    cy, cp, cr = c.unbind(-1)
    sy, sp, sr = s.unbind(-1)
    row0 = torch.stack([cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr], -1)
    row1 = torch.stack([sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr], -1)
    row2 = torch.stack([-sp, cp * sr, cp * cr], -1)
    return torch.stack([row0, row1, row2], -2)


def decode_obstacles(raw: dict, consts: GridConstants) -> dict:
    """Per-cell predictions, each tensor shaped ``(B, M*N, ...)``."""
    cls = _flat(raw["cls"])
    pos = _flat(raw["pos"])
    return {
        "obj_logit": cls[..., 0],
        "objectness": torch.sigmoid(cls[..., 0]),
        "class_logits": cls[..., 1:],
        "class_probs": torch.softmax(cls[..., 1:], -1),
        "r": consts.r + torch.tanh(pos[..., 0]) * consts.dr,
        "a": consts.a + torch.tanh(pos[..., 1]) * consts.da,
        "e": pos[..., 2],
        "dims": F.softplus(_flat(raw["size"])),
        "rot": rotation_from_sincos(_flat(raw["rot"])),
        "log_sigma": _flat(raw["log_sigma"]).clamp(*LOG_SIGMA_RANGE),
    }


def decode_freespace(raw: dict, r_max: float) -> dict:
    return {
        "radius": r_max * torch.sigmoid(raw["radius"]),
        "cls_logits": raw["cls"],
        "probs": torch.softmax(raw["cls"], -1),
    }


def decode_parking(raw: dict, consts: GridConstants) -> dict:
    cls = _flat(raw["cls"])
    reg = _flat(raw["reg"])
    theta = torch.remainder(0.5 * torch.atan2(reg[..., 4], reg[..., 5]), math.pi)
    theta = torch.where(theta >= math.pi, theta - math.pi, theta)
    return {
        "logits": cls,
        "conf": torch.sigmoid(cls),
        "cx": consts.x + reg[..., 0],
        "cy": consts.y + reg[..., 1],
        "l": F.softplus(reg[..., 2]),
        "w": F.softplus(reg[..., 3]),
        "theta": theta,
    }


def decode_theta(sin2t: float, cos2t: float) -> float:
    """Parking heading from its doubled-angle encoding, in ``[0, pi)``."""
    return wrap_pi(0.5 * math.atan2(sin2t, cos2t))


def obstacle_predictions(dec: dict, b: int = 0, min_conf: float = 0.0, top_k: int | None = None):
    """Numpy :class:`ObstaclePrediction` list for scene ``b``, sorted by confidence."""
    obj = dec["objectness"][b].detach().cpu().numpy().astype(float)
    probs = dec["class_probs"][b].detach().cpu().numpy().astype(float)
    lab = probs.argmax(-1)
    conf = obj * probs[np.arange(len(obj)), lab]
    order = np.argsort(-conf, kind="stable")
    order = order[conf[order] >= min_conf]
    if top_k is not None:
        order = order[:top_k]
    r = dec["r"][b].detach().cpu().numpy().astype(float)
    a = dec["a"][b].detach().cpu().numpy().astype(float)
    e = dec["e"][b].detach().cpu().numpy().astype(float)
    dims = dec["dims"][b].detach().cpu().numpy().astype(float)
    rot = dec["rot"][b].detach().cpu().numpy().astype(float)
    sig = np.exp(dec["log_sigma"][b].detach().cpu().numpy().astype(float))
    return [
        ObstaclePrediction(int(k), float(obj[k]), probs[k],
                           Cuboid(float(r[k]), wrap_angle(a[k]), float(e[k]), tuple(dims[k]), rot[k], int(lab[k])),
                           sig[k])
        for k in order
    ]


def parking_predictions(dec: dict, b: int = 0, min_conf: float = 0.0, top_k: int | None = None):
    conf = dec["conf"][b].detach().cpu().numpy().astype(float)
    best = conf.max(-1)
    order = np.argsort(-best, kind="stable")
    order = order[best[order] >= min_conf]
    if top_k is not None:
        order = order[:top_k]
    vals = {k: dec[k][b].detach().cpu().numpy().astype(float) for k in ("cx", "cy", "l", "w", "theta")}
    return [
        ParkingSpace(vals["cx"][k], vals["cy"][k], vals["l"][k], vals["w"][k], vals["theta"][k],
                     int(conf[k].argmax()), tuple(conf[k]))
        for k in order
    ]


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------

def _cells_in_rect(grid: PolarGridSpec, corners: np.ndarray) -> np.ndarray:
    a, d = grid.cell_centers()
    px, py = d * np.cos(a), d * np.sin(a)
    c = corners.mean(0)
    ex = corners[1] - corners[0]
    ey = corners[3] - corners[0]
    lx, ly = np.linalg.norm(ex), np.linalg.norm(ey)
    if lx == 0 or ly == 0:
        return np.zeros(0, dtype=np.int64)
    u = ((px - c[0]) * ex[0] + (py - c[1]) * ex[1]) / lx
    v = ((px - c[0]) * ey[0] + (py - c[1]) * ey[1]) / ly
    return np.flatnonzero((np.abs(u) <= lx / 2) & (np.abs(v) <= ly / 2))


def dilate_cells(grid: PolarGridSpec, cells) -> np.ndarray:
    """Add the one-cell ring around each cell (azimuth wraps, radius clips)."""
    out = set()
    m, n = grid.split(np.asarray(cells, dtype=np.int64))
    for mi, ni in zip(m.tolist(), n.tolist()):
        for dm in (-1, 0, 1):
            for dn in (-1, 0, 1):
                nn_ = ni + dn
                if 0 <= nn_ < grid.N:
                    out.add(((mi + dm) % grid.M) * grid.N + nn_)
    return np.array(sorted(out), dtype=np.int64)


def footprint_mask(grid: PolarGridSpec, cx: float, cy: float, corners: np.ndarray) -> np.ndarray:
    a, d = polar_arrays(cx, cy)
    center = grid.cell_of(float(a), float(d))
    if center < 0:
        return np.zeros(0, dtype=np.int64)
    inside = _cells_in_rect(grid, corners)
    return dilate_cells(grid, np.union1d(inside, [center]))


def candidate_mask(gt: Cuboid, grid: PolarGridSpec) -> np.ndarray:
    """Cells whose centers fall in the GT footprint, plus the center cell, dilated by one ring."""
    return footprint_mask(grid, gt.x, gt.y, gt.footprint())


def parking_candidate_mask(gt: ParkingSpace, grid: PolarGridSpec) -> np.ndarray:
    return footprint_mask(grid, gt.cx, gt.cy, gt.corners())


def match_costs(gt: Cuboid, preds: dict, cells: np.ndarray, lambdas=DEFAULT_LAMBDAS) -> np.ndarray:
    """Vectorized :func:`match_cost` of one GT against the predictions at ``cells``.

    ``preds`` holds numpy arrays indexed by cell: objectness, r, a, dims, rot.
    """
    lc, lp, ls, lo = lambdas
    obj = preds["objectness"][cells]
    dr = np.abs(preds["r"][cells] - gt.r) / max(gt.r, 1.0)
    da = np.abs(angle_diff(preds["a"][cells], gt.a))
    g = np.asarray(gt.dims)
    d = preds["dims"][cells]
    ratio = np.prod(np.minimum(g, d) / np.maximum(g, d), axis=-1)
    tr = np.einsum("ij,kij->k", gt.rotation, preds["rot"][cells])
    rot_err = np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))
    return lc * (1.0 - obj) + lp * (dr + da) + ls * (1.0 - ratio) + lo * rot_err


def match_cost(gt: Cuboid, pred: ObstaclePrediction, lambdas=DEFAULT_LAMBDAS) -> float:
    c = pred.cuboid
    preds = {"objectness": np.array([pred.objectness]), "r": np.array([c.r]), "a": np.array([c.a]),
             "dims": np.array([c.dims]), "rot": np.array([c.rotation])}
    return float(match_costs(gt, preds, np.array([0]), lambdas)[0])


def greedy_assign(gt_idx, cells, costs, n_cells: int, n_gts: int) -> MatchAssignment:
    """Accept (gt, cell) pairs in ascending cost, each gt and cell used once.

    Ties break on (gt index, cell index).
    """
    gt_idx = np.asarray(gt_idx, dtype=np.int64)
    cells = np.asarray(cells, dtype=np.int64)
    costs = np.asarray(costs, dtype=float)
    order = np.lexsort((cells, gt_idx, costs))
    used_g, used_c, pairs = set(), set(), []
    for k in order:
        g, c = int(gt_idx[k]), int(cells[k])
        if g in used_g or c in used_c:
            continue
        used_g.add(g)
        used_c.add(c)
        pairs.append((g, c))
    pairs.sort()
    neg = np.setdiff1d(np.arange(n_cells), [c for _, c in pairs])
    unmatched = [g for g in range(n_gts) if g not in used_g]
    if unmatched:
        log.debug("%d ground-truth objects had no admissible cell", len(unmatched))
    return MatchAssignment(pairs, neg, unmatched)


def greedy_match(gts, preds: dict, masks, lambdas=DEFAULT_LAMBDAS, cost_fn=None) -> MatchAssignment:
    cost_fn = cost_fn or match_costs
    gi, ce, co = [], [], []
    for i, (gt, mask) in enumerate(zip(gts, masks)):
        if len(mask) == 0:
            continue
        gi.append(np.full(len(mask), i))
        ce.append(mask)
        co.append(cost_fn(gt, preds, mask, lambdas))
    n_cells = len(preds["objectness"] if "objectness" in preds else preds["conf"])
    if not gi:
        return MatchAssignment([], np.arange(n_cells), list(range(len(gts))))
    return greedy_assign(np.concatenate(gi), np.concatenate(ce), np.concatenate(co), n_cells, len(gts))


def parking_match_costs(gt: ParkingSpace, preds: dict, cells, lambdas=DEFAULT_LAMBDAS) -> np.ndarray:
    lc, lp, ls, lo = lambdas
    conf = preds["conf"][cells].max(-1)
    dist = np.hypot(preds["cx"][cells] - gt.cx, preds["cy"][cells] - gt.cy) / max(math.hypot(gt.cx, gt.cy), 1.0)
    g = np.array([gt.l, gt.w])
    d = np.stack([preds["l"][cells], preds["w"][cells]], -1)
    ratio = np.prod(np.minimum(g, d) / np.maximum(g, d), axis=-1)
    dt = np.abs(np.mod(preds["theta"][cells] - gt.theta + math.pi / 2, math.pi) - math.pi / 2)
    return lc * (1.0 - conf) + lp * dist + ls * (1.0 - ratio) + lo * dt


def numpy_preds(dec: dict, b: int, keys) -> dict:
    return {k: dec[k][b].detach().cpu().numpy().astype(float) for k in keys}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def focal_bce(logits: torch.Tensor, target: float | torch.Tensor, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Summed focal binary cross-entropy on logits."""
    p = torch.sigmoid(logits)
    t = torch.as_tensor(target, dtype=logits.dtype)
    pt = t * p + (1 - t) * (1 - p)
    log_pt = t * F.logsigmoid(logits) + (1 - t) * F.logsigmoid(-logits)
    return -((1 - pt) ** gamma * log_pt).sum()


def focal_ce(logits: torch.Tensor, target: torch.Tensor, gamma: float = FOCAL_GAMMA) -> torch.Tensor:
    """Summed focal categorical cross-entropy, ``logits (K, C)``, integer ``target (K,)``."""
    logp = torch.log_softmax(logits, -1).gather(-1, target[:, None])[:, 0]
    return -((1 - logp.exp()) ** gamma * logp).sum()


def _wrap_2pi(d: torch.Tensor) -> torch.Tensor:
    return d - TWO_PI * torch.round(d / TWO_PI)


def _wrap_pi(d: torch.Tensor) -> torch.Tensor:
    return d - math.pi * torch.round(d / math.pi)


def gt_tensors(gts, dtype=torch.float32) -> dict:
    return {
        "r": torch.tensor([g.r for g in gts], dtype=dtype),
        "a": torch.tensor([g.a for g in gts], dtype=dtype),
        "e": torch.tensor([g.e for g in gts], dtype=dtype),
        "dims": torch.tensor(np.array([g.dims for g in gts], dtype=float).reshape(-1, 3), dtype=dtype),
        "rot": torch.tensor(np.array([g.rotation for g in gts], dtype=float).reshape(-1, 3, 3), dtype=dtype),
        "label": torch.tensor([g.label for g in gts], dtype=torch.int64),
    }


def obstacle_loss(assignment: MatchAssignment, gts, dec: dict, b: int = 0,
                  gamma: float = FOCAL_GAMMA, normalize: bool = True) -> dict:
    """Positive/negative split loss for one scene; returns the components and ``total``.

    Positives get focal objectness + class terms and the uncertainty
    weighted location, size and rotation terms; negatives only the focal
    objectness term toward zero.  ``normalize`` divides by the positive count.
    """
    obj = dec["obj_logit"][b]
    neg = focal_bce(obj[torch.from_numpy(assignment.negatives)], 0.0, gamma)
    zero = obj.sum() * 0.0
    out = {"neg": neg, "pos_cls": zero, "loc": zero, "size": zero, "rot": zero}
    if assignment.pairs:
        gi = [g for g, _ in assignment.pairs]
        ci = torch.tensor([c for _, c in assignment.pairs])
        g = gt_tensors([gts[i] for i in gi], obj.dtype)
        ls = dec["log_sigma"][b][ci]
        sig = ls.exp()
        out["pos_cls"] = focal_bce(obj[ci], 1.0, gamma) + focal_ce(dec["class_logits"][b][ci], g["label"], gamma)
        dr = (dec["r"][b][ci] - g["r"]).abs()
        da = _wrap_2pi(dec["a"][b][ci] - g["a"]).abs()
        de = (dec["e"][b][ci] - g["e"]).abs()
        log2 = math.log(2.0)
        out["loc"] = (dr / sig[:, 0] + da / sig[:, 1] + de / sig[:, 2] + ls[:, :3].sum(-1) + 3 * log2).sum()
        d = dec["dims"][b][ci]
        ratio = (torch.minimum(d, g["dims"]) / torch.maximum(d, g["dims"])).prod(-1)
        out["size"] = ((1 - ratio) / sig[:, 3] + ls[:, 3] + log2).sum()
        rot_l1 = (dec["rot"][b][ci] - g["rot"]).abs().sum((-1, -2))
        out["rot"] = (rot_l1 / sig[:, 4] + ls[:, 4] + log2).sum()
    total = sum(out.values())
    if normalize:
        total = total / max(1, len(assignment.pairs))
    out["total"] = total
    return out


# ---------------------------------------------------------------------------
# freespace
# ---------------------------------------------------------------------------

def _origin_inside(vertices: np.ndarray) -> bool:
    x, y = vertices[:, 0], vertices[:, 1]
    x2, y2 = np.roll(x, -1), np.roll(y, -1)
    crosses = (y > 0) != (y2 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        xi = x + (0 - y) * (x2 - x) / (y2 - y)
    return bool(np.sum(crosses & (xi > 0)) % 2 == 1)


def ray_polygon_hits(vertices, angles):
    """Nearest hit distance and edge index of rays from the origin; ``inf``/-1 on a miss."""
    p = np.asarray(vertices, dtype=float)
    q = np.roll(p, -1, axis=0)
    e = q - p
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    den = dx * e[None, :, 1] - dy * e[None, :, 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p[None, :, 0] * e[None, :, 1] - p[None, :, 1] * e[None, :, 0]) / den
        s = (p[None, :, 0] * dy - p[None, :, 1] * dx) / den
    ok = (np.abs(den) > 1e-15) & (t > 0) & (s >= -1e-12) & (s <= 1 + 1e-12)
    t = np.where(ok, t, np.inf)
    k = np.argmin(t, axis=1)
    dist = t[np.arange(len(angles)), k]
    return dist, np.where(np.isfinite(dist), k, -1)


def rdm_bin_angles(n_bins: int) -> np.ndarray:
    return (np.arange(n_bins) + 0.5) * (TWO_PI / n_bins)


def rdm_from_polygon(vertices, edge_classes, n_bins: int, r_max: float = math.inf) -> RadialDistanceMap:
    """Ground-truth RDM by casting one ray per angular bin center.

    ``edge_classes[i]`` labels the edge from vertex ``i`` to ``i + 1``.
    """
    v = np.asarray(vertices, dtype=float)
    if not _origin_inside(v):
        raise ValueError("freespace polygon does not contain the origin")
    dist, edge = ray_polygon_hits(v, rdm_bin_angles(n_bins))
    cls = np.asarray(edge_classes, dtype=np.int64)
    labels = np.where(edge >= 0, cls[np.maximum(edge, 0)], FS_OTHER)
    radii = np.minimum(np.where(np.isfinite(dist), dist, r_max), r_max)
    return RadialDistanceMap(radii, labels)


def freespace_loss(pred_radius: torch.Tensor, pred_logits: torch.Tensor, gt_radius, gt_labels,
                   gamma: float = FOCAL_GAMMA) -> dict:
    """Polar IoU + segment similarity + focal boundary classification for one RDM."""
    gr = torch.as_tensor(gt_radius, dtype=pred_radius.dtype)
    n = gr.shape[0]
    keep = gr > RDM_EPS
    lo = torch.minimum(pred_radius, gr)[keep]
    hi = torch.maximum(pred_radius, gr)[keep].clamp(min=RDM_EPS)
    iou = 1.0 - torch.exp(torch.log(lo.clamp(min=RDM_EPS) / hi).sum())
    ang = torch.as_tensor(rdm_bin_angles(n), dtype=pred_radius.dtype)
    ca, sa = torch.cos(ang), torch.sin(ang)

    def segs(r):
        pts = torch.stack([r * ca, r * sa], -1)
        return torch.roll(pts, -1, 0) - pts

    sp, sg = segs(pred_radius), segs(gr)
    cos = (sp * sg).sum(-1) / (sp.norm(dim=-1) * sg.norm(dim=-1)).clamp(min=RDM_EPS)
    sim = (1.0 - cos).sum()
    cls = focal_ce(pred_logits, torch.as_tensor(gt_labels, dtype=torch.int64), gamma)
    return {"iou": iou, "sim": sim, "cls": cls, "total": iou + sim + cls}


# ---------------------------------------------------------------------------
# parking
# ---------------------------------------------------------------------------

def parking_loss(assignment: MatchAssignment, gts, dec: dict, b: int = 0,
                 gamma: float = FOCAL_GAMMA, normalize: bool = True) -> dict:
    logits = dec["logits"][b]
    neg = focal_bce(logits[torch.from_numpy(assignment.negatives)], 0.0, gamma)
    out = {"neg": neg, "pos_cls": logits.sum() * 0.0, "reg": logits.sum() * 0.0}
    if assignment.pairs:
        gi = [g for g, _ in assignment.pairs]
        ci = torch.tensor([c for _, c in assignment.pairs])
        dt = logits.dtype
        target = torch.zeros(len(gi), len(PARKING_PROFILES), dtype=dt)
        target[torch.arange(len(gi)), torch.tensor([gts[i].profile for i in gi])] = 1.0
        out["pos_cls"] = focal_bce(logits[ci], target, gamma)
        reg = 0.0
        for key in ("cx", "cy", "l", "w"):
            g = torch.tensor([getattr(gts[i], key) for i in gi], dtype=dt)
            reg = reg + ((g - dec[key][b][ci]) ** 2).sum()
        gt_theta = torch.tensor([gts[i].theta for i in gi], dtype=dt)
        out["reg"] = reg + (_wrap_pi(gt_theta - dec["theta"][b][ci]) ** 2).sum()
    total = sum(out.values())
    if normalize:
        total = total / max(1, len(assignment.pairs))
    out["total"] = total
    return out


def _clip(subject: list, a, b) -> list:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    def side(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])

    out = []
    for i, cur in enumerate(subject):
        prev = subject[i - 1]
        sc, sp = side(cur), side(prev)
        if sc >= 0:
            if sp < 0:
                out.append(_intersect(prev, cur, sp, sc))
            out.append(cur)
        elif sp >= 0:
            out.append(_intersect(prev, cur, sp, sc))
    return out


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def polygon_area(pts) -> float:
    if len(pts) < 3:
        return 0.0
    p = np.asarray(pts, dtype=float)
    return 0.5 * abs(float(np.dot(p[:, 0], np.roll(p[:, 1], -1)) - np.dot(p[:, 1], np.roll(p[:, 0], -1))))


def convex_intersection_area(pa: np.ndarray, pb: np.ndarray) -> float:
    poly = [tuple(p) for p in pa]
    for i in range(len(pb)):
        if not poly:
            break
        poly = _clip(poly, pb[i], pb[(i + 1) % len(pb)])
    return polygon_area(poly)


def oriented_iou(a: ParkingSpace, b: ParkingSpace) -> float:
    area_a, area_b = a.l * a.w, b.l * b.w
    if area_a <= 0 or area_b <= 0:
        return 0.0
    inter = convex_intersection_area(a.corners(), b.corners())
    union = area_a + area_b - inter
    return float(min(1.0, max(0.0, inter / union))) if union > 0 else 0.0
