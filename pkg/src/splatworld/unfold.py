"""Progressive 2.5D-to-3D unfolding.

An instance represented by flat layer splats is replaced by an externally
supplied 3D gaussian asset. The asset is posed by a uniform scale, a 6D-
parameterized rotation, and a translation: coarse initialization matches
bounding boxes and searches the 24 cube orientations by silhouette IoU, fine
alignment descends a masked depth L1 plus a soft silhouette Dice loss through
the rasterizer's pose gradients, and a descriptor-similarity gate reverts the
whole operation when the re-rendered asset does not resemble the original
region. The world mutates only on acceptance.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene_core import (
    Camera,
    GaussianSet,
    LayerKind,
    RepState,
    SceneLayer,
    UnfoldedAsset,
    World,
    covariances_from_quat_scale,
    matrix_to_quat,
    quat_multiply,
)
from .rasterizer import (
    ALPHA,
    COLOR,
    DEPTH,
    RenderSpec,
    composite,
    project_arrays,
)
from .gradients import Adjoints, PoseContext, backward_pose
from .fitting import Adam, DivergenceError


class DegenerateRotationError(ValueError):
    """6D rotation parameters with a vanishing or parallel basis."""


class EmptyTargetError(ValueError):
    """Alignment target silhouette is too small to align against."""


class AssetFormatError(ValueError):
    """Asset file is unreadable or internally inconsistent."""


class NotLayeredError(RuntimeError):
    """Instance is not in the 2.5D layered state."""


MIN_SILHOUETTE_PIXELS = 16


# ---------------------------------------------------------------------------
# 6D rotation parameterization
# ---------------------------------------------------------------------------

def rotation_from_6d(p: np.ndarray) -> np.ndarray:
    """Gram-Schmidt map from 6 parameters to a rotation matrix.

    Column 1 is the normalized first triple, column 2 the second triple with
    its column-1 component removed and normalized, column 3 their cross
    product; the result has determinant +1."""
    p = np.asarray(p, dtype=np.float64).reshape(6)
    u, v = p[:3], p[3:]
    nu = np.linalg.norm(u)
    if nu <= 1e-9:
        raise DegenerateRotationError("first rotation basis vector has zero norm")
    r1 = u / nu
    w = v - (r1 @ v) * r1
    nw = np.linalg.norm(w)
    if nw <= 1e-9:
        raise DegenerateRotationError("rotation basis vectors are parallel")
    r2 = w / nw
    r3 = np.cross(r1, r2)
    return np.stack([r1, r2, r3], axis=1)


def _skew(a: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -a[2], a[1]],
        [a[2], 0.0, -a[0]],
        [-a[1], a[0], 0.0],
    ])


def rotation_from_6d_with_jacobian(p: np.ndarray):
    """rotation_from_6d plus dR/dp shaped (3, 3, 6)."""
    p = np.asarray(p, dtype=np.float64).reshape(6)
    u, v = p[:3], p[3:]
    nu = np.linalg.norm(u)
    if nu <= 1e-9:
        raise DegenerateRotationError("first rotation basis vector has zero norm")
    r1 = u / nu
    proj = float(r1 @ v)
    w = v - proj * r1
    nw = np.linalg.norm(w)
    if nw <= 1e-9:
        raise DegenerateRotationError("rotation basis vectors are parallel")
    r2 = w / nw
    r3 = np.cross(r1, r2)
    R = np.stack([r1, r2, r3], axis=1)

    dr1_du = (np.eye(3) - np.outer(r1, r1)) / nu
    dw_du = -np.outer(r1, v @ dr1_du) - proj * dr1_du
    dw_dv = np.eye(3) - np.outer(r1, r1)
    dr2_dw = (np.eye(3) - np.outer(r2, r2)) / nw
    dr2_du = dr2_dw @ dw_du
    dr2_dv = dr2_dw @ dw_dv
    dr3_du = _skew(r1) @ dr2_du - _skew(r2) @ dr1_du
    dr3_dv = _skew(r1) @ dr2_dv

    J = np.zeros((3, 3, 6))
    J[:, 0, :3] = dr1_du
    J[:, 1, :3] = dr2_du
    J[:, 2, :3] = dr3_du
    J[:, 1, 3:] = dr2_dv
    J[:, 2, 3:] = dr3_dv
    return R, J


def rotation_to_6d(R: np.ndarray) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    return np.concatenate([R[:, 0], R[:, 1]])


def octahedral_rotations() -> list[np.ndarray]:
    """The 24 rotation matrices of the cube group, deterministically ordered."""
    out = []
    for perm in itertools.permutations(range(3)):
        P = np.zeros((3, 3))
        for i, j in enumerate(perm):
            P[i, j] = 1.0
        for signs in itertools.product((1.0, -1.0), repeat=3):
            M = P * np.array(signs)[:, None]
            if np.isclose(np.linalg.det(M), 1.0):
                out.append(M)
    out.sort(key=lambda m: tuple(np.round(m.flatten(), 6)))
    return out


# ---------------------------------------------------------------------------
# assets and poses
# ---------------------------------------------------------------------------

@dataclass
class ObjectAsset:
    gaussians: GaussianSet
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    source: str = ""

    def validate(self) -> None:
        if len(self.gaussians) == 0:
            raise AssetFormatError("asset holds no gaussians")
        pos = self.gaussians.positions
        if np.any(pos < self.bbox_min - 1e-6) or np.any(pos > self.bbox_max + 1e-6):
            raise AssetFormatError("asset bbox does not enclose all positions")

    @property
    def center(self) -> np.ndarray:
        return (self.bbox_min + self.bbox_max) / 2

    @property
    def longest_edge(self) -> float:
        return float(np.max(self.bbox_max - self.bbox_min))


def asset_from_gaussians(gs: GaussianSet, source: str = "") -> ObjectAsset:
    return ObjectAsset(
        gaussians=gs,
        bbox_min=gs.positions.min(axis=0),
        bbox_max=gs.positions.max(axis=0),
        source=source,
    )


def save_asset(asset: ObjectAsset, path: str | Path) -> None:
    """Binary gaussian block (same field order as world layers) + JSON header."""
    from .world import _gaussians_to_rows

    path = Path(path)
    header = {
        "count": len(asset.gaussians),
        "embed_dim": asset.gaussians.embed_dim,
        "bbox": [asset.bbox_min.tolist(), asset.bbox_max.tolist()],
    }
    path.write_text(json.dumps(header, sort_keys=True))
    _gaussians_to_rows(asset.gaussians).tofile(str(path) + ".bin")


def load_asset(path: str | Path) -> ObjectAsset:
    from .world import _gaussians_from_rows

    path = Path(path)
    try:
        header = json.loads(path.read_text())
        embed_dim = int(header["embed_dim"])
        row_len = 15 + embed_dim
        rows = np.fromfile(str(path) + ".bin", dtype="<f4")
        if rows.size != header["count"] * row_len:
            raise AssetFormatError(
                f"asset block holds {rows.size} floats, expected {header['count'] * row_len}"
            )
        gs = _gaussians_from_rows(rows.reshape(-1, row_len), embed_dim)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise AssetFormatError(f"cannot read asset {path}: {exc}") from exc
    asset = ObjectAsset(
        gaussians=gs,
        bbox_min=np.asarray(header["bbox"][0], dtype=np.float64),
        bbox_max=np.asarray(header["bbox"][1], dtype=np.float64),
        source=str(path),
    )
    asset.validate()
    return asset


@dataclass
class AlignmentPose:
    scale: float
    p6d: np.ndarray
    translation: np.ndarray

    def rotation(self) -> np.ndarray:
        return rotation_from_6d(self.p6d)

    def validate(self) -> None:
        if self.scale <= 0:
            raise ValueError("pose scale must be positive")
        R = self.rotation()
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise ValueError("pose rotation is not orthonormal")

    def to_json(self) -> dict:
        return {"scale": self.scale, "p6d": self.p6d.tolist(),
                "translation": self.translation.tolist()}


@dataclass
class AlignTarget:
    depth: np.ndarray        # rendered instance depth (raw accumulation)
    silhouette: np.ndarray   # binary instance mask (accumulated alpha >= 0.5)
    camera: Camera
    crop: np.ndarray         # full-frame RGB render of the instance
    bbox: tuple[int, int, int, int]  # y0, y1, x0, x1 of the silhouette
    alpha_soft: np.ndarray | None = None  # raw accumulated alpha, for the soft Dice

    def validate(self) -> None:
        if int(np.count_nonzero(self.silhouette > 0.5)) < MIN_SILHOUETTE_PIXELS:
            raise EmptyTargetError("target silhouette below the minimum pixel area")

    def soft(self) -> np.ndarray:
        return self.alpha_soft if self.alpha_soft is not None else self.silhouette


def dice_loss(a: np.ndarray, b: np.ndarray) -> float:
    """Soft Dice: 1 - 2 sum(ab) / (sum(a^2) + sum(b^2)).

    The squared denominator makes identical inputs score exactly zero (with a
    vanishing gradient there), for binary as well as alpha-valued masks."""
    denom = float((a * a).sum() + (b * b).sum())
    if denom <= 0:
        return 1.0
    return 1.0 - 2.0 * float((a * b).sum()) / denom


def dice_loss_grad(a: np.ndarray, b: np.ndarray):
    denom = float((a * a).sum() + (b * b).sum())
    if denom <= 0:
        return 1.0, np.zeros_like(a)
    inter = float((a * b).sum())
    loss = 1.0 - 2.0 * inter / denom
    grad = (-2.0 * b * denom + 4.0 * a * inter) / (denom * denom)
    return loss, grad


def transform_gaussians(gs: GaussianSet, scale: float, rotation: np.ndarray,
                        translation: np.ndarray) -> GaussianSet:
    """Rigid+scale transform of a gaussian batch into the world frame."""
    out = gs.copy()
    out.positions = scale * gs.positions @ rotation.T + translation
    q_pose = matrix_to_quat(rotation)
    out.quats = quat_multiply(q_pose[None, :], gs.quats)
    out.scales = gs.scales * scale
    return out


def project_posed(asset: ObjectAsset, pose: AlignmentPose, cam: Camera):
    """Project the posed asset through the covariance route (no quaternions),
    returning the batch plus a PoseContext aligned with its valid rows."""
    R, J = rotation_from_6d_with_jacobian(pose.p6d)
    gs = asset.gaussians
    local_cov = covariances_from_quat_scale(gs.quats, gs.scales)
    means = pose.scale * gs.positions @ R.T + pose.translation
    cov3d = (pose.scale ** 2) * np.einsum("ij,njk,lk->nil", R, local_cov, R)
    batch = project_arrays(means, cov3d, cam, gs.opacities, gs.colors, gs.gammas)
    ctx = PoseContext(
        scale=pose.scale, rotation=R,
        local_positions=gs.positions[batch.valid],
        local_cov=local_cov[batch.valid],
        rot6d_jac=J,
    )
    return batch, ctx


# ---------------------------------------------------------------------------
# candidate selection and targets
# ---------------------------------------------------------------------------

def select_unfold_candidates(world: World, cam: Camera, n: int,
                             requested=()) -> list[int]:
    """Nearest foreground 2.5D instances, with user-requested ids bypassing
    the category and proximity filters."""
    chosen: list[int] = []
    for iid in requested:
        rec = world.registry.get(int(iid))
        if rec is not None and rec.state == RepState.LAYERED_25D and iid not in chosen:
            chosen.append(int(iid))
    fg = set(world.config.fg_categories)
    pos = cam.position
    candidates = [
        (float(np.linalg.norm(rec.center - pos)), rec.id)
        for rec in world.registry.values()
        if rec.state == RepState.LAYERED_25D and rec.category in fg
        and rec.id not in chosen
    ]
    candidates.sort()
    chosen.extend(iid for _, iid in candidates[:max(n, 0)])
    return chosen


def build_align_target(world: World, instance_id: int, cam: Camera) -> AlignTarget:
    subset = world.instance_gaussians(instance_id)
    if len(subset) == 0:
        raise EmptyTargetError(f"instance {instance_id} has no gaussians")
    spec = RenderSpec(cam.width, cam.height, frozenset({COLOR, DEPTH, ALPHA}))
    out = composite(project_set_of(subset, cam), spec)
    ys, xs = np.nonzero(out.alpha > 0.5)
    if len(ys) < MIN_SILHOUETTE_PIXELS:
        raise EmptyTargetError("instance silhouette below the minimum pixel area")
    target = AlignTarget(
        depth=out.depth, silhouette=(out.alpha > 0.5).astype(np.float64),
        camera=cam, crop=out.color,
        bbox=(int(ys.min()), int(ys.max()) + 1, int(xs.min()), int(xs.max()) + 1),
        alpha_soft=out.alpha,
    )
    target.validate()
    return target


def project_set_of(gs: GaussianSet, cam: Camera):
    from .rasterizer import project_set
    return project_set(gs, cam)


# ---------------------------------------------------------------------------
# alignment
# ---------------------------------------------------------------------------

def coarse_align(asset: ObjectAsset, target: AlignTarget,
                 instance_center: np.ndarray, instance_extent: np.ndarray) -> AlignmentPose:
    """Scale from longest bbox edges, translation from centers, rotation by
    trying all 24 cube orientations and keeping the best silhouette IoU."""
    target.validate()
    longest_target = float(np.max(instance_extent))
    if longest_target <= 0 or asset.longest_edge <= 0:
        raise EmptyTargetError("degenerate bounding box for coarse alignment")
    S = longest_target / asset.longest_edge

    sil_ref = target.silhouette > 0.5
    spec = RenderSpec(target.camera.width, target.camera.height, frozenset({ALPHA}))
    # identity hypothesis first, so exact ties keep the unrotated start
    starts = [np.eye(3)] + [R for R in octahedral_rotations()
                            if not np.allclose(R, np.eye(3))]
    best = None
    for R in starts:
        T = instance_center - S * R @ asset.center
        pose = AlignmentPose(scale=S, p6d=rotation_to_6d(R), translation=T)
        batch, _ = project_posed(asset, pose, target.camera)
        out = composite(batch, spec)
        rendered = out.alpha > 0.5
        inter = np.count_nonzero(rendered & sil_ref)
        union = np.count_nonzero(rendered | sil_ref)
        iou_score = inter / union if union else 0.0
        if best is None or iou_score > best[0] + 1e-12:
            best = (iou_score, pose)
    return best[1]


@dataclass
class AlignReport:
    iterations: int
    final_depth_l1: float
    final_dice: float
    silhouette_iou: float
    loss_curve: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations, "final_depth_l1": self.final_depth_l1,
            "final_dice": self.final_dice, "silhouette_iou": self.silhouette_iou,
        }


def _pose_losses(asset: ObjectAsset, pose: AlignmentPose, target: AlignTarget,
                 w_depth: float, w_sil: float, retain: bool):
    """Masked depth L1 plus soft Dice; returns losses and, when retained,
    the gradients of (scale, p6d, translation)."""
    cam = target.camera
    spec = RenderSpec(cam.width, cam.height, frozenset({DEPTH, ALPHA}))
    batch, ctx = project_posed(asset, pose, cam)
    result = composite(batch, spec, retain=retain)
    out, cache = result if retain else (result, None)

    mask = target.silhouette > 0.5
    n_mask = int(np.count_nonzero(mask))
    diff = out.depth - target.depth
    depth_l1 = float(np.abs(diff[mask]).sum()) / n_mask

    b = target.soft()
    a = out.alpha
    dice, d_dice = dice_loss_grad(a, b)

    total = w_depth * depth_l1 + w_sil * dice
    if not retain:
        return total, depth_l1, dice, None

    d_depth = np.zeros_like(out.depth)
    d_depth[mask] = w_depth * np.sign(diff[mask]) / n_mask
    dS, dp, dT = backward_pose(cache, Adjoints(depth=d_depth, alpha=w_sil * d_dice), ctx)
    return total, depth_l1, dice, (dS, dp, dT)


def fine_align(asset: ObjectAsset, pose0: AlignmentPose, target: AlignTarget,
               iterations: int = 200, lr: float = 0.01,
               w_depth: float = 1.0, w_sil: float = 1.0):
    """Gradient descent on (S, p, T) through the rasterizer's pose path.

    Keeps the best pose seen, so the result never scores worse than pose0."""
    pose0.validate()
    target.validate()
    params = {
        "S": np.array([pose0.scale]),
        "p": pose0.p6d.astype(np.float64).copy(),
        "T": pose0.translation.astype(np.float64).copy(),
    }
    opt = Adam()
    lrs = {"S": lr, "p": lr, "T": lr}
    curve = []
    best_loss, best_pose = np.inf, pose0
    last = (np.inf, np.inf)
    for it in range(iterations):
        pose = AlignmentPose(scale=float(params["S"][0]), p6d=params["p"].copy(),
                             translation=params["T"].copy())
        total, depth_l1, dice, grads = _pose_losses(asset, pose, target,
                                                    w_depth, w_sil, retain=True)
        if not np.isfinite(total):
            raise DivergenceError(f"alignment loss became non-finite at iteration {it}")
        curve.append(total)
        last = (depth_l1, dice)
        if total < best_loss:
            best_loss, best_pose = total, pose
        dS, dp, dT = grads
        opt.step(params, {"S": np.array([dS]), "p": dp, "T": dT}, lrs)
        params["S"][0] = max(params["S"][0], 1e-6)

    final_total, depth_l1, dice, _ = _pose_losses(asset, best_pose, target,
                                                  w_depth, w_sil, retain=False)
    if final_total < best_loss:
        best_loss = final_total
    cam = target.camera
    spec = RenderSpec(cam.width, cam.height, frozenset({ALPHA}))
    batch, _ = project_posed(asset, best_pose, cam)
    rendered = composite(batch, spec).alpha > 0.5
    ref = target.silhouette > 0.5
    union = np.count_nonzero(rendered | ref)
    sil_iou = np.count_nonzero(rendered & ref) / union if union else 0.0
    report = AlignReport(iterations=iterations, final_depth_l1=depth_l1,
                         final_dice=dice, silhouette_iou=float(sil_iou),
                         loss_curve=curve)
    return best_pose, report


# ---------------------------------------------------------------------------
# fallback gate
# ---------------------------------------------------------------------------

def patch_descriptor(image: np.ndarray, bbox, mask: np.ndarray | None = None,
                     grid: int = 16) -> np.ndarray:
    """Downsampled, per-channel-normalized patch of the masked region; the
    pluggable default stand-in for a neural feature extractor.

    Statistics are taken over the instance mask so the score reflects the
    object's appearance, not the silhouette-on-background shape both renders
    share by construction."""
    y0, y1, x0, x1 = bbox
    patch = image[y0:y1, x0:x1].astype(np.float64)
    h, w = patch.shape[:2]
    gy, gx = min(grid, h), min(grid, w)
    weight = np.ones((h, w)) if mask is None else mask[y0:y1, x0:x1].astype(np.float64)
    buckets_y = np.floor(np.arange(h) * gy / h).astype(int)
    buckets_x = np.floor(np.arange(w) * gx / w).astype(int)
    small = np.zeros((gy, gx, 3))
    counts = np.zeros((gy, gx, 1))
    np.add.at(small, (buckets_y[:, None], buckets_x[None, :]), patch * weight[:, :, None])
    np.add.at(counts, (buckets_y[:, None], buckets_x[None, :]), weight[:, :, None])
    covered = counts[:, :, 0] > 0
    small = np.where(counts > 0, small / np.maximum(counts, 1e-12), 0.0)
    for c in range(3):
        ch = small[:, :, c]
        vals = ch[covered]
        if vals.size == 0:
            continue
        small[:, :, c] = np.where(covered, (ch - vals.mean()) / (vals.std() + 1e-8), 0.0)
    return small.reshape(-1)


def fallback_check(asset: ObjectAsset, pose: AlignmentPose, target: AlignTarget,
                   tau: float, descriptor=None) -> tuple[bool, float]:
    """Similarity gate: cosine between descriptors of the re-rendered posed
    asset and the target's color crop. Accepts when score >= tau."""
    descriptor = descriptor or patch_descriptor
    cam = target.camera
    spec = RenderSpec(cam.width, cam.height, frozenset({COLOR, ALPHA}))
    batch, _ = project_posed(asset, pose, cam)
    out = composite(batch, spec)
    mask = target.silhouette > 0.5
    d_render = descriptor(out.color, target.bbox, mask)
    d_crop = descriptor(target.crop, target.bbox, mask)
    na = np.linalg.norm(d_render)
    nb = np.linalg.norm(d_crop)
    score = float(d_render @ d_crop / (na * nb)) if na > 1e-12 and nb > 1e-12 else 0.0
    return score >= tau, score


# ---------------------------------------------------------------------------
# end-to-end unfolding
# ---------------------------------------------------------------------------

@dataclass
class UnfoldReport:
    instance_id: int
    accepted: bool
    score: float
    pose: AlignmentPose | None
    align: AlignReport | None

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id, "accepted": self.accepted,
            "score": self.score,
            "pose": self.pose.to_json() if self.pose else None,
            "align": self.align.to_json() if self.align else None,
        }


def unfold_instance(world: World, instance_id: int, asset_path: str | Path,
                    cam: Camera, fine_iterations: int = 200,
                    descriptor=None) -> UnfoldReport:
    """Replace an instance's 2.5D splats with a posed 3D asset.

    Atomic: the world mutates only when the fallback gate accepts; on revert
    or any error the world is untouched."""
    if instance_id not in world.registry:
        raise KeyError(f"unknown instance {instance_id}")
    rec = world.registry[instance_id]
    if rec.state != RepState.LAYERED_25D:
        raise NotLayeredError(f"instance {instance_id} is already unfolded")
    asset = load_asset(asset_path)

    target = build_align_target(world, instance_id, cam)
    pose0 = coarse_align(asset, target, rec.center, rec.extent)
    pose, align = fine_align(asset, pose0, target, iterations=fine_iterations)
    accepted, score = fallback_check(asset, pose, target, world.config.tau,
                                     descriptor=descriptor)
    if not accepted:
        return UnfoldReport(instance_id=instance_id, accepted=False, score=score,
                            pose=pose, align=align)

    # commit: zero the 2.5D splats (stashing opacities), insert the posed asset
    stash: dict[int, np.ndarray] = {}
    for li, layer in enumerate(world.layers):
        m = layer.gaussians.instance_ids == instance_id
        if np.any(m):
            stash[li] = layer.gaussians.opacities[m].copy()
            layer.gaussians.opacities[m] = 0.0
    posed = transform_gaussians(asset.gaussians, pose.scale, pose.rotation(),
                                pose.translation)
    posed.instance_ids = np.full(len(posed), instance_id, dtype=np.int64)
    posed.gammas = np.tile(world.gamma_for(instance_id), (len(posed), 1))
    world.layers.append(SceneLayer(LayerKind.FOREGROUND, posed,
                                   source_step=max(l.source_step for l in world.layers)))
    world.assets[instance_id] = UnfoldedAsset(
        source=str(asset_path), scale=pose.scale, rotation=pose.rotation(),
        translation=pose.translation, asset_layer=len(world.layers) - 1,
        stash=stash,
    )
    rec.state = RepState.UNFOLDED_3D
    lo = posed.positions.min(axis=0)
    hi = posed.positions.max(axis=0)
    rec.center = (lo + hi) / 2
    rec.extent = hi - lo
    return UnfoldReport(instance_id=instance_id, accepted=True, score=score,
                        pose=pose, align=align)
