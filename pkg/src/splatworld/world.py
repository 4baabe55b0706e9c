"""World construction: bundle ingestion, layer initialization, incremental
growth, cross-view label propagation, IoU scoring, and persistence.

A scene bundle is an observation package (image, depth, normals, instance
mask, camera). Growing the world is reconstruction-then-observation: new
bundles are label-matched against the rendered state of the existing world,
only uncovered pixels spawn new gaussians, and the new layers are fitted
before being appended.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .scene_core import (
    EMPTY_LABEL,
    UNASSIGNED,
    Camera,
    Codebook,
    GaussianSet,
    LayerKind,
    RepState,
    SceneLayer,
    UnfoldedAsset,
    World,
    WorldConfig,
    quat_from_two_vectors,
)
from .rasterizer import (
    ALPHA,
    COLOR,
    DEPTH,
    EMBEDDING,
    RenderSpec,
    composite,
    load_label_png,
    load_raw_planar,
    project_set,
    render_labels,
    render_world,
    save_label_png,
    save_raw_planar,
)
from .fitting import FitConfig, FitReport, GroundTruthView, fit_layer

INIT_OPACITY = 0.8
COVERAGE_ALPHA = 0.5
DEPTH_CONSISTENCY_FRAC = 0.05


class BundleError(ValueError):
    """Scene bundle is malformed or inconsistent with the existing world."""


class PropagationError(ValueError):
    """Label propagation inputs disagree in shape."""


@dataclass
class SceneBundle:
    """One observation: image, geometry, labels, and the camera that saw it."""

    image: np.ndarray            # (H, W, 3) float in [0, 1]
    depth: np.ndarray            # (H, W) float32 view depth, positive
    normals: np.ndarray          # (H, W, 3) unit vectors, camera frame
    instance_mask: np.ndarray    # (H, W) int labels, EMPTY_LABEL allowed
    categories: dict[int, str]   # label -> category name
    camera: Camera
    layer_mask: np.ndarray | None = None  # (H, W) bool, True = foreground

    def validate(self) -> None:
        h, w = self.depth.shape
        if self.image.shape != (h, w, 3) or self.normals.shape != (h, w, 3) \
                or self.instance_mask.shape != (h, w):
            raise BundleError("bundle buffers disagree in resolution")
        if self.layer_mask is not None and self.layer_mask.shape != (h, w):
            raise BundleError("layer mask resolution mismatch")
        if (self.camera.height, self.camera.width) != (h, w):
            raise BundleError("camera resolution does not match buffers")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth <= 0):
            raise BundleError("depth must be finite and positive")
        norms = np.linalg.norm(self.normals, axis=2)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise BundleError("normals must be unit length within 1e-3")
        for label in np.unique(self.instance_mask):
            if label != EMPTY_LABEL and int(label) not in self.categories:
                raise BundleError(f"mask label {label} missing from categories")


@dataclass
class PropagationConfig:
    theta: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.theta <= 1.0:
            raise ValueError("theta must lie in (0, 1]")


# ---------------------------------------------------------------------------
# bundle disk format
# ---------------------------------------------------------------------------

def write_bundle(bundle: SceneBundle, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img = np.clip(bundle.image * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(directory / "image.png")
    save_raw_planar(directory / "depth.f32", {"depth": bundle.depth})
    save_raw_planar(directory / "normals.f32", {"normals": bundle.normals})
    save_label_png(directory / "instances.png", bundle.instance_mask)
    meta = {
        "categories": {str(k): v for k, v in bundle.categories.items()},
        "camera": bundle.camera.to_json(),
    }
    if bundle.layer_mask is not None:
        Image.fromarray(bundle.layer_mask.astype(np.uint8) * 255).save(directory / "layer.png")
        meta["layer_mask"] = "layer.png"
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def read_bundle(directory: str | Path) -> SceneBundle:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    image = np.asarray(Image.open(directory / "image.png"), dtype=np.float64) / 255.0
    depth = load_raw_planar(directory / "depth.f32")["depth"]
    normals = load_raw_planar(directory / "normals.f32")["normals"]
    mask = load_label_png(directory / "instances.png")
    layer_mask = None
    if "layer_mask" in meta:
        layer_mask = np.asarray(Image.open(directory / meta["layer_mask"])) > 127
    bundle = SceneBundle(
        image=image, depth=depth,
        normals=normals / np.linalg.norm(normals, axis=2, keepdims=True),
        instance_mask=mask,
        categories={int(k): v for k, v in meta["categories"].items()},
        camera=Camera.from_json(meta["camera"]),
        layer_mask=layer_mask,
    )
    bundle.validate()
    return bundle


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def split_layers(bundle: SceneBundle, fg_categories, edge_thresh: float = 0.05) -> np.ndarray:
    """Foreground mask: instances in the foreground category set whose
    boundary shows a depth discontinuity above edge_thresh * median depth.

    Falls back to all-background when nothing qualifies."""
    depth = bundle.depth
    mask = bundle.instance_mask
    fg = np.zeros(depth.shape, dtype=bool)
    threshold = edge_thresh * float(np.median(depth))
    fg_set = set(fg_categories)
    for label in np.unique(mask):
        if label == EMPTY_LABEL:
            continue
        if bundle.categories.get(int(label)) not in fg_set:
            continue
        inside = mask == label
        jumps = []
        for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
            out_side = np.roll(inside, shift, axis=axis)
            # pixels inside the instance whose rolled neighbor is outside
            edge = inside & ~out_side
            # wrap-around rows/cols are not real neighbors
            if axis == 0:
                edge[0 if shift == 1 else -1, :] = False
            else:
                edge[:, 0 if shift == 1 else -1] = False
            if not np.any(edge):
                continue
            neighbor_depth = np.roll(depth, shift, axis=axis)
            jumps.append(np.abs(depth[edge] - neighbor_depth[edge]))
        if not jumps:
            continue
        all_jumps = np.concatenate(jumps)
        if float(np.median(all_jumps)) > threshold:
            fg |= inside
    return fg


def backproject_pixels(cam: Camera, iy: np.ndarray, ix: np.ndarray, depth: np.ndarray):
    x_cam = np.stack([
        (ix - cam.cx) / cam.fx * depth,
        (iy - cam.cy) / cam.fy * depth,
        depth,
    ], axis=-1)
    return (x_cam - cam.translation) @ cam.rotation


def init_gaussians(bundle: SceneBundle, world: World,
                   label_to_id: dict[int, int],
                   pixel_mask: np.ndarray | None = None,
                   source_step: int = 0) -> tuple[SceneLayer, SceneLayer]:
    """One gaussian per pixel: back-projected position, normal-aligned thin
    axis, Nyquist lateral scale (half the back-projected pixel pitch), the
    pixel color, and the codebook embedding of the pixel's instance.

    Returns (foreground layer, background layer); either may be empty."""
    bundle.validate()
    cam = bundle.camera
    H, W = bundle.depth.shape
    sel = np.ones((H, W), dtype=bool) if pixel_mask is None else pixel_mask.astype(bool)
    iy, ix = np.nonzero(sel)
    z = bundle.depth[iy, ix]

    positions = backproject_pixels(cam, iy.astype(np.float64), ix.astype(np.float64), z)

    n_cam = bundle.normals[iy, ix]
    n_world = n_cam @ cam.rotation  # rows: R^T n
    quats = np.empty((len(iy), 4))
    for i, nw in enumerate(n_world):
        quats[i] = quat_from_two_vectors(np.array([0.0, 0.0, 1.0]), nw)

    lat_x = z / (2.0 * cam.fx)
    lat_y = z / (2.0 * cam.fy)
    eps = world.config.epsilon
    scales = np.stack([lat_x, lat_y, eps * np.minimum(lat_x, lat_y)], axis=1)

    colors = bundle.image[iy, ix]
    labels = bundle.instance_mask[iy, ix]
    C = world.config.embed_dim
    gammas = np.zeros((len(iy), C))
    ids = np.full(len(iy), UNASSIGNED, dtype=np.int64)
    for lbl, wid in label_to_id.items():
        m = labels == lbl
        if np.any(m):
            gammas[m] = world.gamma_for(wid)
            ids[m] = wid

    if bundle.layer_mask is not None:
        fg_mask = bundle.layer_mask[iy, ix]
    else:
        fg_mask = split_layers(bundle, world.config.fg_categories,
                               world.config.edge_thresh)[iy, ix]

    def make(selector):
        if not np.any(selector):
            return GaussianSet.empty(C)
        return GaussianSet(
            positions[selector], quats[selector], scales[selector],
            np.full(int(selector.sum()), INIT_OPACITY), colors[selector],
            gammas[selector], ids[selector],
        )

    fg_layer = SceneLayer(LayerKind.FOREGROUND, make(fg_mask), source_step)
    bg_layer = SceneLayer(LayerKind.BACKGROUND, make(~fg_mask), source_step)
    return fg_layer, bg_layer


# ---------------------------------------------------------------------------
# propagation and metrics
# ---------------------------------------------------------------------------

def propagate_labels(mask_new: np.ndarray, rendered_prev: np.ndarray,
                     cfg: PropagationConfig | None = None) -> dict[int, int | None]:
    """Match each new instance to the previous label covering most of it.

    Returns {new_label: previous_id} when the covered fraction of the new
    instance reaches theta, else {new_label: None} (allocate fresh). Ties
    resolve to the smaller previous id."""
    cfg = cfg or PropagationConfig()
    if mask_new.shape != rendered_prev.shape:
        raise PropagationError("mask and rendered labels disagree in resolution")
    remap: dict[int, int | None] = {}
    prev_valid = rendered_prev != EMPTY_LABEL
    for label in np.unique(mask_new):
        if label == EMPTY_LABEL:
            continue
        inside = mask_new == label
        total = int(inside.sum())
        overlap_prev = rendered_prev[inside & prev_valid]
        if overlap_prev.size == 0:
            remap[int(label)] = None
            continue
        counts = np.bincount(overlap_prev)
        j = int(np.argmax(counts))  # ties: smaller id wins
        frac = counts[j] / total
        remap[int(label)] = j if frac >= cfg.theta else None
    return remap


def iou(pred_labels: np.ndarray, gt_labels: np.ndarray) -> tuple[dict[int, float], float]:
    """Greedy maximum-overlap matching between predicted and ground-truth
    instances; unmatched ground-truth instances score zero.

    Returns (per-gt-instance IoU map, mean over gt instances)."""
    if pred_labels.shape != gt_labels.shape:
        raise ValueError("label maps disagree in resolution")
    gt_ids = [int(x) for x in np.unique(gt_labels) if x != EMPTY_LABEL]
    pred_ids = [int(x) for x in np.unique(pred_labels) if x != EMPTY_LABEL]
    if not gt_ids:
        return {}, 1.0 if not pred_ids else 0.0

    inter: dict[tuple[int, int], int] = {}
    both = (gt_labels != EMPTY_LABEL) & (pred_labels != EMPTY_LABEL)
    g = gt_labels[both]
    p = pred_labels[both]
    if g.size:
        pairs, counts = np.unique(np.stack([g, p]), axis=1, return_counts=True)
        for (gi, pi), c in zip(pairs.T, counts):
            inter[(int(gi), int(pi))] = int(c)

    gt_sizes = {i: int(np.count_nonzero(gt_labels == i)) for i in gt_ids}
    pred_sizes = {i: int(np.count_nonzero(pred_labels == i)) for i in pred_ids}

    order = sorted(inter.items(), key=lambda kv: (-kv[1], kv[0][0], kv[0][1]))
    used_gt: set[int] = set()
    used_pred: set[int] = set()
    scores = {i: 0.0 for i in gt_ids}
    for (gi, pi), c in order:
        if gi in used_gt or pi in used_pred:
            continue
        used_gt.add(gi)
        used_pred.add(pi)
        union = gt_sizes[gi] + pred_sizes[pi] - c
        scores[gi] = c / union if union else 0.0
    return scores, float(np.mean([scores[i] for i in gt_ids]))


# ---------------------------------------------------------------------------
# world growth
# ---------------------------------------------------------------------------

def world_init(bundle: SceneBundle, config: WorldConfig | None = None,
               fit_cfg: FitConfig | None = None, fit: bool = True) -> World:
    """Build a fresh world from the first bundle and optionally fit it."""
    bundle.validate()
    world = World(config or WorldConfig())
    label_to_id: dict[int, int] = {}
    for label in sorted(int(x) for x in np.unique(bundle.instance_mask) if x != EMPTY_LABEL):
        rec = world.allocate_instance(bundle.categories[label])
        label_to_id[label] = rec.id
    fg, bg = init_gaussians(bundle, world, label_to_id, source_step=0)
    for layer in (fg, bg):
        if len(layer.gaussians) > 0:
            world.layers.append(layer)
    for wid in label_to_id.values():
        world.refresh_instance_geometry(wid)
    if fit:
        _fit_new_layers(world, world.layers, bundle, label_to_id, fit_cfg)
    return world


def _fit_new_layers(world: World, layers, bundle: SceneBundle,
                    label_to_id: dict[int, int], fit_cfg: FitConfig | None,
                    valid_mask: np.ndarray | None = None) -> list[FitReport]:
    id_mask = np.full(bundle.instance_mask.shape, EMPTY_LABEL, dtype=np.int64)
    for lbl, wid in label_to_id.items():
        id_mask[bundle.instance_mask == lbl] = wid
    id_to_index = {rec.id: rec.codebook_index for rec in world.registry.values()}
    view = GroundTruthView(image=bundle.image, instance_mask=id_mask, valid_mask=valid_mask)
    reports = []
    for layer in layers:
        if len(layer.gaussians) == 0:
            continue
        reports.append(fit_layer(layer, [(view, bundle.camera)],
                                 world.codebook, id_to_index, fit_cfg))
    return reports


def extend_world(world: World, bundle: SceneBundle, cam_next: Camera | None = None,
                 fit_cfg: FitConfig | None = None, fit: bool = True) -> dict:
    """Grow the world with a new observation.

    Renders the current world at the new camera, re-assigns the bundle's
    instance labels by pixel overlap, spawns gaussians only on uncovered
    pixels, fits the new layers, and appends them. Returns a summary dict."""
    bundle.validate()
    cam = cam_next or bundle.camera
    if (cam.height, cam.width) != bundle.depth.shape:
        raise PropagationError("camera resolution does not match the bundle")

    step = 1 + max((l.source_step for l in world.layers), default=-1)
    if world.layers:
        target = render_world(world, cam, channels={DEPTH, ALPHA, EMBEDDING})
        alpha = target.alpha
        flat = target.embedding.reshape(-1, world.config.embed_dim)
        idx_labels, _ = world.codebook.decode_batch(flat)
        covered = alpha.reshape(-1) >= COVERAGE_ALPHA
        lut = np.full(world.codebook.size, EMPTY_LABEL, dtype=np.int64)
        for rec in world.registry.values():
            lut[rec.codebook_index] = rec.id
        prev_ids = np.where(covered & (idx_labels >= 0), lut[np.maximum(idx_labels, 0)], EMPTY_LABEL)
        prev_labels = prev_ids.reshape(alpha.shape)

        overlap = alpha >= COVERAGE_ALPHA
        if np.count_nonzero(overlap) >= 16:
            expected = np.where(overlap, target.depth / np.maximum(alpha, 1e-9), 0.0)
            rel = np.abs(expected[overlap] - bundle.depth[overlap]) / bundle.depth[overlap]
            if float(np.median(rel)) > DEPTH_CONSISTENCY_FRAC:
                raise BundleError(
                    "bundle depth is inconsistent with the rendered world "
                    f"(median discrepancy {float(np.median(rel)):.3f})"
                )
    else:
        alpha = np.zeros(bundle.depth.shape)
        prev_labels = np.full(bundle.depth.shape, EMPTY_LABEL, dtype=np.int64)

    remap = propagate_labels(bundle.instance_mask, prev_labels,
                             PropagationConfig(world.config.theta))
    label_to_id: dict[int, int] = {}
    fresh = []
    for label, prev in remap.items():
        if prev is not None:
            label_to_id[label] = prev
        else:
            rec = world.allocate_instance(bundle.categories[label])
            label_to_id[label] = rec.id
            fresh.append(rec.id)

    new_pixels = alpha < COVERAGE_ALPHA
    n_new = int(np.count_nonzero(new_pixels))
    new_layers: list[SceneLayer] = []
    if n_new > 0:
        fg, bg = init_gaussians(bundle, world, label_to_id,
                                pixel_mask=new_pixels, source_step=step)
        for layer in (fg, bg):
            if len(layer.gaussians) > 0:
                new_layers.append(layer)
        if fit and new_layers:
            _fit_new_layers(world, new_layers, bundle, label_to_id, fit_cfg,
                            valid_mask=new_pixels)
        world.layers.extend(new_layers)
    for wid in set(label_to_id.values()):
        world.refresh_instance_geometry(wid)
    return {
        "step": step, "new_gaussians": sum(len(l.gaussians) for l in new_layers),
        "remap": remap, "fresh_ids": fresh,
    }


# ---------------------------------------------------------------------------
# world persistence
# ---------------------------------------------------------------------------

_FIELD_ORDER = "position(3) orientation(4) scale(3) opacity(1) color(3) gamma(C) instance_id(1)"


def _gaussians_to_rows(gs: GaussianSet) -> np.ndarray:
    return np.concatenate([
        gs.positions, gs.quats, gs.scales, gs.opacities[:, None],
        gs.colors, gs.gammas, gs.instance_ids[:, None].astype(np.float64),
    ], axis=1).astype("<f4")


def _gaussians_from_rows(rows: np.ndarray, embed_dim: int) -> GaussianSet:
    rows = rows.astype(np.float64)
    at = 0
    def take(n):
        nonlocal at
        block = rows[:, at:at + n]
        at += n
        return block
    pos = take(3); quat = take(4); scale = take(3); opac = take(1)[:, 0]
    color = take(3); gamma = take(embed_dim); iid = take(1)[:, 0].astype(np.int64)
    return GaussianSet(pos, quat, scale, opac, color, gamma, iid)


def world_state_bytes(world: World) -> bytes:
    """Canonical byte serialization of the full world state.

    Pure function of the in-memory world: used by atomicity tests and the
    service to detect real state changes. Layout mirrors the on-disk format
    (sorted JSON manifest + concatenated float32 gaussian blocks)."""
    manifest = _world_manifest(world, blocks_inline=True)
    parts = [json.dumps(manifest, sort_keys=True).encode()]
    for layer in world.layers:
        parts.append(_gaussians_to_rows(layer.gaussians).tobytes())
    for iid in sorted(world.assets):
        for lidx in sorted(world.assets[iid].stash):
            parts.append(world.assets[iid].stash[lidx].astype("<f4").tobytes())
    return b"\0".join(parts)


def _world_manifest(world: World, blocks_inline: bool = False, seq: int = 0) -> dict:
    layers = []
    for i, layer in enumerate(world.layers):
        entry = {
            "kind": layer.kind.value, "source_step": layer.source_step,
            "count": len(layer.gaussians),
        }
        if not blocks_inline:
            entry["file"] = f"layer_{i:03d}_s{seq}.bin"
        layers.append(entry)
    assets = []
    for iid in sorted(world.assets):
        a = world.assets[iid]
        entry = {
            "id": iid, "source": a.source, "scale": a.scale,
            "rotation": np.asarray(a.rotation).tolist(),
            "translation": np.asarray(a.translation).tolist(),
            "asset_layer": a.asset_layer,
            "stash_layers": sorted(a.stash),
        }
        if not blocks_inline:
            entry["stash_files"] = {
                str(l): f"stash_{iid}_{l}_s{seq}.f32" for l in sorted(a.stash)
            }
        assets.append(entry)
    return {
        "format": "splatworld-1",
        "field_order": _FIELD_ORDER,
        "config": world.config.to_json(),
        "codebook": {"K": world.codebook.size, "C": world.codebook.dim,
                     "delta": world.codebook.delta, "seed": world.codebook.seed},
        "next_id": world._next_id,
        "registry": [world.registry[i].to_json() for i in sorted(world.registry)],
        "layers": layers,
        "assets": assets,
    }


def save_world(world: World, directory: str | Path) -> None:
    """Persist atomically: new blocks under fresh names, manifest replaced
    last, stale blocks garbage-collected only after the manifest swap."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    seq = 0
    manifest_path = directory / "world.json"
    if manifest_path.exists():
        try:
            seq = json.loads(manifest_path.read_text()).get("save_seq", 0) + 1
        except (json.JSONDecodeError, OSError):
            seq = int(1e6)  # unreadable manifest: pick names that cannot collide
    manifest = _world_manifest(world, seq=seq)
    manifest["save_seq"] = seq

    for i, layer in enumerate(world.layers):
        _gaussians_to_rows(layer.gaussians).tofile(directory / f"layer_{i:03d}_s{seq}.bin")
    for iid in sorted(world.assets):
        for lidx, opac in world.assets[iid].stash.items():
            opac.astype("<f4").tofile(directory / f"stash_{iid}_{lidx}_s{seq}.f32")
    world.codebook.save(directory / "codebook.json")

    tmp = directory / "world.json.tmp"
    tmp.write_text(json.dumps(manifest, sort_keys=True, indent=1))
    os.replace(tmp, manifest_path)

    keep = {f"layer_{i:03d}_s{seq}.bin" for i in range(len(world.layers))}
    keep |= {f"stash_{iid}_{l}_s{seq}.f32" for iid in world.assets for l in world.assets[iid].stash}
    for path in directory.glob("layer_*.bin"):
        if path.name not in keep:
            path.unlink()
    for path in directory.glob("stash_*.f32"):
        if path.name not in keep:
            path.unlink()


def load_world(directory: str | Path) -> World:
    directory = Path(directory)
    manifest = json.loads((directory / "world.json").read_text())
    config = WorldConfig.from_json(manifest["config"])
    codebook = Codebook.load(directory / "codebook.json")
    cb_head = manifest["codebook"]
    if (codebook.size, codebook.dim) != (cb_head["K"], cb_head["C"]):
        raise ValueError("codebook sidecar disagrees with the world manifest")
    world = World(config, codebook)
    from .scene_core import InstanceRecord
    for rec in manifest["registry"]:
        record = InstanceRecord.from_json(rec)
        world.registry[record.id] = record
    world._next_id = manifest["next_id"]
    embed_dim = config.embed_dim
    row_len = 3 + 4 + 3 + 1 + 3 + embed_dim + 1
    for entry in manifest["layers"]:
        rows = np.fromfile(directory / entry["file"], dtype="<f4").reshape(-1, row_len)
        if len(rows) != entry["count"]:
            raise ValueError(f"layer block {entry['file']} has wrong row count")
        world.layers.append(SceneLayer(
            LayerKind(entry["kind"]), _gaussians_from_rows(rows, embed_dim),
            entry["source_step"],
        ))
    for entry in manifest["assets"]:
        stash = {}
        for l in entry["stash_layers"]:
            fname = entry["stash_files"][str(l)]
            stash[int(l)] = np.fromfile(directory / fname, dtype="<f4").astype(np.float64)
        world.assets[entry["id"]] = UnfoldedAsset(
            source=entry["source"], scale=entry["scale"],
            rotation=np.asarray(entry["rotation"]),
            translation=np.asarray(entry["translation"]),
            asset_layer=entry["asset_layer"], stash=stash,
        )
    world.validate()
    return world
