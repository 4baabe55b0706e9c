"""Software rasterization of Gaussian layers.

Forward pipeline: perspective projection of each splat to a 2D mean and
covariance (first-order propagation through the pinhole Jacobian), then
front-to-back alpha compositing per pixel. One weight computation drives
every payload channel: color, instance embedding, and expected depth all
accumulate with the same transmittance weights T_n * alpha_n.

Two compositors share one contract: `composite` is the vectorized fast path
(per-gaussian footprint pair lists, early transmittance exit), while
`composite_bruteforce` is the reference oracle (per-pixel full sort, no early
exit, plain float64 accumulation). Tests hold them to 1e-5 agreement.

The depth ordering is canonical: ascending view depth, ties broken by the
splat's index in the input collection, so outputs do not depend on any
internal scheduling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .scene_core import Camera, GaussianSet, covariances_from_quat_scale, EMPTY_LABEL

ALPHA_CLAMP = 0.99
# Transmittance early-exit. Kept below the 1e-5 oracle-agreement tolerance so
# dropped tail contributions can never exceed it.
T_STOP = 1e-6
COV_REG = 1e-6
FOOTPRINT_SIGMA = 3.0

COLOR = "color"
EMBEDDING = "embedding"
DEPTH = "depth"
ALPHA = "alpha"
ALL_CHANNELS = frozenset({COLOR, EMBEDDING, DEPTH, ALPHA})


class SingularCovarianceError(RuntimeError):
    """Projected covariance not invertible even after regularization."""


class EmptySubsetError(ValueError):
    """Rendering was asked for an empty gaussian collection."""


class StateError(RuntimeError):
    """Backward was called without a retained forward pass."""


class _Culled:
    __slots__ = ()

    def __repr__(self):
        return "CULLED"


CULLED = _Culled()


@dataclass
class ProjectedGaussian:
    """A single splat after projection: 2D mean, 2D covariance, view depth."""

    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    opacity: float
    color: np.ndarray
    gamma: np.ndarray
    source_index: int = 0


@dataclass
class RenderSpec:
    width: int
    height: int
    channels: frozenset = field(default_factory=lambda: ALL_CHANNELS)


@dataclass
class RenderTarget:
    width: int
    height: int
    channels: frozenset
    color: np.ndarray | None = None       # (H, W, 3)
    embedding: np.ndarray | None = None   # (H, W, C)
    depth: np.ndarray | None = None       # (H, W), transmittance-weighted view depth
    alpha: np.ndarray | None = None       # (H, W), 1 - prod(1 - alpha_n)


class ProjectedBatch:
    """Projected splats surviving culling, plus intermediates for backward.

    `valid` maps rows back to indices in the originally supplied collection.
    """

    __slots__ = (
        "mean2d", "cov2d", "conic", "z", "radius", "valid", "n_input",
        "opacity", "color", "gamma",
        "t_cam", "jac", "cov3d", "cam", "quats", "scales", "raw_opacity",
    )

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw.get(k))

    def __len__(self):
        return 0 if self.mean2d is None else len(self.mean2d)

    def primitive(self, row: int) -> ProjectedGaussian:
        return ProjectedGaussian(
            mean2d=self.mean2d[row].copy(), cov2d=self.cov2d[row].copy(),
            view_depth=float(self.z[row]), opacity=float(self.opacity[row]),
            color=self.color[row].copy(), gamma=self.gamma[row].copy(),
            source_index=int(self.valid[row]),
        )


def _footprint_radius(cov2d_reg: np.ndarray) -> np.ndarray:
    a = cov2d_reg[:, 0, 0]
    b = cov2d_reg[:, 0, 1]
    c = cov2d_reg[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return FOOTPRINT_SIGMA * np.sqrt(np.maximum(lam_max, 0.0))


def project_arrays(
    means_world: np.ndarray,
    cov3d_world: np.ndarray,
    cam: Camera,
    opacity: np.ndarray,
    color: np.ndarray,
    gamma: np.ndarray,
) -> ProjectedBatch:
    """Project world-frame gaussians; culls by depth clip and viewport footprint."""
    n = len(means_world)
    t = means_world @ cam.rotation.T + cam.translation
    z = t[:, 2]
    in_depth = (z > cam.near) & (z < cam.far)

    # guard divisions for culled rows
    zs = np.where(in_depth, z, 1.0)
    mx = cam.fx * t[:, 0] / zs + cam.cx
    my = cam.fy * t[:, 1] / zs + cam.cy

    inv_z = 1.0 / zs
    inv_z2 = inv_z * inv_z
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = cam.fx * inv_z
    jac[:, 0, 2] = -cam.fx * t[:, 0] * inv_z2
    jac[:, 1, 1] = cam.fy * inv_z
    jac[:, 1, 2] = -cam.fy * t[:, 1] * inv_z2

    m = jac @ cam.rotation[None, :, :]
    cov2d = m @ cov3d_world @ np.swapaxes(m, 1, 2)
    cov2d_reg = cov2d + COV_REG * np.eye(2)

    radius = _footprint_radius(cov2d_reg)
    x0 = np.ceil(mx - radius)
    x1 = np.floor(mx + radius)
    y0 = np.ceil(my - radius)
    y1 = np.floor(my + radius)
    on_screen = (x1 >= 0) & (x0 <= cam.width - 1) & (y1 >= 0) & (y0 <= cam.height - 1)
    keep = in_depth & on_screen
    idx = np.flatnonzero(keep)

    det = (
        cov2d_reg[idx, 0, 0] * cov2d_reg[idx, 1, 1]
        - cov2d_reg[idx, 0, 1] * cov2d_reg[idx, 1, 0]
    )
    if np.any(~np.isfinite(det)) or np.any(det <= 0):
        raise SingularCovarianceError("projected covariance not invertible after regularization")
    conic = np.empty((len(idx), 2, 2))
    conic[:, 0, 0] = cov2d_reg[idx, 1, 1] / det
    conic[:, 1, 1] = cov2d_reg[idx, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d_reg[idx, 0, 1] / det

    return ProjectedBatch(
        mean2d=np.stack([mx[idx], my[idx]], axis=1),
        cov2d=cov2d_reg[idx],
        conic=conic,
        z=z[idx],
        radius=radius[idx],
        valid=idx,
        n_input=n,
        opacity=np.asarray(opacity, dtype=np.float64)[idx],
        color=np.asarray(color, dtype=np.float64)[idx],
        gamma=np.asarray(gamma, dtype=np.float64).reshape(n, -1)[idx],
        t_cam=t[idx],
        jac=jac[idx],
        cov3d=np.asarray(cov3d_world)[idx],
        cam=cam,
    )


def project_set(gs: GaussianSet, cam: Camera) -> ProjectedBatch:
    """Project a gaussian batch, retaining quats/scales for the backward pass."""
    cov3d = covariances_from_quat_scale(gs.quats, gs.scales)
    batch = project_arrays(gs.positions, cov3d, cam, gs.opacities, gs.colors, gs.gammas)
    batch.quats = gs.quats[batch.valid]
    batch.scales = gs.scales[batch.valid]
    return batch


def project(g, cam: Camera):
    """Project one primitive; returns a ProjectedGaussian or CULLED."""
    gs = GaussianSet(
        g.position[None], g.orientation[None], g.scale[None],
        np.array([g.opacity]), g.color[None], g.gamma[None],
        np.array([g.instance_id]),
    )
    batch = project_set(gs, cam)
    if len(batch) == 0:
        return CULLED
    return batch.primitive(0)


class CompositeCache:
    """Retained forward state: sorted pair lists and per-pixel transmittances."""

    __slots__ = (
        "batch", "spec", "pair_gauss", "pair_pix", "pair_d", "pair_G",
        "pair_alpha", "pair_raw_unclamped", "pair_Tin", "pair_w", "pair_active",
        "pix_T_stop", "group_row", "group_rank", "n_groups", "max_rank",
    )

    def __init__(self, **kw):
        for k in self.__slots__:
            setattr(self, k, kw.get(k))


def _build_pairs(batch: ProjectedBatch, width: int, height: int):
    """Per-gaussian footprint boxes expanded into (gaussian, pixel) pairs."""
    mx, my = batch.mean2d[:, 0], batch.mean2d[:, 1]
    r = batch.radius
    x0 = np.maximum(np.ceil(mx - r), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mx + r), width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(my - r), 0).astype(np.int64)
    y1 = np.minimum(np.floor(my + r), height - 1).astype(np.int64)
    wx = x1 - x0 + 1
    wy = y1 - y0 + 1
    counts = np.maximum(wx, 0) * np.maximum(wy, 0)
    total = int(counts.sum())
    if total == 0:
        return (np.zeros(0, np.int64),) * 3
    gidx = np.repeat(np.arange(len(mx)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    k = np.arange(total) - np.repeat(offsets, counts)
    wxg = wx[gidx]
    px = x0[gidx] + k % wxg
    py = y0[gidx] + k // wxg
    return gidx, px, py


def composite(
    projected,
    spec: RenderSpec,
    retain: bool = False,
):
    """Depth-sorted front-to-back alpha compositing.

    Per pixel u: alpha_n(u) = opacity_n * exp(-0.5 d^T conic d) clamped to
    [0, 0.99]; weights w_n = T_n alpha_n with T_n the product of (1 - alpha_m)
    over splats in front; contributions stop once T drops below T_STOP, and
    the reported alpha is 1 minus the transmittance at that stop, which keeps
    sum(w) + T_stop = 1 an exact partition.

    Returns the RenderTarget, or (RenderTarget, CompositeCache) when retain=True.
    """
    batch = _as_batch(projected)
    H, W = spec.height, spec.width
    C = batch.gamma.shape[1] if len(batch) else 0
    if len(batch) and not np.all(np.isfinite(batch.z)):
        raise ValueError("view depths must be finite for depth sorting")

    gidx, px, py = _build_pairs(batch, W, H)
    pix = py * W + px

    if len(gidx) == 0:
        target = _empty_target(spec, C)
        if retain:
            return target, CompositeCache(batch=batch, spec=spec, pair_gauss=gidx)
        return target

    d = np.stack([px - batch.mean2d[gidx, 0], py - batch.mean2d[gidx, 1]], axis=1)
    con = batch.conic[gidx]
    power = -0.5 * (
        con[:, 0, 0] * d[:, 0] ** 2
        + 2.0 * con[:, 0, 1] * d[:, 0] * d[:, 1]
        + con[:, 1, 1] * d[:, 1] ** 2
    )
    G = np.exp(power)
    alpha_raw = batch.opacity[gidx] * G
    alpha = np.minimum(alpha_raw, ALPHA_CLAMP)

    # canonical order: pixel, then view depth, then source index
    order = np.lexsort((batch.valid[gidx], batch.z[gidx], pix))
    gidx, pix, d, G, alpha, alpha_raw = (
        gidx[order], pix[order], d[order], G[order], alpha[order], alpha_raw[order]
    )

    new_group = np.empty(len(pix), dtype=bool)
    new_group[0] = True
    new_group[1:] = pix[1:] != pix[:-1]
    group_row = np.cumsum(new_group) - 1
    n_groups = int(group_row[-1]) + 1
    group_start = np.flatnonzero(new_group)
    rank = np.arange(len(pix)) - group_start[group_row]
    max_rank = int(rank.max()) + 1

    # padded per-pixel sequences for transmittance products
    alpha_pad = np.zeros((n_groups, max_rank))
    alpha_pad[group_row, rank] = alpha
    one_minus = 1.0 - alpha_pad
    cum = np.cumprod(one_minus, axis=1)
    Tin_pad = np.ones_like(cum)
    Tin_pad[:, 1:] = cum[:, :-1]
    active_pad = Tin_pad >= T_STOP
    has_pair = np.zeros((n_groups, max_rank), dtype=bool)
    has_pair[group_row, rank] = True
    active_pad &= has_pair
    # transmittance remaining after every processed (active) contribution
    T_stop_rows = np.prod(np.where(active_pad, one_minus, 1.0), axis=1)

    Tin = Tin_pad[group_row, rank]
    active = active_pad[group_row, rank]
    w = np.where(active, Tin * alpha, 0.0)

    pix_rows = pix[group_start]
    target = _empty_target(spec, C)
    flat_alpha = np.zeros(H * W)
    flat_alpha[pix_rows] = 1.0 - T_stop_rows
    target.alpha = flat_alpha.reshape(H, W)

    if COLOR in spec.channels:
        buf = np.zeros((H * W, 3))
        cols = batch.color[gidx]
        for ch in range(3):
            buf[:, ch] = np.bincount(pix, weights=w * cols[:, ch], minlength=H * W)
        target.color = buf.reshape(H, W, 3)
    if EMBEDDING in spec.channels and C > 0:
        buf = np.zeros((H * W, C))
        gam = batch.gamma[gidx]
        for ch in range(C):
            buf[:, ch] = np.bincount(pix, weights=w * gam[:, ch], minlength=H * W)
        target.embedding = buf.reshape(H, W, C)
    if DEPTH in spec.channels:
        zpay = batch.z[gidx]
        target.depth = np.bincount(pix, weights=w * zpay, minlength=H * W).reshape(H, W)

    if not retain:
        return target
    pix_T_stop = np.ones(H * W)
    pix_T_stop[pix_rows] = T_stop_rows
    cache = CompositeCache(
        batch=batch, spec=spec, pair_gauss=gidx, pair_pix=pix, pair_d=d,
        pair_G=G, pair_alpha=alpha, pair_raw_unclamped=alpha_raw, pair_Tin=Tin,
        pair_w=w, pair_active=active, pix_T_stop=pix_T_stop,
        group_row=group_row, group_rank=rank, n_groups=n_groups, max_rank=max_rank,
    )
    return target, cache


def composite_bruteforce(projected, spec: RenderSpec) -> RenderTarget:
    """Reference compositor: per-pixel full sort, no early exit, float64 sums."""
    batch = _as_batch(projected)
    H, W = spec.height, spec.width
    C = batch.gamma.shape[1] if len(batch) else 0
    target = _empty_target(spec, C)
    target.alpha = np.zeros((H, W))
    if COLOR in spec.channels:
        target.color = np.zeros((H, W, 3))
    if EMBEDDING in spec.channels:
        target.embedding = np.zeros((H, W, C))
    if DEPTH in spec.channels:
        target.depth = np.zeros((H, W))
    if len(batch) == 0:
        return target

    mx, my = batch.mean2d[:, 0], batch.mean2d[:, 1]
    r = batch.radius
    order_key = np.argsort(batch.z, kind="stable")  # pre-sorted by depth; valid ascends within ties
    for pyx in range(H):
        for pxx in range(W):
            members = [
                i for i in order_key
                if abs(pxx - mx[i]) <= r[i] and abs(pyx - my[i]) <= r[i]
            ]
            T = 1.0
            for i in members:
                dx = pxx - mx[i]
                dy = pyx - my[i]
                con = batch.conic[i]
                p = -0.5 * (con[0, 0] * dx * dx + 2 * con[0, 1] * dx * dy + con[1, 1] * dy * dy)
                a = min(batch.opacity[i] * np.exp(p), ALPHA_CLAMP)
                wgt = T * a
                if target.color is not None:
                    target.color[pyx, pxx] += wgt * batch.color[i]
                if target.embedding is not None:
                    target.embedding[pyx, pxx] += wgt * batch.gamma[i]
                if target.depth is not None:
                    target.depth[pyx, pxx] += wgt * batch.z[i]
                T *= 1.0 - a
            target.alpha[pyx, pxx] = 1.0 - T
    return target


def _as_batch(projected) -> ProjectedBatch:
    if isinstance(projected, ProjectedBatch):
        return projected
    prims = list(projected)
    n = len(prims)
    if n == 0:
        return ProjectedBatch(
            mean2d=np.zeros((0, 2)), cov2d=np.zeros((0, 2, 2)), conic=np.zeros((0, 2, 2)),
            z=np.zeros(0), radius=np.zeros(0), valid=np.zeros(0, np.int64), n_input=0,
            opacity=np.zeros(0), color=np.zeros((0, 3)), gamma=np.zeros((0, 0)),
        )
    cov2d = np.stack([p.cov2d for p in prims]) + COV_REG * np.eye(2)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    if np.any(det <= 0) or np.any(~np.isfinite(det)):
        raise SingularCovarianceError("projected covariance not invertible after regularization")
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = conic[:, 1, 0] = -cov2d[:, 0, 1] / det
    return ProjectedBatch(
        mean2d=np.stack([p.mean2d for p in prims]),
        cov2d=cov2d,
        conic=conic,
        z=np.array([p.view_depth for p in prims]),
        radius=_footprint_radius(cov2d),
        valid=np.array([p.source_index for p in prims], dtype=np.int64),
        n_input=n,
        opacity=np.array([p.opacity for p in prims]),
        color=np.stack([p.color for p in prims]),
        gamma=np.stack([np.asarray(p.gamma, dtype=np.float64) for p in prims]),
    )


def _empty_target(spec: RenderSpec, embed_dim: int) -> RenderTarget:
    H, W = spec.height, spec.width
    t = RenderTarget(width=W, height=H, channels=spec.channels, alpha=np.zeros((H, W)))
    if COLOR in spec.channels:
        t.color = np.zeros((H, W, 3))
    if EMBEDDING in spec.channels:
        t.embedding = np.zeros((H, W, max(embed_dim, 0)))
    if DEPTH in spec.channels:
        t.depth = np.zeros((H, W))
    return t


# ---------------------------------------------------------------------------
# channel renders used across the package
# ---------------------------------------------------------------------------

def render_world(world, cam: Camera, channels=ALL_CHANNELS, retain: bool = False):
    gs = world.all_gaussians()
    spec = RenderSpec(cam.width, cam.height, frozenset(channels))
    if len(gs) == 0:
        return composite(_as_batch([]), spec, retain=retain)
    batch = project_set(gs, cam)
    return composite(batch, spec, retain=retain)


def render_labels(world, cam: Camera, alpha_min: float | None = None):
    """Per-pixel instance labels by nearest-codebook decode of the embedding.

    Pixels whose accumulated alpha falls below alpha_min are EMPTY.
    Returns (labels HxW int64, scores HxW float64).
    """
    alpha_min = world.config.alpha_min if alpha_min is None else alpha_min
    target = render_world(world, cam, channels={EMBEDDING, ALPHA})
    H, W = cam.height, cam.width
    flat = target.embedding.reshape(-1, target.embedding.shape[-1])
    idx_labels, scores = world.codebook.decode_batch(flat)
    covered = target.alpha.reshape(-1) >= alpha_min
    labels = np.where(covered, _codebook_to_instance(world, idx_labels), EMPTY_LABEL)
    scores = np.where(covered, scores, 0.0)
    return labels.reshape(H, W), scores.reshape(H, W)


def _codebook_to_instance(world, idx_labels: np.ndarray) -> np.ndarray:
    """Map decoded codebook indices to registry instance ids."""
    lut = np.full(world.codebook.size, EMPTY_LABEL, dtype=np.int64)
    for rec in world.registry.values():
        lut[rec.codebook_index] = rec.id
    out = np.full(len(idx_labels), EMPTY_LABEL, dtype=np.int64)
    ok = idx_labels >= 0
    out[ok] = lut[idx_labels[ok]]
    return out


def render_depth_silhouette(subset: GaussianSet, cam: Camera, retain: bool = False):
    """Accumulated depth and silhouette (alpha) of a gaussian subset.

    Both buffers are differentiable through the compositing backward; depth is
    the raw transmittance-weighted accumulation, left unmasked so its adjoint
    is well defined everywhere (empty pixels carry depth 0 and silhouette 0).
    """
    if len(subset) == 0:
        raise EmptySubsetError("cannot render an empty gaussian subset")
    batch = project_set(subset, cam)
    spec = RenderSpec(cam.width, cam.height, frozenset({DEPTH, ALPHA}))
    out = composite(batch, spec, retain=retain)
    if retain:
        target, cache = out
        return target.depth, target.alpha, cache
    return out.depth, out.alpha


# ---------------------------------------------------------------------------
# buffer export
# ---------------------------------------------------------------------------

def save_color_png(path: str | Path, color: np.ndarray) -> None:
    arr = np.clip(color * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_label_png(path: str | Path, labels: np.ndarray) -> None:
    """16-bit label PNG; EMPTY (-1) stores as 65535."""
    arr = labels.astype(np.int64).copy()
    arr[arr < 0] = 65535
    Image.fromarray(arr.astype(np.uint16)).save(path)


def load_label_png(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.int64)
    arr[arr == 65535] = EMPTY_LABEL
    return arr


def save_raw_planar(path: str | Path, planes: dict[str, np.ndarray]) -> None:
    """Little-endian float32 planar dump with a JSON sidecar."""
    path = Path(path)
    names = sorted(planes)
    first = planes[names[0]]
    h, w = first.shape[:2]
    blocks = []
    for name in names:
        plane = planes[name]
        if plane.shape[:2] != (h, w):
            raise ValueError("all planes must share a resolution")
        blocks.append(np.ascontiguousarray(plane, dtype="<f4").reshape(h, w, -1))
    data = np.concatenate([b.transpose(2, 0, 1).reshape(-1, h, w) for b in blocks], axis=0)
    data.astype("<f4").tofile(path)
    sidecar = {
        "width": w, "height": h,
        "channels": {n: planes[n].reshape(h, w, -1).shape[2] for n in names},
        "order": names,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True))


def load_raw_planar(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    h, w = sidecar["height"], sidecar["width"]
    data = np.fromfile(path, dtype="<f4")
    total = sum(sidecar["channels"].values())
    data = data.reshape(total, h, w)
    out = {}
    at = 0
    for name in sidecar["order"]:
        c = sidecar["channels"][name]
        plane = data[at:at + c].transpose(1, 2, 0).astype(np.float64)
        out[name] = plane[:, :, 0] if c == 1 else plane
        at += c
    return out
