"""Analytic backward pass for the rasterizer.

Adjoints of the rendered buffers flow back through the compositing weights,
the per-pixel Gaussian falloff, the conic (inverse 2D covariance), the
projection Jacobian, and finally either the per-splat parameter head
(opacity, scale, orientation, embedding coefficient) or the rigid+scale pose
head used by asset alignment. Positions and colors are held fixed for layer
optimization and receive zero gradient; the pose path is the one place where
gradients flow through splat positions, via the transform chain.

Every formula here is checked against central finite differences in the test
suite; that oracle is the contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_core import quat_to_matrix
from .rasterizer import ALPHA_CLAMP, CompositeCache, StateError


@dataclass
class Adjoints:
    """Upstream gradients of the rendered buffers; any subset may be set."""

    color: np.ndarray | None = None      # (H, W, 3)
    embedding: np.ndarray | None = None  # (H, W, C)
    depth: np.ndarray | None = None      # (H, W)
    alpha: np.ndarray | None = None      # (H, W)


@dataclass
class LayerGrads:
    """Per-gaussian parameter adjoints, indexed like the input collection."""

    opacity: np.ndarray
    scale: np.ndarray
    quat: np.ndarray
    gamma: np.ndarray
    position: np.ndarray
    color: np.ndarray


@dataclass
class PoseContext:
    """Rigid+scale transform state for the alignment backward.

    local_positions / local_cov are the asset-frame quantities for the rows
    of the projected batch (already subset by its valid indices); rot6d_jac is
    dR/dp from the Gram-Schmidt map, shaped (3, 3, 6).
    """

    scale: float
    rotation: np.ndarray
    local_positions: np.ndarray
    local_cov: np.ndarray
    rot6d_jac: np.ndarray


def _pair_level_backward(cache: CompositeCache, adj: Adjoints):
    """Backward through compositing and falloff, to per-valid-gaussian grads.

    Returns dict with d_opacity (V,), d_mean2d (V,2), d_cov2d (V,2,2),
    d_zpay (V,), d_gamma (V,C), d_color (V,3).
    """
    batch = cache.batch
    V = len(batch)
    C = batch.gamma.shape[1] if V else 0
    out = {
        "d_opacity": np.zeros(V),
        "d_mean2d": np.zeros((V, 2)),
        "d_cov2d": np.zeros((V, 2, 2)),
        "d_zpay": np.zeros(V),
        "d_gamma": np.zeros((V, C)),
        "d_color": np.zeros((V, 3)),
    }
    if cache.pair_gauss is None or len(cache.pair_gauss) == 0:
        return out

    gidx = cache.pair_gauss
    pix = cache.pair_pix
    H, W = cache.spec.height, cache.spec.width
    P = len(gidx)

    gC = adj.color.reshape(H * W, 3) if adj.color is not None else None
    gM = adj.embedding.reshape(H * W, -1) if adj.embedding is not None else None
    gD = adj.depth.reshape(H * W) if adj.depth is not None else None
    gA = adj.alpha.reshape(H * W) if adj.alpha is not None else None

    # dL/dw for each contribution: payload dotted with its pixel adjoint
    u = np.zeros(P)
    if gC is not None:
        u += np.einsum("pc,pc->p", gC[pix], batch.color[gidx])
    if gM is not None:
        u += np.einsum("pc,pc->p", gM[pix], batch.gamma[gidx])
    if gD is not None:
        u += gD[pix] * batch.z[gidx]

    w = cache.pair_w
    active = cache.pair_active
    uw = u * w

    # suffix sums of u_j w_j over later contributions in the same pixel
    pad = np.zeros((cache.n_groups, cache.max_rank))
    pad[cache.group_row, cache.group_rank] = uw
    suffix_incl = np.cumsum(pad[:, ::-1], axis=1)[:, ::-1]
    suffix_excl = (suffix_incl - pad)[cache.group_row, cache.group_rank]

    alpha = cache.pair_alpha
    one_minus = 1.0 - alpha
    d_alpha = cache.pair_Tin * u - suffix_excl / one_minus
    if gA is not None:
        d_alpha = d_alpha + gA[pix] * cache.pix_T_stop[pix] / one_minus
    d_alpha = np.where(active, d_alpha, 0.0)

    # clamp at 0.99 passes gradient only below the clamp
    d_alpha_raw = np.where(cache.pair_raw_unclamped < ALPHA_CLAMP, d_alpha, 0.0)
    G = cache.pair_G
    d_opacity_pair = G * d_alpha_raw
    d_power = batch.opacity[gidx] * G * d_alpha_raw

    d = cache.pair_d
    con = batch.conic[gidx]
    # power = -0.5 d^T conic d
    Ad = np.einsum("pij,pj->pi", con, d)
    d_mean2d_pair = d_power[:, None] * Ad
    d_conic_pair = -0.5 * d_power[:, None, None] * np.einsum("pi,pj->pij", d, d)

    def scatter(values):
        return np.bincount(gidx, weights=values, minlength=V)

    out["d_opacity"] = scatter(d_opacity_pair)
    out["d_mean2d"] = np.stack([scatter(d_mean2d_pair[:, 0]),
                                scatter(d_mean2d_pair[:, 1])], axis=1)
    d_conic = np.zeros((V, 2, 2))
    d_conic[:, 0, 0] = scatter(d_conic_pair[:, 0, 0])
    d_conic[:, 0, 1] = d_conic[:, 1, 0] = scatter(d_conic_pair[:, 0, 1])
    d_conic[:, 1, 1] = scatter(d_conic_pair[:, 1, 1])
    # conic = cov^-1  =>  dL/dcov = -conic (dL/dconic) conic
    out["d_cov2d"] = -np.einsum("vij,vjk,vkl->vil", batch.conic, d_conic, batch.conic)

    if gM is not None:
        gm_pix = gM[pix]
        out["d_gamma"] = np.stack([scatter(w * gm_pix[:, c]) for c in range(C)], axis=1)
    if gC is not None:
        gc_pix = gC[pix]
        out["d_color"] = np.stack([scatter(w * gc_pix[:, c]) for c in range(3)], axis=1)
    if gD is not None:
        out["d_zpay"] = scatter(w * gD[pix])
    return out


def _projection_backward(batch, d_mean2d, d_cov2d, d_zpay):
    """Chain 2D adjoints to world-frame mean and covariance adjoints."""
    V = len(batch)
    if V == 0:
        return np.zeros((0, 3)), np.zeros((0, 3, 3))
    cam = batch.cam
    Wrot = cam.rotation
    J = batch.jac
    M = J @ Wrot[None, :, :]
    Ghat = 0.5 * (d_cov2d + np.swapaxes(d_cov2d, 1, 2))

    d_cov3d = np.einsum("vji,vjk,vkl->vil", M, Ghat, M)
    dM = 2.0 * np.einsum("vij,vjk,vkl->vil", Ghat, M, batch.cov3d)
    dJ = dM @ Wrot.T[None, :, :]

    t = batch.t_cam
    x, y, z = t[:, 0], t[:, 1], t[:, 2]
    inv_z2 = 1.0 / (z * z)
    inv_z3 = inv_z2 / z

    dt = np.einsum("vi,vij->vj", d_mean2d, J)
    dt[:, 2] += d_zpay
    dt[:, 0] += dJ[:, 0, 2] * (-cam.fx * inv_z2)
    dt[:, 1] += dJ[:, 1, 2] * (-cam.fy * inv_z2)
    dt[:, 2] += (
        dJ[:, 0, 0] * (-cam.fx * inv_z2)
        + dJ[:, 0, 2] * (2.0 * cam.fx * x * inv_z3)
        + dJ[:, 1, 1] * (-cam.fy * inv_z2)
        + dJ[:, 1, 2] * (2.0 * cam.fy * y * inv_z3)
    )
    d_mean_world = dt @ Wrot
    return d_mean_world, d_cov3d


def _rotation_quat_jacobian(qhat: np.ndarray) -> np.ndarray:
    """dR/dqhat for unit quaternions, shaped (V, 4, 3, 3)."""
    w, x, y, z = qhat[:, 0], qhat[:, 1], qhat[:, 2], qhat[:, 3]
    V = len(qhat)
    D = np.zeros((V, 4, 3, 3))
    zeros = np.zeros(V)
    D[:, 0] = 2.0 * np.stack(
        [np.stack([zeros, -z, y], -1), np.stack([z, zeros, -x], -1), np.stack([-y, x, zeros], -1)], 1
    )
    D[:, 1] = 2.0 * np.stack(
        [np.stack([zeros, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], 1
    )
    D[:, 2] = 2.0 * np.stack(
        [np.stack([-2 * y, x, w], -1), np.stack([x, zeros, z], -1), np.stack([-w, z, -2 * y], -1)], 1
    )
    D[:, 3] = 2.0 * np.stack(
        [np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, zeros], -1)], 1
    )
    return D


def _quat_scale_backward(quats, scales, d_cov3d):
    """Adjoints of world covariances back to raw quaternions and scales."""
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    qhat = quats / norms
    R = quat_to_matrix(qhat)
    G = d_cov3d  # symmetric by construction upstream
    s2 = scales ** 2

    RtGR = np.einsum("vji,vjk,vkl->vil", R, G, R)
    d_scale = 2.0 * scales * np.einsum("vkk->vk", RtGR)

    dR = 2.0 * np.einsum("vij,vjk,vk->vik", G, R, s2)
    dRdq = _rotation_quat_jacobian(qhat)
    d_qhat = np.einsum("vik,vqik->vq", dR, dRdq)
    d_quat = (d_qhat - np.einsum("vq,vq->v", d_qhat, qhat)[:, None] * qhat) / norms
    return d_quat, d_scale


def backward(cache: CompositeCache | None, adjoints: Adjoints) -> LayerGrads:
    """Per-gaussian parameter adjoints for a retained forward pass.

    Position and color stay fixed during layer optimization and report zeros;
    use backward_pose for the alignment path where position gradients matter.
    """
    if cache is None or not isinstance(cache, CompositeCache):
        raise StateError("backward requires the cache from composite(..., retain=True)")
    batch = cache.batch
    if batch.quats is None and len(batch) > 0:
        raise StateError("forward pass was not projected from a gaussian set")
    n = batch.n_input if batch.n_input is not None else 0
    C = batch.gamma.shape[1] if len(batch) else 0
    grads = LayerGrads(
        opacity=np.zeros(n), scale=np.zeros((n, 3)), quat=np.zeros((n, 4)),
        gamma=np.zeros((n, C)), position=np.zeros((n, 3)), color=np.zeros((n, 3)),
    )
    if len(batch) == 0:
        return grads
    low = _pair_level_backward(cache, adjoints)
    _, d_cov3d = _projection_backward(batch, low["d_mean2d"], low["d_cov2d"], low["d_zpay"])
    d_quat, d_scale = _quat_scale_backward(batch.quats, batch.scales, d_cov3d)

    grads.opacity[batch.valid] = low["d_opacity"]
    grads.scale[batch.valid] = d_scale
    grads.quat[batch.valid] = d_quat
    grads.gamma[batch.valid] = low["d_gamma"]
    return grads


def backward_pose(cache: CompositeCache | None, adjoints: Adjoints, pose: PoseContext):
    """Adjoints of the alignment parameters (uniform scale, 6D rotation,
    translation) for a forward pass rendered from a posed asset.

    The asset's world covariance is S^2 R cov_local R^T and its world means
    are S R x_local + T; gradients flow through both."""
    if cache is None or not isinstance(cache, CompositeCache):
        raise StateError("backward_pose requires the cache from composite(..., retain=True)")
    batch = cache.batch
    if len(batch) == 0:
        return 0.0, np.zeros(6), np.zeros(3)
    low = _pair_level_backward(cache, adjoints)
    d_mean_world, d_cov3d = _projection_backward(
        batch, low["d_mean2d"], low["d_cov2d"], low["d_zpay"]
    )
    S = pose.scale
    R = pose.rotation
    xl = pose.local_positions
    cov_l = pose.local_cov
    G = d_cov3d

    dT = d_mean_world.sum(axis=0)
    Rx = xl @ R.T
    dS = float(np.einsum("vi,vi->", d_mean_world, Rx))
    dS += float(np.einsum("vij,vij->", G, 2.0 * S * np.einsum("ij,vjk,lk->vil", R, cov_l, R)))

    dR = S * np.einsum("vi,vj->ij", d_mean_world, xl)
    dR += 2.0 * S * S * np.einsum("vij,jk,vkl->il", G, R, cov_l)
    dp = np.einsum("ij,ijk->k", dR, pose.rot6d_jac)
    return dS, dp, dT
