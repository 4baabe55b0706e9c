"""Scene-layer optimization.

Joint objective: 0.8 * L1 + 0.2 * D-SSIM between the rendered and target
image, plus the cosine embedding loss that pulls each pixel's composited
embedding toward the codebook vector of its ground-truth instance. Opacity,
scale, orientation, and the embedding coefficients are optimized with
Adam-style moment updates; positions and colors stay fixed.

Periodic KNN smoothing replaces each embedding coefficient with the mean over
its spatial neighbors, suppressing outlier splats.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .scene_core import EMPTY_LABEL, Codebook, quat_normalize
from .rasterizer import ALPHA, COLOR, EMBEDDING, RenderSpec, composite, project_set
from .gradients import Adjoints, backward


class EmptyDomainError(ValueError):
    """No valid pixels to evaluate a loss over."""


class DivergenceError(RuntimeError):
    """Optimization produced a non-finite loss."""


class InsufficientPointsError(ValueError):
    """KNN smoothing needs at least k+1 gaussians."""


class NotSupported(RuntimeError):
    """Requested ablation mode depends on an external trained model."""


SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class FitConfig:
    iterations: int = 400
    lr_opacity: float = 0.05
    lr_scale: float = 0.005
    lr_orientation: float = 0.001
    lr_gamma: float = 0.02
    w_l1: float = 0.8
    w_ssim: float = 0.2
    knn_k: int = 8
    knn_period: int = 50
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if abs(self.w_l1 + self.w_ssim - 1.0) > 1e-12:
            raise ValueError("photometric weights must sum to 1")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        if self.ssim_window % 2 != 1:
            raise ValueError("ssim window must be odd")


@dataclass
class GroundTruthView:
    """Target image plus per-pixel instance labels and validity."""

    image: np.ndarray            # (H, W, 3) in [0, 1]
    instance_mask: np.ndarray    # (H, W) int labels, EMPTY_LABEL allowed
    valid_mask: np.ndarray | None = None

    def valid(self) -> np.ndarray:
        if self.valid_mask is None:
            return np.ones(self.image.shape[:2], dtype=bool)
        return self.valid_mask


@dataclass
class FitReport:
    iterations: int
    loss_curve: list[float]
    final_l1: float
    final_ssim: float
    final_cos: float
    seconds: float

    def to_json(self) -> dict:
        return {
            "iterations": self.iterations,
            "loss_curve": [float(x) for x in self.loss_curve],
            "final_l1": self.final_l1, "final_ssim": self.final_ssim,
            "final_cos": self.final_cos, "seconds": self.seconds,
        }


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_cos(embedding: np.ndarray, index_mask: np.ndarray, codebook: Codebook,
             valid: np.ndarray | None = None):
    """Cosine loss between the composited embedding and codebook targets.

    index_mask holds codebook indices; EMPTY_LABEL pixels are excluded from
    the domain. Pixels whose embedding norm vanishes contribute loss 1 with
    zero gradient. Returns (loss, d_embedding).
    """
    H, W, C = embedding.shape
    if valid is None:
        valid = np.ones((H, W), dtype=bool)
    omega = valid & (index_mask != EMPTY_LABEL)
    count = int(np.count_nonzero(omega))
    if count == 0:
        raise EmptyDomainError("cosine loss needs at least one labeled valid pixel")

    m = embedding[omega]
    f = codebook.entries[index_mask[omega]]
    norms = np.linalg.norm(m, axis=1)
    nz = norms >= 1e-12
    cos = np.zeros(len(m))
    cos[nz] = np.einsum("pc,pc->p", m[nz], f[nz]) / norms[nz]
    loss = 1.0 - float(cos.sum()) / count

    grad_rows = np.zeros_like(m)
    grad_rows[nz] = -(f[nz] / norms[nz, None] - cos[nz, None] * m[nz] / (norms[nz, None] ** 2)) / count
    d_embedding = np.zeros_like(embedding)
    d_embedding[omega] = grad_rows
    return loss, d_embedding


def _gaussian_kernel1d(window: int, sigma: float) -> np.ndarray:
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    return k


def _conv_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable 2D convolution, valid mode (kernel is symmetric)."""
    t = sliding_window_view(x, len(k), axis=0) @ k
    return sliding_window_view(t, len(k), axis=1) @ k


def _conv_full(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = len(k) - 1
    return _conv_valid(np.pad(x, pad), k)


def _ssim_with_grad(x: np.ndarray, y: np.ndarray, omega: np.ndarray,
                    window: int, sigma: float):
    """Mean SSIM over valid interior pixels and its gradient w.r.t. x.

    The SSIM map is evaluated only where the window fits fully inside the
    image; omega restricts which of those pixels enter the mean.
    """
    H, W = x.shape
    half = window // 2
    if H < window or W < window:
        return None  # no interior; caller treats the term as absent
    ker = _gaussian_kernel1d(window, sigma)
    interior = omega[half:H - half, half:W - half]
    n = int(np.count_nonzero(interior))
    if n == 0:
        return None

    mu_x = _conv_valid(x, ker)
    mu_y = _conv_valid(y, ker)
    s2x = _conv_valid(x * x, ker)
    s2y = _conv_valid(y * y, ker)
    sxy = _conv_valid(x * y, ker)
    var_x = s2x - mu_x ** 2
    var_y = s2y - mu_y ** 2
    cov = sxy - mu_x * mu_y

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    a1 = 2 * mu_x * mu_y + c1
    a2 = 2 * cov + c2
    b1 = mu_x ** 2 + mu_y ** 2 + c1
    b2 = var_x + var_y + c2
    ssim_map = (a1 * a2) / (b1 * b2)
    mean_ssim = float(ssim_map[interior].sum()) / n

    # adjoint of mean over interior: 1/n at interior pixels
    up = np.where(interior, 1.0 / n, 0.0)
    inv_b1b2 = 1.0 / (b1 * b2)
    d_mu_x = up * ((2 * mu_y * a2 - 2 * mu_y * a1) * inv_b1b2
                   - ssim_map * (2 * mu_x / b1 - 2 * mu_x / b2))
    d_sxy = up * 2 * a1 * inv_b1b2
    d_s2x = up * (-ssim_map / b2)

    # valid-mode convolution transposes to full-mode scattering
    dx = _conv_full(d_mu_x, ker)
    dx += 2 * x * _conv_full(d_s2x, ker)
    dx += y * _conv_full(d_sxy, ker)
    return mean_ssim, dx


def loss_photometric(rendered: np.ndarray, target: np.ndarray,
                     valid: np.ndarray | None = None,
                     w_l1: float = 0.8, w_ssim: float = 0.2,
                     window: int = 11, sigma: float = 1.5):
    """w_l1 * mean absolute error + w_ssim * (1 - SSIM) / 2 over valid pixels.

    Returns (loss, d_rendered, parts) where parts holds the raw L1 and
    D-SSIM terms before weighting.
    """
    H, W, _ = rendered.shape
    omega = np.ones((H, W), dtype=bool) if valid is None else valid
    n = int(np.count_nonzero(omega))
    if n == 0:
        raise EmptyDomainError("photometric loss needs at least one valid pixel")

    diff = rendered - target
    l1 = float(np.abs(diff[omega]).sum()) / (n * 3)
    d_rendered = np.zeros_like(rendered)
    d_rendered[omega] = w_l1 * np.sign(diff[omega]) / (n * 3)

    ssim_vals = []
    for c in range(3):
        res = _ssim_with_grad(rendered[:, :, c], target[:, :, c], omega, window, sigma)
        if res is None:
            continue
        mean_ssim, dx = res
        ssim_vals.append(mean_ssim)
        # d((1 - ssim)/2)/dx = -dx/2, averaged over channels
        d_rendered[:, :, c] += w_ssim * (-dx / 2) / 3
    dssim = (1.0 - float(np.mean(ssim_vals))) / 2 if ssim_vals else 0.0

    loss = w_l1 * l1 + w_ssim * dssim
    return loss, d_rendered, {"l1": l1, "dssim": dssim}


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """First/second-moment update with bias correction; one state per array."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lrs: dict[str, float]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p -= lrs[name] * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# fitting loop
# ---------------------------------------------------------------------------

def _index_mask(instance_mask: np.ndarray, id_to_index: dict[int, int]) -> np.ndarray:
    out = np.full(instance_mask.shape, EMPTY_LABEL, dtype=np.int64)
    for iid, idx in id_to_index.items():
        out[instance_mask == iid] = idx
    return out


def evaluate_losses(gaussians, cam, view: GroundTruthView, codebook: Codebook,
                    id_to_index: dict[int, int], cfg: FitConfig):
    """One forward pass plus both loss terms; returns losses, adjoints, cache."""
    spec = RenderSpec(cam.width, cam.height, frozenset({COLOR, EMBEDDING, ALPHA}))
    batch = project_set(gaussians, cam)
    out, cache = composite(batch, spec, retain=True)
    valid = view.valid()
    photo, d_color, parts = loss_photometric(
        out.color, view.image, valid, cfg.w_l1, cfg.w_ssim, cfg.ssim_window, cfg.ssim_sigma
    )
    idx_mask = _index_mask(view.instance_mask, id_to_index)
    cos, d_embed = loss_cos(out.embedding, idx_mask, codebook, valid)
    adj = Adjoints(color=d_color, embedding=d_embed)
    return {
        "total": photo + cos, "l1": parts["l1"], "dssim": parts["dssim"], "cos": cos,
    }, adj, cache


def fit_layer(layer, views, codebook: Codebook, id_to_index: dict[int, int],
              cfg: FitConfig | None = None) -> FitReport:
    """Optimize a layer's opacity, scale, orientation, and embeddings in place.

    views is a list of (GroundTruthView, Camera) pairs; losses average over
    views. KNN smoothing runs every cfg.knn_period iterations.
    """
    cfg = cfg or FitConfig()
    if not views:
        raise ValueError("fit_layer needs at least one view")
    gs = layer.gaussians
    opt = Adam()
    # scale steps happen in log space: a fixed-size linear step would swamp
    # the epsilon-compressed thin axis
    lrs = {
        "opacity": cfg.lr_opacity, "log_scale": cfg.lr_scale,
        "quat": cfg.lr_orientation, "gamma": cfg.lr_gamma,
    }
    log_scale = np.log(gs.scales)
    curve = []
    final = {"l1": 0.0, "dssim": 0.0, "cos": 0.0}
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        agg = {"opacity": np.zeros_like(gs.opacities), "log_scale": np.zeros_like(gs.scales),
               "quat": np.zeros_like(gs.quats), "gamma": np.zeros_like(gs.gammas)}
        total = 0.0
        for view, cam in views:
            losses, adj, cache = evaluate_losses(gs, cam, view, codebook, id_to_index, cfg)
            grads = backward(cache, adj)
            agg["opacity"] += grads.opacity
            agg["log_scale"] += grads.scale * gs.scales
            agg["quat"] += grads.quat
            agg["gamma"] += grads.gamma
            total += losses["total"]
            final = {"l1": losses["l1"], "dssim": losses["dssim"], "cos": losses["cos"]}
        total /= len(views)
        if not np.isfinite(total):
            raise DivergenceError(f"loss became non-finite at iteration {it}")
        curve.append(total)
        for key in agg:
            agg[key] /= len(views)
        params = {"opacity": gs.opacities, "log_scale": log_scale,
                  "quat": gs.quats, "gamma": gs.gammas}
        opt.step(params, agg, lrs)
        np.clip(gs.opacities, 0.0, 1.0, out=gs.opacities)
        gs.scales[:] = np.exp(np.clip(log_scale, -30.0, 5.0))
        gs.quats[:] = quat_normalize(gs.quats)
        if cfg.knn_period > 0 and (it + 1) % cfg.knn_period == 0 and len(gs) > cfg.knn_k:
            knn_smooth(gs, cfg.knn_k)
    return FitReport(
        iterations=cfg.iterations, loss_curve=curve,
        final_l1=final["l1"], final_ssim=final["dssim"], final_cos=final["cos"],
        seconds=time.perf_counter() - t0,
    )


def knn_smooth(gaussians, k: int) -> None:
    """Replace every gamma with the mean over its k nearest neighbors.

    Neighbors are found by 3D position, excluding the gaussian itself; all
    means are computed from the pre-smoothing state (synchronous update).
    """
    n = len(gaussians)
    if n < k + 1:
        raise InsufficientPointsError(f"need at least {k + 1} gaussians, have {n}")
    tree = cKDTree(gaussians.positions)
    _, idx = tree.query(gaussians.positions, k=k + 1)
    # first column is the point itself (distance 0); when exact duplicates
    # exist the self index may land elsewhere, so mask it explicitly
    neighbor_idx = np.where(idx == np.arange(n)[:, None], -1, idx)
    gammas = gaussians.gammas
    sums = np.zeros_like(gammas)
    counts = np.zeros(n)
    for col in range(k + 1):
        sel = neighbor_idx[:, col]
        ok = sel >= 0
        sums[ok] += gammas[sel[ok]]
        counts[ok] += 1
    # rows where the self index never appeared keep k+1 neighbors; trim to k
    over = counts > k
    if np.any(over):
        drop = idx[over, -1]
        sums[over] -= gammas[drop]
        counts[over] -= 1
    gaussians.gammas = sums / counts[:, None]


# ---------------------------------------------------------------------------
# representation ablation harness
# ---------------------------------------------------------------------------

ONEHOT = "onehot"
AUTOENCODER_STUB = "autoencoder_stub"
LINEAR_MAP = "linear_map"
CODEBOOK = "codebook"

ABLATION_CSV_HEADER = "mode,scene,seed,iou,fit_seconds,gamma_bytes"


@dataclass
class AblationReport:
    mode: str
    scene: str
    seed: int
    iou: float
    fit_seconds: float
    gamma_bytes: int

    def csv_row(self) -> str:
        return (f"{self.mode},{self.scene},{self.seed},{self.iou:.6f},"
                f"{self.fit_seconds:.3f},{self.gamma_bytes}")


def _cross_entropy_loss(logits: np.ndarray, index_mask: np.ndarray,
                        valid: np.ndarray):
    """Softmax cross-entropy over the embedding channels; returns loss, grad."""
    omega = valid & (index_mask != EMPTY_LABEL)
    n = int(np.count_nonzero(omega))
    if n == 0:
        raise EmptyDomainError("cross entropy needs labeled pixels")
    rows = logits[omega]
    labels = index_mask[omega]
    shifted = rows - rows.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    p = expv / expv.sum(axis=1, keepdims=True)
    loss = float(-np.log(np.maximum(p[np.arange(len(rows)), labels], 1e-30)).sum()) / n
    grad_rows = p.copy()
    grad_rows[np.arange(len(rows)), labels] -= 1.0
    d_logits = np.zeros_like(logits)
    d_logits[omega] = grad_rows / n
    return loss, d_logits


def _fit_crossentropy(gs, views, id_to_index, cfg, lin_dim: int | None = None,
                      rng: np.random.Generator | None = None):
    """Shared loop for the one-hot and linear-map ablation modes.

    With lin_dim None the gammas are class logits directly; otherwise gammas
    live in lin_dim dims and a learned matrix maps them to class logits.
    """
    W = None
    if lin_dim is not None:
        rng = rng or np.random.default_rng(0)
        n_classes = max(id_to_index.values()) + 1
        W = rng.normal(0, 0.1, size=(n_classes, gs.gammas.shape[1]))
    opt = Adam()
    lrs = {"opacity": cfg.lr_opacity, "log_scale": cfg.lr_scale,
           "quat": cfg.lr_orientation, "gamma": cfg.lr_gamma}
    if W is not None:
        lrs["linmap"] = cfg.lr_gamma
    log_scale = np.log(gs.scales)
    spec = None
    for it in range(cfg.iterations):
        agg = {"opacity": np.zeros_like(gs.opacities), "log_scale": np.zeros_like(gs.scales),
               "quat": np.zeros_like(gs.quats), "gamma": np.zeros_like(gs.gammas)}
        dW_total = np.zeros_like(W) if W is not None else None
        for view, cam in views:
            if spec is None:
                spec = RenderSpec(cam.width, cam.height, frozenset({COLOR, EMBEDDING, ALPHA}))
            batch = project_set(gs, cam)
            out, cache = composite(batch, spec, retain=True)
            valid = view.valid()
            _, d_color, _ = loss_photometric(out.color, view.image, valid,
                                             cfg.w_l1, cfg.w_ssim, cfg.ssim_window, cfg.ssim_sigma)
            idx_mask = _index_mask(view.instance_mask, id_to_index)
            if W is None:
                _, d_embed = _cross_entropy_loss(out.embedding, idx_mask, valid)
            else:
                logits = out.embedding @ W.T
                _, d_logits = _cross_entropy_loss(logits, idx_mask, valid)
                d_embed = d_logits @ W
                dW_total += np.einsum("hwk,hwc->kc", d_logits, out.embedding)
            grads = backward(cache, Adjoints(color=d_color, embedding=d_embed))
            agg["opacity"] += grads.opacity
            agg["log_scale"] += grads.scale * gs.scales
            agg["quat"] += grads.quat
            agg["gamma"] += grads.gamma
        for key in agg:
            agg[key] /= len(views)
        params = {"opacity": gs.opacities, "log_scale": log_scale,
                  "quat": gs.quats, "gamma": gs.gammas}
        grads_all = dict(agg)
        if W is not None:
            params["linmap"] = W
            grads_all["linmap"] = dW_total / len(views)
        opt.step(params, grads_all, lrs)
        np.clip(gs.opacities, 0.0, 1.0, out=gs.opacities)
        gs.scales[:] = np.exp(np.clip(log_scale, -30.0, 5.0))
        gs.quats[:] = quat_normalize(gs.quats)
        if cfg.knn_period > 0 and (it + 1) % cfg.knn_period == 0 and len(gs) > cfg.knn_k:
            knn_smooth(gs, cfg.knn_k)
    return W


def _decode_labels_argmax(embedding: np.ndarray, alpha: np.ndarray, alpha_min: float,
                          index_to_id: dict[int, int]) -> np.ndarray:
    labels = np.argmax(embedding, axis=2)
    out = np.full(labels.shape, EMPTY_LABEL, dtype=np.int64)
    for idx, iid in index_to_id.items():
        out[labels == idx] = iid
    out[alpha < alpha_min] = EMPTY_LABEL
    return out


def _decode_labels_codebook(embedding: np.ndarray, alpha: np.ndarray, alpha_min: float,
                            codebook: Codebook, index_to_id: dict[int, int]) -> np.ndarray:
    H, W, C = embedding.shape
    idx, _ = codebook.decode_batch(embedding.reshape(-1, C))
    out = np.full(H * W, EMPTY_LABEL, dtype=np.int64)
    for cidx, iid in index_to_id.items():
        out[idx == cidx] = iid
    out[alpha.reshape(-1) < alpha_min] = EMPTY_LABEL
    return out.reshape(H, W)


def ablation_harness(layer, views, codebook: Codebook, id_to_index: dict[int, int],
                     mode: str, cfg: FitConfig | None = None, scene: str = "scene",
                     seed: int = 0, alpha_min: float = 0.5,
                     gamma_noise: float = 0.0) -> AblationReport:
    """Fit one layer under a chosen embedding representation and score IoU.

    The layer is copied; the caller's gaussians are untouched. gamma_noise
    perturbs the initial embeddings (same seed across modes) so every mode
    does real distillation work instead of scoring its initialization.
    """
    from .world import iou as iou_metric

    cfg = cfg or FitConfig()
    if mode == AUTOENCODER_STUB:
        raise NotSupported("autoencoder representation requires a trained network")
    if mode not in (ONEHOT, LINEAR_MAP, CODEBOOK):
        raise ValueError(f"unknown ablation mode {mode!r}")

    gs = layer.gaussians.copy()
    rng = np.random.default_rng(seed)
    index_to_id = {v: k for k, v in id_to_index.items()}
    n_classes = codebook.size

    if mode == ONEHOT:
        onehot = np.zeros((len(gs), n_classes))
        for iid, idx in id_to_index.items():
            onehot[gs.instance_ids == iid, idx] = 1.0
        gs.gammas = onehot
    if gamma_noise > 0:
        gs.gammas = gs.gammas + rng.normal(0, gamma_noise, gs.gammas.shape)

    t0 = time.perf_counter()
    if mode == CODEBOOK:
        fit_layer(SimpleNamespace(gaussians=gs), views, codebook, id_to_index, cfg)
        W = None
    else:
        W = _fit_crossentropy(gs, views, id_to_index, cfg,
                              lin_dim=gs.gammas.shape[1] if mode == LINEAR_MAP else None,
                              rng=rng)
    seconds = time.perf_counter() - t0

    spec = None
    ious = []
    for view, cam in views:
        spec = RenderSpec(cam.width, cam.height, frozenset({EMBEDDING, ALPHA}))
        out = composite(project_set(gs, cam), spec)
        if mode == CODEBOOK:
            pred = _decode_labels_codebook(out.embedding, out.alpha, alpha_min,
                                           codebook, index_to_id)
        elif mode == ONEHOT:
            pred = _decode_labels_argmax(out.embedding, out.alpha, alpha_min, index_to_id)
        else:
            logits = out.embedding @ W.T
            pred = _decode_labels_argmax(logits, out.alpha, alpha_min, index_to_id)
        _, mean_iou = iou_metric(pred, view.instance_mask)
        ious.append(mean_iou)

    gamma_bytes = gs.gammas.shape[1] * len(gs) * 4
    return AblationReport(mode=mode, scene=scene, seed=seed, iou=float(np.mean(ious)),
                          fit_seconds=seconds, gamma_bytes=gamma_bytes)
