"""Domain types for layered Gaussian scenes.

Everything downstream (rasterizer, fitting, unfolding, service) works on the
types defined here: Gaussian primitives stored as struct-of-arrays batches,
pinhole cameras, foreground/background scene layers, the instance registry,
and the fixed unit-vector codebook that maps instance ids to embeddings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

UNASSIGNED = -1
EMPTY_LABEL = -1


class CapacityError(RuntimeError):
    """Codebook construction could not place another entry under the cosine cap."""


class ZeroVectorError(ValueError):
    """A vector that must have positive norm was (numerically) zero."""


# ---------------------------------------------------------------------------
# quaternion helpers (w, x, y, z convention)
# ---------------------------------------------------------------------------

def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise ZeroVectorError("cannot normalize zero quaternion")
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for unit quaternion(s). Accepts (4,) or (N, 4)."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a*b; broadcasting over leading dims."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_from_two_vectors(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Shortest-arc unit quaternion rotating direction a onto direction b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    d = float(np.dot(a, b))
    if d > 1.0 - 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    if d < -1.0 + 1e-12:
        # 180 degrees: rotate about any axis orthogonal to a
        axis = np.cross(a, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(axis) < 1e-8:
            axis = np.cross(a, np.array([0.0, 1.0, 0.0]))
        axis /= np.linalg.norm(axis)
        return np.array([0.0, axis[0], axis[1], axis[2]])
    axis = np.cross(a, b)
    q = np.array([1.0 + d, axis[0], axis[1], axis[2]])
    return q / np.linalg.norm(q)


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax([R[0, 0], R[1, 1], R[2, 2]]))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# Gaussian primitives
# ---------------------------------------------------------------------------

@dataclass
class GaussianPrimitive:
    """A single oriented Gaussian splat.

    position  world-frame mean (3,)
    orientation  unit quaternion (w, x, y, z); local z is the thin axis
    scale  positive extents (3,); scale[2] is compressed to eps * min(lateral)
           at initialization so the splat acts as a surface element
    opacity  in [0, 1]
    color  RGB in [0, 1]
    gamma  instance-embedding coefficient (C,)
    instance_id  registry id, or UNASSIGNED
    """

    position: np.ndarray
    orientation: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    gamma: np.ndarray
    instance_id: int = UNASSIGNED

    def validate(self, eps: float | None = None) -> None:
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-6:
            raise ValueError("quaternion norm must be 1 within 1e-6")
        if not np.all(np.asarray(self.scale) > 0):
            raise ValueError("all scale components must be positive")
        if eps is not None:
            lateral = min(self.scale[0], self.scale[1])
            if self.scale[2] > eps * lateral * (1 + 1e-9):
                raise ValueError("thin-axis scale exceeds eps * min(lateral scales)")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity must lie in [0, 1]")
        c = np.asarray(self.color)
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("color components must lie in [0, 1]")


class GaussianSet:
    """Struct-of-arrays batch of Gaussian primitives.

    All rasterizer and fitting code operates on these batches; the single
    GaussianPrimitive dataclass is a convenience view for tests and the
    per-primitive operations of the public API.
    """

    __slots__ = ("positions", "quats", "scales", "opacities", "colors", "gammas", "instance_ids")

    def __init__(self, positions, quats, scales, opacities, colors, gammas, instance_ids):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.quats = np.ascontiguousarray(quats, dtype=np.float64).reshape(n, 4)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64).reshape(n, 3)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64).reshape(n)
        self.colors = np.ascontiguousarray(colors, dtype=np.float64).reshape(n, 3)
        gam = np.ascontiguousarray(gammas, dtype=np.float64)
        if gam.ndim != 2:
            gam = gam.reshape(n, -1) if n > 0 else gam.reshape(0, 0)
        self.gammas = gam
        self.instance_ids = np.ascontiguousarray(instance_ids, dtype=np.int64).reshape(n)

    @classmethod
    def empty(cls, embed_dim: int) -> "GaussianSet":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)),
            np.zeros(0), np.zeros((0, 3)), np.zeros((0, embed_dim)), np.zeros(0, np.int64),
        )

    @classmethod
    def from_primitives(cls, prims: list[GaussianPrimitive]) -> "GaussianSet":
        if not prims:
            raise ValueError("from_primitives needs at least one primitive")
        return cls(
            np.stack([p.position for p in prims]),
            np.stack([p.orientation for p in prims]),
            np.stack([p.scale for p in prims]),
            np.array([p.opacity for p in prims]),
            np.stack([p.color for p in prims]),
            np.stack([p.gamma for p in prims]),
            np.array([p.instance_id for p in prims], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def embed_dim(self) -> int:
        return self.gammas.shape[1]

    def primitive(self, i: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            self.positions[i].copy(), self.quats[i].copy(), self.scales[i].copy(),
            float(self.opacities[i]), self.colors[i].copy(), self.gammas[i].copy(),
            int(self.instance_ids[i]),
        )

    def subset(self, mask_or_index) -> "GaussianSet":
        return GaussianSet(
            self.positions[mask_or_index], self.quats[mask_or_index],
            self.scales[mask_or_index], self.opacities[mask_or_index],
            self.colors[mask_or_index], self.gammas[mask_or_index],
            self.instance_ids[mask_or_index],
        )

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            self.positions.copy(), self.quats.copy(), self.scales.copy(),
            self.opacities.copy(), self.colors.copy(), self.gammas.copy(),
            self.instance_ids.copy(),
        )

    @staticmethod
    def concat(sets: list["GaussianSet"]) -> "GaussianSet":
        sets = [s for s in sets if len(s) > 0]
        if not sets:
            raise ValueError("concat of empty sets")
        return GaussianSet(
            np.concatenate([s.positions for s in sets]),
            np.concatenate([s.quats for s in sets]),
            np.concatenate([s.scales for s in sets]),
            np.concatenate([s.opacities for s in sets]),
            np.concatenate([s.colors for s in sets]),
            np.concatenate([s.gammas for s in sets]),
            np.concatenate([s.instance_ids for s in sets]),
        )

    def validate_all(self, eps: float | None = None) -> None:
        """Batch invariant check used by tests; raises on the first violation."""
        norms = np.linalg.norm(self.quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("quaternion norms must be 1 within 1e-6")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")
        if eps is not None and len(self) > 0:
            lateral = np.minimum(self.scales[:, 0], self.scales[:, 1])
            if np.any(self.scales[:, 2] > eps * lateral * (1 + 1e-9)):
                raise ValueError("thin-axis scale exceeds eps * min(lateral scales)")
        if np.any(self.opacities < 0) or np.any(self.opacities > 1):
            raise ValueError("opacity out of [0, 1]")
        if np.any(self.colors < 0) or np.any(self.colors > 1):
            raise ValueError("color out of [0, 1]")


def covariances_from_quat_scale(quats: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """World covariances R diag(s^2) R^T for batches of quats and scales."""
    R = quat_to_matrix(quat_normalize(quats))
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera pose.

    x_cam = R @ x_world + t; the camera looks along +z, u = fx*x/z + cx.
    Pixel (ix, iy) has its center at continuous coordinates (ix, iy).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01
    far: float = 1000.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise ValueError("camera rotation must be orthonormal within 1e-6")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            rotation=np.asarray(d.get("rotation", np.eye(3).tolist()), dtype=np.float64),
            translation=np.asarray(d.get("translation", [0, 0, 0]), dtype=np.float64),
            near=float(d.get("near", 0.01)), far=float(d.get("far", 1000.0)),
        )


# ---------------------------------------------------------------------------
# codebook
# ---------------------------------------------------------------------------

class Codebook:
    """K fixed unit vectors in C dimensions with pairwise cosine <= delta.

    Entries are immutable after construction and fully determined by
    (K, C, delta, seed): construction draws isotropic Gaussian vectors from a
    seeded generator, normalizes them, and accepts each candidate only if its
    cosine with every previously accepted entry stays at or below delta.
    """

    def __init__(self, entries: np.ndarray, delta: float, seed: int):
        self._entries = np.ascontiguousarray(entries, dtype=np.float64)
        self._entries.setflags(write=False)
        self.delta = float(delta)
        self.seed = int(seed)

    @property
    def entries(self) -> np.ndarray:
        return self._entries

    @property
    def size(self) -> int:
        return self._entries.shape[0]

    @property
    def dim(self) -> int:
        return self._entries.shape[1]

    def encode(self, k: int) -> np.ndarray:
        """Embedding vector for instance index k (exact entry)."""
        if not 0 <= k < self.size:
            raise IndexError(f"codebook index {k} out of range [0, {self.size})")
        return self._entries[k]

    def decode(self, v: np.ndarray) -> tuple[int, float]:
        """Nearest entry by cosine; ties resolve to the smallest index."""
        v = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise ZeroVectorError("cannot decode a zero embedding vector")
        scores = self._entries @ (v / n)
        k = int(np.argmax(scores))
        return k, float(scores[k])

    def decode_batch(self, vs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized decode; rows with norm < 1e-12 return (EMPTY_LABEL, 0)."""
        vs = np.asarray(vs, dtype=np.float64).reshape(-1, self.dim)
        norms = np.linalg.norm(vs, axis=1)
        ok = norms >= 1e-12
        scores = np.zeros((len(vs), self.size))
        scores[ok] = (vs[ok] / norms[ok, None]) @ self._entries.T
        labels = np.where(ok, np.argmax(scores, axis=1), EMPTY_LABEL)
        best = np.where(ok, np.max(scores, axis=1), 0.0)
        return labels.astype(np.int64), best

    def save(self, path: str | Path) -> None:
        """JSON header plus a row-major little-endian float32 sidecar."""
        path = Path(path)
        header = {"K": self.size, "C": self.dim, "delta": self.delta, "seed": self.seed}
        sidecar = path.with_suffix(path.suffix + ".f32") if path.suffix != ".json" else path.with_suffix(".f32")
        path.write_text(json.dumps(header, sort_keys=True))
        self._entries.astype("<f4").tofile(sidecar)

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        """Rebuild from the header seed; the sidecar is verified bit-for-bit.

        Entries are kept in float64 internally, so the float32 sidecar alone
        cannot restore them exactly; the seeded construction can, and the
        sidecar guards against header tampering.
        """
        path = Path(path)
        header = json.loads(path.read_text())
        cb = build_codebook(header["K"], header["C"], header["delta"], header["seed"])
        sidecar = path.with_suffix(path.suffix + ".f32") if path.suffix != ".json" else path.with_suffix(".f32")
        stored = np.fromfile(sidecar, dtype="<f4").reshape(header["K"], header["C"])
        if not np.array_equal(stored, cb.entries.astype("<f4")):
            raise ValueError(f"codebook sidecar {sidecar} does not match its header")
        return cb


def build_codebook(
    count: int, dim: int, delta: float, seed: int = 0, max_attempts: int = 100_000
) -> Codebook:
    """Rejection-sample `count` unit vectors in `dim` dims with cosine cap `delta`.

    Deterministic for a fixed seed. Raises CapacityError when an entry cannot
    be placed within max_attempts draws, signalling (count, dim, delta) is
    infeasible.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    entries = np.empty((count, dim), dtype=np.float64)
    n_accepted = 0
    while n_accepted < count:
        for attempt in range(max_attempts):
            v = rng.standard_normal(dim)
            norm = np.linalg.norm(v)
            if norm < 1e-12:
                continue
            v /= norm
            if n_accepted == 0 or np.max(entries[:n_accepted] @ v) <= delta:
                entries[n_accepted] = v
                n_accepted += 1
                break
        else:
            raise CapacityError(
                f"could not place entry {n_accepted} of {count} (dim={dim}, "
                f"delta={delta}) within {max_attempts} attempts"
            )
    return Codebook(entries, delta, seed)


# ---------------------------------------------------------------------------
# layers, registry, world
# ---------------------------------------------------------------------------

class LayerKind(str, Enum):
    FOREGROUND = "foreground"
    BACKGROUND = "background"


class RepState(str, Enum):
    LAYERED_25D = "2.5d"
    UNFOLDED_3D = "3d"


@dataclass
class SceneLayer:
    kind: LayerKind
    gaussians: GaussianSet
    source_step: int


@dataclass
class InstanceRecord:
    id: int
    category: str
    center: np.ndarray
    extent: np.ndarray
    state: RepState = RepState.LAYERED_25D
    codebook_index: int = 0

    def to_json(self) -> dict:
        return {
            "id": self.id, "category": self.category,
            "center": [float(x) for x in self.center],
            "extent": [float(x) for x in self.extent],
            "state": self.state.value, "codebook_index": self.codebook_index,
        }

    @classmethod
    def from_json(cls, d: dict) -> "InstanceRecord":
        return cls(
            id=int(d["id"]), category=d["category"],
            center=np.asarray(d["center"], dtype=np.float64),
            extent=np.asarray(d["extent"], dtype=np.float64),
            state=RepState(d["state"]), codebook_index=int(d["codebook_index"]),
        )


DEFAULT_FG_CATEGORIES = (
    "person", "chair", "sofa", "table", "boat", "car", "bed", "potted plant",
)


@dataclass
class WorldConfig:
    epsilon: float = 1e-2          # thin-axis compression relative to lateral scale
    delta: float = 0.5             # codebook cosine cap
    embed_dim: int = 16            # C
    capacity: int = 256            # K; rejection sampling at (C=16, delta=0.5)
                                   # cannot go far past ~500 entries
    theta: float = 0.5             # label-propagation overlap threshold
    tau: float = 0.4               # unfold fallback similarity threshold
    top_n: int = 3                 # unfold candidates per step
    alpha_min: float = 0.5         # label decode coverage threshold
    edge_thresh: float = 0.05      # depth-edge fraction of median depth
    codebook_seed: int = 0
    fg_categories: tuple[str, ...] = DEFAULT_FG_CATEGORIES

    def to_json(self) -> dict:
        return {
            "epsilon": self.epsilon, "delta": self.delta, "embed_dim": self.embed_dim,
            "capacity": self.capacity, "theta": self.theta, "tau": self.tau,
            "top_n": self.top_n, "alpha_min": self.alpha_min,
            "edge_thresh": self.edge_thresh, "codebook_seed": self.codebook_seed,
            "fg_categories": list(self.fg_categories),
        }

    @classmethod
    def from_json(cls, d: dict) -> "WorldConfig":
        return cls(
            epsilon=d["epsilon"], delta=d["delta"], embed_dim=d["embed_dim"],
            capacity=d["capacity"], theta=d["theta"], tau=d["tau"],
            top_n=d["top_n"], alpha_min=d["alpha_min"], edge_thresh=d["edge_thresh"],
            codebook_seed=d.get("codebook_seed", 0),
            fg_categories=tuple(d["fg_categories"]),
        )


@dataclass
class UnfoldedAsset:
    """Bookkeeping for an instance replaced by a posed 3D asset.

    stash maps layer index -> original opacities of the instance's 2.5D
    gaussians there (they are zeroed in place and retained for revert); the
    gaussian rows themselves are recovered by instance id."""

    source: str
    scale: float
    rotation: np.ndarray            # 3x3, world pose of the asset
    translation: np.ndarray
    asset_layer: int                # layer holding the inserted asset gaussians
    stash: dict[int, np.ndarray]


class World:
    """Ordered scene layers plus the instance registry and shared codebook."""

    def __init__(self, config: WorldConfig | None = None, codebook: Codebook | None = None):
        self.config = config or WorldConfig()
        self.codebook = codebook or build_codebook(
            self.config.capacity, self.config.embed_dim, self.config.delta,
            self.config.codebook_seed,
        )
        self.layers: list[SceneLayer] = []
        self.registry: dict[int, InstanceRecord] = {}
        self.assets: dict[int, UnfoldedAsset] = {}
        self._next_id = 0

    # -- registry ----------------------------------------------------------

    def allocate_instance(self, category: str) -> InstanceRecord:
        if self._next_id >= self.codebook.size:
            raise CapacityError(
                f"registry full: codebook has {self.codebook.size} entries"
            )
        rec = InstanceRecord(
            id=self._next_id, category=category,
            center=np.zeros(3), extent=np.zeros(3),
            state=RepState.LAYERED_25D, codebook_index=self._next_id,
        )
        self.registry[rec.id] = rec
        self._next_id += 1
        return rec

    def gamma_for(self, instance_id: int) -> np.ndarray:
        return self.codebook.encode(self.registry[instance_id].codebook_index)

    def instance_mask_in(self, layer: SceneLayer, instance_id: int) -> np.ndarray:
        return layer.gaussians.instance_ids == instance_id

    def instance_gaussians(self, instance_id: int) -> GaussianSet:
        parts = []
        for layer in self.layers:
            m = layer.gaussians.instance_ids == instance_id
            if np.any(m):
                parts.append(layer.gaussians.subset(m))
        if not parts:
            return GaussianSet.empty(self.config.embed_dim)
        return GaussianSet.concat(parts)

    def refresh_instance_geometry(self, instance_id: int) -> None:
        """Recompute registry center/extent from current gaussian positions."""
        g = self.instance_gaussians(instance_id)
        rec = self.registry[instance_id]
        if len(g) == 0:
            return
        lo = g.positions.min(axis=0)
        hi = g.positions.max(axis=0)
        rec.center = (lo + hi) / 2
        rec.extent = hi - lo

    def all_gaussians(self) -> GaussianSet:
        live = [l.gaussians for l in self.layers if len(l.gaussians) > 0]
        if not live:
            return GaussianSet.empty(self.config.embed_dim)
        return GaussianSet.concat(live)

    def validate(self) -> None:
        ids = [r.id for r in self.registry.values()]
        if len(ids) != len(set(ids)):
            raise ValueError("duplicate instance ids in registry")
        for rec in self.registry.values():
            if rec.codebook_index >= self.codebook.size:
                raise ValueError(f"instance {rec.id} codebook index out of range")
            if np.any(rec.extent < 0):
                raise ValueError(f"instance {rec.id} has negative extent")
            if rec.state == RepState.UNFOLDED_3D and rec.id not in self.assets:
                raise ValueError(f"unfolded instance {rec.id} lacks an asset entry")
        for layer in self.layers:
            assigned = layer.gaussians.instance_ids
            known = set(self.registry.keys())
            for iid in np.unique(assigned[assigned != UNASSIGNED]):
                if int(iid) not in known:
                    raise ValueError(f"layer references unknown instance {iid}")
