"""Procedural synthetic scene suite.

Desk-scale scenes built from analytic primitives (axis-aligned wall planes,
front-facing rectangles, spheres) and rendered to observation bundles by ray
casting, so depth, normals, and instance masks are exact and stay mutually
consistent across arbitrary cameras. The fitting and acceptance suites run
on these bundles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_core import Camera
from .world import SceneBundle

# muted palette keeps the zero-iteration render reconstruction error small
PALETTE = np.array([
    [0.45, 0.32, 0.22],
    [0.20, 0.42, 0.50],
    [0.52, 0.46, 0.18],
    [0.30, 0.24, 0.46],
    [0.18, 0.46, 0.26],
    [0.50, 0.22, 0.30],
])

FG_CATEGORIES = ("chair", "table", "sofa", "potted plant", "boat", "car")


@dataclass
class ZPlane:
    """World plane z = value within optional (x, y) bounds; normal faces -z."""
    value: float
    bounds: tuple[float, float, float, float] | None  # x0, x1, y0, y1
    instance: int
    base_color: np.ndarray
    texture: float = 0.08

    def intersect(self, origin, dirs_world):
        dz = dirs_world[:, 2]
        ok = np.abs(dz) > 1e-12
        s = np.where(ok, (self.value - origin[2]) / np.where(ok, dz, 1.0), np.inf)
        pts = origin[None, :] + s[:, None] * dirs_world
        hit = ok & (s > 1e-9)
        if self.bounds is not None:
            x0, x1, y0, y1 = self.bounds
            hit &= (pts[:, 0] >= x0) & (pts[:, 0] <= x1) & (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        normals = np.tile(np.array([0.0, 0.0, -1.0]), (len(dirs_world), 1))
        return s, hit, pts, normals


@dataclass
class XPlane:
    """World plane x = value (a side wall); normal faces away from the scene."""
    value: float
    bounds: tuple[float, float, float, float]  # y0, y1, z0, z1
    instance: int
    base_color: np.ndarray
    normal_sign: float = -1.0
    texture: float = 0.08

    def intersect(self, origin, dirs_world):
        dx = dirs_world[:, 0]
        ok = np.abs(dx) > 1e-12
        s = np.where(ok, (self.value - origin[0]) / np.where(ok, dx, 1.0), np.inf)
        pts = origin[None, :] + s[:, None] * dirs_world
        y0, y1, z0, z1 = self.bounds
        hit = ok & (s > 1e-9)
        hit &= (pts[:, 1] >= y0) & (pts[:, 1] <= y1) & (pts[:, 2] >= z0) & (pts[:, 2] <= z1)
        normals = np.tile(np.array([self.normal_sign, 0.0, 0.0]), (len(dirs_world), 1))
        return s, hit, pts, normals


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    instance: int
    base_color: np.ndarray
    texture: float = 0.08

    def intersect(self, origin, dirs_world):
        oc = origin - self.center
        a = np.einsum("pd,pd->p", dirs_world, dirs_world)
        b = 2.0 * dirs_world @ oc
        c = float(oc @ oc) - self.radius ** 2
        disc = b * b - 4 * a * c
        ok = disc > 0
        sq = np.sqrt(np.maximum(disc, 0.0))
        s = np.where(ok, (-b - sq) / (2 * a), np.inf)
        hit = ok & (s > 1e-9)
        pts = origin[None, :] + s[:, None] * dirs_world
        normals = np.zeros_like(pts)
        normals[hit] = (pts[hit] - self.center) / self.radius
        return s, hit, pts, normals


def default_camera(size: int = 48, f_scale: float = 1.1) -> Camera:
    return Camera(
        fx=size * f_scale, fy=size * f_scale,
        cx=(size - 1) / 2, cy=(size - 1) / 2,
        width=size, height=size, near=0.1, far=100.0,
    )


def orbit_camera(base: Camera, azimuth_deg: float,
                 target: np.ndarray | None = None,
                 distance: float | None = None) -> Camera:
    """Camera orbited around a world target at the same elevation."""
    target = np.array([0.0, 0.0, 5.0]) if target is None else np.asarray(target, float)
    distance = float(np.linalg.norm(target - np.zeros(3))) if distance is None else distance
    a = np.deg2rad(azimuth_deg)
    position = target + distance * np.array([np.sin(a), 0.0, -np.cos(a)])
    fwd = target - position
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, -1.0, 0.0])  # image y grows downward
    right = np.cross(up, fwd)
    right /= np.linalg.norm(right)
    up_ortho = np.cross(fwd, right)
    R = np.stack([right, -up_ortho, fwd])  # rows: camera axes in world frame
    t = -R @ position
    return Camera(fx=base.fx, fy=base.fy, cx=base.cx, cy=base.cy,
                  width=base.width, height=base.height,
                  rotation=R, translation=t, near=base.near, far=base.far)


def _color_at(prim, pts: np.ndarray) -> np.ndarray:
    wave = np.sin(4.0 * np.pi * pts[:, 0]) * np.cos(3.0 * np.pi * pts[:, 1])
    c = prim.base_color[None, :] + prim.texture * wave[:, None]
    return np.clip(c, 0.05, 0.75)


def scene_primitives(kind: str, seed: int):
    """Primitive list and category map for one procedural scene."""
    rng = np.random.default_rng(seed)
    wall_z = 6.0 + rng.uniform(-0.3, 0.3)
    prims = [ZPlane(wall_z, None, 0, PALETTE[0] * rng.uniform(0.8, 1.1))]
    categories = {0: "wall"}
    n_obj = int(rng.integers(2, 4))
    slots = rng.permutation(3)[:n_obj] - 1  # coarse x slots: -1, 0, 1
    for i in range(n_obj):
        inst = i + 1
        color = PALETTE[1 + (seed + i) % (len(PALETTE) - 1)] * rng.uniform(0.85, 1.1)
        cat = FG_CATEGORIES[(seed + i) % len(FG_CATEGORIES)]
        cx = slots[i] * 1.3 + rng.uniform(-0.15, 0.15)
        cy = rng.uniform(-0.4, 0.4)
        z = rng.uniform(3.4, 4.6)
        if kind == "boxes":
            w = rng.uniform(0.45, 0.8)
            h = rng.uniform(0.45, 0.8)
            prims.append(ZPlane(z, (cx - w, cx + w, cy - h, cy + h), inst, color))
        elif kind == "blobs":
            r = rng.uniform(0.4, 0.65)
            prims.append(Sphere(np.array([cx, cy, z + r]), r, inst, color))
        elif kind == "panels":
            # a front-facing rectangle plus, for variety, side panels
            w = rng.uniform(0.4, 0.7)
            h = rng.uniform(0.5, 0.9)
            prims.append(ZPlane(z, (cx - w, cx + w, cy - h, cy + h), inst, color))
        else:
            raise ValueError(f"unknown scene kind {kind!r}")
        categories[inst] = cat
    if kind == "panels":
        # side wall catching oblique views
        prims.append(XPlane(3.2, (-2.5, 2.5, 2.0, wall_z), 0, PALETTE[0] * 0.9))
    return prims, categories


def render_bundle(prims, categories, cam: Camera) -> SceneBundle:
    """Ray-cast the primitives into a full observation bundle."""
    H, W = cam.height, cam.width
    iy, ix = np.mgrid[0:H, 0:W]
    dirs_cam = np.stack([
        (ix.ravel() - cam.cx) / cam.fx,
        (iy.ravel() - cam.cy) / cam.fy,
        np.ones(H * W),
    ], axis=1)
    dirs_world = dirs_cam @ cam.rotation  # rows: R^T d
    origin = cam.position

    best_s = np.full(H * W, np.inf)
    best_inst = np.full(H * W, -1, dtype=np.int64)
    best_color = np.zeros((H * W, 3))
    best_normal = np.zeros((H * W, 3))
    for prim in prims:
        s, hit, pts, normals = prim.intersect(origin, dirs_world)
        closer = hit & (s < best_s)
        best_s[closer] = s[closer]
        best_inst[closer] = prim.instance
        best_color[closer] = _color_at(prim, pts[closer])
        best_normal[closer] = normals[closer]

    if np.any(~np.isfinite(best_s)):
        raise ValueError("synthetic scene leaves uncovered pixels; add a backdrop")

    # camera-frame normals facing the viewer
    n_cam = best_normal @ cam.rotation.T
    flip = np.einsum("pd,pd->p", n_cam, dirs_cam) > 0
    n_cam[flip] *= -1.0

    depth = best_s.reshape(H, W)  # s parameterizes camera-frame z directly
    return SceneBundle(
        image=best_color.reshape(H, W, 3),
        depth=depth.astype(np.float64),
        normals=n_cam.reshape(H, W, 3),
        instance_mask=best_inst.reshape(H, W),
        categories=dict(categories),
        camera=cam,
    )


def make_bundle(kind: str, seed: int, cam: Camera | None = None, size: int = 48) -> SceneBundle:
    cam = cam or default_camera(size)
    prims, categories = scene_primitives(kind, seed)
    return render_bundle(prims, categories, cam)


SUITE_KINDS = ("boxes", "blobs", "panels")


def make_suite(size: int = 48, seeds=(0, 1, 2)):
    """The 9-scene suite: every kind crossed with every seed."""
    out = []
    for kind in SUITE_KINDS:
        for seed in seeds:
            out.append((f"{kind}_{seed}", make_bundle(kind, seed, size=size)))
    return out
