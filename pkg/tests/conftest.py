import numpy as np
import pytest

from splatworld.scene_core import Camera, GaussianSet, quat_normalize


def random_scene(rng, n, embed_dim=4, spread=0.8, z_range=(2.0, 6.0)):
    """Random gaussian batch in front of a +z-looking camera at the origin."""
    positions = np.empty((n, 3))
    positions[:, 0] = rng.uniform(-spread, spread, n)
    positions[:, 1] = rng.uniform(-spread, spread, n)
    positions[:, 2] = rng.uniform(*z_range, n)
    quats = quat_normalize(rng.normal(size=(n, 4)))
    scales = rng.uniform(0.02, 0.12, (n, 3))
    scales[:, 2] *= 0.01
    opacities = rng.uniform(0.1, 0.9, n)
    colors = rng.uniform(0.0, 1.0, (n, 3))
    gammas = rng.normal(size=(n, embed_dim))
    ids = rng.integers(0, 4, n)
    return GaussianSet(positions, quats, scales, opacities, colors, gammas, ids)


def simple_camera(width=32, height=32, f=None, z_near=0.1, z_far=100.0):
    f = f if f is not None else width * 1.1
    return Camera(
        fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height, near=z_near, far=z_far,
    )


def fd_safe_scene(rng, n, cam, embed_dim=4, max_tries=200):
    """Random scene whose forward pass is smooth around the current point.

    Finite differencing needs a config away from the discrete branches of the
    rasterizer: integer footprint-box edges, the 0.99 opacity clamp, the
    transmittance early exit, and view-depth ties.
    """
    from splatworld.rasterizer import FOOTPRINT_SIGMA, project_set

    for _ in range(max_tries):
        scene = random_scene(rng, n, embed_dim=embed_dim, spread=0.5, z_range=(2.0, 5.0))
        scene.opacities = rng.uniform(0.15, 0.85, n)
        batch = project_set(scene, cam)
        if len(batch) != n:
            continue
        edges = np.concatenate([
            batch.mean2d[:, 0] - batch.radius, batch.mean2d[:, 0] + batch.radius,
            batch.mean2d[:, 1] - batch.radius, batch.mean2d[:, 1] + batch.radius,
        ])
        if np.min(np.abs(edges - np.round(edges))) < 0.05:
            continue
        z = np.sort(batch.z)
        if n > 1 and np.min(np.diff(z)) < 1e-2:
            continue
        return scene
    raise RuntimeError("could not build an FD-safe scene")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    # one visible line per acceptance criterion when the suite runs verbose
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        print(f"\nACCEPTANCE {name}: {report.outcome.upper()}")
