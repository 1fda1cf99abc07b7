import numpy as np
import pytest

from platefit import (
    GeometryConfig,
    MaterialParams,
    assemble,
    generate_strip_mesh,
)

# steel-strip reference specimen used throughout the suite
STRIP_KW = dict(
    length=0.1,
    width=0.02,
    thickness=1e-3,
    test_point=(0.005, 0.015),
    accel_center=(0.005, 0.015),
    accel_radius=1e-3,
    accel_mass=1e-3,
)
DENSITY = 7920.0
YOUNG = 198e9
POISSON = 0.286
LOSS_FACTOR = 0.003
RIGIDITY = 2.0 * YOUNG * (0.5e-3) ** 3 / (3.0 * (1.0 - POISSON**2))
THETA_REF = np.array([RIGIDITY, POISSON, LOSS_FACTOR])


def strip_config(nx, ny, accel=True, accel_y=0.015):
    kw = dict(STRIP_KW)
    kw["test_point"] = (0.005, accel_y)
    if accel:
        kw["accel_center"] = (0.005, accel_y)
    else:
        kw["accel_center"] = None
        kw["accel_radius"] = 0.0
        kw["accel_mass"] = 0.0
    return GeometryConfig(nx=nx, ny=ny, **kw)


def strip_material(beta=LOSS_FACTOR, rho=DENSITY):
    return MaterialParams.from_young_modulus(YOUNG, POISSON, beta, rho, 1e-3)


@pytest.fixture(scope="session")
def fine_setup():
    """Shifted-accelerometer strip on the 50x10 grid."""
    cfg = strip_config(50, 10)
    mesh = generate_strip_mesh(cfg)
    ops = assemble(mesh, cfg, rho0=DENSITY)
    return cfg, mesh, ops


@pytest.fixture(scope="session")
def coarse_setup():
    """Same strip on the 25x5 grid (fast inverse-crime workhorse)."""
    cfg = strip_config(25, 5)
    mesh = generate_strip_mesh(cfg)
    ops = assemble(mesh, cfg, rho0=DENSITY)
    return cfg, mesh, ops
