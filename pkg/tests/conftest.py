"""Shared helpers: random rigid transforms, cameras, error measures."""

import math

import numpy as np
import pytest

from lidarup.geometry import CameraModel, RigidTransform, rotation_angle


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform random rotation via QR of a Gaussian matrix, det fixed to +1."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0.0:
        q[:, 0] = -q[:, 0]
    return q


def random_transform(rng: np.random.Generator, t_scale: float = 2.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-t_scale, t_scale, 3))


def rotation_error_deg(a: np.ndarray, b: np.ndarray) -> float:
    return math.degrees(rotation_angle(a.T @ b))


def transform_gap(a: RigidTransform, b: RigidTransform) -> float:
    """Max absolute entry difference between the 3x4 matrices."""
    return float(np.max(np.abs(a.as_matrix() - b.as_matrix())))


@pytest.fixture
def cam() -> CameraModel:
    k = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
    return CameraModel(k, 640, 480)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)
