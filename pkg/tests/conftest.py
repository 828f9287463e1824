import numpy as np
import pytest
from scipy import ndimage


def vessel_image(seed: int, size: int = 96) -> np.ndarray:
    """Synthetic fundus-like texture: warm smooth background, dark curved
    vessel strokes, signed blobs, and two scales of local texture."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size

    base = np.full((size, size), 0.55)
    for _ in range(4):
        a, b = rng.uniform(0.5, 3.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        base += 0.07 * np.sin(2 * np.pi * (a * xs + b * ys) + phase)

    strokes = np.zeros((size, size))
    for _ in range(14):
        p0 = rng.uniform(0, size, 2)
        p2 = rng.uniform(0, size, 2)
        p1 = (p0 + p2) / 2 + rng.uniform(-0.4, 0.4, 2) * size
        t = np.linspace(0, 1, 4 * size)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        width = rng.uniform(0.7, 1.6)
        for x, y in pts:
            xi, yi = int(round(x)), int(round(y))
            if 2 <= xi < size - 2 and 2 <= yi < size - 2:
                strokes[yi - 2:yi + 3, xi - 2:xi + 3] += _STAMP ** (1.0 / width)
    strokes = np.clip(strokes, 0, 1)

    blobs = np.zeros((size, size))
    for _ in range(6):
        cx, cy = rng.uniform(size * 0.1, size * 0.9, 2)
        r = rng.uniform(2.0, 6.0)
        sign = rng.choice([-1.0, 1.0])
        blobs += sign * np.exp(-(((xs * size - cx) ** 2 + (ys * size - cy) ** 2) / (2 * r * r)))
    fine = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 0.9) * 0.10
    coarse = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 3.0) * 0.08

    level = np.clip(base - 0.5 * strokes + 0.16 * blobs + fine + coarse, 0.08, 1.0)
    img = np.stack([level * 0.95, level * 0.62, level * 0.38], axis=-1)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


_yy, _xx = np.mgrid[-2:3, -2:3]
_STAMP = np.exp(-(_xx ** 2 + _yy ** 2) / 2.0)


@pytest.fixture(scope="session")
def vessel_image_factory():
    return vessel_image


def synthetic_describe_fn(seed: int = 0, dim: int = 8):
    """Deterministic stand-in for a descriptor network: a fixed random
    projection of pixel color plus fixed spatial harmonics, unit-normalized.
    Smooth, so bilinear sampling stays meaningful."""
    from unconked.descriptor import DescriptorField

    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(3, dim))

    def fn(image):
        vals = image.astype(np.float64) @ weights
        h, w = image.shape[:2]
        ys, xs = np.mgrid[0:h, 0:w] / max(h, w)
        for d in range(dim):
            vals[..., d] += 0.5 * np.sin(2 * np.pi * ((d + 1) * 0.37 * xs + (d + 2) * 0.23 * ys))
        norms = np.linalg.norm(vals, axis=2, keepdims=True)
        return DescriptorField((vals / np.maximum(norms, 1e-9)).astype(np.float32))

    return fn


def tiny_config(size: int = 48, n_views: int = 2):
    """A RunConfig scaled down for fast unit tests."""
    from unconked.config import RunConfig

    cfg = RunConfig()
    cfg.batch.image_size = size
    cfg.batch.n_views = n_views
    cfg.batch.descriptor_points = 60
    cfg.batch.detector_points = 30
    cfg.descriptor.channels = (8, 8)
    cfg.descriptor.dilations = (1, 1)
    cfg.descriptor.dim = 16
    cfg.descriptor.epochs = 1
    cfg.detector.base_channels = 4
    cfg.detector.depth = 2
    cfg.detector.epochs = 1
    cfg.inference.image_size = size
    cfg.inference.k_keypoints = 50
    return cfg


@pytest.fixture
def tiny_config_factory():
    return tiny_config
