"""Dense descriptor network, descriptor sampling, and the soft-binned
ranking-AP loss over multiview batches.

The loss ranks, for each anchor point, its augmented correspondences
(positives) against every other sampled point in the batch (negatives) by
descriptor distance, approximating average precision with a differentiable
soft histogram. Training maximizes batch AP, i.e. minimizes 1 - AP.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

from .errors import ConfigError
from .geometry import PointSet, bilinear_lookup

logger = logging.getLogger(__name__)

_NORM_EPS = 1e-8
_DIST_EPS = 1e-12


@dataclass
class DescriptorField:
    """Dense per-pixel descriptor grid, unit-norm when ``normalized``."""

    values: np.ndarray  # (H, W, D) float32
    normalized: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("descriptor field must be (H, W, D)")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def dim(self) -> int:
        return self.values.shape[2]


class DescriptorNetwork(nn.Module):
    """Fully convolutional descriptor trunk with dilated layers.

    Dilation replaces striding so the output keeps the input resolution;
    the head projects to ``dim`` channels and L2-normalizes per pixel.
    """

    def __init__(
        self,
        channels: Sequence[int] = (32, 32, 64, 64, 128, 128),
        dilations: Sequence[int] = (1, 1, 2, 2, 4, 4),
        dim: int = 128,
        in_channels: int = 3,
    ):
        super().__init__()
        if len(channels) != len(dilations):
            raise ConfigError("channels and dilations must have equal length")
        layers: list[nn.Module] = []
        prev = in_channels
        for ch, dil in zip(channels, dilations):
            layers += [
                nn.Conv2d(prev, ch, kernel_size=3, padding=dil, dilation=dil),
                nn.BatchNorm2d(ch),
                nn.ReLU(inplace=True),
            ]
            prev = ch
        self.trunk = nn.Sequential(*layers)
        self.head = nn.Conv2d(prev, dim, kernel_size=1)
        self.profile = {
            "channels": list(channels),
            "dilations": list(dilations),
            "dim": int(dim),
            "in_channels": int(in_channels),
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.head(self.trunk(x))
        return nn.functional.normalize(out, p=2, dim=1, eps=_NORM_EPS)

    @classmethod
    def from_profile(cls, profile: dict) -> "DescriptorNetwork":
        return cls(
            channels=profile["channels"],
            dilations=profile["dilations"],
            dim=profile["dim"],
            in_channels=profile.get("in_channels", 3),
        )


@dataclass
class DescriptorState:
    """A descriptor network plus the metadata needed to persist it."""

    network: DescriptorNetwork
    step: int = 0
    optimizer_state: Optional[dict] = None

    @property
    def profile(self) -> dict:
        return self.network.profile

    @property
    def dim(self) -> int:
        return self.network.profile["dim"]


DescribeFn = Callable[[np.ndarray], DescriptorField]


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float array in [0, 1] -> (3, H, W) float32 tensor."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def describe(network: DescriptorNetwork, image: np.ndarray) -> DescriptorField:
    """Run the descriptor network on one image (inference mode)."""
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            out = network(image_to_tensor(image).unsqueeze(0))[0]
    finally:
        network.train(was_training)
    return DescriptorField(out.permute(1, 2, 0).numpy(), normalized=True)


def as_describe_fn(descriptor: Union[DescriptorNetwork, DescriptorState, DescribeFn]) -> DescribeFn:
    if isinstance(descriptor, DescriptorState):
        net = descriptor.network
        return lambda img: describe(net, img)
    if isinstance(descriptor, DescriptorNetwork):
        return lambda img: describe(descriptor, img)
    return descriptor


def sample_descriptors(field: DescriptorField, points: PointSet) -> np.ndarray:
    """Bilinearly interpolate the field at (x, y) points, re-normalized to
    unit length. Out-of-bounds points raise; callers pre-filter by validity.
    """
    h, w, _ = field.shape
    coords = points.coords
    x, y = coords[:, 0], coords[:, 1]
    if not ((x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)).all():
        raise ValueError("point outside descriptor field bounds")
    vals, _ = bilinear_lookup(field.values.astype(np.float64), x, y)
    norms = np.linalg.norm(vals, axis=1, keepdims=True)
    return (vals / np.maximum(norms, _NORM_EPS)).astype(np.float32)


def bilinear_sample_torch(field: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear gather from a (D, H, W) field at (N, 2) xy,
    re-normalized to unit length."""
    d, h, w = field.shape
    x = xy[:, 0].clamp(0, w - 1)
    y = xy[:, 1].clamp(0, h - 1)
    x0 = x.floor().long()
    y0 = y.floor().long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    fx = (x - x0.to(x.dtype)).unsqueeze(0)
    fy = (y - y0.to(y.dtype)).unsqueeze(0)
    flat = field.reshape(d, h * w)
    v00 = flat[:, y0 * w + x0]
    v01 = flat[:, y0 * w + x1]
    v10 = flat[:, y1 * w + x0]
    v11 = flat[:, y1 * w + x1]
    out = (
        v00 * (1 - fx) * (1 - fy)
        + v01 * fx * (1 - fy)
        + v10 * (1 - fx) * fy
        + v11 * fx * fy
    ).transpose(0, 1)
    return nn.functional.normalize(out, p=2, dim=1, eps=_NORM_EPS)


@dataclass
class FastAPConfig:
    """Soft-histogram quantization of the [0, 2] unit-vector distance domain
    into ``bins`` centers one bin-spacing apart (triangular kernel)."""

    bins: int = 10

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("fastap bins must be >= 2")

    @property
    def spacing(self) -> float:
        return 2.0 / (self.bins - 1)


@dataclass
class SampleSet:
    """All sampled descriptors of one batch with correspondence grouping.

    ``vectors`` holds every sampled instance (reference and view samples),
    ``group_ids`` its correspondence id, and ``anchor_indices`` selects which
    instances act as anchors. An anchor's positives are the other members of
    its group; its negatives are every instance of every other group.
    """

    vectors: Union[np.ndarray, torch.Tensor]
    group_ids: Union[np.ndarray, torch.Tensor]
    anchor_indices: Union[np.ndarray, torch.Tensor, None] = None

    def __post_init__(self):
        n = self.vectors.shape[0]
        if self.group_ids.shape[0] != n:
            raise ValueError("group_ids length mismatch")
        if self.anchor_indices is None:
            self.anchor_indices = np.arange(n, dtype=np.int64)


@dataclass
class FastApResult:
    loss: Union[float, torch.Tensor]
    per_anchor_ap: Union[np.ndarray, torch.Tensor]  # NaN where excluded
    valid_anchors: np.ndarray

    @property
    def batch_ap(self) -> float:
        ap = self.per_anchor_ap
        if isinstance(ap, torch.Tensor):
            ap = ap.detach().numpy()
        return float(np.nanmean(ap))


def _as_tensor(arr, dtype=None) -> torch.Tensor:
    if isinstance(arr, torch.Tensor):
        return arr if dtype is None else arr.to(dtype)
    t = torch.from_numpy(np.asarray(arr))
    return t if dtype is None else t.to(dtype)


def fast_ap(
    samples: SampleSet,
    config: Optional[FastAPConfig] = None,
    warn_excluded: bool = True,
) -> FastApResult:
    """Differentiable average precision over a grouped sample set.

    Per anchor, distances to its positives and negatives are soft-binned over
    [0, 2] with a triangular kernel; AP accumulates, per bin, the positive
    mass times the precision at its expected rank inside the bin, so the soft
    AP converges to the exact ranking AP as bins shrink. The loss is 1 minus
    the mean AP over usable anchors. Anchors without at least one positive
    and one negative are excluded (warned); if none remain, raises.
    """
    cfg = config or FastAPConfig()
    was_numpy = not isinstance(samples.vectors, torch.Tensor)
    vectors = _as_tensor(samples.vectors, torch.float64 if was_numpy else None)
    group_ids = _as_tensor(samples.group_ids).long()
    anchor_idx = _as_tensor(samples.anchor_indices).long()

    anchors = vectors[anchor_idx]  # (A, D)
    t_total = vectors.shape[0]
    a_total = anchors.shape[0]
    d2 = (2.0 - 2.0 * anchors @ vectors.T).clamp_min(0.0)
    dist = torch.sqrt(d2.clamp_min(_DIST_EPS))

    same = group_ids[anchor_idx].unsqueeze(1) == group_ids.unsqueeze(0)
    self_mask = torch.zeros((a_total, t_total), dtype=torch.bool)
    self_mask[torch.arange(a_total), anchor_idx] = True
    pos_mask = (same & ~self_mask).to(dist.dtype)
    neg_mask = (~same).to(dist.dtype)

    m_pos = pos_mask.sum(dim=1)
    n_neg = neg_mask.sum(dim=1)
    usable = (m_pos >= 1) & (n_neg >= 1)
    if not bool(usable.any()):
        raise ValueError("every anchor lacks positives or negatives")
    if not bool(usable.all()):
        message = f"excluding {int((~usable).sum())} anchor(s) without positives or negatives"
        if warn_excluded:
            warnings.warn(message, stacklevel=2)
        else:
            logger.debug(message)

    q = cfg.bins
    delta = cfg.spacing
    centers = torch.linspace(0.0, 2.0, q, dtype=dist.dtype)
    if a_total * t_total * q <= 2 ** 24:
        pulse = (1.0 - (dist.unsqueeze(2) - centers).abs() / delta).clamp_min(0.0)
        pos_hist = (pulse * pos_mask.unsqueeze(2)).sum(dim=1)  # (A, Q)
        all_hist = pos_hist + (pulse * neg_mask.unsqueeze(2)).sum(dim=1)
    else:
        pos_cols = []
        all_cols = []
        for j in range(q):
            pj = (1.0 - (dist - centers[j]).abs() / delta).clamp_min(0.0)
            pos_cols.append((pj * pos_mask).sum(dim=1))
            all_cols.append((pj * (pos_mask + neg_mask)).sum(dim=1))
        pos_hist = torch.stack(pos_cols, dim=1)
        all_hist = torch.stack(all_cols, dim=1)

    # precision at the expected rank inside each bin: prior cumulative mass
    # plus half the bin's own (denominator >= 1/2, so no masking needed)
    prev_pos = torch.cumsum(pos_hist, dim=1) - pos_hist
    prev_all = torch.cumsum(all_hist, dim=1) - all_hist
    precision = (prev_pos + (pos_hist + 1.0) / 2.0) / (prev_all + (all_hist + 1.0) / 2.0)
    ap = (pos_hist * precision).sum(dim=1) / m_pos.clamp_min(1.0)

    loss = 1.0 - ap[usable].mean()
    per_anchor = torch.where(usable, ap, torch.full_like(ap, float("nan")))
    valid_np = usable.numpy() if not usable.requires_grad else usable.detach().numpy()
    if was_numpy:
        return FastApResult(float(loss.item()), per_anchor.detach().numpy(), valid_np)
    return FastApResult(loss, per_anchor, valid_np)


def batch_sample_set(
    fields: torch.Tensor,
    batch,
    anchors_only: bool = False,
) -> SampleSet:
    """Gather descriptors for every valid instance of a ViewBatch.

    ``fields`` is the stacked network output (N+1, D, H, W) with index 0 the
    reference. Returns a SampleSet whose anchors are every instance, or only
    the reference instances when ``anchors_only`` (the sparse-heatmap case).
    """
    anchor_xy = torch.from_numpy(batch.anchor_points.coords).to(fields.dtype)
    chunks = [bilinear_sample_torch(fields[0], anchor_xy)]
    gids = [torch.from_numpy(batch.anchor_points.ids)]
    for v, pts in enumerate(batch.per_view_points):
        idx = np.flatnonzero(batch.valid_flags[v])
        if len(idx) == 0:
            continue
        xy = torch.from_numpy(pts.coords[idx]).to(fields.dtype)
        chunks.append(bilinear_sample_torch(fields[v + 1], xy))
        gids.append(torch.from_numpy(pts.ids[idx]))
    vectors = torch.cat(chunks, dim=0)
    group_ids = torch.cat(gids, dim=0)
    n_ref = len(batch.anchor_points)
    if anchors_only:
        anchor_indices = np.arange(n_ref, dtype=np.int64)
    else:
        anchor_indices = np.arange(vectors.shape[0], dtype=np.int64)
    return SampleSet(vectors, group_ids, anchor_indices)
