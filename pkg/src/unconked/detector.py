"""Keypoint detection by descriptor-performance regression.

Targets are heatmaps measuring how well the frozen descriptor performs at
each location: a self-similarity map (mean pairwise cosine similarity of a
point's descriptors across augmented views) and a sparse ranking-AP map. A
U-Net-style network learns to predict them from the raw image; keypoints are
local extrema of the predicted map under windowed NMS. A heuristic baseline
scores the descriptor field directly (soft local max times channel ratio).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .augmentation import ViewBatch, estimate_roi
from .descriptor import (
    DescribeFn,
    DescriptorField,
    DescriptorState,
    FastAPConfig,
    SampleSet,
    as_describe_fn,
    fast_ap,
    sample_descriptors,
)
from .errors import RoiEstimationError
from .geometry import PointSet, warp_image

logger = logging.getLogger(__name__)

LOWER = "lower_is_better"
HIGHER = "higher_is_better"

_MEMBER_NORM_EPS = 1e-6


@dataclass
class Heatmap:
    """Per-pixel score map with polarity and a validity mask.

    ``kind`` is one of: ap, ss, combined, predicted_ap, predicted_ss (plus
    internal kinds such as d2). AP-style maps are lower-is-better losses in
    [0, 1]; SS maps are clamped cosine similarities in [0, 1].
    """

    values: np.ndarray
    polarity: str
    validity_mask: np.ndarray
    kind: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.validity_mask = np.asarray(self.validity_mask, dtype=bool)
        if self.values.shape != self.validity_mask.shape or self.values.ndim != 2:
            raise ValueError("heatmap values/mask shape mismatch")
        if self.polarity not in (LOWER, HIGHER):
            raise ValueError(f"unknown polarity {self.polarity!r}")


@dataclass
class KeypointCandidates:
    points: PointSet
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def ss_map(descriptor: Union[DescriptorState, DescribeFn], batch: ViewBatch) -> Heatmap:
    """Self-similarity heatmap over the batch reference.

    For every reference pixel, the member descriptors are the reference
    descriptor plus the view descriptors read back through each view's
    affine (bilinear, re-normalized). The score is the mean cosine
    similarity over all member pairs, clamped to [0, 1]; pixels with fewer
    than 2 valid members are masked out.
    """
    describe_fn = as_describe_fn(descriptor)
    ref_field = describe_fn(batch.reference).values.astype(np.float64)
    h, w, _ = ref_field.shape
    total = ref_field.copy()
    count = np.ones((h, w), dtype=np.float64)
    for view in batch.views:
        field_v = describe_fn(view.image).values.astype(np.float64)
        inv = view.affine.inverse()
        pulled, support = warp_image(inv, field_v, interpolation="bilinear")
        vmask, _ = warp_image(inv, view.validity_mask.astype(np.float32), interpolation="nearest")
        norms = np.linalg.norm(pulled, axis=2)
        ok = support & (vmask > 0.5) & (norms > _MEMBER_NORM_EPS)
        unit = pulled / np.maximum(norms, _MEMBER_NORM_EPS)[..., None]
        total += np.where(ok[..., None], unit, 0.0)
        count += ok
    mask = count >= 2
    denom = np.maximum(count * (count - 1.0), 1.0)
    raw = ((total ** 2).sum(axis=2) - count) / denom
    values = np.where(mask, np.clip(raw, 0.0, 1.0), 0.0)
    return Heatmap(values, HIGHER, mask, "ss")


def ap_map(
    descriptor: Union[DescriptorState, DescribeFn],
    batch: ViewBatch,
    anchor_count: Optional[int] = None,
    config: Optional[FastAPConfig] = None,
    warn_excluded: bool = True,
) -> Heatmap:
    """Sparse ranking-AP-loss heatmap at the batch's sampled anchors.

    Each anchor's score is 1 minus its per-anchor AP, ranking its valid view
    correspondences against every other sampled point in the batch. Only the
    anchor pixels enter the validity mask; lower is better.
    """
    describe_fn = as_describe_fn(descriptor)
    n_anchors = len(batch.anchor_points)
    if anchor_count is not None:
        n_anchors = min(anchor_count, n_anchors)

    ref_field = describe_fn(batch.reference)
    anchors = PointSet(
        batch.anchor_points.coords[:n_anchors],
        batch.anchor_points.ids[:n_anchors],
    )
    vectors = [sample_descriptors(ref_field, anchors)]
    gids = [anchors.ids]
    for v, pts in enumerate(batch.per_view_points):
        idx = np.flatnonzero(batch.valid_flags[v][:n_anchors])
        if len(idx) == 0:
            continue
        view_field = describe_fn(batch.views[v].image)
        sub = PointSet(pts.coords[idx], pts.ids[idx])
        vectors.append(sample_descriptors(view_field, sub))
        gids.append(sub.ids)
    samples = SampleSet(
        np.concatenate(vectors, axis=0),
        np.concatenate(gids, axis=0),
        np.arange(n_anchors, dtype=np.int64),
    )
    result = fast_ap(samples, config, warn_excluded=warn_excluded)

    h, w = batch.reference.shape[:2]
    values = np.zeros((h, w), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    xi = np.round(anchors.coords[:, 0]).astype(int)
    yi = np.round(anchors.coords[:, 1]).astype(int)
    for i in range(n_anchors):
        if result.valid_anchors[i]:
            values[yi[i], xi[i]] = 1.0 - float(result.per_anchor_ap[i])
            mask[yi[i], xi[i]] = True
    return Heatmap(values, LOWER, mask, "ap")


def combine_maps(pred_ap: Heatmap, pred_ss: Heatmap) -> Heatmap:
    """Fuse predicted AP and SS maps: invert the min-max-normalized AP map
    and multiply by SS. A flat AP map is treated as uninformative (norm 0)."""
    if pred_ap.values.shape != pred_ss.values.shape:
        raise ValueError("heatmap dimensions differ")
    if pred_ap.polarity != LOWER or pred_ss.polarity != HIGHER:
        raise ValueError("combine_maps expects (lower_is_better, higher_is_better)")
    joint = pred_ap.validity_mask & pred_ss.validity_mask
    values = np.zeros_like(pred_ap.values, dtype=np.float32)
    if joint.any():
        a = pred_ap.values[joint].astype(np.float64)
        lo, hi = a.min(), a.max()
        ap_norm = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
        values[joint] = ((1.0 - ap_norm) * pred_ss.values[joint]).astype(np.float32)
    return Heatmap(values, HIGHER, joint, "combined")


def nms_select(heatmap: Heatmap, k: Optional[int] = None, window: int = 11) -> KeypointCandidates:
    """Select up to k windowed extrema of the heatmap, best first.

    A candidate must attain the extremum of its centered window over valid
    pixels; equal-score candidates inside one window are deduplicated in
    raster order. ``k=None`` keeps every extremum. Fewer extrema than k
    returns all of them.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if k is not None and k < 1:
        raise ValueError("k must be >= 1")
    h, w = heatmap.values.shape
    work = heatmap.values.astype(np.float64)
    if heatmap.polarity == LOWER:
        work = -work
    filled = np.where(heatmap.validity_mask, work, -np.inf)
    local_max = ndimage.maximum_filter(filled, size=window, mode="constant", cval=-np.inf)
    cand = heatmap.validity_mask & (filled == local_max)
    ys, xs = np.nonzero(cand)
    if len(xs) == 0:
        return KeypointCandidates(PointSet.from_coords(np.empty((0, 2))), np.empty(0, dtype=np.float32))
    scores = filled[ys, xs]
    order = np.lexsort((ys.astype(np.int64) * w + xs, -scores))
    radius = window // 2
    suppressed = np.zeros((h, w), dtype=bool)
    keep: list[int] = []
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if suppressed[y, x]:
            continue
        keep.append(i)
        if k is not None and len(keep) >= k:
            break
        suppressed[max(0, y - radius):y + radius + 1, max(0, x - radius):x + radius + 1] = True
    coords = np.stack([xs[keep], ys[keep]], axis=1).astype(np.float64)
    final_scores = heatmap.values[ys[keep], xs[keep]]
    return KeypointCandidates(PointSet.from_coords(coords), final_scores)


def d2_score_map(field: DescriptorField) -> np.ndarray:
    """Heuristic per-pixel keypoint score from a descriptor field: soft local
    max over a replicate-padded 3x3 neighborhood times channel ratio-to-max,
    maximized over channels."""
    d = field.values.astype(np.float64)
    exp_d = np.exp(d)
    local_sum = ndimage.uniform_filter(exp_d, size=(3, 3, 1), mode="nearest") * 9.0
    alpha = exp_d / local_sum
    channel_max = d.max(axis=2, keepdims=True)
    beta = d / np.maximum(channel_max, 1e-12)
    return (alpha * beta).max(axis=2)


def d2_detect(field: DescriptorField, k: Optional[int] = None, window: int = 11) -> KeypointCandidates:
    """Baseline detector operating directly on the descriptor field, with the
    same windowed NMS as the learned detector for a like-for-like pipeline."""
    score = d2_score_map(field)
    hm = Heatmap(score.astype(np.float32), HIGHER, np.ones(score.shape, dtype=bool), "d2")
    return nms_select(hm, k, window)


class _DoubleConv(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.BatchNorm2d(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class DetectorNetwork(nn.Module):
    """U-Net-style encoder/decoder regressing a single sigmoid heatmap."""

    def __init__(self, base_channels: int = 32, depth: int = 4, in_channels: int = 3):
        super().__init__()
        self.depth = depth
        enc_channels = [base_channels * (2 ** i) for i in range(depth)]
        self.encoders = nn.ModuleList()
        prev = in_channels
        for ch in enc_channels:
            self.encoders.append(_DoubleConv(prev, ch))
            prev = ch
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _DoubleConv(prev, prev * 2)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        ch = prev * 2
        for enc_ch in reversed(enc_channels):
            self.ups.append(nn.ConvTranspose2d(ch, enc_ch, kernel_size=2, stride=2))
            self.decoders.append(_DoubleConv(enc_ch * 2, enc_ch))
            ch = enc_ch
        self.out_conv = nn.Conv2d(ch, 1, kernel_size=1)
        self.profile = {
            "base_channels": int(base_channels),
            "depth": int(depth),
            "in_channels": int(in_channels),
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        mult = 2 ** self.depth
        pad_h = (mult - h % mult) % mult
        pad_w = (mult - w % mult) % mult
        if pad_h or pad_w:
            x = nn.functional.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        out = torch.sigmoid(self.out_conv(x))
        return out[..., :h, :w]

    @classmethod
    def from_profile(cls, profile: dict) -> "DetectorNetwork":
        return cls(
            base_channels=profile["base_channels"],
            depth=profile["depth"],
            in_channels=profile.get("in_channels", 3),
        )


@dataclass
class DetectorState:
    """A detector network plus the metadata needed to run and persist it."""

    network: DetectorNetwork
    target_kind: str           # "ap" | "ss"
    input_size: int
    step: int = 0
    optimizer_state: Optional[dict] = None

    @property
    def profile(self) -> dict:
        return self.network.profile

    @property
    def polarity(self) -> str:
        return LOWER if self.target_kind == "ap" else HIGHER


def roi_or_empty(image: np.ndarray, threshold: float = 0.06):
    """RoI estimate that degrades to an all-false mask instead of raising,
    so unusable images yield zero keypoints (a registration failure) rather
    than an error."""
    try:
        return estimate_roi(image, threshold).mask
    except RoiEstimationError:
        return np.zeros(image.shape[:2], dtype=bool)


def predict_heatmap(
    state: DetectorState,
    image: np.ndarray,
    roi_mask: Optional[np.ndarray] = None,
    roi_threshold: float = 0.06,
) -> Heatmap:
    """Predict the descriptor-performance map for one image.

    The image must match the detector's inference size; validity is the RoI
    (estimated when not supplied) and polarity follows the trained target.
    """
    h, w = image.shape[:2]
    if (w, h) != (state.input_size, state.input_size):
        raise ValueError(
            f"image size {(w, h)} does not match detector inference size "
            f"{state.input_size}"
        )
    from .descriptor import image_to_tensor

    net = state.network
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            values = net(image_to_tensor(image).unsqueeze(0))[0, 0].numpy()
    finally:
        net.train(was_training)
    if roi_mask is None:
        roi_mask = roi_or_empty(image, roi_threshold)
    return Heatmap(values, state.polarity, roi_mask, f"predicted_{state.target_kind}")


class HeatmapKeypoints:
    """Keypoint source backed by one (or two, for combined mode) trained
    detector networks."""

    def __init__(
        self,
        state: DetectorState,
        ss_state: Optional[DetectorState] = None,
        nms_window: int = 11,
        roi_threshold: float = 0.06,
    ):
        self.state = state
        self.ss_state = ss_state
        self.nms_window = nms_window
        self.roi_threshold = roi_threshold
        if ss_state is not None and (state.target_kind, ss_state.target_kind) != ("ap", "ss"):
            raise ValueError("combined mode needs an ap-state plus an ss-state")

    @property
    def name(self) -> str:
        if self.ss_state is not None:
            return "combined"
        return f"predicted_{self.state.target_kind}"

    def detect(self, image: np.ndarray, field: DescriptorField, k: Optional[int]) -> KeypointCandidates:
        hm = predict_heatmap(self.state, image, roi_threshold=self.roi_threshold)
        if self.ss_state is not None:
            hm = combine_maps(hm, predict_heatmap(self.ss_state, image, roi_threshold=self.roi_threshold))
        return nms_select(hm, k, self.nms_window)


class D2Keypoints:
    """Keypoint source running the heuristic baseline on the descriptor
    field, sharing the downstream pipeline with the learned detector."""

    def __init__(self, nms_window: int = 11):
        self.nms_window = nms_window
        self.name = "d2"

    def detect(self, image: np.ndarray, field: DescriptorField, k: Optional[int]) -> KeypointCandidates:
        return d2_detect(field, k, self.nms_window)
