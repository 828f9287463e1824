"""Training loops: descriptor network on the ranking-AP loss, detector
network on masked-MSE heatmap regression against frozen-descriptor targets.

Both loops are deterministic given the tripartite seeds: augmentation and
point sampling use per-step child generators, network init and optimizer
use torch seeding derived from the sampling seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augmentation import RoIMask, build_view_batch, estimate_roi
from .config import RunConfig
from .descriptor import (
    DescriptorNetwork,
    DescriptorState,
    FastAPConfig,
    batch_sample_set,
    describe,
    fast_ap,
    image_to_tensor,
)
from .detector import DetectorNetwork, DetectorState, ap_map, ss_map
from .errors import TrainingDiverged
from .geometry import resize_image

logger = logging.getLogger(__name__)


@dataclass
class TrainingSample:
    image: np.ndarray  # (S, S, 3) float32 in [0, 1]
    roi: RoIMask


def prepare_samples(
    images: Sequence[np.ndarray],
    config: RunConfig,
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> list[TrainingSample]:
    """Normalize images to the training size and attach RoI masks (loaded,
    estimated, or full-frame when RoI restriction is off)."""
    size = config.batch.image_size
    out: list[TrainingSample] = []
    for i, img in enumerate(images):
        resized = resize_image(img.astype(np.float32), (size, size))
        mask = masks[i] if masks is not None else None
        if mask is not None:
            m = resize_image(mask.astype(np.float32), (size, size)) > 0.5
            roi = RoIMask(m, source="loaded")
        elif config.augmentation.roi_restricted:
            roi = estimate_roi(resized, config.augmentation.roi_threshold)
        else:
            roi = RoIMask.full((size, size))
        out.append(TrainingSample(resized, roi))
    return out


def _step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(step,)))


def _write_log(path: Optional[Path], entries: list[dict]) -> None:
    if path is None:
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for entry in entries:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def build_batch(sample: TrainingSample, config: RunConfig, point_count: int, step: int):
    aug = config.augmentation
    return build_view_batch(
        sample.image,
        sample.roi,
        n_views=config.batch.n_views,
        affine_ranges=aug.affine_ranges(),
        hsv_ranges=aug.hsv_ranges(),
        noise=aug.noise(),
        point_count=point_count,
        aug_rng=_step_rng(config.seeds.augmentation, step),
        sample_rng=_step_rng(config.seeds.sampling, step),
    )


def train_descriptor(
    samples: Sequence[TrainingSample],
    config: RunConfig,
    out_dir: Optional[str | Path] = None,
) -> tuple[DescriptorState, list[dict]]:
    """Train the descriptor network from scratch.

    Per step: build a multiview batch, describe all N+1 images, sample
    descriptors at every valid correspondence, and take an Adam step on
    1 - batch AP. Writes checkpoints and a JSONL loss log under ``out_dir``
    when given; a NaN loss aborts after checkpointing the last finite state.
    """
    if not samples:
        raise ValueError("empty training dataset")
    from . import checkpoints

    out = Path(out_dir) if out_dir is not None else None
    dz = config.descriptor
    torch.manual_seed(config.seeds.sampling)
    network = DescriptorNetwork(channels=dz.channels, dilations=dz.dilations, dim=dz.dim)
    optimizer = torch.optim.Adam(network.parameters(), lr=dz.lr)
    fastap_cfg = FastAPConfig(bins=config.fastap.bins)
    ckpt_path = out / "descriptor.pt" if out else None

    log: list[dict] = []
    step = 0
    stop = False
    for epoch in range(dz.epochs):
        epoch_losses: list[float] = []
        for sample in samples:
            step += 1
            batch = build_batch(sample, config, config.batch.descriptor_points, step)
            stack = torch.stack(
                [image_to_tensor(batch.reference)]
                + [image_to_tensor(v.image) for v in batch.views]
            )
            network.train()
            fields = network(stack)
            sample_set = batch_sample_set(fields, batch)
            loss = fast_ap(sample_set, fastap_cfg, warn_excluded=False).loss
            if not torch.isfinite(loss):
                state = DescriptorState(network, step, optimizer.state_dict())
                if ckpt_path:
                    checkpoints.save_descriptor(ckpt_path, state)
                _write_log(out / "descriptor_log.jsonl" if out else None, log)
                raise TrainingDiverged(f"descriptor loss not finite at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.item())
            epoch_losses.append(value)
            log.append({"event": "step", "epoch": epoch, "step": step, "loss": value})
            if dz.max_steps and step >= dz.max_steps:
                stop = True
                break
        log.append({
            "event": "epoch",
            "epoch": epoch,
            "steps": len(epoch_losses),
            "mean_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
        })
        state = DescriptorState(network, step, optimizer.state_dict())
        if ckpt_path and ((epoch + 1) % dz.checkpoint_interval == 0 or stop or epoch + 1 == dz.epochs):
            checkpoints.save_descriptor(ckpt_path, state)
        if stop:
            break
    state = DescriptorState(network, step, optimizer.state_dict())
    if ckpt_path:
        checkpoints.save_descriptor(ckpt_path, state)
    _write_log(out / "descriptor_log.jsonl" if out else None, log)
    return state, log


def train_detector(
    samples: Sequence[TrainingSample],
    descriptor_state: DescriptorState,
    config: RunConfig,
    target_kind: Optional[str] = None,
    out_dir: Optional[str | Path] = None,
) -> tuple[DetectorState, list[dict]]:
    """Train the heatmap regressor against frozen-descriptor targets.

    Each step generates a fresh target map (dense for ss, sparse at the
    sampled anchors for ap) and minimizes the MSE between prediction and
    target restricted to the target's validity mask (optionally intersected
    with the reference RoI).
    """
    if not samples:
        raise ValueError("empty training dataset")
    from . import checkpoints

    out = Path(out_dir) if out_dir is not None else None
    dt = config.detector
    kind = target_kind or dt.target_kind
    if kind not in ("ap", "ss"):
        raise ValueError(f"target_kind must be 'ap' or 'ss', got {kind!r}")

    frozen = descriptor_state.network
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    describe_fn = lambda img: describe(frozen, img)  # noqa: E731

    torch.manual_seed(config.seeds.sampling + 1)
    network = DetectorNetwork(base_channels=dt.base_channels, depth=dt.depth)
    optimizer = torch.optim.Adam(network.parameters(), lr=dt.lr)
    fastap_cfg = FastAPConfig(bins=config.fastap.bins)
    ckpt_path = out / f"detector_{kind}.pt" if out else None
    size = config.batch.image_size

    log: list[dict] = []
    step = 0
    stop = False
    for epoch in range(dt.epochs):
        epoch_losses: list[float] = []
        for sample in samples:
            step += 1
            batch = build_batch(sample, config, config.batch.detector_points, step)
            if kind == "ss":
                target = ss_map(describe_fn, batch)
            else:
                target = ap_map(describe_fn, batch, config=fastap_cfg, warn_excluded=False)
            mask = target.validity_mask
            if dt.restrict_to_roi:
                mask = mask & batch.roi.mask
            if not mask.any():
                log.append({"event": "step", "epoch": epoch, "step": step, "skipped": True})
                continue
            network.train()
            pred = network(image_to_tensor(batch.reference).unsqueeze(0))[0, 0]
            target_t = torch.from_numpy(target.values).float()
            mask_t = torch.from_numpy(mask)
            loss = ((pred - target_t)[mask_t] ** 2).mean()
            if not torch.isfinite(loss):
                state = DetectorState(network, kind, size, step, optimizer.state_dict())
                if ckpt_path:
                    checkpoints.save_detector(ckpt_path, state)
                _write_log(out / f"detector_{kind}_log.jsonl" if out else None, log)
                raise TrainingDiverged(f"detector loss not finite at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            value = float(loss.item())
            epoch_losses.append(value)
            log.append({"event": "step", "epoch": epoch, "step": step, "loss": value})
            if dt.max_steps and step >= dt.max_steps:
                stop = True
                break
        log.append({
            "event": "epoch",
            "epoch": epoch,
            "steps": len(epoch_losses),
            "mean_loss": float(np.mean(epoch_losses)) if epoch_losses else None,
        })
        state = DetectorState(network, kind, size, step, optimizer.state_dict())
        if ckpt_path and ((epoch + 1) % dt.checkpoint_interval == 0 or stop or epoch + 1 == dt.epochs):
            checkpoints.save_detector(ckpt_path, state)
        if stop:
            break
    state = DetectorState(network, kind, size, step, optimizer.state_dict())
    if ckpt_path:
        checkpoints.save_detector(ckpt_path, state)
    _write_log(out / f"detector_{kind}_log.jsonl" if out else None, log)
    return state, log
