"""File formats: images, RoI masks, control points, pair manifests,
heatmap dumps (16-bit PNG plus sidecar metadata), and keypoint CSVs."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .detector import Heatmap, KeypointCandidates
from .errors import ConfigError
from .geometry import PointSet

logger = logging.getLogger(__name__)


def load_image(path: str | Path) -> np.ndarray:
    """8-bit PNG/JPEG to (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as img:
        rgb = img.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Single-channel PNG; nonzero means inside."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask, dtype=bool) * np.uint8(255))).save(path)


def save_control_points(path: str | Path, fixed: PointSet, moving: PointSet) -> None:
    """One line per correspondence: fixed_x fixed_y moving_x moving_y."""
    order_f = np.argsort(fixed.ids)
    order_m = np.argsort(moving.ids)
    with open(path, "w") as fh:
        for (fx, fy), (mx, my) in zip(fixed.coords[order_f], moving.coords[order_m]):
            fh.write(f"{fx:.6f} {fy:.6f} {mx:.6f} {my:.6f}\n")


def load_control_points(path: str | Path) -> tuple[PointSet, PointSet]:
    rows = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"control point line needs 4 values: {line.strip()!r}")
            rows.append([float(v) for v in parts])
    arr = np.asarray(rows, dtype=np.float64)
    if len(arr) == 0:
        raise ValueError(f"no control points in {path}")
    ids = np.arange(len(arr), dtype=np.int64)
    return PointSet(arr[:, :2], ids), PointSet(arr[:, 2:], ids.copy())


def save_heatmap(heatmap: Heatmap, path: str | Path) -> None:
    """16-bit grayscale PNG of the [0, 1] values, a companion mask PNG, and
    a JSON sidecar recording kind and polarity."""
    path = Path(path)
    vals = np.clip(heatmap.values.astype(np.float64), 0.0, 1.0)
    Image.fromarray((vals * 65535.0 + 0.5).astype(np.uint16)).save(path)
    save_mask(path.with_suffix(".mask.png"), heatmap.validity_mask)
    sidecar = {
        "kind": heatmap.kind,
        "polarity": heatmap.polarity,
        "value_scale": 65535,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2))


def load_heatmap(path: str | Path) -> Heatmap:
    path = Path(path)
    with Image.open(path) as img:
        vals = np.asarray(img, dtype=np.float64) / 65535.0
    mask_path = path.with_suffix(".mask.png")
    mask = load_mask(mask_path) if mask_path.exists() else np.ones(vals.shape, dtype=bool)
    meta = json.loads(path.with_suffix(".json").read_text())
    return Heatmap(vals.astype(np.float32), meta["polarity"], mask, meta["kind"])


def save_keypoints_csv(candidates: KeypointCandidates, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "y", "score"])
        for pid, (x, y), score in zip(
            candidates.points.ids, candidates.points.coords, candidates.scores
        ):
            writer.writerow([int(pid), f"{x:.3f}", f"{y:.3f}", f"{float(score):.6f}"])


@dataclass
class PairRecord:
    """One registration pair of a JSONL manifest."""

    fixed: Path
    moving: Path
    mask_fixed: Optional[Path] = None
    mask_moving: Optional[Path] = None
    control_points: Optional[Path] = None
    true_transform: Optional[list[float]] = None  # 6 affine values, fixed->moving
    category: Optional[str] = None

    @property
    def name(self) -> str:
        return f"{self.fixed.stem}__{self.moving.stem}"


_MANIFEST_KEYS = {
    "fixed", "moving", "mask_fixed", "mask_moving",
    "control_points", "true_transform", "category",
}


def load_manifest(path: str | Path) -> list[PairRecord]:
    """JSONL manifest: one pair per line. Referenced files must exist."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"manifest not found: {path}")
    base = path.parent
    records: list[PairRecord] = []
    for i, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{i}: invalid JSON: {exc}") from exc
        unknown = set(obj) - _MANIFEST_KEYS
        if unknown:
            raise ConfigError(f"{path}:{i}: unknown manifest keys {sorted(unknown)}")
        if "fixed" not in obj or "moving" not in obj:
            raise ConfigError(f"{path}:{i}: manifest line needs 'fixed' and 'moving'")

        def _resolve(key):
            if obj.get(key) is None:
                return None
            p = Path(obj[key])
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                raise ConfigError(f"{path}:{i}: referenced file missing: {p}")
            return p

        records.append(
            PairRecord(
                fixed=_resolve("fixed"),
                moving=_resolve("moving"),
                mask_fixed=_resolve("mask_fixed"),
                mask_moving=_resolve("mask_moving"),
                control_points=_resolve("control_points"),
                true_transform=obj.get("true_transform"),
                category=obj.get("category"),
            )
        )
    if not records:
        raise ConfigError(f"manifest is empty: {path}")
    return records


def write_manifest(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
