"""Landmark heatmap priors: rasterization, Gaussian rendering, standardization.

The Gaussian map is evaluated in closed form at every pixel (supports
sub-pixel landmark coordinates); the 1-D normalization constant 1/sqrt(2*pi*s^2)
is kept even though the map is 2-D, since standardization cancels any global
factor anyway.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class HeatmapError(Exception):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    """K points in (x, y) pixel coordinates, origin at the top-left pixel center."""

    points: np.ndarray                       # (K, 2) float64
    clamped: np.ndarray = field(default=None)  # (K,) bool, set by transforms

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise HeatmapError(f"landmarks must be (K, 2), got {pts.shape}")
        object.__setattr__(self, "points", pts)
        if self.clamped is None:
            object.__setattr__(self, "clamped", np.zeros(len(pts), dtype=bool))

    def __len__(self):
        return len(self.points)


@dataclass
class PriorHeatmap:
    values: np.ndarray  # (h, w) float64
    standardized: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise HeatmapError(f"heatmap must be 2-D, got shape {self.values.shape}")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.values.shape


def rasterize_landmarks(lms: LandmarkSet, height: int, width: int) -> PriorHeatmap:
    """Unit impulse per landmark at the nearest pixel; coincident points add up."""
    values = np.zeros((height, width))
    for x, y in lms.points:
        j = min(max(int(round(x)), 0), width - 1)
        i = min(max(int(round(y)), 0), height - 1)
        values[i, j] += 1.0
    return PriorHeatmap(values)


def gaussian_heatmap(lms: LandmarkSet, height: int, width: int, sigma: float = 3.0) -> PriorHeatmap:
    """Sum of per-landmark Gaussians, closed form at every pixel."""
    if sigma <= 0:
        raise HeatmapError("sigma must be positive")
    rows = np.arange(height, dtype=np.float64)[:, None, None]
    cols = np.arange(width, dtype=np.float64)[None, :, None]
    xs = lms.points[:, 0][None, None, :]
    ys = lms.points[:, 1][None, None, :]
    d2 = (rows - ys) ** 2 + (cols - xs) ** 2
    norm = 1.0 / np.sqrt(2.0 * np.pi * sigma * sigma)
    values = (norm * np.exp(-d2 / (2.0 * sigma * sigma))).sum(axis=2)
    return PriorHeatmap(values)


def standardize_map(h: PriorHeatmap) -> PriorHeatmap:
    """Zero mean, unit population variance over all pixels."""
    v = h.values
    mean = v.mean()
    std = v.std()
    if std < 1e-30:
        raise HeatmapError("degenerate prior: constant map cannot be standardized")
    return PriorHeatmap((v - mean) / std, standardized=True)


def match_resolution(h: PriorHeatmap, out_h: int, out_w: int) -> PriorHeatmap:
    """Block-average down to (out_h, out_w), then re-standardize."""
    in_h, in_w = h.resolution
    if out_h > in_h or out_w > in_w:
        raise HeatmapError(f"cannot upscale {h.resolution} to {(out_h, out_w)}")
    if in_h % out_h or in_w % out_w:
        raise HeatmapError(
            f"non-integer downscale factor: {h.resolution} -> {(out_h, out_w)}"
        )
    fh, fw = in_h // out_h, in_w // out_w
    pooled = h.values.reshape(out_h, fh, out_w, fw).mean(axis=(1, 3))
    return standardize_map(PriorHeatmap(pooled))


def transform_landmarks(
    lms: LandmarkSet, theta_deg: float, flip: bool, height: int, width: int
) -> LandmarkSet:
    """Rotate about the image center, then mirror horizontally if `flip`.

    Must stay in lockstep with the image augmentation; points pushed off the
    canvas are clamped back and flagged.
    """
    if abs(theta_deg) > 45.0:
        raise HeatmapError(f"rotation {theta_deg} exceeds the +-45 degree contract")
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    t = np.deg2rad(theta_deg)
    ct, st = np.cos(t), np.sin(t)
    x, y = lms.points[:, 0] - cx, lms.points[:, 1] - cy
    xr = cx + ct * x - st * y
    yr = cy + st * x + ct * y
    if flip:
        xr = (width - 1) - xr
    clamped_x = np.clip(xr, 0.0, width - 1)
    clamped_y = np.clip(yr, 0.0, height - 1)
    flags = (clamped_x != xr) | (clamped_y != yr)
    return LandmarkSet(np.stack([clamped_x, clamped_y], axis=1), flags)


def build_prior(
    lms: LandmarkSet,
    height: int,
    width: int,
    tap_hw: tuple[int, int] | None = None,
    sigma: float = 3.0,
) -> PriorHeatmap:
    """Full pipeline: Gaussian render, standardize, optionally match a tap."""
    prior = standardize_map(gaussian_heatmap(lms, height, width, sigma))
    if tap_hw is not None and tuple(tap_hw) != prior.resolution:
        prior = match_resolution(prior, *tap_hw)
    return prior


# landmark file format: one "x y" pair per line, real-valued


def save_landmarks(path: str, lms: LandmarkSet) -> None:
    with open(path, "w") as fh:
        for x, y in lms.points:
            fh.write(f"{x:.6f} {y:.6f}\n")


def load_landmarks(path: str, expected_count: int | None = None) -> LandmarkSet:
    points = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise HeatmapError(f"{path}:{line_no}: expected 'x y', got {line!r}")
            points.append((float(parts[0]), float(parts[1])))
    if expected_count is not None and len(points) != expected_count:
        raise HeatmapError(
            f"{path}: expected {expected_count} landmarks, found {len(points)}"
        )
    return LandmarkSet(np.asarray(points, dtype=np.float64).reshape(-1, 2))
