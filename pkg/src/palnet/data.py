"""Synthetic keypoint-classification dataset, on-disk format, and augmentation.

Every sample is a grayscale canvas with five face-like keypoints (two eyes,
a nose, two mouth corners).  The class is encoded *only* by small bar patterns
stamped at the eye and mouth keypoints (bar angle and single-vs-double bars,
all chosen to be invariant under the flip augmentation); distractor bars with
random orientations are scattered elsewhere, so whatever the model learns to
read, the causal evidence sits exactly at the landmark positions.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .heatmap import LandmarkSet, load_landmarks, save_landmarks, transform_landmarks
from .pgm import read_pgm, to_unit_float, write_pgm
from .seeding import stream


class DataError(Exception):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (H, W) float64 in [0, 1]
    landmarks: LandmarkSet
    label: int


@dataclass
class ManifestEntry:
    image: str
    landmarks: str
    label: int


@dataclass
class DatasetManifest:
    root: str
    entries: list
    n_classes: int
    split: str
    height: int
    width: int
    n_landmarks: int

    def __len__(self):
        return len(self.entries)


PATCH = 9          # side of the evidence patch stamped at a keypoint
BAR_HALF_LEN = 4.0
BAR_WIDTH = 0.8
BAR_GAIN = 0.9
NOISE_STD = 0.05
MIN_DISTRACTOR_GAP = 8.0


def _canonical_keypoints(height: int, width: int, count: int) -> np.ndarray:
    base = np.array(
        [
            [0.30, 0.34],  # left eye
            [0.70, 0.34],  # right eye
            [0.50, 0.53],  # nose
            [0.34, 0.72],  # left mouth corner
            [0.66, 0.72],  # right mouth corner
        ]
    )
    if count < 5:
        raise DataError("the synthetic layout needs at least 5 keypoints")
    pts = [base]
    if count > 5:
        angles = np.linspace(0, 2 * np.pi, count - 5, endpoint=False)
        ring = np.stack([0.5 + 0.42 * np.cos(angles), 0.5 + 0.42 * np.sin(angles)], axis=1)
        pts.append(ring)
    rel = np.concatenate(pts, axis=0)
    return rel * np.array([width - 1, height - 1])


def _stamp_bar(canvas: np.ndarray, cx: float, cy: float, angle_deg: float,
               doubled: bool = False) -> None:
    """Draw a soft-edged oriented bar (or two parallel ones) in a PATCH box."""
    h, w = canvas.shape
    half = PATCH // 2
    i0, i1 = max(int(round(cy)) - half, 0), min(int(round(cy)) + half + 1, h)
    j0, j1 = max(int(round(cx)) - half, 0), min(int(round(cx)) + half + 1, w)
    if i0 >= i1 or j0 >= j1:
        return
    ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
    t = np.deg2rad(angle_deg)
    dx, dy = jj - cx, ii - cy
    along = dx * np.cos(t) + dy * np.sin(t)
    across = -dx * np.sin(t) + dy * np.cos(t)
    offsets = (-2.0, 2.0) if doubled else (0.0,)
    region = canvas[i0:i1, j0:j1]
    for off in offsets:
        profile = (
            BAR_GAIN
            * np.exp(-(((across - off) / BAR_WIDTH) ** 2))
            * (np.abs(along) <= BAR_HALF_LEN)
        )
        np.maximum(region, profile, out=region)


def _class_pattern(label: int) -> tuple[float, float, bool]:
    """(eye angle, mouth angle, eye bar doubled) for a class label.

    Every attribute must survive the flip augmentation: a horizontal flip maps
    angle t to 180 - t (so only 0 and 90 are usable) and swaps the left/right
    keypoints of a pair (so both eyes carry the same pattern).  Three binary
    attributes give 8 >= n_classes combinations, and +-10 degree rotations
    never cross an attribute boundary.
    """
    return (label & 1) * 90.0, (label >> 1 & 1) * 90.0, bool(label >> 2 & 1)


def render_sample(seed: int, index: int, label: int, n_classes: int,
                  height: int, width: int, n_landmarks: int) -> Sample:
    """Pure function of (seed, index); the generator and tests share it."""
    rng = stream(seed, "sample", index)
    if height < 4 * PATCH or width < 4 * PATCH:
        raise DataError(f"canvas {height}x{width} too small for {PATCH}x{PATCH} patches")
    points = _canonical_keypoints(height, width, n_landmarks)
    points = points + rng.uniform(-2.0, 2.0, size=points.shape)
    points[:, 0] = np.clip(points[:, 0], 0, width - 1)
    points[:, 1] = np.clip(points[:, 1], 0, height - 1)

    canvas = np.zeros((height, width))
    eye_angle, mouth_angle, doubled = _class_pattern(label)
    for k in (0, 1):
        _stamp_bar(canvas, points[k, 0], points[k, 1], eye_angle, doubled=doubled)
    for k in (3, 4):
        _stamp_bar(canvas, points[k, 0], points[k, 1], mouth_angle)
    # class-independent cross at the nose keeps the prior honest there
    _stamp_bar(canvas, points[2, 0], points[2, 1], 0.0)
    _stamp_bar(canvas, points[2, 0], points[2, 1], 90.0)

    n_distract = int(rng.integers(6, 11))
    placed = 0
    guard = 0
    while placed < n_distract and guard < 200:
        guard += 1
        dx = rng.uniform(PATCH, width - 1 - PATCH)
        dy = rng.uniform(PATCH, height - 1 - PATCH)
        gap = np.hypot(points[:, 0] - dx, points[:, 1] - dy).min()
        if gap < MIN_DISTRACTOR_GAP:
            continue
        _stamp_bar(canvas, dx, dy, float(rng.uniform(0.0, 180.0)))
        placed += 1

    canvas = np.clip(canvas + rng.normal(0.0, NOISE_STD, size=canvas.shape), 0.0, 1.0)
    return Sample(canvas, LandmarkSet(points), label)


def generate_dataset(out_dir: str, seed: int, n: int, n_classes: int = 7,
                     height: int = 64, width: int = 64, n_landmarks: int = 5,
                     split: str = "train") -> DatasetManifest:
    """Write n class-balanced samples plus a manifest; byte-deterministic per seed."""
    if n < n_classes:
        raise DataError(f"need at least {n_classes} samples for {n_classes} classes")
    os.makedirs(out_dir, exist_ok=True)
    split_seed = stream(seed, "split", split).integers(0, 2**63 - 1)
    entries = []
    for index in range(n):
        label = index % n_classes
        sample = render_sample(int(split_seed), index, label, n_classes, height, width, n_landmarks)
        img_name = f"{split}_{index:05d}.pgm"
        lm_name = f"{split}_{index:05d}.txt"
        write_pgm(os.path.join(out_dir, img_name), sample.image * 255.0)
        save_landmarks(os.path.join(out_dir, lm_name), sample.landmarks)
        entries.append(ManifestEntry(img_name, lm_name, label))
    manifest = DatasetManifest(
        root=out_dir, entries=entries, n_classes=n_classes, split=split,
        height=height, width=width, n_landmarks=n_landmarks,
    )
    payload = {
        "format": "palnet-dataset",
        "n_classes": n_classes,
        "split": split,
        "height": height,
        "width": width,
        "n_landmarks": n_landmarks,
        "entries": [{"image": e.image, "landmarks": e.landmarks, "label": e.label} for e in entries],
    }
    with open(manifest_path(out_dir, split), "w") as fh:
        json.dump(payload, fh, indent=1)
    return manifest


def manifest_path(out_dir: str, split: str) -> str:
    return os.path.join(out_dir, f"{split}_manifest.json")


def load_manifest(path: str) -> DatasetManifest:
    """Load and validate: files exist, labels in range, every class present."""
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt manifest {path}: {exc}") from exc
    root = os.path.dirname(os.path.abspath(path))
    n_classes = payload["n_classes"]
    entries = []
    seen = set()
    for e in payload["entries"]:
        entry = ManifestEntry(e["image"], e["landmarks"], int(e["label"]))
        if not 0 <= entry.label < n_classes:
            raise DataError(
                f"{path}: entry '{entry.image}' has label {entry.label} outside [0, {n_classes})"
            )
        for rel in (entry.image, entry.landmarks):
            if not os.path.exists(os.path.join(root, rel)):
                raise DataError(f"{path}: referenced file missing: {rel}")
        seen.add(entry.label)
        entries.append(entry)
    if seen != set(range(n_classes)):
        missing = sorted(set(range(n_classes)) - seen)
        raise DataError(f"{path}: classes {missing} have no samples")
    return DatasetManifest(
        root=root, entries=entries, n_classes=n_classes, split=payload["split"],
        height=payload["height"], width=payload["width"],
        n_landmarks=payload["n_landmarks"],
    )


def load_sample(manifest: DatasetManifest, index: int) -> Sample:
    entry = manifest.entries[index]
    img = to_unit_float(read_pgm(os.path.join(manifest.root, entry.image)))
    if img.shape != (manifest.height, manifest.width):
        raise DataError(f"{entry.image}: image is {img.shape}, manifest says "
                        f"{(manifest.height, manifest.width)}")
    lms = load_landmarks(os.path.join(manifest.root, entry.landmarks),
                         expected_count=manifest.n_landmarks)
    return Sample(img, lms, entry.label)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def rotate_image(img: np.ndarray, theta_deg: float) -> np.ndarray:
    """Rotate about the image center with bilinear resampling, zero fill."""
    if theta_deg == 0.0:
        return img.copy()
    h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    t = np.deg2rad(theta_deg)
    ct, st = np.cos(t), np.sin(t)
    xs = cx + ct * (jj - cx) + st * (ii - cy)   # inverse rotation
    ys = cy - st * (jj - cx) + ct * (ii - cy)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    wx, wy = xs - x0, ys - y0

    def tap(yi, xi):
        valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        v = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(valid, v, 0.0)

    return (
        (1 - wy) * (1 - wx) * tap(y0, x0)
        + (1 - wy) * wx * tap(y0, x0 + 1)
        + wy * (1 - wx) * tap(y0 + 1, x0)
        + wy * wx * tap(y0 + 1, x0 + 1)
    )


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random rotation in [-10, 10] degrees, then horizontal flip with p=0.5.

    The landmarks get the identical transform so the prior tracks the image.
    """
    theta = float(rng.uniform(-10.0, 10.0))
    flip = bool(rng.random() < 0.5)
    return apply_transform(sample, theta, flip)


def apply_transform(sample: Sample, theta: float, flip: bool) -> Sample:
    h, w = sample.image.shape
    img = rotate_image(sample.image, theta)
    if flip:
        img = img[:, ::-1].copy()
    lms = transform_landmarks(sample.landmarks, theta, flip, h, w)
    return Sample(img, lms, sample.label)


def mask_landmark_patches(image: np.ndarray, lms: LandmarkSet, size: int = PATCH) -> np.ndarray:
    """Zero out size x size regions at every keypoint (occlusion probe)."""
    out = image.copy()
    h, w = out.shape
    half = size // 2
    for x, y in lms.points:
        i0, i1 = max(int(round(y)) - half, 0), min(int(round(y)) + half + 1, h)
        j0, j1 = max(int(round(x)) - half, 0), min(int(round(x)) + half + 1, w)
        out[i0:i1, j0:j1] = 0.0
    return out
