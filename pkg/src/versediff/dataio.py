"""Datasets: landmark rasterization, synthetic spine phantoms, augmentation
and seeded train/test splits.

On-disk layout of a dataset directory::

    images/<id>.png       8-bit greyscale
    masks/<id>.png        0/255, optional when landmarks are given
    landmarks/<id>.csv    one vertebra per line: x1,y1,x2,y2,x3,y3,x4,y4
                          (top-left, top-right, bottom-left, bottom-right)
"""

from __future__ import annotations

import csv
import io as _io
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io import atomic_write_json, atomic_write_text, from_uint8, read_png, to_uint8, write_png


@dataclass
class LandmarkRecord:
    """Corner landmarks, shape ``(vertebrae, 4, 2)`` as (x, y) pixel coords."""

    corners: np.ndarray

    def __post_init__(self):
        self.corners = np.asarray(self.corners, dtype=np.float64).reshape(-1, 4, 2)
        if len(self.corners) < 1:
            raise ValueError("landmark record has no vertebrae")

    def polygons(self) -> np.ndarray:
        # TL, TR, BL, BR -> boundary order TL, TR, BR, BL
        return self.corners[:, [0, 1, 3, 2]]


@dataclass
class Sample:
    image: np.ndarray  # (N, H, W) float32 in [-1, 1]
    mask: np.ndarray  # (H, W) uint8
    id: str
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[-2:] != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape} and mask {self.mask.shape} disagree")


@dataclass
class AugmentationConfig:
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    shift_frac: tuple[float, float] = (0.01, 0.05)
    elastic_spacing: float = 32.0
    elastic_sigma: float = 4.0
    contrast: tuple[float, float] = (0.8, 1.2)
    seed: int = 35

    def __post_init__(self):
        for name in ("rotation_deg", "shift_frac", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"augment.{name}: interval ({lo}, {hi}) is not ordered")
            setattr(self, name, (float(lo), float(hi)))
        if self.shift_frac[0] < 0:
            raise ValueError("augment.shift_frac must be nonnegative")
        if self.contrast[0] <= 0:
            raise ValueError("augment.contrast gains must be positive")
        if self.elastic_spacing <= 0 or self.elastic_sigma < 0:
            raise ValueError("augment.elastic_spacing must be > 0 and elastic_sigma >= 0")


# -- rasterization -----------------------------------------------------------


def _inside_polygon(poly: np.ndarray, px: np.ndarray, py: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Even-odd test of points against a closed polygon, boundary inclusive."""
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        xa, ya = poly[i]
        xb, yb = poly[(i + 1) % n]
        crosses = (ya > py) != (yb > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = xa + (py - ya) * (xb - xa) / (yb - ya)
        inside ^= crosses & (px < x_at)
        dx, dy = xb - xa, yb - ya
        seg2 = dx * dx + dy * dy
        cross = (px - xa) * dy - (py - ya) * dx
        dot = (px - xa) * dx + (py - ya) * dy
        if seg2 == 0:
            on_edge |= (px == xa) & (py == ya)
        else:
            slack = tol * math.sqrt(seg2)
            on_edge |= (np.abs(cross) <= slack) & (dot >= -slack) & (dot <= seg2 + slack)
    return inside | on_edge


def _collinear(pts: np.ndarray, tol: float = 1e-9) -> bool:
    span = np.ptp(pts, axis=0).max()
    if span == 0:
        return True
    a = pts[0]
    for i in range(1, 4):
        for j in range(i + 1, 4):
            u, v = pts[i] - a, pts[j] - a
            if abs(u[0] * v[1] - u[1] * v[0]) > tol * span * span:
                return False
    return True


def rasterize_quad(poly: np.ndarray, H: int, W: int) -> np.ndarray:
    mask = np.zeros((H, W), dtype=bool)
    x0 = max(int(math.floor(poly[:, 0].min())), 0)
    x1 = min(int(math.ceil(poly[:, 0].max())), W - 1)
    y0 = max(int(math.floor(poly[:, 1].min())), 0)
    y1 = min(int(math.ceil(poly[:, 1].max())), H - 1)
    if x0 > x1 or y0 > y1:
        return mask
    py, px = np.mgrid[y0 : y1 + 1, x0 : x1 + 1].astype(np.float64)
    mask[y0 : y1 + 1, x0 : x1 + 1] = _inside_polygon(poly, px, py)
    return mask


def landmarks_to_mask(rec: LandmarkRecord, H: int, W: int) -> np.ndarray:
    """Fill every vertebra quadrilateral; pixel (row y, col x) has its centre at (x, y)."""
    c = rec.corners
    if np.any(c[..., 0] < 0) or np.any(c[..., 0] >= W) or np.any(c[..., 1] < 0) or np.any(c[..., 1] >= H):
        raise ValueError(f"landmark coordinates fall outside the {W}x{H} image")
    mask = np.zeros((H, W), dtype=bool)
    for k, poly in enumerate(rec.polygons()):
        if _collinear(poly):
            raise ValueError(f"vertebra {k}: degenerate quadrilateral (all corners collinear)")
        mask |= rasterize_quad(poly, H, W)
    return mask.astype(np.uint8)


def read_landmarks_csv(path) -> LandmarkRecord:
    rows = []
    with open(path, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), 1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if len(row) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 values, got {len(row)}")
            rows.append([float(v) for v in row])
    return LandmarkRecord(np.array(rows).reshape(-1, 4, 2))


def landmarks_csv_text(rec: LandmarkRecord) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for quad in rec.corners:
        w.writerow([repr(float(v)) for v in quad.reshape(-1)])
    return buf.getvalue()


# -- synthetic phantoms ------------------------------------------------------


def _quad_corners(cx, cy, half_top, half_bot, half_h, theta) -> np.ndarray:
    local = np.array([[-half_top, -half_h], [half_top, -half_h], [-half_bot, half_h], [half_bot, half_h]])
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def _phantom_geometry(rng: np.random.Generator, H: int, W: int, vertebrae: int) -> LandmarkRecord:
    margin_top = rng.uniform(0.02, 0.06) * H
    margin_bot = rng.uniform(0.02, 0.06) * H
    pitch = (H - margin_top - margin_bot) / vertebrae
    amp = rng.uniform(0.0, 0.12) * W
    phase = rng.uniform(0, 2 * math.pi)
    wavelength = rng.uniform(1.0, 2.0) * H
    base_half_w = rng.uniform(0.17, 0.24) * W
    fill = rng.uniform(0.58, 0.7)
    quads = []
    for k in range(vertebrae):
        cy = margin_top + (k + 0.5) * pitch + rng.uniform(-0.05, 0.05) * pitch
        arg = 2 * math.pi * cy / wavelength + phase
        cx = W / 2 + amp * math.sin(arg)
        slope = amp * 2 * math.pi / wavelength * math.cos(arg)
        theta = -math.atan(slope) * 0.5 + math.radians(rng.uniform(-3, 3))
        grow = 1.0 + 0.25 * k / max(vertebrae - 1, 1)
        half_w = base_half_w * grow * rng.uniform(0.95, 1.05)
        half_h = 0.5 * fill * pitch * rng.uniform(0.95, 1.05)
        taper = rng.uniform(0.9, 1.0)
        quads.append(_quad_corners(cx, cy, half_w * taper, half_w, half_h, theta))
    return LandmarkRecord(np.array(quads))


def _geometry_ok(rec: LandmarkRecord, H: int, W: int) -> bool:
    c = rec.corners
    if c[..., 0].min() < 1 or c[..., 0].max() > W - 2 or c[..., 1].min() < 1 or c[..., 1].max() > H - 2:
        return False
    cross = ndimage.generate_binary_structure(2, 1)
    prev = None
    for poly in rec.polygons():
        m = rasterize_quad(poly, H, W)
        if ndimage.label(m, structure=cross)[1] != 1:
            return False
        grown = ndimage.binary_dilation(m, structure=cross)
        if prev is not None and np.any(grown & prev):
            return False
        prev = grown
    return True


def generate_phantom(
    seed: int = 35,
    count: int = 200,
    H: int = 192,
    W: int = 64,
    vertebrae: int = 10,
    occlude_prob: float = 0.3,
    noise_sigma: float = 0.12,
) -> list[Sample]:
    """Synthetic AP spine stand-ins: ``vertebrae`` bright tilted quadrilaterals
    stacked vertically on a noisy, low-contrast background.

    With probability ``occlude_prob`` a bright opaque bar (an "instrument")
    crosses the image; the mask is never affected. Each sample draws from its
    own stream keyed by ``(seed, index)``, so the result is a pure function of
    the arguments. Images are quantized to 8-bit levels so that writing them
    to PNG and reading back is lossless.
    """
    if count < 1 or vertebrae < 1 or not (0.0 <= occlude_prob <= 1.0):
        raise ValueError("need count >= 1, vertebrae >= 1 and 0 <= occlude_prob <= 1")
    samples = []
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        for _ in range(200):
            rec = _phantom_geometry(rng, H, W, vertebrae)
            if _geometry_ok(rec, H, W):
                break
        else:
            raise RuntimeError(f"could not place {vertebrae} vertebrae on a {W}x{H} grid")
        mask = landmarks_to_mask(rec, H, W)

        # clean intensities: background in [0.20, 0.40], bone in [0.50, 0.65]
        bg = rng.uniform(0.25, 0.35) + 0.05 * (
            rng.uniform(-1, 1) * (yy / (H - 1) - 0.5) * 2 + rng.uniform(-1, 1) * (xx / (W - 1) - 0.5) * 2
        ) / 2
        clean = bg
        for poly in rec.polygons():
            m = rasterize_quad(poly, H, W)
            level = rng.uniform(0.5, 0.6) + 0.05 * rng.uniform(0, 1) * (xx / (W - 1))
            clean = np.where(m, level, clean)
        noisy = clean + noise_sigma * rng.standard_normal((H, W))
        noisy = ndimage.gaussian_filter(noisy, 0.6)

        # occluder parameters are always drawn so masks/noise do not depend on occlude_prob
        u = rng.uniform()
        angle = rng.uniform(-math.pi / 3, math.pi / 3) + (math.pi / 2 if rng.uniform() < 0.5 else 0.0)
        px, py = rng.uniform(0.3, 0.7) * W, rng.uniform(0.2, 0.8) * H
        thickness = rng.uniform(2.5, 5.0)
        occluded = bool(u < occlude_prob)
        if occluded:
            dist = np.abs((xx - px) * math.sin(angle) - (yy - py) * math.cos(angle))
            noisy = np.where(dist <= thickness / 2, 0.95, noisy)

        image = from_uint8(to_uint8(np.clip(noisy, 0.0, 1.0) * 2.0 - 1.0))
        samples.append(
            Sample(
                image=image[None],
                mask=mask,
                id=f"phantom_{i:05d}",
                meta={"landmarks": rec, "occluded": occluded, "clean": clean},
            )
        )
    return samples


# -- augmentation ------------------------------------------------------------


def augmentation_rng(seed: int, sample_id: str, draw_index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode()), int(draw_index)])


def augment(s: Sample, cfg: AugmentationConfig, draw_index: int = 0) -> Sample:
    """Random rotation, shift, elastic warp (image and mask together) and
    contrast (image only). Randomness is keyed by (cfg.seed, s.id, draw_index)."""
    rng = augmentation_rng(cfg.seed, s.id, draw_index)
    n, H, W = s.image.shape
    angle = math.radians(rng.uniform(*cfg.rotation_deg))
    shift = np.array([rng.uniform(*cfg.shift_frac) * H, rng.uniform(*cfg.shift_frac) * W])
    shift *= np.where(rng.uniform(size=2) < 0.5, -1.0, 1.0)
    gh, gw = int(math.ceil(H / cfg.elastic_spacing)) + 1, int(math.ceil(W / cfg.elastic_spacing)) + 1
    coarse = rng.standard_normal((2, gh, gw)) * cfg.elastic_sigma
    gain = rng.uniform(*cfg.contrast)

    image, mask = s.image, s.mask
    if angle != 0.0 or np.any(shift != 0.0) or cfg.elastic_sigma > 0:
        yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
        cy, cx = (H - 1) / 2, (W - 1) / 2
        dy, dx = yy - cy - shift[0], xx - cx - shift[1]
        c, sn = math.cos(angle), math.sin(angle)
        src_y = c * dy - sn * dx + cy
        src_x = sn * dy + c * dx + cx
        if cfg.elastic_sigma > 0:
            grid = [yy / cfg.elastic_spacing, xx / cfg.elastic_spacing]
            src_y = src_y + ndimage.map_coordinates(coarse[0], grid, order=3, mode="nearest")
            src_x = src_x + ndimage.map_coordinates(coarse[1], grid, order=3, mode="nearest")
        coords = [src_y, src_x]
        image = np.stack(
            [ndimage.map_coordinates(ch, coords, order=1, mode="constant", cval=-1.0) for ch in image]
        ).astype(np.float32)
        mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0).astype(np.uint8)
    if gain != 1.0:
        mean = image.mean(axis=(1, 2), keepdims=True)
        image = np.clip(gain * (image - mean) + mean, -1.0, 1.0).astype(np.float32)
    return Sample(image=image, mask=mask, id=s.id, meta=s.meta)


# -- splitting ---------------------------------------------------------------


def split(samples: list, train_frac: float = 0.7, seed: int = 35) -> tuple[list, list]:
    """Seeded shuffle, then the first floor(n * train_frac) go to training."""
    if not (0.0 < train_frac < 1.0):
        raise ValueError("train_frac must lie strictly between 0 and 1")
    n = len(samples)
    if n < 2:
        raise ValueError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(n * train_frac + 1e-9))
    return [samples[i] for i in order[:n_train]], [samples[i] for i in order[n_train:]]


# -- dataset directories -----------------------------------------------------


def write_dataset(root, samples: list[Sample], manifest: dict | None = None) -> None:
    root = Path(root)
    for s in samples:
        if s.image.shape[0] != 1:
            raise ValueError("only single-channel images can be written as 8-bit PNG")
        write_png(root / "images" / f"{s.id}.png", to_uint8(s.image[0]))
        write_png(root / "masks" / f"{s.id}.png", (s.mask > 0).astype(np.uint8) * 255)
        rec = s.meta.get("landmarks")
        if rec is not None:
            atomic_write_text(root / "landmarks" / f"{s.id}.csv", landmarks_csv_text(rec))
    if manifest is not None:
        atomic_write_json(root / "manifest.json", manifest)


def load_dataset(root) -> list[Sample]:
    """Read ``images/`` plus ``masks/`` (preferred) or ``landmarks/``."""
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"{image_dir} does not exist")
    samples = []
    for path in sorted(image_dir.glob("*.png")):
        sid = path.stem
        img = read_png(path)
        H, W = img.shape
        mask_path = root / "masks" / f"{sid}.png"
        lm_path = root / "landmarks" / f"{sid}.csv"
        meta = {}
        if mask_path.exists():
            mask = (read_png(mask_path) > 127).astype(np.uint8)
        elif lm_path.exists():
            rec = read_landmarks_csv(lm_path)
            mask = landmarks_to_mask(rec, H, W)
            meta["landmarks"] = rec
        else:
            raise FileNotFoundError(f"no mask or landmark file for {sid}")
        samples.append(Sample(image=from_uint8(img)[None], mask=mask, id=sid, meta=meta))
    if not samples:
        raise FileNotFoundError(f"no images found under {image_dir}")
    return samples


def augmentation_config_dict(cfg: AugmentationConfig) -> dict:
    return asdict(cfg)
