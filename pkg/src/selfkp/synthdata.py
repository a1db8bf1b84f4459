"""Procedural synthetic-shapes scenes with keypoint and semantic labels.

Scenes place random line segments, quadrilaterals, triangles and
ellipses on a noisy background. Keypoint labels are polygon vertices,
segment endpoints and ellipse centers; the semantic mask stores the
class of the topmost primitive per pixel (0 = background, 1 = line,
2 = quadrilateral, 3 = triangle, 4 = ellipse). Rasterization is
analytic coverage at 2x supersampling, averaged down for antialiasing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import KeypointSet

Array = np.ndarray

CLASS_BACKGROUND = 0
CLASS_LINE = 1
CLASS_QUAD = 2
CLASS_TRIANGLE = 3
CLASS_ELLIPSE = 4
NUM_CLASSES = 5

_MAGIC = b"SSPD"
_VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file; message carries byte offset and field."""


@dataclass
class SceneConfig:
    image_shape: tuple = (120, 160)
    primitive_count: tuple = (3, 8)
    enable_lines: bool = True
    enable_quads: bool = True
    enable_triangles: bool = True
    enable_ellipses: bool = True
    background_intensity: tuple = (0.1, 0.5)
    foreground_intensity: tuple = (0.3, 1.0)
    background_noise: float = 0.03
    min_keypoint_separation: float = 5.0

    def __post_init__(self):
        if self.primitive_count[0] < 0:
            raise ValueError("primitive count must be >= 0")
        for rng_ in (self.background_intensity, self.foreground_intensity):
            if not (0 <= rng_[0] <= rng_[1] <= 1):
                raise ValueError("intensity ranges must lie in [0, 1]")

    def enabled_classes(self):
        out = []
        if self.enable_lines:
            out.append(CLASS_LINE)
        if self.enable_quads:
            out.append(CLASS_QUAD)
        if self.enable_triangles:
            out.append(CLASS_TRIANGLE)
        if self.enable_ellipses:
            out.append(CLASS_ELLIPSE)
        return out


@dataclass
class Primitive:
    kind: int                   # semantic class id
    params: dict
    keypoints: Array            # (K, 2) subpixel (row, col)
    intensity: float


@dataclass
class ImageSample:
    image: Array                # (H, W) float32 in [0, 1]
    keypoints: KeypointSet      # score 1 each
    mask: Array                 # (H, W) uint8 class indices
    seed: int = 0
    scene: list = field(default_factory=list)

    def copy(self):
        return ImageSample(self.image.copy(), self.keypoints, self.mask.copy(),
                           self.seed, list(self.scene))


@dataclass
class PhotometricConfig:
    noise_sigma: float = 0.03
    brightness_range: tuple = (-0.15, 0.15)
    contrast_range: tuple = (0.7, 1.3)
    blur_sigma_range: tuple = (0.0, 1.0)


# ---------------------------------------------------------------------------
# Coverage rasterization (2x supersampled analytic tests)
# ---------------------------------------------------------------------------

def _supergrid(shape):
    h, w = shape
    # centers of the 2x2 subsamples of each pixel, in pixel coordinates
    ys = (np.arange(2 * h) - 0.5) / 2.0
    xs = (np.arange(2 * w) - 0.5) / 2.0
    return np.meshgrid(ys, xs, indexing="ij")


def _downsample2(cov):
    h2, w2 = cov.shape
    return cov.reshape(h2 // 2, 2, w2 // 2, 2).mean(axis=(1, 3))


def _polygon_coverage(vertices, shape):
    """Even-odd point-in-polygon test on the supersampled grid."""
    yy, xx = _supergrid(shape)
    inside = np.zeros(yy.shape, dtype=bool)
    v = np.asarray(vertices, dtype=np.float64)
    n = len(v)
    for i in range(n):
        r0, c0 = v[i]
        r1, c1 = v[(i + 1) % n]
        crosses = (r0 <= yy) != (r1 <= yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = c0 + (yy - r0) * (c1 - c0) / (r1 - r0)
        inside ^= crosses & (xx < xint)
    return _downsample2(inside.astype(np.float64))


def _segment_coverage(p0, p1, thickness, shape):
    yy, xx = _supergrid(shape)
    d = np.array([p1[0] - p0[0], p1[1] - p0[1]], dtype=np.float64)
    len2 = max(float(d @ d), 1e-12)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / len2
    t = np.clip(t, 0.0, 1.0)
    dy = yy - (p0[0] + t * d[0])
    dx = xx - (p0[1] + t * d[1])
    inside = dy * dy + dx * dx <= (thickness / 2.0) ** 2
    return _downsample2(inside.astype(np.float64))


def _ellipse_coverage(center, axes, theta, shape):
    yy, xx = _supergrid(shape)
    dy = yy - center[0]
    dx = xx - center[1]
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    inside = (u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0
    return _downsample2(inside.astype(np.float64))


# ---------------------------------------------------------------------------
# Primitive sampling
# ---------------------------------------------------------------------------

def _sample_convex_polygon(rng, shape, n_vertices, min_radius=6.0):
    h, w = shape
    margin = 3.0
    cy = rng.uniform(margin + min_radius, h - margin - min_radius)
    cx = rng.uniform(margin + min_radius, w - margin - min_radius)
    max_radius = min(cy - margin, h - margin - cy, cx - margin, w - margin - cx,
                     min(h, w) / 3.0)
    radius = rng.uniform(min_radius, max(max_radius, min_radius + 1e-6))
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    # reject near-duplicate angles that would collapse vertices
    if np.min(np.diff(np.concatenate([angles, [angles[0] + 2 * np.pi]]))) < 0.35:
        return None
    radii = radius * rng.uniform(0.6, 1.0, n_vertices)
    rows = cy + radii * np.sin(angles)
    cols = cx + radii * np.cos(angles)
    return np.stack([rows, cols], axis=1)


def _sample_primitive(kind, rng, shape):
    h, w = shape
    margin = 3.0
    if kind == CLASS_LINE:
        p0 = np.array([rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)])
        p1 = np.array([rng.uniform(margin, h - margin), rng.uniform(margin, w - margin)])
        if np.hypot(*(p1 - p0)) < 12:
            return None
        thickness = rng.uniform(1.5, 3.5)
        return {"p0": p0, "p1": p1, "thickness": thickness}, np.stack([p0, p1])
    if kind in (CLASS_QUAD, CLASS_TRIANGLE):
        n = 4 if kind == CLASS_QUAD else 3
        verts = _sample_convex_polygon(rng, shape, n)
        if verts is None:
            return None
        return {"vertices": verts}, verts
    if kind == CLASS_ELLIPSE:
        a = rng.uniform(5.0, min(h, w) / 5.0)
        b = rng.uniform(5.0, min(h, w) / 5.0)
        theta = rng.uniform(0, np.pi)
        ext = max(a, b)
        cy = rng.uniform(margin + ext, h - margin - ext)
        cx = rng.uniform(margin + ext, w - margin - ext)
        center = np.array([cy, cx])
        return {"center": center, "axes": (a, b), "theta": theta}, center[None, :]
    raise ValueError(f"unknown primitive class {kind}")


def _coverage(kind, params, shape):
    if kind == CLASS_LINE:
        return _segment_coverage(params["p0"], params["p1"], params["thickness"], shape)
    if kind in (CLASS_QUAD, CLASS_TRIANGLE):
        return _polygon_coverage(params["vertices"], shape)
    if kind == CLASS_ELLIPSE:
        return _ellipse_coverage(params["center"], params["axes"], params["theta"], shape)
    raise ValueError(f"unknown primitive class {kind}")


def render_scene(config: SceneConfig, rng: np.random.Generator, seed=0) -> ImageSample:
    """Render one scene. Pure function of (config, rng state).

    Later primitives occlude earlier ones; a keypoint covered by a later
    primitive (its pixel overdrawn) is removed.
    """
    h, w = config.image_shape
    bg = rng.uniform(*config.background_intensity)
    image = np.full((h, w), bg, dtype=np.float64)
    if config.background_noise > 0:
        image += rng.normal(0, config.background_noise, size=(h, w))
    mask = np.zeros((h, w), dtype=np.uint8)
    classes = config.enabled_classes()
    count = int(rng.integers(config.primitive_count[0], config.primitive_count[1] + 1))
    kept: list[tuple[Primitive, Array]] = []   # primitive + its keypoints (subpixel)
    placed: list[Primitive] = []
    if classes:
        for _ in range(count):
            kind = int(classes[rng.integers(0, len(classes))])
            sampled = None
            for _attempt in range(5):
                sampled = _sample_primitive(kind, rng, (h, w))
                if sampled is None:
                    continue
                params, kps = sampled
                if len(kps) > 1:
                    self_d = np.sqrt(((kps[:, None, :] - kps[None, :, :]) ** 2).sum(-1))
                    self_d += np.eye(len(kps)) * 1e9
                    if self_d.min() < config.min_keypoint_separation:
                        sampled = None
                        continue
                prev = np.concatenate([k for _, k in kept], axis=0) if kept else None
                if prev is not None and len(kps):
                    dist = np.sqrt(((kps[:, None, :] - prev[None, :, :]) ** 2).sum(-1))
                    if dist.min() < config.min_keypoint_separation:
                        sampled = None
                        continue
                break
            if sampled is None:
                continue
            params, kps = sampled
            intensity = rng.uniform(*config.foreground_intensity)
            cov = _coverage(kind, params, (h, w))
            image = image * (1 - cov) + intensity * cov
            solid = cov > 0.5
            mask[solid] = kind
            # stamp the generating class at the primitive's own keypoint
            # pixels (corner coverage is < 0.5 by construction)
            rr = np.clip(np.rint(kps[:, 0]).astype(int), 0, h - 1)
            cc = np.clip(np.rint(kps[:, 1]).astype(int), 0, w - 1)
            mask[rr, cc] = kind
            # occlusion: drop earlier keypoints overdrawn by this primitive
            survivors = []
            for prim, pk in kept:
                rr = np.clip(np.rint(pk[:, 0]).astype(int), 0, h - 1)
                cc = np.clip(np.rint(pk[:, 1]).astype(int), 0, w - 1)
                visible = ~solid[rr, cc]
                if visible.any():
                    survivors.append((prim, pk[visible]))
            kept = survivors
            prim = Primitive(kind, params, kps, intensity)
            placed.append(prim)
            kept.append((prim, kps))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    if kept:
        all_kps = np.concatenate([k for _, k in kept], axis=0)
        keypoints = KeypointSet(all_kps[:, 0], all_kps[:, 1], np.ones(len(all_kps)))
    else:
        keypoints = KeypointSet.empty()
    return ImageSample(image, keypoints, mask, seed=seed, scene=placed)


def photometric_augment(sample: ImageSample, rng: np.random.Generator,
                        config: PhotometricConfig = None) -> ImageSample:
    """Photometric-only perturbation; labels are unchanged by construction."""
    if config is None:
        config = PhotometricConfig()
    img = sample.image.astype(np.float64)
    contrast = rng.uniform(*config.contrast_range)
    brightness = rng.uniform(*config.brightness_range)
    img = (img - 0.5) * contrast + 0.5 + brightness
    if config.noise_sigma > 0:
        img += rng.normal(0, config.noise_sigma, size=img.shape)
    blur = rng.uniform(*config.blur_sigma_range)
    if blur > 0.1:
        img = gaussian_filter(img, blur)
    out = sample.copy()
    out.image = np.clip(img, 0.0, 1.0).astype(np.float32)
    return out


def make_dataset(config: SceneConfig, count: int, seed: int) -> list[ImageSample]:
    """Generate `count` scenes with per-sample derived seeds."""
    samples = []
    for i in range(count):
        sample_seed = seed * 1_000_003 + i
        rng = np.random.default_rng(sample_seed)
        samples.append(render_scene(config, rng, seed=sample_seed))
    return samples


# ---------------------------------------------------------------------------
# Dataset file format (magic "SSPD", little-endian)
# ---------------------------------------------------------------------------

def write_dataset(samples, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<HQ", _VERSION, len(samples)))
        for s in samples:
            h, w = s.image.shape
            fh.write(struct.pack("<QHH", s.seed & 0xFFFFFFFFFFFFFFFF, h, w))
            fh.write(s.image.astype("<f4").tobytes())
            kps = s.keypoints
            fh.write(struct.pack("<I", len(kps)))
            triples = np.stack([kps.rows, kps.cols, kps.scores], axis=1).astype("<f4")
            fh.write(triples.tobytes())
            fh.write(s.mask.astype(np.uint8).tobytes())


def _take(buf, offset, size, record, fieldname):
    if offset + size > len(buf):
        raise DatasetFormatError(
            f"truncated at byte {len(buf)} while reading field '{fieldname}' "
            f"of record {record} (needed {size} bytes at offset {offset})")
    return buf[offset:offset + size], offset + size


def read_dataset(path) -> list[ImageSample]:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0
    head, off = _take(buf, off, 4, -1, "magic")
    if head != _MAGIC:
        raise DatasetFormatError(f"bad magic at offset 0: {head!r}")
    raw, off = _take(buf, off, 10, -1, "header")
    version, count = struct.unpack("<HQ", raw)
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported version {version} at offset 4")
    samples = []
    for rec in range(count):
        raw, off = _take(buf, off, 12, rec, "seed/shape")
        seed, h, w = struct.unpack("<QHH", raw)
        raw, off = _take(buf, off, 4 * h * w, rec, "image")
        image = np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
        raw, off = _take(buf, off, 4, rec, "keypoint count")
        (nkp,) = struct.unpack("<I", raw)
        raw, off = _take(buf, off, 12 * nkp, rec, "keypoints")
        triples = np.frombuffer(raw, dtype="<f4").reshape(nkp, 3).astype(np.float64)
        raw, off = _take(buf, off, h * w, rec, "mask")
        mask = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
        kps = KeypointSet(triples[:, 0], triples[:, 1], triples[:, 2]) if nkp \
            else KeypointSet.empty()
        samples.append(ImageSample(image, kps, mask, seed=seed))
    if off != len(buf):
        raise DatasetFormatError(
            f"{len(buf) - off} trailing bytes after record {count - 1} at offset {off}")
    return samples
