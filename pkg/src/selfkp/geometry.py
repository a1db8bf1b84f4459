"""Projective geometry: homography sampling/estimation, warping and NMS.

Keypoints live in (row, col) image coordinates; homography matrices act
on homogeneous (x, y, 1) = (col, row, 1) vectors, normalized so the
bottom-right entry is 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


class DegenerateHomography(ValueError):
    pass


class EstimationFailed(RuntimeError):
    """RANSAC could not produce a valid homography."""


@dataclass
class Homography:
    matrix: Array

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) < 1e-12:
            raise DegenerateHomography("homography is singular")
        self.matrix = m / m[2, 2]

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx, dy):
        return cls(np.array([[1, 0, dx], [0, 1, dy], [0, 0, 1]], dtype=np.float64))

    def inverse(self):
        return Homography(np.linalg.inv(self.matrix))

    def compose(self, other: "Homography"):
        """Returns self ∘ other (apply other first)."""
        return Homography(self.matrix @ other.matrix)

    def apply_xy(self, xy: Array):
        """Transform (..., 2) arrays of (x, y) points; returns (points, w)."""
        pts = np.asarray(xy, dtype=np.float64)
        ones = np.ones(pts.shape[:-1] + (1,))
        hom = np.concatenate([pts, ones], axis=-1) @ self.matrix.T
        w = hom[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            out = hom[..., :2] / w[..., None]
        return out, w


@dataclass
class KeypointSet:
    """Subpixel keypoints sorted by descending score."""
    rows: Array
    cols: Array
    scores: Array

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64).reshape(-1)
        self.cols = np.asarray(self.cols, dtype=np.float64).reshape(-1)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.rows) == len(self.cols) == len(self.scores)):
            raise ValueError("keypoint field lengths differ")
        order = np.lexsort((self.cols, self.rows, -self.scores))
        self.rows = self.rows[order]
        self.cols = self.cols[order]
        self.scores = self.scores[order]

    @classmethod
    def empty(cls):
        return cls(np.empty(0), np.empty(0), np.empty(0))

    def __len__(self):
        return len(self.rows)

    def xy(self):
        return np.stack([self.cols, self.rows], axis=-1)

    def topk(self, k):
        return KeypointSet(self.rows[:k], self.cols[:k], self.scores[:k])

    def select(self, mask):
        return KeypointSet(self.rows[mask], self.cols[mask], self.scores[mask])


@dataclass
class HomographySampleConfig:
    """Ranges for random homography factors; all contain the identity."""
    image_shape: tuple = (120, 160)
    scale_range: tuple = (0.7, 1.3)
    rotation_range: tuple = (-np.deg2rad(25), np.deg2rad(25))
    translation_range: tuple = (-0.1, 0.1)   # fraction of each dimension
    perspective_range: tuple = (-0.05, 0.05)

    def __post_init__(self):
        for name, lo_hi, ident in [("scale_range", self.scale_range, 1.0),
                                   ("rotation_range", self.rotation_range, 0.0),
                                   ("translation_range", self.translation_range, 0.0),
                                   ("perspective_range", self.perspective_range, 0.0)]:
            lo, hi = lo_hi
            if not (lo <= ident <= hi):
                raise ValueError(f"{name} must contain the identity value {ident}")

    @classmethod
    def identity(cls, image_shape=(120, 160)):
        return cls(image_shape=image_shape, scale_range=(1, 1), rotation_range=(0, 0),
                   translation_range=(0, 0), perspective_range=(0, 0))


def sample_homography(config: HomographySampleConfig, rng: np.random.Generator,
                      max_attempts=100) -> Homography:
    """Random homography: center-scale, rotation about the image center,
    translation, then perspective jitter. Deterministic given (config, seed)."""
    h, w = config.image_shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    to_center = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
    from_center = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
    for _ in range(max_attempts):
        s = rng.uniform(*config.scale_range)
        theta = rng.uniform(*config.rotation_range)
        tx = rng.uniform(*config.translation_range) * w
        ty = rng.uniform(*config.translation_range) * h
        p1 = rng.uniform(*config.perspective_range)
        p2 = rng.uniform(*config.perspective_range)
        scale = np.diag([s, s, 1.0])
        c, si = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -si, 0], [si, c, 0], [0, 0, 1]], dtype=np.float64)
        trans = np.array([[1, 0, tx], [0, 1, ty], [0, 0, 1]], dtype=np.float64)
        persp = np.array([[1, 0, 0], [0, 1, 0], [p1 / w, p2 / h, 1]], dtype=np.float64)
        m = from_center @ persp @ trans @ rot @ scale @ to_center
        if abs(np.linalg.det(m)) >= 1e-12:
            return Homography(m)
    raise DegenerateHomography(f"no valid sample in {max_attempts} attempts")


def warp_image(image: Array, H: Homography, out_shape=None) -> Array:
    """Inverse-map warp with bilinear sampling; out-of-bounds source -> 0."""
    image = np.asarray(image)
    if out_shape is None:
        out_shape = image.shape
    oh, ow = out_shape
    hinv = H.inverse().matrix
    ys, xs = np.mgrid[0:oh, 0:ow]
    src, _ = Homography(hinv).apply_xy(np.stack([xs, ys], axis=-1).reshape(-1, 2))
    sx = src[:, 0].reshape(oh, ow)
    sy = src[:, 1].reshape(oh, ow)
    ih, iw = image.shape
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    out = np.zeros((oh, ow), dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < iw) & (yi >= 0) & (yi < ih)
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            vals = np.zeros((oh, ow), dtype=np.float64)
            vals[valid] = image[yi[valid], xi[valid]]
            out += wgt * vals
    return out.astype(image.dtype, copy=False) if image.dtype == np.float64 \
        else out.astype(image.dtype)


def warp_mask_nearest(mask: Array, H: Homography, out_shape=None, fill=0) -> Array:
    """Nearest-neighbor warp for integer label maps."""
    mask = np.asarray(mask)
    if out_shape is None:
        out_shape = mask.shape
    oh, ow = out_shape
    hinv = H.inverse()
    ys, xs = np.mgrid[0:oh, 0:ow]
    src, _ = hinv.apply_xy(np.stack([xs, ys], axis=-1).reshape(-1, 2))
    sx = np.rint(src[:, 0]).astype(np.int64).reshape(oh, ow)
    sy = np.rint(src[:, 1]).astype(np.int64).reshape(oh, ow)
    ih, iw = mask.shape
    valid = (sx >= 0) & (sx < iw) & (sy >= 0) & (sy < ih)
    out = np.full((oh, ow), fill, dtype=mask.dtype)
    out[valid] = mask[sy[valid], sx[valid]]
    return out


def warp_points(points: KeypointSet, H: Homography):
    """Homogeneous transform + dehomogenization; scores preserved.

    Returns (warped KeypointSet, number of points dropped at infinity).
    """
    if len(points) == 0:
        return KeypointSet.empty(), 0
    out, w = H.apply_xy(points.xy())
    keep = np.abs(w) > 1e-12
    dropped = int((~keep).sum())
    return KeypointSet(out[keep, 1], out[keep, 0], points.scores[keep]), dropped


@dataclass
class RansacConfig:
    iterations: int = 1000
    inlier_threshold: float = 3.0
    seed: int = 0


def _hartley_normalize(xy: Array):
    centroid = xy.mean(axis=0)
    centered = xy - centroid
    mean_dist = np.sqrt((centered ** 2).sum(axis=1)).mean()
    s = np.sqrt(2.0) / max(mean_dist, 1e-12)
    t = np.array([[s, 0, -s * centroid[0]],
                  [0, s, -s * centroid[1]],
                  [0, 0, 1]], dtype=np.float64)
    return t


def dlt_homography(src_xy: Array, dst_xy: Array) -> Homography:
    """Normalized DLT from >= 4 correspondences ((x, y) arrays)."""
    src_xy = np.asarray(src_xy, dtype=np.float64)
    dst_xy = np.asarray(dst_xy, dtype=np.float64)
    n = len(src_xy)
    if n < 4:
        raise EstimationFailed(f"need >= 4 correspondences, got {n}")
    ts = _hartley_normalize(src_xy)
    td = _hartley_normalize(dst_xy)
    ones = np.ones((n, 1))
    sh = np.concatenate([src_xy, ones], axis=1) @ ts.T
    dh = np.concatenate([dst_xy, ones], axis=1) @ td.T
    a = np.zeros((2 * n, 9), dtype=np.float64)
    x, y = sh[:, 0], sh[:, 1]
    u, v = dh[:, 0], dh[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    _, _, vt = np.linalg.svd(a)
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    if abs(m[2, 2]) < 1e-12 or abs(np.linalg.det(m)) < 1e-12:
        raise EstimationFailed("degenerate DLT solution")
    return Homography(m)


def estimate_homography(src_xy: Array, dst_xy: Array, config: RansacConfig = None):
    """RANSAC over normalized-DLT hypotheses, refit on the final inliers.

    Returns (Homography, boolean inlier mask). Raises EstimationFailed when
    fewer than 4 matches exist or every hypothesis is degenerate.
    """
    if config is None:
        config = RansacConfig()
    src_xy = np.asarray(src_xy, dtype=np.float64).reshape(-1, 2)
    dst_xy = np.asarray(dst_xy, dtype=np.float64).reshape(-1, 2)
    n = len(src_xy)
    if n < 4 or len(dst_xy) != n:
        raise EstimationFailed(f"need >= 4 matches, got {n}")
    rng = np.random.default_rng(config.seed)
    best_mask = None
    best_count = 0
    for _ in range(config.iterations):
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = dlt_homography(src_xy[idx], dst_xy[idx])
        except (EstimationFailed, DegenerateHomography):
            continue
        proj, w = h.apply_xy(src_xy)
        err = np.sqrt(((proj - dst_xy) ** 2).sum(axis=1))
        mask = (np.abs(w) > 1e-12) & (err <= config.inlier_threshold)
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 4:
        raise EstimationFailed("all RANSAC hypotheses degenerate")
    try:
        h = dlt_homography(src_xy[best_mask], dst_xy[best_mask])
    except (EstimationFailed, DegenerateHomography):
        raise EstimationFailed("refit on inliers failed")
    proj, w = h.apply_xy(src_xy)
    err = np.sqrt(((proj - dst_xy) ** 2).sum(axis=1))
    mask = (np.abs(w) > 1e-12) & (err <= config.inlier_threshold)
    return h, mask


def nms(heatmap: Array, radius: int, threshold: float, top_k: int) -> KeypointSet:
    """Greedy NMS: accept candidates in descending score order unless an
    accepted point lies within Chebyshev distance <= radius. Equal scores
    break ties by lower row, then lower column."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    heatmap = np.asarray(heatmap)
    h, w = heatmap.shape
    rs, cs = np.nonzero(heatmap >= threshold)
    if len(rs) == 0:
        return KeypointSet.empty()
    scores = heatmap[rs, cs]
    order = np.lexsort((cs, rs, -scores))
    occupied = np.zeros((h, w), dtype=bool)
    out_r, out_c, out_s = [], [], []
    for i in order:
        r, c = int(rs[i]), int(cs[i])
        r0, r1 = max(0, r - radius), min(h, r + radius + 1)
        c0, c1 = max(0, c - radius), min(w, c + radius + 1)
        if occupied[r0:r1, c0:c1].any():
            continue
        occupied[r, c] = True
        out_r.append(r)
        out_c.append(c)
        out_s.append(float(scores[i]))
        if len(out_r) >= top_k:
            break
    return KeypointSet(np.array(out_r, dtype=np.float64),
                       np.array(out_c, dtype=np.float64),
                       np.array(out_s, dtype=np.float64))
