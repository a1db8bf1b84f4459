"""Detector/descriptor metrics over warped image pairs with known
ground-truth homographies, plus synthetic benchmark-pair generation.

Metrics: repeatability, mean localization error, nearest-neighbor mean
average precision, matching score, and homography estimation correctness
at pixel thresholds {1, 3, 5}. Keypoints that warp outside the
counterpart image are excluded from the ratio denominators (shared-view
filtering via the ground-truth homography).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import synthdata as sd
from .geometry import (EstimationFailed, Homography, HomographySampleConfig,
                       KeypointSet, RansacConfig, estimate_homography, nms,
                       sample_homography, warp_image)

Array = np.ndarray


@dataclass
class EvalPair:
    image_a: Array
    image_b: Array
    H: Homography            # maps A pixel coordinates onto B
    kind: str = "viewpoint"  # "viewpoint" | "illumination"

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape:
            raise ValueError("pair images must share a shape")


@dataclass
class EvalConfig:
    top_k: int = 300
    nms_radius: int = 4
    detection_threshold: float = 0.015
    eps_rep: float = 3.0
    he_thresholds: tuple = (1.0, 3.0, 5.0)

    def __post_init__(self):
        if self.eps_rep <= 0 or min(self.he_thresholds) <= 0:
            raise ValueError("thresholds must be positive")


@dataclass
class MetricReport:
    per_pair: list
    means: dict
    counts: dict = field(default_factory=dict)


def make_eval_set(scene_config: sd.SceneConfig, pair_count: int, seed: int,
                  homography_config: HomographySampleConfig = None,
                  photometric: sd.PhotometricConfig = None):
    """Alternating viewpoint pairs (pure geometric warp, ground-truth H)
    and illumination pairs (photometric perturbation, H = identity)."""
    if homography_config is None:
        homography_config = HomographySampleConfig(image_shape=scene_config.image_shape)
    if photometric is None:
        photometric = sd.PhotometricConfig()
    pairs = []
    for i in range(pair_count):
        ss = np.random.SeedSequence(entropy=seed, spawn_key=(i,))
        rng = np.random.default_rng(ss)
        sample = sd.render_scene(scene_config, rng, seed=seed)
        if i % 2 == 0:
            H = sample_homography(homography_config, rng)
            image_b = warp_image(sample.image, H)
            kind = "viewpoint"
        else:
            H = Homography.identity()
            image_b = sd.photometric_augment(sample, rng, photometric).image
            kind = "illumination"
        pairs.append(EvalPair(sample.image, image_b, H, kind))
    return pairs


def detect_and_describe(params: mdl.ModelParams, image: Array,
                        config: EvalConfig = None):
    """Heatmap -> NMS -> top-k keypoints, plus their sampled unit-norm
    descriptors. Returns (KeypointSet, (K, D) array, degenerate count)."""
    if config is None:
        config = EvalConfig()
    x = image[None, :, :, None].astype(np.float32)
    feats = mdl.encoder_forward(x, params, mode="eval")
    heat = mdl.extract_heatmap(mdl.detector_head(feats, params, mode="eval"))[0]
    kps = nms(heat, config.nms_radius, config.detection_threshold, config.top_k)
    coarse = mdl.descriptor_head(feats, params, mode="eval")
    desc, degenerate = mdl.sample_descriptors(coarse, kps)
    return kps, desc, degenerate


def _in_bounds(xy: Array, shape) -> Array:
    h, w = shape
    return ((xy[:, 0] >= 0) & (xy[:, 0] <= w - 1)
            & (xy[:, 1] >= 0) & (xy[:, 1] <= h - 1))


def shared_view_mask(kps: KeypointSet, H: Homography, shape) -> Array:
    """True where the keypoint's warp lands inside the counterpart image."""
    if len(kps) == 0:
        return np.zeros(0, dtype=bool)
    warped, w = H.apply_xy(kps.xy())
    return (np.abs(w) > 1e-12) & _in_bounds(warped, shape)


def _directional_residuals(src: KeypointSet, dst: KeypointSet, H, eps):
    """Warp src by H; per point, distance to the nearest dst point.
    Returns (repeated count, residuals of repeated points)."""
    if len(src) == 0 or len(dst) == 0:
        return 0, np.zeros(0)
    warped, _ = H.apply_xy(src.xy())
    diff = warped[:, None, :] - dst.xy()[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1)).min(axis=1)
    hit = dist <= eps
    return int(hit.sum()), dist[hit]


def repeatability(kps_a: KeypointSet, kps_b: KeypointSet, H: Homography,
                  eps: float, shape):
    """(repeated in A + repeated in B) / (counted in A + counted in B),
    over shared-view keypoints. Returns None when nothing is counted."""
    fa = kps_a.select(shared_view_mask(kps_a, H, shape))
    fb = kps_b.select(shared_view_mask(kps_b, H.inverse(), shape))
    denom = len(fa) + len(fb)
    if denom == 0:
        return None
    ra, _ = _directional_residuals(fa, fb, H, eps)
    rb, _ = _directional_residuals(fb, fa, H.inverse(), eps)
    return (ra + rb) / denom


def mle(kps_a: KeypointSet, kps_b: KeypointSet, H: Homography, eps: float, shape):
    """Mean residual of repeated points (both directions); None when no
    point repeats."""
    fa = kps_a.select(shared_view_mask(kps_a, H, shape))
    fb = kps_b.select(shared_view_mask(kps_b, H.inverse(), shape))
    _, res_a = _directional_residuals(fa, fb, H, eps)
    _, res_b = _directional_residuals(fb, fa, H.inverse(), eps)
    res = np.concatenate([res_a, res_b])
    if len(res) == 0:
        return None
    return float(res.mean())


def nn_matches(desc_a: Array, desc_b: Array):
    """Mutual nearest neighbors under dot-product similarity.
    Returns (index_a, index_b, similarity) arrays."""
    if len(desc_a) == 0 or len(desc_b) == 0:
        return (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
                np.zeros(0))
    sim = desc_a.astype(np.float64) @ desc_b.astype(np.float64).T
    ab = sim.argmax(axis=1)
    ba = sim.argmax(axis=0)
    ia = np.nonzero(ba[ab] == np.arange(len(desc_a)))[0]
    ib = ab[ia]
    return ia, ib, sim[ia, ib]


def _match_correct(kps_a, kps_b, ia, ib, H, eps):
    if len(ia) == 0:
        return np.zeros(0, dtype=bool)
    warped, _ = H.apply_xy(kps_a.xy()[ia])
    diff = warped - kps_b.xy()[ib]
    return np.sqrt((diff ** 2).sum(axis=-1)) <= eps


def nn_map(kps_a, desc_a, kps_b, desc_b, H: Homography, eps: float):
    """Average precision of similarity-ranked mutual-NN matches; correct
    means the warped A point lies within eps of the matched B point.
    Returns (ap, flagged) with ap = 0 and a flag when there are no matches."""
    ia, ib, sim = nn_matches(desc_a, desc_b)
    if len(ia) == 0:
        return 0.0, True
    order = np.argsort(-sim, kind="stable")
    correct = _match_correct(kps_a, kps_b, ia[order], ib[order], H, eps)
    n_correct = int(correct.sum())
    if n_correct == 0:
        return 0.0, False
    ranks = np.nonzero(correct)[0] + 1
    precisions = np.cumsum(correct)[correct.astype(bool)] / ranks
    return float(precisions.sum() / n_correct), False


def matching_score(kps_a, desc_a, kps_b, desc_b, H: Homography, eps: float, shape):
    """Correct mutual-NN matches over shared-view keypoints, averaged over
    the two directions. Returns None when neither side has shared-view
    keypoints."""
    ia, ib, _ = nn_matches(desc_a, desc_b)
    correct = _match_correct(kps_a, kps_b, ia, ib, H, eps)
    mask_a = shared_view_mask(kps_a, H, shape)
    mask_b = shared_view_mask(kps_b, H.inverse(), shape)
    ratios = []
    if mask_a.sum():
        ratios.append(float((correct & mask_a[ia]).sum() / mask_a.sum()))
    if mask_b.sum():
        ratios.append(float((correct & mask_b[ib]).sum() / mask_b.sum()))
    if not ratios:
        return None
    return sum(ratios) / len(ratios)


def homography_estimation_metric(kps_a, desc_a, kps_b, desc_b, H_true: Homography,
                                 shape, thresholds=(1.0, 3.0, 5.0), pair_index=0,
                                 ransac: RansacConfig = None):
    """Estimate H from mutual-NN matches and compare the warped image
    corners against the ground truth. Returns (flags per threshold,
    mean corner error or None, estimation-failed flag)."""
    ia, ib, _ = nn_matches(desc_a, desc_b)
    if len(ia) < 4:
        return {float(t): False for t in thresholds}, None, True
    if ransac is None:
        ransac = RansacConfig(seed=pair_index)
    try:
        H_est, _ = estimate_homography(kps_a.xy()[ia], kps_b.xy()[ib], ransac)
    except EstimationFailed:
        return {float(t): False for t in thresholds}, None, True
    h, w = shape
    corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    true_c, _ = H_true.apply_xy(corners)
    est_c, _ = H_est.apply_xy(corners)
    err = float(np.sqrt(((true_c - est_c) ** 2).sum(axis=-1)).mean())
    return {float(t): err <= t for t in thresholds}, err, False


def evaluate_pair(params: mdl.ModelParams, pair: EvalPair, config: EvalConfig,
                  pair_index=0) -> dict:
    shape = pair.image_a.shape
    kps_a, desc_a, deg_a = detect_and_describe(params, pair.image_a, config)
    kps_b, desc_b, deg_b = detect_and_describe(params, pair.image_b, config)
    rep = repeatability(kps_a, kps_b, pair.H, config.eps_rep, shape)
    loc = mle(kps_a, kps_b, pair.H, config.eps_rep, shape)
    ap, no_matches = nn_map(kps_a, desc_a, kps_b, desc_b, pair.H, config.eps_rep)
    ms = matching_score(kps_a, desc_a, kps_b, desc_b, pair.H, config.eps_rep, shape)
    he, corner_err, he_failed = homography_estimation_metric(
        kps_a, desc_a, kps_b, desc_b, pair.H, shape,
        thresholds=config.he_thresholds, pair_index=pair_index)
    flags = []
    if rep is None:
        flags.append("no_counted_keypoints")
    if loc is None:
        flags.append("no_repeated_points")
    if no_matches:
        flags.append("no_matches")
    if ms is None:
        flags.append("no_shared_keypoints")
    if he_failed:
        flags.append("estimation_failed")
    return {"index": pair_index, "kind": pair.kind,
            "keypoints_a": len(kps_a), "keypoints_b": len(kps_b),
            "degenerate_descriptors": deg_a + deg_b,
            "repeatability": rep, "mle": loc, "nn_map": ap,
            "matching_score": ms,
            "he": {f"{t:g}": bool(v) for t, v in he.items()},
            "corner_error": corner_err, "flags": flags}


def evaluate_model(params: mdl.ModelParams, pairs, config: EvalConfig = None) -> MetricReport:
    """All five metrics per pair plus aggregate means. Flagged pairs are
    excluded from the affected metric's mean but always reported."""
    if config is None:
        config = EvalConfig()
    if not pairs:
        raise ValueError("eval set must contain at least one pair")
    per_pair = [evaluate_pair(params, p, config, i) for i, p in enumerate(pairs)]

    def _mean(key):
        vals = [r[key] for r in per_pair if r[key] is not None]
        return float(np.mean(vals)) if vals else None

    means = {"repeatability": _mean("repeatability"), "mle": _mean("mle"),
             "nn_map": _mean("nn_map"), "matching_score": _mean("matching_score")}
    for t in config.he_thresholds:
        key = f"{t:g}"
        means[f"he@{key}"] = float(np.mean([r["he"][key] for r in per_pair]))
    counts = {"pairs": len(per_pair),
              "estimation_failures": sum("estimation_failed" in r["flags"] for r in per_pair),
              "skipped_repeatability": sum(r["repeatability"] is None for r in per_pair),
              "skipped_mle": sum(r["mle"] is None for r in per_pair),
              "skipped_matching_score": sum(r["matching_score"] is None for r in per_pair)}
    return MetricReport(per_pair, means, counts)
