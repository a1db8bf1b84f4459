"""Task losses and the three multi-task combination strategies.

Detector: per-cell softmax over 65 channels against one-hot targets
(dustbin for empty cells), scored either as the literal per-channel
binary cross-entropy of the softmax output (default) or as conventional
categorical cross-entropy. Descriptor: double-margin hinge on cell-pair
dot products, positive and negative terms averaged separately.
Semantic: weighted cross-entropy at 1/8 resolution against
majority-vote downsampled masks.

Combinations: plain sum, learned homoscedastic-uncertainty weighting
(eta = 2 log sigma reparameterization), and the min-norm "central
direction" over normalized per-task encoder gradients with a
gradient-norm-history tension factor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import Homography
from .model import CELL, DUSTBIN

Array = np.ndarray

_LOG_EPS = 1e-12


# ---------------------------------------------------------------------------
# Detector loss
# ---------------------------------------------------------------------------

def cell_targets(keypoints_list, image_shape) -> Array:
    """Encode keypoints as one-hot (N, H/8, W/8, 65) cell targets.

    At most one keypoint per cell: highest score wins, ties break on
    lower row then lower column. Empty cells get the dustbin channel.
    """
    h, w = image_shape
    hc, wc = h // CELL, w // CELL
    n = len(keypoints_list)
    targets = np.zeros((n, hc, wc, DUSTBIN + 1), dtype=np.float32)
    targets[..., DUSTBIN] = 1.0
    for i, kps in enumerate(keypoints_list):
        best = {}
        for r, c, s in zip(kps.rows, kps.cols, kps.scores):
            ri, ci = int(round(r)), int(round(c))
            if not (0 <= ri < h and 0 <= ci < w):
                continue
            cell = (ri // CELL, ci // CELL)
            cand = (-s, ri, ci)
            if cell not in best or cand < best[cell]:
                best[cell] = cand
        for (cr, cc), (_, ri, ci) in best.items():
            ch = (ri % CELL) * CELL + (ci % CELL)
            targets[i, cr, cc, DUSTBIN] = 0.0
            targets[i, cr, cc, ch] = 1.0
    return targets


def detector_loss(cell_logits, targets: Array, form="bce"):
    """Detector loss against one-hot cell targets, averaged over batch,
    cells and (for the bce form) channels.

    form="bce" applies per-channel binary cross-entropy to the softmax
    output; form="ce" is conventional categorical cross-entropy.
    """
    p = ad.channel_softmax(cell_logits)
    y = ad.Tensor(targets, dtype=p.dtype)
    pos = ad.mul(y, ad.log(p, eps=_LOG_EPS))
    if form == "bce":
        one_minus_y = ad.affine(y, -1.0, 1.0)
        neg = ad.mul(one_minus_y, ad.log(ad.affine(p, -1.0, 1.0), eps=_LOG_EPS))
        return ad.affine(ad.reduce_mean(ad.add(pos, neg)), -1.0)
    if form == "ce":
        cells = targets.size // targets.shape[-1]
        return ad.affine(ad.reduce_sum(pos), -1.0 / cells)
    raise ValueError(f"unknown detector loss form {form!r}")


# ---------------------------------------------------------------------------
# Descriptor loss
# ---------------------------------------------------------------------------

@dataclass
class HingeConfig:
    m_p: float = 1.0
    m_n: float = 0.2

    def __post_init__(self):
        if not self.m_p > self.m_n:
            raise ValueError("positive margin must exceed negative margin")


@dataclass
class CorrespondenceConfig:
    positive_radius: float = 8.0
    negative_cap_factor: int = 10
    negative_floor: int = 64     # negatives kept even when n_p = 0


@dataclass
class CorrespondenceSet:
    """Cell-pair labels between an image and its warp (flat cell indices)."""
    grid_shape: tuple
    positive_pairs: Array        # (n_p, 2) int
    negative_pairs: Array        # (n_n, 2) int

    @property
    def n_p(self):
        return len(self.positive_pairs)

    @property
    def n_n(self):
        return len(self.negative_pairs)

    def transpose(self):
        return CorrespondenceSet(self.grid_shape,
                                 self.positive_pairs[:, ::-1].copy(),
                                 self.negative_pairs[:, ::-1].copy())


def build_correspondences(H: Homography, grid_shape, rng: np.random.Generator,
                          config: CorrespondenceConfig = None) -> CorrespondenceSet:
    """Warp image-1 cell centers by H; a cell is positive for the nearest
    image-2 cell when the warped center lands within the positive radius.
    Negatives are drawn uniformly from the non-matching pairs."""
    if config is None:
        config = CorrespondenceConfig()
    hc, wc = grid_shape
    cells = hc * wc
    rr, cc = np.mgrid[0:hc, 0:wc]
    centers_xy = np.stack([cc.ravel() * CELL + (CELL - 1) / 2.0,
                           rr.ravel() * CELL + (CELL - 1) / 2.0], axis=1)
    warped, wcoord = H.apply_xy(centers_xy)
    br = np.rint((warped[:, 1] - (CELL - 1) / 2.0) / CELL).astype(np.int64)
    bc = np.rint((warped[:, 0] - (CELL - 1) / 2.0) / CELL).astype(np.int64)
    in_grid = (np.abs(wcoord) > 1e-12) & (br >= 0) & (br < hc) & (bc >= 0) & (bc < wc)
    bcx = np.clip(bc, 0, wc - 1) * CELL + (CELL - 1) / 2.0
    bcy = np.clip(br, 0, hc - 1) * CELL + (CELL - 1) / 2.0
    dist = np.sqrt((warped[:, 0] - bcx) ** 2 + (warped[:, 1] - bcy) ** 2)
    pos_mask = in_grid & (dist <= config.positive_radius)
    a_idx = np.nonzero(pos_mask)[0]
    b_idx = br[pos_mask] * wc + bc[pos_mask]
    positive = np.stack([a_idx, b_idx], axis=1)
    n_p = len(positive)
    want = max(config.negative_cap_factor * n_p, config.negative_floor)
    total = cells * cells
    want = min(want, total - n_p)
    pos_flat = set((positive[:, 0] * cells + positive[:, 1]).tolist())
    draw = min(total, want + n_p + 64)
    candidates = rng.choice(total, size=draw, replace=False)
    keep = np.fromiter((c not in pos_flat for c in candidates), dtype=bool,
                       count=len(candidates))
    chosen = candidates[keep][:want]
    negative = np.stack([chosen // cells, chosen % cells], axis=1) if len(chosen) \
        else np.zeros((0, 2), dtype=np.int64)
    return CorrespondenceSet((hc, wc), positive.astype(np.int64), negative)


def descriptor_loss(coarse1, coarse2, correspondences, config: HingeConfig = None):
    """Double-margin hinge over cell-pair dot products.

    coarse1/coarse2: (N, H/8, W/8, D) tensors (unnormalized);
    correspondences: one CorrespondenceSet per batch item. Returns
    (loss Tensor, positive term, negative term); per-image terms are
    normalized by that image's n_p / n_n and averaged over the batch.
    """
    if config is None:
        config = HingeConfig()
    n, hc, wc, d = coarse1.shape
    if len(correspondences) != n:
        raise ValueError("one correspondence set per batch item required")
    cells = hc * wc
    d1 = ad.reshape(ad.l2_normalize(coarse1), (n, cells, d))
    d2 = ad.reshape(ad.l2_normalize(coarse2), (n, cells, d))
    sim = ad.dot(d1, d2)
    wp = np.zeros((n, cells, cells), dtype=coarse1.dtype)
    wn = np.zeros((n, cells, cells), dtype=coarse1.dtype)
    any_p = any_n = False
    for i, corr in enumerate(correspondences):
        if corr.grid_shape != (hc, wc):
            raise ValueError(f"correspondence grid {corr.grid_shape} does not "
                             f"match descriptor grid {(hc, wc)}")
        if corr.n_p:
            wp[i, corr.positive_pairs[:, 0], corr.positive_pairs[:, 1]] = 1.0 / (n * corr.n_p)
            any_p = True
        if corr.n_n:
            wn[i, corr.negative_pairs[:, 0], corr.negative_pairs[:, 1]] = 1.0 / (n * corr.n_n)
            any_n = True
    if not (any_p or any_n):
        raise ValueError("descriptor loss needs at least one positive or negative pair")
    terms = []
    l_p = l_n = 0.0
    if any_p:
        lp = ad.reduce_sum(ad.mul(ad.clamp0(ad.affine(sim, -1.0, config.m_p)),
                                  ad.Tensor(wp, dtype=sim.dtype)))
        l_p = lp.item()
        terms.append(lp)
    if any_n:
        ln = ad.reduce_sum(ad.mul(ad.clamp0(ad.affine(sim, 1.0, -config.m_n)),
                                  ad.Tensor(wn, dtype=sim.dtype)))
        l_n = ln.item()
        terms.append(ln)
    total = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return total, l_p, l_n


# ---------------------------------------------------------------------------
# Semantic loss
# ---------------------------------------------------------------------------

def majority_downsample(mask: Array, cell=CELL) -> Array:
    """Majority vote per cell; ties break toward the smaller class id."""
    h, w = mask.shape
    hc, wc = h // cell, w // cell
    blocks = mask[:hc * cell, :wc * cell].reshape(hc, cell, wc, cell)
    classes = int(mask.max()) + 1
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in range(classes)], axis=-1)
    return counts.argmax(axis=-1).astype(mask.dtype)


def semantic_loss(class_logits, cell_mask: Array, class_weights=None):
    """Weighted cross-entropy against cell-level class indices, averaged
    over batch and cells."""
    n, hc, wc, c = class_logits.shape
    if cell_mask.max() >= c:
        raise ValueError(f"mask value {cell_mask.max()} out of range for {c} classes")
    if class_weights is None:
        class_weights = np.ones(c)
    onehot = np.eye(c, dtype=np.float64)[cell_mask.astype(np.int64)]
    weighted = (onehot * np.asarray(class_weights)).astype(np.float32)
    p = ad.channel_softmax(class_logits)
    picked = ad.mul(ad.log(p, eps=_LOG_EPS), ad.Tensor(weighted, dtype=p.dtype))
    return ad.affine(ad.reduce_sum(picked), -1.0 / (n * hc * wc))


# ---------------------------------------------------------------------------
# Multi-task combinations
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    detector: float = 1.0
    descriptor: float = 1.0    # lambda of the plain-sum objective
    semantic: float = 1.0

    def __post_init__(self):
        if min(self.detector, self.descriptor, self.semantic) < 0:
            raise ValueError("task weights must be >= 0")


def uniform_total(l_d1, l_d2, l_desc, l_s1=None, l_s2=None, weights: LossWeights = None):
    """Plain weighted sum; semantic terms present only for the semantic model."""
    if weights is None:
        weights = LossWeights()
    total = ad.add(ad.affine(ad.add(l_d1, l_d2), weights.detector),
                   ad.affine(l_desc, weights.descriptor))
    if l_s1 is not None:
        total = ad.add(total, ad.affine(ad.add(l_s1, l_s2), weights.semantic))
    return total


@dataclass
class UncertaintyParams:
    """Learnable log-variance scalars, eta_i = 2 log sigma_i."""
    eta_d: ad.Tensor
    eta_desc: ad.Tensor
    eta_s: ad.Tensor

    @classmethod
    def create(cls, init=(1.0, 2.0, 1.0), dtype=np.float32):
        names = ("eta_d", "eta_desc", "eta_s")
        return cls(*(ad.Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=n)
                     for v, n in zip(init, names)))

    def tensors(self):
        return {"eta_d": self.eta_d, "eta_desc": self.eta_desc, "eta_s": self.eta_s}

    def values(self):
        return {k: t.item() for k, t in self.tensors().items()}

    def all_finite(self):
        return all(np.isfinite(t.data).all() for t in self.tensors().values())


def uncertainty_total(l_d1, l_d2, l_desc, eta: UncertaintyParams,
                      l_s1=None, l_s2=None):
    """(L_d1+L_d2) e^eta_d + (L_desc/2) e^eta_desc + (L_s1+L_s2) e^eta_s
    + eta_d + eta_desc/2 + eta_s; semantic terms dropped for the
    non-semantic model."""
    total = ad.add(ad.mul(ad.add(l_d1, l_d2), ad.exp(eta.eta_d)),
                   ad.mul(ad.affine(l_desc, 0.5), ad.exp(eta.eta_desc)))
    total = ad.add(total, ad.add(eta.eta_d, ad.affine(eta.eta_desc, 0.5)))
    if l_s1 is not None:
        total = ad.add(total, ad.mul(ad.add(l_s1, l_s2), ad.exp(eta.eta_s)))
        total = ad.add(total, eta.eta_s)
    return total


def min_norm_weights(directions: Array, iterations=200, gap_tol=1e-10) -> Array:
    """Simplex weights minimizing ||sum_i w_i g_i||^2 by Frank-Wolfe with
    exact line search, started at the uniform point (which makes the
    symmetric cases exact). Ties pick the lowest index."""
    g = np.asarray(directions, dtype=np.float64)
    t = len(g)
    if t == 1:
        return np.ones(1)
    gram = g @ g.T
    w = np.full(t, 1.0 / t)
    for _ in range(iterations):
        grad = 2.0 * gram @ w
        s = int(np.argmin(grad))
        gap = float(w @ grad - grad[s])
        if gap < gap_tol:
            break
        d = -w
        d[s] += 1.0
        denom = float(d @ gram @ d)
        if denom <= 0:
            break
        step = float(np.clip(-(d @ gram @ w) / denom, 0.0, 1.0))
        if step <= 0:
            break
        w = w + step * d
    w = np.clip(w, 0.0, None)
    return w / w.sum()


@dataclass
class CentralDirConfig:
    alpha: float = 0.3           # tension sensitivity
    window: int = 50             # gradient-norm history length T

    def __post_init__(self):
        if self.alpha < 0 or self.window < 1:
            raise ValueError("alpha must be >= 0 and window >= 1")


@dataclass
class CentralDirState:
    config: CentralDirConfig
    history: list = None         # one deque of recent raw norms per task

    def ensure(self, n_tasks):
        if self.history is None:
            self.history = [deque(maxlen=self.config.window) for _ in range(n_tasks)]

    def snapshot(self):
        return [list(h) for h in (self.history or [])]

    def restore(self, snap):
        self.history = [deque(h, maxlen=self.config.window) for h in snap]


@dataclass
class CentralDirResult:
    weights: Array               # simplex weights over all tasks (0 if excluded)
    direction: Array             # combined gradient, rescaled to mean raw norm
    tension: Array
    degenerate: bool = False
    excluded: int = 0


def central_dir_combine(task_gradients, state: CentralDirState) -> CentralDirResult:
    """Min-norm convex combination of the normalized task gradients, pulled
    toward tasks whose current gradient norm exceeds the mean of their
    recent window, then rescaled to the mean raw norm."""
    grads = [np.asarray(g, dtype=np.float64).ravel() for g in task_gradients]
    t = len(grads)
    if t < 2:
        raise ValueError("central direction needs >= 2 tasks")
    if len({len(g) for g in grads}) != 1:
        raise ValueError("task gradient lengths differ")
    state.ensure(t)
    norms = np.array([np.linalg.norm(g) for g in grads])
    active = norms > 0
    excluded = int((~active).sum())
    weights = np.zeros(t)
    tension = np.ones(t)
    if active.sum() == 0:
        return CentralDirResult(weights, np.zeros_like(grads[0]), tension,
                                degenerate=True, excluded=excluded)
    unit = np.stack([grads[i] / norms[i] if active[i] else np.zeros_like(grads[i])
                     for i in range(t)])
    act_idx = np.nonzero(active)[0]
    w_act = min_norm_weights(unit[act_idx])
    degenerate = False
    combo = w_act @ unit[act_idx]
    if np.linalg.norm(combo) < 1e-9:
        w_act = np.full(len(act_idx), 1.0 / len(act_idx))
        degenerate = True
    weights[act_idx] = w_act
    for i in act_idx:
        hist = state.history[i]
        if len(hist):
            ratio = norms[i] / max(np.mean(hist), 1e-30)
            tension[i] = 1.0 + state.config.alpha * max(0.0, ratio - 1.0)
    weights = weights * tension
    weights = weights / weights.sum()
    direction = weights[act_idx] @ unit[act_idx]
    scale = norms[act_idx].mean()
    dnorm = np.linalg.norm(direction)
    if dnorm > 1e-30:
        direction = direction * (scale / dnorm)
    for i in act_idx:
        state.history[i].append(norms[i])
    return CentralDirResult(weights, direction, tension,
                            degenerate=degenerate, excluded=excluded)
