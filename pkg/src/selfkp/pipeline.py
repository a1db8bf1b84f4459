"""Three-stage training orchestration: detector-only pretraining on
synthetic shapes, pseudo-label extraction by homographic adaptation, and
joint detector/descriptor(/semantic) training with one of three
multi-task combination strategies.

All stages are bit-deterministic given their config: every source of
randomness draws from its own named stream spawned from the run seed, so
e.g. the semantic head never perturbs the batch or homography draws.
"""

from __future__ import annotations

import json
import pickle
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evaluation as ev
from . import losses
from . import model as mdl
from . import synthdata as sd
from .geometry import Homography, HomographySampleConfig, nms, sample_homography, \
    warp_image, warp_mask_nearest, warp_points
from .model import CELL

Array = np.ndarray

STREAMS = ("init", "batch", "homography", "photometric", "negatives", "validation")


class NumericFailure(RuntimeError):
    """Raised when a non-finite value aborts training; carries the path of
    the last checkpoint that was written."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# ---------------------------------------------------------------------------
# Optimizer and schedule
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, tensors):
        st = cls()
        for name, t in tensors.items():
            st.m[name] = np.zeros_like(t.data)
            st.v[name] = np.zeros_like(t.data)
        return st


def adam_step(tensors, state: AdamState, lr: float):
    """Standard Adam with bias correction. If any gradient is non-finite
    the whole step is skipped (returns False); missing gradients leave
    their parameter untouched."""
    grads = {}
    for name, t in tensors.items():
        if t.grad is None:
            continue
        if not np.isfinite(t.grad).all():
            return False
        grads[name] = t.grad
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        g = g.astype(np.float32, copy=False)
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        t = tensors[name]
        t.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(t.data.dtype)
    return True


@dataclass
class LrSchedule:
    kind: str = "poly"           # "fixed" | "poly"
    start: float = 0.0025
    end: float = 0.001
    power: float = 1.0
    total: int = 1

    def __post_init__(self):
        if self.kind not in ("fixed", "poly"):
            raise ValueError(f"unknown lr schedule {self.kind!r}")
        if self.kind == "poly" and not self.start >= self.end > 0:
            raise ValueError("polynomial schedule requires start >= end > 0")


def lr_at(iteration: int, schedule: LrSchedule) -> float:
    if schedule.kind == "fixed":
        return schedule.start
    t = min(iteration, schedule.total)
    return schedule.end + (schedule.start - schedule.end) * \
        (1.0 - t / schedule.total) ** schedule.power


# ---------------------------------------------------------------------------
# Configs
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    stage: str = "joint"                 # "pretrain" | "joint"
    iterations: int = 10_000
    batch_size: int = 16
    lr_kind: str = "poly"
    lr_start: float = 0.0025
    lr_end: float = 0.001
    lr_power: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 500
    strategy: str = "uni"                # "uni" | "unc" | "ct"
    model: mdl.ModelConfig = field(default_factory=mdl.ModelConfig.desk)
    detector_form: str = "bce"
    hinge: losses.HingeConfig = field(default_factory=losses.HingeConfig)
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    eta_init: tuple = (1.0, 2.0, 1.0)
    ct: losses.CentralDirConfig = field(default_factory=losses.CentralDirConfig)
    val_pairs: int = 6
    homography: HomographySampleConfig = None
    photometric: sd.PhotometricConfig = field(default_factory=sd.PhotometricConfig)
    scene: sd.SceneConfig = field(default_factory=sd.SceneConfig)

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iteration count must be > 0")
        if self.strategy not in ("uni", "unc", "ct"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.homography is None:
            self.homography = HomographySampleConfig(image_shape=self.scene.image_shape)

    def schedule(self):
        return LrSchedule(self.lr_kind, self.lr_start, self.lr_end,
                          self.lr_power, self.iterations)


@dataclass
class AdaptationConfig:
    n_h: int = 100
    threshold: float = 0.015
    nms_radius: int = 4
    top_k: int = 300
    homography: HomographySampleConfig = None

    def __post_init__(self):
        if self.n_h < 1:
            raise ValueError("n_h must be >= 1")

    @classmethod
    def desk(cls, image_shape=(120, 160)):
        return cls(n_h=10, homography=HomographySampleConfig(image_shape=image_shape))


# ---------------------------------------------------------------------------
# Run-directory plumbing
# ---------------------------------------------------------------------------

def _rng_streams(seed: int):
    root = np.random.SeedSequence(seed)
    children = root.spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


def _prepare_run_dir(run_dir, fresh=True):
    run_dir = Path(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "labels").mkdir(exist_ok=True)
    (run_dir / "logs").mkdir(exist_ok=True)
    log = run_dir / "logs" / "metrics.jsonl"
    if fresh and log.exists():
        log.unlink()
    return run_dir


def _log_metrics(run_dir, record):
    with open(run_dir / "logs" / "metrics.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _save_state(path, iteration, adam, rngs, eta=None, ct_state=None):
    blob = {"iteration": iteration, "adam": adam,
            "rng": {k: r.bit_generator.state for k, r in rngs.items()}}
    if eta is not None:
        blob["eta"] = eta.values()
    if ct_state is not None:
        blob["ct_history"] = ct_state.snapshot()
    with open(path, "wb") as fh:
        pickle.dump(blob, fh)


def _load_state(path, rngs, eta=None, ct_state=None):
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    for k, st in blob["rng"].items():
        rngs[k].bit_generator.state = st
    if eta is not None and "eta" in blob:
        for name, value in blob["eta"].items():
            getattr(eta, name).data[...] = value
    if ct_state is not None and "ct_history" in blob:
        ct_state.restore(blob["ct_history"])
    return blob["iteration"], blob["adam"]


def _validation_pairs(config: TrainConfig, rngs):
    # held-out seed drawn from the validation stream, disjoint from data seeds
    val_seed = int(rngs["validation"].integers(1 << 31, 1 << 32))
    return ev.make_eval_set(config.scene, config.val_pairs, seed=val_seed)


def select_best(entries):
    """entries: list of (path, metrics dict). Highest matching score wins;
    ties go to higher repeatability, then lower localization error; stable
    input order after that."""
    if not entries:
        raise ValueError("select_best needs at least one checkpoint")

    def key(e):
        m = e[1]
        ms = m.get("matching_score")
        rep = m.get("repeatability")
        loc = m.get("mle")
        return (-(ms if ms is not None else -1.0),
                -(rep if rep is not None else -1.0),
                loc if loc is not None else float("inf"))

    return min(entries, key=key)


# ---------------------------------------------------------------------------
# Stage 1: detector-only pretraining
# ---------------------------------------------------------------------------

def _augment_item(sample: sd.ImageSample, config: TrainConfig, rngs):
    H = sample_homography(config.homography, rngs["homography"])
    warped = sample.copy()
    warped.image = warp_image(sample.image, H).astype(np.float32)
    kps, _ = warp_points(sample.keypoints, H)
    h, w = sample.image.shape
    keep = (kps.rows >= 0) & (kps.rows <= h - 1) & (kps.cols >= 0) & (kps.cols <= w - 1)
    warped.keypoints = kps.select(keep)
    warped.mask = warp_mask_nearest(sample.mask, H)
    return sd.photometric_augment(warped, rngs["photometric"], config.photometric)


def pretrain_detector(config: TrainConfig, dataset, run_dir,
                        resume_state=None, params=None):
    """Trains encoder + detector head on labeled synthetic shapes; saves
    periodic checkpoints and returns the path of the one with the best
    validation repeatability."""
    run_dir = _prepare_run_dir(run_dir, fresh=resume_state is None)
    if not dataset:
        raise ValueError("pretrain needs a non-empty dataset")
    rngs = _rng_streams(config.seed)
    if params is None:
        params = mdl.init_params(config.model, rngs["init"])
    val_set = _validation_pairs(config, rngs)
    trainable = {k: v for k, v in params.tensors.items()
                 if k.startswith("enc.") or k.startswith("det.")}
    adam = AdamState.create(trainable)
    start = 0
    if resume_state is not None:
        start, adam = _load_state(resume_state, rngs)
    schedule = config.schedule()
    eval_cfg = ev.EvalConfig()
    checkpoints = []
    last_ckpt = None
    skipped_steps = 0
    for it in range(start, config.iterations):
        idx = rngs["batch"].integers(0, len(dataset), size=config.batch_size)
        items = [_augment_item(dataset[i], config, rngs) for i in idx]
        images = np.stack([s.image for s in items])[..., None]
        targets = losses.cell_targets([s.keypoints for s in items],
                                      items[0].image.shape)
        feats = mdl.encoder_forward(images, params, mode="train")
        logits = mdl.detector_head(feats, params, mode="train")
        loss = losses.detector_loss(logits, targets, form=config.detector_form)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericFailure(f"non-finite loss at iteration {it}", last_ckpt)
        params.zero_grad()
        ad.backward(loss)
        if not adam_step(trainable, adam, lr_at(it, schedule)):
            skipped_steps += 1
        done = it + 1
        if done % config.checkpoint_interval == 0 or done == config.iterations:
            ckpt = run_dir / "checkpoints" / f"iter_{done}.sspc"
            if not ckpt.exists():
                mdl.save_checkpoint(params, ckpt)
                _save_state(ckpt.with_suffix(".state"), done, adam, rngs)
            report = ev.evaluate_model(params, val_set, eval_cfg)
            record = {"iteration": done, "loss": loss_val,
                      "skipped_steps": skipped_steps, **report.means}
            _log_metrics(run_dir, record)
            checkpoints.append((ckpt, report.means))
            last_ckpt = ckpt
    best = max(checkpoints,
               key=lambda e: (e[1]["repeatability"] if e[1]["repeatability"]
                              is not None else -1.0))[0]
    best_path = run_dir / "checkpoints" / "best.sspc"
    shutil.copyfile(best, best_path)
    return best_path


# ---------------------------------------------------------------------------
# Stage 2: homographic adaptation labeling
# ---------------------------------------------------------------------------

def _detector_heatmap(params, image):
    x = image[None, :, :, None].astype(np.float32)
    feats = mdl.encoder_forward(x, params, mode="eval")
    return mdl.extract_heatmap(mdl.detector_head(feats, params, mode="eval"))[0]


def homographic_adaptation_label(params: mdl.ModelParams, samples,
                                 config: AdaptationConfig, seed=0):
    """For each image: average detector heatmaps over the identity plus
    n_h - 1 sampled homographies (each response warped back through the
    inverse, with per-pixel validity counting), then threshold + NMS.

    Returns new ImageSamples carrying the pseudo-labels; semantic masks
    are kept as-is. With n_h = 1 the result equals single-pass detection.
    """
    if config.homography is None:
        shape = samples[0].image.shape if samples else (120, 160)
        config.homography = HomographySampleConfig(image_shape=shape)
    out = []
    for i, sample in enumerate(samples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        acc = _detector_heatmap(params, sample.image).astype(np.float64)
        count = np.ones_like(acc)
        ones = np.ones(sample.image.shape, dtype=np.uint8)
        for _ in range(config.n_h - 1):
            H = sample_homography(config.homography, rng)
            heat = _detector_heatmap(params, warp_image(sample.image, H))
            back = warp_image(heat.astype(np.float64), H.inverse())
            valid = warp_mask_nearest(ones, H.inverse()).astype(np.float64)
            acc += back * valid
            count += valid
        avg = acc / count
        labeled = sample.copy()
        labeled.keypoints = nms(avg, config.nms_radius, config.threshold, config.top_k)
        out.append(labeled)
    return out


# ---------------------------------------------------------------------------
# Stage 3: joint training
# ---------------------------------------------------------------------------

def _flatten_grads(tensors, names):
    return np.concatenate([tensors[n].grad.ravel() if tensors[n].grad is not None
                           else np.zeros(tensors[n].data.size)
                           for n in names]).astype(np.float64)


def _assign_grads(tensors, names, flat):
    pos = 0
    for n in names:
        t = tensors[n]
        size = t.data.size
        t.grad = flat[pos:pos + size].reshape(t.data.shape).astype(np.float32)
        pos += size


def _zero_named_grads(tensors, names):
    for n in names:
        tensors[n].grad = None


def joint_train(config: TrainConfig, dataset, run_dir, init_checkpoint=None,
                resume_state=None):
    """Joint detector/descriptor(/semantic) training from pseudo-labels.

    Each iteration samples a batch, draws one homography per item to build
    the warped view, evaluates both views, and combines the task losses by
    the configured strategy: "uni" plain sum, "unc" learned uncertainty
    weighting (eta joins the Adam parameters), "ct" min-norm central
    direction over the shared-encoder task gradients (head gradients pass
    through unchanged). Returns the best checkpoint by matching score.
    """
    run_dir = _prepare_run_dir(run_dir, fresh=resume_state is None)
    if not dataset:
        raise ValueError("joint training needs a non-empty dataset")
    rngs = _rng_streams(config.seed)
    if init_checkpoint is not None:
        params = mdl.load_checkpoint(init_checkpoint)
        if params.config.with_semantic != config.model.with_semantic:
            raise ValueError("checkpoint semantic-head flag does not match config")
    else:
        params = mdl.init_params(config.model, rngs["init"])
    semantic = config.model.with_semantic
    val_set = _validation_pairs(config, rngs)
    eta = losses.UncertaintyParams.create(config.eta_init)
    ct_state = losses.CentralDirState(config.ct)
    trainable = dict(params.tensors)
    if config.strategy == "unc":
        trainable.update(eta.tensors())
    adam = AdamState.create(trainable)
    start = 0
    if resume_state is not None:
        start, adam = _load_state(resume_state, rngs, eta=eta, ct_state=ct_state)
    schedule = config.schedule()
    eval_cfg = ev.EvalConfig()
    enc_names = sorted(params.encoder_names())
    grid = (config.scene.image_shape[0] // CELL, config.scene.image_shape[1] // CELL)
    checkpoints = []
    last_ckpt = None
    for it in range(start, config.iterations):
        idx = rngs["batch"].integers(0, len(dataset), size=config.batch_size)
        img1, img2, kps1, kps2, masks1, masks2, corrs = [], [], [], [], [], [], []
        for i in idx:
            sample = dataset[i]
            H = sample_homography(config.homography, rngs["homography"])
            warped_img = warp_image(sample.image, H).astype(np.float32)
            wkps, _ = warp_points(sample.keypoints, H)
            h, w = sample.image.shape
            keep = (wkps.rows >= 0) & (wkps.rows <= h - 1) & \
                   (wkps.cols >= 0) & (wkps.cols <= w - 1)
            a = sd.photometric_augment(sample, rngs["photometric"], config.photometric)
            b = sample.copy()
            b.image = warped_img
            b = sd.photometric_augment(b, rngs["photometric"], config.photometric)
            img1.append(a.image)
            img2.append(b.image)
            kps1.append(sample.keypoints)
            kps2.append(wkps.select(keep))
            if semantic:
                masks1.append(losses.majority_downsample(sample.mask))
                masks2.append(losses.majority_downsample(warp_mask_nearest(sample.mask, H)))
            corrs.append(losses.build_correspondences(H, grid, rngs["negatives"]))
        x1 = np.stack(img1)[..., None]
        x2 = np.stack(img2)[..., None]
        shape = img1[0].shape
        t1 = losses.cell_targets(kps1, shape)
        t2 = losses.cell_targets(kps2, shape)
        f1 = mdl.encoder_forward(x1, params, mode="train")
        f2 = mdl.encoder_forward(x2, params, mode="train")
        l_d1 = losses.detector_loss(mdl.detector_head(f1, params), t1, config.detector_form)
        l_d2 = losses.detector_loss(mdl.detector_head(f2, params), t2, config.detector_form)
        l_desc, l_p, l_n = losses.descriptor_loss(
            mdl.descriptor_head(f1, params), mdl.descriptor_head(f2, params),
            corrs, config.hinge)
        l_s1 = l_s2 = None
        if semantic:
            m1 = np.stack(masks1)
            m2 = np.stack(masks2)
            l_s1 = losses.semantic_loss(mdl.semantic_head(f1, params), m1)
            l_s2 = losses.semantic_loss(mdl.semantic_head(f2, params), m2)
        record = {"iteration": it + 1, "l_d1": l_d1.item(), "l_d2": l_d2.item(),
                  "l_desc": l_desc.item(), "l_p": l_p, "l_n": l_n}
        if semantic:
            record["l_s1"] = l_s1.item()
            record["l_s2"] = l_s2.item()
        if not all(np.isfinite(v) for v in record.values() if isinstance(v, float)):
            raise NumericFailure(f"non-finite loss at iteration {it}", last_ckpt)
        params.zero_grad()
        ct_result = None
        if config.strategy == "uni":
            total = losses.uniform_total(l_d1, l_d2, l_desc, l_s1, l_s2, config.weights)
            ad.backward(total)
            record["total"] = total.item()
        elif config.strategy == "unc":
            for t in eta.tensors().values():
                t.zero_grad()
            total = losses.uncertainty_total(l_d1, l_d2, l_desc, eta, l_s1, l_s2)
            ad.backward(total)
            record["total"] = total.item()
            record["eta"] = eta.values()
            if not eta.all_finite():
                raise NumericFailure(f"non-finite eta at iteration {it}", last_ckpt)
        else:
            roots = [ad.add(l_d1, l_d2), l_desc]
            if semantic:
                roots.append(ad.add(l_s1, l_s2))
            task_grads = []
            for j, root in enumerate(roots):
                ad.backward(root, free=(j == len(roots) - 1))
                task_grads.append(_flatten_grads(params.tensors, enc_names))
                _zero_named_grads(params.tensors, enc_names)
            ct_result = losses.central_dir_combine(task_grads, ct_state)
            _assign_grads(params.tensors, enc_names, ct_result.direction)
            record["total"] = sum(r.item() for r in roots)
            record["ct_weights"] = ct_result.weights.tolist()
        stepped = adam_step(trainable, adam, lr_at(it, schedule))
        if not stepped:
            raise NumericFailure(f"non-finite gradient at iteration {it}", last_ckpt)
        done = it + 1
        if done % config.checkpoint_interval == 0 or done == config.iterations:
            ckpt = run_dir / "checkpoints" / f"iter_{done}.sspc"
            if not ckpt.exists():
                mdl.save_checkpoint(params, ckpt)
                _save_state(ckpt.with_suffix(".state"), done, adam, rngs,
                            eta=eta, ct_state=ct_state)
            report = ev.evaluate_model(params, val_set, eval_cfg)
            record.update(report.means)
            _log_metrics(run_dir, record)
            checkpoints.append((ckpt, report.means))
            last_ckpt = ckpt
    best, _ = select_best(checkpoints)
    best_path = run_dir / "checkpoints" / "best.sspc"
    shutil.copyfile(best, best_path)
    return best_path
