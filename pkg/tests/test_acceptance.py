"""End-to-end acceptance checks for the full system, numbered 1-11.

The fast criteria run with the default test invocation; the two long
training criteria (8 and 9) are marked "slow" and can be included with
``pytest -m slow`` or ``pytest -m ""``.
"""

import itertools
import json
import time
from pathlib import Path

import numpy as np
import pytest

from selfkp import autodiff as ad
from selfkp import cli
from selfkp import evaluation as ev
from selfkp import losses
from selfkp import model as mdl
from selfkp import pipeline as pl
from selfkp import synthdata as sd
from selfkp.geometry import (Homography, HomographySampleConfig, KeypointSet,
                             dlt_homography, nms, warp_points)


# ---------------------------------------------------------------------------
# 1. Gradient correctness of the full loss composition
# ---------------------------------------------------------------------------

def _composite_loss_case(seed):
    """A miniature two-view network exercising every primitive on the
    training path: conv, batchnorm, relu, maxpool, softmax/log (detector),
    l2-normalize/dot/hinge (descriptor), cross-entropy (semantic), and the
    exp/affine mixing of the uncertainty combination."""
    rng = np.random.default_rng(seed)

    def t(shape, scale=0.5):
        return ad.Tensor(rng.normal(0, scale, size=shape), requires_grad=True,
                         dtype=np.float64)

    params = [t((3, 3, 1, 2)), t((2,)),              # stage 1 conv
              t((3, 3, 2, 2)), t((2,), 0.2), t((2,), 0.2),   # stage 2 + bn
              t((3, 3, 2, 2)),                        # stage 3 conv
              t((1, 1, 2, 65)), t((65,)),             # detector head
              t((1, 1, 2, 4)),                        # descriptor head
              t((1, 1, 2, 3))]                        # semantic head
    eta = losses.UncertaintyParams.create(
        tuple(rng.normal(0, 0.3, size=3)), dtype=np.float64)
    params += list(eta.tensors().values())

    x1 = rng.random((1, 16, 16, 1))
    x2 = rng.random((1, 16, 16, 1))
    kps = [KeypointSet(rng.uniform(0, 15, 3), rng.uniform(0, 15, 3), np.ones(3))]
    targets1 = losses.cell_targets(kps, (16, 16))
    targets2 = losses.cell_targets([k.topk(2) for k in kps], (16, 16))
    corr = losses.CorrespondenceSet((2, 2), np.array([[0, 0], [3, 3]]),
                                    np.array([[0, 2], [1, 3], [2, 0]]))
    mask = rng.integers(0, 3, size=(1, 2, 2))

    def f(ps):
        w1, b1, w2, g2, be2, w3, dw, db, cw, sw = ps[:10]

        def encode(x):
            h = ad.maxpool2(ad.relu(ad.conv2d(x, w1, b1)))
            h = ad.conv2d(h, w2)
            h = ad.relu(ad.batchnorm(h, g2, be2, ad.BatchNormState.create(
                2, dtype=np.float64)))
            h = ad.maxpool2(h)
            return ad.maxpool2(ad.relu(ad.conv2d(h, w3)))

        f1, f2 = encode(ad.Tensor(x1, dtype=np.float64)), \
            encode(ad.Tensor(x2, dtype=np.float64))
        l_d1 = losses.detector_loss(ad.conv2d(f1, dw, db), targets1)
        l_d2 = losses.detector_loss(ad.conv2d(f2, dw, db), targets2)
        l_desc, _, _ = losses.descriptor_loss(ad.conv2d(f1, cw),
                                              ad.conv2d(f2, cw), [corr])
        l_s1 = losses.semantic_loss(ad.conv2d(f1, sw), mask)
        l_s2 = losses.semantic_loss(ad.conv2d(f2, sw), mask)
        return losses.uncertainty_total(l_d1, l_d2, l_desc, eta, l_s1, l_s2)

    return f, params


class TestCriterion1Gradients:
    def test_full_composition_over_ten_seeds_under_two_minutes(self):
        t0 = time.monotonic()
        worst = 0.0
        for seed in range(10):
            f, params = _composite_loss_case(seed)
            report = ad.finite_diff_check(f, params, tolerance=1e-4)
            assert report.passed, \
                f"seed {seed}: max relative error {report.max_rel_err:.2e}"
            worst = max(worst, report.max_rel_err)
        elapsed = time.monotonic() - t0
        assert worst < 1e-4
        assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. Uncertainty-combination identities
# ---------------------------------------------------------------------------

class TestCriterion2Uncertainty:
    def _unit_losses(self):
        return [ad.Tensor(np.float64(1.0), dtype=np.float64) for _ in range(5)]

    def test_zero_eta_gives_four_and_a_half(self):
        eta = losses.UncertaintyParams.create((0.0, 0.0, 0.0), dtype=np.float64)
        total = losses.uncertainty_total(*self._unit_losses()[:3], eta,
                                         *self._unit_losses()[:2])
        assert total.item() == pytest.approx(4.5, abs=1e-12)

    def test_default_eta_closed_form(self):
        eta = losses.UncertaintyParams.create((1.0, 2.0, 1.0), dtype=np.float64)
        total = losses.uncertainty_total(*self._unit_losses()[:3], eta,
                                         *self._unit_losses()[:2])
        expect = 2 * np.e + np.e ** 2 / 2 + 2 * np.e + 1 + 2 / 2 + 1
        assert total.item() == pytest.approx(expect, rel=1e-12)
        assert total.item() == pytest.approx(17.56765536, abs=1e-6)

    def test_detector_eta_derivative(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            vals = rng.uniform(0.1, 2.0, size=5)
            etas = rng.normal(0, 1, size=3)
            ls = [ad.Tensor(v, dtype=np.float64) for v in vals]
            eta = losses.UncertaintyParams.create(tuple(etas), dtype=np.float64)
            total = losses.uncertainty_total(ls[0], ls[1], ls[2], eta,
                                             ls[3], ls[4])
            for t in eta.tensors().values():
                t.zero_grad()
            ad.backward(total)
            expect = (vals[0] + vals[1]) * np.exp(etas[0]) + 1.0
            assert eta.eta_d.grad.reshape(-1)[0] == pytest.approx(expect, rel=1e-10)


# ---------------------------------------------------------------------------
# 3. Hinge-loss closed forms
# ---------------------------------------------------------------------------

class TestCriterion3Hinge:
    def _coarse(self, rows):
        """1x1xKxD coarse grid from a list of descriptor rows (cells)."""
        arr = np.asarray(rows, dtype=np.float64)
        k, d = arr.shape
        return ad.Tensor(arr.reshape(1, 1, k, d), dtype=np.float64)

    def test_identical_positive_pairs_zero(self):
        c = self._coarse(np.eye(4))
        corr = losses.CorrespondenceSet((1, 4),
                                        np.stack([np.arange(4)] * 2, axis=1),
                                        np.zeros((0, 2), dtype=int))
        _, l_p, l_n = losses.descriptor_loss(c, c, [corr])
        assert l_p == pytest.approx(0.0, abs=1e-12)
        assert l_n == 0.0

    def test_orthogonal_positive_pairs_cost_margin(self):
        c1 = self._coarse([[1, 0, 0, 0], [0, 1, 0, 0]])
        c2 = self._coarse([[0, 0, 1, 0], [0, 0, 0, 1]])
        corr = losses.CorrespondenceSet((1, 2), np.array([[0, 0], [1, 1]]),
                                        np.zeros((0, 2), dtype=int))
        _, l_p, _ = losses.descriptor_loss(c1, c2, [corr])
        assert l_p == pytest.approx(1.0, abs=1e-12)   # m_p = 1, similarity 0

    def test_identical_negative_pairs_cost_excess(self):
        c = self._coarse(np.eye(3))
        corr = losses.CorrespondenceSet((1, 3), np.zeros((0, 2), dtype=int),
                                        np.stack([np.arange(3)] * 2, axis=1))
        _, _, l_n = losses.descriptor_loss(c, c, [corr])
        assert l_n == pytest.approx(0.8, abs=1e-12)   # similarity 1, m_n = 0.2


# ---------------------------------------------------------------------------
# 4. Central-direction combination
# ---------------------------------------------------------------------------

def _grid_oracle_min_norm(units, steps=400):
    """Brute-force simplex search for the minimum-norm convex combination."""
    t = len(units)
    best_w, best_norm = None, np.inf
    fracs = np.linspace(0, 1, steps + 1)
    if t == 2:
        combos = ([a, 1 - a] for a in fracs)
    else:
        combos = ([a, b, 1 - a - b] for a, b in
                  itertools.product(fracs, fracs) if a + b <= 1 + 1e-12)
    for w in combos:
        w = np.asarray(w)
        norm = np.linalg.norm(w @ units)
        if norm < best_norm:
            best_norm, best_w = norm, w
    return best_w, best_norm


class TestCriterion4CentralDirection:
    def test_two_orthogonal_tasks_split_evenly(self):
        units = np.eye(8)[:2]
        w = losses.min_norm_weights(units)
        oracle_w, oracle_norm = _grid_oracle_min_norm(units)
        assert np.allclose(w, [0.5, 0.5], atol=1e-6)
        assert np.allclose(w, oracle_w, atol=1e-2)
        assert np.linalg.norm(w @ units) <= oracle_norm + 1e-9

    def test_three_orthogonal_tasks_split_evenly(self):
        units = np.eye(8)[:3]
        w = losses.min_norm_weights(units)
        oracle_w, oracle_norm = _grid_oracle_min_norm(units, steps=120)
        assert np.allclose(w, [1 / 3] * 3, atol=1e-6)
        assert np.allclose(w, oracle_w, atol=1e-2)
        assert np.linalg.norm(w @ units) <= oracle_norm + 1e-9

    def test_random_case_beats_grid_oracle(self):
        rng = np.random.default_rng(3)
        g = rng.normal(size=(3, 16))
        units = g / np.linalg.norm(g, axis=1, keepdims=True)
        w = losses.min_norm_weights(units)
        _, oracle_norm = _grid_oracle_min_norm(units, steps=120)
        assert np.linalg.norm(w @ units) <= oracle_norm + 1e-6

    def test_direction_never_opposes_any_task(self):
        rng = np.random.default_rng(4)
        state = losses.CentralDirState(losses.CentralDirConfig())
        for _ in range(25):
            grads = rng.normal(size=(3, 32)) * rng.uniform(0.1, 5.0, (3, 1))
            result = losses.central_dir_combine(list(grads), state)
            for g in grads:
                assert result.direction @ g >= -1e-9

    def test_tension_raises_weight_of_spiking_task(self):
        cfg = losses.CentralDirConfig(alpha=0.3, window=50)
        base = [np.array([1.0, 0.0]), np.array([0.0, 1.0])]
        calm = losses.central_dir_combine(
            base, losses.CentralDirState(cfg)).weights
        state = losses.CentralDirState(cfg)
        for _ in range(10):
            losses.central_dir_combine(base, state)
        spike = losses.central_dir_combine(
            [base[0] * 5.0, base[1]], state)
        assert np.allclose(calm, [0.5, 0.5], atol=1e-9)
        assert spike.weights[0] > calm[0]
        assert spike.tension[0] > 1.0 and spike.tension[1] == 1.0


# ---------------------------------------------------------------------------
# 5. Projective geometry
# ---------------------------------------------------------------------------

class TestCriterion5Geometry:
    def test_homography_recovery(self):
        rng = np.random.default_rng(0)
        cfg = HomographySampleConfig(image_shape=(120, 160))
        from selfkp.geometry import sample_homography
        for _ in range(10):
            H = sample_homography(cfg, rng)
            src = rng.uniform(10, 110, size=(12, 2))
            dst, _ = H.apply_xy(src)
            est = dlt_homography(src, dst)
            assert np.allclose(est.matrix / est.matrix[2, 2],
                               H.matrix / H.matrix[2, 2], atol=1e-6)

    def test_point_warp_round_trip(self):
        rng = np.random.default_rng(1)
        cfg = HomographySampleConfig(image_shape=(120, 160))
        from selfkp.geometry import sample_homography
        for _ in range(10):
            H = sample_homography(cfg, rng)
            kps = KeypointSet(rng.uniform(0, 119, 20), rng.uniform(0, 159, 20),
                              np.ones(20))
            fwd, _ = warp_points(kps, H)
            back, _ = warp_points(fwd, H.inverse())
            assert np.abs(back.rows - kps.rows).max() < 1e-9
            assert np.abs(back.cols - kps.cols).max() < 1e-9

    def test_nms_spacing(self):
        rng = np.random.default_rng(2)
        heat = rng.random((120, 160))
        kps = nms(heat, radius=4, threshold=0.0, top_k=300)
        assert len(kps) > 0
        dr = np.abs(kps.rows[:, None] - kps.rows[None, :])
        dc = np.abs(kps.cols[:, None] - kps.cols[None, :])
        cheb = np.maximum(dr, dc) + np.eye(len(kps)) * 1e9
        assert cheb.min() > 4


# ---------------------------------------------------------------------------
# 6. Identity-pair evaluation is exact
# ---------------------------------------------------------------------------

class TestCriterion6IdentityEvaluation:
    def test_identity_pair_metrics(self, desk_model, scene_sample):
        pair = ev.EvalPair(scene_sample.image, scene_sample.image.copy(),
                           Homography.identity())
        report = ev.evaluate_model(desk_model, [pair])
        r = report.per_pair[0]
        assert r["repeatability"] == 1.0
        assert r["mle"] == 0.0
        assert r["matching_score"] == 1.0


# ---------------------------------------------------------------------------
# 7. Homographic-adaptation degeneracies
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def adaptation_setup():
    config = mdl.ModelConfig(c_enc=8, descriptor_dim=8, num_classes=5,
                             widths=(4, 4, 8, 8), head_hidden=8)
    params = mdl.init_params(config, np.random.default_rng(2))
    scene = sd.SceneConfig(image_shape=(48, 64), primitive_count=(2, 4))
    samples = sd.make_dataset(scene, 3, seed=6)
    return params, samples


class TestCriterion7AdaptationDegeneracy:

    def test_single_homography_is_direct_detection(self, adaptation_setup):
        params, samples = adaptation_setup
        cfg = pl.AdaptationConfig(n_h=1,
                                  homography=HomographySampleConfig((48, 64)))
        labeled = pl.homographic_adaptation_label(params, samples, cfg)
        for src, out in zip(samples, labeled):
            direct = nms(pl._detector_heatmap(params, src.image),
                         cfg.nms_radius, cfg.threshold, cfg.top_k)
            assert np.array_equal(out.keypoints.rows, direct.rows)
            assert np.array_equal(out.keypoints.cols, direct.cols)
            assert np.array_equal(out.keypoints.scores, direct.scores)

    def test_identity_homographies_change_nothing(self, adaptation_setup, monkeypatch):
        params, samples = adaptation_setup
        monkeypatch.setattr(pl, "sample_homography",
                            lambda cfg, rng: Homography.identity())
        cfg1 = pl.AdaptationConfig(n_h=1,
                                   homography=HomographySampleConfig((48, 64)))
        cfg3 = pl.AdaptationConfig(n_h=3,
                                   homography=HomographySampleConfig((48, 64)))
        one = pl.homographic_adaptation_label(params, samples, cfg1)
        three = pl.homographic_adaptation_label(params, samples, cfg3)
        for a, b in zip(one, three):
            assert np.array_equal(a.keypoints.rows, b.keypoints.rows)
            assert np.array_equal(a.keypoints.cols, b.keypoints.cols)
            assert np.array_equal(a.keypoints.scores, b.keypoints.scores)


# ---------------------------------------------------------------------------
# 8. Detector pretraining reaches useful repeatability (slow)
# ---------------------------------------------------------------------------

@pytest.mark.slow
class TestCriterion8Pretrain:
    def test_repeatability_after_pretraining(self, tmp_path):
        dataset = sd.make_dataset(sd.SceneConfig(), 2000, seed=0)
        config = pl.TrainConfig(stage="pretrain", iterations=5000,
                                batch_size=16, seed=0,
                                checkpoint_interval=1000)
        t0 = time.monotonic()
        best = pl.pretrain_detector(config, dataset, tmp_path / "run")
        elapsed = time.monotonic() - t0
        assert elapsed <= 1800.0, f"pretraining took {elapsed:.0f}s"
        params = mdl.load_checkpoint(best)
        pairs = ev.make_eval_set(sd.SceneConfig(), 20, seed=12345)
        report = ev.evaluate_model(params, pairs,
                                   ev.EvalConfig(eps_rep=3.0))
        assert report.means["repeatability"] >= 0.4, report.means


# ---------------------------------------------------------------------------
# 9. All six trained variants run end to end (slow)
# ---------------------------------------------------------------------------

SMOKE_INI = """\
[train]
iterations = 500
checkpoint_interval = 250
val_pairs = 4

[eval]
pairs = 4
"""


@pytest.mark.slow
class TestCriterion9PresetSmoke:
    @pytest.fixture(scope="class")
    def smoke_root(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("smoke")
        ini = root / "smoke.ini"
        ini.write_text(SMOKE_INI)
        data = root / "shapes.sspd"
        assert cli.main(["gen", "--config", str(ini), "--count", "200",
                         "--out", str(data)]) == 0
        return root, str(ini), data

    @pytest.mark.parametrize("preset", sorted(cli.PRESETS))
    def test_preset(self, preset, smoke_root):
        root, ini, data = smoke_root
        run_dir = root / preset
        assert cli.main(["train", "--config", ini, "--preset", preset,
                         "--data", str(data), "--out", str(run_dir)]) == 0
        best = run_dir / "checkpoints" / "best.sspc"
        assert best.exists()
        params = mdl.load_checkpoint(best)
        for name, t in params.tensors.items():
            assert np.isfinite(t.data).all(), name
        # every logged loss value is finite
        for line in (run_dir / "logs" / "metrics.jsonl").read_text().splitlines():
            for key, v in json.loads(line).items():
                if isinstance(v, float):
                    assert np.isfinite(v), (key, v)
        # sampled descriptors are unit length
        scene = sd.render_scene(sd.SceneConfig(), np.random.default_rng(3), seed=3)
        kps, desc, _ = ev.detect_and_describe(params, scene.image)
        if len(desc):
            assert np.allclose((desc ** 2).sum(axis=1), 1.0, atol=1e-6)
        # the central-direction presets warm-start from a half-length run
        if preset.endswith("-ct"):
            assert (run_dir / "warmup" / "checkpoints" / "iter_250.sspc").exists()
        else:
            assert not (run_dir / "warmup").exists()


# ---------------------------------------------------------------------------
# 10. Manifest reruns reproduce every output byte for byte
# ---------------------------------------------------------------------------

TINY_INI = """\
[model]
c_enc = 8
descriptor_dim = 8
widths = 4,4,8,8
head_hidden = 8

[scene]
height = 48
width = 64

[train]
iterations = 2
batch_size = 2
checkpoint_interval = 2
val_pairs = 2

[eval]
pairs = 2
"""


class TestCriterion10Determinism:
    def _rerun_from_manifest(self, manifest_path, new_out):
        manifest = json.loads(Path(manifest_path).read_text())
        argv = list(manifest["argv"])
        i = argv.index("--out")
        argv[i + 1] = str(new_out)
        assert cli.main(argv) == 0

    def test_manifest_reruns_byte_identical(self, tmp_path):
        ini = tmp_path / "tiny.ini"
        ini.write_text(TINY_INI)
        data = tmp_path / "d.sspd"
        assert cli.main(["gen", "--config", str(ini), "--count", "3",
                         "--seed", "4", "--out", str(data)]) == 0
        run_dir = tmp_path / "train"
        assert cli.main(["train", "--config", str(ini), "--data", str(data),
                         "--out", str(run_dir)]) == 0
        eval_dir = tmp_path / "eval"
        assert cli.main(["eval", "--config", str(ini), "--out", str(eval_dir),
                         str(run_dir / "checkpoints" / "best.sspc")]) == 0

        # dataset rerun
        self._rerun_from_manifest(tmp_path / "d.sspd.manifest.json",
                                  tmp_path / "d2.sspd")
        assert data.read_bytes() == (tmp_path / "d2.sspd").read_bytes()

        # training rerun: checkpoints and the metrics log
        run2 = tmp_path / "train2"
        self._rerun_from_manifest(run_dir / "manifest.json", run2)
        for rel in ("checkpoints/iter_2.sspc", "checkpoints/best.sspc",
                    "logs/metrics.jsonl"):
            assert (run_dir / rel).read_bytes() == (run2 / rel).read_bytes(), rel

        # evaluation rerun: reports and figures
        eval2 = tmp_path / "eval2"
        self._rerun_from_manifest(eval_dir / "manifest.json", eval2)
        for p in eval_dir.iterdir():
            if p.name == "manifest.json":
                continue       # timings differ by design
            assert p.read_bytes() == (eval2 / p.name).read_bytes(), p.name


# ---------------------------------------------------------------------------
# 11. Reference-scale configuration wiring
# ---------------------------------------------------------------------------

class TestCriterion11ReferenceScale:
    def _resolved(self):
        class Args:
            paper_scale = True

        return cli.resolve_config(Args())

    def test_training_hyperparameters(self):
        cfg = cli.build_train_config(self._resolved(), stage="joint")
        assert cfg.batch_size == 16
        assert cfg.weights.descriptor == 1.0
        assert cfg.hinge.m_p == 1.0 and cfg.hinge.m_n == 0.2
        assert cfg.eta_init == (1.0, 2.0, 1.0)
        assert cfg.ct.alpha == 0.3
        assert cfg.lr_kind == "poly"
        assert cfg.lr_start == 0.0025 and cfg.lr_end == 0.001
        assert cfg.iterations == 200000

    def test_model_and_scene(self):
        config = self._resolved()
        model = cli.build_model_config(config)
        assert model.c_enc == 256 and model.descriptor_dim == 256
        assert model.widths == (64, 64, 128, 128)
        assert model.head_hidden == 256
        scene = cli.build_scene_config(config)
        assert scene.image_shape == (240, 320)

    def test_adaptation_homography_count(self):
        adapt = cli.build_adaptation_config(self._resolved())
        assert adapt.n_h == 100
        assert adapt.threshold == 0.015
        assert adapt.homography.image_shape == (240, 320)
