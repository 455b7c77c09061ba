"""Unit tests for the evaluation toolkit.

Expected values come from independent references frozen here: closed
forms for PSNR/FID, an eigendecomposition oracle for the matrix square
root, scikit-image for SSIM, and brute-force crops for the masked path.
"""

import json

import numpy as np
import pytest
import torch
from scipy import ndimage

from penet import evalkit as ek
from penet.errors import NumericsError
from penet.losses import FeatureExtractor
from penet.synthdata import gen_corpus, read_corpus
from penet.trainer import TrainConfig, TrainData, Trainer


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("ek_corpus")
    gen_corpus(root / "c", n_signers=2, frames_per_signer=8,
               canvas=(64, 64), seed=0)
    frames, manifest = read_corpus(root / "c")
    return frames, manifest


@pytest.fixture(scope="module")
def estimator(corpus):
    frames, _ = corpus
    return ek.train_pose_estimator(frames, seed=0)


def rand_image(seed, h=32, w=32, c=3):
    return np.random.default_rng(seed).random((h, w, c))


# ---------------------------------------------------------------------------
# pixel_metrics


def test_identical_images_perfect():
    x = rand_image(0)
    ssim, psnr = ek.pixel_metrics(x, x)
    assert ssim == pytest.approx(1.0, abs=1e-12)
    assert psnr == 100.0


def test_psnr_closed_form_mse_001():
    x = np.zeros((16, 16, 3))
    ssim, psnr = ek.pixel_metrics(x, np.full_like(x, 0.1))
    assert psnr == pytest.approx(20.0, abs=1e-9)


def test_psnr_matches_formula_on_random_pair():
    x, y = rand_image(1), rand_image(2)
    _, psnr = ek.pixel_metrics(x, y)
    mse = np.mean((x - y) ** 2)
    assert psnr == pytest.approx(10.0 * np.log10(1.0 / mse), abs=1e-9)


def test_ssim_invariant_to_joint_intensity_shift():
    x = rand_image(3) * 0.8
    ssim, _ = ek.pixel_metrics(x + 0.1, x + 0.1)
    assert ssim == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_independent_reference():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(4)
    for seed in (5, 6):
        x = rand_image(seed, 48, 40)
        y = np.clip(x + rng.normal(scale=0.08, size=x.shape), 0.0, 1.0)
        mine, _ = ek.pixel_metrics(x, y)
        ref = structural_similarity(
            x, y, win_size=11, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, data_range=1.0, channel_axis=2)
        assert mine == pytest.approx(ref, abs=1e-10)


def test_ssim_bounded_and_ordered_by_noise():
    x = rand_image(7)
    rng = np.random.default_rng(8)
    noisy_small = np.clip(x + rng.normal(scale=0.05, size=x.shape), 0, 1)
    noisy_big = np.clip(x + rng.normal(scale=0.4, size=x.shape), 0, 1)
    s_small, _ = ek.pixel_metrics(x, noisy_small)
    s_big, _ = ek.pixel_metrics(x, noisy_big)
    assert -1.0 <= s_big < s_small < 1.0


def test_masked_equals_manual_crop_and_zero():
    x, y = rand_image(9, 40, 40), rand_image(10, 40, 40)
    mask = np.zeros((40, 40))
    mask[12:30, 8:25] = 1.0
    mask[14, 9] = 0.0  # a hole inside the bounding box
    got = ek.pixel_metrics(x, y, mask)
    m = mask[12:30, 8:25][..., None]
    want = ek.pixel_metrics(x[12:30, 8:25] * m, y[12:30, 8:25] * m)
    assert got == want


def test_masked_ignores_outside_differences():
    x = rand_image(11)
    y = x.copy()
    mask = np.zeros(x.shape[:2])
    mask[4:15, 6:20] = 1.0
    y[~(mask > 0.5)] = 0.33  # corrupt only the outside
    ssim, psnr = ek.pixel_metrics(x, y, mask)
    assert ssim == pytest.approx(1.0, abs=1e-12)
    assert psnr == 100.0


def test_empty_mask_skip_sentinel():
    x = rand_image(12)
    ssim, psnr = ek.pixel_metrics(x, x, np.zeros(x.shape[:2]))
    assert np.isnan(ssim) and np.isnan(psnr)


def test_tiny_mask_shrinks_window():
    x, y = rand_image(13), rand_image(14)
    mask = np.zeros(x.shape[:2])
    mask[10:13, 20:23] = 1.0  # 3x3 bounding box, smaller than the window
    ssim, psnr = ek.pixel_metrics(x, y, mask)
    assert np.isfinite(ssim) and np.isfinite(psnr)
    assert -1.0 <= ssim <= 1.0


def test_grayscale_input_accepted():
    x = rand_image(15)[..., 0]
    ssim, psnr = ek.pixel_metrics(x, x)
    assert (ssim, psnr) == (pytest.approx(1.0, abs=1e-12), 100.0)


def test_shape_mismatches_rejected():
    x = rand_image(16)
    with pytest.raises(ValueError):
        ek.pixel_metrics(x, x[:16])
    with pytest.raises(ValueError):
        ek.pixel_metrics(x, x, mask=np.ones((8, 8)))
    with pytest.raises(ValueError):
        ek.pixel_metrics(x[None], x[None])


# ---------------------------------------------------------------------------
# FID


def test_fid_moments_unit_mean_shift():
    got = ek.fid_from_moments([0.0], [[1.0]], [1.0], [[1.0]])
    assert got == pytest.approx(1.0, abs=1e-9)


def test_fid_moments_std_one_vs_two():
    got = ek.fid_from_moments([0.0], [[1.0]], [0.0], [[4.0]])
    assert got == pytest.approx(1.0, abs=1e-9)


def test_fid_moments_diagonal_closed_form():
    # ||(1,2)||^2 + (1+9-2*3) + (4+16-2*8) = 5 + 4 + 4
    got = ek.fid_from_moments([0.0, 0.0], np.diag([1.0, 4.0]),
                              [1.0, 2.0], np.diag([9.0, 16.0]))
    assert got == pytest.approx(13.0, abs=1e-9)


def test_fid_identical_sets_near_zero():
    a = np.random.default_rng(20).normal(size=(200, 8))
    assert ek.fid(a, a) < 1e-6


def test_fid_symmetric():
    rng = np.random.default_rng(21)
    a = rng.normal(size=(150, 6))
    b = rng.normal(loc=0.3, size=(140, 6))
    assert abs(ek.fid(a, b) - ek.fid(b, a)) < 1e-6


def test_fid_sample_estimate_approaches_analytic():
    rng = np.random.default_rng(22)
    a = rng.normal(size=(20000, 1))
    b = rng.normal(loc=1.0, size=(20000, 1))
    assert ek.fid(a, b) == pytest.approx(1.0, abs=0.1)


def test_matrix_sqrt_against_eigendecomposition_oracle():
    for seed in range(5):
        rng = np.random.default_rng(30 + seed)
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        lam = rng.uniform(0.1, 3.0, size=8)
        spd = q @ np.diag(lam) @ q.T
        oracle = q @ np.diag(np.sqrt(lam)) @ q.T
        assert np.abs(ek.matrix_sqrt(spd) - oracle).max() < 1e-8


def test_fid_small_sets_regularized():
    rng = np.random.default_rng(23)
    a = rng.normal(size=(8, 16))     # fewer rows than dims
    b = rng.normal(size=(8, 16))
    val = ek.fid(a, b)
    assert np.isfinite(val) and val >= 0.0


def test_fid_input_validation():
    good = np.zeros((4, 3))
    with pytest.raises(ValueError):
        ek.fid(good, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        ek.fid(good[:1], good)
    with pytest.raises(ValueError):
        ek.fid(np.zeros(4), good)


def test_fid_non_psd_reported():
    with pytest.raises(NumericsError):
        ek.fid_from_moments([0.0], [[-1.0]], [0.0], [[1.0]])


def test_embed_images_shape_and_determinism():
    imgs = np.stack([rand_image(40 + i, 64, 64) for i in range(5)]).astype(
        np.float32)
    e1 = ek.embed_images(imgs)
    e2 = ek.embed_images(imgs)
    assert e1.shape == (5, 64)
    assert np.array_equal(e1, e2)
    assert not np.allclose(e1[0], e1[1])


def test_embed_images_torch_chw_matches_numpy_hwc():
    imgs = np.stack([rand_image(50, 64, 64)]).astype(np.float32)
    t = torch.from_numpy(imgs).permute(0, 3, 1, 2)
    assert np.allclose(ek.embed_images(imgs), ek.embed_images(t))


# ---------------------------------------------------------------------------
# toy pose estimator


def test_estimator_training_error_below_gate(estimator, corpus):
    frames, _ = corpus
    assert ek.estimator_error(estimator, frames) < 2.0


def test_blank_image_confidences_below_threshold(estimator):
    _, conf = estimator.infer(np.zeros((64, 64, 3), dtype=np.float32))
    assert conf.max() < ek.HIT_THRESHOLD


def test_confidences_bounded(estimator, corpus):
    frames, _ = corpus
    for img in (frames[0].image, rand_image(60, 64, 64).astype(np.float32)):
        _, conf = estimator.infer(img)
        assert (conf >= 0.0).all() and (conf <= 1.0).all()


def test_infer_deterministic(estimator, corpus):
    frames, _ = corpus
    kp1, c1 = estimator.infer(frames[3].image)
    kp2, c2 = estimator.infer(frames[3].image)
    assert np.array_equal(kp1, kp2) and np.array_equal(c1, c2)


def test_estimator_construction_deterministic():
    a = ek.ToyPoseEstimator(seed=7)
    b = ek.ToyPoseEstimator(seed=7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_untrained_estimator_refused(corpus):
    frames, _ = corpus
    est = ek.ToyPoseEstimator()
    with pytest.raises(RuntimeError, match="untrained"):
        ek.pose_eval(lambda pose, s: frames[0].image, frames[:2], est)


# ---------------------------------------------------------------------------
# pose_eval


def _oracle_generate(frames):
    by_pose = {id(f.pose): f.image for f in frames}
    return lambda pose, s: by_pose[id(pose)]


def test_gt_oracle_hits_and_l2(estimator, corpus):
    frames, _ = corpus
    report = ek.pose_eval(_oracle_generate(frames), frames, estimator)
    assert report.regions["Head"].hit_pct >= 95.0
    assert report.regions["Clothes"].hit_pct >= 95.0
    train_err = ek.estimator_error(estimator, frames)
    hits = sum(r.n_hits for r in report.regions.values())
    l2 = sum(r.l2_mean * r.n_hits for r in report.regions.values()
             if r.n_hits > 0) / hits
    assert l2 <= 2.0 * train_err


def test_blank_generator_zero_hits(estimator, corpus):
    frames, _ = corpus
    blank = np.zeros_like(frames[0].image)
    report = ek.pose_eval(lambda pose, s: blank, frames[:4], estimator,
                          n_samples=2)
    for score in report.regions.values():
        assert score.hit_pct == 0.0
        assert score.n_hits == 0
        assert np.isnan(score.l2_mean)


def test_blurred_generator_no_better_than_oracle(estimator, corpus):
    frames, _ = corpus
    subset = frames[:6]

    def blurred(pose, s):
        img = _oracle_generate(subset)(pose, s)
        return np.clip(ndimage.gaussian_filter(img, sigma=(2.0, 2.0, 0.0)),
                       0.0, 1.0)

    r_oracle = ek.pose_eval(_oracle_generate(subset), subset, estimator,
                            n_samples=1)
    r_blur = ek.pose_eval(blurred, subset, estimator, n_samples=1)

    def combined_l2(report, names):
        hits = sum(report.regions[n].n_hits for n in names)
        return sum(report.regions[n].l2_mean * report.regions[n].n_hits
                   for n in names) / hits

    common = [n for n in ek.POSE_EVAL_REGIONS
              if r_oracle.regions[n].n_hits > 0
              and r_blur.regions[n].n_hits > 0]
    assert common, "blur test needs at least one region with hits in both"
    assert combined_l2(r_oracle, common) <= combined_l2(r_blur, common)


def test_report_regions_match_table_rows(estimator, corpus):
    frames, _ = corpus
    report = ek.pose_eval(_oracle_generate(frames), frames[:2], estimator,
                          n_samples=1)
    assert list(report.regions) == ["Head", "R-Hand", "L-Hand", "Clothes"]
    assert report.samples_per_pose == 1
    assert report.hit_threshold == ek.HIT_THRESHOLD


def test_pose_eval_threshold_extremes(estimator, corpus):
    frames, _ = corpus
    subset = frames[:3]
    gen = _oracle_generate(subset)
    none = ek.pose_eval(gen, subset, estimator, n_samples=1,
                        hit_threshold=1.1)
    assert all(s.hit_pct == 0.0 for s in none.regions.values())
    every = ek.pose_eval(gen, subset, estimator, n_samples=1,
                         hit_threshold=0.0)
    for name, score in every.regions.items():
        n_joints = sum(int(f.pose.visibility[ek.KP[j]])
                       for f in subset for j in ek.POSE_EVAL_REGIONS[name])
        assert score.n_joints == n_joints
        assert score.hit_pct == 100.0


def test_pose_eval_counts_generator_calls(estimator, corpus):
    frames, _ = corpus
    subset = frames[:2]
    calls = []

    def gen(pose, s):
        calls.append(s)
        return _oracle_generate(subset)(pose, s)

    report = ek.pose_eval(gen, subset, estimator, n_samples=3)
    assert report.samples_per_pose == 3
    assert len(calls) == 6


def test_pose_eval_report_serializes(estimator, corpus):
    frames, _ = corpus
    report = ek.pose_eval(_oracle_generate(frames), frames[:2], estimator,
                          n_samples=1)
    blob = json.dumps(report.as_dict())
    assert "Clothes" in blob


# ---------------------------------------------------------------------------
# region metrics


def _mask_dict(frames):
    return {
        "head": np.stack([f.mask_head for f in frames]),
        "hand": np.stack([f.mask_hand for f in frames]),
        "torso": np.stack([f.mask_torso for f in frames]),
    }


def test_identical_images_perfect_in_every_region(corpus):
    frames, _ = corpus
    sub = frames[:8]
    real = np.stack([f.image for f in sub]).astype(np.float64)
    metrics = ek.compute_region_metrics(real, real, _mask_dict(sub))
    for region in ("composite", "head", "hand", "torso"):
        assert metrics.ssim[region][0] == pytest.approx(1.0, abs=1e-9)
        assert metrics.psnr[region][0] == 100.0
        assert metrics.fid[region] < 1e-6


def test_degraded_images_score_worse(corpus):
    frames, _ = corpus
    sub = frames[:8]
    real = np.stack([f.image for f in sub]).astype(np.float64)
    rng = np.random.default_rng(70)
    fake = np.clip(real + rng.normal(scale=0.15, size=real.shape), 0, 1)
    metrics = ek.compute_region_metrics(real, fake, _mask_dict(sub))
    baseline = ek.compute_region_metrics(real, real, _mask_dict(sub))
    for region in ("composite", "head", "torso"):
        assert metrics.ssim[region][0] < 0.95
        assert metrics.psnr[region][0] < 40.0
        # absolute FID values are scale-arbitrary; the ordering is the contract
        assert metrics.fid[region] > max(10.0 * baseline.fid[region], 1e-6)


def test_all_empty_region_yields_nan_stats(corpus):
    frames, _ = corpus
    sub = frames[:4]
    real = np.stack([f.image for f in sub]).astype(np.float64)
    masks = _mask_dict(sub)
    masks["ghost"] = np.zeros_like(masks["head"])
    metrics = ek.compute_region_metrics(real, real, masks)
    assert np.isnan(metrics.ssim["ghost"][0])
    assert np.isnan(metrics.psnr["ghost"][0])
    assert metrics.fid["ghost"] < 1e-6  # both sides masked to black


def test_region_metrics_as_dict(corpus):
    frames, _ = corpus
    sub = frames[:2]
    real = np.stack([f.image for f in sub]).astype(np.float64)
    d = ek.compute_region_metrics(real, real, _mask_dict(sub)).as_dict()
    assert d["n_frames"] == 2
    assert set(d["ssim"]) == {"composite", "head", "hand", "torso"}
    assert {"mean", "std"} <= set(d["psnr"]["head"])


def test_region_metrics_shape_validation():
    with pytest.raises(ValueError):
        ek.compute_region_metrics(np.zeros((2, 8, 8, 3)),
                                  np.zeros((3, 8, 8, 3)), {})


# ---------------------------------------------------------------------------
# boundary-band report


def test_boundary_report_zero_for_identical(corpus):
    frames, _ = corpus
    sub = frames[:3]
    imgs = np.stack([f.image for f in sub])
    union = np.stack([np.clip(f.mask_head + f.mask_hand + f.mask_torso, 0, 1)
                      for f in sub])
    rep = ek.boundary_edge_report(imgs, imgs, union)
    assert rep["band_mean"] == 0.0
    assert rep["off_band_mean"] == 0.0
    assert rep["band_px"] == 2


def test_boundary_report_sees_noise(corpus):
    frames, _ = corpus
    sub = frames[:3]
    imgs = np.stack([f.image for f in sub])
    rng = np.random.default_rng(80)
    fake = np.clip(imgs + rng.normal(scale=0.1, size=imgs.shape), 0, 1)
    union = np.stack([np.clip(f.mask_head + f.mask_hand + f.mask_torso, 0, 1)
                      for f in sub])
    rep = ek.boundary_edge_report(imgs, fake.astype(np.float32), union)
    assert rep["band_mean"] > 0.0
    assert rep["off_band_mean"] > 0.0


# ---------------------------------------------------------------------------
# ablation table


def test_ablation_rows_match_table_layout():
    names = [name for name, _ in ek.ABLATION_ROWS]
    assert names == [
        "w/o L_edge", "L_edge", "f_xy (Conv)", "PE (concate)", "PE (shared)",
        "PE (separate)", "w/o f_skip", "w/o f_skip & Ψ", "Ψ(Conv)",
        "w/o (m_hand)", "full model",
    ]
    assert len(names) == 11
    for _, overrides in ek.ABLATION_ROWS:
        cfg = TrainConfig(corpus="x").to_dict()
        cfg.update(overrides)
        TrainConfig.from_dict(cfg)  # every row maps to a valid config


@pytest.fixture(scope="module")
def corpus32(tmp_path_factory):
    root = tmp_path_factory.mktemp("ek_corpus32")
    gen_corpus(root / "c", n_signers=2, frames_per_signer=4,
               canvas=(32, 32), seed=0)
    return root / "c"


def test_ablation_report_isolates_failures(corpus32, tmp_path):
    rows = [("full model", {}), ("broken", {"no_such_key": 1})]
    csv_path = tmp_path / "table.csv"
    grid_path = tmp_path / "grid.png"
    results = ek.ablation_report(
        corpus32, steps=1, seed=0, out_csv=csv_path, out_grid=grid_path,
        rows=rows, overrides={"image_size": 32, "classifier_fit_steps": 10})
    assert [r["row"] for r in results] == [
        "full model", "broken", "external baseline A", "external baseline B"]
    assert results[0]["status"] == "ok"
    assert results[1]["status"].startswith("failed: ")
    assert results[2]["status"] == "external"
    assert np.isfinite(results[0]["psnr_composite"])
    assert csv_path.is_file() and grid_path.is_file()
    header = csv_path.read_text().splitlines()[0]
    assert header.split(",")[:4] == ["row", "status", "psnr_composite",
                                    "ssim_composite"]


def test_ablation_csv_idempotent(corpus32, tmp_path):
    rows = [("full model", {})]
    texts = []
    for run in range(2):
        path = tmp_path / f"t{run}.csv"
        ek.ablation_report(corpus32, steps=1, seed=0, out_csv=path,
                           rows=rows, overrides={"image_size": 32,
                                                 "classifier_fit_steps": 10})
        texts.append(path.read_bytes())
    assert texts[0] == texts[1]


def test_write_ablation_csv_formats_cells(tmp_path):
    rows = [{"row": "a", "status": "ok", "psnr_composite": 12.34567,
             "ssim_composite": float("nan")},
            {"row": "b", "status": "external"}]
    path = tmp_path / "t.csv"
    ek.write_ablation_csv(rows, path)
    lines = path.read_text().splitlines()
    assert lines[1].startswith("a,ok,12.3457,,")
    assert lines[2].startswith("b,external,,")


def test_assemble_grid_places_tiles():
    a = np.full((4, 6, 3), 0.25, dtype=np.float32)
    b = np.full((4, 6, 3), 0.75, dtype=np.float32)
    c = np.full((4, 6, 3), 1.0, dtype=np.float32)
    grid = ek.assemble_grid([a, b, c], n_cols=2)
    assert grid.shape == (8, 12, 3)
    assert np.all(grid[:4, :6] == 0.25)
    assert np.all(grid[:4, 6:] == 0.75)
    assert np.all(grid[4:, :6] == 1.0)
    assert np.all(grid[4:, 6:] == 0.0)  # padding tile stays black


def test_save_png_roundtrip(tmp_path):
    from PIL import Image

    img = rand_image(90, 16, 16).astype(np.float32)
    path = tmp_path / "x.png"
    ek.save_png(img, path)
    back = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    assert back.shape == (16, 16, 3)
    assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-9


# ---------------------------------------------------------------------------
# trained-model evaluation plumbing


@pytest.fixture(scope="module")
def tiny_trainer(corpus32):
    frames, _ = read_corpus(corpus32)
    cfg = TrainConfig(corpus=str(corpus32), image_size=32, steps=1, seed=0,
                      classifier_fit_steps=10)
    data = TrainData(frames, cfg)
    trainer = Trainer(cfg, data)
    trainer.train_step(data.batch(trainer.sample_batch_indices()))
    return trainer, data


def test_reconstruct_all_shapes_and_range(tiny_trainer):
    trainer, data = tiny_trainer
    real, fake, masks = ek.reconstruct_all(trainer, data)
    n = len(data)
    assert real.shape == fake.shape == (n, 32, 32, 3)
    assert set(masks) == {"head", "hand", "torso"}
    assert fake.min() >= 0.0 and fake.max() <= 1.0


def test_evaluate_trained_returns_metrics_and_edges(tiny_trainer):
    trainer, data = tiny_trainer
    metrics, edges = ek.evaluate_trained(trainer, data)
    assert metrics.n_frames == len(data)
    assert "composite" in metrics.psnr
    assert {"band_px", "band_mean", "off_band_mean"} <= set(edges)
