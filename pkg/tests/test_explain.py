import warnings
from dataclasses import replace

import numpy as np
import pytest

from mdm import explain as mx
from mdm import tensorcore as tc
from mdm.models import ActivationSelector, AdditiveOracle, TrainingError, quadrant_of
from mdm.oracle_check import grid_minimizer, objective

FAST = mx.MdmConfig(n_scales=3, iterations=60, lr=0.01)


# --- config and initialisation ----------------------------------------------------


def test_full_size_profile_extents():
    cfg = mx.MdmConfig.full_size()
    assert cfg.scale_extents() == [(k, k) for k in range(6, 33)]
    assert cfg.gamma == pytest.approx(5.0)
    assert (cfg.n_scales, cfg.iterations, cfg.lr) == (27, 2000, 3e-3)


def test_single_scale_sits_at_base_plus_one():
    assert mx.MdmConfig(n_scales=1, scale_base=4).scale_extents() == [(5, 5)]


def test_default_profile():
    cfg = mx.MdmConfig()
    assert cfg.scale_extents() == [(k, k) for k in range(3, 11)]
    assert cfg.gamma == pytest.approx(8 * 5 / 27)


def test_masks_start_at_one_half():
    for m in mx.init_masks(FAST, (24, 24), [1.0, 2.0, 3.0]):
        assert np.all(m.d.data == 0.5)
        assert tc.l1_mean(m.d).item() == 0.5
        assert m.d.requires_grad


@pytest.mark.parametrize("kw", [
    dict(n_scales=0),
    dict(threshold_ratio=0.0),
    dict(threshold_ratio=1.0),
    dict(iterations=0),
    dict(lr=0.0),
    dict(alpha=-0.1),
    dict(scale_base=-1),
    dict(extents=((3, 3), (3, 3)), n_scales=2),
    dict(lambdas="sometimes"),
    dict(lambdas=(1.0, 2.0)),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        mx.MdmConfig(**kw)


def test_scales_larger_than_image_are_rejected():
    with pytest.raises(ValueError):
        mx.init_masks(mx.MdmConfig(n_scales=2, scale_base=8), (9, 9))


def test_lambda_schedules():
    assert mx.MdmConfig(n_scales=2, lambdas=3.0).lambda_schedule() == [3.0, 3.0]
    assert mx.MdmConfig(n_scales=2, lambdas=(1.0, 2.0)).lambda_schedule() == [1.0, 2.0]
    assert mx.MdmConfig(n_scales=2, lambda_factor=0.5).lambda_schedule(4.0) == [4.0, 4.0]
    with pytest.raises(ValueError):
        mx.MdmConfig().lambda_schedule()


# --- upsampling ---------------------------------------------------------------------


def test_upsample_constant_fields():
    np.testing.assert_array_equal(mx.upsample_mask(mx.init_masks(FAST, (24, 24))[0], 24, 24).data, 0.5)
    np.testing.assert_array_equal(mx.upsample_mask(tc.Tensor([[0.7]]), 6, 9).data, 0.7)


def test_upsample_keeps_corner_peak():
    d = np.full((4, 4), 0.1)
    d[0, 0], d[0, 1], d[1, 0] = 1.0, 0.6, 0.6
    up = mx.upsample_mask(tc.Tensor(d), 16, 16).data
    assert quadrant_of(np.unravel_index(np.argmax(up), up.shape), 16) == 0
    assert up.min() >= 0 and up.max() <= 1


def test_upsample_rejects_smaller_target():
    with pytest.raises(tc.ShapeError):
        mx.upsample_mask(tc.Tensor(np.zeros((5, 5))), 4, 8)


# --- training -----------------------------------------------------------------------


def test_pure_descent_without_weight(trained_model, test_samples):
    x = test_samples[0].image
    cfg = replace(FAST, lambdas=0.0)
    sel = ActivationSelector.logit_vector()
    for m in mx.init_masks(cfg, (24, 24), [0.0] * 3):
        _, trace = mx.train_mask(trained_model, x, sel, m, cfg)
        assert trace.consistency[-1] <= trace.consistency[0]
        assert len(trace.consistency) == len(trace.l1) == len(trace.total) == cfg.iterations


def test_huge_weight_empties_the_mask(trained_model, test_samples):
    cfg = replace(FAST, iterations=300, lr=3e-3)
    m = mx.init_masks(cfg, (24, 24), [1e6] * 3)[1]
    out, trace = mx.train_mask(trained_model, test_samples[2].image, ActivationSelector.logit_vector(), m, cfg)
    assert tc.l1_mean(out.d).item() < 0.05
    assert min(trace.d_min) >= 0.0 and max(trace.d_max) <= 1.0


@pytest.mark.parametrize("lam", [0.05, 0.1, 0.2])
def test_heavier_oracle_region_keeps_more_mask(lam):
    oracle = AdditiveOracle((2, 4), ((0, 2, 0, 2), (0, 2, 2, 4)), (0.1, 0.9))
    cfg = mx.MdmConfig(n_scales=1, extents=((2, 4),), iterations=1500, lr=0.01, lambdas=lam)
    m = mx.init_masks(cfg, (2, 4), [lam])[0]
    out, _ = mx.train_mask(oracle, np.ones((1, 2, 4)), ActivationSelector.logit(0), m, cfg)
    trained = oracle.region_means(mx.upsample_mask(out, 2, 4).data)
    grid = grid_minimizer(oracle, lam)
    assert trained[1] > trained[0]
    assert grid[1] > grid[0]
    # no worse than the best coarse assignment, up to Adam's jitter near the boundary
    assert objective(oracle, trained, lam)[0] <= objective(oracle, grid, lam)[0] + 1e-4


def test_literal_ordering_claim_at_unit_exponent():
    # non-strict form: a heavier region never ends with a smaller mask
    rng = np.random.default_rng(8)
    from mdm.oracle_check import draw_weights, run_trial

    for _ in range(5):
        t = run_trial(draw_weights(rng), exponent=1.0, lam=0.1)
        order = np.argsort(t.weights)
        assert np.all(np.diff(t.trained[order]) >= -1e-3)


class _MutatingModel:
    """Scores like the oracle but bumps its own fingerprint on every forward."""

    def __init__(self):
        self.oracle = AdditiveOracle((2, 2), ((0, 2, 0, 2),), (0.5,))
        self.input_shape = self.oracle.input_shape
        self.calls = 0

    def fingerprint(self):
        return str(self.calls)

    def forward(self, image):
        self.calls += 1
        return self.oracle.forward(image)


def test_model_mutation_is_a_contract_violation():
    cfg = mx.MdmConfig(n_scales=1, extents=((2, 2),), iterations=3, lambdas=0.1)
    m = mx.init_masks(cfg, (2, 2), [0.1])[0]
    with pytest.raises(mx.ContractViolation):
        mx.train_mask(_MutatingModel(), np.ones((1, 2, 2)), ActivationSelector.logit(0), m, cfg)


class _ExplodingModel:
    input_shape = (1, 2, 2)

    def fingerprint(self):
        return "fixed"

    def forward(self, image):
        return tc.scale(tc.reshape(tc.as_tensor(image), (4,)), 1e308)


def test_non_finite_loss_is_a_training_error():
    cfg = mx.MdmConfig(n_scales=1, extents=((2, 2),), iterations=3, lambdas=0.1)
    m = mx.init_masks(cfg, (2, 2), [0.1])[0]
    with np.errstate(over="ignore"), pytest.raises(TrainingError, match="iteration 0"):
        mx.train_mask(_ExplodingModel(), np.ones((1, 2, 2)), ActivationSelector.logit_vector(), m, cfg,
                      reference=tc.Tensor(np.zeros(4)))


def test_training_leaves_model_untouched(trained_model, test_samples):
    before = trained_model.fingerprint()
    mx.run_mdm(trained_model, test_samples[0].image, ActivationSelector.logit_vector(), FAST)
    assert trained_model.fingerprint() == before


def test_bad_weight_is_rejected(trained_model, test_samples):
    m = mx.init_masks(FAST, (24, 24), [-1.0] * 3)[0]
    with pytest.raises(ValueError):
        mx.train_mask(trained_model, test_samples[0].image, ActivationSelector.logit_vector(), m, FAST)


# --- fusion -------------------------------------------------------------------------


def test_fuse_saturated_and_empty():
    ones = [np.ones((3, 3))] * 4
    fused, binary, heat = mx.fuse_masks(ones, 3.9)
    assert np.all(binary == 1) and np.all(heat == 1) and np.all(fused == 4)
    _, binary, heat = mx.fuse_masks([np.zeros((3, 3))] * 4, 0.5)
    assert not binary.any() and not heat.any()


def test_fuse_hand_example():
    masks = [np.array([[1.0, 1.0], [1.0, 0.0]]), np.array([[1.0, 1.0], [0.0, 0.0]]),
             np.array([[1.0, 0.0], [0.0, 0.0]])]
    fused, binary, heat = mx.fuse_masks(masks, 2.0)
    np.testing.assert_array_equal(fused, [[3, 2], [1, 0]])
    np.testing.assert_array_equal(binary, [[1, 1], [0, 0]])
    np.testing.assert_array_equal(heat, [[1.0, 2.0 / 3.0], [0.0, 0.0]])


def test_fuse_tie_at_threshold_is_retained():
    _, binary, _ = mx.fuse_masks([np.array([[0.5, 0.25]]), np.array([[0.5, 0.25]])], 1.0)
    np.testing.assert_array_equal(binary, [[1.0, 0.0]])


def test_fuse_errors():
    with pytest.raises(ValueError):
        mx.fuse_masks([], 1.0)
    with pytest.raises(tc.ShapeError):
        mx.fuse_masks([np.zeros((2, 2)), np.zeros((2, 3))], 1.0)


# --- composite images ----------------------------------------------------------------


def test_heatmap_image_examples():
    x = np.random.default_rng(0).uniform(size=(1, 4, 4))
    heat = (np.arange(16).reshape(4, 4) % 2).astype(float)
    np.testing.assert_array_equal(mx.heatmap_image(x, heat, 0.7, 0.0), 0.7 * x)
    np.testing.assert_array_equal(mx.heatmap_image(x, heat, 0.0, 0.3), 0.3 * heat[None])
    assert mx.heatmap_image(np.ones((1, 1, 1)), np.ones((1, 1)), 0.5, 0.3).item() == pytest.approx(0.8)
    # values past 1 are kept; clipping happens when rendering
    assert mx.heatmap_image(np.ones((1, 1, 1)), np.ones((1, 1)), 1.0, 1.0).item() == 2.0
    with pytest.raises(tc.ShapeError):
        mx.heatmap_image(x, np.ones((3, 4)), 0.5, 0.3)


def test_binary_mask_image_examples():
    x = np.random.default_rng(1).uniform(size=(3, 4, 4))
    np.testing.assert_array_equal(mx.binary_mask_image(x, np.ones((4, 4))), x)
    np.testing.assert_array_equal(mx.binary_mask_image(x, np.zeros((4, 4))), np.zeros_like(x))
    top = np.zeros((4, 4))
    top[:2] = 1
    out = mx.binary_mask_image(x, top)
    np.testing.assert_array_equal(out[:, :2], x[:, :2])
    np.testing.assert_array_equal(out[:, 2:], 0)
    with pytest.raises(tc.ShapeError):
        mx.binary_mask_image(x, np.ones((4, 3)))


# --- full runs --------------------------------------------------------------------


def test_single_scale_run(trained_model, test_samples):
    cfg = mx.MdmConfig(n_scales=1, iterations=60, lr=0.01)
    exp = mx.run_mdm(trained_model, test_samples[0].image, ActivationSelector.logit_vector(), cfg)
    np.testing.assert_array_equal(exp.fused, exp.masks[0])
    np.testing.assert_array_equal(exp.binary, exp.masks[0] >= cfg.gamma)


def test_scale_order_does_not_change_fusion(trained_model, test_samples):
    x = test_samples[5].image
    sel = ActivationSelector.logit_vector()
    a = mx.run_mdm(trained_model, x, sel, replace(FAST, extents=((3, 3), (5, 5), (8, 8))))
    b = mx.run_mdm(trained_model, x, sel, replace(FAST, extents=((8, 8), (3, 3), (5, 5))))
    assert a.fused.tobytes() == b.fused.tobytes()
    assert a.binary.tobytes() == b.binary.tobytes() and a.heatmap.tobytes() == b.heatmap.tobytes()


def test_scales_train_independently(trained_model, test_samples):
    x = test_samples[4].image
    sel = ActivationSelector.logit_vector()
    alone = mx.run_mdm(trained_model, x, sel, replace(FAST, n_scales=1, extents=((5, 5),), lambdas=2.0))
    among = mx.run_mdm(trained_model, x, sel, replace(FAST, extents=((4, 4), (5, 5), (7, 7)), lambdas=2.0))
    assert alone.masks[0].tobytes() == among.masks[among.extents.index((5, 5))].tobytes()


def test_run_is_deterministic(trained_model, test_samples):
    x = test_samples[6].image
    sel = ActivationSelector.logit_vector()
    a = mx.run_mdm(trained_model, x, sel, FAST)
    b = mx.run_mdm(trained_model, x, sel, FAST)
    for key in ("fused", "binary", "heatmap", "heatmap_image", "binary_mask_image"):
        assert getattr(a, key).tobytes() == getattr(b, key).tobytes()


def test_fusion_invariants_on_a_real_run(trained_model, test_samples):
    exp = mx.run_mdm(trained_model, test_samples[7].image, ActivationSelector.logit_vector(), FAST)
    assert np.all((exp.heatmap > 0) <= (exp.binary == 1))
    assert np.all(exp.fused[exp.binary == 1] >= exp.gamma)
    assert 0 <= exp.fused.min() and exp.fused.max() <= FAST.n_scales
    for mk in exp.masks:
        assert mk.min() >= 0 and mk.max() <= 1
    for tr in exp.traces:
        assert min(tr.d_min) >= 0 and max(tr.d_max) <= 1


@pytest.mark.slow
def test_binary_mask_concentrates_in_labelled_quadrant(trained_model, test_samples):
    rng = np.random.default_rng(0)
    for sample in test_samples[:3]:
        exp = mx.run_mdm(trained_model, sample.image, ActivationSelector.logit_vector(), mx.MdmConfig())
        quad = np.zeros((24, 24))
        qy, qx = divmod(sample.label, 2)
        quad[12 * qy:12 * qy + 12, 12 * qx:12 * qx + 12] = 1
        k = int(exp.binary.sum())
        assert k > 0
        frac = (exp.binary * quad).sum() / k
        random_fracs = []
        for _ in range(100):
            r = np.zeros(576)
            r[rng.choice(576, k, replace=False)] = 1
            random_fracs.append((r.reshape(24, 24) * quad).sum() / k)
        assert frac > max(random_fracs)
        assert frac > 0.5


def test_degenerate_output_warns(trained_model, test_samples):
    cfg = replace(FAST, lambdas=1e6, iterations=200)
    with pytest.warns(mx.DegenerateExplanationWarning):
        exp = mx.run_mdm(trained_model, test_samples[0].image, ActivationSelector.logit_vector(), cfg)
    assert exp.degenerate and not exp.binary.any() and not exp.heatmap.any()


def test_blank_image_is_not_an_error(trained_model):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", mx.DegenerateExplanationWarning)
        exp = mx.run_mdm(trained_model, np.zeros((1, 24, 24)), ActivationSelector.logit_vector(), FAST)
    assert exp.lambdas == [0.0] * 3
    assert np.all(np.isfinite(exp.fused))


def test_image_shape_must_match(trained_model):
    with pytest.raises(tc.ShapeError):
        mx.run_mdm(trained_model, np.zeros((1, 20, 20)), ActivationSelector.logit_vector(), FAST)


# --- matrix file ----------------------------------------------------------------------


def test_mdmm_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(3)
    mats = {"M_F": rng.uniform(0, 8, size=(5, 7)), "M_b": (rng.uniform(size=(5, 7)) > 0.5) * 1.0,
            "M_h": rng.uniform(size=(5, 7)) / 3}
    path = tmp_path / "x.mdmm"
    mx.write_mdmm(path, mats)
    assert path.read_text().splitlines()[:2] == ["MDMM", "M_F 5 7"]
    back = mx.read_mdmm(path)
    assert list(back) == list(mats)
    for k in mats:
        assert back[k].tobytes() == mats[k].tobytes()


def test_mdmm_rejects_foreign_files(tmp_path):
    path = tmp_path / "x.mdmm"
    path.write_text("P2\n1 1\n")
    with pytest.raises(ValueError):
        mx.read_mdmm(path)
