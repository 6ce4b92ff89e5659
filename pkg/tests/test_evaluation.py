import numpy as np
import pytest
import torch

from pseudolab.backbone import Backbone, BackboneConfig
from pseudolab.evaluation import (
    EvalReport,
    brier,
    fgsm_attack,
    iou,
    macro_iou,
    mc_predict,
    per_image_iou,
    predictions_to_masks,
    robustness_sweep,
)
from pseudolab.pseudo import PosteriorHead

from conftest import zero_parameters


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(2)
    return Backbone(BackboneConfig(base_width=2, depth=1))


def test_iou_identical_masks():
    mask = (np.random.default_rng(0).random((8, 8)) > 0.5).astype(np.float32)
    assert iou(mask, mask) == 1.0


def test_iou_disjoint_masks():
    a = np.zeros((4, 4)); a[0, 0] = 1
    b = np.zeros((4, 4)); b[1, 1] = 1
    assert iou(a, b) == 0.0


def test_iou_half_coverage():
    gt = np.zeros((4, 4)); gt[0] = 1; gt[1] = 1  # 8 pixels
    pred = np.zeros((4, 4)); pred[0] = 1          # covers half, no false positives
    assert iou(pred, gt) == 0.5


def test_iou_empty_union_is_one():
    z = np.zeros((4, 4))
    assert iou(z, z) == 1.0


def test_iou_rejects_non_binary():
    with pytest.raises(ValueError, match="binary"):
        iou(np.full((2, 2), 0.5), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="shape"):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))


def test_iou_permutation_invariant():
    rng = np.random.default_rng(1)
    a = (rng.random(36) > 0.5).astype(float)
    b = (rng.random(36) > 0.5).astype(float)
    perm = rng.permutation(36)
    assert iou(a, b) == pytest.approx(iou(a[perm], b[perm]), abs=1e-15)


def test_brier_perfect_and_half():
    gt = (np.random.default_rng(2).random((6, 6)) > 0.5).astype(np.float64)
    assert brier(gt, gt) == 0.0
    assert brier(np.full((6, 6), 0.5), gt) == 0.25


def test_brier_matches_elementwise_recomputation():
    rng = np.random.default_rng(3)
    p = rng.random((8, 8))
    y = (rng.random((8, 8)) > 0.5).astype(np.float64)
    manual = sum((p[i, j] - y[i, j]) ** 2 for i in range(8) for j in range(8)) / 64
    assert abs(brier(p, y) - manual) < 1e-12


def test_brier_binary_symmetry():
    rng = np.random.default_rng(4)
    p = rng.random((5, 5))
    y = (rng.random((5, 5)) > 0.5).astype(np.float64)
    assert brier(p, y) == pytest.approx(brier(1 - p, 1 - y), abs=1e-15)


def test_predictions_to_masks_binary_and_multiclass():
    probs = torch.tensor([[[0.6, 0.4]], [[0.2, 0.9]]])  # [2, 1, 2]
    assert torch.equal(predictions_to_masks(probs), torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]]))
    multi = torch.tensor([[[0.2], [0.5], [0.3]]])  # [1, 3, 1] -> argmax channel 1
    out = predictions_to_masks(multi)
    assert torch.equal(out, torch.tensor([[[0.0], [1.0], [0.0]]]))
    assert macro_iou(out[0].numpy(), out[0].numpy()) == 1.0


def test_mc_predict_collapsed_posterior(small_model):
    head = PosteriorHead(small_model.config.bottleneck_channels)
    zero_parameters(head)
    with torch.no_grad():
        head.mean_head.bias.fill_(0.6)
        head.log_var_head.bias.fill_(-60.0)  # effectively zero spread
    images = np.random.default_rng(5).random((3, 1, 16, 16)).astype(np.float32)
    out = mc_predict(small_model, head, images, n_samples=5, seed=0)
    assert out.sample_masks.shape[0] == 5
    assert all(t == pytest.approx(0.6, abs=1e-6) for t in out.thresholds)
    for s in range(1, 5):
        assert np.array_equal(out.sample_masks[0], out.sample_masks[s])
    assert np.array_equal(out.mean_map, out.sample_masks[0])


def test_mc_predict_mean_map_is_vote_fraction(small_model):
    torch.manual_seed(0)
    head = PosteriorHead(small_model.config.bottleneck_channels)
    with torch.no_grad():
        head.log_var_head.bias.fill_(-2.0)  # sizeable spread -> distinct thresholds
    images = np.random.default_rng(6).random((2, 1, 16, 16)).astype(np.float32)
    out = mc_predict(small_model, head, images, n_samples=4, seed=3)
    votes = out.sample_masks.mean(axis=0)
    assert np.array_equal(out.mean_map, votes)
    assert out.mean_map.min() >= 0.0 and out.mean_map.max() <= 1.0
    allowed = {i / 4 for i in range(5)}
    assert set(np.unique(out.mean_map)).issubset(allowed)


def test_mc_predict_requires_head(small_model):
    images = np.zeros((1, 1, 16, 16), dtype=np.float32)
    with pytest.raises(ValueError, match="head"):
        mc_predict(small_model, None, images)
    head = PosteriorHead(small_model.config.bottleneck_channels)
    with pytest.raises(ValueError, match="n_samples"):
        mc_predict(small_model, head, images, n_samples=0)


def test_fgsm_epsilon_zero_is_identity(small_model):
    rng = np.random.default_rng(7)
    images = rng.random((2, 1, 16, 16)).astype(np.float32)
    masks = (rng.random((2, 1, 16, 16)) > 0.5).astype(np.float32)
    out = fgsm_attack(small_model, images, masks, epsilon=0.0)
    assert np.array_equal(out, images)


def test_fgsm_linf_bound_and_range(small_model):
    rng = np.random.default_rng(8)
    images = rng.random((2, 1, 16, 16)).astype(np.float32)
    masks = (rng.random((2, 1, 16, 16)) > 0.5).astype(np.float32)
    eps = 5e-3
    out = fgsm_attack(small_model, images, masks, epsilon=eps)
    assert np.max(np.abs(out - images)) <= eps + 1e-7
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_fgsm_single_pixel_analytic_direction():
    # p = sigmoid(2x), gt = 1: dice loss decreases in p, so the attack pushes x down
    def toy_probs(x):
        return torch.sigmoid(2.0 * x)

    x = np.array([[[[0.5]]]], dtype=np.float32)
    gt = np.ones_like(x)
    out = fgsm_attack(toy_probs, x, gt, epsilon=0.01, scope=None)
    assert out[0, 0, 0, 0] == pytest.approx(0.49, abs=1e-7)
    # gt = 0 flips the gradient sign
    out = fgsm_attack(toy_probs, x, np.zeros_like(x), epsilon=0.01, scope=None)
    assert out[0, 0, 0, 0] == pytest.approx(0.51, abs=1e-7)


def test_fgsm_validation(small_model):
    with pytest.raises(ValueError, match="epsilon"):
        fgsm_attack(small_model, np.zeros((1, 1, 16, 16), dtype=np.float32),
                    np.zeros((1, 1, 16, 16), dtype=np.float32), epsilon=-1e-3)


def test_robustness_sweep_tables(small_model):
    rng = np.random.default_rng(9)
    images = rng.random((4, 1, 16, 16)).astype(np.float32)
    masks = (rng.random((4, 1, 16, 16)) > 0.5).astype(np.float32)
    report = robustness_sweep(
        small_model, images, masks,
        gamma_list=[0.5, 0.0], epsilon_list=[0.0, 1e-2], seed=1,
    )
    assert len(report.rows()) == 1 + 2 + 2
    assert report.gamma_table[0.0] == report.mean_iou
    assert report.epsilon_table[0.0] == report.mean_iou
    assert [r[1] for r in report.rows() if r[0] == "gamma"] == [0.0, 0.5]
    assert len(report.per_image_iou) == 4
    assert 0.0 <= report.brier <= 1.0


def test_robustness_sweep_gamma_zero_table_only(small_model):
    rng = np.random.default_rng(10)
    images = rng.random((3, 1, 16, 16)).astype(np.float32)
    masks = (rng.random((3, 1, 16, 16)) > 0.5).astype(np.float32)
    report = robustness_sweep(small_model, images, masks, gamma_list=[0.0], seed=2)
    assert list(report.gamma_table) == [0.0]
    assert report.gamma_table[0.0] == report.mean_iou
    assert report.epsilon_table == {}


def test_per_image_iou_against_manual(small_model):
    rng = np.random.default_rng(11)
    images = rng.random((2, 1, 16, 16)).astype(np.float32)
    masks = (rng.random((2, 1, 16, 16)) > 0.5).astype(np.float32)
    scores = per_image_iou(small_model, images, masks)
    from pseudolab.evaluation import predict_probabilities

    probs = predict_probabilities(small_model, images)
    pred = predictions_to_masks(probs).numpy()
    for i in range(2):
        assert scores[i] == pytest.approx(iou(pred[i, 0], masks[i, 0]))
