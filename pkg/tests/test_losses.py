import math

import numpy as np
import pytest

from geomamba.losses import (
    LossWeights,
    focal_loss,
    gcc_loss,
    identity_loss,
    total_loss,
    triplet_loss,
)
from geomamba.tensor import Tensor, gradcheck


def brute_force_triplet(f: np.ndarray, y: np.ndarray, margin: float) -> tuple[float, int]:
    """O(N^2) definition-level reference."""
    n = len(y)
    losses = []
    for i in range(n):
        pos = [np.linalg.norm(f[i] - f[j]) for j in range(n) if j != i and y[j] == y[i]]
        neg = [np.linalg.norm(f[i] - f[j]) for j in range(n) if y[j] != y[i]]
        if not pos or not neg:
            continue
        losses.append(max(0.0, max(pos) - min(neg) + margin))
    if not losses:
        return 0.0, 0
    return float(np.mean(losses)), len(losses)


class TestTriplet:
    def test_hand_case(self):
        f = Tensor(np.array([[0.0], [1.0], [5.0]]))
        y = np.array([0, 0, 1])
        loss, n_valid = triplet_loss(f, y, margin=0.3)
        assert n_valid == 2
        assert loss.item() == 0.0
        loss, _ = triplet_loss(f, y, margin=3.5)
        assert loss.item() == pytest.approx(0.25, abs=1e-12)

    def test_margin_satisfied_zero(self):
        f = Tensor(np.array([[0.0], [0.1], [10.0], [10.2]]))
        y = np.array([0, 0, 1, 1])
        loss, _ = triplet_loss(f, y, margin=0.3)
        assert loss.item() == 0.0

    def test_single_class_skipped(self):
        loss, n_valid = triplet_loss(Tensor(np.random.randn(4, 8)), np.zeros(4), 0.3)
        assert n_valid == 0 and loss.item() == 0.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            f = rng.standard_normal((16, 8))
            y = rng.integers(0, 4, size=16)
            loss, n_valid = triplet_loss(Tensor(f), y, 0.3)
            ref, ref_n = brute_force_triplet(f, y, 0.3)
            assert n_valid == ref_n
            assert loss.item() == pytest.approx(ref, abs=1e-12)

    def test_relabel_invariance(self):
        rng = np.random.default_rng(5)
        f = Tensor(rng.standard_normal((12, 4)))
        y = rng.integers(0, 3, size=12)
        a, _ = triplet_loss(f, y, 0.3)
        perm = np.array([7, 2, 9])
        b, _ = triplet_loss(f, perm[y], 0.3)
        assert a.item() == b.item()

    def test_nonnegative_and_zero_iff(self):
        rng = np.random.default_rng(8)
        f = rng.standard_normal((10, 4))
        y = rng.integers(0, 3, size=10)
        loss, _ = triplet_loss(Tensor(f), y, 0.0)
        assert loss.item() >= 0.0
        ref, _ = brute_force_triplet(f, y, 0.0)
        assert (loss.item() == 0.0) == (ref == 0.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(3)
        y = np.array([0, 0, 1, 1, 2, 2])
        x = Tensor(rng.standard_normal((6, 4)))
        err = gradcheck(lambda t: triplet_loss(t, y, 0.5)[0], x, eps=1e-5)
        assert err < 1e-4

    def test_label_shape_mismatch(self):
        with pytest.raises(ValueError):
            triplet_loss(Tensor(np.zeros((4, 2))), np.zeros(5), 0.3)

    def test_normalize_matches_prenormalized(self):
        rng = np.random.default_rng(11)
        f = rng.standard_normal((12, 6)) * 5.0
        y = rng.integers(0, 3, size=12)
        a, na = triplet_loss(Tensor(f), y, 0.3, normalize=True)
        unit = f / np.linalg.norm(f, axis=1, keepdims=True)
        b, nb = triplet_loss(Tensor(unit), y, 0.3, normalize=False)
        assert na == nb
        assert a.item() == pytest.approx(b.item(), abs=1e-9)

    def test_normalize_scale_invariance(self):
        rng = np.random.default_rng(12)
        f = rng.standard_normal((10, 4))
        y = rng.integers(0, 3, size=10)
        a, _ = triplet_loss(Tensor(f), y, 0.3, normalize=True)
        b, _ = triplet_loss(Tensor(100.0 * f), y, 0.3, normalize=True)
        assert a.item() == pytest.approx(b.item(), abs=1e-9)

    def test_normalize_gradcheck(self):
        rng = np.random.default_rng(13)
        y = np.array([0, 0, 1, 1, 2, 2])
        x = Tensor(rng.standard_normal((6, 4)))
        err = gradcheck(lambda t: triplet_loss(t, y, 0.5, normalize=True)[0], x, eps=1e-5)
        assert err < 1e-4


class TestIdentity:
    def test_uniform_logits(self):
        k = 7
        loss = identity_loss(Tensor(np.zeros((3, k))), np.array([0, 3, 6]), smoothing=0.0)
        assert loss.item() == pytest.approx(math.log(k), abs=1e-12)

    def test_confident_correct_near_zero(self):
        logits = np.full((2, 4), -50.0)
        logits[0, 1] = logits[1, 2] = 50.0
        loss = identity_loss(Tensor(logits), np.array([1, 2]), smoothing=0.0)
        assert loss.item() < 1e-12

    def test_smoothing_matches_reference(self):
        rng = np.random.default_rng(4)
        logits = rng.standard_normal((5, 6))
        y = rng.integers(0, 6, size=5)
        eps = 0.1
        logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
        ce_target = -logp[np.arange(5), y].mean()
        ce_mean = -logp.mean(axis=1).mean()
        expected = (1 - eps) * ce_target + eps * ce_mean
        loss = identity_loss(Tensor(logits), y, smoothing=eps)
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_gradcheck(self):
        y = np.array([0, 2, 1])
        x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
        assert gradcheck(lambda t: identity_loss(t, y, 0.1), x, 1e-5) < 1e-4


class TestFocal:
    def test_single_pixel_hand_value(self):
        loss = focal_loss(Tensor(np.zeros((1, 1))), np.ones((1, 1)), alpha=0.25, gamma=2.0)
        assert loss.item() == pytest.approx(0.25 * 0.25 * math.log(2.0), abs=1e-9)
        assert loss.item() == pytest.approx(0.043322, abs=1e-6)

    def test_confident_limit_zero(self):
        logits = np.full((2, 3), 40.0)
        target = np.ones((2, 3))
        assert focal_loss(Tensor(logits), target).item() < 1e-10

    def test_gamma0_half_alpha_is_half_bce(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((4, 5))
        target = (rng.uniform(size=(4, 5)) > 0.5).astype(float)
        p = 1.0 / (1.0 + np.exp(-logits))
        bce = -(target * np.log(p) + (1 - target) * np.log(1 - p)).mean()
        loss = focal_loss(Tensor(logits), target, alpha=0.5, gamma=0.0)
        assert loss.item() == pytest.approx(0.5 * bce, abs=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            focal_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 3)))

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        target = (rng.uniform(size=(3, 4)) > 0.6).astype(float)
        x = Tensor(rng.standard_normal((3, 4)))
        assert gradcheck(lambda t: focal_loss(t, target), x, 1e-5) < 1e-4


def _random_masks(rng, shallow=(2, 1, 8, 8), deep=(2, 1, 2, 2)):
    logits = {
        "opt_shallow": Tensor(rng.standard_normal(shallow)),
        "opt_deep": Tensor(rng.standard_normal(deep)),
        "sar_shallow": Tensor(rng.standard_normal(shallow)),
        "sar_deep": Tensor(rng.standard_normal(deep)),
    }
    targets = {k: (rng.uniform(size=v.shape) > 0.8).astype(float)
               for k, v in logits.items()}
    return logits, targets


class TestGcc:
    def test_zero_weights(self):
        logits, targets = _random_masks(np.random.default_rng(0))
        w = LossWeights(lambda_deep=0.0, lambda_shallow=0.0)
        assert gcc_loss(logits, targets, w).item() == 0.0

    def test_term_by_term_sum(self):
        rng = np.random.default_rng(1)
        logits, targets = _random_masks(rng)
        w = LossWeights(lambda_deep=1.0, lambda_shallow=0.5)
        expected = 0.0
        for key in logits:
            wt = 1.0 if key.endswith("deep") else 0.5
            expected += wt * focal_loss(logits[key], targets[key],
                                        w.focal_alpha, w.focal_gamma).item()
        assert gcc_loss(logits, targets, w).item() == pytest.approx(expected, abs=1e-12)

    def test_modality_symmetry(self):
        rng = np.random.default_rng(2)
        logits, targets = _random_masks(rng)
        for depth in ("shallow", "deep"):
            logits[f"sar_{depth}"] = Tensor(logits[f"opt_{depth}"].data.copy())
            targets[f"sar_{depth}"] = targets[f"opt_{depth}"].copy()
        w = LossWeights()
        half = (w.lambda_deep * focal_loss(logits["opt_deep"], targets["opt_deep"]).item()
                + w.lambda_shallow * focal_loss(logits["opt_shallow"], targets["opt_shallow"]).item())
        assert gcc_loss(logits, targets, w).item() == pytest.approx(2 * half, abs=1e-12)

    def test_linearity_in_weights(self):
        logits, targets = _random_masks(np.random.default_rng(3))
        a = gcc_loss(logits, targets, LossWeights(lambda_deep=1.0, lambda_shallow=0.0)).item()
        b = gcc_loss(logits, targets, LossWeights(lambda_deep=0.0, lambda_shallow=1.0)).item()
        c = gcc_loss(logits, targets, LossWeights(lambda_deep=2.0, lambda_shallow=3.0)).item()
        assert c == pytest.approx(2 * a + 3 * b, abs=1e-10)

    def test_missing_key_raises(self):
        logits, targets = _random_masks(np.random.default_rng(4))
        del logits["sar_deep"]
        with pytest.raises(KeyError):
            gcc_loss(logits, targets, LossWeights())


class TestTotal:
    def test_lambda_zero(self):
        assert total_loss(Tensor(1.25), Tensor(9.0), 0.0).item() == 1.25

    def test_affine_identity(self):
        r, g = Tensor(0.7), Tensor(0.21)
        out = total_loss(r, g, 10.0)
        assert out.item() - r.item() == pytest.approx(10.0 * g.item(), abs=1e-12)

    def test_all_zero(self):
        assert total_loss(Tensor(0.0), Tensor(0.0), 10.0).item() == 0.0


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(lambda_gcc=-1.0)
