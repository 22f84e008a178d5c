import numpy as np
import pytest
from helpers import mifgsm_oracle

from augtransfer.attack import (
    AttackConfig,
    AttackTrace,
    benign_accuracy_on_augmented,
    mifgsm,
    mifgsm_batch,
    project_linf,
    timing_report,
    transferability_rate,
)
from augtransfer.compose import parse_composition, preset


class ZeroModel:
    """Surrogate with an identically zero input gradient."""

    def loss_and_grad(self, x, y):
        return np.zeros(len(x)), np.zeros_like(x)


class ConstModel:
    def __init__(self, label):
        self.label = label

    def predict(self, x):
        return np.full(len(x), self.label)


class TestConfig:
    def test_defaults(self):
        cfg = AttackConfig(epsilon=0.1)
        assert cfg.iters == 10 and cfg.mu == 1.0
        assert cfg.step == pytest.approx(0.01)

    def test_undp(self):
        cfg = AttackConfig.undp(16 / 255)
        assert cfg.iters == 100 and cfg.step == pytest.approx(1 / 255)

    @pytest.mark.parametrize("kw", [dict(epsilon=0.0), dict(epsilon=0.1, iters=0), dict(epsilon=0.1, alpha=-1),
                                    dict(epsilon=0.1, subset=0), dict(epsilon=0.1, targeted=True)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            AttackConfig(**kw)


class TestProjection:
    def test_clamps(self):
        x = np.array([0.5, 0.95, 0.02])
        out = project_linf(np.array([0.9, 1.2, -0.3]), x, 0.1)
        np.testing.assert_allclose(out, [0.6, 1.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            project_linf(np.zeros(2), np.zeros(3), 0.1)


class TestMifgsm:
    def test_matches_oracle_with_identity(self, tiny_cnn, images):
        y = np.array([0, 1, 2])
        cfg = AttackConfig(epsilon=8 / 255)
        adv, _ = mifgsm_batch(tiny_cnn, images, y, cfg, "identity", rng=0)
        ref = mifgsm_oracle(lambda z: tiny_cnn.loss_and_grad(z, y)[1], images, 8 / 255, 10, 1.0)
        np.testing.assert_allclose(adv, ref, atol=1e-12, rtol=0)

    def test_trace_shape(self, tiny_mlp, images):
        _, trace = mifgsm_batch(tiny_mlp, images, np.array([0, 1, 2]), AttackConfig(0.05, iters=4), "dst", rng=0)
        assert len(trace) == 4 and trace.cosines.shape == (4, 3)
        assert np.all(np.isnan(trace.cosines[0]))
        c = trace.cosines[1:]
        assert np.all((c >= -1) & (c <= 1))
        assert trace.sample_count == 5

    def test_deterministic(self, tiny_mlp, images):
        y = np.array([0, 1, 2])
        a, _ = mifgsm_batch(tiny_mlp, images, y, AttackConfig(0.05), "[greyscale>dst,admix>dst]", rng=4)
        b, _ = mifgsm_batch(tiny_mlp, images, y, AttackConfig(0.05), "[greyscale>dst,admix>dst]", rng=4)
        np.testing.assert_array_equal(a, b)

    def test_sample_independent_of_batch(self, tiny_mlp, images):
        y = np.array([0, 1, 2])
        comp = "[cutout>dst,uniform_noise>dst]"
        full, _ = mifgsm_batch(tiny_mlp, images, y, AttackConfig(0.05), comp, rng=1, sample_ids=[10, 11, 12])
        solo, _ = mifgsm_batch(tiny_mlp, images[2:], y[2:], AttackConfig(0.05), comp, rng=1, sample_ids=[12])
        np.testing.assert_array_equal(full[2], solo[0])

    def test_zero_gradient_flagged(self, images):
        adv, trace = mifgsm_batch([ZeroModel()], images, np.zeros(3, dtype=int), AttackConfig(0.1), "identity")
        assert trace.zero_grad.all()
        np.testing.assert_array_equal(adv, images)
        assert np.isnan(trace.mean_cosine())

    def test_subset_and_original(self, tiny_mlp, images):
        cfg = AttackConfig(0.05, subset=2, include_original=True)
        adv, trace = mifgsm_batch(tiny_mlp, images, np.array([0, 1, 2]), cfg, "dst", rng=0)
        assert trace.sample_count == 2
        assert np.abs(adv - images).max() <= 0.05 + 1e-12

    def test_single_image(self, tiny_mlp, images):
        adv, trace = mifgsm(tiny_mlp, images[0], 1, AttackConfig(0.05), preset("gsdt"), rng=0)
        assert adv.shape == images[0].shape and trace.sample_count == 10

    def test_single_image_range_check(self, tiny_mlp):
        with pytest.raises(ValueError):
            mifgsm(tiny_mlp, np.full((3, 8, 8), 1.5), 0, AttackConfig(0.05), "identity")

    def test_ensemble_surrogate(self, tiny_mlp, tiny_cnn, images):
        adv, _ = mifgsm_batch([tiny_mlp, tiny_cnn], images, np.array([0, 1, 2]), AttackConfig(0.05), "identity")
        assert np.abs(adv - images).max() <= 0.05 + 1e-12

    def test_composition_text_and_node_agree(self, tiny_mlp, images):
        y = np.array([0, 1, 2])
        a, _ = mifgsm_batch(tiny_mlp, images, y, AttackConfig(0.05), "gsdt", rng=2)
        b, _ = mifgsm_batch(tiny_mlp, images, y, AttackConfig(0.05), parse_composition("gsdt"), rng=2)
        np.testing.assert_array_equal(a, b)


class TestEvaluation:
    def test_rate(self):
        ys = np.array([0, 1, 1, 0])
        x = np.zeros((4, 3, 2, 2))
        assert transferability_rate(x, ys, ConstModel(1)) == 50.0

    def test_filter_correct(self):
        class Half:
            def predict(self, x):
                # benign images (all zeros) are right for the first two only
                return np.where(x.reshape(len(x), -1).max(axis=1) > 0, 5, np.array([0, 1, 9, 9])[: len(x)])

        ys = np.array([0, 1, 2, 3])
        benign = np.zeros((4, 3, 2, 2))
        aes = benign.copy()
        aes[0] += 0.1
        assert transferability_rate(aes, ys, Half(), benign=benign) == 50.0
        assert transferability_rate(aes, ys, Half(), benign=benign, filter_correct=False) == 75.0

    def test_empty(self):
        with pytest.raises(ValueError):
            transferability_rate(np.zeros((0, 3, 2, 2)), np.zeros(0, dtype=int), ConstModel(0))

    def test_all_benign_wrong(self):
        with pytest.raises(ValueError):
            transferability_rate(np.zeros((2, 3, 2, 2)), np.array([0, 0]), ConstModel(1), benign=np.zeros((2, 3, 2, 2)))

    def test_timing_report(self, tiny_mlp, images):
        traces = [mifgsm_batch(tiny_mlp, images, np.array([0, 1, 2]), AttackConfig(0.05, iters=2), "dst")[1]
                  for _ in range(2)]
        rep = timing_report(traces)
        assert rep.n_aes == 6 and rep.sample_count == 5 and rep.seconds_per_ae > 0

    def test_timing_report_mixed(self, tiny_mlp, images):
        a = mifgsm_batch(tiny_mlp, images, np.array([0, 1, 2]), AttackConfig(0.05, iters=2), "dst")[1]
        b = mifgsm_batch(tiny_mlp, images, np.array([0, 1, 2]), AttackConfig(0.05, iters=2), "identity")[1]
        with pytest.raises(ValueError):
            timing_report([a, b])

    def test_benign_accuracy_on_augmented(self, tiny_mlp, images):
        acc = benign_accuracy_on_augmented(tiny_mlp, images, np.array([0, 1, 2]), "gsdt")
        assert 0.0 <= acc <= 1.0

    def test_trace_type(self, tiny_mlp, images):
        _, trace = mifgsm_batch(tiny_mlp, images, np.array([0, 1, 2]), AttackConfig(0.05, iters=2), "identity")
        assert isinstance(trace, AttackTrace) and trace.batch_size == 3
