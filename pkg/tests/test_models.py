import numpy as np
import pytest

from augtransfer.models import (
    SHAPES,
    Dataset,
    EnsembleSurrogate,
    Model,
    generate_shapes_dataset,
    load_model,
    save_model,
    train,
)


def fd_input_grad(model, x, y, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (model.loss(xp[None], np.array([y]))[0] - model.loss(xm[None], np.array([y]))[0]) / (2 * h)
    return g


class TestGradients:
    @pytest.mark.parametrize("fixture", ["tiny_mlp", "tiny_cnn"])
    def test_input_gradient_matches_finite_differences(self, fixture, request):
        model = request.getfixturevalue(fixture)
        x = np.random.default_rng(3).uniform(size=(3, 8, 8))
        _, g = model.loss_and_grad(x[None], np.array([2]))
        ref = fd_input_grad(model, x, 2)
        rel = np.linalg.norm(g[0] - ref) / np.linalg.norm(ref)
        assert rel < 1e-6

    def test_batch_equals_single(self, tiny_cnn, images):
        y = np.array([0, 1, 3])
        loss, g = tiny_cnn.loss_and_grad(images, y)
        for b in range(3):
            lb, gb = tiny_cnn.loss_and_grad(images[b : b + 1], y[b : b + 1])
            assert loss[b] == pytest.approx(lb[0], rel=1e-12)
            np.testing.assert_allclose(g[b], gb[0], rtol=1e-10, atol=1e-14)

    def test_bad_label(self, tiny_mlp, images):
        with pytest.raises(ValueError):
            tiny_mlp.loss_and_grad(images, np.array([0, 1, 4]))

    def test_ensemble_is_mean(self, tiny_mlp, tiny_cnn, images):
        y = np.array([0, 1, 2])
        ens = EnsembleSurrogate([tiny_mlp, tiny_cnn])
        l1, g1 = tiny_mlp.loss_and_grad(images, y)
        l2, g2 = tiny_cnn.loss_and_grad(images, y)
        l, g = ens.loss_and_grad(images, y)
        np.testing.assert_allclose(l, (l1 + l2) / 2)
        np.testing.assert_allclose(g, (g1 + g2) / 2)

    def test_unknown_arch(self):
        with pytest.raises(ValueError):
            Model.create("resnet", (3, 8, 8), 4)


class TestDataset:
    def test_shapes_dataset(self):
        d = generate_shapes_dataset(5, 8, 16, rng=0)
        assert d.images.shape == (40, 3, 16, 16)
        assert d.images.min() >= 0 and d.images.max() <= 1
        np.testing.assert_array_equal(np.bincount(d.labels), [5] * 8)

    def test_deterministic(self):
        a = generate_shapes_dataset(3, 4, 16, rng=7)
        b = generate_shapes_dataset(3, 4, 16, rng=7)
        np.testing.assert_array_equal(a.images, b.images)

    def test_shape_color_mode(self):
        d = generate_shapes_dataset(2, 16, 16, rng=0, label_by="shape_color")
        assert d.num_classes == 16

    @pytest.mark.parametrize("kw", [dict(size=8), dict(classes=len(SHAPES) + 1), dict(classes=1),
                                    dict(label_by="colour")])
    def test_invalid(self, kw):
        args = dict(n_per_class=2, classes=4, size=16)
        args.update(kw)
        with pytest.raises(ValueError):
            generate_shapes_dataset(**args)

    def test_split_is_partition(self):
        d = generate_shapes_dataset(5, 4, 16, rng=0)
        tr, te = d.split(0.75, rng=1)
        assert len(tr) == 15 and len(te) == 5

    def test_label_validation(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 3, 4, 4)), np.array([0, 5]), 3)


class TestTraining:
    def test_training_beats_chance(self):
        d = generate_shapes_dataset(40, 4, 16, rng=0)
        m = train(Model.create("mlp", d.input_shape, 4, rng=0), d, epochs=15, lr=0.01, rng=0)
        assert m.meta["train_accuracy"] > 0.6

    def test_augment_hook_is_called(self):
        d = generate_shapes_dataset(4, 2, 16, rng=0)
        calls = []

        def aug(x, gen):
            calls.append(len(x))
            return x

        train(Model.create("mlp", d.input_shape, 2, rng=0), d, epochs=2, rng=0, batch_size=4, augment=aug)
        assert sum(calls) == 2 * len(d)

    def test_empty_dataset(self, tiny_mlp):
        empty = Dataset(np.zeros((0, 3, 8, 8)), np.zeros(0, dtype=int), 4)
        with pytest.raises(ValueError):
            train(tiny_mlp, empty)

    def test_checkpoint_round_trip(self, tmp_path, tiny_cnn, images):
        save_model(tiny_cnn, tmp_path / "m")
        back = load_model(tmp_path / "m")
        np.testing.assert_array_equal(back.logits(images), tiny_cnn.logits(images))

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "nothing")
