import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from bayesseg import densenet as D
from bayesseg import surrogate as S
from bayesseg import tensor as T
from bayesseg import training as Tr
from bayesseg.evaluation import predict_all
from bayesseg.io import read_btsr, read_mask
from bayesseg.synthdata import SceneSpec, generate
from bayesseg.uncertainty import UncertaintyMaps, entropy


def random_maps(rng, h, w, nb):
    p = rng.random((h, w, nb)) + 0.01
    p /= p.sum(-1, keepdims=True)
    csv = 0.05 * rng.random((h, w, nb))
    return UncertaintyMaps(p, csv, entropy(p), csv.mean(-1))


class TestBuildInput:
    def test_rgb_two_classes(self):
        rng = np.random.default_rng(0)
        assert S.build_input(rng.random((4, 6, 3)), random_maps(rng, 4, 6, 2)).shape == (4, 6, 8)

    def test_gray_six_classes(self):
        rng = np.random.default_rng(1)
        assert S.build_input(rng.random((4, 6, 1)), random_maps(rng, 4, 6, 6)).shape == (4, 6, 14)

    def test_channel_order(self):
        rng = np.random.default_rng(2)
        img, maps = rng.random((3, 3, 3)), random_maps(rng, 3, 3, 2)
        x = S.build_input(img, maps)
        np.testing.assert_allclose(x[..., :3], img, rtol=1e-6)
        np.testing.assert_allclose(x[..., 3:5], maps.mean, rtol=1e-6)
        np.testing.assert_allclose(x[..., 5:7], maps.csv, rtol=1e-6)
        np.testing.assert_allclose(x[..., 7], maps.entropy, rtol=1e-6)

    def test_zero_uncertainty_sits_at_floor(self):
        rng = np.random.default_rng(3)
        train = [random_maps(rng, 4, 4, 2) for _ in range(3)]
        norm = S.fit_normalization(train)
        p = np.zeros((4, 4, 2))
        p[..., 0] = 1.0
        zero = UncertaintyMaps(p, np.zeros((4, 4, 2)), np.zeros((4, 4)), np.zeros((4, 4)))
        img = rng.random((4, 4, 3))
        x = S.build_input(img, zero, norm)
        np.testing.assert_allclose(x[..., :3], img, rtol=1e-6)
        # zero variance and entropy map to the normalized image of 0, the same at every pixel
        floor = -norm.minimum[2:] / norm.scale()[2:]
        np.testing.assert_allclose(x[..., 5:], np.broadcast_to(floor, (4, 4, 3)), atol=1e-6)

    def test_normalized_training_channels_span_unit_interval(self):
        rng = np.random.default_rng(4)
        train = [random_maps(rng, 5, 5, 3) for _ in range(4)]
        norm = S.fit_normalization(train)
        xs = np.stack([S.build_input(np.zeros((5, 5, 1)), m, norm)[..., 1:] for m in train])
        np.testing.assert_allclose(xs.min(axis=(0, 1, 2)), 0.0, atol=1e-6)
        np.testing.assert_allclose(xs.max(axis=(0, 1, 2)), 1.0, atol=1e-6)

    def test_constant_channel_does_not_divide_by_zero(self):
        maps = UncertaintyMaps(np.full((2, 2, 2), 0.5), np.zeros((2, 2, 2)), np.full((2, 2), np.log(2)),
                               np.zeros((2, 2)))
        x = S.build_input(np.zeros((2, 2, 1)), maps, S.fit_normalization([maps]))
        assert np.all(np.isfinite(x)) and np.all(x[..., 1:] == 0)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(5)
        with pytest.raises(T.DimensionError, match="spatial"):
            S.build_input(rng.random((4, 5, 3)), random_maps(rng, 4, 6, 2))

    def test_normalization_channel_count(self):
        rng = np.random.default_rng(6)
        norm = S.fit_normalization([random_maps(rng, 2, 2, 2)])
        with pytest.raises(T.DimensionError, match="normalization"):
            S.build_input(rng.random((2, 2, 3)), random_maps(rng, 2, 2, 6), norm)

    @given(seed=st.integers(0, 2**32 - 1), nb=st.sampled_from([2, 6]), c=st.sampled_from([1, 3]))
    @settings(max_examples=40, deadline=None)
    def test_split_inverts_build(self, seed, nb, c):
        rng = np.random.default_rng(seed)
        img, maps = rng.random((3, 4, c)), random_maps(rng, 3, 4, nb)
        norm = S.fit_normalization([maps, random_maps(rng, 3, 4, nb)])
        image, mean, csv, ent = S.split_input(S.build_input(img, maps, norm), c, nb, norm)
        np.testing.assert_allclose(image, img, atol=1e-6)
        np.testing.assert_allclose(mean, maps.mean, atol=1e-6)
        np.testing.assert_allclose(csv, maps.csv, atol=1e-6)
        np.testing.assert_allclose(ent, maps.entropy, atol=1e-5)

    def test_normalization_text(self):
        norm = S.Normalization(np.array([0.0, 0.1]), np.array([1.0, 0.5]))
        assert norm.to_text(3).splitlines() == ["channel 3: min = 0.0 max = 1.0", "channel 4: min = 0.1 max = 0.5"]


def test_surrogate_spec_changes_only_input_layer():
    base = D.TINY.replace(num_classes=6, input_channels=3)
    sur = S.surrogate_spec(base)
    assert sur.input_channels == 3 + 2 * 6 + 1
    assert sur.replace(input_channels=3) == base


@pytest.fixture(scope="module")
def run():
    images, masks = generate(SceneSpec(task="component", width=16, height=16, count=10, seed=1))
    sp = Tr.split(10, 0)
    spec = D.NetworkSpec(db_layer_counts=(1, 1, 1), growth_rate=3, stem_filters=4, num_classes=6)
    base = D.build(spec, 0)
    before = base.to_bytes()
    cfg = Tr.TrainConfig(lr0=1e-3, max_epochs=2, patience=2, val_samples=2)
    res = S.run_surrogate_pipeline(base, spec, images, masks, sp, cfg, n_samples=3, seed=0)
    return dict(images=images, masks=masks, split=sp, spec=spec, base=base, before=before, res=res)


class TestPipeline:
    def test_base_weights_untouched(self, run):
        assert run["base"].to_bytes() == run["before"]

    def test_normalization_from_train_split_only(self, run):
        _, maps = predict_all(run["base"], run["spec"], run["images"], list(range(10)), 3, 0)
        expected = S.fit_normalization([maps[i] for i in run["split"].train])
        np.testing.assert_array_equal(run["res"].normalization.minimum, expected.minimum)
        np.testing.assert_array_equal(run["res"].normalization.maximum, expected.maximum)

    def test_inputs_reproducible(self, run):
        images, masks, sp = run["images"], run["masks"], run["split"]
        cfg = Tr.TrainConfig(lr0=1e-3, max_epochs=1, patience=1, val_samples=2)
        again = S.run_surrogate_pipeline(run["base"], run["spec"], images, masks, sp, cfg, n_samples=3, seed=0)
        for a, b in zip(run["res"].inputs, again.inputs):
            assert a.tobytes() == b.tobytes()

    def test_paired_reports_share_classes(self, run):
        res = run["res"]
        assert res.base_eval.report.num_classes == res.surrogate_eval.report.num_classes == 6
        assert res.iou_difference == pytest.approx(
            res.surrogate_eval.report.mean("iou") - res.base_eval.report.mean("iou"))
        assert res.spec.input_channels == 16

    def test_surrogate_dataset_files(self, run, tmp_path):
        res = run["res"]
        S.write_surrogate_dataset(tmp_path, res.inputs, run["masks"], res.normalization, 3)
        np.testing.assert_array_equal(read_btsr(tmp_path / "inputs" / "0003.btsr"), res.inputs[3])
        np.testing.assert_array_equal(read_mask(str(tmp_path / "masks" / "0003.pgm")), run["masks"][3])
        lines = (tmp_path / "normalization.txt").read_text().splitlines()
        assert lines[0] == "image_channels = 3" and len(lines) == 1 + 13
