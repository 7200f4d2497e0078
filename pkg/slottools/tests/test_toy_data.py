import numpy as np
import numpy.testing as npt
import pytest
from scipy.stats import chisquare

from .. import toy_data


@pytest.fixture()
def spec():
    return toy_data.SceneSpec(height=8, width=8, feature_dim=6, min_objects=1, max_objects=3, n_categories=3)


def test_scene_is_deterministic(spec):
    a = toy_data.generate(spec, toy_data.scene_rng(spec.seed, toy_data.TRAIN, 5), index=5)
    b = toy_data.generate(spec, toy_data.scene_rng(spec.seed, toy_data.TRAIN, 5), index=5)
    npt.assert_array_equal(a.features, b.features)
    npt.assert_array_equal(a.gt_masks, b.gt_masks)


def test_scene_structure(spec):
    for i in range(20):
        scene = toy_data.GeneratedScenes(spec)[i]
        assert scene.features.shape == (64, 6)
        assert spec.min_objects <= scene.n_objects <= spec.max_objects
        assert scene.gt_masks.sum(axis=0).max() <= 1
        assert np.all(scene.gt_masks.sum(axis=1) >= toy_data.MIN_OBJECT_CELLS)
        assert np.all((scene.categories >= 0) & (scene.categories < spec.n_categories))
        labels = scene.gt_labels
        npt.assert_array_equal(labels > 0, scene.foreground)


def test_noise_free_features_come_from_the_palette(spec):
    spec.noise_sigma = 0.0
    palette = toy_data.category_palette(spec)
    scene = toy_data.generate(spec, 3, palette=palette)
    npt.assert_allclose(scene.features[~scene.foreground], np.tile(palette.background, ((~scene.foreground).sum(), 1)))
    for mask, category in zip(scene.gt_masks, scene.categories):
        rows = scene.features[mask]
        modes = palette.modes[category]
        assert all(np.any(np.all(np.isclose(row, modes), axis=1)) for row in rows)


def test_zero_background(spec):
    spec.background_mode = "zeros"
    spec.noise_sigma = 0.0
    scene = toy_data.generate(spec, 1)
    npt.assert_array_equal(scene.features[~scene.foreground], 0.0)


def test_splits_differ_but_share_palette(spec):
    train = toy_data.GeneratedScenes(spec, split=toy_data.TRAIN)[0]
    held_out = toy_data.eval_split(spec, 2)
    assert held_out[0].split == toy_data.EVAL
    assert not np.array_equal(train.features, held_out[0].features)
    npt.assert_array_equal(toy_data.category_palette(spec).modes, toy_data.GeneratedScenes(spec).palette.modes)


def test_invalid_split():
    with pytest.raises(toy_data.SceneGenerationError):
        toy_data.scene_rng(0, "validation", 0)


def test_infeasible_packing():
    spec = toy_data.SceneSpec(height=2, width=2, feature_dim=2, min_objects=2, max_objects=2)
    with pytest.raises(toy_data.SceneGenerationError):
        toy_data.generate(spec, 0)


@pytest.mark.parametrize(
    "changes",
    [
        {"height": 1},
        {"min_objects": 3, "max_objects": 2},
        {"background_mode": "noise"},
        {"shapes": ("triangle",)},
    ],
)
def test_spec_validation(spec, changes):
    for key, value in changes.items():
        setattr(spec, key, value)
    with pytest.raises(toy_data.SceneGenerationError):
        spec.validate()


def test_spec_dict_round_trip(spec):
    assert toy_data.SceneSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(toy_data.SceneGenerationError):
        toy_data.SceneSpec.from_dict({"colour": 1})


def test_stream_resumes_at_batch(spec):
    full = toy_data.dataset_stream(spec, batch_size=2)
    next(full)
    second = next(full)
    resumed = next(toy_data.dataset_stream(spec, batch_size=2, start_batch=1))
    assert [s.index for s in resumed] == [2, 3]
    for a, b in zip(second, resumed):
        npt.assert_array_equal(a.features, b.features)


def test_finite_source_wraps():
    spec = toy_data.SceneSpec(height=6, width=6, feature_dim=2)
    source = toy_data.GeneratedScenes(spec, size=3)
    assert [s.index for s in toy_data.batch_at(source, 1, 2)] == [2, 0]
    with pytest.raises(IndexError):
        source[3]


def test_prefetcher_matches_stream(spec):
    expected = [[s.index for s in b] for b in (next(toy_data.dataset_stream(spec, batch_size=2)),)]
    with toy_data.BatchPrefetcher(toy_data.dataset_stream(spec, batch_size=2)) as batches:
        first = next(batches)
    assert [[s.index for s in first]] == expected


def test_prefetcher_propagates_errors():
    def failing():
        yield [1]
        raise toy_data.SceneGenerationError("boom")

    with toy_data.BatchPrefetcher(failing()) as batches:
        assert next(batches) == [1]
        with pytest.raises(toy_data.SceneGenerationError):
            next(batches)


def test_object_counts_are_uniform():
    spec = toy_data.SceneSpec(height=12, width=12, feature_dim=6, min_objects=1, max_objects=3, n_categories=3)
    scenes = toy_data.GeneratedScenes(spec)
    counts = np.bincount([scenes[i].n_objects for i in range(600)], minlength=4)[1:]
    assert counts.sum() == 600
    assert chisquare(counts).pvalue > 0.01


def test_more_modes_raise_within_object_variance():
    variances = []
    for n_modes in (1, 2, 3):
        spec = toy_data.SceneSpec(
            height=12, width=12, feature_dim=16, min_objects=1, max_objects=2, n_modes=n_modes, noise_sigma=0.0
        )
        scenes = toy_data.GeneratedScenes(spec)
        per_object = [
            scene.features[mask].var(axis=0).sum() for scene in (scenes[i] for i in range(100)) for mask in scene.gt_masks
        ]
        variances.append(np.mean(per_object))
    assert variances[0] == pytest.approx(0.0, abs=1e-12)
    assert variances[0] < variances[1] < variances[2]


def test_scene_without_objects_is_background(spec):
    spec.min_objects, spec.max_objects, spec.noise_sigma = 0, 0, 0.0
    scene = toy_data.generate(spec, 4)
    assert scene.n_objects == 0 and scene.gt_masks.shape == (0, 64)
    assert not scene.foreground.any()
    npt.assert_array_equal(scene.gt_labels, np.zeros(64))
    npt.assert_array_equal(scene.features, np.tile(toy_data.category_palette(spec).background, (64, 1)))


def test_same_seed_gives_same_batches(spec):
    a = toy_data.dataset_stream(spec, batch_size=3)
    b = toy_data.dataset_stream(toy_data.SceneSpec.from_dict(spec.to_dict()), batch_size=3)
    for _ in range(10):
        for x, y in zip(next(a), next(b)):
            assert (x.index, x.seed) == (y.index, y.seed)
            npt.assert_array_equal(x.features, y.features)
            npt.assert_array_equal(x.gt_masks, y.gt_masks)
            npt.assert_array_equal(x.categories, y.categories)
