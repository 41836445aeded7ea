import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotkit.autodiff import IntegrityError
from spotkit.scenes import (FrozenPatchFeatures, SceneGenerationError, SceneSample, SceneSpec, SplitMix64,
                            generate_dataset, generate_scene, majority_vote_labels, patchify,
                            patchify_targets, read_dataset, unpatchify, write_dataset)


def test_splitmix_reference_values():
    # first outputs for seed 1234567 from the published reference implementation
    rng = SplitMix64(1234567)
    assert [rng.next_u64() for _ in range(3)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_splitmix_uniform_in_unit_interval():
    rng = SplitMix64(7)
    u = [rng.uniform() for _ in range(2000)]
    assert min(u) >= 0.0 and max(u) < 1.0
    assert abs(np.mean(u) - 0.5) < 0.03


def test_randint_inclusive_bounds():
    rng = SplitMix64(3)
    draws = {rng.randint(2, 4) for _ in range(500)}
    assert draws == {2, 3, 4}


def test_single_object_scene():
    s = generate_scene(SceneSpec(objects_min=1, objects_max=1), seed=5)
    assert set(np.unique(s.instance_labels)) == {0, 1}


def test_same_seed_same_bytes():
    spec = SceneSpec()
    a, b = generate_scene(spec, 11), generate_scene(spec, 11)
    for f in SceneSample.FIELDS:
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_different_seeds_differ():
    spec = SceneSpec()
    assert generate_scene(spec, 1) != generate_scene(spec, 2)


def test_label_census_1000_scenes():
    data = generate_dataset(SceneSpec(), 1000, seed=0)
    for s in data.samples:
        ids = set(np.unique(s.instance_labels).tolist()) - {0}
        assert 2 <= len(ids) <= 4
        assert ids == set(range(1, len(ids) + 1))
        for i in ids:
            assert (s.instance_labels == i).sum() >= 12
        np.testing.assert_array_equal(s.instance_labels == 0, s.class_labels == 0)


def test_crowded_spec_raises():
    spec = SceneSpec(image_size=8, patch_size=4, objects_min=4, objects_max=4, size_min=8, size_max=8,
                     min_visible=40)
    with pytest.raises(SceneGenerationError):
        generate_scene(spec, 0, max_attempts=20)


def test_invalid_spec():
    with pytest.raises(ValueError):
        SceneSpec(image_size=30, patch_size=4)


def test_background_image_rows_equal_background():
    spec = SceneSpec()
    img = np.empty((32, 32, 3), dtype=np.float32)
    img[:] = spec.background
    rows = patchify(img, 4)
    np.testing.assert_array_equal(rows, np.tile(np.repeat([spec.background], 16, axis=0).ravel(), (64, 1))
                                  .astype(np.float32))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_unpatchify_inverts_patchify(gh, gw, p, seed):
    img = np.random.default_rng(seed).random((gh * p, gw * p, 3))
    np.testing.assert_array_equal(unpatchify(patchify(img, p), p, gh, gw), img)


def test_pixel_targets_are_patch_rows():
    spec = SceneSpec()
    s = generate_scene(spec, 3)
    np.testing.assert_array_equal(s.patch_targets, patchify(s.image, 4))
    assert s.patch_targets.shape == (64, 48)


def test_frozen_features_depend_on_seed():
    s = generate_scene(SceneSpec(), 3)
    a = patchify_targets(s, "frozen_features", 4, FrozenPatchFeatures(48, 32, seed=0))
    b = patchify_targets(s, "frozen_features", 4, FrozenPatchFeatures(48, 32, seed=1))
    assert a.shape == (64, 32) and not np.array_equal(a, b)


def test_frozen_feature_dataset_width():
    data = generate_dataset(SceneSpec(target_mode="frozen_features", feature_width=24), 3, seed=0)
    assert data.targets.shape == (3, 64, 24)


def test_majority_vote_examples():
    uniform = np.full((4, 4), 3)
    assert majority_vote_labels(uniform, 4).tolist() == [3]
    nine = np.zeros((4, 4), dtype=int)
    nine.flat[:9] = 2
    assert majority_vote_labels(nine, 4).tolist() == [2]
    tie = np.ones((4, 4), dtype=int)
    tie.flat[8:] = 3
    assert majority_vote_labels(tie, 4).tolist() == [1]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_majority_vote_matches_counter(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, (8, 12))
    got = majority_vote_labels(labels, 4)
    ref = []
    for r in range(2):
        for c in range(3):
            block = labels[4 * r:4 * r + 4, 4 * c:4 * c + 4].ravel().tolist()
            counts = {v: block.count(v) for v in set(block)}
            top = max(counts.values())
            ref.append(min(v for v, n in counts.items() if n == top))
    assert got.tolist() == ref


def test_dataset_roundtrip(tmp_path):
    data = generate_dataset(SceneSpec(), 10, seed=4)
    write_dataset(data, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert back.spec == data.spec and back.seed == data.seed
    assert all(a == b for a, b in zip(back.samples, data.samples))


def test_dataset_regeneration_is_bytewise(tmp_path):
    write_dataset(generate_dataset(SceneSpec(), 4, seed=9), tmp_path / "a")
    write_dataset(generate_dataset(SceneSpec(), 4, seed=9), tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_manifest_count_mismatch(tmp_path):
    write_dataset(generate_dataset(SceneSpec(), 3, seed=0), tmp_path / "d")
    man = tmp_path / "d" / "manifest.json"
    meta = json.loads(man.read_text())
    meta["count"] = 4
    man.write_text(json.dumps(meta))
    with pytest.raises(IntegrityError):
        read_dataset(tmp_path / "d")


def test_truncated_file_named(tmp_path):
    write_dataset(generate_dataset(SceneSpec(), 3, seed=0), tmp_path / "d")
    victim = sorted((tmp_path / "d").glob("*.tensor"))[4]
    victim.write_bytes(victim.read_bytes()[:-10])
    with pytest.raises(IntegrityError, match=victim.name):
        read_dataset(tmp_path / "d")


def test_spec_hash_checked(tmp_path):
    write_dataset(generate_dataset(SceneSpec(), 2, seed=0), tmp_path / "d")
    man = tmp_path / "d" / "manifest.json"
    meta = json.loads(man.read_text())
    meta["spec"]["objects_max"] = 3
    man.write_text(json.dumps(meta))
    with pytest.raises(IntegrityError):
        read_dataset(tmp_path / "d")
