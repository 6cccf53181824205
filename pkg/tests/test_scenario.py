import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfapclust.errors import ConfigError, DataError
from rfapclust.scenario import (CLASS_NAMES, DESK_GRID, PERMUTATIONS, AugmentParams, Box,
                                GeneratorConfig, GridConfig, ScenarioDataset, augment,
                                build_grid_frame, generate_synthetic, inverse_order,
                                permutation_index, permutation_order, render_scene,
                                sample_scene, shuffle_temporal, split_dataset)


def brute_force_grid(boxes, grid):
    # cell centres computed from scratch, one cell at a time
    out = np.zeros((grid.rows, grid.cols))
    for i in range(grid.rows):
        lat = grid.rows * grid.cell_width / 2 - (i + 0.5) * grid.cell_width
        for j in range(grid.cols):
            lon = -grid.rear_range + (j + 0.5) * grid.cell_length
            for b in boxes:
                if abs(lon - b.x) <= b.length / 2 and abs(lat - b.y) <= b.width / 2:
                    out[i, j] = 1.0
    return out


# -- grid config ------------------------------------------------------------

def test_grid_spans():
    g = GridConfig(rows=30, cols=200, cell_width=0.5, cell_length=1.0, rear_range=50.0)
    assert g.span_lateral == 15.0 and g.span_longitudinal == 200.0
    assert g.shape == (4, 30, 200)
    assert np.allclose(g.times(), [-1.5, -1.0, -0.5, 0.0])


@pytest.mark.parametrize("kw", [{"rows": 0}, {"n_timesteps": 1}, {"dt": 0.0},
                                {"rear_range": 1e6}])
def test_grid_config_rejects(kw):
    with pytest.raises(ConfigError):
        GridConfig(**kw)


# -- rasterisation ------------------------------------------------------------

def test_empty_scene_all_free():
    assert (build_grid_frame([], (0.0, 0.0), DESK_GRID) == 0.0).all()


def test_centred_box_matches_brute_force():
    g = DESK_GRID
    mid = g.span_longitudinal / 2 - g.rear_range
    box = Box(x=mid, y=0.0, length=4.0, width=2.0)
    got = build_grid_frame([box], (0.0, 0.0), g)
    assert np.array_equal(got, brute_force_grid([box], g))
    assert got.sum() > 0


@settings(max_examples=40, deadline=None)
@given(x=st.floats(-60, 110), y=st.floats(-9, 9), length=st.floats(0.5, 12),
       width=st.floats(0.5, 4))
def test_random_box_matches_brute_force(x, y, length, width):
    box = Box(x, y, length, width)
    assert np.array_equal(build_grid_frame([box], (0.0, 0.0), DESK_GRID),
                          brute_force_grid([box], DESK_GRID))


def test_box_outside_span_is_empty():
    g = DESK_GRID
    far = Box(x=g.span_longitudinal + 50, y=0.0, length=4.5, width=1.8)
    assert np.array_equal(build_grid_frame([far], (0.0, 0.0), g),
                          build_grid_frame([], (0.0, 0.0), g))


def test_invisible_rows_are_unknown():
    grid = build_grid_frame([], (0.0, 0.0), DESK_GRID, visible_lateral=(-3.0, 3.0))
    lat, _ = DESK_GRID.cell_centres()
    hidden = (lat < -3) | (lat > 3)
    assert (grid[hidden] == 0.5).all() and (grid[~hidden] == 0.0).all()


def test_non_finite_pose_rejected():
    with pytest.raises(DataError):
        build_grid_frame([], (np.nan, 0.0), DESK_GRID)
    with pytest.raises(DataError):
        build_grid_frame([Box(np.inf, 0, 4, 2)], (0.0, 0.0), DESK_GRID)


@settings(max_examples=30, deadline=None)
@given(x=st.floats(-20, 60), y=st.floats(-5, 5), shift=st.integers(-6, 6))
def test_occupied_count_invariant_under_cell_translation(x, y, shift):
    # shifting a scene by whole cells away from the borders keeps the count
    g = DESK_GRID
    boxes = [Box(x, y, 4.6, 1.9), Box(x + 15.0, -y, 4.4, 1.8)]
    moved = [Box(b.x + shift * g.cell_length, b.y, b.length, b.width) for b in boxes]
    a = build_grid_frame(boxes, (0.0, 0.0), g)
    b = build_grid_frame(moved, (0.0, 0.0), g)
    assert a.sum() == b.sum()


# -- synthetic generator -------------------------------------------------------

def test_generator_counts_and_determinism():
    cfg = GeneratorConfig(seed=1, n_per_class=10)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert len(a) == 70
    assert np.bincount(a.truth()).tolist() == [10] * 7
    assert a.tensors.tobytes() == b.tensors.tobytes()
    assert a.ids == b.ids


def test_generator_values_three_valued():
    ds = generate_synthetic(GeneratorConfig(seed=3, n_per_class=5))
    assert set(np.unique(ds.tensors)) <= {0.0, 0.5, 1.0}
    assert ds.tensors.shape[1:] == DESK_GRID.shape


def test_generator_class_streams_independent():
    # a class's scenes do not depend on which other classes are requested
    full = generate_synthetic(GeneratorConfig(seed=2, n_per_class=4))
    one = generate_synthetic(GeneratorConfig(seed=2, n_per_class=4, class_list=("following",)))
    k = CLASS_NAMES.index("following")
    assert np.array_equal(full.tensors[full.truth() == k], one.tensors)


def test_generator_rejects_bad_class_list():
    with pytest.raises(ConfigError):
        generate_synthetic(GeneratorConfig(class_list=()))
    with pytest.raises(ConfigError):
        generate_synthetic(GeneratorConfig(class_list=("drifting",)))


def occupied_rows(frame):
    return tuple(np.flatnonzero((frame == 1.0).any(axis=1)))


def lateral_centroid(frame, grid=DESK_GRID):
    lat, _ = grid.cell_centres()
    rows = np.flatnonzero((frame == 1.0).any(axis=1))
    return lat[rows].mean()


@pytest.mark.parametrize("seed", range(10))
def test_following_leader_keeps_its_rows(seed):
    scene = sample_scene("following", np.random.default_rng(seed))
    tensor = render_scene(scene, tracks=[scene.find("leader")])
    rows = [occupied_rows(f) for f in tensor]
    assert rows[0] and all(r == rows[0] for r in rows)


@pytest.mark.parametrize("seed", range(10))
def test_ego_lane_change_left_moves_leader_one_lane(seed):
    # relative to the ego, the former leader drifts one lane to the right
    scene = sample_scene("ego_lane_change_left", np.random.default_rng(seed))
    ego = render_scene(scene, tracks=[scene.ego])
    lead = render_scene(scene, tracks=[scene.find("leader")])
    rel = [lateral_centroid(lead[k]) - lateral_centroid(ego[k]) for k in (0, -1)]
    assert abs((rel[0] - rel[1]) - scene.lane_width) <= DESK_GRID.cell_width


# -- permutations ----------------------------------------------------------------

def test_permutation_enumeration_bijective():
    assert len(PERMUTATIONS) == 24 == len(set(PERMUTATIONS))
    assert list(PERMUTATIONS) == sorted(PERMUTATIONS)
    for c in range(24):
        assert permutation_index(permutation_order(c)) == c
    with pytest.raises(ConfigError):
        permutation_index((1, 1, 2, 3))


def test_shuffle_examples():
    t = np.random.default_rng(0).random((4, 3, 5))
    assert np.array_equal(shuffle_temporal(t, (1, 2, 3, 4)), t)
    out = shuffle_temporal(t, (4, 2, 3, 1))
    assert np.array_equal(out[0], t[3]) and np.array_equal(out[3], t[0])
    p = (3, 1, 4, 2)
    assert np.array_equal(shuffle_temporal(shuffle_temporal(t, p), inverse_order(p)), t)


def test_shuffle_needs_four_frames():
    with pytest.raises(DataError):
        shuffle_temporal(np.zeros((3, 2, 2)), (1, 2, 3, 4))


@given(p=st.sampled_from(PERMUTATIONS), q=st.sampled_from(PERMUTATIONS))
def test_shuffle_is_group_action(p, q):
    t = np.arange(4 * 2 * 3, dtype=float).reshape(4, 2, 3)
    composed = tuple(p[k - 1] for k in q)
    assert np.array_equal(shuffle_temporal(shuffle_temporal(t, p), q),
                          shuffle_temporal(t, composed))


# -- augmentation -------------------------------------------------------------------

def test_augment_noop_params():
    t = generate_synthetic(GeneratorConfig(seed=0, n_per_class=1)).tensors[0]
    assert np.array_equal(augment(t, AugmentParams(0.0, 0.0), 5), t)


def test_augment_deterministic_and_bounded():
    t = generate_synthetic(GeneratorConfig(seed=0, n_per_class=1)).tensors[2]
    a = augment(t, AugmentParams(0.1, 0.05), 7)
    b = augment(t, AugmentParams(0.1, 0.05), 7)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, t)


def test_augment_erase_patch_spans_all_frames():
    t = np.zeros((4, 16, 64), dtype=np.float32)
    out = augment(t, AugmentParams(0.1, 0.0), 3)
    erased = out == 0.5
    assert (erased == erased[0]).all()
    frac = erased[0].mean()
    assert abs(frac - 0.1) < 0.01


def test_augment_noise_mean_zero():
    sigma = 0.05
    t = np.zeros((4, 16, 64))
    out = augment(t, AugmentParams(0.0, sigma), 11, clip=False)
    assert abs(out.mean()) < 3 * sigma / np.sqrt(out.size)


def test_augment_rejects_bad_params():
    with pytest.raises(ConfigError):
        augment(np.zeros((4, 2, 2)), AugmentParams(1.0, 0.0), 0)


# -- datasets -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic(GeneratorConfig(seed=4, n_per_class=10))


def test_split_sizes(small_ds):
    tr, va, te = split_dataset(small_ds, (0.7, 0.1, 0.2), seed=0)
    assert (len(tr), len(va), len(te)) == (49, 7, 14)
    for part, n in ((tr, 7), (va, 1), (te, 2)):
        assert np.bincount(part.truth(), minlength=7).tolist() == [n] * 7


def test_split_whole_train(small_ds):
    tr, va, te = split_dataset(small_ds, (1.0, 0.0, 0.0), seed=0)
    assert sorted(tr.ids) == sorted(small_ds.ids) and len(va) == len(te) == 0


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_split_is_partition(small_ds, seed):
    parts = split_dataset(small_ds, (0.7, 0.1, 0.2), seed=seed)
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids) == sorted(small_ds.ids)
    assert len(set(ids)) == len(ids)


def test_split_errors(small_ds):
    with pytest.raises(ConfigError):
        split_dataset(small_ds, (0.5, 0.1, 0.1))
    tiny = small_ds.subset(np.flatnonzero(small_ds.truth() == 0)[:2])
    with pytest.raises(DataError):
        split_dataset(tiny, (0.7, 0.1, 0.2))


def test_label_access_is_counted(small_ds):
    ds = small_ds.with_label_split([0, 1, 2, 3])
    assert ds.label_reads == 0
    ds.unlabeled(), ds.unlabeled_ids(), ds.restrict([0, 4]), ds.subset([0, 1])
    assert ds.label_reads == 0
    x, y = ds.labeled()
    assert ds.label_reads == 1
    assert len(x) == 40 and set(y) == {0, 1, 2, 3}
    assert ds.K == 4 and ds.Q_truth == 3
    assert set(ds.unlabeled_truth()) == {4, 5, 6}


def test_restrict_keeps_only_requested_classes(small_ds):
    r = small_ds.restrict([2, 5])
    assert len(r) == 20 and set(r.truth()) == {2, 5}


def test_save_load_round_trip(tmp_path, small_ds):
    ds = small_ds.with_label_split([0, 1])
    blob, manifest = ds.save(tmp_path / "set")
    raw = blob.read_bytes()
    assert raw == ds.tensors.astype("<f4").tobytes()
    assert len(raw) == len(ds) * 4 * 16 * 64 * 4
    back = ScenarioDataset.load(tmp_path / "set")
    assert back.tensors.tobytes() == ds.tensors.tobytes()
    assert back.ids == ds.ids and back.labeled_classes == (0, 1)
    assert np.array_equal(back.truth(), ds.truth())


def test_load_rejects_truncated_blob(tmp_path, small_ds):
    blob, _ = small_ds.save(tmp_path / "set")
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(DataError):
        ScenarioDataset.load(tmp_path / "set")
    with pytest.raises(DataError):
        ScenarioDataset.load(tmp_path / "missing")
