import numpy as np
import pytest

from calibflow.dataio import SceneSpec, derive_instance_set_2d, generate_scene
from calibflow.errors import InsufficientDataError
from calibflow.semantic_init import (
    Instance,
    InstanceSet2D,
    InstanceSet3D,
    centroid_2d,
    centroid_3d,
    format_instances,
    match_centroids,
    parse_instances,
    read_instances,
    semantic_initialize,
    write_instances,
)

from conftest import rot_err_rad


def _inst(cat, i, count, c):
    return Instance(cat, i, count, c)


def test_centroids():
    assert np.array_equal(centroid_2d([(0, 0), (2, 0), (1, 3)]), [1, 1])
    assert np.array_equal(centroid_2d([(4, 5)]), [4, 5])
    assert np.array_equal(centroid_3d([(1, 2, 3), (3, 2, 1)]), [2, 2, 2])
    with pytest.raises(ValueError, match="empty instance"):
        centroid_3d(np.zeros((0, 3)))


def test_centroid_permutation_invariant(rng):
    p = rng.normal(size=(50, 3))
    assert np.allclose(centroid_3d(p), centroid_3d(p[rng.permutation(50)]), atol=1e-15)


def test_instance_validation():
    with pytest.raises(ValueError):
        Instance("tree", 0, 1, [0, 0])
    with pytest.raises(ValueError):
        Instance("car", 0, 0, [0, 0])
    with pytest.raises(ValueError):
        InstanceSet2D([Instance("car", 0, 1, [0, 0, 0])])


def test_match_equal_counts_in_order():
    a = InstanceSet2D([_inst("car", k, 10, [u, 100]) for k, u in enumerate([500, 100, 300])])
    # lateral sign -1: larger Y is further left
    b = InstanceSet3D([_inst("car", k, 10, [10, y, 0]) for k, y in enumerate([-3, 4, 0])])
    pairs = match_centroids(a, b)
    assert [(p.image.id, p.lidar.id) for p in pairs] == [(1, 1), (2, 2), (0, 0)]


def test_match_lateral_sign_flip():
    a = InstanceSet2D([_inst("car", k, 10, [u, 100]) for k, u in enumerate([100, 500])])
    b = InstanceSet3D([_inst("car", k, 10, [10, y, 0]) for k, y in enumerate([-3, 3])])
    assert [p.lidar.id for p in match_centroids(a, b, lateral_sign=1.0)] == [0, 1]
    assert [p.lidar.id for p in match_centroids(a, b)] == [1, 0]


def test_match_unseen_middle_instance():
    # image: large, small, medium left to right; lidar sees only the outer two
    a = InstanceSet2D(
        [_inst("car", 0, 500, [100, 50]), _inst("car", 1, 50, [300, 50]), _inst("car", 2, 200, [600, 50])]
    )
    b = InstanceSet3D([_inst("car", 10, 300, [10, 5, 0]), _inst("car", 11, 100, [10, -5, 0])])
    pairs = match_centroids(a, b)
    assert [(p.image.id, p.lidar.id) for p in pairs] == [(0, 10), (2, 11)]


def test_match_more_lidar_than_image():
    a = InstanceSet2D([_inst("person", 0, 40, [200, 50])])
    b = InstanceSet3D(
        [_inst("person", 1, 5, [10, 2, 0]), _inst("person", 2, 80, [10, 0, 0]), _inst("person", 3, 9, [10, -2, 0])]
    )
    assert [p.lidar.id for p in match_centroids(a, b)] == [2]


def test_match_never_crosses_categories():
    a = InstanceSet2D([_inst("car", 0, 10, [100, 50]), _inst("bus", 1, 10, [300, 50])])
    b = InstanceSet3D([_inst("car", 2, 10, [10, 0, 0]), _inst("truck", 3, 10, [10, -1, 0])])
    pairs = match_centroids(a, b)
    assert len(pairs) == 1 and pairs[0].image.category == pairs[0].lidar.category == "car"
    with pytest.raises(ValueError, match="no matches"):
        match_centroids(InstanceSet2D([a.instances[1]]), InstanceSet3D([b.instances[1]]))


def _scene(n, seed):
    sc = generate_scene(SceneSpec(points=2000, instances=n, rng_seed=seed))
    a = derive_instance_set_2d(sc.instances, sc.intrinsics, sc.t_gt, exact_centroids=True)
    return sc, a


def _err(T, G):
    return np.linalg.norm(T.translation - G.translation), rot_err_rad(T.rotation, G.rotation)


@pytest.mark.parametrize("n", [3, 4, 5, 8])
def test_semantic_initialize_exact(n):
    for seed in range(5):
        sc, a = _scene(n, seed)
        T = semantic_initialize(a, sc.instances, sc.intrinsics)
        et, er = _err(T, sc.t_gt)
        assert et < 1e-6 and er < 1e-6


def test_semantic_initialize_rejects_injected_mismatch():
    sc, a = _scene(8, 11)
    inst = list(a.instances)
    inst[3] = Instance(inst[3].category, inst[3].id, inst[3].count, inst[3].centroid + [0, 60])
    T = semantic_initialize(InstanceSet2D(inst), sc.instances, sc.intrinsics)
    et, er = _err(T, sc.t_gt)
    assert et < 1e-6 and er < 1e-6


def test_semantic_initialize_too_few():
    sc, a = _scene(2, 0)
    with pytest.raises(InsufficientDataError, match="insufficient instances"):
        semantic_initialize(a, sc.instances, sc.intrinsics)


def test_perspective_bias_without_exact_centroids():
    sc = generate_scene(SceneSpec(points=3000, instances=8, rng_seed=2))
    a = derive_instance_set_2d(sc.instances, sc.intrinsics, sc.t_gt)
    T = semantic_initialize(a, sc.instances, sc.intrinsics)
    et, er = _err(T, sc.t_gt)
    # mask centroids differ from projected 3D centroids, so only a coarse pose
    assert et < 1.0 and np.degrees(er) < 5.0


def test_instance_text_round_trip(tmp_path):
    sc, a = _scene(4, 3)
    for s, dim in ((a, 2), (sc.instances, 3)):
        p = tmp_path / f"i{dim}.txt"
        write_instances(p, s)
        back = read_instances(p, dim)
        assert len(back) == len(s)
        for x, y in zip(s, back):
            assert (x.category, x.id, x.count) == (y.category, y.id, y.count)
            assert np.array_equal(x.centroid, y.centroid)
            assert np.array_equal(x.members, y.members)


def test_instance_text_without_members_and_comments():
    text = "# header\ncar 3 120 10.5 20.25  # trailing\n\nbus 4 7 1 2\n"
    s = parse_instances(text, 2)
    assert [i.id for i in s] == [3, 4] and s.instances[0].members is None
    assert "car 3 120" in format_instances(s)


def test_instance_text_errors():
    with pytest.raises(ValueError):
        parse_instances("car 1 2 3\n", 2)
    with pytest.raises(ValueError):
        parse_instances("car 1 2 0 0 1 1\n", 2)
    with pytest.raises(ValueError):
        parse_instances("car x 2 0 0\n", 2)
