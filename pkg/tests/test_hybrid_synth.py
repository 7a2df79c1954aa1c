import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import shape_distance_loops

from deepcontext.geometry import (
    DepthImage,
    OrientedBox3,
    PointCloud,
    TriMesh,
    apply_rigid,
    backproject_depth,
    box_mesh,
    desk_camera,
    fit_mesh_to_box,
    invert_rigid,
    render_mesh_depth,
    sphere_mesh,
)
from deepcontext.hybrid_synth import (
    CLEAR_INFLATION,
    ModelRepository,
    RepoModel,
    SynthesisConfig,
    build_primitive_repository,
    partial_view,
    retrieve_models,
    shape_distance,
    synthesize_scene,
)
from deepcontext.scene_gen import GeneratorConfig, generate_scene
from deepcontext.templates import SceneAnnotation

CAM = desk_camera()


@pytest.fixture(scope="module")
def repo():
    return build_primitive_repository()


@pytest.fixture(scope="module")
def scene():
    return generate_scene(GeneratorConfig(seed=0), 3)


# -- distances ----------------------------------------------------------------


def test_shape_distance_examples():
    p = np.array([[0.0, 0, 0], [1, 2, 3]])
    assert shape_distance(PointCloud(p), PointCloud(p)) == 0
    assert shape_distance(PointCloud([[0, 0, 0]]), PointCloud([[3, 4, 0]])) == 10.0
    with pytest.raises(ValueError):
        shape_distance(PointCloud(np.zeros((0, 3))), PointCloud(p))


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 50), st.integers(1, 50))
def test_shape_distance_matches_loops(seed, n, m):
    rng = np.random.default_rng(seed)
    P, V = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    got = shape_distance(PointCloud(P), PointCloud(V))
    assert got == shape_distance_loops(P, V)
    assert got == shape_distance(PointCloud(V), PointCloud(P))
    assert got >= 0


# -- partial views and retrieval -------------------------------------------------


def test_partial_view_front_face_only():
    box = OrientedBox3([0, 0, 3.0], [1, 1, 1])
    pts = partial_view(box_mesh([0, 0, 0], [1, 1, 1]), box, CAM).points
    assert len(pts) > 0
    assert np.all(np.abs(pts[:, 2] - 2.5) < 1e-9)


def test_partial_view_empty_mesh():
    assert len(partial_view(TriMesh(np.zeros((0, 3))), OrientedBox3([0, 0, 3], [1, 1, 1]), CAM)) == 0


def test_partial_view_sphere_surface():
    m = sphere_mesh(1.0, 24, 48)
    pts = partial_view(m, OrientedBox3([0.1, 0, 4.0], [1.6, 1.6, 1.6]), CAM).points
    fitted = fit_mesh_to_box(m, OrientedBox3([0.1, 0, 4.0], [1.6, 1.6, 1.6]))
    # on the tessellated sphere: every point lies on one of its triangle planes
    d, ids = render_mesh_depth(fitted, CAM, return_ids=True)
    v, u = np.nonzero(d.values > 0)
    tri = fitted.vertices[fitted.triangles[ids[v, u]]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    back = backproject_depth(d, CAM).points
    assert len(pts) == len(back)
    assert np.max(np.abs(np.einsum("ij,ij->i", back - tri[:, 0], n))) <= 1e-6


def three_model_repo():
    return ModelRepository([
        RepoModel("chair", box_mesh([0, 0, 0], [1, 1, 1]), "chair/cube"),
        RepoModel("chair", TriMesh.concat([box_mesh([0, 0, 0], [1, 1, 0.2]), box_mesh([0, 0.8, 0], [1, 1, 1])]),
                  "chair/ell"),
        RepoModel("chair", sphere_mesh(0.5, 8, 16), "chair/ball"),
    ])


def test_self_retrieval_first():
    repo = three_model_repo()
    box = OrientedBox3([0.2, 0.1, 3.0], [0.8, 0.7, 0.9], 0.5)
    for e in repo.entries:
        cloud = partial_view(e.mesh, box, CAM)
        ranked = retrieve_models(cloud, box, CAM, repo, "chair", 3, return_distances=True)
        assert ranked[0][1] == e.model_id
        assert ranked[0][0] < 1e-9
        # ranking ignores point order
        shuffled = PointCloud(np.random.default_rng(0).permutation(cloud.points))
        assert retrieve_models(shuffled, box, CAM, repo, "chair", 3) == [m for _, m in ranked]


def test_retrieval_count_and_unknown_category():
    repo = three_model_repo()
    box = OrientedBox3([0, 0, 3.0], [1, 1, 1])
    cloud = partial_view(repo.entries[0].mesh, box, CAM)
    assert len(retrieve_models(cloud, box, CAM, repo, "chair", 10)) == 3
    assert retrieve_models(cloud, box, CAM, repo, "sofa", 2) == []


def test_repository_dir_round_trip(tmp_path, repo):
    repo.save_dir(tmp_path)
    back = ModelRepository.load_dir(tmp_path)
    assert sorted(e.model_id for e in back.entries) == sorted(e.model_id for e in repo.entries)
    with pytest.raises(ValueError):
        back.add(back.entries[0])


# -- synthesis ----------------------------------------------------------------


def test_empty_annotation_is_identity(scene, repo):
    depth, ann = scene
    empty = SceneAnnotation(ann.scene_type, [], ann.camera, ann.world_from_camera)
    out = synthesize_scene(depth, empty, repo, SynthesisConfig(), 5)
    assert out.values.tobytes() == depth.values.tobytes()


def test_same_seed_identical(scene, repo):
    depth, ann = scene
    a = synthesize_scene(depth, ann, repo, SynthesisConfig(), 11)
    b = synthesize_scene(depth, ann, repo, SynthesisConfig(), 11)
    assert a.values.tobytes() == b.values.tobytes()


def test_outside_boxes_untouched_and_inside_on_model(scene):
    depth, ann = scene
    # one model per category, so the chosen mesh is known
    full = build_primitive_repository()
    repo = ModelRepository([full.of_category(c)[1] for c in full.categories()])
    out = synthesize_scene(depth, ann, repo, SynthesisConfig(shortlist_size=1), 2).values
    T = ann.world_from_camera
    Tcw = invert_rigid(T)
    replaced = [o for o in ann.objects if repo.of_category(o.category)]
    assert replaced
    # pixels whose ray misses every inflated box keep their exact value
    shells = TriMesh.concat([
        fit_mesh_to_box(box_mesh([0, 0, 0], [1, 1, 1]),
                        OrientedBox3(o.box.center, o.box.size * CLEAR_INFLATION, o.box.yaw)).transformed(Tcw)
        for o in replaced])
    miss = render_mesh_depth(shells, CAM).values == 0
    assert np.array_equal(out[miss], depth.values[miss])
    # points now inside a replaced box lie on the fitted models
    meshes = TriMesh.concat([fit_mesh_to_box(repo.of_category(o.category)[0].mesh, o.box) for o in replaced])
    cam_mesh = meshes.transformed(Tcw)
    rendered, ids = render_mesh_depth(cam_mesh, CAM, return_ids=True)
    cloud, (v, u) = backproject_depth(DepthImage(out), CAM, return_pixels=True)
    pts = apply_rigid(T, cloud.points)
    inside = np.zeros(len(pts), bool)
    for o in replaced:
        inside |= o.box.contains(pts)
    assert inside.sum() > 50
    vi, ui = v[inside], u[inside]
    assert np.all(ids[vi, ui] >= 0)
    tri = cam_mesh.vertices[cam_mesh.triangles[ids[vi, ui]]]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    dist = np.abs(np.einsum("ij,ij->i", cloud.points[inside] - tri[:, 0], n))
    assert dist.max() <= 1e-3


def test_empty_shortlist_warns(scene, repo, caplog):
    depth, ann = scene
    with caplog.at_level(logging.WARNING):
        out = synthesize_scene(depth, ann, repo, SynthesisConfig(), 0, shortlists=[[] for _ in ann.objects])
    assert out.values.tobytes() == depth.values.tobytes()
    assert any("no replacement model" in r.message for r in caplog.records)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthesisConfig(shortlist_size=0)
