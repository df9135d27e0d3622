import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparseseg.scene import (
    LabelError,
    PLYError,
    PredictionField,
    PseudoLabelSet,
    SceneMesh,
    SparseLabelSet,
    load_pseudo_labels,
    load_scene,
    load_sparse_labels,
    save_pseudo_labels,
    save_scene,
    save_sparse_labels,
)

STRIP = b"""ply
format ascii 1.0
element vertex 4
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
element face 2
property list uchar int vertex_indices
end_header
0 0 0 255 0 0
1 0 0 0 255 0
0 1 0 0 0 255
1 1 0 10 20 30
3 0 1 2
3 1 3 2
"""


def random_mesh(rng, n=50, f=80, colors=True, labels=True):
    v = rng.normal(size=(n, 3)).astype(np.float32).astype(np.float64)
    faces = np.array([rng.choice(n, 3, replace=False) for _ in range(f)])
    c = rng.integers(0, 256, size=(n, 3)).astype(np.float64) if colors else None
    lab = rng.integers(0, 20, size=n) if labels else None
    return SceneMesh(v, faces, c, "rand", lab)


def test_ascii_strip(tmp_path):
    p = tmp_path / "strip.ply"
    p.write_bytes(STRIP)
    m = load_scene(p)
    assert m.num_vertices == 4 and m.num_faces == 2
    assert m.scene_id == "strip"
    np.testing.assert_array_equal(m.faces, [[0, 1, 2], [1, 3, 2]])
    np.testing.assert_array_equal(m.colors[3], [10, 20, 30])


def test_face_index_out_of_range(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_bytes(STRIP.replace(b"3 1 3 2", b"3 1 9 2"))
    with pytest.raises(PLYError) as err:
        load_scene(p)
    assert err.value.offset > 0


def test_truncated_binary_reports_offset(tmp_path):
    rng = np.random.default_rng(0)
    p = tmp_path / "t.ply"
    save_scene(random_mesh(rng), p)
    data = p.read_bytes()
    p.write_bytes(data[:-7])
    with pytest.raises(PLYError) as err:
        load_scene(p)
    assert 0 < err.value.offset <= len(data)


def test_malformed_header(tmp_path):
    p = tmp_path / "h.ply"
    p.write_bytes(b"ply\nformat ascii 1.0\nelement vertex two\nend_header\n")
    with pytest.raises(PLYError):
        load_scene(p)
    p.write_bytes(b"not a ply file")
    with pytest.raises(PLYError) as err:
        load_scene(p)
    assert err.value.offset == 0


@pytest.mark.parametrize("binary", [True, False])
def test_round_trip_bitwise(tmp_path, binary):
    rng = np.random.default_rng(1)
    for k in range(5):
        m = random_mesh(rng, colors=k % 2 == 0, labels=k % 3 == 0)
        p = tmp_path / f"m{k}.ply"
        save_scene(m, p, binary=binary)
        r = load_scene(p)
        assert r.vertices.tobytes() == m.vertices.tobytes()
        np.testing.assert_array_equal(r.faces, m.faces)
        if m.colors is None:
            assert r.colors is None
        else:
            np.testing.assert_array_equal(r.colors, m.colors)
        if m.labels is not None:
            np.testing.assert_array_equal(r.labels, m.labels)


def test_quads_are_fan_triangulated(tmp_path):
    text = STRIP.replace(b"element face 2", b"element face 1").replace(b"3 0 1 2\n3 1 3 2\n", b"4 0 1 3 2\n")
    p = tmp_path / "q.ply"
    p.write_bytes(text)
    np.testing.assert_array_equal(load_scene(p).faces, [[0, 1, 3], [0, 3, 2]])


def test_mesh_invariants():
    v = np.zeros((4, 3))
    with pytest.raises(ValueError):
        SceneMesh(v, [[0, 1, 4]])
    with pytest.raises(ValueError):
        SceneMesh(v, [[0, 1, 1]])
    with pytest.raises(ValueError):
        SceneMesh(v, [[0, 1, 2]], colors=np.zeros((3, 3)))
    # valid boundary cases are accepted
    SceneMesh(v, [[0, 1, 3]], colors=np.full((4, 3), 255.0))
    m = SceneMesh(v, [[0, 1, 2]])
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 1.0


def test_sparse_labels(tmp_path):
    mesh = SceneMesh(np.zeros((10, 3)))
    p = tmp_path / "l.csv"
    p.write_text("0,3\n7,1")
    assert load_sparse_labels(p, mesh).entries == {0: 3, 7: 1}
    p.write_text("")
    assert len(load_sparse_labels(p, mesh)) == 0
    p.write_text("12,0\n")
    with pytest.raises(LabelError):
        load_sparse_labels(p, mesh)
    p.write_text("1,20\n")
    with pytest.raises(LabelError):
        load_sparse_labels(p, mesh)
    p.write_text("1,2\n1,3\n")
    with pytest.raises(LabelError):
        load_sparse_labels(p, mesh)


def test_sparse_label_round_trip(tmp_path):
    mesh = SceneMesh(np.zeros((100, 3)))
    labels = SparseLabelSet({5: 2, 17: 19, 0: 0})
    save_sparse_labels(labels, tmp_path / "s.csv")
    assert load_sparse_labels(tmp_path / "s.csv", mesh).entries == labels.entries


def test_pseudo_label_format(tmp_path):
    p = tmp_path / "p.csv"
    save_pseudo_labels(PseudoLabelSet([3], [5], [0.91]), p)
    assert p.read_text().splitlines() == ["vertex_index,category_id,posterior", "3,5,0.910000"]
    save_pseudo_labels(PseudoLabelSet.empty(), p)
    assert p.read_text() == "vertex_index,category_id,posterior\n"
    assert len(load_pseudo_labels(p)) == 0


def test_pseudo_label_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    idx = rng.permutation(10**5)[:10**4]
    labels = PseudoLabelSet(idx, rng.integers(0, 20, 10**4), rng.random(10**4))
    save_pseudo_labels(labels, tmp_path / "p.csv")
    back = load_pseudo_labels(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.indices, labels.indices)
    np.testing.assert_array_equal(back.categories, labels.categories)
    np.testing.assert_allclose(back.posteriors, labels.posteriors, atol=5e-7)


def test_pseudo_label_validation():
    with pytest.raises(ValueError):
        PseudoLabelSet([1, 1], [0, 0], [0.5, 0.6])
    with pytest.raises(ValueError):
        PseudoLabelSet([1], [0], [1.2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4), min_size=1, max_size=30))
def test_prediction_argmax(rows):
    logits = np.array(rows)
    pf = PredictionField(logits)
    np.testing.assert_array_equal(pf.predicted, np.argmax(logits, axis=1))
