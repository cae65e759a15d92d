import os
import stat

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grbench.errors import (
    DuplicateAddError,
    EmptyNeighborhoodError,
    IoFailureError,
    LabelOutOfRangeError,
    MissingFileError,
    MissingRemoveError,
    SelfLoopForbiddenError,
    ShapeMismatchError,
)
from grbench.graph import (
    EdgeEdit,
    GraphBundle,
    InjectionPatch,
    apply_edits,
    apply_injection,
    degrees,
    load_bundle,
    save_bundle,
)
from grbench.data import synthetic_dataset

from conftest import path_graph, random_graph


def write_raw_bundle(root, n, edges, d=2, num_classes=2):
    root.mkdir(parents=True, exist_ok=True)
    edges = np.asarray(edges, dtype="<u4").reshape(-1, 2)
    (root / "meta.json").write_text(
        '{"num_nodes": %d, "num_edges": %d, "num_features": %d, "num_classes": %d}'
        % (n, edges.shape[0], d, num_classes)
    )
    edges.tofile(root / "edges.bin")
    np.zeros(n * d, "<f4").tofile(root / "features.bin")
    np.zeros(n, "<u4").tofile(root / "labels.bin")


def is_symmetric(g):
    a = g.adjacency
    return (a != a.T).nnz == 0


def test_empty_edge_file_gives_isolated_nodes(tmp_path):
    write_raw_bundle(tmp_path / "b", 3, [])
    g = load_bundle(tmp_path / "b")
    assert g.num_edges == 0
    assert degrees(g).tolist() == [0, 0, 0]


def test_duplicate_and_self_loop_are_canonicalized(tmp_path):
    write_raw_bundle(tmp_path / "b", 2, [(0, 1), (1, 0), (1, 1)])
    g = load_bundle(tmp_path / "b")
    assert g.num_edges == 1
    assert g.edge_array().tolist() == [[0, 1]]
    assert g.indices.tolist() == [1, 0]


def test_missing_file(tmp_path):
    write_raw_bundle(tmp_path / "b", 3, [])
    os.remove(tmp_path / "b" / "labels.bin")
    with pytest.raises(MissingFileError):
        load_bundle(tmp_path / "b")


def test_edge_count_mismatch(tmp_path):
    write_raw_bundle(tmp_path / "b", 3, [(0, 1)])
    (tmp_path / "b" / "meta.json").write_text(
        '{"num_nodes": 3, "num_edges": 2, "num_features": 2, "num_classes": 2}'
    )
    with pytest.raises(ShapeMismatchError):
        load_bundle(tmp_path / "b")


def test_label_out_of_range(tmp_path):
    write_raw_bundle(tmp_path / "b", 3, [], num_classes=2)
    np.array([0, 1, 2], "<u4").tofile(tmp_path / "b" / "labels.bin")
    with pytest.raises(LabelOutOfRangeError):
        load_bundle(tmp_path / "b")


def test_save_load_round_trip(tmp_path):
    g = synthetic_dataset("toy")
    save_bundle(g, tmp_path / "toy")
    back = load_bundle(tmp_path / "toy")
    assert back.equals(g)
    assert back.features.tobytes() == g.features.tobytes()


def test_save_load_edgeless(tmp_path):
    g = GraphBundle.from_edges(4, [], np.ones((4, 3), np.float32), np.zeros(4, np.int64), 2)
    save_bundle(g, tmp_path / "e")
    assert load_bundle(tmp_path / "e").num_edges == 0


@pytest.mark.skipif(os.geteuid() == 0, reason="root ignores directory permissions")
def test_save_read_only(tmp_path):
    ro = tmp_path / "ro"
    ro.mkdir()
    ro.chmod(stat.S_IRUSR | stat.S_IXUSR)
    with pytest.raises(IoFailureError):
        save_bundle(path_graph(), ro / "g")


def test_save_unwritable_target(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(IoFailureError):
        save_bundle(path_graph(), blocker / "g")


def test_degrees():
    assert degrees(path_graph()).tolist() == [1, 2, 1]
    lone = GraphBundle.from_edges(1, [], np.zeros((1, 1), np.float32), np.zeros(1, np.int64), 1)
    assert degrees(lone).tolist() == [0]


def test_synth_cora_mean_degree():
    g = synthetic_dataset("synth-cora")
    assert (g.num_nodes, g.num_edges, g.num_features, g.num_classes) == (2680, 5148, 302, 7)
    assert degrees(g).mean() == pytest.approx(2 * 5148 / 2680)


def test_constructor_invariants():
    with pytest.raises(ShapeMismatchError):
        GraphBundle.from_edges(3, [(0, 1)], np.zeros((2, 2), np.float32), np.zeros(3, np.int64), 2)
    with pytest.raises(LabelOutOfRangeError):
        GraphBundle.from_edges(2, [(0, 1)], np.zeros((2, 2), np.float32), np.array([0, 3]), 2)
    g = path_graph()
    with pytest.raises(ValueError):
        g.features[0, 0] = 1.0


def test_remove_edge():
    g = apply_edits(path_graph(), [EdgeEdit("remove", 0, 1)])
    assert degrees(g).tolist() == [0, 1, 1]


def test_add_then_remove_is_identity():
    g = path_graph()
    out = apply_edits(g, [EdgeEdit("add", 0, 2), EdgeEdit("remove", 2, 0)])
    assert out.equals(g)


def test_edit_errors():
    g = path_graph()
    with pytest.raises(DuplicateAddError):
        apply_edits(g, [EdgeEdit("add", 1, 0)])
    with pytest.raises(MissingRemoveError):
        apply_edits(g, [EdgeEdit("remove", 0, 2)])
    with pytest.raises(SelfLoopForbiddenError):
        apply_edits(g, [EdgeEdit("add", 1, 1)])


def test_random_flips_bookkeeping():
    g = random_graph(50, 0.1, seed=3)
    rng = np.random.default_rng(0)
    current = g.edge_set()
    edits, adds, removes = [], 0, 0
    while len(edits) < 100:
        u, v = sorted(rng.choice(50, 2, replace=False).tolist())
        if (u, v) in current:
            edits.append(EdgeEdit("remove", u, v))
            current.remove((u, v))
            removes += 1
        else:
            edits.append(EdgeEdit("add", u, v))
            current.add((u, v))
            adds += 1
    out = apply_edits(g, edits)
    assert out.num_edges == g.num_edges + adds - removes
    assert out.edge_set() == current
    assert is_symmetric(out)


def test_inject_one_node():
    g = path_graph()
    patch = InjectionPatch(1, np.zeros((1, 2)), [(0, 0)])
    out = apply_injection(g, patch)
    assert degrees(out).tolist() == [2, 2, 1, 1]
    assert out.labels[-1] == g.sentinel


def test_inject_nothing_is_identity():
    g = path_graph()
    assert apply_injection(g, InjectionPatch.empty(2)) is g


def test_inject_isolated_node_rejected():
    with pytest.raises(EmptyNeighborhoodError):
        apply_injection(path_graph(), InjectionPatch(2, np.zeros((2, 2)), [(0, 0)]))


def test_inject_preset_into_synth_cora():
    g = synthetic_dataset("synth-cora")
    rng = np.random.default_rng(0)
    rows = [(i, int(t)) for i in range(20) for t in rng.choice(g.num_nodes, 20, replace=False)]
    patch = InjectionPatch(20, np.zeros((20, g.num_features)), rows)
    out = apply_injection(g, patch)
    assert out.num_nodes == 2700
    assert out.num_edges == 5148 + 400
    # independent recount from the stored rows
    assert len(out.edge_set()) == 5548
    assert is_symmetric(out)
    # original block untouched
    assert out.features[:2680].tobytes() == g.features.tobytes()
    sub = out.adjacency[:2680, :2680]
    assert (sub != g.adjacency).nnz == 0


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(2, 30),
    p=st.floats(0.0, 0.6),
    k=st.integers(1, 5),
    seed=st.integers(0, 10_000),
)
def test_injection_preserves_symmetry_and_host(n, p, k, seed):
    g = random_graph(n, p, seed=seed)
    rng = np.random.default_rng(seed)
    rows = [(i, int(rng.integers(n))) for i in range(k)]
    out = apply_injection(g, InjectionPatch(k, rng.normal(size=(k, 4)), rows))
    assert is_symmetric(out)
    assert out.features[:n].tobytes() == g.features.tobytes()
    assert (out.adjacency[:n, :n] != g.adjacency).nnz == 0
    assert out.adjacency.diagonal().sum() == 0
