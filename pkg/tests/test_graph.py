import numpy as np
import pytest

from stablegnn.graph import (BipartiteGraph, Graph, GraphFormatError, generate_synthetic,
                             generate_synthetic_bipartite, load_graph, load_interactions, save_graph,
                             save_interactions)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def three_nodes(tmp_path):
    feats = write(tmp_path / "f.csv", "1,0\n0,1\n1,1\n")
    labels = write(tmp_path / "y.tsv", "0\t0\n1\t1\n2\t0\n")
    return tmp_path, feats, labels


def test_empty_edge_file_gives_zero_degrees(three_nodes):
    d, f, y = three_nodes
    g = load_graph(write(d / "e.tsv", "# nothing\n"), f, y)
    assert g.num_nodes == 3
    np.testing.assert_array_equal(g.degrees(), [0, 0, 0])
    np.testing.assert_array_equal(g.offsets, [0, 0, 0, 0])


def test_single_edge_is_symmetrised(three_nodes):
    d, f, y = three_nodes
    g = load_graph(write(d / "e.tsv", "0\t1\n"), f, y)
    assert g.neighbors_of(0).tolist() == [1]
    assert g.neighbors_of(1).tolist() == [0]
    assert g.neighbors_of(2).tolist() == []


def test_duplicate_edges_collapse(three_nodes):
    d, f, y = three_nodes
    g = load_graph(write(d / "e.tsv", "0\t1\n1\t0\n0\t1\n2\t2\n2\t2\n"), f, y)
    # set-dedup oracle over unordered pairs, stored both ways
    pairs = {(0, 1), (1, 0), (0, 1), (2, 2)}
    expected = {(a, b) for a, b in pairs} | {(b, a) for a, b in pairs}
    assert {tuple(e) for e in g.edge_array().tolist()} == expected
    assert g.num_edges == len(expected)


def test_load_errors_carry_line_numbers(three_nodes):
    d, f, y = three_nodes
    with pytest.raises(GraphFormatError, match=r"e\.tsv:2: dangling"):
        load_graph(write(d / "e.tsv", "0\t1\n0\t9\n"), f, y)
    with pytest.raises(GraphFormatError, match=r":1: non-integer"):
        load_graph(write(d / "e2.tsv", "a\tb\n"), f, y)
    with pytest.raises(GraphFormatError, match=r"bad\.csv:2: non-numeric"):
        load_graph(write(d / "e3.tsv", ""), write(d / "bad.csv", "1,2\nx,3\n"), y)
    with pytest.raises(GraphFormatError, match="label count"):
        load_graph(write(d / "e4.tsv", ""), f, write(d / "short.tsv", "0\t1\n"))


def test_attributes_file(three_nodes):
    d, f, y = three_nodes
    attrs = write(d / "a.csv", "node_id,age_group,gender\n0,<=25,M\n1,>25,F\n2,>25,M\n")
    g = load_graph(write(d / "e.tsv", "0\t2\n"), f, y, attrs)
    assert g.attributes["gender"].tolist() == ["M", "F", "M"]
    with pytest.raises(GraphFormatError, match="node 2"):
        load_graph(d / "e.tsv", f, y, write(d / "b.csv", "node_id,gender\n0,M\n1,F\n"))


def test_graph_invariants_checked():
    with pytest.raises(ValueError):
        Graph(2, [0, 1], [1], np.zeros((2, 1)), [0, 0])
    with pytest.raises(ValueError):
        Graph(2, [0, 1, 2], [1, 5], np.zeros((2, 1)), [0, 0])


def test_message_edges_have_one_self_loop_per_node():
    g = Graph.from_edges(4, [(0, 1), (1, 2), (3, 3)], np.zeros((4, 2)), [0, 1, 0, 1])
    me = g.message_edges
    loops = me.src == me.dst
    np.testing.assert_array_equal(np.bincount(me.dst[loops], minlength=4), [1, 1, 1, 1])
    assert np.all(np.diff(me.dst) >= 0)
    np.testing.assert_array_equal(me.degree, [2, 3, 2, 1])


def test_save_load_round_trip(tmp_path):
    g = generate_synthetic(60, 3, 4, 0.2, 0.05, 1.0, seed=1)
    paths = [tmp_path / n for n in ("e.tsv", "f.csv", "y.tsv", "a.csv")]
    save_graph(g, *paths)
    h = load_graph(*paths)
    np.testing.assert_array_equal(h.offsets, g.offsets)
    np.testing.assert_array_equal(h.neighbors, g.neighbors)
    np.testing.assert_array_equal(h.features, g.features)
    assert h.attributes["gender"].tolist() == g.attributes["gender"].tolist()


def test_synthetic_no_cross_class_edges_when_inter_is_zero():
    g = generate_synthetic(300, 3, 4, 0.1, 0.0, 1.0, seed=0)
    e = g.edge_array()
    assert e.size and np.all(g.labels[e[:, 0]] == g.labels[e[:, 1]])


def test_synthetic_csr_symmetry_and_labels():
    g = generate_synthetic(200, 4, 3, 0.1, 0.01, 1.0, seed=2)
    e = {tuple(x) for x in g.edge_array().tolist()}
    assert all((b, a) in e for a, b in e)
    assert set(g.labels.tolist()) == {0, 1, 2, 3}


def test_synthetic_zero_signal_features_are_class_free():
    g = generate_synthetic(4000, 2, 3, 0.0, 0.0, 0.0, seed=3)
    means = [g.features[g.labels == c].mean(axis=0) for c in (0, 1)]
    assert np.max(np.abs(means[0] - means[1])) < 0.15


def test_synthetic_class_signal_sets_mean_norm():
    g = generate_synthetic(6000, 2, 5, 0.0, 0.0, 2.0, seed=4)
    for c in (0, 1):
        assert abs(np.linalg.norm(g.features[g.labels == c].mean(axis=0)) - 2.0) < 0.15


def test_synthetic_intra_inter_ratio():
    # Monte-Carlo frequency: expected intra/inter count ratio for two balanced
    # classes is (2 * C(1000, 2) * 0.02) / (1000 * 1000 * 0.002) = 19.98 / 2 ~ 10
    g = generate_synthetic(2000, 2, 2, 0.02, 0.002, 1.0, seed=5)
    e = g.edge_array()
    e = e[e[:, 0] < e[:, 1]]
    same = g.labels[e[:, 0]] == g.labels[e[:, 1]]
    ratio = same.sum() / (~same).sum()
    assert 8.0 <= ratio <= 12.0


def test_synthetic_is_deterministic():
    a = generate_synthetic(100, 2, 3, 0.1, 0.01, 1.0, seed=9)
    b = generate_synthetic(100, 2, 3, 0.1, 0.01, 1.0, seed=9)
    np.testing.assert_array_equal(a.neighbors, b.neighbors)
    np.testing.assert_array_equal(a.features, b.features)


def test_load_interactions_single_line(tmp_path):
    bip = load_interactions(write(tmp_path / "i.tsv", "0\t5\t1\n"))
    assert (bip.num_users, bip.num_items) == (1, 1)
    offsets, items = bip.user_csr()
    dense = items[offsets[0]:offsets[1]]
    assert bip.item_ids[dense].tolist() == [5]
    assert bip.tags == [1]


def test_load_interactions_days_and_errors(tmp_path):
    lines = "".join(f"{u}\t{u * 3 % 7}\t{d}\n" for d in range(1, 6) for u in range(4))
    bip = load_interactions(write(tmp_path / "i.tsv", lines))
    assert bip.tags == [1, 2, 3, 4, 5]
    with pytest.raises(GraphFormatError, match=":2:"):
        load_interactions(write(tmp_path / "bad.tsv", "0\t1\t1\n0\t1\n"))


def test_interaction_csr_round_trip(tmp_path):
    bip = generate_synthetic_bipartite(30, 40, 2, 5, seed=1)
    u_off, u_items = bip.user_csr()
    i_off, i_users = bip.item_csr()
    from_users = sorted((u, int(i)) for u in range(bip.num_users) for i in u_items[u_off[u]:u_off[u + 1]])
    from_items = sorted((int(u), i) for i in range(bip.num_items) for u in i_users[i_off[i]:i_off[i + 1]])
    original = sorted(zip(bip.users.tolist(), bip.items.tolist()))
    assert from_users == original == from_items
    save_interactions(bip, tmp_path / "i.tsv", tmp_path / "a.csv")
    back = load_interactions(tmp_path / "i.tsv", tmp_path / "a.csv")
    assert back.num_interactions == bip.num_interactions
    assert back.attributes["gender"].tolist() == bip.attributes["gender"].tolist()


def test_synthetic_bipartite_day_one_covers_everyone():
    bip = generate_synthetic_bipartite(50, 120, 3, 8, seed=0)
    day1 = bip.select(1)
    assert set(day1.users.tolist()) == set(range(50))
    assert set(day1.items.tolist()) == set(range(120))
    assert bip.tags == [1, 2, 3]


def test_bipartite_range_checks():
    with pytest.raises(ValueError):
        BipartiteGraph(1, 1, [0], [3], [1])
