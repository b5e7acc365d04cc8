import io

import numpy as np
import pytest

from ndp4nd.errors import DataFormatError, ParameterError
from ndp4nd.graph import (
    Topology,
    TopologySpec,
    dump_edge_list,
    generate_topology,
    in_degree,
    load_edge_list,
)

from conftest import empty_topology


def test_grid_3x3_has_12_edges():
    # 2rc - r - c = 18 - 3 - 3
    top = generate_topology(TopologySpec(kind="grid", rows=3, cols=3), seed=0)
    assert top.n == 9
    assert top.num_edges == 12


def test_complete_graph_edges_and_weights():
    top = generate_topology(TopologySpec(kind="complete", n=5), seed=0)
    assert top.num_edges == 10
    off_diag = top.adjacency[~np.eye(5, dtype=bool)]
    assert np.all(off_diag == 1.0)
    assert np.all(np.diag(top.adjacency) == 0.0)


def test_er_with_zero_probability_is_empty():
    top = generate_topology(TopologySpec(kind="random", n=50, edge_prob=0.0), seed=123)
    assert top.num_edges == 0


@pytest.mark.parametrize("spec", [
    TopologySpec(kind="grid", rows=4, cols=5),
    TopologySpec(kind="random", n=60, edge_prob=0.08),
    TopologySpec(kind="power_law", n=60, attach_count=2),
    TopologySpec(kind="small_world", n=60, ring_neighbors=4, rewire_prob=0.1),
    TopologySpec(kind="community", n=60),
    TopologySpec(kind="complete", n=12),
])
def test_generators_deterministic_and_symmetric(spec):
    a = generate_topology(spec, seed=7)
    b = generate_topology(spec, seed=7)
    assert np.array_equal(a.adjacency, b.adjacency)
    assert np.array_equal(a.adjacency, a.adjacency.T)
    assert np.all(np.diag(a.adjacency) == 0.0)
    assert np.all(a.adjacency >= 0.0)
    c = generate_topology(spec, seed=8)
    if spec.kind not in ("grid", "complete"):
        assert not np.array_equal(a.adjacency, c.adjacency)


def test_power_law_edge_count():
    # m new edges per node beyond the m-node seed set
    top = generate_topology(TopologySpec(kind="power_law", n=50, attach_count=2), seed=1)
    assert top.num_edges == 2 * (50 - 2)


def test_invalid_specs_raise():
    with pytest.raises(ParameterError):
        generate_topology(TopologySpec(kind="small_world", n=4, ring_neighbors=4), seed=0)
    with pytest.raises(ParameterError):
        generate_topology(TopologySpec(kind="power_law", n=3, attach_count=3), seed=0)
    with pytest.raises(ParameterError):
        generate_topology(TopologySpec(kind="random", n=10, edge_prob=1.5), seed=0)
    with pytest.raises(ParameterError):
        generate_topology(TopologySpec(kind="empirical", n=3), seed=0)


def test_load_edge_list_undirected():
    top = load_edge_list(io.StringIO("0 1\n1 2\n"))
    assert top.n == 3
    assert top.kind == "empirical"
    for l, j in ((0, 1), (1, 0), (1, 2), (2, 1)):
        assert top.adjacency[l, j] == 1.0
    assert top.adjacency[0, 2] == 0.0


def test_load_edge_list_directed_weighted():
    top = load_edge_list(io.StringIO("0 1 2.5\n"), directed=True)
    assert top.adjacency[1, 0] == 2.5
    assert top.adjacency[0, 1] == 0.0


def test_load_edge_list_malformed_token():
    with pytest.raises(DataFormatError, match="line 1"):
        load_edge_list(io.StringIO("0 x\n"))


def test_load_edge_list_errors():
    with pytest.raises(DataFormatError, match="line 2"):
        load_edge_list(io.StringIO("0 1\n0 1 2 3\n"))
    with pytest.raises(ParameterError, match="negative"):
        load_edge_list(io.StringIO("0 1 -2.0\n"))
    with pytest.raises(DataFormatError):
        load_edge_list(io.StringIO("# only a comment\n"))


def test_edge_list_round_trip():
    spec = TopologySpec(kind="power_law", n=30, attach_count=2)
    top = generate_topology(spec, seed=5)
    text = dump_edge_list(top)
    again = load_edge_list(io.StringIO(text), directed=top.directed)
    assert again.n == top.n
    assert np.array_equal(again.adjacency, top.adjacency)


def test_in_degree_complete():
    top = generate_topology(TopologySpec(kind="complete", n=5), seed=0)
    for l in range(5):
        assert in_degree(top, l) == 4


def test_in_degree_counts_edges_not_weights():
    top = load_edge_list(io.StringIO("0 1 2.5\n"), directed=True)
    assert in_degree(top, 1) == 1
    assert in_degree(top, 0) == 0


def test_in_degree_empty_and_bounds():
    top = empty_topology(4)
    assert in_degree(top, 2) == 0
    with pytest.raises(ParameterError):
        in_degree(top, 4)


def test_topology_invariants_enforced():
    with pytest.raises(ParameterError):
        Topology(n=2, adjacency=np.array([[0.0, 1.0], [0.0, 0.0]]),
                 directed=False, kind="random")
    with pytest.raises(ParameterError):
        Topology(n=2, adjacency=np.array([[1.0, 0.0], [0.0, 0.0]]),
                 directed=True, kind="random")
    with pytest.raises(ParameterError):
        Topology(n=2, adjacency=-np.ones((2, 2)), directed=True, kind="empirical")
