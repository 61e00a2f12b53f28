import numpy as np
from hypothesis import strategies as st

from minagg.graph import AttributedGraph, default_beta


@st.composite
def small_graphs(draw, max_nodes: int = 8, integer_weights: bool = False):
    """Random valid step-0 or partially relaxed graphs with at most ``max_nodes`` nodes."""
    n = draw(st.integers(1, max_nodes))
    pairs = [(u, v) for u in range(n) for v in range(u + 1, n)]
    keep = draw(st.lists(st.booleans(), min_size=len(pairs), max_size=len(pairs)))
    edges = [p for p, k in zip(pairs, keep) if k]
    if integer_weights:
        w = draw(st.lists(st.integers(0, 9), min_size=len(edges), max_size=len(edges)))
    else:
        w = draw(st.lists(st.floats(0, 10, allow_nan=False), min_size=len(edges), max_size=len(edges)))
    w = [float(x) for x in w]
    beta = default_beta(w)
    reached = draw(st.lists(st.booleans(), min_size=n, max_size=n))
    vals = draw(st.lists(st.floats(0, 1, allow_nan=False), min_size=n, max_size=n))
    x = [v * (beta - 1) if r else beta for v, r in zip(vals, reached)]
    x[0] = 0.0
    return AttributedGraph.from_edges(n, [(u, v, c) for (u, v), c in zip(edges, w)], x, beta, None)


def random_graph(rng: np.random.Generator, n: int, p: float = 0.4) -> AttributedGraph:
    src, dst = np.triu_indices(n, 1)
    keep = rng.random(len(src)) < p
    w = rng.uniform(0, 10, size=int(keep.sum()))
    beta = default_beta(w)
    x = np.full(n, beta)
    x[0] = 0.0
    return AttributedGraph(n, src[keep], dst[keep], w, x, beta, 0)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
